//! CSI feedback protocols between a UE and a gNB.
//!
//! * Conventional: the UE quantizes its channel estimate and sends all of it.
//! * Hybrid: both ends run twin predictors. The UE sends the quantized residual
//!   `D = H~_UE - H`, or a one-bit skip when the residual is negligible, and the
//!   gNB recovers `H~_gNB - Q_h(D)`. Each end appends its own recovered matrix to
//!   its predictor window, so identical twins stay identical. By default the
//!   recovered matrix is also the next recurrent input; see [`RecurrentFeed`].
//! * Switching: hybrid while its error stays within the conventional error
//!   `Λ = ‖H - Q_c(H)‖_F`; otherwise fall back to conventional feedback, collect a
//!   fresh initialization window, retrain the twins and resume.
//!
//! The UE estimate is the true channel (no estimation error).

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::{percentile, ChannelMatrix, ChannelTrace};
use crate::error::{Error, Result};
use crate::predictor::{self, PredictorConfig, PredictorModel, TrainingReport};
use crate::quantizer::{build_spec, quantize_matrix, QuantizerSpec};

/// How a quantizer clip range is agreed during assessment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipRule {
    /// Percentile (0..=100) of the relevant component magnitudes.
    Percentile(f64),
    Fixed(f64),
}

impl Default for ClipRule {
    fn default() -> Self {
        ClipRule::Percentile(99.9)
    }
}

/// Who decides a hybrid-to-conventional switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchSide {
    /// The simulator compares the gNB's actual error against `Λ`. Needs the true
    /// channel at the gNB, so it is an idealization.
    #[default]
    Oracle,
    /// The UE compares its own view of the hybrid error against `Λ` and signals
    /// the decision in-band. Hybrid-phase messages carry a 2-bit header.
    Ue,
}

/// What each twin stores as its recurrent input after a hybrid step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecurrentFeed {
    /// The recovered channel, the same value training used (teacher forcing).
    #[default]
    Recovered,
    /// The twin's own previous prediction (free-running).
    Prediction,
}

impl FromStr for RecurrentFeed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recovered" => Ok(RecurrentFeed::Recovered),
            "prediction" => Ok(RecurrentFeed::Prediction),
            other => Err(Error::config(format!(
                "unknown recurrent feed '{other}' (recovered|prediction)"
            ))),
        }
    }
}

impl FromStr for SwitchSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(SwitchSide::Oracle),
            "ue" => Ok(SwitchSide::Ue),
            other => Err(Error::config(format!("unknown switch side '{other}' (oracle|ue)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub quant_bits: u32,
    /// Initialization samples `S`; also the retraining window after a switch
    /// unless `retrain_window` is set.
    pub init_length: usize,
    pub predictor: PredictorConfig,
    /// Turns a hybrid session into a switching one.
    pub switching_enabled: bool,
    /// `ε_skip`: residuals with every component at most this large are skipped.
    pub skip_threshold: f64,
    /// Share of the `S` initialization samples held out for validation.
    pub valid_fraction: f64,
    pub conventional_clip: ClipRule,
    pub residual_clip: ClipRule,
    pub retrain_window: Option<usize>,
    pub switch_side: SwitchSide,
    pub recurrent_feed: RecurrentFeed,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            quant_bits: 4,
            init_length: 18_000,
            predictor: PredictorConfig::default(),
            switching_enabled: false,
            skip_threshold: 0.0,
            valid_fraction: 0.1,
            conventional_clip: ClipRule::default(),
            residual_clip: ClipRule::default(),
            retrain_window: None,
            switch_side: SwitchSide::Oracle,
            recurrent_feed: RecurrentFeed::Recovered,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.predictor.validate()?;
        build_spec(self.quant_bits, 1.0)?;
        let d = self.predictor.delay;
        if self.init_length <= d + 1 {
            return Err(Error::config(format!(
                "init_length {} must exceed d + 1 = {}",
                self.init_length,
                d + 1
            )));
        }
        if !(self.skip_threshold.is_finite() && self.skip_threshold >= 0.0) {
            return Err(Error::config(format!(
                "skip_threshold must be non-negative, got {}",
                self.skip_threshold
            )));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(Error::config(format!(
                "valid_fraction must be in (0, 1), got {}",
                self.valid_fraction
            )));
        }
        for rule in [self.conventional_clip, self.residual_clip] {
            match rule {
                ClipRule::Percentile(p) if !(0.0..=100.0).contains(&p) => {
                    return Err(Error::config(format!("clip percentile {p} outside [0, 100]")))
                }
                ClipRule::Fixed(a) if !(a.is_finite() && a > 0.0) => {
                    return Err(Error::config(format!("fixed clip must be positive, got {a}")))
                }
                _ => {}
            }
        }
        if self.retrain_window.is_some_and(|w| w <= d + 1) {
            return Err(Error::config("retrain_window must exceed d + 1"));
        }
        Ok(())
    }

    fn retrain_len(&self) -> usize {
        self.retrain_window.unwrap_or(self.init_length)
    }

    /// Splits `n` initialization samples into (train, validation) counts.
    pub fn split(&self, n: usize) -> Result<(usize, usize)> {
        let n_valid = (self.valid_fraction * n as f64).floor() as usize;
        let n_train = n - n_valid;
        let need = self.predictor.delay + 2;
        if n_train < need || n_valid < need {
            return Err(Error::config(format!(
                "{n} initialization samples leave {n_train} for training and {n_valid} for \
                 validation; each needs at least d + 2 = {need}"
            )));
        }
        Ok((n_train, n_valid))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Conventional,
    Hybrid,
    Switching,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Conventional => "conventional",
            Mode::Hybrid => "hybrid",
            Mode::Switching => "switching",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(Mode::Conventional),
            "hybrid" => Ok(Mode::Hybrid),
            "switching" => Ok(Mode::Switching),
            other => Err(Error::config(format!(
                "unknown mode '{other}' (conventional|hybrid|switching)"
            ))),
        }
    }
}

/// Feedback path actually used on a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ActiveMode {
    Conventional,
    Hybrid,
}

impl ActiveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ActiveMode::Conventional => "conventional",
            ActiveMode::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Skip,
    Residual,
    Full,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Skip => "skip",
            MessageKind::Residual => "residual",
            MessageKind::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMessage {
    pub kind: MessageKind,
    /// Quantizer level indices, real block then imaginary block; empty for a skip.
    pub indices: Vec<u64>,
    pub payload_bits: u64,
}

/// One end's predictor together with its input window (newest matrix first).
#[derive(Debug, Clone, PartialEq)]
pub struct Twin {
    model: PredictorModel,
    window: VecDeque<ChannelMatrix>,
    feed: RecurrentFeed,
}

impl Twin {
    fn new(mut model: PredictorModel, history: &[ChannelMatrix], feed: RecurrentFeed) -> Result<Self> {
        let d1 = model.window_len();
        if history.len() < d1 {
            return Err(Error::config("history shorter than the predictor window"));
        }
        let window: VecDeque<ChannelMatrix> = history.iter().rev().take(d1).cloned().collect();
        model.set_recurrent(&window[0].to_components())?;
        Ok(Self { model, window, feed })
    }

    pub fn model(&self) -> &PredictorModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut PredictorModel {
        &mut self.model
    }

    pub fn window(&self) -> &VecDeque<ChannelMatrix> {
        &self.window
    }

    /// Prediction for the next step without touching any state.
    fn peek(&self) -> Result<ChannelMatrix> {
        let window: Vec<ChannelMatrix> = self.window.iter().cloned().collect();
        let q = self.model.preprocess(&window)?;
        let out = self.model.forward_stateless(&q)?;
        let (n_r, n_t) = self.model.dims();
        predictor::postprocess(&out, n_r, n_t, self.window[0].time_index() + 1)
    }

    /// Appends `recovered` and updates the recurrent input per the feed rule.
    fn commit(&mut self, prediction: &ChannelMatrix, recovered: ChannelMatrix) -> Result<()> {
        let state = match self.feed {
            RecurrentFeed::Recovered => recovered.to_components(),
            RecurrentFeed::Prediction => prediction.to_components(),
        };
        self.model.set_recurrent(&state)?;
        self.window.pop_back();
        self.window.push_front(recovered);
        Ok(())
    }
}

/// State shared by both ends once the hybrid path is set up.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    pub residual: QuantizerSpec,
    pub predictor_seed: u64,
    pub gnb: Twin,
    pub ue: Twin,
    pub report: TrainingReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionContext {
    pub conventional: QuantizerSpec,
    /// Absent for a conventional-only session.
    pub hybrid: Option<HybridState>,
    skip_threshold: f64,
}

impl SessionContext {
    pub fn hybrid(&self) -> Result<&HybridState> {
        self.hybrid
            .as_ref()
            .ok_or_else(|| Error::config("session has no twin predictors"))
    }
}

fn clip_from(rule: ClipRule, magnitudes: impl FnOnce() -> Vec<f64>) -> f64 {
    match rule {
        ClipRule::Fixed(a) => a,
        ClipRule::Percentile(p) => percentile(&magnitudes(), p),
    }
}

fn component_magnitudes<'a>(samples: impl IntoIterator<Item = &'a ChannelMatrix>) -> Vec<f64> {
    samples
        .into_iter()
        .flat_map(|m| m.entries().iter().flat_map(|z| [z.re.abs(), z.im.abs()]))
        .collect()
}

fn quantize_trace(spec: &QuantizerSpec, trace: &ChannelTrace) -> Result<ChannelTrace> {
    let samples = trace
        .samples()
        .iter()
        .map(|m| quantize_matrix(spec, m).map(|(q, _)| q))
        .collect::<Result<Vec<_>>>()?;
    ChannelTrace::new(trace.n_r(), trace.n_t(), trace.sample_period(), samples, trace.source_tag())
}

/// Trains (or reuses) twins on quantized history and agrees on the residual quantizer.
fn setup_hybrid(
    cfg: &ProtocolConfig,
    conventional: &QuantizerSpec,
    quantized: &ChannelTrace,
    truth: &ChannelTrace,
    pretrained: Option<&PredictorModel>,
) -> Result<HybridState> {
    let (n_train, _) = cfg.split(quantized.len())?;
    let train_q = quantized.slice(0, n_train);
    let valid_q = quantized.slice(n_train, quantized.len());
    let (gnb_model, ue_model, report) = match pretrained {
        Some(model) => {
            let preds = model.teacher_forced(&valid_q)?;
            let truth_valid = &valid_q.samples()[cfg.predictor.delay + 1..];
            let valid_nmse_db = crate::metrics::nmse(truth_valid, &preds).map(|(_, db)| db).unwrap_or(f64::NAN);
            let report = TrainingReport {
                train_mse: Vec::new(),
                valid_mse: Vec::new(),
                valid_nmse_db,
                wall_seconds: 0.0,
                multiply_count: model.count_multiplies(),
            };
            (model.clone(), model.clone(), report)
        }
        None => {
            // Each end trains on its own copy of the shared history.
            let (gnb, report) = predictor::train(&cfg.predictor, &train_q, &valid_q)?;
            let (ue, _) = predictor::train(&cfg.predictor, &train_q, &valid_q)?;
            (gnb, ue, report)
        }
    };

    // The UE knows the true channel, so it measures the residual range on the
    // validation split and signals the clip.
    let clip = clip_from(cfg.residual_clip, || {
        let preds = ue_model.teacher_forced(&valid_q).unwrap_or_default();
        let truth_valid = &truth.samples()[n_train + cfg.predictor.delay + 1..];
        preds
            .iter()
            .zip(truth_valid)
            .flat_map(|(p, h)| {
                p.entries()
                    .iter()
                    .zip(h.entries())
                    .flat_map(|(a, b)| [(a.re - b.re).abs(), (a.im - b.im).abs()])
                    .collect::<Vec<_>>()
            })
            .collect()
    });
    let clip = if clip > 0.0 && clip.is_finite() { clip } else { conventional.clip() };
    let residual = build_spec(cfg.quant_bits, clip)?;

    let history = quantized.samples();
    Ok(HybridState {
        residual,
        predictor_seed: cfg.predictor.seed,
        gnb: Twin::new(gnb_model, history, cfg.recurrent_feed)?,
        ue: Twin::new(ue_model, history, cfg.recurrent_feed)?,
        report,
    })
}

fn conventional_spec(cfg: &ProtocolConfig, init: &ChannelTrace) -> Result<QuantizerSpec> {
    let clip = clip_from(cfg.conventional_clip, || component_magnitudes(init.samples()));
    if clip.is_nan() || clip <= 0.0 {
        return Err(Error::Degenerate("conventional clip range is zero".into()));
    }
    build_spec(cfg.quant_bits, clip)
}

fn check_init(cfg: &ProtocolConfig, init_trace: &ChannelTrace) -> Result<ChannelTrace> {
    cfg.validate()?;
    if init_trace.len() < cfg.init_length {
        return Err(Error::config(format!(
            "initialization needs {} samples, trace has {}",
            cfg.init_length,
            init_trace.len()
        )));
    }
    Ok(init_trace.slice(0, cfg.init_length))
}

/// Handshake and initialization: agrees both quantizers and trains the twins on
/// the first `S` samples of `init_trace`, as seen through `Q_c`.
pub fn run_assessment(cfg: &ProtocolConfig, init_trace: &ChannelTrace) -> Result<SessionContext> {
    assess(cfg, init_trace, true, None)
}

/// As [`run_assessment`], but both ends load `model` instead of training.
pub fn run_assessment_with_model(
    cfg: &ProtocolConfig,
    init_trace: &ChannelTrace,
    model: &PredictorModel,
) -> Result<SessionContext> {
    if model.config().delay != cfg.predictor.delay {
        return Err(Error::config("pretrained model delay differs from the protocol config"));
    }
    assess(cfg, init_trace, true, Some(model))
}

fn assess(
    cfg: &ProtocolConfig,
    init_trace: &ChannelTrace,
    with_twins: bool,
    pretrained: Option<&PredictorModel>,
) -> Result<SessionContext> {
    let init = check_init(cfg, init_trace)?;
    let conventional = conventional_spec(cfg, &init)?;
    let hybrid = if with_twins {
        let quantized = quantize_trace(&conventional, &init)?;
        Some(setup_hybrid(cfg, &conventional, &quantized, &init, pretrained)?)
    } else {
        None
    };
    Ok(SessionContext {
        conventional,
        hybrid,
        skip_threshold: cfg.skip_threshold,
    })
}

/// UE sends `Q_c(H)`; the gNB recovers it as is.
pub fn step_conventional(ctx: &SessionContext, h_true: &ChannelMatrix) -> Result<(ChannelMatrix, FeedbackMessage)> {
    let spec = &ctx.conventional;
    let indices = spec.encode_matrix(h_true)?;
    let recovered = spec.decode_matrix(&indices, h_true.n_r(), h_true.n_t(), h_true.time_index())?;
    let msg = FeedbackMessage {
        kind: MessageKind::Full,
        indices,
        payload_bits: spec.payload_bits(h_true.n_r(), h_true.n_t()),
    };
    Ok((recovered, msg))
}

/// Both ends' view of one hybrid step before it is committed.
struct HybridCandidate {
    pred_gnb: ChannelMatrix,
    pred_ue: ChannelMatrix,
    recovered_gnb: ChannelMatrix,
    recovered_ue: ChannelMatrix,
    msg: FeedbackMessage,
}

impl HybridCandidate {
    fn in_sync(&self) -> bool {
        self.pred_gnb == self.pred_ue
    }
}

fn hybrid_candidate(ctx: &SessionContext, h_true: &ChannelMatrix) -> Result<HybridCandidate> {
    let hy = ctx.hybrid()?;
    let pred_ue = hy.ue.peek()?;
    let pred_gnb = hy.gnb.peek()?;
    let t = h_true.time_index();
    let (pred_ue, pred_gnb) = (pred_ue.with_time_index(t), pred_gnb.with_time_index(t));
    let residual = pred_ue.sub(h_true)?;
    let (n_r, n_t) = h_true.dims();
    if residual.max_abs_component() <= ctx.skip_threshold {
        return Ok(HybridCandidate {
            recovered_gnb: pred_gnb.clone(),
            recovered_ue: pred_ue.clone(),
            pred_gnb,
            pred_ue,
            msg: FeedbackMessage {
                kind: MessageKind::Skip,
                indices: Vec::new(),
                payload_bits: 1,
            },
        });
    }
    let indices = hy.residual.encode_matrix(&residual)?;
    let decoded = hy.residual.decode_matrix(&indices, n_r, n_t, t)?;
    Ok(HybridCandidate {
        recovered_gnb: pred_gnb.sub(&decoded)?,
        recovered_ue: pred_ue.sub(&decoded)?,
        pred_gnb,
        pred_ue,
        msg: FeedbackMessage {
            kind: MessageKind::Residual,
            indices,
            payload_bits: 1 + hy.residual.payload_bits(n_r, n_t),
        },
    })
}

fn commit_hybrid(ctx: &mut SessionContext, cand: &HybridCandidate) -> Result<()> {
    let hy = ctx.hybrid.as_mut().expect("candidate implies twins");
    hy.gnb.commit(&cand.pred_gnb, cand.recovered_gnb.clone())?;
    hy.ue.commit(&cand.pred_ue, cand.recovered_ue.clone())
}

/// One hybrid step; both twins advance.
///
/// Fails with a protocol error if the twins predict differently.
pub fn step_hybrid(ctx: &mut SessionContext, h_true: &ChannelMatrix) -> Result<(ChannelMatrix, FeedbackMessage)> {
    let cand = hybrid_candidate(ctx, h_true)?;
    if !cand.in_sync() {
        return Err(Error::Protocol {
            step: h_true.time_index(),
            reason: "gNB and UE twins predicted different channels".into(),
        });
    }
    commit_hybrid(ctx, &cand)?;
    Ok((cand.recovered_gnb, cand.msg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Time index of the channel sample.
    pub step: u64,
    pub mode: ActiveMode,
    pub kind: MessageKind,
    pub payload_bits: u64,
    /// `‖H - Ĥ_gNB‖²_F`.
    pub sq_err: f64,
    pub truth: ChannelMatrix,
    pub recovered: ChannelMatrix,
    /// Switching threshold `Λ` and the hybrid candidate error it was compared with.
    pub threshold: Option<f64>,
    pub hybrid_err: Option<f64>,
    /// The twins disagreed on this step.
    pub desync: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssessmentInfo {
    /// First step served by the twins trained in this assessment.
    pub from_step: u64,
    pub residual_clip: f64,
    pub valid_nmse_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub mode: Mode,
    pub records: Vec<StepRecord>,
    pub cumulative_bits: u64,
    pub conventional_clip: f64,
    pub assessments: Vec<AssessmentInfo>,
    /// Steps on which the session fell back from hybrid to conventional.
    pub switch_steps: Vec<u64>,
    /// Steps on which retrained twins took over again.
    pub resume_steps: Vec<u64>,
}

impl SessionLog {
    pub fn truths(&self) -> Vec<ChannelMatrix> {
        self.records.iter().map(|r| r.truth.clone()).collect()
    }

    pub fn recovered(&self) -> Vec<ChannelMatrix> {
        self.records.iter().map(|r| r.recovered.clone()).collect()
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }

    pub fn mean_sq_err(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.sq_err).sum::<f64>() / self.records.len() as f64
    }
}

enum Phase {
    Hybrid,
    Collecting {
        quantized: Vec<ChannelMatrix>,
        truth: Vec<ChannelMatrix>,
    },
    ConventionalOnly,
}

/// Step-by-step protocol state machine.
pub struct Session {
    cfg: ProtocolConfig,
    mode: Mode,
    switching: bool,
    ctx: SessionContext,
    phase: Phase,
    log: SessionLog,
    sample_period: f64,
}

impl Session {
    /// Runs the assessment on the first `S` samples of `init_trace`.
    pub fn start(cfg: &ProtocolConfig, init_trace: &ChannelTrace, mode: Mode) -> Result<Self> {
        Self::start_inner(cfg, init_trace, mode, None)
    }

    /// Starts with both twins loaded from `model` instead of trained.
    pub fn start_with_model(
        cfg: &ProtocolConfig,
        init_trace: &ChannelTrace,
        mode: Mode,
        model: &PredictorModel,
    ) -> Result<Self> {
        Self::start_inner(cfg, init_trace, mode, Some(model))
    }

    fn start_inner(
        cfg: &ProtocolConfig,
        init_trace: &ChannelTrace,
        mode: Mode,
        model: Option<&PredictorModel>,
    ) -> Result<Self> {
        if model.is_some_and(|m| m.config().delay != cfg.predictor.delay) {
            return Err(Error::config("pretrained model delay differs from the protocol config"));
        }
        let with_twins = mode != Mode::Conventional;
        let ctx = assess(cfg, init_trace, with_twins, model)?;
        let first = init_trace.samples()[cfg.init_length - 1].time_index() + 1;
        let assessments = ctx
            .hybrid
            .iter()
            .map(|hy| AssessmentInfo {
                from_step: first,
                residual_clip: hy.residual.clip(),
                valid_nmse_db: hy.report.valid_nmse_db,
            })
            .collect();
        let log = SessionLog {
            mode,
            records: Vec::new(),
            cumulative_bits: 0,
            conventional_clip: ctx.conventional.clip(),
            assessments,
            switch_steps: Vec::new(),
            resume_steps: Vec::new(),
        };
        Ok(Self {
            switching: mode == Mode::Switching || (mode == Mode::Hybrid && cfg.switching_enabled),
            phase: if with_twins { Phase::Hybrid } else { Phase::ConventionalOnly },
            cfg: cfg.clone(),
            mode,
            ctx,
            log,
            sample_period: init_trace.sample_period(),
        })
    }

    pub fn context(&self) -> &SessionContext {
        &self.ctx
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Active path for the next step.
    pub fn active_mode(&self) -> ActiveMode {
        match self.phase {
            Phase::Hybrid => ActiveMode::Hybrid,
            _ => ActiveMode::Conventional,
        }
    }

    /// Test hook: lets a caller tamper with the UE-side twin.
    pub fn corrupt_ue_twin(&mut self, f: impl FnOnce(&mut PredictorModel)) -> Result<()> {
        let hy = self
            .ctx
            .hybrid
            .as_mut()
            .ok_or_else(|| Error::config("session has no twin predictors"))?;
        f(hy.ue.model_mut());
        Ok(())
    }

    pub fn step(&mut self, h_true: &ChannelMatrix) -> Result<&StepRecord> {
        let record = match self.phase {
            Phase::ConventionalOnly => self.conventional_record(h_true, None, None)?,
            Phase::Collecting { .. } => {
                let rec = self.conventional_record(h_true, None, None)?;
                self.collect(h_true, &rec.recovered)?;
                rec
            }
            Phase::Hybrid => self.hybrid_step(h_true)?,
        };
        self.log.cumulative_bits += record.payload_bits;
        self.log.records.push(record);
        Ok(self.log.records.last().unwrap())
    }

    fn conventional_record(
        &self,
        h_true: &ChannelMatrix,
        threshold: Option<f64>,
        hybrid_err: Option<f64>,
    ) -> Result<StepRecord> {
        let (recovered, msg) = step_conventional(&self.ctx, h_true)?;
        Ok(StepRecord {
            step: h_true.time_index(),
            mode: ActiveMode::Conventional,
            kind: msg.kind,
            payload_bits: msg.payload_bits,
            sq_err: h_true.distance_sq(&recovered)?,
            truth: h_true.clone(),
            recovered,
            threshold,
            hybrid_err,
            desync: false,
        })
    }

    fn hybrid_step(&mut self, h_true: &ChannelMatrix) -> Result<StepRecord> {
        let cand = hybrid_candidate(&self.ctx, h_true)?;
        let desync = !cand.in_sync();
        if !self.switching {
            if desync {
                return Err(Error::Protocol {
                    step: h_true.time_index(),
                    reason: "gNB and UE twins predicted different channels".into(),
                });
            }
            commit_hybrid(&mut self.ctx, &cand)?;
            return Ok(StepRecord {
                step: h_true.time_index(),
                mode: ActiveMode::Hybrid,
                kind: cand.msg.kind,
                payload_bits: cand.msg.payload_bits,
                sq_err: h_true.distance_sq(&cand.recovered_gnb)?,
                truth: h_true.clone(),
                recovered: cand.recovered_gnb,
                threshold: None,
                hybrid_err: None,
                desync: false,
            });
        }

        let (q_c, _) = quantize_matrix(&self.ctx.conventional, h_true)?;
        let lambda = h_true.distance_sq(&q_c)?.sqrt();
        let actual_err = h_true.distance_sq(&cand.recovered_gnb)?.sqrt();
        let decision_err = match self.cfg.switch_side {
            SwitchSide::Oracle => actual_err,
            SwitchSide::Ue => h_true.distance_sq(&cand.recovered_ue)?.sqrt(),
        };
        let header = match self.cfg.switch_side {
            SwitchSide::Oracle => 0,
            // Skip/residual/switch needs two bits instead of one.
            SwitchSide::Ue => 1,
        };

        if decision_err <= lambda {
            commit_hybrid(&mut self.ctx, &cand)?;
            return Ok(StepRecord {
                step: h_true.time_index(),
                mode: ActiveMode::Hybrid,
                kind: cand.msg.kind,
                payload_bits: cand.msg.payload_bits + header,
                sq_err: actual_err * actual_err,
                truth: h_true.clone(),
                recovered: cand.recovered_gnb,
                threshold: Some(lambda),
                hybrid_err: Some(actual_err),
                desync,
            });
        }

        let mut rec = self.conventional_record(h_true, Some(lambda), Some(actual_err))?;
        rec.desync = desync;
        if self.cfg.switch_side == SwitchSide::Ue {
            rec.payload_bits += 2;
        }
        self.log.switch_steps.push(h_true.time_index());
        self.phase = Phase::Collecting {
            quantized: Vec::new(),
            truth: Vec::new(),
        };
        self.collect(h_true, &rec.recovered)?;
        Ok(rec)
    }

    fn collect(&mut self, h_true: &ChannelMatrix, recovered: &ChannelMatrix) -> Result<()> {
        let Phase::Collecting { quantized, truth } = &mut self.phase else {
            return Ok(());
        };
        quantized.push(recovered.clone());
        truth.push(h_true.clone());
        if quantized.len() < self.cfg.retrain_len() {
            return Ok(());
        }
        let (n_r, n_t) = h_true.dims();
        let q = ChannelTrace::new(n_r, n_t, self.sample_period, std::mem::take(quantized), "retrain")?;
        let tr = ChannelTrace::new(n_r, n_t, self.sample_period, std::mem::take(truth), "retrain")?;
        let step = h_true.time_index();
        let hy = setup_hybrid(&self.cfg, &self.ctx.conventional, &q, &tr, None).map_err(|e| match e {
            Error::Training { epoch, reason } => Error::Training {
                epoch,
                reason: format!("retraining after step {step}: {reason}"),
            },
            other => other,
        })?;
        self.log.assessments.push(AssessmentInfo {
            from_step: step + 1,
            residual_clip: hy.residual.clip(),
            valid_nmse_db: hy.report.valid_nmse_db,
        });
        self.log.resume_steps.push(step + 1);
        self.ctx.hybrid = Some(hy);
        self.phase = Phase::Hybrid;
        Ok(())
    }

    pub fn finish(self) -> SessionLog {
        self.log
    }
}

/// Assessment on the first `S` samples, then one protocol step per remaining sample.
pub fn run_session(cfg: &ProtocolConfig, trace: &ChannelTrace, mode: Mode) -> Result<SessionLog> {
    check_session_trace(cfg, trace)?;
    let mut session = Session::start(cfg, trace, mode)?;
    for h in &trace.samples()[cfg.init_length..] {
        session.step(h)?;
    }
    Ok(session.finish())
}

/// As [`run_session`] with both twins loaded from `model`.
pub fn run_session_with_model(
    cfg: &ProtocolConfig,
    trace: &ChannelTrace,
    mode: Mode,
    model: &PredictorModel,
) -> Result<SessionLog> {
    check_session_trace(cfg, trace)?;
    let mut session = Session::start_with_model(cfg, trace, mode, model)?;
    for h in &trace.samples()[cfg.init_length..] {
        session.step(h)?;
    }
    Ok(session.finish())
}

fn check_session_trace(cfg: &ProtocolConfig, trace: &ChannelTrace) -> Result<()> {
    if trace.len() <= cfg.init_length {
        return Err(Error::config(format!(
            "trace has {} samples; a session needs more than init_length = {}",
            trace.len(),
            cfg.init_length
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionSummary {
    pub mode: Mode,
    pub quant_bits: u32,
    pub init_length: usize,
    pub skip_threshold: f64,
    pub switching: bool,
    pub switch_side: SwitchSide,
    pub steps: usize,
    pub cumulative_bits: u64,
    pub mean_sq_err: f64,
    pub skip_count: usize,
    pub residual_count: usize,
    pub full_count: usize,
    pub conventional_clip: f64,
    pub assessments: Vec<AssessmentInfo>,
    pub switch_steps: Vec<u64>,
    pub resume_steps: Vec<u64>,
}

impl SessionSummary {
    pub fn new(cfg: &ProtocolConfig, log: &SessionLog) -> Self {
        Self {
            mode: log.mode,
            quant_bits: cfg.quant_bits,
            init_length: cfg.init_length,
            skip_threshold: cfg.skip_threshold,
            switching: log.mode == Mode::Switching || (log.mode == Mode::Hybrid && cfg.switching_enabled),
            switch_side: cfg.switch_side,
            steps: log.records.len(),
            cumulative_bits: log.cumulative_bits,
            mean_sq_err: log.mean_sq_err(),
            skip_count: log.count(MessageKind::Skip),
            residual_count: log.count(MessageKind::Residual),
            full_count: log.count(MessageKind::Full),
            conventional_clip: log.conventional_clip,
            assessments: log.assessments.clone(),
            switch_steps: log.switch_steps.clone(),
            resume_steps: log.resume_steps.clone(),
        }
    }
}

/// Writes `step,mode,kind,payload_bits,sq_err`, one row per record.
pub fn write_session_csv(log: &SessionLog, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "step,mode,kind,payload_bits,sq_err")?;
    for r in &log.records {
        writeln!(
            out,
            "{},{},{},{},{:.16e}",
            r.step,
            r.mode.as_str(),
            r.kind.as_str(),
            r.payload_bits,
            r.sq_err
        )?;
    }
    Ok(())
}

pub fn save_session(cfg: &ProtocolConfig, log: &SessionLog, csv_path: &Path, json_path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_session_csv(log, &mut buf).map_err(|e| Error::io(csv_path, e))?;
    std::fs::write(csv_path, buf).map_err(|e| Error::io(csv_path, e))?;
    let json = serde_json::to_string_pretty(&SessionSummary::new(cfg, log))
        .map_err(|e| Error::Numeric(format!("session summary: {e}")))?;
    std::fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))
}
