//! Jordan recurrent channel predictor.
//!
//! The network sees the `d + 1` most recent channel matrices plus its own previous
//! output (the recurrent, or internal, input) and predicts the next matrix:
//!
//! ```text
//! q(t)      = [ Re(H(t)) .. Re(H(t-d)) | Im(H(t)) .. Im(H(t-d)) | v~(t) ]
//! o_j       = tanh(w_j . q(t))                 (one or more hidden layers)
//! H~(t+1)_k = sum_j w_kj o_j                   (linear output)
//! ```
//!
//! Inputs and targets are standardized per real component with statistics fitted
//! on the training split and stored in the model, so both twins apply the same
//! transform. Training is single-threaded with a fixed sample and summation order:
//! identical config and data give identical weights bit for bit.

pub mod adam;
pub mod codec;
pub mod network;

use std::time::Instant;

use crate::channel::{ChannelMatrix, ChannelTrace};
use crate::error::{Error, Result};
use crate::metrics;

pub use adam::{Adam, AdamParams};
pub use codec::{decode_model, encode_model, load_model, save_model};
pub use network::{JordanNet, Layer};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorConfig {
    /// Number of delayed matrices `d` fed next to the current one.
    pub delay: usize,
    pub hidden_layers: usize,
    /// Units per hidden layer, `J`.
    pub hidden_units: usize,
    pub learn_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamParams,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            delay: 2,
            hidden_layers: 2,
            hidden_units: 20,
            learn_rate: 1e-4,
            batch_size: 20,
            epochs: 100,
            seed: 0x5eed,
            adam: AdamParams::default(),
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 {
            return Err(Error::config("hidden_units must be at least 1"));
        }
        if self.hidden_layers == 0 {
            return Err(Error::config("hidden_layers must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learn_rate.is_finite() && self.learn_rate > 0.0) {
            return Err(Error::config(format!("learn_rate must be positive, got {}", self.learn_rate)));
        }
        Ok(())
    }

    /// Total input width `2 (d + 2) n_r n_t` (external window plus recurrent part).
    pub fn input_width(&self, n_r: usize, n_t: usize) -> usize {
        2 * (self.delay + 2) * n_r * n_t
    }
}

/// Per-component affine standardization, `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Fits mean and standard deviation of every `[re..., im...]` component.
    ///
    /// The mean gets a second correction pass so a constant component is
    /// reproduced exactly; a component with zero spread keeps unit scale.
    pub fn fit(samples: &[ChannelMatrix]) -> Self {
        let width = samples.first().map(|m| 2 * m.len()).unwrap_or(0);
        let n = samples.len().max(1) as f64;
        let comps: Vec<Vec<f64>> = samples.iter().map(|m| m.to_components()).collect();
        let mut mean = vec![0.0; width];
        let mut std = vec![1.0; width];
        for k in 0..width {
            let rough = comps.iter().map(|c| c[k]).sum::<f64>() / n;
            let m = rough + comps.iter().map(|c| c[k] - rough).sum::<f64>() / n;
            let var = comps.iter().map(|c| (c[k] - m).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            mean[k] = m;
            std[k] = if s > f64::EPSILON * m.abs().max(1.0) { s } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn apply(&self, k: usize, x: f64) -> f64 {
        (x - self.mean[k]) / self.std[k]
    }

    #[inline]
    pub fn invert(&self, k: usize, y: f64) -> f64 {
        y * self.std[k] + self.mean[k]
    }
}

/// Builds the network input `q(t)` from a window (newest matrix first) and the
/// recurrent vector.
///
/// Layout: real parts of every window matrix (row-major by `(rx, tx)`, newest
/// matrix first), then the imaginary parts in the same order, then the recurrent
/// vector. All parts are standardized with `norm`.
pub fn preprocess(window: &[ChannelMatrix], recurrent: &[f64], norm: &Normalization) -> Result<Vec<f64>> {
    let first = window.first().ok_or_else(|| Error::shape("empty input window"))?;
    let n = first.len();
    if window.iter().any(|m| m.dims() != first.dims()) {
        return Err(Error::shape("window matrices differ in dimensions"));
    }
    if recurrent.len() != 2 * n {
        return Err(Error::shape(format!(
            "recurrent vector has {} values, expected {}",
            recurrent.len(),
            2 * n
        )));
    }
    if norm.width() != 2 * n {
        return Err(Error::shape(format!(
            "normalization covers {} components, expected {}",
            norm.width(),
            2 * n
        )));
    }
    let mut q = Vec::with_capacity(2 * n * (window.len() + 1));
    for m in window {
        for (k, z) in m.entries().iter().enumerate() {
            q.push(norm.apply(k, z.re));
        }
    }
    for m in window {
        for (k, z) in m.entries().iter().enumerate() {
            q.push(norm.apply(n + k, z.im));
        }
    }
    for (k, &r) in recurrent.iter().enumerate() {
        q.push(norm.apply(k, r));
    }
    Ok(q)
}

/// Recombines a `[re..., im...]` vector into an `n_r x n_t` matrix.
pub fn postprocess(out: &[f64], n_r: usize, n_t: usize, time_index: u64) -> Result<ChannelMatrix> {
    let n = n_r * n_t;
    if out.len() != 2 * n {
        return Err(Error::shape(format!(
            "output has {} values, {n_r}x{n_t} needs {}",
            out.len(),
            2 * n
        )));
    }
    ChannelMatrix::from_parts(n_r, n_t, &out[..n], &out[n..], time_index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    config: PredictorConfig,
    n_r: usize,
    n_t: usize,
    normalization: Normalization,
    net: JordanNet,
    recurrent: Vec<f64>,
}

impl PredictorModel {
    /// Freshly initialized model with identity normalization and zero recurrent state.
    pub fn new(config: &PredictorConfig, n_r: usize, n_t: usize) -> Result<Self> {
        config.validate()?;
        if n_r == 0 || n_t == 0 {
            return Err(Error::config("channel dimensions must be positive"));
        }
        let k = 2 * n_r * n_t;
        let net = JordanNet::random(
            config.input_width(n_r, n_t),
            config.hidden_layers,
            config.hidden_units,
            k,
            config.seed,
        );
        Ok(Self {
            config: config.clone(),
            n_r,
            n_t,
            normalization: Normalization::identity(k),
            net,
            recurrent: vec![0.0; k],
        })
    }

    pub(crate) fn from_parts(
        config: PredictorConfig,
        n_r: usize,
        n_t: usize,
        normalization: Normalization,
        net: JordanNet,
        recurrent: Vec<f64>,
    ) -> Result<Self> {
        let k = 2 * n_r * n_t;
        if net.input_width() != config.input_width(n_r, n_t) || net.output_width() != k {
            return Err(Error::shape("network widths do not match the channel dimensions"));
        }
        if normalization.width() != k || normalization.std.len() != k || recurrent.len() != k {
            return Err(Error::shape("normalization or recurrent width mismatch"));
        }
        if net.layers().len() != config.hidden_layers + 1 {
            return Err(Error::shape("layer count does not match hidden_layers"));
        }
        Ok(Self {
            config,
            n_r,
            n_t,
            normalization,
            net,
            recurrent,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_r, self.n_t)
    }

    pub fn window_len(&self) -> usize {
        self.config.delay + 1
    }

    pub fn input_width(&self) -> usize {
        self.net.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.net.output_width()
    }

    pub fn net(&self) -> &JordanNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut JordanNet {
        &mut self.net
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        if norm.width() != self.output_width() {
            return Err(Error::shape("normalization width mismatch"));
        }
        self.normalization = norm;
        Ok(())
    }

    /// Previous prediction `v~(t)` as `[re..., im...]`.
    pub fn recurrent(&self) -> &[f64] {
        &self.recurrent
    }

    pub fn set_recurrent(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != self.recurrent.len() {
            return Err(Error::shape("recurrent state width mismatch"));
        }
        self.recurrent.copy_from_slice(state);
        Ok(())
    }

    pub fn preprocess(&self, window: &[ChannelMatrix]) -> Result<Vec<f64>> {
        self.check_window(window)?;
        preprocess(window, &self.recurrent, &self.normalization)
    }

    fn check_window(&self, window: &[ChannelMatrix]) -> Result<()> {
        if window.len() != self.window_len() {
            return Err(Error::shape(format!(
                "window holds {} matrices, model expects {}",
                window.len(),
                self.window_len()
            )));
        }
        if window[0].dims() != (self.n_r, self.n_t) {
            return Err(Error::shape(format!(
                "window is {}x{}, model is {}x{}",
                window[0].n_r(),
                window[0].n_t(),
                self.n_r,
                self.n_t
            )));
        }
        Ok(())
    }

    /// Denormalized network output for `q`, leaving the recurrent state alone.
    pub fn forward_stateless(&self, q: &[f64]) -> Result<Vec<f64>> {
        let acts = self.net.forward(q)?;
        Ok(acts
            .output()
            .iter()
            .enumerate()
            .map(|(k, &y)| self.normalization.invert(k, y))
            .collect())
    }

    /// Denormalized prediction; the recurrent state becomes this output.
    pub fn forward(&mut self, q: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward_stateless(q)?;
        self.recurrent.copy_from_slice(&out);
        Ok(out)
    }

    /// One-step-ahead prediction from a window ordered newest first.
    pub fn predict_step(&mut self, window: &[ChannelMatrix]) -> Result<ChannelMatrix> {
        let q = self.preprocess(window)?;
        let out = self.forward(&q)?;
        postprocess(&out, self.n_r, self.n_t, window[0].time_index() + 1)
    }

    /// Scalar multiplications in one forward pass, counted while running one.
    pub fn count_multiplies(&self) -> u64 {
        let mut muls = 0;
        self.net
            .forward_counted(&vec![0.0; self.input_width()], &mut muls)
            .expect("zero input has the right width");
        muls
    }

    /// Teacher-forced one-step predictions over `trace`: the window ends at
    /// sample `t` and the recurrent input is sample `t` itself. Entry `i` predicts
    /// sample `d + 1 + i`. The model's own recurrent state is untouched.
    pub fn teacher_forced(&self, trace: &ChannelTrace) -> Result<Vec<ChannelMatrix>> {
        let d = self.config.delay;
        let samples = trace.samples();
        let mut preds = Vec::with_capacity(samples.len().saturating_sub(d + 1));
        for t in d..samples.len().saturating_sub(1) {
            let window: Vec<ChannelMatrix> = (0..=d).map(|j| samples[t - j].clone()).collect();
            let q = preprocess(&window, &samples[t].to_components(), &self.normalization)?;
            let out = self.forward_stateless(&q)?;
            preds.push(postprocess(&out, self.n_r, self.n_t, samples[t + 1].time_index())?);
        }
        Ok(preds)
    }
}

pub fn predict_step(model: &mut PredictorModel, window: &[ChannelMatrix]) -> Result<ChannelMatrix> {
    model.predict_step(window)
}

pub fn count_multiplies(model: &PredictorModel) -> u64 {
    model.count_multiplies()
}

/// Closed-form multiplication count `J (I + J + K)` for a network with input
/// width `I`, hidden width `J` and output width `K`.
///
/// This is the cost of `I x J` input weights, one `J x J` hidden-to-hidden
/// stage and `J x K` output weights, i.e. the two-hidden-layer network. It is
/// stated in the units of whatever `I` and `K` count; passing real widths gives
/// real multiplications.
pub fn closed_form_multiplies(i: u64, j: u64, k: u64) -> u64 {
    j * (i + j + k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Mean normalized-domain MSE over the training examples of each epoch.
    pub train_mse: Vec<f64>,
    /// Teacher-forced normalized-domain MSE on the validation split after each epoch.
    pub valid_mse: Vec<f64>,
    /// NMSE of the final model's teacher-forced validation predictions, in dB.
    pub valid_nmse_db: f64,
    pub wall_seconds: f64,
    /// Scalar multiplications per forward pass.
    pub multiply_count: u64,
}

struct Examples {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    in_width: usize,
    out_width: usize,
}

impl Examples {
    fn build(trace: &ChannelTrace, delay: usize, norm: &Normalization) -> Result<Self> {
        let samples = trace.samples();
        let in_width = 2 * (delay + 2) * trace.n_r() * trace.n_t();
        let out_width = 2 * trace.n_r() * trace.n_t();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for t in delay..samples.len().saturating_sub(1) {
            let window: Vec<ChannelMatrix> = (0..=delay).map(|j| samples[t - j].clone()).collect();
            inputs.extend(preprocess(&window, &samples[t].to_components(), norm)?);
            targets.extend(
                samples[t + 1]
                    .to_components()
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| norm.apply(k, x)),
            );
        }
        Ok(Self {
            inputs,
            targets,
            in_width,
            out_width,
        })
    }

    fn len(&self) -> usize {
        self.targets.len() / self.out_width
    }

    fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.in_width..(i + 1) * self.in_width]
    }

    fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.out_width..(i + 1) * self.out_width]
    }
}

fn mean_loss(net: &JordanNet, ex: &Examples) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..ex.len() {
        total += net.loss(ex.input(i), ex.target(i))?;
    }
    Ok(total / ex.len() as f64)
}

/// Supervised one-step-ahead training with teacher forcing and mini-batch Adam.
///
/// Examples are visited in time order every epoch; each batch gradient is the
/// mean of its per-example gradients.
pub fn train(
    cfg: &PredictorConfig,
    train: &ChannelTrace,
    valid: &ChannelTrace,
) -> Result<(PredictorModel, TrainingReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let d = cfg.delay;
    if train.len() <= d + 1 {
        return Err(Error::config(format!(
            "training trace has {} samples, needs more than d + 1 = {}",
            train.len(),
            d + 1
        )));
    }
    if valid.len() <= d + 1 {
        return Err(Error::config(format!(
            "validation trace has {} samples, needs more than d + 1 = {}",
            valid.len(),
            d + 1
        )));
    }
    if (train.n_r(), train.n_t()) != (valid.n_r(), valid.n_t()) {
        return Err(Error::shape("training and validation traces differ in dimensions"));
    }
    let (n_r, n_t) = (train.n_r(), train.n_t());

    let mut model = PredictorModel::new(cfg, n_r, n_t)?;
    model.normalization = Normalization::fit(train.samples());
    let train_ex = Examples::build(train, d, &model.normalization)?;
    let valid_ex = Examples::build(valid, d, &model.normalization)?;

    let mut opt = Adam::new(cfg.learn_rate, cfg.adam, model.net.layers());
    let mut grads = model.net.zero_grads();
    let mut train_mse = Vec::with_capacity(cfg.epochs);
    let mut valid_mse = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut start = 0;
        while start < train_ex.len() {
            let end = (start + cfg.batch_size).min(train_ex.len());
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
            for i in start..end {
                let acts = model.net.forward(train_ex.input(i)).map_err(|e| Error::Training {
                    epoch,
                    reason: e.to_string(),
                })?;
                let (loss, d_out) = network::mse_and_grad(acts.output(), train_ex.target(i))?;
                epoch_loss += loss;
                model.net.backward(&acts, &d_out, &mut grads);
            }
            let scale = 1.0 / (end - start) as f64;
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
            opt.step(model.net.layers_mut(), &grads);
            start = end;
        }
        let mse = epoch_loss / train_ex.len() as f64;
        if !mse.is_finite() || !model.net.all_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("non-finite loss or weights (training MSE {mse})"),
            });
        }
        train_mse.push(mse);
        let v = mean_loss(&model.net, &valid_ex).map_err(|e| Error::Training {
            epoch,
            reason: e.to_string(),
        })?;
        valid_mse.push(v);
    }

    let preds = model.teacher_forced(valid)?;
    let truth = &valid.samples()[d + 1..];
    let valid_nmse_db = metrics::nmse(truth, &preds).map(|(_, db)| db).unwrap_or(f64::NAN);

    model.recurrent = train.samples().last().unwrap().to_components();
    let report = TrainingReport {
        train_mse,
        valid_mse,
        valid_nmse_db,
        wall_seconds: started.elapsed().as_secs_f64(),
        multiply_count: model.count_multiplies(),
    };
    Ok((model, report))
}
