//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line straight to
//! stdout (visible without `--nocapture`) and then asserts.
//!
//! Criteria run one at a time behind a lock so their wall-clock budgets are
//! not shared with each other.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use twinfeed::channel::generator::{generate_trace, GeneratorConfig};
use twinfeed::cli::config::ExperimentConfig;
use twinfeed::cli::cmd_run;
use twinfeed::feedback::{
    run_assessment, run_session, ActiveMode, ClipRule, MessageKind, Mode, ProtocolConfig, Session, SessionLog,
};
use twinfeed::metrics::{evaluate, step_cosine, step_gain};
use twinfeed::predictor::codec::encode_model;
use twinfeed::predictor::network::JordanNet;
use twinfeed::predictor::{closed_form_multiplies, count_multiplies, PredictorConfig, PredictorModel};
use twinfeed::quantizer::{build_spec, quantize_matrix, QuantizerSpec};
use twinfeed::{ChannelMatrix, ChannelTrace};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {id:02} {name}: {verdict} ({detail})");
    let _ = out.flush();
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- 01

#[test]
fn acc01_gradient_matches_central_differences() {
    let _g = serial();
    let start = Instant::now();
    let (n_r, n_t, d, j) = (1usize, 2usize, 1usize, 3usize);
    let k = 2 * n_r * n_t;
    let i = 2 * (d + 2) * n_r * n_t;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut uniform = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
    for trial in 0..8u64 {
        let net = JordanNet::random(i, 2, j, k, 100 + trial);
        let q: Vec<f64> = (0..i).map(|_| 1.5 * uniform()).collect();
        let target: Vec<f64> = (0..k).map(|_| uniform()).collect();
        let (_, grad) = net.loss_and_gradient(&q, &target).unwrap();
        let params = net.params();
        let mut probe = net.clone();
        for p in 0..params.len() {
            let mut plus = params.clone();
            plus[p] += h;
            probe.set_params(&plus).unwrap();
            let lp = probe.loss(&q, &target).unwrap();
            let mut minus = params.clone();
            minus[p] -= h;
            probe.set_params(&minus).unwrap();
            let lm = probe.loss(&q, &target).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let scale = grad[p].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((grad[p] - numeric).abs() / scale);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-5 && elapsed < Duration::from_secs(5);
    report(
        1,
        "gradient oracle",
        pass,
        &format!("max rel err {worst:.3e}, {:.2}s", secs(elapsed)),
    );
    assert!(worst <= 1e-5, "max relative gradient error {worst:e}");
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
}

// ---------------------------------------------------------------- 02

#[test]
fn acc02_twin_models_serialize_identically() {
    let _g = serial();
    let start = Instant::now();
    let mut mismatches = Vec::new();
    for seed in 0..5u64 {
        let trace = generate_trace(&GeneratorConfig {
            n_samples: 1_200,
            seed: 40 + seed,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let cfg = ProtocolConfig {
            init_length: 1_000,
            predictor: PredictorConfig {
                seed: 7 * seed + 3,
                ..PredictorConfig::default()
            },
            ..ProtocolConfig::default()
        };
        let a = run_assessment(&cfg, &trace).unwrap();
        let b = run_assessment(&cfg, &trace).unwrap();
        let (ha, hb) = (a.hybrid.as_ref().unwrap(), b.hybrid.as_ref().unwrap());
        let blobs = [
            encode_model(ha.gnb.model()),
            encode_model(ha.ue.model()),
            encode_model(hb.gnb.model()),
            encode_model(hb.ue.model()),
        ];
        if blobs.iter().any(|blob| blob != &blobs[0]) {
            mismatches.push(seed);
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches.is_empty() && elapsed < Duration::from_secs(120);
    report(
        2,
        "twin determinism",
        pass,
        &format!("5 seeds, mismatching seeds {mismatches:?}, {:.1}s", secs(elapsed)),
    );
    assert!(mismatches.is_empty());
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
}

// ---------------------------------------------------------------- 03

#[test]
fn acc03_lossless_quantizer_recovers_channel() {
    let _g = serial();
    let init_length = 4_000;
    let steps = 1_000;
    let trace = generate_trace(&GeneratorConfig {
        n_samples: init_length + steps,
        seed: 3,
        ..GeneratorConfig::default()
    })
    .unwrap();
    // Clips wide enough that nothing saturates: |pred - h| <= |pred| + |h|.
    let peak = trace.slice(0, init_length).samples().iter().map(|h| h.max_abs_component()).fold(0.0, f64::max);
    let cfg = ProtocolConfig {
        quant_bits: 20,
        init_length,
        conventional_clip: ClipRule::Fixed(2.0 * peak),
        residual_clip: ClipRule::Fixed(4.0 * peak),
        ..ProtocolConfig::default()
    };
    let log = run_session(&cfg, &trace, Mode::Hybrid).unwrap();
    let mut worst = 0.0f64;
    for rec in &log.records {
        for (a, b) in rec.truth.entries().iter().zip(rec.recovered.entries()) {
            worst = worst.max((a.re - b.re).abs()).max((a.im - b.im).abs());
        }
    }
    let clip_h = log.assessments[0].residual_clip;
    let half_step = build_spec(20, clip_h).unwrap().error_bound();
    let pass = log.records.len() == steps && worst <= 1e-9;
    report(
        3,
        "recovery identity",
        pass,
        &format!(
            "{} steps, max component err {worst:.3e}, residual clip {clip_h:.3e}, half step {half_step:.3e}",
            log.records.len()
        ),
    );
    assert_eq!(log.records.len(), steps);
    assert!(worst <= 1e-9, "max component error {worst:e}");
}

// ---------------------------------------------------------------- 04

#[test]
fn acc04_constant_channel_needs_one_bit() {
    let _g = serial();
    let (n_r, n_t) = (1usize, 4usize);
    let entries = vec![
        Complex64::new(0.6, -0.6),
        Complex64::new(-0.6, 0.6),
        Complex64::new(0.6, 0.6),
        Complex64::new(-0.6, -0.6),
    ];
    let value = ChannelMatrix::new(n_r, n_t, entries, 0).unwrap();
    let init_length = 500;
    let steps = 1_000;
    let trace = ChannelTrace::constant(&value, init_length + steps, 0.5e-3).unwrap();
    let bits = 4;
    let cfg = ProtocolConfig {
        quant_bits: bits,
        init_length,
        skip_threshold: 1e-9,
        ..ProtocolConfig::default()
    };
    let hybrid = run_session(&cfg, &trace, Mode::Hybrid).unwrap();
    let conventional = run_session(&cfg, &trace, Mode::Conventional).unwrap();
    let skips = hybrid.count(MessageKind::Skip) as f64 / steps as f64;
    let hybrid_rate = hybrid.cumulative_bits as f64 / steps as f64;
    let conventional_rate = conventional.cumulative_bits as f64 / steps as f64;
    let full_rate = (2 * n_r * n_t) as f64 * bits as f64;
    let residual_cost = 1.0 + full_rate;
    // Every non-skip step costs one residual; the rate follows from the skip share.
    let rate_ok = hybrid_rate <= 1.0 + (1.0 - 0.99) * (residual_cost - 1.0) + 1e-12;
    let pass = skips >= 0.99 && rate_ok && conventional_rate == full_rate;
    report(
        4,
        "feedback elimination",
        pass,
        &format!(
            "skip share {:.4}, hybrid {hybrid_rate:.3} bit/step, conventional {conventional_rate} bit/step",
            skips
        ),
    );
    assert!(skips >= 0.99, "skip share {skips}");
    assert!(rate_ok, "hybrid rate {hybrid_rate}");
    assert_eq!(conventional_rate, full_rate);
}

// ---------------------------------------------------------------- 05 / 06

struct Cell {
    log: SessionLog,
    seconds: f64,
}

fn default_cell(bits: u32, mode: Mode) -> &'static Cell {
    static TRACE: OnceLock<ChannelTrace> = OnceLock::new();
    static CELLS: OnceLock<Mutex<HashMap<(u32, Mode), &'static Cell>>> = OnceLock::new();
    let cells = CELLS.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(cell) = cells.lock().unwrap().get(&(bits, mode)) {
        return cell;
    }
    let start = Instant::now();
    let trace = TRACE.get_or_init(|| generate_trace(&GeneratorConfig::default()).unwrap());
    let cfg = ProtocolConfig {
        quant_bits: bits,
        ..ProtocolConfig::default()
    };
    let log = run_session(&cfg, trace, mode).unwrap();
    let cell: &'static Cell = Box::leak(Box::new(Cell {
        log,
        seconds: secs(start.elapsed()),
    }));
    cells.lock().unwrap().insert((bits, mode), cell);
    cell
}

fn nmse_db(log: &SessionLog) -> f64 {
    evaluate(&log.truths(), &log.recovered(), 10.0).unwrap().nmse_db
}

#[test]
fn acc05_hybrid_wins_at_low_resolution_and_matches_at_high() {
    let _g = serial();
    let mut seconds = 0.0;
    let mut gap = |bits| {
        let c = default_cell(bits, Mode::Conventional);
        let h = default_cell(bits, Mode::Hybrid);
        seconds += c.seconds + h.seconds;
        (nmse_db(&c.log), nmse_db(&h.log))
    };
    let (c2, h2) = gap(2);
    let (c8, h8) = gap(8);
    let low = c2 - h2 >= 3.0;
    let high = (c8 - h8).abs() <= 0.5;
    let fast = seconds < 300.0;
    report(
        5,
        "headline trend",
        low && high && fast,
        &format!(
            "2 bits: conventional {c2:.2} dB, hybrid {h2:.2} dB (gap {:.2}); \
             8 bits: conventional {c8:.2} dB, hybrid {h8:.2} dB (gap {:.2}); {seconds:.0}s",
            c2 - h2,
            c8 - h8
        ),
    );
    assert!(low, "2-bit gap {:.2} dB", c2 - h2);
    assert!(high, "8-bit gap {:.2} dB", c8 - h8);
    assert!(fast, "took {seconds:.0}s");
}

#[test]
fn acc06_sweep_is_monotone() {
    let _g = serial();
    let mut failures = Vec::new();
    let mut worst_identity = 0.0f64;
    for mode in [Mode::Conventional, Mode::Hybrid] {
        let mut prev: Option<(u32, twinfeed::metrics::MetricsRecord)> = None;
        for bits in 2..=5 {
            let log = &default_cell(bits, mode).log;
            let m = evaluate(&log.truths(), &log.recovered(), 10.0).unwrap();
            if let Some((pb, p)) = &prev {
                if m.nmse_db > p.nmse_db {
                    failures.push(format!("{mode} nmse {pb}->{bits}"));
                }
                if m.precoding_gain < p.precoding_gain {
                    failures.push(format!("{mode} gamma {pb}->{bits}"));
                }
                if m.cosine_similarity < p.cosine_similarity {
                    failures.push(format!("{mode} rho {pb}->{bits}"));
                }
                if m.spectral_efficiency < p.spectral_efficiency {
                    failures.push(format!("{mode} eta {pb}->{bits}"));
                }
            }
            for rec in &log.records {
                if rec.recovered.frobenius_sq() == 0.0 {
                    continue;
                }
                let gamma = step_gain(&rec.truth, &rec.recovered).unwrap();
                let rho = step_cosine(&rec.truth, &rec.recovered).unwrap();
                worst_identity = worst_identity.max((gamma - rho * rho).abs());
            }
            prev = Some((bits, m));
        }
    }
    let identity_ok = worst_identity <= 1e-12;
    report(
        6,
        "monotone sweep",
        failures.is_empty() && identity_ok,
        &format!("violations {failures:?}, max |gamma - rho^2| {worst_identity:.2e}"),
    );
    assert!(failures.is_empty(), "{failures:?}");
    assert!(identity_ok, "{worst_identity:e}");
}

// ---------------------------------------------------------------- 07

#[test]
fn acc07_multiplication_count_matches_closed_form() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut pick = |lo: u64, hi: u64| lo + rng.next_u64() % (hi - lo + 1);
    let mut mismatches = Vec::new();
    for shape in 0..10 {
        let n_r = pick(1, 2) as usize;
        let n_t = pick(1, 4) as usize;
        let d = pick(0, 4) as usize;
        let j = pick(1, 32) as usize;
        let cfg = PredictorConfig {
            delay: d,
            hidden_layers: 2,
            hidden_units: j,
            seed: shape,
            ..PredictorConfig::default()
        };
        let model = PredictorModel::new(&cfg, n_r, n_t).unwrap();
        let counted = count_multiplies(&model);
        let i = 2 * (d + 2) * n_r * n_t;
        let k = 2 * n_r * n_t;
        let expected = (j * (i + j + k)) as u64;
        if counted != expected || closed_form_multiplies(i as u64, j as u64, k as u64) != expected {
            mismatches.push((n_r, n_t, d, j, counted, expected));
        }
    }
    report(
        7,
        "complexity counter",
        mismatches.is_empty(),
        &format!("10 shapes, mismatches {mismatches:?}"),
    );
    assert!(mismatches.is_empty());
}

// ---------------------------------------------------------------- 08

fn brute_force(clip: f64, bits: u32, x: f64) -> (u64, f64) {
    let half = ((1u64 << bits) - 2) / 2;
    let step = clip / half as f64;
    let mut best: Option<(i64, f64, f64)> = None;
    for m in -(half as i64)..=(half as i64) {
        // a single-level grid has no finite step
        let level = if m == 0 { 0.0 } else { m as f64 * step };
        let dist = (x - level).abs();
        let better = match best {
            None => true,
            Some((bm, _, bd)) => dist < bd || (dist == bd && m.abs() < bm.abs()),
        };
        if better {
            best = Some((m, level, dist));
        }
    }
    let (m, level, _) = best.unwrap();
    ((m + half as i64) as u64, level)
}

#[test]
fn acc08_quantizer_matches_brute_force() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut unit = move || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let mut mismatches = 0u64;
    let mut first = None;
    let total = 1_000_000u64;
    let mut specs: Vec<QuantizerSpec> = Vec::new();
    for bits in 1..=8 {
        specs.push(build_spec(bits, 0.25 + 3.0 * unit()).unwrap());
    }
    for n in 0..total {
        let spec = &specs[(n % specs.len() as u64) as usize];
        let (clip, step) = (spec.clip(), spec.step());
        let half = (spec.num_levels() / 2) as f64;
        let m = (unit() * (2.0 * half + 1.0)).floor() - half;
        let step = if half == 0.0 { clip } else { step };
        let x = match n % 5 {
            0 => (2.0 * unit() - 1.0) * 1.5 * clip,
            1 => (m + 0.5) * step,
            2 => (m - 0.5) * step,
            3 => {
                let edge = [clip, -clip, clip * (1.0 + 1e-12), -clip * (1.0 + 1e-12), 2.0 * clip, -2.0 * clip];
                edge[(unit() * edge.len() as f64) as usize % edge.len()]
            }
            _ => m * step,
        };
        let got = spec.quantize_scalar(x).unwrap();
        let want = brute_force(clip, spec.bits(), x);
        if got != want {
            mismatches += 1;
            first.get_or_insert((spec.bits(), clip, x, got, want));
        }
    }
    report(
        8,
        "quantizer oracle",
        mismatches == 0,
        &format!("{total} inputs, {mismatches} mismatches, first {first:?}"),
    );
    assert_eq!(mismatches, 0, "first mismatch {first:?}");
}

// ---------------------------------------------------------------- 09

fn small_experiment(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        quant_bits: vec![2, 3],
        modes: vec![Mode::Conventional, Mode::Hybrid, Mode::Switching],
        ..ExperimentConfig::default()
    };
    cfg.generator.n_samples = 1_400;
    cfg.protocol.init_length = 1_000;
    cfg.protocol.predictor.epochs = 10;
    cfg
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn acc09_cmd_run_is_reproducible() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cmd_run(&small_experiment(&a)).unwrap();
    cmd_run(&small_experiment(&b)).unwrap();
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    let pass = !fa.is_empty() && fa == fb && names.contains(&"results.csv");
    report(
        9,
        "end-to-end determinism",
        pass,
        &format!("{} csv files compared", fa.len()),
    );
    assert!(names.contains(&"results.csv"), "{names:?}");
    assert_eq!(fa, fb);
}

// ---------------------------------------------------------------- 10

#[test]
fn acc10_switching_recovers_from_corrupted_twin() {
    let _g = serial();
    let init_length = 2_000;
    let steps = 6_000;
    let trace = generate_trace(&GeneratorConfig {
        n_samples: init_length + steps,
        seed: 10,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let cfg = ProtocolConfig {
        quant_bits: 4,
        init_length,
        switching_enabled: true,
        ..ProtocolConfig::default()
    };
    let samples = &trace.samples()[init_length..];
    let mut session = Session::start(&cfg, &trace.slice(0, init_length), Mode::Switching).unwrap();
    // Run a while, then corrupt the UE twin at the next step the hybrid path is live.
    let mut corrupted_at = None;
    for (n, h) in samples.iter().enumerate() {
        if corrupted_at.is_none() && n >= 100 && session.active_mode() == ActiveMode::Hybrid {
            session
                .corrupt_ue_twin(|model| {
                    for w in &mut model.net_mut().layers_mut().last_mut().unwrap().weights {
                        *w = -*w * 3.0;
                    }
                })
                .unwrap();
            corrupted_at = Some(n);
        }
        session.step(h).unwrap();
    }
    let q_c: QuantizerSpec = session.context().conventional;
    let log = session.finish();
    let before = corrupted_at.expect("hybrid path never became active");
    let hybrid_before = log.records[..before].iter().filter(|r| r.mode == ActiveMode::Hybrid).count();
    let records = &log.records[before..];

    // First step after the corruption whose hybrid candidate is worse than the
    // conventional error, and the first conventional step at or after it.
    let crossing = records
        .iter()
        .position(|r| matches!((r.hybrid_err, r.threshold), (Some(e), Some(t)) if e > t));
    let caused_by_corruption = crossing.is_some_and(|c| records[c].desync);
    let reverted = crossing.and_then(|c| records[c..].iter().position(|r| r.mode == ActiveMode::Conventional));
    let reverts_in_time = matches!(reverted, Some(lag) if lag <= 1);
    let hybrid_over_threshold = log
        .records
        .iter()
        .filter(|r| r.mode == ActiveMode::Hybrid)
        .any(|r| matches!((r.hybrid_err, r.threshold), (Some(e), Some(t)) if e > t));
    let first_after = before as u64 + log.records[0].step;
    let resumed = log.resume_steps.iter().find(|&&s| s > first_after).is_some_and(|&s| {
        log.records
            .iter()
            .any(|r| r.step >= s && r.mode == ActiveMode::Hybrid && !r.desync)
    });

    // Componentwise half step, summed over all real components.
    let grid_bound = (2.0 * log.records[0].truth.len() as f64).sqrt() * q_c.error_bound();
    let mut worst_excess = f64::NEG_INFINITY;
    for r in &log.records {
        let (qh, _) = quantize_matrix(&q_c, &r.truth).unwrap();
        let lambda = r.truth.distance_sq(&qh).unwrap().sqrt();
        worst_excess = worst_excess.max(r.sq_err.sqrt() - (lambda + grid_bound));
    }
    let bounded = worst_excess <= 0.0;
    let pass = hybrid_before > 0 && caused_by_corruption && reverts_in_time && !hybrid_over_threshold && resumed && bounded;
    report(
        10,
        "switching",
        pass,
        &format!(
            "corrupted after {before} steps ({hybrid_before} hybrid), crossing at +{crossing:?} (desync {caused_by_corruption}), revert lag {reverted:?}, \
             switches {:?}, resumes {:?}, worst excess over bound {worst_excess:.3e}",
            log.switch_steps, log.resume_steps
        ),
    );
    assert!(hybrid_before > 0);
    assert!(caused_by_corruption, "crossing {crossing:?}");
    assert!(reverts_in_time, "crossing {crossing:?} revert {reverted:?}");
    assert!(!hybrid_over_threshold);
    assert!(resumed, "resume steps {:?}", log.resume_steps);
    assert!(bounded, "error exceeds bound by {worst_excess:e}");
}
