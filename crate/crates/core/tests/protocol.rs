use twinfeed::channel::generator::{generate_trace, GeneratorConfig};
use twinfeed::feedback::{
    run_session, ActiveMode, ClipRule, MessageKind, Mode, ProtocolConfig, RecurrentFeed, Session, SwitchSide,
};
use twinfeed::predictor::PredictorConfig;
use twinfeed::quantizer::{build_spec, quantize_matrix};
use twinfeed::ChannelTrace;

const INIT: usize = 800;

fn trace(n_steps: usize, seed: u64) -> ChannelTrace {
    generate_trace(&GeneratorConfig {
        n_samples: INIT + n_steps,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn config(bits: u32) -> ProtocolConfig {
    ProtocolConfig {
        quant_bits: bits,
        init_length: INIT,
        predictor: PredictorConfig {
            epochs: 15,
            ..PredictorConfig::default()
        },
        ..ProtocolConfig::default()
    }
}

fn full_bits(trace: &ChannelTrace, bits: u32) -> u64 {
    2 * (trace.n_r() * trace.n_t()) as u64 * bits as u64
}

#[test]
fn twins_stay_bitwise_equal_after_every_step() {
    for feed in [RecurrentFeed::Recovered, RecurrentFeed::Prediction] {
        let tr = trace(300, 2);
        let cfg = ProtocolConfig {
            recurrent_feed: feed,
            ..config(3)
        };
        let mut session = Session::start(&cfg, &tr.slice(0, INIT), Mode::Hybrid).unwrap();
        for h in &tr.samples()[INIT..] {
            session.step(h).unwrap();
            let hy = session.context().hybrid().unwrap();
            assert_eq!(hy.gnb, hy.ue, "twins diverged at step {}", h.time_index());
            assert_eq!(hy.gnb.window()[0], session.log().records.last().unwrap().recovered);
        }
    }
}

#[test]
fn conventional_bits_are_fixed_per_step() {
    let tr = trace(200, 3);
    let log = run_session(&config(4), &tr, Mode::Conventional).unwrap();
    assert_eq!(log.records.len(), 200);
    assert!(log.records.iter().all(|r| r.kind == MessageKind::Full));
    assert_eq!(log.cumulative_bits, 200 * full_bits(&tr, 4));
}

#[test]
fn hybrid_bit_accounting() {
    let tr = trace(400, 4);
    let bits = 3;
    let log = run_session(&config(bits), &tr, Mode::Hybrid).unwrap();
    let sum: u64 = log.records.iter().map(|r| r.payload_bits).sum();
    assert_eq!(sum, log.cumulative_bits);
    for r in &log.records {
        let expected = match r.kind {
            MessageKind::Skip => 1,
            MessageKind::Residual => 1 + full_bits(&tr, bits),
            MessageKind::Full => panic!("hybrid session sent a full report"),
        };
        assert_eq!(r.payload_bits, expected);
        assert!(r.payload_bits <= full_bits(&tr, bits) + 1);
    }
}

#[test]
fn wide_clip_recovery_is_grid_limited() {
    let tr = trace(300, 5);
    let peak = tr
        .slice(0, INIT)
        .samples()
        .iter()
        .map(|h| h.max_abs_component())
        .fold(0.0, f64::max);
    let cfg = ProtocolConfig {
        conventional_clip: ClipRule::Fixed(2.0 * peak),
        residual_clip: ClipRule::Fixed(4.0 * peak),
        ..config(20)
    };
    let log = run_session(&cfg, &tr, Mode::Hybrid).unwrap();
    let bound = build_spec(20, 4.0 * peak).unwrap().error_bound();
    for r in &log.records {
        for (a, b) in r.truth.entries().iter().zip(r.recovered.entries()) {
            assert!((a.re - b.re).abs() <= bound && (a.im - b.im).abs() <= bound);
        }
    }
}

#[test]
fn switching_error_never_exceeds_either_path() {
    let tr = trace(1_200, 6);
    let cfg = ProtocolConfig {
        switching_enabled: true,
        retrain_window: Some(400),
        ..config(2)
    };
    let log = run_session(&cfg, &tr, Mode::Switching).unwrap();
    let q_c = build_spec(2, log.conventional_clip).unwrap();
    let n = tr.n_r() * tr.n_t();
    let grid = (2.0 * n as f64).sqrt() * q_c.error_bound();
    for r in &log.records {
        let (qh, _) = quantize_matrix(&q_c, &r.truth).unwrap();
        let lambda = r.truth.distance_sq(&qh).unwrap().sqrt();
        let err = r.sq_err.sqrt();
        let hybrid = r.hybrid_err.unwrap_or(0.0);
        assert!(err <= lambda.max(hybrid) + grid, "step {}", r.step);
        if r.mode == ActiveMode::Hybrid {
            assert!(err <= lambda, "step {}: hybrid kept with {err} > {lambda}", r.step);
        }
    }
    assert_eq!(log.records.len(), 1_200);
    assert_eq!(log.assessments.len(), 1 + log.resume_steps.len());
}

#[test]
fn ue_side_switching_pays_the_wider_header() {
    let tr = trace(600, 7);
    let bits = 2;
    let cfg = ProtocolConfig {
        switching_enabled: true,
        switch_side: SwitchSide::Ue,
        retrain_window: Some(300),
        ..config(bits)
    };
    let log = run_session(&cfg, &tr, Mode::Switching).unwrap();
    let full = full_bits(&tr, bits);
    let mut switches = 0;
    for r in &log.records {
        let expected = match (r.mode, r.kind) {
            (ActiveMode::Hybrid, MessageKind::Skip) => 2,
            (ActiveMode::Hybrid, MessageKind::Residual) => 2 + full,
            (ActiveMode::Conventional, MessageKind::Full) if log.switch_steps.contains(&r.step) => {
                switches += 1;
                2 + full
            }
            (ActiveMode::Conventional, MessageKind::Full) => full,
            other => panic!("unexpected record {other:?}"),
        };
        assert_eq!(r.payload_bits, expected, "step {}", r.step);
    }
    assert_eq!(switches, log.switch_steps.len());
}

#[test]
fn hybrid_without_switching_rejects_a_corrupted_twin() {
    let tr = trace(50, 8);
    let mut session = Session::start(&config(3), &tr.slice(0, INIT), Mode::Hybrid).unwrap();
    session.step(&tr.samples()[INIT]).unwrap();
    session
        .corrupt_ue_twin(|m| {
            for w in &mut m.net_mut().layers_mut()[0].weights {
                *w += 0.5;
            }
        })
        .unwrap();
    let err = session.step(&tr.samples()[INIT + 1]).unwrap_err();
    assert_eq!(err.exit_code(), 5);
}

#[test]
fn conventional_session_has_no_twins() {
    let tr = trace(20, 9);
    let mut session = Session::start(&config(3), &tr.slice(0, INIT), Mode::Conventional).unwrap();
    assert!(session.corrupt_ue_twin(|_| {}).is_err());
    session.step(&tr.samples()[INIT]).unwrap();
    assert_eq!(session.active_mode(), ActiveMode::Conventional);
}

#[test]
fn trace_no_longer_than_init_is_rejected() {
    let tr = trace(0, 10);
    assert!(run_session(&config(3), &tr, Mode::Hybrid).is_err());
}
