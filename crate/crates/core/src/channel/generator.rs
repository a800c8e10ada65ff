//! Sum-of-sinusoids Doppler fading generator.
//!
//! Every scalar sub-channel is
//!
//! ```text
//! h(t) = sum_p a_p * exp(j * (2 pi f_d cos(theta_p) t T_s + phi_p))
//! ```
//!
//! with path powers `a_p^2` proportional to `path_gain_decay^p` and normalized to
//! one. Each sub-channel is then rescaled so its time-average power over the
//! generated samples is exactly 1. Arrival
//! angles and phases are drawn from a ChaCha8 stream seeded by `seed`; the same
//! config always yields the same trace bit for bit.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::{ChannelMatrix, ChannelTrace};
use crate::error::{Error, Result};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_t: usize,
    pub n_r: usize,
    pub n_samples: usize,
    /// Seconds between consecutive realizations.
    pub sample_period: f64,
    pub carrier_hz: f64,
    pub speed_mps: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Power ratio between path `p + 1` and path `p`.
    pub path_gain_decay: f64,
    /// Draw one set of path angles for the whole array and give each antenna a
    /// per-path phase progression, instead of independent fading per antenna.
    pub shared_angles: bool,
    /// Overrides the random arrival angles (radians), one per path.
    pub fixed_angles: Option<Vec<f64>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_t: 4,
            n_r: 1,
            n_samples: 20_000,
            sample_period: 0.5e-3,
            carrier_hz: 2.18e9,
            speed_mps: 3.0 / 3.6,
            n_paths: 8,
            seed: 1,
            path_gain_decay: 1.0,
            shared_angles: false,
            fixed_angles: None,
        }
    }
}

impl GeneratorConfig {
    /// Maximum Doppler shift `v f_c / c` in hertz.
    pub fn doppler_hz(&self) -> f64 {
        self.speed_mps * self.carrier_hz / SPEED_OF_LIGHT
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_r == 0 {
            return Err(Error::config(format!(
                "antenna counts must be positive, got n_r={} n_t={}",
                self.n_r, self.n_t
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be positive"));
        }
        if self.n_paths == 0 {
            return Err(Error::config("n_paths must be at least 1"));
        }
        if !(self.sample_period.is_finite() && self.sample_period > 0.0) {
            return Err(Error::config(format!("sample_period must be positive, got {}", self.sample_period)));
        }
        if !(self.carrier_hz.is_finite() && self.carrier_hz > 0.0) {
            return Err(Error::config(format!("carrier_hz must be positive, got {}", self.carrier_hz)));
        }
        if !(self.speed_mps.is_finite() && self.speed_mps >= 0.0) {
            return Err(Error::config(format!("speed_mps must be non-negative, got {}", self.speed_mps)));
        }
        if !(self.path_gain_decay.is_finite() && self.path_gain_decay > 0.0) {
            return Err(Error::config(format!(
                "path_gain_decay must be positive, got {}",
                self.path_gain_decay
            )));
        }
        if let Some(angles) = &self.fixed_angles {
            if angles.len() != self.n_paths {
                return Err(Error::config(format!(
                    "fixed_angles has {} entries for {} paths",
                    angles.len(),
                    self.n_paths
                )));
            }
            if angles.iter().any(|a| !a.is_finite()) {
                return Err(Error::config("fixed_angles must be finite"));
            }
        }
        let nyquist = 0.5 / self.sample_period;
        let fd = self.doppler_hz();
        if fd >= nyquist {
            return Err(Error::config(format!(
                "Doppler {fd:.3} Hz is not below the fading Nyquist limit {nyquist:.3} Hz"
            )));
        }
        Ok(())
    }
}

/// Uniform draw in `[0, 1)` from the top 53 bits of the stream.
fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

struct Path {
    amplitude: f64,
    /// Radians per sample.
    omega: f64,
    phase: f64,
}

fn path_amplitudes(cfg: &GeneratorConfig) -> Vec<f64> {
    let powers: Vec<f64> = (0..cfg.n_paths).map(|p| cfg.path_gain_decay.powi(p as i32)).collect();
    let total: f64 = powers.iter().sum();
    powers.iter().map(|p| (p / total).sqrt()).collect()
}

fn path_omega(cfg: &GeneratorConfig, theta: f64) -> f64 {
    let c = theta.cos();
    // cos(pi/2) evaluates to ~6e-17; a broadside path has no Doppler.
    let c = if c.abs() < 1e-12 { 0.0 } else { c };
    2.0 * std::f64::consts::PI * cfg.doppler_hz() * c * cfg.sample_period
}

pub fn generate_trace(cfg: &GeneratorConfig) -> Result<ChannelTrace> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let amps = path_amplitudes(cfg);
    let two_pi = 2.0 * std::f64::consts::PI;
    let n_sub = cfg.n_r * cfg.n_t;

    let draw_angle = |rng: &mut ChaCha8Rng, p: usize| match &cfg.fixed_angles {
        Some(a) => a[p],
        None => two_pi * unit(rng),
    };

    let sub_paths: Vec<Vec<Path>> = if cfg.shared_angles {
        let shared: Vec<(f64, f64, f64)> = (0..cfg.n_paths)
            .map(|p| {
                let theta = draw_angle(&mut rng, p);
                let phase = two_pi * unit(&mut rng);
                let step = two_pi * unit(&mut rng);
                (theta, phase, step)
            })
            .collect();
        (0..n_sub)
            .map(|a| {
                shared
                    .iter()
                    .zip(&amps)
                    .map(|(&(theta, phase, step), &amplitude)| Path {
                        amplitude,
                        omega: path_omega(cfg, theta),
                        phase: phase + a as f64 * step,
                    })
                    .collect()
            })
            .collect()
    } else {
        (0..n_sub)
            .map(|_| {
                (0..cfg.n_paths)
                    .map(|p| {
                        let theta = draw_angle(&mut rng, p);
                        let phase = two_pi * unit(&mut rng);
                        Path {
                            amplitude: amps[p],
                            omega: path_omega(cfg, theta),
                            phase,
                        }
                    })
                    .collect()
            })
            .collect()
    };

    let mut columns: Vec<Vec<Complex64>> = sub_paths
        .iter()
        .map(|paths| {
            (0..cfg.n_samples as u64)
                .map(|t| {
                    paths
                        .iter()
                        .map(|p| Complex64::from_polar(p.amplitude, p.omega * t as f64 + p.phase))
                        .sum()
                })
                .collect()
        })
        .collect();
    // A desk-scale window spans few Doppler cycles, so the empirical power of a
    // sub-channel can sit well away from its ensemble value of one.
    for col in &mut columns {
        let power = col.iter().map(|z| z.norm_sqr()).sum::<f64>() / col.len() as f64;
        if power > 0.0 {
            let scale = power.sqrt().recip();
            col.iter_mut().for_each(|z| *z *= scale);
        }
    }
    let samples = (0..cfg.n_samples)
        .map(|t| {
            let entries = columns.iter().map(|col| col[t]).collect();
            ChannelMatrix::from_raw(cfg.n_r, cfg.n_t, entries, t as u64)
        })
        .collect();
    ChannelTrace::new(
        cfg.n_r,
        cfg.n_t,
        cfg.sample_period,
        samples,
        format!("sos:seed={}:v={}:paths={}", cfg.seed, cfg.speed_mps, cfg.n_paths),
    )
}

/// Normalized autocorrelation magnitude `|R(lag)| / R(0)` of every sub-channel.
pub fn lag_autocorrelation(trace: &ChannelTrace, lag: usize) -> Vec<f64> {
    let n = trace.len();
    let n_sub = trace.n_r() * trace.n_t();
    (0..n_sub)
        .map(|k| {
            let x: Vec<Complex64> = trace.samples().iter().map(|m| m.entries()[k]).collect();
            let r0: f64 = x.iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
            if n <= lag || r0 == 0.0 {
                return 0.0;
            }
            let r: Complex64 =
                x[lag..].iter().zip(&x[..n - lag]).map(|(a, b)| a * b.conj()).sum::<Complex64>() / (n - lag) as f64;
            r.norm() / r0
        })
        .collect()
}
