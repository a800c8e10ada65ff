//! Evaluation quantities over a sequence of (true, recovered) channel pairs.
//!
//! Every expectation is the arithmetic mean over the supplied steps. Alignment
//! metrics treat each `1 x N_t` matrix as a vector; matrix channels are rejected.

use num_complex::Complex64;
use serde::Serialize;

use crate::channel::ChannelMatrix;
use crate::error::{Error, Result};

fn check_lists(truth: &[ChannelMatrix], recovered: &[ChannelMatrix]) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::Degenerate("no steps to evaluate".into()));
    }
    if truth.len() != recovered.len() {
        return Err(Error::shape(format!(
            "{} true matrices but {} recovered",
            truth.len(),
            recovered.len()
        )));
    }
    for (h, g) in truth.iter().zip(recovered) {
        h.check_same_dims(g)?;
    }
    Ok(())
}

fn check_vector(h: &ChannelMatrix) -> Result<()> {
    if h.n_r() != 1 {
        return Err(Error::shape(format!(
            "alignment metrics need a single receive antenna, got n_r = {}",
            h.n_r()
        )));
    }
    Ok(())
}

/// `ĥ^H h`.
fn inner(recovered: &ChannelMatrix, truth: &ChannelMatrix) -> Complex64 {
    recovered.entries().iter().zip(truth.entries()).map(|(g, h)| g.conj() * h).sum()
}

/// Squared error ratio `‖H − Ĥ‖² / ‖H‖²` of one step.
pub fn step_nmse(truth: &ChannelMatrix, recovered: &ChannelMatrix) -> Result<f64> {
    let power = truth.frobenius_sq();
    if power == 0.0 {
        return Err(Error::Degenerate(format!(
            "true channel at t = {} has zero norm",
            truth.time_index()
        )));
    }
    Ok(truth.distance_sq(recovered)? / power)
}

/// Returns `(linear, dB)`; perfect recovery gives `(0, -inf)`.
pub fn nmse(truth: &[ChannelMatrix], recovered: &[ChannelMatrix]) -> Result<(f64, f64)> {
    check_lists(truth, recovered)?;
    let mut sum = 0.0;
    for (h, g) in truth.iter().zip(recovered) {
        sum += step_nmse(h, g)?;
    }
    let linear = sum / truth.len() as f64;
    Ok((linear, 10.0 * linear.log10()))
}

/// Per-step cosine similarity `|ĥ^H h| / (‖ĥ‖ ‖h‖)`.
pub fn step_cosine(truth: &ChannelMatrix, recovered: &ChannelMatrix) -> Result<f64> {
    check_vector(truth)?;
    truth.check_same_dims(recovered)?;
    let nh = truth.frobenius_sq().sqrt();
    let ng = recovered.frobenius_sq().sqrt();
    if nh == 0.0 || ng == 0.0 {
        return Err(Error::Degenerate(format!(
            "zero-norm channel vector at t = {}",
            truth.time_index()
        )));
    }
    Ok((inner(recovered, truth).norm() / (ng * nh)).min(1.0))
}

/// Per-step precoding gain `|h_eq|²`, where `h_eq` is the inner product of the
/// two normalized vectors.
pub fn step_gain(truth: &ChannelMatrix, recovered: &ChannelMatrix) -> Result<f64> {
    check_vector(truth)?;
    truth.check_same_dims(recovered)?;
    let nh = truth.frobenius_sq().sqrt();
    let ng = recovered.frobenius_sq().sqrt();
    if nh == 0.0 || ng == 0.0 {
        return Err(Error::Degenerate(format!(
            "zero-norm channel vector at t = {}",
            truth.time_index()
        )));
    }
    let h_eq = inner(recovered, truth) / (ng * nh);
    Ok(h_eq.norm_sqr())
}

/// Per-step rate `log2(1 + |h^H p|² γ / N_t)` with matched-filter precoder `p = ĥ / ‖ĥ‖`.
pub fn step_spectral_efficiency(truth: &ChannelMatrix, recovered: &ChannelMatrix, snr_db: f64) -> Result<f64> {
    check_vector(truth)?;
    truth.check_same_dims(recovered)?;
    if !snr_db.is_finite() {
        return Err(Error::config(format!("SNR must be finite, got {snr_db}")));
    }
    let ng2 = recovered.frobenius_sq();
    if ng2 == 0.0 || truth.frobenius_sq() == 0.0 {
        return Err(Error::Degenerate(format!(
            "zero-norm channel vector at t = {}",
            truth.time_index()
        )));
    }
    let gamma = 10f64.powf(snr_db / 10.0);
    let aligned = inner(recovered, truth).norm_sqr() / ng2;
    Ok((1.0 + aligned * gamma / truth.n_t() as f64).log2())
}

fn mean_of(
    truth: &[ChannelMatrix],
    recovered: &[ChannelMatrix],
    mut f: impl FnMut(&ChannelMatrix, &ChannelMatrix) -> Result<f64>,
) -> Result<f64> {
    check_lists(truth, recovered)?;
    let mut sum = 0.0;
    for (h, g) in truth.iter().zip(recovered) {
        sum += f(h, g)?;
    }
    Ok(sum / truth.len() as f64)
}

pub fn precoding_gain(truth: &[ChannelMatrix], recovered: &[ChannelMatrix]) -> Result<f64> {
    mean_of(truth, recovered, step_gain)
}

pub fn cosine_similarity(truth: &[ChannelMatrix], recovered: &[ChannelMatrix]) -> Result<f64> {
    mean_of(truth, recovered, step_cosine)
}

pub fn spectral_efficiency(truth: &[ChannelMatrix], recovered: &[ChannelMatrix], snr_db: f64) -> Result<f64> {
    mean_of(truth, recovered, |h, g| step_spectral_efficiency(h, g, snr_db))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub precoding_gain: f64,
    pub cosine_similarity: f64,
    pub spectral_efficiency: f64,
    pub snr_db: f64,
    pub n_steps: usize,
}

/// All metrics for one session segment.
///
/// A recovered vector of zero norm steers no beam; it contributes zero gain,
/// similarity and rate instead of failing the whole evaluation. A zero true
/// channel is still an error.
pub fn evaluate(truth: &[ChannelMatrix], recovered: &[ChannelMatrix], snr_db: f64) -> Result<MetricsRecord> {
    let (nmse_linear, nmse_db) = nmse(truth, recovered)?;
    let mut gain = 0.0;
    let mut cos = 0.0;
    let mut eta = 0.0;
    for (h, g) in truth.iter().zip(recovered) {
        check_vector(h)?;
        if g.frobenius_sq() == 0.0 {
            continue;
        }
        gain += step_gain(h, g)?;
        cos += step_cosine(h, g)?;
        eta += step_spectral_efficiency(h, g, snr_db)?;
    }
    let n = truth.len() as f64;
    Ok(MetricsRecord {
        nmse_linear,
        nmse_db,
        precoding_gain: gain / n,
        cosine_similarity: cos / n,
        spectral_efficiency: eta / n,
        snr_db,
        n_steps: truth.len(),
    })
}

/// Decibel value for CSV output; negative infinity becomes `-inf`.
pub fn format_db(db: f64) -> String {
    if db == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{db:.16e}")
    }
}
