//! Element-wise midtread scalar quantizer for complex matrices.
//!
//! A `B`-bit quantizer has `L = 2^B - 1` reconstruction levels spread uniformly
//! over `[-A, A]` with spacing `2A / (L - 1)`, so zero is always a level and an
//! exactly-zero residual survives quantization unchanged. One codeword of the
//! `B`-bit alphabet is left unused. Real and imaginary parts are quantized
//! independently.

use num_complex::Complex64;

use crate::channel::{percentile, ChannelMatrix};
use crate::error::{Error, Result};

/// Largest supported bit width; keeps every level index exact in an `f64`.
pub const MAX_BITS: u32 = 52;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerSpec {
    bits: u32,
    clip: f64,
    step: f64,
    half: i64,
}

pub fn build_spec(bits: u32, clip: f64) -> Result<QuantizerSpec> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::config(format!("quantizer bits must be in 1..={MAX_BITS}, got {bits}")));
    }
    if !(clip.is_finite() && clip > 0.0) {
        return Err(Error::config(format!("quantizer clip must be positive and finite, got {clip}")));
    }
    let levels = (1u64 << bits) - 1;
    let half = ((levels - 1) / 2) as i64;
    let step = if half == 0 { 0.0 } else { clip / half as f64 };
    Ok(QuantizerSpec { bits, clip, step, half })
}

impl QuantizerSpec {
    /// Spec whose clip is the `pct`-th percentile of `|component|` over `samples`.
    pub fn from_percentile<'a>(
        bits: u32,
        samples: impl IntoIterator<Item = &'a ChannelMatrix>,
        pct: f64,
    ) -> Result<Self> {
        let mags: Vec<f64> = samples
            .into_iter()
            .flat_map(|m| m.entries().iter().flat_map(|z| [z.re.abs(), z.im.abs()]))
            .collect();
        let clip = percentile(&mags, pct);
        if clip <= 0.0 {
            return Err(Error::Degenerate(format!(
                "{pct}th percentile of component magnitudes is zero"
            )));
        }
        build_spec(bits, clip)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    /// Level spacing; zero for the single-level (1-bit) quantizer.
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn num_levels(&self) -> u64 {
        2 * self.half as u64 + 1
    }

    /// Worst-case absolute error for inputs inside `[-clip, clip]`.
    pub fn error_bound(&self) -> f64 {
        if self.half == 0 {
            self.clip
        } else {
            self.step / 2.0
        }
    }

    /// Reconstruction value of level `index` (0 is the most negative level).
    pub fn level(&self, index: u64) -> f64 {
        (index as i64 - self.half) as f64 * self.step
    }

    pub fn levels(&self) -> Vec<f64> {
        (0..self.num_levels()).map(|k| self.level(k)).collect()
    }

    /// Nearest level to `clamp(x, -A, A)`; ties go to the level of smaller magnitude.
    pub fn quantize_scalar(&self, x: f64) -> Result<(u64, f64)> {
        if !x.is_finite() {
            return Err(Error::Numeric(format!("cannot quantize non-finite value {x}")));
        }
        if self.half == 0 {
            return Ok((0, 0.0));
        }
        let xc = x.clamp(-self.clip, self.clip);
        let guess = ((xc / self.step).round() as i64).clamp(-self.half, self.half);
        let mut best = guess;
        let mut best_dist = (xc - best as f64 * self.step).abs();
        for m in [guess - 1, guess + 1] {
            if m < -self.half || m > self.half {
                continue;
            }
            let dist = (xc - m as f64 * self.step).abs();
            if dist < best_dist || (dist == best_dist && m.abs() < best.abs()) {
                best = m;
                best_dist = dist;
            }
        }
        Ok(((best + self.half) as u64, best as f64 * self.step))
    }

    /// Level indices of every component, real block first then imaginary block.
    pub fn encode_matrix(&self, m: &ChannelMatrix) -> Result<Vec<u64>> {
        let mut idx = Vec::with_capacity(2 * m.len());
        for z in m.entries() {
            idx.push(self.quantize_scalar(z.re)?.0);
        }
        for z in m.entries() {
            idx.push(self.quantize_scalar(z.im)?.0);
        }
        Ok(idx)
    }

    /// Inverse of [`encode_matrix`](Self::encode_matrix).
    pub fn decode_matrix(&self, indices: &[u64], n_r: usize, n_t: usize, time_index: u64) -> Result<ChannelMatrix> {
        let n = n_r * n_t;
        if indices.len() != 2 * n {
            return Err(Error::shape(format!(
                "{n_r}x{n_t} payload needs {} indices, got {}",
                2 * n,
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&k| k >= self.num_levels()) {
            return Err(Error::Numeric(format!("level index {bad} outside the {}-level grid", self.num_levels())));
        }
        let entries = (0..n)
            .map(|k| Complex64::new(self.level(indices[k]), self.level(indices[n + k])))
            .collect();
        ChannelMatrix::new(n_r, n_t, entries, time_index)
    }

    /// Bits needed to send one quantized matrix: `2 * n_r * n_t * B`.
    pub fn payload_bits(&self, n_r: usize, n_t: usize) -> u64 {
        2 * (n_r * n_t) as u64 * self.bits as u64
    }
}

/// Quantizes every real and imaginary component of `m`.
pub fn quantize_matrix(spec: &QuantizerSpec, m: &ChannelMatrix) -> Result<(ChannelMatrix, u64)> {
    let mut entries = Vec::with_capacity(m.len());
    for z in m.entries() {
        let (_, re) = spec.quantize_scalar(z.re)?;
        let (_, im) = spec.quantize_scalar(z.im)?;
        entries.push(Complex64::new(re, im));
    }
    let q = ChannelMatrix::new(m.n_r(), m.n_t(), entries, m.time_index())?;
    Ok((q, spec.payload_bits(m.n_r(), m.n_t())))
}
