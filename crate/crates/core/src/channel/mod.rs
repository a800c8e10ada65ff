//! Channel realizations and time-ordered traces.
//!
//! A [`ChannelMatrix`] is one complex `n_r x n_t` realization stored row-major by
//! `(rx, tx)`. A [`ChannelTrace`] is a gap-free run of such realizations taken at a
//! fixed sampling period. Traces come from the Doppler fading generator in
//! [`generator`] or from files in the formats handled by [`io`].

pub mod generator;
pub mod io;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub use generator::{generate_trace, lag_autocorrelation, GeneratorConfig};
pub use io::{load_trace, save_trace, save_trace_csv};

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    n_r: usize,
    n_t: usize,
    entries: Vec<Complex64>,
    time_index: u64,
}

impl ChannelMatrix {
    pub fn new(n_r: usize, n_t: usize, entries: Vec<Complex64>, time_index: u64) -> Result<Self> {
        if n_r == 0 || n_t == 0 {
            return Err(Error::shape(format!("channel dimensions must be positive, got {n_r}x{n_t}")));
        }
        if entries.len() != n_r * n_t {
            return Err(Error::shape(format!(
                "{n_r}x{n_t} channel needs {} entries, got {}",
                n_r * n_t,
                entries.len()
            )));
        }
        if let Some(pos) = entries.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite channel entry at (rx {}, tx {})",
                pos / n_t,
                pos % n_t
            )));
        }
        Ok(Self {
            n_r,
            n_t,
            entries,
            time_index,
        })
    }

    pub fn zeros(n_r: usize, n_t: usize, time_index: u64) -> Self {
        Self {
            n_r,
            n_t,
            entries: vec![Complex64::new(0.0, 0.0); n_r * n_t],
            time_index,
        }
    }

    /// Builds a matrix from separate real and imaginary parts (row-major).
    pub fn from_parts(n_r: usize, n_t: usize, re: &[f64], im: &[f64], time_index: u64) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::shape("real and imaginary parts differ in length"));
        }
        let entries = re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect();
        Self::new(n_r, n_t, entries, time_index)
    }

    /// Unchecked constructor for values produced by arithmetic on finite matrices.
    pub(crate) fn from_raw(n_r: usize, n_t: usize, entries: Vec<Complex64>, time_index: u64) -> Self {
        debug_assert_eq!(entries.len(), n_r * n_t);
        Self {
            n_r,
            n_t,
            entries,
            time_index,
        }
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    /// Number of scalar sub-channels, `n_r * n_t`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_r, self.n_t)
    }

    pub fn time_index(&self) -> u64 {
        self.time_index
    }

    pub fn with_time_index(mut self, time_index: u64) -> Self {
        self.time_index = time_index;
        self
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn get(&self, rx: usize, tx: usize) -> Complex64 {
        self.entries[rx * self.n_t + tx]
    }

    /// Real and imaginary components interleaved as `[re..., im...]`.
    pub fn to_components(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|z| z.re)
            .chain(self.entries.iter().map(|z| z.im))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Largest absolute value over all real and imaginary components.
    pub fn max_abs_component(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|z| [z.re.abs(), z.im.abs()])
            .fold(0.0, f64::max)
    }

    /// Element-wise `self - other`, keeping `self`'s time index.
    pub fn sub(&self, other: &ChannelMatrix) -> Result<ChannelMatrix> {
        self.check_same_dims(other)?;
        let entries = self.entries.iter().zip(&other.entries).map(|(a, b)| a - b).collect();
        Ok(Self::from_raw(self.n_r, self.n_t, entries, self.time_index))
    }

    pub fn map(&self, mut f: impl FnMut(Complex64) -> Complex64) -> ChannelMatrix {
        let entries = self.entries.iter().map(|&z| f(z)).collect();
        Self::from_raw(self.n_r, self.n_t, entries, self.time_index)
    }

    /// Squared Frobenius distance `||self - other||^2`.
    pub fn distance_sq(&self, other: &ChannelMatrix) -> Result<f64> {
        self.check_same_dims(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum())
    }

    pub(crate) fn check_same_dims(&self, other: &ChannelMatrix) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "dimension mismatch: {}x{} vs {}x{}",
                self.n_r, self.n_t, other.n_r, other.n_t
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTrace {
    samples: Vec<ChannelMatrix>,
    sample_period: f64,
    n_r: usize,
    n_t: usize,
    source_tag: String,
}

impl ChannelTrace {
    /// Validates dimensions and the consecutive time-index invariant.
    pub fn new(
        n_r: usize,
        n_t: usize,
        sample_period: f64,
        samples: Vec<ChannelMatrix>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        if n_r == 0 || n_t == 0 {
            return Err(Error::shape(format!("trace dimensions must be positive, got {n_r}x{n_t}")));
        }
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(Error::config(format!("sample period must be positive, got {sample_period}")));
        }
        for (i, m) in samples.iter().enumerate() {
            if m.dims() != (n_r, n_t) {
                return Err(Error::shape(format!(
                    "sample {i} is {}x{}, trace is {n_r}x{n_t}",
                    m.n_r, m.n_t
                )));
            }
            if i > 0 && m.time_index != samples[i - 1].time_index + 1 {
                return Err(Error::shape(format!(
                    "time index jumps from {} to {} at sample {i}",
                    samples[i - 1].time_index, m.time_index
                )));
            }
        }
        Ok(Self {
            samples,
            sample_period,
            n_r,
            n_t,
            source_tag: source_tag.into(),
        })
    }

    /// A trace holding `n` copies of `value`, time indices `0..n`.
    pub fn constant(value: &ChannelMatrix, n: usize, sample_period: f64) -> Result<Self> {
        let samples = (0..n as u64).map(|t| value.clone().with_time_index(t)).collect();
        Self::new(value.n_r, value.n_t, sample_period, samples, "constant")
    }

    pub fn samples(&self) -> &[ChannelMatrix] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<ChannelMatrix> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// Contiguous sub-trace `[start, end)`; time indices are preserved.
    pub fn slice(&self, start: usize, end: usize) -> ChannelTrace {
        ChannelTrace {
            samples: self.samples[start..end].to_vec(),
            sample_period: self.sample_period,
            n_r: self.n_r,
            n_t: self.n_t,
            source_tag: self.source_tag.clone(),
        }
    }

    /// Same trace with every sample passed through `f` (dimensions must be kept).
    pub fn map(&self, f: impl FnMut(&ChannelMatrix) -> ChannelMatrix) -> ChannelTrace {
        let samples: Vec<_> = self.samples.iter().map(f).collect();
        debug_assert!(samples.iter().all(|m| m.dims() == (self.n_r, self.n_t)));
        ChannelTrace {
            samples,
            sample_period: self.sample_period,
            n_r: self.n_r,
            n_t: self.n_t,
            source_tag: self.source_tag.clone(),
        }
    }
}

/// Splits a trace into contiguous train / validation / test segments.
///
/// Segment sizes are `floor(train_frac * n)` and `floor(valid_frac * n)`; the
/// remainder goes to test. Order is preserved, nothing is shuffled.
pub fn split_trace(
    trace: &ChannelTrace,
    train_frac: f64,
    valid_frac: f64,
) -> Result<(ChannelTrace, ChannelTrace, ChannelTrace)> {
    if !(train_frac > 0.0 && valid_frac > 0.0 && train_frac + valid_frac < 1.0) {
        return Err(Error::config(format!(
            "split fractions must be positive with sum < 1, got {train_frac} + {valid_frac}"
        )));
    }
    let n = trace.len();
    let n_train = (train_frac * n as f64).floor() as usize;
    let n_valid = (valid_frac * n as f64).floor() as usize;
    Ok((
        trace.slice(0, n_train),
        trace.slice(n_train, n_train + n_valid),
        trace.slice(n_train + n_valid, n),
    ))
}

/// Linear-interpolated percentile (`pct` in `[0, 100]`) of `values`.
///
/// Returns 0 for an empty slice.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}
