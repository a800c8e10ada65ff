//! Bias-free feed-forward core of the Jordan predictor.
//!
//! `hidden_layers` tanh layers of `J` units followed by a linear output layer.
//! Every matrix-vector product runs in a fixed loop order so results are
//! reproducible bit for bit on a given platform and build.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Dense weight grid, `rows` outputs by `cols` inputs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
        }
    }

    fn matvec(&self, x: &[f64], out: &mut Vec<f64>, muls: &mut u64) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
        *muls += (self.rows * self.cols) as u64;
    }
}

/// Per-layer outputs of one forward pass, input first.
#[derive(Debug, Clone)]
pub struct Activations {
    pub values: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("activations hold at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JordanNet {
    layers: Vec<Layer>,
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl JordanNet {
    pub fn zeros(input: usize, hidden_layers: usize, hidden_units: usize, output: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = input;
        for _ in 0..hidden_layers {
            layers.push(Layer::zeros(hidden_units, fan_in));
            fan_in = hidden_units;
        }
        layers.push(Layer::zeros(output, fan_in));
        Self { layers }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights from a ChaCha8 stream,
    /// drawn layer by layer in row-major order.
    pub fn random(input: usize, hidden_layers: usize, hidden_units: usize, output: usize, seed: u64) -> Self {
        let mut net = Self::zeros(input, hidden_layers, hidden_units, output);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.cols as f64).sqrt();
            for w in &mut layer.weights {
                *w = (2.0 * unit(&mut rng) - 1.0) * bound;
            }
        }
        net
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::shape("network needs at least one hidden layer and an output layer"));
        }
        for pair in layers.windows(2) {
            if pair[1].cols != pair[0].rows {
                return Err(Error::shape(format!(
                    "layer fan-in {} does not match previous width {}",
                    pair[1].cols, pair[0].rows
                )));
            }
        }
        if layers.iter().any(|l| l.weights.len() != l.rows * l.cols) {
            return Err(Error::shape("weight grid size does not match its dimensions"));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().rows
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut at = 0;
        for layer in &mut self.layers {
            let n = layer.weights.len();
            layer.weights.copy_from_slice(&params[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().all(|w| w.is_finite()))
    }

    fn check_input(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.input_width() {
            return Err(Error::shape(format!(
                "network input has {} values, expected {}",
                q.len(),
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every layer's output, counting scalar multiplications.
    pub fn forward_counted(&self, q: &[f64], muls: &mut u64) -> Result<Activations> {
        self.check_input(q)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(q.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.rows);
            layer.matvec(values.last().unwrap(), &mut out, muls);
            if i < last {
                for v in &mut out {
                    *v = v.tanh();
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation in layer {i}")));
            }
            values.push(out);
        }
        Ok(Activations { values })
    }

    pub fn forward(&self, q: &[f64]) -> Result<Activations> {
        let mut muls = 0;
        self.forward_counted(q, &mut muls)
    }

    /// Accumulates `d loss / d weights` into `grads` given `d loss / d output`.
    pub fn backward(&self, acts: &Activations, d_out: &[f64], grads: &mut [Vec<f64>]) {
        let mut delta = d_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &acts.values[li];
            let g = &mut grads[li];
            for r in 0..layer.rows {
                let d = delta[r];
                let row = &mut g[r * layer.cols..(r + 1) * layer.cols];
                for (gw, xi) in row.iter_mut().zip(input) {
                    *gw += d * xi;
                }
            }
            if li == 0 {
                break;
            }
            // input[c] is the tanh output of the layer below
            let mut next = vec![0.0; layer.cols];
            for (d, row) in delta.iter().zip(layer.weights.chunks_exact(layer.cols)) {
                for (n, w) in next.iter_mut().zip(row) {
                    *n += d * w;
                }
            }
            for (n, a) in next.iter_mut().zip(input) {
                *n *= 1.0 - a * a;
            }
            delta = next;
        }
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect()
    }

    /// Mean-squared error `(1/K) sum_k (y_k - t_k)^2` and its gradient, flattened
    /// in the same order as [`params`](Self::params).
    pub fn loss_and_gradient(&self, q: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        let acts = self.forward(q)?;
        let (loss, d_out) = mse_and_grad(acts.output(), target)?;
        let mut grads = self.zero_grads();
        self.backward(&acts, &d_out, &mut grads);
        Ok((loss, grads.into_iter().flatten().collect()))
    }

    pub fn loss(&self, q: &[f64], target: &[f64]) -> Result<f64> {
        let acts = self.forward(q)?;
        Ok(mse_and_grad(acts.output(), target)?.0)
    }
}

pub(crate) fn mse_and_grad(out: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if out.len() != target.len() {
        return Err(Error::shape(format!(
            "target has {} values, output has {}",
            target.len(),
            out.len()
        )));
    }
    let k = out.len() as f64;
    let mut loss = 0.0;
    let mut d = Vec::with_capacity(out.len());
    for (y, t) in out.iter().zip(target) {
        let e = y - t;
        loss += e * e;
        d.push(2.0 * e / k);
    }
    Ok((loss / k, d))
}
