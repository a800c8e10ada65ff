//! Self-contained binary model blob.
//!
//! Little-endian throughout:
//!
//! ```text
//! "JRNN" | u32 version
//! u64 delay, hidden_layers, hidden_units, batch_size, epochs, seed
//! f64 learn_rate, beta1, beta2, epsilon
//! u64 n_r, n_t
//! f64 x K mean | f64 x K std          (K = 2 n_r n_t)
//! u64 layer count, then per layer: u64 rows, u64 cols, f64 x rows*cols
//! f64 x K recurrent state
//! ```

use std::path::Path;

use super::adam::AdamParams;
use super::network::{JordanNet, Layer};
use super::{Normalization, PredictorConfig, PredictorModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"JRNN";
const VERSION: u32 = 1;

pub fn encode_model(model: &PredictorModel) -> Vec<u8> {
    let mut out = Vec::new();
    let cfg = model.config();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.delay as u64,
        cfg.hidden_layers as u64,
        cfg.hidden_units as u64,
        cfg.batch_size as u64,
        cfg.epochs as u64,
        cfg.seed,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [cfg.learn_rate, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let (n_r, n_t) = model.dims();
    out.extend_from_slice(&(n_r as u64).to_le_bytes());
    out.extend_from_slice(&(n_t as u64).to_le_bytes());
    let norm = model.normalization();
    for v in norm.mean.iter().chain(&norm.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let layers = model.net().layers();
    out.extend_from_slice(&(layers.len() as u64).to_le_bytes());
    for l in layers {
        out.extend_from_slice(&(l.rows as u64).to_le_bytes());
        out.extend_from_slice(&(l.cols as u64).to_le_bytes());
        for w in &l.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    for v in model.recurrent() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Parse(format!("model blob truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Parse(format!("size {v} out of range")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Parse("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<PredictorModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse("not a model blob (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported model version {version}")));
    }
    let delay = r.usize()?;
    let hidden_layers = r.usize()?;
    let hidden_units = r.usize()?;
    let batch_size = r.usize()?;
    let epochs = r.usize()?;
    let seed = r.u64()?;
    let learn_rate = r.f64()?;
    let adam = AdamParams {
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
    };
    let config = PredictorConfig {
        delay,
        hidden_layers,
        hidden_units,
        learn_rate,
        batch_size,
        epochs,
        seed,
        adam,
    };
    config.validate().map_err(|e| Error::Parse(format!("model config: {e}")))?;
    let n_r = r.usize()?;
    let n_t = r.usize()?;
    let k = n_r
        .checked_mul(n_t)
        .and_then(|n| n.checked_mul(2))
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::Parse(format!("bad model dimensions {n_r}x{n_t}")))?;
    let mean = r.f64s(k)?;
    let std = r.f64s(k)?;
    let n_layers = r.usize()?;
    if n_layers != hidden_layers + 1 {
        return Err(Error::Parse(format!(
            "blob holds {n_layers} layers, config implies {}",
            hidden_layers + 1
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = r.usize()?;
        let cols = r.usize()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Parse("layer size overflow".into()))?;
        layers.push(Layer {
            rows,
            cols,
            weights: r.f64s(n)?,
        });
    }
    let recurrent = r.f64s(k)?;
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!("{} trailing bytes after model", bytes.len() - r.pos)));
    }
    let net = JordanNet::from_layers(layers).map_err(|e| Error::Parse(format!("model layers: {e}")))?;
    PredictorModel::from_parts(config, n_r, n_t, Normalization { mean, std }, net, recurrent)
        .map_err(|e| Error::Parse(format!("model blob: {e}")))
}

pub fn save_model(model: &PredictorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PredictorModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = PredictorConfig {
            delay: 1,
            hidden_units: 4,
            seed: 9,
            ..Default::default()
        };
        let mut m = PredictorModel::new(&cfg, 1, 2).unwrap();
        m.set_recurrent(&[0.1, -0.2, 0.3, 1e-300]).unwrap();
        let back = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_damage() {
        let m = PredictorModel::new(&PredictorConfig::default(), 1, 1).unwrap();
        let blob = encode_model(&m);
        assert!(matches!(decode_model(&blob[..blob.len() - 1]), Err(Error::Parse(_))));
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Parse(_))));
        let mut long = blob;
        long.push(0);
        assert!(matches!(decode_model(&long), Err(Error::Parse(_))));
    }
}
