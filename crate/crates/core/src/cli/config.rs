//! Flat `key = value` experiment configuration.
//!
//! One setting per line; blank lines and lines starting with `#` are ignored.
//! Lists are comma separated. Unknown keys are rejected.
//!
//! | key                  | meaning                                         | default          |
//! |----------------------|-------------------------------------------------|------------------|
//! | `seed`               | global seed (trace and predictor)               | 1                |
//! | `out`                | output directory                                | `out`            |
//! | `trace`              | trace file; generated when absent               |                  |
//! | `bits`               | quantization bits to sweep                      | 2,3,4,5          |
//! | `snr`                | SNR values in dB                                | 10               |
//! | `mode`               | `conventional`, `hybrid`, `switching`           | conventional,hybrid |
//! | `shared_twins`       | train one predictor on unquantized data         | false            |
//! | `n_t`, `n_r`         | antennas                                        | 4, 1             |
//! | `n_samples`          | generated trace length                          | 20000            |
//! | `sample_period`      | seconds between samples                         | 0.0005           |
//! | `carrier_hz`         | carrier frequency                               | 2.18e9           |
//! | `speed_kmh`          | UE speed                                        | 3                |
//! | `n_paths`            | paths per sub-channel                           | 8                |
//! | `path_gain_decay`    | power ratio of consecutive paths                | 1                |
//! | `shared_angles`      | array-wide path angles                          | false            |
//! | `init_length`        | initialization samples `S`                      | 18000            |
//! | `valid_fraction`     | share of `S` used for validation                | 0.1              |
//! | `skip_threshold`     | residual magnitude treated as zero              | 0                |
//! | `conventional_clip`  | `pct:<p>` or a fixed positive clip              | pct:99.9         |
//! | `residual_clip`      | `pct:<p>` or a fixed positive clip              | pct:99.9         |
//! | `retrain_window`     | samples collected before retraining             | `init_length`    |
//! | `switch_side`        | `oracle` or `ue`                                | oracle           |
//! | `recurrent_feed`     | `recovered` or `prediction`                     | recovered        |
//! | `delay`              | delayed matrices fed to the predictor           | 2                |
//! | `hidden_layers`      |                                                 | 2                |
//! | `hidden_units`       |                                                 | 20               |
//! | `learn_rate`         |                                                 | 1e-4             |
//! | `batch_size`         |                                                 | 20               |
//! | `epochs`             |                                                 | 100              |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::channel::GeneratorConfig;
use crate::error::{Error, Result};
use crate::feedback::{ClipRule, Mode, ProtocolConfig, RecurrentFeed, SwitchSide};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub trace_path: Option<PathBuf>,
    pub quant_bits: Vec<u32>,
    pub snr_db: Vec<f64>,
    pub modes: Vec<Mode>,
    pub shared_twins: bool,
    pub generator: GeneratorConfig,
    /// `quant_bits` and the predictor seed are filled in per cell.
    pub protocol: ProtocolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            trace_path: None,
            quant_bits: vec![2, 3, 4, 5],
            snr_db: vec![10.0],
            modes: vec![Mode::Conventional, Mode::Hybrid],
            shared_twins: false,
            generator: GeneratorConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::config(format!("'{key}' must list at least one value")));
    }
    Ok(items)
}

fn parse_clip(key: &str, value: &str) -> Result<ClipRule> {
    match value.strip_prefix("pct:") {
        Some(p) => Ok(ClipRule::Percentile(parse(key, p)?)),
        None => Ok(ClipRule::Fixed(parse(key, value)?)),
    }
}

/// Predictor seed derived from the global seed.
pub fn predictor_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let g = &mut self.generator;
        let p = &mut self.protocol;
        match key.trim() {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "trace" => self.trace_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "bits" => self.quant_bits = parse_list(key, value)?,
            "snr" => self.snr_db = parse_list(key, value)?,
            "mode" => self.modes = parse_list(key, value)?,
            "shared_twins" => self.shared_twins = parse_bool(key, value)?,
            "n_t" => g.n_t = parse(key, value)?,
            "n_r" => g.n_r = parse(key, value)?,
            "n_samples" => g.n_samples = parse(key, value)?,
            "sample_period" => g.sample_period = parse(key, value)?,
            "carrier_hz" => g.carrier_hz = parse(key, value)?,
            "speed_kmh" => g.speed_mps = parse::<f64>(key, value)? / 3.6,
            "n_paths" => g.n_paths = parse(key, value)?,
            "path_gain_decay" => g.path_gain_decay = parse(key, value)?,
            "shared_angles" => g.shared_angles = parse_bool(key, value)?,
            "init_length" => p.init_length = parse(key, value)?,
            "valid_fraction" => p.valid_fraction = parse(key, value)?,
            "skip_threshold" => p.skip_threshold = parse(key, value)?,
            "conventional_clip" => p.conventional_clip = parse_clip(key, value)?,
            "residual_clip" => p.residual_clip = parse_clip(key, value)?,
            "retrain_window" => p.retrain_window = Some(parse(key, value)?),
            "switch_side" => p.switch_side = value.parse::<SwitchSide>()?,
            "recurrent_feed" => p.recurrent_feed = value.parse::<RecurrentFeed>()?,
            "delay" => p.predictor.delay = parse(key, value)?,
            "hidden_layers" => p.predictor.hidden_layers = parse(key, value)?,
            "hidden_units" => p.predictor.hidden_units = parse(key, value)?,
            "learn_rate" => p.predictor.learn_rate = parse(key, value)?,
            "batch_size" => p.predictor.batch_size = parse(key, value)?,
            "epochs" => p.predictor.epochs = parse(key, value)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key, value)
                .map_err(|e| e.context(&format!("line {}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    /// Generator config with the global seed applied.
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            ..self.generator.clone()
        }
    }

    /// Protocol config for one sweep cell.
    pub fn protocol_for(&self, bits: u32) -> ProtocolConfig {
        let mut p = self.protocol.clone();
        p.quant_bits = bits;
        p.predictor.seed = predictor_seed(self.seed);
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.quant_bits.is_empty() || self.snr_db.is_empty() || self.modes.is_empty() {
            return Err(Error::config("sweep lists must be non-empty"));
        }
        if let Some(s) = self.snr_db.iter().find(|s| !s.is_finite()) {
            return Err(Error::config(format!("SNR must be finite, got {s}")));
        }
        for &b in &self.quant_bits {
            self.protocol_for(b).validate()?;
        }
        if self.trace_path.is_none() {
            self.generator().validate()?;
        }
        Ok(())
    }

    pub fn echo(&self) -> ConfigEcho {
        let clip = |r: ClipRule| match r {
            ClipRule::Percentile(p) => format!("pct:{p}"),
            ClipRule::Fixed(a) => format!("{a}"),
        };
        let g = self.generator();
        let p = &self.protocol;
        ConfigEcho {
            seed: self.seed,
            trace: self.trace_path.as_ref().map(|p| p.display().to_string()),
            bits: self.quant_bits.clone(),
            snr: self.snr_db.clone(),
            mode: self.modes.clone(),
            shared_twins: self.shared_twins,
            n_t: g.n_t,
            n_r: g.n_r,
            n_samples: g.n_samples,
            sample_period: g.sample_period,
            carrier_hz: g.carrier_hz,
            speed_kmh: g.speed_mps * 3.6,
            n_paths: g.n_paths,
            path_gain_decay: g.path_gain_decay,
            shared_angles: g.shared_angles,
            init_length: p.init_length,
            valid_fraction: p.valid_fraction,
            skip_threshold: p.skip_threshold,
            conventional_clip: clip(p.conventional_clip),
            residual_clip: clip(p.residual_clip),
            retrain_window: p.retrain_window,
            switch_side: p.switch_side,
            recurrent_feed: p.recurrent_feed,
            delay: p.predictor.delay,
            hidden_layers: p.predictor.hidden_layers,
            hidden_units: p.predictor.hidden_units,
            learn_rate: p.predictor.learn_rate,
            batch_size: p.predictor.batch_size,
            epochs: p.predictor.epochs,
        }
    }
}

/// Resolved settings as written to `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub seed: u64,
    pub trace: Option<String>,
    pub bits: Vec<u32>,
    pub snr: Vec<f64>,
    pub mode: Vec<Mode>,
    pub shared_twins: bool,
    pub n_t: usize,
    pub n_r: usize,
    pub n_samples: usize,
    pub sample_period: f64,
    pub carrier_hz: f64,
    pub speed_kmh: f64,
    pub n_paths: usize,
    pub path_gain_decay: f64,
    pub shared_angles: bool,
    pub init_length: usize,
    pub valid_fraction: f64,
    pub skip_threshold: f64,
    pub conventional_clip: String,
    pub residual_clip: String,
    pub retrain_window: Option<usize>,
    pub switch_side: SwitchSide,
    pub recurrent_feed: RecurrentFeed,
    pub delay: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub learn_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = ExperimentConfig::parse_text(
            "# sweep\nbits = 2, 3\nsnr=0,10\nmode=hybrid\nspeed_kmh=36\nresidual_clip=0.25\n\nconventional_clip=pct:99\n",
        )
        .unwrap();
        assert_eq!(cfg.quant_bits, vec![2, 3]);
        assert_eq!(cfg.snr_db, vec![0.0, 10.0]);
        assert_eq!(cfg.modes, vec![Mode::Hybrid]);
        assert!((cfg.generator.speed_mps - 10.0).abs() < 1e-12);
        assert_eq!(cfg.protocol.residual_clip, ClipRule::Fixed(0.25));
        assert_eq!(cfg.protocol.conventional_clip, ClipRule::Percentile(99.0));
    }

    #[test]
    fn rejects_unknown_key_with_line() {
        let err = ExperimentConfig::parse_text("bits=2\nfoo=1\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("line 2") && m.contains("foo")));
        assert!(ExperimentConfig::parse_text("bits\n").is_err());
        assert!(ExperimentConfig::parse_text("bits=\n").is_err());
        assert!(ExperimentConfig::parse_text("mode=fast\n").is_err());
    }

    #[test]
    fn cell_protocol_uses_bits_and_derived_seed() {
        let cfg = ExperimentConfig::default();
        let p = cfg.protocol_for(7);
        assert_eq!(p.quant_bits, 7);
        assert_eq!(p.predictor.seed, predictor_seed(1));
        assert!(cfg.validate().is_ok());
    }
}
