//! Command-line front end: `generate`, `run` and `report`.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{generate_trace, lag_autocorrelation, load_trace, save_trace, ChannelTrace};
use crate::error::{Error, Result};
use crate::feedback::{self, Mode, ProtocolConfig, Session, SessionLog, SessionSummary};
use crate::metrics::{self, format_db};
use crate::predictor::{self, PredictorModel};

pub use config::{predictor_seed, ConfigEcho, ExperimentConfig};

/// Environment variable capping sweep parallelism.
pub const THREADS_ENV: &str = "TWINFEED_THREADS";

#[derive(Debug, Parser)]
#[command(name = "twinfeed", version, about = "Hybrid CSI feedback with twin channel predictors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic channel trace.
    Generate(CommonArgs),
    /// Run the feedback sweep and write results.
    Run(RunArgs),
    /// Turn a results CSV into per-figure data files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trace file (output of `generate`, input of `run`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated quantization bits.
    #[arg(long)]
    pub bits: Option<String>,
    /// Comma-separated SNR values in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: Option<String>,
    /// Comma-separated modes: conventional, hybrid, switching.
    #[arg(long)]
    pub mode: Option<String>,
    /// Train one predictor on unquantized data and share it across bit widths.
    #[arg(long)]
    pub shared_twins: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results CSV written by `run`.
    pub results: PathBuf,
    /// Output directory; defaults to the directory holding the results.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Config file, then `--set` overrides, then dedicated flags.
pub fn resolve_config(common: &CommonArgs, extra: &[(&str, Option<&str>)]) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for item in &common.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got '{item}'")))?;
        cfg.set(k, v)?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(trace) = &common.trace {
        cfg.trace_path = Some(trace.clone());
    }
    for (key, value) in extra {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

/// Dispatches a parsed command line; returns the text to print.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = resolve_config(&args, &[])?;
            let s = cmd_generate(&cfg)?;
            Ok(format!(
                "wrote {}: {} samples, {}x{}, lag-1 autocorrelation {:.6}\n",
                s.path.display(),
                s.samples,
                s.n_r,
                s.n_t,
                s.lag1_autocorrelation
            ))
        }
        Command::Run(args) => {
            let mut cfg = resolve_config(
                &args.common,
                &[
                    ("bits", args.bits.as_deref()),
                    ("snr", args.snr.as_deref()),
                    ("mode", args.mode.as_deref()),
                ],
            )?;
            cfg.shared_twins |= args.shared_twins;
            let rows = cmd_run(&cfg)?;
            let mut text = String::new();
            for r in &rows {
                writeln!(
                    text,
                    "bits={} {:<12} nmse={:>9} dB  gamma={:.4}  rho={:.4}  eta={:.4}  snr={} dB  bits_total={}",
                    r.bits,
                    r.method.as_str(),
                    if r.nmse_db == f64::NEG_INFINITY { "-inf".to_string() } else { format!("{:.3}", r.nmse_db) },
                    r.gamma,
                    r.rho,
                    r.eta,
                    r.snr_db,
                    r.bits_total
                )
                .unwrap();
            }
            writeln!(text, "results in {}", cfg.out_dir.display()).unwrap();
            Ok(text)
        }
        Command::Report(args) => {
            let out = args.out.unwrap_or_else(|| {
                args.results
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let files = cmd_report(&args.results, &out)?;
            let mut text = String::new();
            for f in files {
                writeln!(text, "wrote {}", f.display()).unwrap();
            }
            Ok(text)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub samples: usize,
    pub n_r: usize,
    pub n_t: usize,
    /// Mean over sub-channels.
    pub lag1_autocorrelation: f64,
}

/// Writes the configured synthetic trace to `trace` or `<out>/trace.ctrc`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GenerateSummary> {
    let trace = generate_trace(&cfg.generator())?;
    let path = match &cfg.trace_path {
        Some(p) => p.clone(),
        None => {
            create_dir(&cfg.out_dir)?;
            cfg.out_dir.join("trace.ctrc")
        }
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_trace(&trace, &path)?;
    let rho = lag_autocorrelation(&trace, 1);
    Ok(GenerateSummary {
        path,
        samples: trace.len(),
        n_r: trace.n_r(),
        n_t: trace.n_t(),
        lag1_autocorrelation: rho.iter().sum::<f64>() / rho.len() as f64,
    })
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub bits: u32,
    pub method: Mode,
    pub nmse_db: f64,
    pub gamma: f64,
    pub rho: f64,
    pub eta: f64,
    pub snr_db: f64,
    pub bits_total: u64,
}

pub const RESULTS_HEADER: &str = "bits,method,nmse_db,gamma,rho,eta,snr_db,bits_total";

pub fn format_results(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.16e},{:.16e},{:.16e},{},{}",
            r.bits,
            r.method.as_str(),
            format_db(r.nmse_db),
            r.gamma,
            r.rho,
            r.eta,
            r.snr_db,
            r.bits_total
        )
        .unwrap();
    }
    out
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse(format!("results header: {e}")))?;
    if headers.iter().collect::<Vec<_>>().join(",") != RESULTS_HEADER {
        return Err(Error::Parse(format!("results header must be '{RESULTS_HEADER}'")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<ResultRow>().enumerate() {
        rows.push(rec.map_err(|e| Error::Parse(format!("results row {}: {e}", i + 1)))?);
    }
    if rows.is_empty() {
        return Err(Error::Parse("no rows".into()));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
struct CellSummary {
    bits: u32,
    #[serde(flatten)]
    session: SessionSummary,
    multiply_count: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary {
    config: ConfigEcho,
    trace_source: String,
    trace_samples: usize,
    cells: Vec<CellSummary>,
}

struct CellOutput {
    bits: u32,
    mode: Mode,
    cfg: ProtocolConfig,
    log: SessionLog,
    multiply_count: Option<u64>,
}

fn run_cell(
    cfg: &ProtocolConfig,
    trace: &ChannelTrace,
    mode: Mode,
    shared: Option<&PredictorModel>,
) -> Result<(SessionLog, Option<u64>)> {
    let mut session = match shared {
        Some(model) if mode != Mode::Conventional => Session::start_with_model(cfg, trace, mode, model)?,
        _ => Session::start(cfg, trace, mode)?,
    };
    let muls = session
        .context()
        .hybrid
        .as_ref()
        .map(|h| h.gnb.model().count_multiplies());
    for h in &trace.samples()[cfg.init_length..] {
        session.step(h)?;
    }
    Ok((session.finish(), muls))
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

fn load_or_generate(cfg: &ExperimentConfig) -> Result<ChannelTrace> {
    match &cfg.trace_path {
        Some(p) => load_trace(p),
        None => generate_trace(&cfg.generator()),
    }
}

/// Runs every (bits, mode) cell and writes `results.csv`, `summary.json` and
/// one `session_<mode>_b<bits>.{csv,json}` pair per cell into the output
/// directory. Rows are ordered by bits, then mode, then SNR.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let trace = load_or_generate(cfg)?;
    let init_length = cfg.protocol.init_length;
    if trace.len() <= init_length {
        return Err(Error::config(format!(
            "trace has {} samples; init_length {} leaves no steps to simulate",
            trace.len(),
            init_length
        )));
    }
    if trace.n_r() != 1 {
        return Err(Error::config("metrics need a single receive antenna (n_r = 1)"));
    }
    create_dir(&cfg.out_dir)?;

    let shared = if cfg.shared_twins && cfg.modes.iter().any(|&m| m != Mode::Conventional) {
        let p = cfg.protocol_for(cfg.quant_bits[0]);
        let init = trace.slice(0, init_length);
        let (n_train, _) = p.split(init_length)?;
        let (model, _) = predictor::train(&p.predictor, &init.slice(0, n_train), &init.slice(n_train, init_length))
            .map_err(|e| e.context("shared twins"))?;
        Some(model)
    } else {
        None
    };

    let cells: Vec<(u32, Mode)> = cfg
        .quant_bits
        .iter()
        .flat_map(|&b| cfg.modes.iter().map(move |&m| (b, m)))
        .collect();
    let pool = thread_pool()?;
    let outputs: Vec<Result<CellOutput>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(bits, mode)| {
                let p = cfg.protocol_for(bits);
                run_cell(&p, &trace, mode, shared.as_ref())
                    .map(|(log, multiply_count)| CellOutput {
                        bits,
                        mode,
                        cfg: p,
                        log,
                        multiply_count,
                    })
                    .map_err(|e| e.context(&format!("cell bits={bits} mode={mode}")))
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for out in outputs {
        let out = out?;
        let truth = out.log.truths();
        let recovered = out.log.recovered();
        for &snr in &cfg.snr_db {
            let m = metrics::evaluate(&truth, &recovered, snr)
                .map_err(|e| e.context(&format!("cell bits={} mode={}", out.bits, out.mode)))?;
            rows.push(ResultRow {
                bits: out.bits,
                method: out.mode,
                nmse_db: m.nmse_db,
                gamma: m.precoding_gain,
                rho: m.cosine_similarity,
                eta: m.spectral_efficiency,
                snr_db: snr,
                bits_total: out.log.cumulative_bits,
            });
        }
        let stem = format!("session_{}_b{}", out.mode, out.bits);
        feedback::save_session(
            &out.cfg,
            &out.log,
            &cfg.out_dir.join(format!("{stem}.csv")),
            &cfg.out_dir.join(format!("{stem}.json")),
        )?;
        summaries.push(CellSummary {
            bits: out.bits,
            session: SessionSummary::new(&out.cfg, &out.log),
            multiply_count: out.multiply_count,
        });
    }

    write_file(&cfg.out_dir.join("results.csv"), format_results(&rows))?;
    let summary = RunSummary {
        config: cfg.echo(),
        trace_source: trace.source_tag().to_string(),
        trace_samples: trace.len(),
        cells: summaries,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Numeric(format!("summary: {e}")))?;
    write_file(&cfg.out_dir.join("summary.json"), json + "\n")?;
    Ok(rows)
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) if x == f64::NEG_INFINITY => "-inf".into(),
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Wide table: one row per `x`, one column per series; gaps stay empty.
fn series_table<K: Ord + Clone + ToString>(
    x_name: &str,
    points: &[(f64, K, f64)],
) -> String {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut series: BTreeMap<K, BTreeMap<u64, f64>> = BTreeMap::new();
    for (x, k, y) in points {
        series.entry(k.clone()).or_default().insert(x.to_bits(), *y);
    }
    let mut out = String::from(x_name);
    for k in series.keys() {
        out.push(',');
        out.push_str(&k.to_string());
    }
    out.push('\n');
    for x in xs {
        out.push_str(&format!("{x}"));
        for s in series.values() {
            out.push(',');
            out.push_str(&fmt_value(s.get(&x.to_bits()).copied()));
        }
        out.push('\n');
    }
    out
}

/// Writes `nmse_vs_bits.csv`, `eta_vs_bits.csv`, `eta_vs_snr.csv` and
/// `rho_gamma_vs_bits.csv`.
///
/// NMSE, ρ and Γ do not depend on SNR and are taken at the lowest SNR present.
pub fn cmd_report(results: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(results).map_err(|e| Error::io(results, e))?;
    let rows = parse_results(&text)?;
    let min_snr = rows.iter().map(|r| r.snr_db).fold(f64::INFINITY, f64::min);
    let base: Vec<&ResultRow> = rows.iter().filter(|r| r.snr_db == min_snr).collect();

    let nmse: Vec<_> = base
        .iter()
        .map(|r| (r.bits as f64, r.method.as_str().to_string(), r.nmse_db))
        .collect();
    let eta_bits: Vec<_> = rows
        .iter()
        .map(|r| (r.bits as f64, format!("{}_snr{}", r.method, r.snr_db), r.eta))
        .collect();
    let eta_snr: Vec<_> = rows
        .iter()
        .map(|r| (r.snr_db, format!("{}_b{:02}", r.method, r.bits), r.eta))
        .collect();
    let mut rho_gamma: Vec<_> = base
        .iter()
        .map(|r| (r.bits as f64, format!("rho_{}", r.method), r.rho))
        .collect();
    rho_gamma.extend(base.iter().map(|r| (r.bits as f64, format!("gamma_{}", r.method), r.gamma)));

    create_dir(out_dir)?;
    let files = [
        ("nmse_vs_bits.csv", series_table("bits", &nmse)),
        ("eta_vs_bits.csv", series_table("bits", &eta_bits)),
        ("eta_vs_snr.csv", series_table("snr_db", &eta_snr)),
        ("rho_gamma_vs_bits.csv", series_table("bits", &rho_gamma)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        write_file(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(bits: u32, method: Mode, nmse_db: f64, snr_db: f64) -> ResultRow {
        ResultRow {
            bits,
            method,
            nmse_db,
            gamma: 0.9,
            rho: 0.95,
            eta: 1.5,
            snr_db,
            bits_total: 100,
        }
    }

    #[test]
    fn results_round_trip_with_neg_inf() {
        let rows = vec![
            row(2, Mode::Conventional, -10.5, 0.0),
            row(2, Mode::Hybrid, f64::NEG_INFINITY, 0.0),
        ];
        let text = format_results(&rows);
        assert!(text.lines().nth(2).unwrap().starts_with("2,hybrid,-inf,"));
        assert_eq!(parse_results(&text).unwrap(), rows);
    }

    #[test]
    fn empty_results_have_no_rows() {
        let err = parse_results(&format!("{RESULTS_HEADER}\n")).unwrap_err();
        assert!(matches!(&err, Error::Parse(m) if m == "no rows"));
        assert!(matches!(parse_results(""), Err(Error::Parse(_))));
        assert!(matches!(parse_results("a,b\n1,2\n"), Err(Error::Parse(_))));
    }

    #[test]
    fn series_table_layout() {
        let pts = vec![
            (2.0, "hybrid".to_string(), -12.0),
            (2.0, "conventional".to_string(), -8.0),
            (3.0, "conventional".to_string(), -14.0),
        ];
        assert_eq!(
            series_table("bits", &pts),
            "bits,conventional,hybrid\n2,-8,-12\n3,-14,\n"
        );
    }
}
