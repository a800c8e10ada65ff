//! Trace files.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "CTRC" | u32 version=1 | u32 n_r | u32 n_t | u64 n_samples | f64 sample_period
//! then n_samples * n_r * n_t pairs of f64 (re, im), row-major by (rx, tx)
//! ```
//!
//! The text variant is CSV with header `t,rx,tx,re,im`, one row per sub-channel
//! and sample, ordered by `(t, rx, tx)`. Lines starting with `#` are comments; a
//! `# sample_period=<seconds>` comment sets the period (default 0.5 ms).
//! [`load_trace`] picks the format from the leading magic.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use super::{ChannelMatrix, ChannelTrace};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CTRC";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8;
const DEFAULT_CSV_PERIOD: f64 = 0.5e-3;

pub fn save_trace(trace: &ChannelTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_binary(trace)).map_err(|e| Error::io(path, e))
}

pub fn encode_binary(trace: &ChannelTrace) -> Vec<u8> {
    let n_values = trace.len() * trace.n_r() * trace.n_t() * 2;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * n_values);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(trace.n_r() as u32).to_le_bytes());
    buf.extend_from_slice(&(trace.n_t() as u32).to_le_bytes());
    buf.extend_from_slice(&(trace.len() as u64).to_le_bytes());
    buf.extend_from_slice(&trace.sample_period().to_le_bytes());
    for m in trace.samples() {
        for z in m.entries() {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    buf
}

pub fn save_trace_csv(trace: &ChannelTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "# sample_period={:e}", trace.sample_period()).unwrap();
    writeln!(out, "t,rx,tx,re,im").unwrap();
    for (t, m) in trace.samples().iter().enumerate() {
        for rx in 0..m.n_r() {
            for tx in 0..m.n_t() {
                let z = m.get(rx, tx);
                writeln!(out, "{t},{rx},{tx},{:e},{:e}", z.re, z.im).unwrap();
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<ChannelTrace> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tag = format!("file:{}", path.display());
    if bytes.starts_with(MAGIC) {
        decode_binary(&bytes, tag)
    } else {
        decode_csv(&bytes, tag)
    }
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn read_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub fn decode_binary(bytes: &[u8], source_tag: impl Into<String>) -> Result<ChannelTrace> {
    if bytes.len() < HEADER_LEN || !bytes.starts_with(MAGIC) {
        return Err(Error::Parse("truncated or missing CTRC header".into()));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported CTRC version {version}")));
    }
    let n_r = read_u32(bytes, 8) as usize;
    let n_t = read_u32(bytes, 12) as usize;
    let n_samples = read_u64(bytes, 16) as usize;
    let period = read_f64(bytes, 24);
    if n_r == 0 || n_t == 0 {
        return Err(Error::Parse(format!("header declares {n_r}x{n_t} channel")));
    }
    if n_samples == 0 {
        return Err(Error::Parse("no samples".into()));
    }
    let n_sub = n_r * n_t;
    let expected = n_samples
        .checked_mul(n_sub * 16)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Parse("header sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Parse(format!(
            "payload is {} bytes, header implies {}",
            bytes.len() - HEADER_LEN,
            expected - HEADER_LEN
        )));
    }
    let mut samples = Vec::with_capacity(n_samples);
    let mut at = HEADER_LEN;
    for t in 0..n_samples {
        let mut entries = Vec::with_capacity(n_sub);
        for k in 0..n_sub {
            let z = Complex64::new(read_f64(bytes, at), read_f64(bytes, at + 8));
            if !(z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::Parse(format!(
                    "non-finite value at sample {t}, rx {}, tx {}",
                    k / n_t,
                    k % n_t
                )));
            }
            entries.push(z);
            at += 16;
        }
        samples.push(ChannelMatrix::from_raw(n_r, n_t, entries, t as u64));
    }
    ChannelTrace::new(n_r, n_t, period, samples, source_tag).map_err(|e| Error::Parse(e.to_string()))
}

struct CsvRow {
    line: u64,
    t: u64,
    rx: usize,
    tx: usize,
    value: Complex64,
}

pub fn decode_csv(bytes: &[u8], source_tag: impl Into<String>) -> Result<ChannelTrace> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Parse("trace file is neither CTRC nor UTF-8 text".into()))?;
    let mut period = DEFAULT_CSV_PERIOD;
    for line in text.lines().filter_map(|l| l.trim().strip_prefix('#')) {
        if let Some((key, value)) = line.split_once('=') {
            if key.trim() == "sample_period" {
                period = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad sample_period comment {:?}", value.trim())))?;
            }
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader.headers().map_err(|e| Error::Parse(format!("bad header: {e}")))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.is_empty() || cols == [""] {
        return Err(Error::Parse("no samples".into()));
    }
    if cols != ["t", "rx", "tx", "re", "im"] {
        return Err(Error::Parse(format!("expected header t,rx,tx,re,im, got {}", cols.join(","))));
    }

    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse(format!("malformed row: {e}")))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |what: &str| Error::Parse(format!("row at line {line}: bad {what}"));
        if rec.len() != 5 {
            return Err(Error::Parse(format!("row at line {line}: expected 5 fields, got {}", rec.len())));
        }
        let t: u64 = rec[0].parse().map_err(|_| bad("t"))?;
        let rx: usize = rec[1].parse().map_err(|_| bad("rx"))?;
        let tx: usize = rec[2].parse().map_err(|_| bad("tx"))?;
        let re: f64 = rec[3].parse().map_err(|_| bad("re"))?;
        let im: f64 = rec[4].parse().map_err(|_| bad("im"))?;
        if !(re.is_finite() && im.is_finite()) {
            return Err(Error::Parse(format!("row at line {line}: non-finite entry")));
        }
        rows.push(CsvRow {
            line,
            t,
            rx,
            tx,
            value: Complex64::new(re, im),
        });
    }
    if rows.is_empty() {
        return Err(Error::Parse("no samples".into()));
    }

    let n_r = rows.iter().map(|r| r.rx).max().unwrap() + 1;
    let n_t = rows.iter().map(|r| r.tx).max().unwrap() + 1;
    let n_sub = n_r * n_t;
    if rows.len() % n_sub != 0 {
        return Err(Error::Parse(format!(
            "{} rows is not a multiple of n_r x n_t = {n_r}x{n_t}",
            rows.len()
        )));
    }
    let t0 = rows[0].t;
    let mut samples = Vec::with_capacity(rows.len() / n_sub);
    for (s, chunk) in rows.chunks(n_sub).enumerate() {
        let t = t0 + s as u64;
        for (k, row) in chunk.iter().enumerate() {
            if row.t != t || row.rx != k / n_t || row.tx != k % n_t {
                return Err(Error::Parse(format!(
                    "row at line {}: expected (t={t}, rx={}, tx={}), got ({}, {}, {})",
                    row.line,
                    k / n_t,
                    k % n_t,
                    row.t,
                    row.rx,
                    row.tx
                )));
            }
        }
        let entries = chunk.iter().map(|r| r.value).collect();
        samples.push(ChannelMatrix::from_raw(n_r, n_t, entries, t));
    }
    ChannelTrace::new(n_r, n_t, period, samples, source_tag).map_err(|e| Error::Parse(e.to_string()))
}
