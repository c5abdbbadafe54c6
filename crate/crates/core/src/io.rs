//! Weights files, run configuration and benchmark reports.
//!
//! # Weights file layout
//!
//! All integers are little-endian.
//!
//! | offset | size | content |
//! |---|---|---|
//! | 0 | 4 | magic `b"FIPA"` |
//! | 4 | 2 | format version, `u16`, currently `1` |
//! | 6 | 1 | scalar width in bytes, `4` (f32) or `8` (f64) |
//! | 7 | 4 | `n`, byte length of the config block, `u32` |
//! | 11 | n | [`IpaConfig`] as UTF-8 JSON |
//! | 11+n | 4 | tensor count, `u32` |
//!
//! followed by one entry per tensor:
//!
//! | size | content |
//! |---|---|
//! | 2 | name length `m`, `u16` |
//! | m | name, UTF-8 |
//! | 1 | scalar width in bytes (equal to the header width) |
//! | 1 | rank `k`, `u8` |
//! | 8·k | dimensions, `u64` each |
//! | width·∏dims | row-major payload, IEEE-754 little-endian |
//!
//! Tensors appear in the order of [`IpaWeights::named_tensors`], then the
//! constants `w_l` and `w_c` as shape `[1]` tensors. Trailing bytes after the
//! last entry are rejected.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchSettings;
use crate::error::{Error, Result};
use crate::ipa::{IpaConfig, IpaWeights};
use crate::kernel::TileSpec;
use crate::pair::DistogramSpec;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FIPA";
pub const FORMAT_VERSION: u16 = 1;

/// Serializes weights into the byte layout documented at module level.
pub fn encode_weights<T: Scalar>(w: &IpaWeights<T>) -> Result<Vec<u8>> {
    w.validate()?;
    let width = T::PRECISION.bytes() as u8;
    let config = serde_json::to_vec(&w.config)?;
    let w_l = Tensor::new(&[1], vec![w.w_l])?;
    let w_c = Tensor::new(&[1], vec![w.w_c])?;
    let mut entries = w.named_tensors();
    entries.push(("w_l", &w_l));
    entries.push(("w_c", &w_c));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(width);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(width);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len().saturating_sub(self.pos)
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn width_to_precision(width: u8) -> Result<Precision> {
    match width {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        other => Err(Error::Format(format!("unsupported scalar width {other}"))),
    }
}

struct Header<'a> {
    precision: Precision,
    config: IpaConfig,
    reader: Reader<'a>,
}

fn read_header(bytes: &[u8]) -> Result<Header<'_>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected \"FIPA\""
        )));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let precision = width_to_precision(r.u8("scalar width")?)?;
    let n = r.u32("config length")? as usize;
    let config: IpaConfig = serde_json::from_slice(r.take(n, "config block")?)?;
    Ok(Header {
        precision,
        config,
        reader: r,
    })
}

/// Precision recorded in an encoded weights file.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    Ok(read_header(bytes)?.precision)
}

/// Decodes weights stored at precision `T`. A file written at the other
/// precision is rejected; use [`decode_weights_any`] to accept either.
pub fn decode_weights<T: Scalar>(bytes: &[u8]) -> Result<IpaWeights<T>> {
    let Header {
        precision,
        config,
        reader: mut r,
    } = read_header(bytes)?;
    if precision != T::PRECISION {
        return Err(Error::Format(format!(
            "file holds {precision} weights, requested {}",
            T::PRECISION
        )));
    }
    let width = precision.bytes();
    let count = r.u32("tensor count")? as usize;
    let mut tensors: HashMap<String, Tensor<T>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let m = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(m, "tensor name")?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let entry_width = r.u8("tensor width")?;
        if entry_width as usize != width {
            return Err(Error::Format(format!(
                "tensor {name} has width {entry_width}, header says {width}"
            )));
        }
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("tensor dimension")?;
            shape.push(
                usize::try_from(d)
                    .map_err(|_| Error::Format(format!("dimension {d} too large")))?,
            );
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let payload = r.take(numel, "tensor payload")?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        if tensors
            .insert(name.clone(), Tensor::new(&shape, data)?)
            .is_some()
        {
            return Err(Error::Format(format!("tensor {name} appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the tensor table",
            bytes.len() - r.pos
        )));
    }

    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    };
    let scalar = |t: Tensor<T>, name: &str| -> Result<T> {
        if t.shape() != [1] {
            return Err(Error::Format(format!(
                "{name} must have shape [1], got {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    };
    let w = IpaWeights {
        config,
        w_q: take("w_q")?,
        b_q: take("b_q")?,
        w_k: take("w_k")?,
        b_k: take("b_k")?,
        w_v: take("w_v")?,
        b_v: take("b_v")?,
        w_q_pts: take("w_q_pts")?,
        b_q_pts: take("b_q_pts")?,
        w_k_pts: take("w_k_pts")?,
        b_k_pts: take("b_k_pts")?,
        w_v_pts: take("w_v_pts")?,
        b_v_pts: take("b_v_pts")?,
        pair_bias: take("pair_bias")?,
        gamma_raw: take("gamma_raw")?,
        w_out: take("w_out")?,
        b_out: take("b_out")?,
        w_l: scalar(take("w_l")?, "w_l")?,
        w_c: scalar(take("w_c")?, "w_c")?,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unknown tensor {extra}")));
    }
    w.validate()?;
    Ok(w)
}

/// Weights at whichever precision the file was written in.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyWeights {
    F32(IpaWeights<f32>),
    F64(IpaWeights<f64>),
}

impl AnyWeights {
    pub fn precision(&self) -> Precision {
        match self {
            AnyWeights::F32(_) => Precision::F32,
            AnyWeights::F64(_) => Precision::F64,
        }
    }

    pub fn config(&self) -> &IpaConfig {
        match self {
            AnyWeights::F32(w) => &w.config,
            AnyWeights::F64(w) => &w.config,
        }
    }
}

pub fn decode_weights_any(bytes: &[u8]) -> Result<AnyWeights> {
    match peek_precision(bytes)? {
        Precision::F32 => decode_weights(bytes).map(AnyWeights::F32),
        Precision::F64 => decode_weights(bytes).map(AnyWeights::F64),
    }
}

pub fn save_weights<T: Scalar>(w: &IpaWeights<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(w)?)?;
    Ok(())
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<IpaWeights<T>> {
    decode_weights(&fs::read(path)?)
}

pub fn load_weights_any(path: impl AsRef<Path>) -> Result<AnyWeights> {
    decode_weights_any(&fs::read(path)?)
}

/// Contents of a `--config` file. Every section and every field is optional
/// and falls back to its default; unknown keys are rejected.
///
/// ```json
/// {
///   "ipa": {"d_in": 64, "d_z": 16, "heads": 4, "c": 16, "n_query": 4,
///           "n_value": 8, "rank": 2, "enforce_head_cap": true},
///   "distogram": {"k": 20, "n_bins": 22, "d_min": 2.0, "d_max": 22.0, "pe_dim": 16},
///   "tiles": {"block_rows": 64, "block_cols": 64},
///   "bench": {"trials": 100, "invariance_length": 64,
///             "equivalence_lengths": [16, 64, 128],
///             "lengths": [128, 256, 512, 1024, 2048, 4096, 8192],
///             "reference_max_length": 4096,
///             "memory_budget_bytes": 2147483648,
///             "translation_scale": 1.0, "repeats": 3}
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ipa: IpaConfig,
    pub distogram: DistogramSpec,
    pub tiles: TileSpec,
    pub bench: BenchSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.ipa.validate()?;
        self.distogram.validate()?;
        self.tiles.validate()?;
        self.bench.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// One measured forward pass. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub arm: String,
    #[serde(rename = "L")]
    pub length: usize,
    pub seed: u64,
    pub precision: Precision,
    pub peak_bytes: u64,
    pub seconds: f64,
}

/// Least-squares fit `y = a·L² + b·L` of one arm's peak bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub arm: String,
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    /// `y − (a·L² + b·L)` in record order.
    pub residuals: Vec<f64>,
    /// R² of an ordinary straight-line fit with intercept.
    pub linear_r2: f64,
    /// `|a|·L² / y_fit` at the largest length.
    pub quadratic_share_at_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `value <= threshold` (a NaN value fails).
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }

    /// Passes when `value < threshold` (a NaN value fails).
    pub fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value < threshold,
        }
    }

    /// Passes when `value > threshold`.
    pub fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value > threshold,
        }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    pub precision: Precision,
    pub config: RunConfig,
    pub records: Vec<Record>,
    pub fits: Vec<FitSummary>,
    pub checks: Vec<Check>,
    /// Skipped arms and other annotations.
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, seed: u64, precision: Precision, config: RunConfig) -> Self {
        Self {
            command: command.to_owned(),
            seed,
            precision,
            config,
            records: Vec::new(),
            fits: Vec::new(),
            checks: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

pub const CSV_HEADER: [&str; 6] = ["arm", "L", "seed", "precision", "peak_bytes", "seconds"];

/// CSV with the columns of [`CSV_HEADER`]; the header is written even when
/// there are no records.
pub fn records_to_csv(records: &[Record]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn records_from_csv(text: &str) -> Result<Vec<Record>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(Error::Format(format!(
            "CSV header {header:?} does not match {CSV_HEADER:?}"
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn report_to_string(report: &RunReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => records_to_csv(&report.records),
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)?),
    }
}

/// Writes the report: CSV holds the records only, JSON the full report.
pub fn emit_report(report: &RunReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, report_to_string(report, format)?)?;
    Ok(())
}

/// Reads records back from either output form, chosen by content.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with('{') {
        let report: RunReport = serde_json::from_str(&text)?;
        Ok(report.records)
    } else {
        records_from_csv(&text)
    }
}
