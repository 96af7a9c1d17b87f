//! Pairs manifest evaluation and CSV/JSON reports.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::read_wav;
use crate::error::{Error, Result};
use crate::eval::{lf0_rmse, mcd, sim, vuv_error, EvalConfig};
use crate::pitch::{estimate_f0, F0Contour, PitchConfig};
use crate::representation::formats::read_embedding;
use crate::representation::timbre::{embed_timbre, TimbreEmbedder, EMBED_DIM};

pub const METRICS: [&str; 4] = ["lf0_rmse", "vuv", "sim", "mcd"];

/// One line of the pairs manifest (JSON lines). Relative paths resolve
/// against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRow {
    pub id: String,
    pub hyp_path: PathBuf,
    #[serde(default)]
    pub ref_path: Option<PathBuf>,
    #[serde(default)]
    pub ref_embedding_path: Option<PathBuf>,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<String>,
}

fn all_metrics() -> Vec<String> {
    METRICS.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub lf0_rmse: Option<f64>,
    pub vuv_pct: Option<f64>,
    pub sim: Option<f64>,
    pub mcd: Option<f64>,
    /// Log-F0 RMSE was requested but undefined (no co-voiced frames).
    pub f0_nan: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub rows: usize,
    pub failed: usize,
    pub lf0_rmse_mean: Option<f64>,
    pub lf0_rmse_count: usize,
    pub vuv_pct_mean: Option<f64>,
    pub sim_mean: Option<f64>,
    pub mcd_mean: Option<f64>,
    /// Percentage of log-F0 evaluations that produced no value.
    pub f0_nan_pct: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<PairRecord>,
    pub aggregates: Aggregates,
}

impl MetricReport {
    pub fn from_records(records: Vec<PairRecord>) -> Self {
        let mean = |f: &dyn Fn(&PairRecord) -> Option<f64>| {
            let v: Vec<f64> = records.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let lf0_attempts = records.iter().filter(|r| r.lf0_rmse.is_some() || r.f0_nan).count();
        let nan = records.iter().filter(|r| r.f0_nan).count();
        let aggregates = Aggregates {
            rows: records.len(),
            failed: records.iter().filter(|r| r.error.is_some()).count(),
            lf0_rmse_mean: mean(&|r| r.lf0_rmse),
            lf0_rmse_count: records.iter().filter(|r| r.lf0_rmse.is_some()).count(),
            vuv_pct_mean: mean(&|r| r.vuv_pct),
            sim_mean: mean(&|r| r.sim),
            mcd_mean: mean(&|r| r.mcd),
            f0_nan_pct: if lf0_attempts > 0 { 100.0 * nan as f64 / lf0_attempts as f64 } else { 0.0 },
        };
        Self { records, aggregates }
    }
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PairRow>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PairRow = serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if let Some(bad) = row.metrics.iter().find(|m| !METRICS.contains(&m.as_str())) {
            return Err(Error::Format(format!("{}:{}: unknown metric {bad}", path.display(), n + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn f0_or_unvoiced(w: &crate::dsp::Waveform, cfg: &PitchConfig) -> Result<F0Contour> {
    match estimate_f0(w, cfg) {
        Err(Error::TooShort(_)) => {
            let hop = cfg.hop_samples(w.sample_rate());
            let spec = crate::dsp::FrameSpec::new(hop, cfg.window_samples(w.sample_rate()).max(hop), w.sample_rate())?;
            F0Contour::from_hz(vec![0.0; w.len().div_ceil(hop)], spec)
        }
        other => other,
    }
}

fn evaluate_row(row: &PairRow, base: &Path, embedder: &TimbreEmbedder, pitch: &PitchConfig, cfg: &EvalConfig) -> Result<PairRecord> {
    let wants = |m: &str| row.metrics.iter().any(|x| x == m);
    let hyp = read_wav(resolve(base, &row.hyp_path))?;
    let reference = row.ref_path.as_ref().map(|p| read_wav(resolve(base, p))).transpose()?;
    let mut rec = PairRecord {
        id: row.id.clone(),
        ..PairRecord::default()
    };
    if wants("lf0_rmse") || wants("vuv") {
        let r = reference.as_ref().ok_or_else(|| Error::Data(format!("{}: F0 metrics need ref_path", row.id)))?;
        let fr = f0_or_unvoiced(r, pitch)?;
        let fh = f0_or_unvoiced(&hyp, pitch)?;
        if wants("lf0_rmse") {
            rec.lf0_rmse = lf0_rmse(&fr, &fh);
            rec.f0_nan = rec.lf0_rmse.is_none();
        }
        if wants("vuv") {
            rec.vuv_pct = Some(vuv_error(&fr, &fh));
        }
    }
    if wants("sim") {
        let target = match (&row.ref_embedding_path, &reference) {
            (Some(p), _) => read_embedding(resolve(base, p), EMBED_DIM)?,
            (None, Some(r)) => embed_timbre(r, embedder, &row.id)?,
            (None, None) => return Err(Error::Data(format!("{}: sim needs ref_path or ref_embedding_path", row.id))),
        };
        let e = embed_timbre(&hyp, embedder, &row.id)?;
        rec.sim = Some(sim(&e, &target)?);
    }
    if wants("mcd") {
        let r = reference.as_ref().ok_or_else(|| Error::Data(format!("{}: mcd needs ref_path", row.id)))?;
        rec.mcd = Some(mcd(r, &hyp, cfg)?);
    }
    Ok(rec)
}

/// Evaluates every row; a failing row is recorded with its error and the
/// run continues.
pub fn evaluate_manifest(pairs: impl AsRef<Path>, embedder: &TimbreEmbedder, pitch: &PitchConfig, cfg: &EvalConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let pairs = pairs.as_ref();
    let base = pairs.parent().unwrap_or(Path::new("."));
    let rows = read_pairs(pairs)?;
    let records = rows
        .iter()
        .map(|row| {
            evaluate_row(row, base, embedder, pitch, cfg).unwrap_or_else(|e| {
                log::warn!("{}: {e}", row.id);
                PairRecord {
                    id: row.id.clone(),
                    error: Some(e.to_string()),
                    ..PairRecord::default()
                }
            })
        })
        .collect();
    Ok(MetricReport::from_records(records))
}

const HEADER: [&str; 7] = ["id", "lf0_rmse", "vuv_pct", "sim", "mcd", "f0_nan", "error"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn write_report_csv(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(HEADER).map_err(csv_err)?;
    for r in &report.records {
        w.write_record([
            r.id.clone(),
            opt(r.lf0_rmse),
            opt(r.vuv_pct),
            opt(r.sim),
            opt(r.mcd),
            r.f0_nan.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<MetricReport> {
    let path = path.as_ref();
    let fmt = |e: String| Error::Format(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| fmt(e.to_string()))?.iter().map(String::from).collect();
    if header != HEADER {
        return Err(fmt(format!("unexpected columns {header:?}")));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| fmt(format!("bad number {s:?}")))
        }
    };
    let mut records = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        records.push(PairRecord {
            id: rec[0].to_string(),
            lf0_rmse: num(&rec[1])?,
            vuv_pct: num(&rec[2])?,
            sim: num(&rec[3])?,
            mcd: num(&rec[4])?,
            f0_nan: rec[5].parse().map_err(|_| fmt(format!("bad flag {:?}", &rec[5])))?,
            error: (!rec[6].is_empty()).then(|| rec[6].to_string()),
        });
    }
    Ok(MetricReport::from_records(records))
}

pub fn write_report_json(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
