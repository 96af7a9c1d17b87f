//! Objective metrics (log-F0 RMSE, V/UV error, timbre similarity, mel
//! cepstral distortion) and a manifest-driven report.

pub mod report;

use serde::{Deserialize, Serialize};

use crate::dsp::{log_mel, FrameSpec, MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::pitch::{align_f0, F0Contour};
use crate::representation::{cosine, TimbreEmbedding};

pub use report::{evaluate_manifest, read_report_csv, write_report_csv, write_report_json, Aggregates, MetricReport, PairRecord, PairRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mcd_n_mels: usize,
    /// Cepstral coefficients 1..=n are compared; c0 is excluded.
    pub mcd_coeffs: usize,
    pub frame_period_ms: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mcd_n_mels: 40,
            mcd_coeffs: 24,
            frame_period_ms: 20.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mcd_coeffs == 0 || self.mcd_coeffs >= self.mcd_n_mels {
            return Err(Error::Config(format!(
                "mcd_coeffs {} must be in 1..{}",
                self.mcd_coeffs, self.mcd_n_mels
            )));
        }
        if !(self.frame_period_ms > 0.0) {
            return Err(Error::Config("eval frame period must be positive".into()));
        }
        Ok(())
    }
}

fn equalize(a: &F0Contour, b: &F0Contour) -> (F0Contour, F0Contour) {
    let t = a.len().min(b.len());
    (align_f0(a, t), align_f0(b, t))
}

/// RMSE of natural-log F0 over frames voiced in both contours; `None` when
/// there are no such frames (counted as an F0 failure).
pub fn lf0_rmse(reference: &F0Contour, hyp: &F0Contour) -> Option<f64> {
    let (r, h) = equalize(reference, hyp);
    let (mut sum, mut n) = (0.0f64, 0usize);
    for i in 0..r.len() {
        if r.voiced[i] && h.voiced[i] {
            let d = (r.f0_hz[i] as f64).ln() - (h.f0_hz[i] as f64).ln();
            sum += d * d;
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// Percentage of frames whose voicing decisions differ.
pub fn vuv_error(reference: &F0Contour, hyp: &F0Contour) -> f64 {
    let (r, h) = equalize(reference, hyp);
    if r.is_empty() {
        return 0.0;
    }
    let diff = r.voiced.iter().zip(&h.voiced).filter(|(a, b)| a != b).count();
    100.0 * diff as f64 / r.len() as f64
}

pub fn sim(a: &TimbreEmbedding, b: &TimbreEmbedding) -> Result<f64> {
    cosine(a, b)
}

/// Orthonormal DCT-II of each log-mel frame, coefficients `1..=n`.
pub fn mel_cepstrum(w: &Waveform, cfg: &EvalConfig) -> Result<Vec<Vec<f64>>> {
    let sr = w.sample_rate();
    let hop = ((sr as f64 * cfg.frame_period_ms / 1000.0).round() as usize).max(1);
    if w.len() < hop {
        return Err(Error::TooShort(format!("{} samples, one frame needs {hop}", w.len())));
    }
    let win = 2 * hop;
    let fft = win.next_power_of_two();
    let spec = FrameSpec::new(hop, win, sr)?;
    let mel = log_mel(w, &spec, fft, &MelConfig { n_mels: cfg.mcd_n_mels, ..MelConfig::default() })?;
    let m = cfg.mcd_n_mels;
    let basis: Vec<Vec<f64>> = (1..=cfg.mcd_coeffs)
        .map(|k| {
            (0..m)
                .map(|n| (2.0 / m as f64).sqrt() * (std::f64::consts::PI * k as f64 * (n as f64 + 0.5) / m as f64).cos())
                .collect()
        })
        .collect();
    Ok((0..mel.n_frames)
        .map(|t| {
            let row = mel.row(t);
            basis.iter().map(|b| b.iter().zip(row).map(|(c, &v)| c * v as f64).sum()).collect()
        })
        .collect())
}

/// `(10 / ln 10) · √2 · mean_t ‖c_t − c'_t‖` over the common frames.
pub fn mcd_from_cepstra(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let t = a.len().min(b.len());
    if t == 0 {
        return Err(Error::TooShort("no frames to compare".into()));
    }
    let k = 10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2;
    let total: f64 = (0..t)
        .map(|i| a[i].iter().zip(&b[i]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(k * total / t as f64)
}

pub fn mcd(reference: &Waveform, hyp: &Waveform, cfg: &EvalConfig) -> Result<f64> {
    mcd_from_cepstra(&mel_cepstrum(reference, cfg)?, &mel_cepstrum(hyp, cfg)?)
}

#[cfg(test)]
mod tests;
