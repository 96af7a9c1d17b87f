//! Frame-level F0 estimation with voiced/unvoiced decisions (YIN-style
//! cumulative-mean-normalised difference function).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::stft::{FrameSpec, Padding};
use crate::dsp::wav::Waveform;
use crate::error::{Error, Result};

/// Frames whose RMS falls below this are unvoiced without analysis.
const SILENCE_RMS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchConfig {
    pub fmin: f32,
    pub fmax: f32,
    pub harmonicity_threshold: f32,
    pub frame_period_ms: f32,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            fmin: 50.0,
            fmax: 1100.0,
            harmonicity_threshold: 0.1,
            frame_period_ms: 20.0,
        }
    }
}

impl PitchConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyq = sample_rate as f32 / 2.0;
        if !(self.fmin > 0.0 && self.fmin < self.fmax && self.fmax <= nyq) {
            return Err(Error::Config(format!(
                "pitch range [{}, {}] Hz invalid at {sample_rate} Hz",
                self.fmin, self.fmax
            )));
        }
        if !(self.harmonicity_threshold > 0.0 && self.harmonicity_threshold < 1.0) {
            return Err(Error::Config("harmonicity_threshold must lie in (0, 1)".into()));
        }
        if self.frame_period_ms <= 0.0 {
            return Err(Error::Config("frame_period_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        ((sample_rate as f64 * self.frame_period_ms as f64 / 1000.0).round() as usize).max(1)
    }

    /// Analysis buffer length: four periods of `fmin`.
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (4.0 * sample_rate as f64 / self.fmin as f64).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct F0Contour {
    pub f0_hz: Vec<f32>,
    pub voiced: Vec<bool>,
    pub frame_spec: FrameSpec,
}

impl F0Contour {
    /// Builds a contour from raw frequencies; non-positive values are unvoiced.
    pub fn from_hz(f0: Vec<f32>, frame_spec: FrameSpec) -> Result<Self> {
        let nyq = frame_spec.sample_rate as f32 / 2.0;
        if let Some(bad) = f0.iter().find(|v| !v.is_finite() || **v >= nyq) {
            return Err(Error::Data(format!("f0 value {bad} outside [0, {nyq})")));
        }
        let f0: Vec<f32> = f0.into_iter().map(|v| v.max(0.0)).collect();
        let voiced = f0.iter().map(|&v| v > 0.0).collect();
        Ok(Self {
            f0_hz: f0,
            voiced,
            frame_spec,
        })
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn voiced_fraction(&self) -> f32 {
        if self.is_empty() {
            return 0.0;
        }
        self.voiced.iter().filter(|&&v| v).count() as f32 / self.len() as f32
    }
}

/// Estimates one F0 value per `frame_period_ms`, frames centred on `t * hop`
/// (`ceil(len / hop)` frames; windows near the ends are shifted inside).
pub fn estimate_f0(w: &Waveform, cfg: &PitchConfig) -> Result<F0Contour> {
    let sr = w.sample_rate();
    cfg.validate(sr)?;
    let buf = cfg.window_samples(sr);
    if w.len() < buf {
        return Err(Error::TooShort(format!(
            "{} samples, pitch analysis needs {buf}",
            w.len()
        )));
    }
    let hop = cfg.hop_samples(sr);
    let spec = FrameSpec::new(hop, buf.max(hop), sr)?;
    let tau_max = ((sr as f64 / cfg.fmin as f64).floor() as usize).min(buf / 2);
    let tau_min = ((sr as f64 / cfg.fmax as f64).floor() as usize).max(2);
    let width = buf - tau_max - 1;
    let x = w.samples();
    let n = Padding::Center.num_frames(x.len(), hop, buf);

    let mut frame = vec![0.0f64; buf];
    let mut d = vec![0.0f64; tau_max + 2];
    let mut f0 = Vec::with_capacity(n);
    for t in 0..n {
        // edge frames slide inward rather than reflect: a mirrored
        // waveform is not periodic across the boundary
        let start = (t * hop).saturating_sub(buf / 2).min(x.len() - buf);
        for (v, &s) in frame.iter_mut().zip(&x[start..start + buf]) {
            *v = s as f64;
        }
        let energy: f64 = frame[..width].iter().map(|v| v * v).sum::<f64>() / width as f64;
        if energy.sqrt() < SILENCE_RMS {
            f0.push(0.0);
            continue;
        }
        f0.push(frame_f0(&frame, width, tau_min, tau_max, cfg.harmonicity_threshold as f64, &mut d, sr));
    }
    let nyq = sr as f32 / 2.0;
    let f0: Vec<f32> = f0
        .into_iter()
        .map(|v| if v > 0.0 && v < nyq { v } else { 0.0 })
        .collect();
    F0Contour::from_hz(f0, spec)
}

/// CMNDF analysis of a single buffer; returns 0 for unvoiced.
fn frame_f0(frame: &[f64], width: usize, tau_min: usize, tau_max: usize, threshold: f64, d: &mut [f64], sr: u32) -> f32 {
    d[0] = 1.0;
    let mut running = 0.0;
    for tau in 1..=tau_max + 1 {
        let diff: f64 = (0..width)
            .map(|j| {
                let e = frame[j] - frame[j + tau];
                e * e
            })
            .sum();
        running += diff;
        d[tau] = if running > 0.0 { diff * tau as f64 / running } else { 1.0 };
    }
    let mut tau = tau_min;
    while tau <= tau_max {
        if d[tau] < threshold {
            while tau < tau_max && d[tau + 1] < d[tau] {
                tau += 1;
            }
            break;
        }
        tau += 1;
    }
    if tau > tau_max {
        return 0.0;
    }
    let (a, b, c) = (d[tau - 1], d[tau], d[tau + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-1.0, 1.0) } else { 0.0 };
    (sr as f64 / (tau as f64 + shift)) as f32
}

/// Nearest-frame resampling to `target_frames`: output frame `i` takes
/// source frame `floor(i * T / target)`.
pub fn align_f0(c: &F0Contour, target_frames: usize) -> F0Contour {
    let t = c.len();
    let pick = |i: usize| if t == 0 { None } else { Some(i * t / target_frames) };
    let f0_hz: Vec<f32> = (0..target_frames).map(|i| pick(i).map_or(0.0, |j| c.f0_hz[j])).collect();
    let voiced = f0_hz.iter().map(|&v| v > 0.0).collect();
    F0Contour {
        f0_hz,
        voiced,
        frame_spec: c.frame_spec,
    }
}

pub fn is_valid_f0(c: &F0Contour) -> bool {
    c.voiced.iter().any(|&v| v)
}

/// `ln f0` on voiced frames, 0.0 on unvoiced ones (pair with `c.voiced`).
pub fn log_f0(c: &F0Contour) -> Vec<f32> {
    c.f0_hz
        .iter()
        .zip(&c.voiced)
        .map(|(&f, &v)| if v { f.ln() } else { 0.0 })
        .collect()
}

/// Reads a `frame_index<TAB>f0_hz` sidecar written by an external extractor.
pub fn read_f0_sidecar(path: impl AsRef<Path>, frame_spec: FrameSpec) -> Result<F0Contour> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut f0 = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Format(format!("{}:{}: expected 'index<TAB>f0'", path.display(), lineno + 1));
        let (idx, hz) = line.split_once('\t').ok_or_else(bad)?;
        let idx: usize = idx.trim().parse().map_err(|_| bad())?;
        let hz: f32 = hz.trim().parse().map_err(|_| bad())?;
        if idx != f0.len() {
            return Err(Error::Format(format!(
                "{}:{}: frame index {idx}, expected {}",
                path.display(),
                lineno + 1,
                f0.len()
            )));
        }
        f0.push(hz);
    }
    F0Contour::from_hz(f0, frame_spec)
}

pub fn write_f0_sidecar(c: &F0Contour, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(c.len() * 12);
    for (i, f) in c.f0_hz.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{f}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
