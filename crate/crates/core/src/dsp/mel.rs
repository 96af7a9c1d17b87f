use serde::{Deserialize, Serialize};

use crate::dsp::stft::{FrameSpec, Padding, SpecKind, Spectrogram, StftPlan};
use crate::dsp::wav::Waveform;
use crate::error::{Error, Result};

/// Floor applied before the logarithm.
pub const LOG_EPS: f32 = 1e-5;

/// Whether mel energies are built from STFT magnitudes or powers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelScale {
    #[default]
    Magnitude,
    Power,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f32,
    /// `None` means Nyquist.
    pub fmax: Option<f32>,
    pub scale: MelScale,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
            scale: MelScale::Magnitude,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters, `n_mels x (fft_size/2 + 1)` row-major, each
/// row scaled so its largest weight is 1. A filter narrower than the bin
/// spacing collapses onto the bin nearest its centre.
pub fn mel_filterbank(sample_rate: u32, fft_size: usize, n_mels: usize, fmin: f32, fmax: f32) -> Result<Vec<f32>> {
    let nyquist = sample_rate as f32 / 2.0;
    if n_mels == 0 {
        return Err(Error::Config("n_mels must be at least 1".into()));
    }
    if fmax > nyquist {
        return Err(Error::Config(format!("fmax {fmax} above Nyquist {nyquist}")));
    }
    if !(0.0 <= fmin && fmin < fmax) {
        return Err(Error::Config(format!("mel range [{fmin}, {fmax}] is empty")));
    }
    let bins = fft_size / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(fmin as f64), hz_to_mel(fmax as f64));
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut fb = vec![0.0f32; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        let row = &mut fb[m * bins..(m + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            *w = v as f32;
        }
        let peak = row.iter().cloned().fold(0.0f32, f32::max);
        if peak > 0.0 {
            row.iter_mut().for_each(|w| *w /= peak);
        } else {
            let k = ((mid / bin_hz).round() as usize).min(bins - 1);
            row[k] = 1.0;
        }
    }
    Ok(fb)
}

/// Mel energies from a linear magnitude matrix.
pub fn apply_filterbank(mags: &[f32], frames: usize, bins: usize, fb: &[f32], n_mels: usize, scale: MelScale) -> Vec<f32> {
    let mut out = vec![0.0f32; frames * n_mels];
    for t in 0..frames {
        let row = &mags[t * bins..(t + 1) * bins];
        for m in 0..n_mels {
            let filt = &fb[m * bins..(m + 1) * bins];
            out[t * n_mels + m] = match scale {
                MelScale::Magnitude => row.iter().zip(filt).map(|(a, b)| a * b).sum(),
                MelScale::Power => row.iter().zip(filt).map(|(a, b)| a * a * b).sum(),
            };
        }
    }
    out
}

/// `ln(max(mel_energy, 1e-5))` frames.
pub fn log_mel(w: &Waveform, spec: &FrameSpec, fft_size: usize, cfg: &MelConfig) -> Result<Spectrogram> {
    let plan = StftPlan::for_spec(spec, fft_size)?;
    let fmax = cfg.fmax.unwrap_or(w.sample_rate() as f32 / 2.0);
    let fb = mel_filterbank(w.sample_rate(), fft_size, cfg.n_mels, cfg.fmin, fmax)?;
    let (frames, mags) = plan.magnitude(w.samples())?;
    let mel = apply_filterbank(&mags, frames, plan.bins(), &fb, cfg.n_mels, cfg.scale);
    Ok(Spectrogram {
        data: mel.into_iter().map(|v| v.max(LOG_EPS).ln()).collect(),
        n_frames: frames,
        n_bins: cfg.n_mels,
        kind: SpecKind::LogMel,
        frame_spec: *spec,
        padding: Padding::Center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft::stft_magnitude;

    fn spec() -> FrameSpec {
        FrameSpec::new(320, 1024, 16000).unwrap()
    }

    fn chirp(len: usize) -> Vec<f32> {
        (0..len)
            .map(|n| {
                let t = n as f64 / 16000.0;
                (0.4 * (2.0 * std::f64::consts::PI * (200.0 + 900.0 * t) * t).sin()) as f32
            })
            .collect()
    }

    #[test]
    fn rows_positive_and_peaks_ordered() {
        let fb = mel_filterbank(16000, 1024, 80, 0.0, 8000.0).unwrap();
        let bins = 513;
        let mut last_peak = 0usize;
        for m in 0..80 {
            let row = &fb[m * bins..(m + 1) * bins];
            let s: f32 = row.iter().sum();
            assert!(s > 0.0 && s.is_finite());
            let peak = (0..bins).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(peak >= last_peak, "filter {m} peak {peak} < {last_peak}");
            last_peak = peak;
        }
    }

    #[test]
    fn single_filter_spans_range() {
        let fb = mel_filterbank(16000, 1024, 1, 100.0, 4000.0).unwrap();
        let hz = |k: usize| k as f32 * 16000.0 / 1024.0;
        for (k, &w) in fb.iter().enumerate() {
            if w > 0.0 {
                assert!(hz(k) > 100.0 && hz(k) < 4000.0);
            }
        }
        assert!(fb.iter().any(|&w| w == 1.0));
    }

    #[test]
    fn fmax_above_nyquist_rejected() {
        assert!(matches!(
            mel_filterbank(16000, 1024, 10, 0.0, 9000.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn silence_is_log_eps() {
        let w = Waveform::new(vec![0.0; 3200], 16000).unwrap();
        let s = log_mel(&w, &spec(), 1024, &MelConfig::default()).unwrap();
        assert!(s.data.iter().all(|&v| v == LOG_EPS.ln()));
    }

    #[test]
    fn doubling_amplitude_shifts_by_log2_in_magnitude_mode() {
        let x = chirp(8000);
        let a = Waveform::new(x.clone(), 16000).unwrap();
        let b = Waveform::new(x.iter().map(|v| 2.0 * v).collect(), 16000).unwrap();
        for (scale, shift) in [(MelScale::Magnitude, 2f32.ln()), (MelScale::Power, 4f32.ln())] {
            let cfg = MelConfig {
                n_mels: 40,
                fmin: 0.0,
                fmax: Some(4000.0),
                scale,
            };
            let la = log_mel(&a, &spec(), 1024, &cfg).unwrap();
            let lb = log_mel(&b, &spec(), 1024, &cfg).unwrap();
            for (u, v) in la.data.iter().zip(&lb.data) {
                if *u > LOG_EPS.ln() + 1.0 {
                    assert!((v - u - shift).abs() < 1e-3, "{u} {v}");
                }
            }
        }
    }

    #[test]
    fn log_mel_is_composition_of_stft_matmul_log() {
        let w = Waveform::new(chirp(6000), 16000).unwrap();
        let cfg = MelConfig {
            n_mels: 32,
            ..MelConfig::default()
        };
        let lm = log_mel(&w, &spec(), 1024, &cfg).unwrap();
        let lin = stft_magnitude(&w, &spec(), 1024).unwrap();
        let fb = mel_filterbank(16000, 1024, 32, 0.0, 8000.0).unwrap();
        for t in 0..lin.n_frames {
            for m in 0..32 {
                let e: f64 = (0..lin.n_bins)
                    .map(|k| lin.get(t, k) as f64 * fb[m * lin.n_bins + k] as f64)
                    .sum();
                let expect = (e.max(LOG_EPS as f64)).ln();
                assert!((lm.get(t, m) as f64 - expect).abs() < 1e-5 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn log_mel_monotone_in_energy() {
        let x = chirp(4000);
        let cfg = MelConfig::default();
        let mut prev: Option<Spectrogram> = None;
        for gain in [0.1f32, 0.3, 0.6, 0.9] {
            let w = Waveform::new(x.iter().map(|v| v * gain).collect(), 16000).unwrap();
            let s = log_mel(&w, &spec(), 1024, &cfg).unwrap();
            if let Some(p) = &prev {
                assert!(p.data.iter().zip(&s.data).all(|(a, b)| b >= a));
            }
            prev = Some(s);
        }
    }
}
