use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::wav::Waveform;
use crate::error::{Error, Result};
use crate::numerics::ops::reflect;

/// Analysis frame grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub hop_samples: usize,
    pub win_samples: usize,
    pub sample_rate: u32,
}

impl FrameSpec {
    pub fn new(hop_samples: usize, win_samples: usize, sample_rate: u32) -> Result<Self> {
        if hop_samples == 0 || win_samples < hop_samples || sample_rate == 0 {
            return Err(Error::Config(format!(
                "frame spec hop {hop_samples}, win {win_samples}, rate {sample_rate}"
            )));
        }
        Ok(Self {
            hop_samples,
            win_samples,
            sample_rate,
        })
    }

    pub fn frame_period_ms(&self) -> f64 {
        1000.0 * self.hop_samples as f64 / self.sample_rate as f64
    }

    /// Verifies the hop matches the representation frame period.
    pub fn check_period(&self, period_ms: f64) -> Result<()> {
        if (self.frame_period_ms() - period_ms).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "hop {} at {} Hz is {} ms, expected {period_ms} ms",
                self.hop_samples,
                self.sample_rate,
                self.frame_period_ms()
            )));
        }
        Ok(())
    }

    /// Frames emitted for a signal of `len` samples under `padding`.
    pub fn num_frames(&self, len: usize, padding: Padding) -> usize {
        padding.num_frames(len, self.hop_samples, self.win_samples)
    }
}

/// Framing convention.
///
/// * `Center`: the signal is reflection-padded and frame `t` is centred on
///   sample `t * hop`; one frame per hop position inside the signal, i.e.
///   `ceil(len / hop)` frames.
/// * `Valid`: no padding, frame `t` covers `[t * hop, t * hop + win)`;
///   `floor((len - win) / hop) + 1` frames (0 when `len < win`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Center,
    Valid,
}

impl Padding {
    pub fn num_frames(self, len: usize, hop: usize, win: usize) -> usize {
        match self {
            Padding::Center => len.div_ceil(hop),
            Padding::Valid if len >= win => (len - win) / hop + 1,
            Padding::Valid => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecKind {
    Linear,
    Mel,
    LogMel,
    Subband,
}

/// `frames x bins` matrix of non-negative (or log) values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub data: Vec<f32>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub kind: SpecKind,
    pub frame_spec: FrameSpec,
    pub padding: Padding,
}

impl Spectrogram {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn get(&self, t: usize, b: usize) -> f32 {
        self.data[t * self.n_bins + b]
    }
}

/// Precomputed Hann window and FFT plans for one STFT configuration.
pub struct StftPlan {
    fft_size: usize,
    hop: usize,
    win: usize,
    padding: Padding,
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
    ifft: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan")
            .field("fft_size", &self.fft_size)
            .field("hop", &self.hop)
            .field("win", &self.win)
            .field("padding", &self.padding)
            .finish()
    }
}

impl StftPlan {
    pub fn new(fft_size: usize, hop: usize, win: usize, padding: Padding) -> Result<Self> {
        if !fft_size.is_power_of_two() || fft_size < 2 {
            return Err(Error::Config(format!("fft size {fft_size} is not a power of two")));
        }
        if fft_size < win {
            return Err(Error::Config(format!("fft size {fft_size} below window {win}")));
        }
        if hop == 0 || win == 0 {
            return Err(Error::Config("hop and window must be positive".into()));
        }
        // periodic Hann, centred inside the FFT buffer
        let offset = (fft_size - win) / 2;
        let mut window = vec![0.0f32; fft_size];
        for n in 0..win {
            let phase = 2.0 * std::f64::consts::PI * n as f64 / win as f64;
            window[offset + n] = (0.5 - 0.5 * phase.cos()) as f32;
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            fft_size,
            hop,
            win,
            padding,
            window,
            fft: planner.plan_fft_forward(fft_size),
            ifft: planner.plan_fft_inverse(fft_size),
        })
    }

    pub fn for_spec(spec: &FrameSpec, fft_size: usize) -> Result<Self> {
        Self::new(fft_size, spec.hop_samples, spec.win_samples, Padding::Center)
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f32] {
        &self.window
    }

    pub fn num_frames(&self, len: usize) -> usize {
        match self.padding {
            Padding::Center => self.padding.num_frames(len, self.hop, self.win),
            // the window sits centred inside the fft buffer
            Padding::Valid if len >= self.fft_size => (len - self.fft_size) / self.hop + 1,
            Padding::Valid => 0,
        }
    }

    /// Maps frame-local sample `n` of frame `t` to a signal index.
    #[inline]
    fn source_index(&self, t: usize, n: usize, len: usize) -> usize {
        match self.padding {
            Padding::Center => {
                let pos = (t * self.hop + n) as isize - (self.fft_size / 2) as isize;
                reflect(pos, len)
            }
            Padding::Valid => t * self.hop + n,
        }
    }

    /// One-sided complex spectra, frame-major.
    pub fn complex_frames(&self, signal: &[f32]) -> Result<(usize, Vec<Complex32>)> {
        let frames = self.num_frames(signal.len());
        if frames == 0 || signal.is_empty() {
            return Err(Error::TooShort(format!(
                "{} samples yield no STFT frames",
                signal.len()
            )));
        }
        let bins = self.bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex32::new(0.0, 0.0); self.fft_size];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            for (n, b) in buf.iter_mut().enumerate() {
                let w = self.window[n];
                *b = if w == 0.0 {
                    Complex32::new(0.0, 0.0)
                } else {
                    Complex32::new(w * signal[self.source_index(t, n, signal.len())], 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.extend_from_slice(&buf[..bins]);
        }
        Ok((frames, out))
    }

    /// Accumulates `∂L/∂x` into `grad` given per-bin weights
    /// `G_k = ∂L/∂|X_k| · X_k / |X_k|` for every frame.
    pub fn backprop_frames(&self, weighted: &[Complex32], frames: usize, len: usize, grad: &mut [f32]) {
        let bins = self.bins();
        let mut buf = vec![Complex32::new(0.0, 0.0); self.fft_size];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.ifft.get_inplace_scratch_len()];
        for t in 0..frames {
            buf.iter_mut().for_each(|b| *b = Complex32::new(0.0, 0.0));
            buf[..bins].copy_from_slice(&weighted[t * bins..(t + 1) * bins]);
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            for n in 0..self.fft_size {
                let w = self.window[n];
                if w != 0.0 {
                    grad[self.source_index(t, n, len)] += w * buf[n].re;
                }
            }
        }
    }

    /// Magnitude matrix `frames x bins`.
    pub fn magnitude(&self, signal: &[f32]) -> Result<(usize, Vec<f32>)> {
        let (frames, spec) = self.complex_frames(signal)?;
        Ok((frames, spec.iter().map(|c| c.norm()).collect()))
    }
}

/// Hann-windowed STFT magnitudes with reflection centre padding.
pub fn stft_magnitude(w: &Waveform, spec: &FrameSpec, fft_size: usize) -> Result<Spectrogram> {
    let plan = StftPlan::for_spec(spec, fft_size)?;
    let (n_frames, data) = plan.magnitude(w.samples())?;
    Ok(Spectrogram {
        data,
        n_frames,
        n_bins: plan.bins(),
        kind: SpecKind::Linear,
        frame_spec: *spec,
        padding: Padding::Center,
    })
}
