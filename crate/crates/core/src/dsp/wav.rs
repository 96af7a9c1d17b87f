use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio: finite samples in `[-1, 1]` and a positive sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::TooShort("waveform has no samples".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerics("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sub-range `[start, end)` as a new waveform.
    pub fn slice(&self, start: usize, end: usize) -> Result<Waveform> {
        if start >= end || end > self.samples.len() {
            return Err(Error::Shape(format!(
                "slice {start}..{end} of {} samples",
                self.samples.len()
            )));
        }
        Waveform::new(self.samples[start..end].to_vec(), self.sample_rate)
    }

    pub fn rms(&self) -> f32 {
        let e: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (e / self.samples.len() as f64).sqrt() as f32
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// Reads a RIFF/WAVE file (16-bit PCM or 32-bit float), averaging channels
/// to mono and scaling PCM by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format("zero channels".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!("{bits}-bit {fmt:?} samples")));
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Waveform::new(mono, spec.sample_rate).map_err(|e| match e {
        Error::TooShort(_) => Error::Format(format!("{} holds no samples", path.display())),
        other => other,
    })
}

/// Writes 16-bit PCM mono; samples are clipped to `[-1, 1 - 2^-15]`.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &w.samples {
        writer
            .write_sample(quantize_pcm16(s))
            .map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

pub(crate) fn quantize_pcm16(s: f32) -> i16 {
    let clipped = s.clamp(-1.0, 1.0 - 1.0 / 32768.0);
    (clipped * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        // hound reports short reads as `Other`
        hound::Error::IoError(io)
            if matches!(io.kind(), std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other) =>
        {
            Error::Format(format!("{}: truncated file", path.display()))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::Format(format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => Error::Unsupported(format!("{}: unsupported WAV encoding", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}
