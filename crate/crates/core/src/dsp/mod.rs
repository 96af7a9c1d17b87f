//! Signal-processing primitives and WAV I/O shared by every other module.
//! All functions are pure.

pub mod mel;
pub mod stft;
pub mod subband;
pub mod wav;

pub use mel::{log_mel, mel_filterbank, MelConfig, MelScale};
pub use stft::{stft_magnitude, FrameSpec, Padding, SpecKind, Spectrogram, StftPlan};
pub use subband::{subband_decompose, subband_edges};
pub use wav::{read_wav, write_wav, Waveform};

/// Integer-factor decimation by block averaging.
pub fn decimate(w: &Waveform, factor: usize) -> Waveform {
    if factor <= 1 {
        return w.clone();
    }
    let samples: Vec<f32> = w
        .samples()
        .chunks(factor)
        .map(|c| c.iter().sum::<f32>() / c.len() as f32)
        .collect();
    Waveform::new(samples, w.sample_rate() / factor as u32).expect("decimated waveform stays valid")
}
