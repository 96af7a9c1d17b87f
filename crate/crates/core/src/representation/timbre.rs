//! Fixed-length timbre embeddings.
//!
//! The built-in embedder summarises a clip by per-band log-mel statistics
//! over time (96 band means, centred across bands, and 96 standard
//! deviations) and applies a fixed orthonormal rotation.

use std::path::PathBuf;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::mel::{log_mel, MelConfig};
use crate::dsp::stft::FrameSpec;
use crate::dsp::wav::Waveform;
use crate::error::{Error, Result};
use crate::representation::formats::read_embedding;

pub const EMBED_DIM: usize = 192;
const BANDS: usize = EMBED_DIM / 2;
const ROTATION_SEED: u64 = 0x7111_B4E5;

#[derive(Clone, Debug, PartialEq)]
pub struct TimbreEmbedding {
    pub vector: Vec<f32>,
    pub source_id: String,
}

impl TimbreEmbedding {
    pub fn new(vector: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding("non-finite entries".into()));
        }
        if vector.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidEmbedding("zero norm".into()));
        }
        Ok(Self {
            vector,
            source_id: source_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TimbreEmbedder {
    Builtin,
    /// An `NHTE` file holding a precomputed vector.
    FileIngest(PathBuf),
}

/// Orthonormal `EMBED_DIM x EMBED_DIM` matrix (Gram-Schmidt on a seeded
/// Gaussian matrix), row-major.
fn rotation() -> &'static [f64] {
    static ROT: OnceLock<Vec<f64>> = OnceLock::new();
    ROT.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(ROTATION_SEED);
        let n = EMBED_DIM;
        let mut q: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
                for k in 0..n {
                    q[i * n + k] -= dot * q[j * n + k];
                }
            }
            let norm = (0..n).map(|k| q[i * n + k].powi(2)).sum::<f64>().sqrt();
            for k in 0..n {
                q[i * n + k] /= norm;
            }
        }
        q
    })
}

pub fn embed_timbre(w: &Waveform, embedder: &TimbreEmbedder, source_id: &str) -> Result<TimbreEmbedding> {
    match embedder {
        TimbreEmbedder::FileIngest(path) => {
            let mut e = read_embedding(path, EMBED_DIM)?;
            e.source_id = source_id.to_string();
            Ok(e)
        }
        TimbreEmbedder::Builtin => builtin(w, source_id),
    }
}

fn builtin(w: &Waveform, source_id: &str) -> Result<TimbreEmbedding> {
    let sr = w.sample_rate();
    let fft = if sr <= 24000 { 1024 } else { 2048 };
    let spec = FrameSpec::new(fft / 4, fft, sr)?;
    let cfg = MelConfig {
        n_mels: BANDS,
        fmin: 40.0,
        ..MelConfig::default()
    };
    let mel = log_mel(w, &spec, fft, &cfg)?;
    let t = mel.n_frames as f64;
    let mut stats = vec![0.0f64; EMBED_DIM];
    for b in 0..BANDS {
        let mean = (0..mel.n_frames).map(|i| mel.get(i, b) as f64).sum::<f64>() / t;
        let var = (0..mel.n_frames).map(|i| (mel.get(i, b) as f64 - mean).powi(2)).sum::<f64>() / t;
        stats[b] = mean;
        stats[BANDS + b] = var.sqrt();
    }
    // remove overall loudness from the band means
    let level = stats[..BANDS].iter().sum::<f64>() / BANDS as f64;
    stats[..BANDS].iter_mut().for_each(|m| *m -= level);
    let rot = rotation();
    let v: Vec<f32> = (0..EMBED_DIM)
        .map(|i| {
            let r = &rot[i * EMBED_DIM..(i + 1) * EMBED_DIM];
            r.iter().zip(&stats).map(|(a, b)| a * b).sum::<f64>() as f32
        })
        .collect();
    TimbreEmbedding::new(v, source_id).map_err(|_| Error::InvalidEmbedding(format!("{source_id}: clip has no spectral variation")))
}

/// Cosine similarity; zero-norm inputs are an error.
pub fn cosine(a: &TimbreEmbedding, b: &TimbreEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("embedding dims {} vs {}", a.dim(), b.dim())));
    }
    let sq = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
    let (sa, sb) = (sq(&a.vector), sq(&b.vector));
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::InvalidEmbedding("zero norm".into()));
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(&x, &y)| x as f64 * y as f64).sum();
    // sqrt(sa * sb) is exact when a == b, so self-similarity is exactly 1
    Ok((dot / (sa * sb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn sawtooth(f: f32, secs: f32) -> Waveform {
        let n = (16000.0 * secs) as usize;
        let s = (0..n).map(|i| 0.4 * (2.0 * ((f * i as f32 / 16000.0) % 1.0) - 1.0)).collect();
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn rotation_is_orthonormal() {
        let q = rotation();
        for i in [0, 17, 191] {
            for j in [0, 17, 100, 191] {
                let dot: f64 = (0..EMBED_DIM).map(|k| q[i * EMBED_DIM + k] * q[j * EMBED_DIM + k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_clip_gives_cosine_one() {
        let w = sawtooth(220.0, 0.5);
        let a = embed_timbre(&w, &TimbreEmbedder::Builtin, "a").unwrap();
        let b = embed_timbre(&w, &TimbreEmbedder::Builtin, "a").unwrap();
        assert_eq!(a.dim(), EMBED_DIM);
        assert!((cosine(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sawtooth_and_noise_are_dissimilar() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0f32, 0.2).unwrap();
        let noise = Waveform::new((0..8000).map(|_| n.sample(&mut rng)).collect(), 16000).unwrap();
        let a = embed_timbre(&sawtooth(220.0, 0.5), &TimbreEmbedder::Builtin, "saw").unwrap();
        let b = embed_timbre(&noise, &TimbreEmbedder::Builtin, "noise").unwrap();
        let c = cosine(&a, &b).unwrap();
        assert!(c < 0.9, "{c}");
    }

    #[test]
    fn louder_copy_embeds_identically_in_band_shape() {
        let w = sawtooth(300.0, 0.5);
        let loud = Waveform::new(w.samples().iter().map(|v| v * 2.0).collect(), 16000).unwrap();
        let a = embed_timbre(&w, &TimbreEmbedder::Builtin, "a").unwrap();
        let b = embed_timbre(&loud, &TimbreEmbedder::Builtin, "b").unwrap();
        assert!(cosine(&a, &b).unwrap() > 0.99);
    }

    #[test]
    fn silence_has_no_embedding() {
        let w = Waveform::new(vec![0.0; 8000], 16000).unwrap();
        assert!(matches!(embed_timbre(&w, &TimbreEmbedder::Builtin, "s"), Err(Error::InvalidEmbedding(_))));
    }

    #[test]
    fn cosine_signs() {
        let e = TimbreEmbedding::new(vec![1.0, 2.0, -0.5], "e").unwrap();
        let neg = TimbreEmbedding::new(vec![-1.0, -2.0, 0.5], "n").unwrap();
        assert!((cosine(&e, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(TimbreEmbedding::new(vec![0.0; 3], "z"), Err(Error::InvalidEmbedding(_))));
    }
}
