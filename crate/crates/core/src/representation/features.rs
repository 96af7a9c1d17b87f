//! Multi-layer content features: a deterministic pseudo-SSL stack or
//! precomputed matrices ingested from `NHFT` files.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::mel::{log_mel, MelConfig};
use crate::dsp::stft::FrameSpec;
use crate::dsp::wav::Waveform;
use crate::dsp::decimate;
use crate::error::{Error, Result};
use crate::representation::formats::read_features;

/// Native rate of the pseudo-SSL front end.
pub const SSL_RATE: u32 = 16000;

/// Per-layer `T x D_l` matrices sharing one frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentFeatures {
    pub layer_ids: Vec<u32>,
    pub dims: Vec<usize>,
    /// Row-major `n_frames x dims[i]` per layer.
    pub layers: Vec<Vec<f32>>,
    pub n_frames: usize,
    pub frame_spec: FrameSpec,
}

impl ContentFeatures {
    pub fn new(layer_ids: Vec<u32>, dims: Vec<usize>, layers: Vec<Vec<f32>>, n_frames: usize, frame_spec: FrameSpec) -> Result<Self> {
        if layer_ids.len() != dims.len() || dims.len() != layers.len() || layers.is_empty() {
            return Err(Error::Format("feature layer lists disagree in length".into()));
        }
        for (i, (l, &d)) in layers.iter().zip(&dims).enumerate() {
            if d == 0 || l.len() != n_frames * d {
                return Err(Error::Format(format!(
                    "feature layer {} holds {} values, expected {n_frames} x {d}",
                    layer_ids[i],
                    l.len()
                )));
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("feature layer {} has non-finite values", layer_ids[i])));
            }
        }
        let mut seen = layer_ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != layer_ids.len() {
            return Err(Error::Format("duplicate feature layer ids".into()));
        }
        Ok(Self {
            layer_ids,
            dims,
            layers,
            n_frames,
            frame_spec,
        })
    }

    pub fn frame(&self, layer: usize, t: usize) -> &[f32] {
        let d = self.dims[layer];
        &self.layers[layer][t * d..(t + 1) * d]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSslConfig {
    /// Depth of the random map stack.
    pub n_layers: usize,
    /// 1-based layers exposed as features.
    pub layer_ids: Vec<u32>,
    pub dim: usize,
    pub n_mels: usize,
    /// Neighbouring frames on each side fed to the first map.
    pub context: usize,
    pub seed: u64,
}

impl Default for PseudoSslConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            layer_ids: vec![5, 8, 9, 12],
            dim: 32,
            n_mels: 40,
            context: 1,
            seed: 0x5EED_0551,
        }
    }
}

impl PseudoSslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.dim == 0 || self.n_mels == 0 || self.layer_ids.is_empty() {
            return Err(Error::Config("pseudo-ssl sizes must be positive".into()));
        }
        let mut ids = self.layer_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.layer_ids.len() || ids.iter().any(|&l| l == 0 || l as usize > self.n_layers) {
            return Err(Error::Config(format!(
                "layer ids {:?} must be distinct and within 1..={}",
                self.layer_ids, self.n_layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ContentExtractor {
    PseudoSsl(PseudoSslConfig),
    /// An `NHFT` file of precomputed per-layer matrices.
    FileIngest(PathBuf),
}

/// A fixed random stack `h_l = tanh(W_l h_{l-1} + b_l)` over stacked
/// log-mel context windows.
struct RandomStack {
    weights: Vec<(Vec<f32>, Vec<f32>, usize)>,
}

impl RandomStack {
    fn new(cfg: &PseudoSslConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut d_in = cfg.n_mels * (2 * cfg.context + 1);
        let weights = (0..cfg.n_layers)
            .map(|_| {
                // gain above 1 keeps activations from shrinking through depth
                let n = Normal::new(0.0f32, 1.6 / (d_in as f32).sqrt()).unwrap();
                let w: Vec<f32> = (0..cfg.dim * d_in).map(|_| n.sample(&mut rng)).collect();
                let b: Vec<f32> = (0..cfg.dim).map(|_| 0.1 * n.sample(&mut rng)).collect();
                let out = (w, b, d_in);
                d_in = cfg.dim;
                out
            })
            .collect();
        Self { weights }
    }
}

/// Analysis grid of the pseudo-SSL path: integer decimation towards 16 kHz
/// with the hop scaled to match, so frame counts equal `ceil(len / hop)`.
fn ssl_grid(spec: &FrameSpec) -> Result<(usize, usize)> {
    let factor = (spec.sample_rate / SSL_RATE).max(1) as usize;
    if spec.hop_samples % factor != 0 {
        return Err(Error::Config(format!(
            "hop {} is not divisible by the decimation factor {factor}",
            spec.hop_samples
        )));
    }
    Ok((factor, spec.hop_samples / factor))
}

pub fn extract_content_features(w: &Waveform, spec: &FrameSpec, extractor: &ContentExtractor) -> Result<ContentFeatures> {
    match extractor {
        ContentExtractor::FileIngest(path) => {
            let f = read_features(path, *spec)?;
            let expected = spec.num_frames(w.len(), crate::dsp::Padding::Center);
            if f.n_frames != expected {
                return Err(Error::Format(format!(
                    "{}: {} frames, audio implies {expected}",
                    path.display(),
                    f.n_frames
                )));
            }
            Ok(f)
        }
        ContentExtractor::PseudoSsl(cfg) => pseudo_ssl(w, spec, cfg),
    }
}

fn pseudo_ssl(w: &Waveform, spec: &FrameSpec, cfg: &PseudoSslConfig) -> Result<ContentFeatures> {
    cfg.validate()?;
    if w.sample_rate() != spec.sample_rate {
        return Err(Error::Config(format!(
            "audio at {} Hz, representation expects {} Hz",
            w.sample_rate(),
            spec.sample_rate
        )));
    }
    let (factor, hop) = ssl_grid(spec)?;
    let x = decimate(w, factor);
    let fft = (4 * hop).next_power_of_two();
    let aspec = FrameSpec::new(hop, fft.min(4 * hop).max(hop), x.sample_rate())?;
    let mel = log_mel(
        &x,
        &aspec,
        fft,
        &MelConfig {
            n_mels: cfg.n_mels,
            ..MelConfig::default()
        },
    )?;
    let t_len = mel.n_frames;
    let stack = RandomStack::new(cfg);
    let ctx = cfg.context as isize;
    let mut h: Vec<f32> = Vec::with_capacity(t_len * cfg.n_mels * (2 * cfg.context + 1));
    for t in 0..t_len as isize {
        for o in -ctx..=ctx {
            let src = (t + o).clamp(0, t_len as isize - 1) as usize;
            // centre the log energies roughly around zero
            h.extend(mel.row(src).iter().map(|v| (v + 4.0) * 0.25));
        }
    }
    let mut layers = Vec::with_capacity(cfg.layer_ids.len());
    let mut outputs: Vec<Option<Vec<f32>>> = vec![None; cfg.n_layers];
    for (li, (wm, b, d_in)) in stack.weights.iter().enumerate() {
        let mut next = vec![0.0f32; t_len * cfg.dim];
        for t in 0..t_len {
            let row = &h[t * d_in..(t + 1) * d_in];
            for o in 0..cfg.dim {
                let wr = &wm[o * d_in..(o + 1) * d_in];
                let s: f32 = row.iter().zip(wr).map(|(a, c)| a * c).sum();
                next[t * cfg.dim + o] = (s + b[o]).tanh();
            }
        }
        if cfg.layer_ids.contains(&(li as u32 + 1)) {
            outputs[li] = Some(next.clone());
        }
        h = next;
    }
    for &id in &cfg.layer_ids {
        layers.push(outputs[id as usize - 1].take().expect("requested layer computed"));
    }
    ContentFeatures::new(cfg.layer_ids.clone(), vec![cfg.dim; cfg.layer_ids.len()], layers, t_len, *spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(len: usize, f: f32, sr: u32) -> Waveform {
        Waveform::new((0..len).map(|i| 0.5 * (std::f32::consts::TAU * f * i as f32 / sr as f32).sin()).collect(), sr).unwrap()
    }

    #[test]
    fn one_second_gives_fifty_frames_per_layer() {
        let spec = FrameSpec::new(320, 1024, 16000).unwrap();
        let ex = ContentExtractor::PseudoSsl(PseudoSslConfig::default());
        let f = extract_content_features(&sine(16000, 220.0, 16000), &spec, &ex).unwrap();
        assert_eq!(f.n_frames, 50);
        assert_eq!(f.layer_ids, vec![5, 8, 9, 12]);
        assert_eq!(f.layers.len(), 4);
    }

    #[test]
    fn deterministic() {
        let spec = FrameSpec::new(320, 1024, 16000).unwrap();
        let ex = ContentExtractor::PseudoSsl(PseudoSslConfig::default());
        let w = sine(9000, 330.0, 16000);
        assert_eq!(
            extract_content_features(&w, &spec, &ex).unwrap(),
            extract_content_features(&w, &spec, &ex).unwrap()
        );
    }

    #[test]
    fn reference_rate_frames_follow_hop() {
        let spec = FrameSpec::new(882, 2048, 44100).unwrap();
        let ex = ContentExtractor::PseudoSsl(PseudoSslConfig::default());
        for len in [44100usize, 50_001, 8821] {
            let f = extract_content_features(&sine(len, 220.0, 44100), &spec, &ex).unwrap();
            assert_eq!(f.n_frames, len.div_ceil(882));
        }
    }

    #[test]
    fn features_differ_across_content() {
        let spec = FrameSpec::new(320, 1024, 16000).unwrap();
        let ex = ContentExtractor::PseudoSsl(PseudoSslConfig::default());
        let a = extract_content_features(&sine(8000, 220.0, 16000), &spec, &ex).unwrap();
        let b = extract_content_features(&sine(8000, 880.0, 16000), &spec, &ex).unwrap();
        let diff: f32 = a.layers[0].iter().zip(&b.layers[0]).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1.0);
    }

    #[test]
    fn bad_layer_ids_rejected() {
        let cfg = PseudoSslConfig {
            layer_ids: vec![3, 3],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = PseudoSslConfig {
            layer_ids: vec![13],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
