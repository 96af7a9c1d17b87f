//! The frame-level representation `Z = (C, F)`: content features, k-means
//! codebooks and tokens, F0, and timbre embeddings.

pub mod features;
pub mod formats;
pub mod kmeans;
pub mod timbre;

use serde::{Deserialize, Serialize};

use crate::dsp::stft::FrameSpec;
use crate::dsp::wav::Waveform;
use crate::error::{Error, Result};
use crate::pitch::{align_f0, estimate_f0, is_valid_f0, F0Contour, PitchConfig};

pub use features::{extract_content_features, ContentExtractor, ContentFeatures, PseudoSslConfig};
pub use formats::{read_codebook, read_embedding, read_representation, write_codebook, write_embedding, write_representation};
pub use kmeans::{fit_kmeans, quantize, Codebook, CodebookLayer};
pub use timbre::{cosine, embed_timbre, TimbreEmbedder, TimbreEmbedding, EMBED_DIM};

/// Per-layer token sequences. Index `K_l` is reserved for padding and never
/// produced by quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentTokens {
    pub layer_ids: Vec<u32>,
    pub vocab: Vec<usize>,
    pub tokens: Vec<Vec<u32>>,
}

impl ContentTokens {
    pub fn new(layer_ids: Vec<u32>, vocab: Vec<usize>, tokens: Vec<Vec<u32>>) -> Result<Self> {
        if layer_ids.len() != vocab.len() || vocab.len() != tokens.len() || tokens.is_empty() {
            return Err(Error::Shape("token layer lists disagree in length".into()));
        }
        let t = tokens[0].len();
        for (li, seq) in tokens.iter().enumerate() {
            if seq.len() != t {
                return Err(Error::Shape(format!("token layer {} has {} frames, expected {t}", layer_ids[li], seq.len())));
            }
            if let Some(bad) = seq.iter().find(|&&c| c as usize >= vocab[li]) {
                return Err(Error::Vocab(format!("token {bad} in layer {} with K = {}", layer_ids[li], vocab[li])));
            }
        }
        Ok(Self { layer_ids, vocab, tokens })
    }

    pub fn n_frames(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn n_layers(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRepresentation {
    pub tokens: ContentTokens,
    pub f0: F0Contour,
}

impl FrameRepresentation {
    pub fn new(tokens: ContentTokens, f0: F0Contour) -> Result<Self> {
        if tokens.n_frames() != f0.len() {
            return Err(Error::Shape(format!("{} token frames vs {} f0 frames", tokens.n_frames(), f0.len())));
        }
        Ok(Self { tokens, f0 })
    }

    pub fn n_frames(&self) -> usize {
        self.f0.len()
    }

    /// Copy restricted to frames `[start, end)`.
    pub fn crop(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_frames() {
            return Err(Error::Shape(format!("crop {start}..{end} of {} frames", self.n_frames())));
        }
        let tokens = ContentTokens::new(
            self.tokens.layer_ids.clone(),
            self.tokens.vocab.clone(),
            self.tokens.tokens.iter().map(|s| s[start..end].to_vec()).collect(),
        )?;
        let f0 = F0Contour::from_hz(self.f0.f0_hz[start..end].to_vec(), self.f0.frame_spec)?;
        Self::new(tokens, f0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepresentationConfig {
    pub pseudo_ssl: PseudoSslConfig,
    /// Codebook size per layer.
    pub k: usize,
    pub kmeans_max_iter: u32,
    /// Frames drawn per clip when pooling vectors for k-means (0 = all).
    pub kmeans_frames_per_clip: usize,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            pseudo_ssl: PseudoSslConfig::default(),
            k: 64,
            kmeans_max_iter: 100,
            kmeans_frames_per_clip: 0,
        }
    }
}

impl RepresentationConfig {
    pub fn validate(&self) -> Result<()> {
        self.pseudo_ssl.validate()?;
        if self.k == 0 {
            return Err(Error::Config("representation.k must be positive".into()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.pseudo_ssl.layer_ids.len()
    }
}

/// Tokens from extraction plus quantization; F0 aligned to the token grid.
pub fn build_representation(
    w: &Waveform,
    spec: &FrameSpec,
    extractor: &ContentExtractor,
    cb: &Codebook,
    pitch_cfg: &PitchConfig,
) -> Result<FrameRepresentation> {
    let features = extract_content_features(w, spec, extractor)?;
    let tokens = quantize(&features, cb)?;
    let f0 = match estimate_f0(w, pitch_cfg) {
        Ok(c) => c,
        Err(Error::TooShort(_)) => return Err(Error::InvalidSegment),
        Err(e) => return Err(e),
    };
    if !is_valid_f0(&f0) {
        return Err(Error::InvalidSegment);
    }
    let mut f0 = align_f0(&f0, tokens.n_frames());
    f0.frame_spec = *spec;
    FrameRepresentation::new(tokens, f0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> FrameSpec {
        FrameSpec::new(320, 1024, 16000).unwrap()
    }

    fn toy_codebook(seed: u64) -> (ContentExtractor, Codebook) {
        let ex = ContentExtractor::PseudoSsl(PseudoSslConfig::default());
        let clips: Vec<ContentFeatures> = [220.0f32, 330.0, 440.0]
            .iter()
            .map(|&f| {
                let w = Waveform::new((0..8000).map(|i| 0.4 * (std::f32::consts::TAU * f * i as f32 / 16000.0).sin()).collect(), 16000).unwrap();
                extract_content_features(&w, &spec(), &ex).unwrap()
            })
            .collect();
        (ex, fit_kmeans(&clips, &[8; 4], 50, seed).unwrap())
    }

    #[test]
    fn sine_gives_voiced_aligned_representation() {
        let (ex, cb) = toy_codebook(1);
        let w = Waveform::new((0..12345).map(|i| 0.4 * (std::f32::consts::TAU * 262.0 * i as f32 / 16000.0).sin()).collect(), 16000).unwrap();
        let z = build_representation(&w, &spec(), &ex, &cb, &PitchConfig::default()).unwrap();
        assert_eq!(z.tokens.n_frames(), z.f0.len());
        assert_eq!(z.n_frames(), 12345usize.div_ceil(320));
        assert!(z.f0.voiced.iter().all(|&v| v));
    }

    #[test]
    fn silence_is_invalid_segment() {
        let (ex, cb) = toy_codebook(1);
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        assert!(matches!(
            build_representation(&w, &spec(), &ex, &cb, &PitchConfig::default()),
            Err(Error::InvalidSegment)
        ));
    }

    #[test]
    fn tokens_reject_padding_index() {
        assert!(matches!(ContentTokens::new(vec![1], vec![4], vec![vec![0, 4]]), Err(Error::Vocab(_))));
    }
}
