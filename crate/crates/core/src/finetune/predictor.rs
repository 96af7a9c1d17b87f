//! Strided convolutional predictor of tokens, log-F0 and timbre from audio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{self, Ctx};
use crate::numerics::ops::conv1d_out_len;
use crate::numerics::{Graph, ParameterStore, Var};
use crate::representation::timbre::EMBED_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub kernels: Vec<usize>,
    /// Product must equal the representation hop.
    pub strides: Vec<usize>,
    pub paddings: Vec<usize>,
    pub channels: usize,
    pub leaky_slope: f32,
    pub weight_norm: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kernels: vec![10, 4, 4, 3, 3, 2, 2],
            strides: vec![5, 4, 4, 2, 2, 1, 1],
            paddings: vec![4, 1, 1, 1, 1, 1, 1],
            channels: 32,
            leaky_slope: 0.1,
            weight_norm: true,
        }
    }
}

impl PredictorConfig {
    /// Layout for an 882-sample hop at 44.1 kHz.
    pub fn hop_882() -> Self {
        Self {
            kernels: vec![10, 3, 3, 3, 3, 2, 2],
            strides: vec![7, 7, 3, 3, 2, 1, 1],
            channels: 512,
            ..Self::default()
        }
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self, hop: usize) -> Result<()> {
        let n = self.kernels.len();
        if n == 0 || self.strides.len() != n || self.paddings.len() != n {
            return Err(Error::Config("predictor kernels, strides and paddings must have equal non-zero length".into()));
        }
        if self.kernels.contains(&0) || self.strides.contains(&0) || self.channels == 0 {
            return Err(Error::Config("predictor sizes must be positive".into()));
        }
        if self.total_stride() != hop {
            return Err(Error::Config(format!("predictor total stride {} differs from hop {hop}", self.total_stride())));
        }
        Ok(())
    }

    /// Frames produced by the convolution stack for `len` samples.
    pub fn stack_frames(&self, len: usize) -> Option<usize> {
        let mut l = len;
        for ((&k, &s), &p) in self.kernels.iter().zip(&self.strides).zip(&self.paddings) {
            l = conv1d_out_len(l, k, s, p, 1)?;
        }
        Some(l)
    }
}

/// Predictor bound to a codebook layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub cfg: PredictorConfig,
    pub vocab: Vec<usize>,
}

/// Per-frame heads before alignment: `log_f0 [T']`, logits
/// `[T', K_l + 1]` per layer, timbre `[1, 192]`.
pub struct PredictorOutput {
    pub log_f0: Var,
    pub token_logits: Vec<Var>,
    pub timbre: Var,
}

impl Predictor {
    pub fn new(cfg: PredictorConfig, vocab: Vec<usize>, hop: usize) -> Result<Self> {
        cfg.validate(hop)?;
        if vocab.is_empty() || vocab.contains(&0) {
            return Err(Error::Config("predictor needs positive vocabulary sizes".into()));
        }
        Ok(Self { cfg, vocab })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        let mut cin = 1;
        for (i, &k) in c.kernels.iter().enumerate() {
            nn::add_conv1d(&mut s, &mut rng, &format!("pred.conv{i}"), cin, c.channels, k, c.weight_norm, None)?;
            cin = c.channels;
        }
        nn::add_linear(&mut s, &mut rng, "pred.f0", c.channels, 1, true)?;
        s.get_mut("pred.f0.b").expect("registered").data_mut()[0] = 200f32.ln();
        for (l, &k) in self.vocab.iter().enumerate() {
            nn::add_linear(&mut s, &mut rng, &format!("pred.tok{l}"), c.channels, k + 1, true)?;
        }
        nn::add_linear(&mut s, &mut rng, "pred.timbre", c.channels, EMBED_DIM, true)?;
        Ok(s)
    }

    /// Runs the stack on `x [1, 1, L]`.
    pub fn forward(&self, g: &mut Graph, ctx: Ctx, x: Var) -> Result<PredictorOutput> {
        let len = g.value(x).len();
        if self.cfg.stack_frames(len).is_none_or(|t| t == 0) {
            return Err(Error::TooShort(format!("{len} samples below the predictor's receptive field")));
        }
        let mut h = x;
        for (i, ((_, &s), &p)) in self.cfg.kernels.iter().zip(&self.cfg.strides).zip(&self.cfg.paddings).enumerate() {
            h = nn::conv1d(g, ctx, &format!("pred.conv{i}"), h, s, p, 1)?;
            h = g.leaky_relu(h, self.cfg.leaky_slope)?;
        }
        let rows = nn::seq_to_rows(g, h)?;
        let t = g.shape(rows)[0];
        let f0 = nn::linear(g, ctx, "pred.f0", rows)?;
        let log_f0 = g.reshape(f0, &[t])?;
        let token_logits = (0..self.vocab.len())
            .map(|l| nn::linear(g, ctx, &format!("pred.tok{l}"), rows))
            .collect::<Result<_>>()?;
        let pooled = g.mean_rows(rows)?;
        let timbre = nn::linear(g, ctx, "pred.timbre", pooled)?;
        Ok(PredictorOutput { log_f0, token_logits, timbre })
    }
}

/// Source frame for each of `target` frames given `available` predictor
/// frames: trailing extra frames are dropped, a single missing frame
/// repeats the last one.
pub fn frame_alignment(available: usize, target: usize) -> Result<Vec<usize>> {
    if available == 0 || available + 1 < target {
        return Err(Error::Shape(format!("predictor gives {available} frames for {target} targets")));
    }
    Ok((0..target).map(|t| t.min(available - 1)).collect())
}
