//! Timbre-aware vocoder: tokens + F0 + timbre embedding to waveform,
//! trained adversarially against period and sub-band spectral critics.

pub mod discriminator;
pub mod loss;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::numerics::nn::{self, Ctx};
use crate::numerics::{Graph, ParameterStore, Tensor, Var};
use crate::pitch::log_f0;
use crate::representation::timbre::EMBED_DIM;
use crate::representation::{FrameRepresentation, TimbreEmbedding};

pub use discriminator::{BranchOutput, Discriminator, DiscriminatorConfig, MultiDiscriminator};
pub use loss::{gan_losses, GanLossWeights, GanLosses, GanObjective, MelLoss};
pub use train::{random_crop, Crop, Stage2Config, Stage2Example, Stage2Losses, Stage2Trainer};

const LF0_CENTER: f32 = 5.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Width of each per-layer token embedding.
    pub token_dim: usize,
    /// Width of the (log-F0, voiced) projection.
    pub f0_dim: usize,
    /// Product must equal the representation hop.
    pub upsample_factors: Vec<usize>,
    pub resblock_kernels: Vec<usize>,
    pub resblock_dilations: Vec<usize>,
    /// Channels before the first upsampler; halved at every stage.
    pub base_channels: usize,
    pub pre_kernel: usize,
    pub post_kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            token_dim: 32,
            f0_dim: 16,
            upsample_factors: vec![8, 5, 4, 2],
            resblock_kernels: vec![3, 7, 11],
            resblock_dilations: vec![1, 3, 5],
            base_channels: 64,
            pre_kernel: 7,
            post_kernel: 7,
        }
    }
}

impl GeneratorConfig {
    /// Upsampling for a 44.1 kHz, 882-sample hop.
    pub fn hop_882() -> Self {
        Self {
            upsample_factors: vec![7, 7, 6, 3],
            ..Self::default()
        }
    }

    pub fn hop(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    pub fn cond_dim(&self) -> usize {
        self.token_dim + self.f0_dim
    }

    /// Channel count after stage `i` (`i = 0` is before any upsampling).
    pub fn channels(&self, i: usize) -> usize {
        (self.base_channels >> i).max(1)
    }

    /// Transposed-conv kernel and padding for factor `s`; output length is
    /// exactly `s` times the input.
    pub fn upsample_geometry(s: usize) -> (usize, usize) {
        let p = s.div_ceil(2);
        (s + 2 * p, p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.upsample_factors.is_empty() || self.upsample_factors.contains(&0) {
            return Err(Error::Config("generator upsample factors must be positive".into()));
        }
        if self.resblock_kernels.is_empty() || self.resblock_dilations.is_empty() {
            return Err(Error::Config("generator needs residual kernels and dilations".into()));
        }
        let kernels = self.resblock_kernels.iter().chain([&self.pre_kernel, &self.post_kernel]);
        if kernels.into_iter().any(|&k| k % 2 == 0) {
            return Err(Error::Config("generator kernels must be odd".into()));
        }
        if [self.token_dim, self.f0_dim, self.base_channels].contains(&0) || self.resblock_dilations.contains(&0) {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count for the given vocabularies.
    pub fn param_count(&self, vocab: &[usize]) -> usize {
        let d = self.cond_dim();
        let mut n = vocab.iter().sum::<usize>() * self.token_dim + vocab.len();
        n += 3 * self.f0_dim;
        n += (EMBED_DIM + 1) * d;
        let c0 = self.channels(0);
        n += c0 * d * self.pre_kernel + 2 * c0;
        for (i, &s) in self.upsample_factors.iter().enumerate() {
            let (ci, co) = (self.channels(i), self.channels(i + 1));
            let (k, _) = Self::upsample_geometry(s);
            n += ci * co * k + co;
            for &rk in &self.resblock_kernels {
                n += self.resblock_dilations.len() * 2 * (2 * co + co * co * rk + 2 * co);
            }
        }
        let cl = self.channels(self.upsample_factors.len());
        n + 2 * cl + cl * self.post_kernel + 2
    }
}

/// Generator architecture bound to a codebook layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub layer_ids: Vec<u32>,
    pub vocab: Vec<usize>,
    pub sample_rate: u32,
}

fn add_snake(s: &mut ParameterStore, name: &str, c: usize) -> Result<()> {
    s.insert(format!("{name}.log_alpha"), nn::const_tensor(&[c], 0.0))?;
    s.insert(format!("{name}.log_beta"), nn::const_tensor(&[c], 0.0))
}

fn snake(g: &mut Graph, ctx: Ctx, name: &str, x: Var) -> Result<Var> {
    let a = ctx.p(g, &format!("{name}.log_alpha"))?;
    let b = ctx.p(g, &format!("{name}.log_beta"))?;
    g.snake_beta(x, a, b)
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, layer_ids: Vec<u32>, vocab: Vec<usize>, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        if layer_ids.len() != vocab.len() || vocab.is_empty() || vocab.contains(&0) {
            return Err(Error::Config("generator needs one positive vocabulary size per layer".into()));
        }
        Ok(Self { cfg, layer_ids, vocab, sample_rate })
    }

    pub fn from_store(cfg: GeneratorConfig, store: &ParameterStore) -> Result<Self> {
        let missing = || Error::Structure("checkpoint lacks generator metadata".into());
        let ids = store.meta("gen.layer_ids").ok_or_else(missing)?;
        let vocab = store.meta("gen.vocab").ok_or_else(missing)?;
        let sr = store.meta("gen.sample_rate").ok_or_else(missing)?;
        let gen = Self::new(
            cfg,
            ids.iter().map(|&v| v as u32).collect(),
            vocab.iter().map(|&v| v as usize).collect(),
            sr[0] as u32,
        )?;
        store.check_structure(&gen.init_params(0)?)?;
        Ok(gen)
    }

    pub fn hop(&self) -> usize {
        self.cfg.hop()
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count(&self.vocab)
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        for (l, &k) in self.vocab.iter().enumerate() {
            s.insert(format!("gen.tok{l}"), nn::normal_tensor(&mut rng, &[k, c.token_dim], 1.0))?;
        }
        s.insert("gen.layer_w", nn::const_tensor(&[self.vocab.len()], 0.0))?;
        nn::add_linear(&mut s, &mut rng, "gen.f0", 2, c.f0_dim, true)?;
        nn::add_linear(&mut s, &mut rng, "gen.timbre", EMBED_DIM, c.cond_dim(), true)?;
        nn::add_conv1d(&mut s, &mut rng, "gen.pre", c.cond_dim(), c.channels(0), c.pre_kernel, true, None)?;
        for (i, &f) in c.upsample_factors.iter().enumerate() {
            let (ci, co) = (c.channels(i), c.channels(i + 1));
            let (k, _) = GeneratorConfig::upsample_geometry(f);
            nn::add_conv_transpose1d(&mut s, &mut rng, &format!("gen.up{i}"), ci, co, k)?;
            for (j, &rk) in c.resblock_kernels.iter().enumerate() {
                for (m, _) in c.resblock_dilations.iter().enumerate() {
                    let p = format!("gen.res{i}.{j}.{m}");
                    add_snake(&mut s, &format!("{p}.act1"), co)?;
                    nn::add_conv1d(&mut s, &mut rng, &format!("{p}.conv1"), co, co, rk, true, None)?;
                    add_snake(&mut s, &format!("{p}.act2"), co)?;
                    nn::add_conv1d(&mut s, &mut rng, &format!("{p}.conv2"), co, co, rk, true, None)?;
                }
            }
        }
        let cl = c.channels(c.upsample_factors.len());
        add_snake(&mut s, "gen.post_act", cl)?;
        nn::add_conv1d(&mut s, &mut rng, "gen.post", cl, 1, c.post_kernel, true, None)?;
        s.set_meta("gen.layer_ids", &self.layer_ids.iter().map(|&v| v as f32).collect::<Vec<_>>());
        s.set_meta("gen.vocab", &self.vocab.iter().map(|&v| v as f32).collect::<Vec<_>>());
        s.set_meta("gen.sample_rate", &[self.sample_rate as f32]);
        Ok(s)
    }

    /// Frame-level conditioning `[T, token_dim + f0_dim]`: softmax-weighted
    /// token embeddings next to the projected (log-F0, voiced) pair, plus a
    /// projection of the timbre embedding broadcast over time.
    pub fn condition(&self, g: &mut Graph, ctx: Ctx, z: &FrameRepresentation, e: &TimbreEmbedding) -> Result<Var> {
        if e.dim() != EMBED_DIM {
            return Err(Error::Shape(format!("timbre embedding has {} dims, expected {EMBED_DIM}", e.dim())));
        }
        if z.tokens.vocab != self.vocab || z.tokens.layer_ids != self.layer_ids {
            return Err(Error::Shape(format!(
                "representation layers {:?}/{:?} do not match generator {:?}/{:?}",
                z.tokens.layer_ids, z.tokens.vocab, self.layer_ids, self.vocab
            )));
        }
        if z.f0.frame_spec.hop_samples != self.hop() {
            return Err(Error::Shape(format!("representation hop {} but generator upsamples by {}", z.f0.frame_spec.hop_samples, self.hop())));
        }
        let t = z.n_frames();
        let d = self.cfg.token_dim;
        let mut rows = Vec::with_capacity(self.vocab.len());
        for (l, toks) in z.tokens.tokens.iter().enumerate() {
            let table = ctx.p(g, &format!("gen.tok{l}"))?;
            let ids: Vec<usize> = toks.iter().map(|&c| c as usize).collect();
            let emb = g.embedding(table, &ids)?;
            rows.push(g.reshape(emb, &[1, t * d])?);
        }
        let stacked = g.concat(&rows, 0)?;
        let lw = ctx.p(g, "gen.layer_w")?;
        let lw = g.reshape(lw, &[1, self.vocab.len()])?;
        let weights = g.softmax(lw)?;
        let mixed = g.matmul(weights, stacked)?;
        let mixed = g.reshape(mixed, &[t, d])?;

        let lf0 = log_f0(&z.f0);
        let pin: Vec<f32> = lf0
            .iter()
            .zip(&z.f0.voiced)
            .flat_map(|(&l, &v)| {
                let v = v as u8 as f32;
                [(l - LF0_CENTER) * v, v]
            })
            .collect();
        let pin = g.constant(&[t, 2], pin)?;
        let f0e = nn::linear(g, ctx, "gen.f0", pin)?;
        let h = g.concat(&[mixed, f0e], 1)?;
        let ev = g.constant(&[1, EMBED_DIM], e.vector.clone())?;
        let proj = nn::linear(g, ctx, "gen.timbre", ev)?;
        g.add(h, proj)
    }

    /// Waveform graph `[1, 1, T * hop]` with values in (-1, 1).
    pub fn forward(&self, g: &mut Graph, ctx: Ctx, z: &FrameRepresentation, e: &TimbreEmbedding) -> Result<Var> {
        let c = &self.cfg;
        let h = self.condition(g, ctx, z, e)?;
        let x = nn::rows_to_seq(g, h)?;
        let mut x = nn::conv1d_same(g, ctx, "gen.pre", x, c.pre_kernel, 1)?;
        for (i, &f) in c.upsample_factors.iter().enumerate() {
            let x_act = g.leaky_relu(x, 0.1)?;
            let (_, pad) = GeneratorConfig::upsample_geometry(f);
            x = nn::conv_transpose1d(g, ctx, &format!("gen.up{i}"), x_act, f, pad)?;
            let mut branches = Vec::with_capacity(c.resblock_kernels.len());
            for (j, &rk) in c.resblock_kernels.iter().enumerate() {
                let mut r = x;
                for (m, &dil) in c.resblock_dilations.iter().enumerate() {
                    let p = format!("gen.res{i}.{j}.{m}");
                    let y = snake(g, ctx, &format!("{p}.act1"), r)?;
                    let y = nn::conv1d_same(g, ctx, &format!("{p}.conv1"), y, rk, dil)?;
                    let y = snake(g, ctx, &format!("{p}.act2"), y)?;
                    let y = nn::conv1d_same(g, ctx, &format!("{p}.conv2"), y, rk, 1)?;
                    r = g.add(r, y)?;
                }
                branches.push(r);
            }
            let mut acc = branches[0];
            for &b in &branches[1..] {
                acc = g.add(acc, b)?;
            }
            x = g.scale(acc, 1.0 / branches.len() as f32)?;
        }
        let x = snake(g, ctx, "gen.post_act", x)?;
        let x = nn::conv1d_same(g, ctx, "gen.post", x, c.post_kernel, 1)?;
        g.tanh(x)
    }

    /// Inference: deterministic, no gradients.
    pub fn vocode(&self, store: &ParameterStore, z: &FrameRepresentation, e: &TimbreEmbedding) -> Result<Waveform> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, Ctx::frozen(store), z, e)?;
        Waveform::new(g.value(y).to_vec(), self.sample_rate)
    }
}

/// Softmax of the learned layer weights.
pub fn layer_weights(store: &ParameterStore) -> Result<Vec<f32>> {
    let t: &Tensor = store.get("gen.layer_w").ok_or_else(|| Error::Structure("missing gen.layer_w".into()))?;
    let m = t.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = t.data().iter().map(|v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

#[cfg(test)]
pub(crate) mod tests;
