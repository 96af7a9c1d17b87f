//! Alternating critic/generator updates on random fixed-length crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::numerics::nn::Ctx;
use crate::numerics::{adamw_step, Graph, OptimizerConfig, OptimizerState, ParameterStore, Var};
use crate::representation::{FrameRepresentation, TimbreEmbedding};
use crate::stage2::discriminator::{Discriminator, DiscriminatorConfig, MultiDiscriminator};
use crate::stage2::loss::{discriminator_loss, generator_loss, GanLossWeights, GanObjective, MelLoss};
use crate::stage2::{Generator, GeneratorConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: GanLossWeights,
    pub objective: GanObjective,
    /// `(fft_size, n_mels)` per mel-loss resolution.
    pub mel_scales: Vec<(usize, usize)>,
    /// Crop length in frames; samples = frames x hop.
    pub crop_frames: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub g_optimizer: OptimizerConfig,
    pub d_optimizer: OptimizerConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            weights: GanLossWeights::default(),
            objective: GanObjective::LeastSquares,
            mel_scales: vec![(256, 20), (512, 40), (1024, 80)],
            crop_frames: 8,
            batch_size: 1,
            steps: 2000,
            checkpoint_every: 500,
            g_optimizer: toy_optimizer(),
            d_optimizer: toy_optimizer(),
        }
    }
}

/// Short-run schedule: the vocoder optimizer with a 100-step warmup to
/// 1e-3, halved every 500 steps.
fn toy_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        lr: 1e-3,
        warmup_steps: 100,
        decay_gamma: 0.5,
        decay_every: 500,
        ..OptimizerConfig::stage2()
    }
}

impl Stage2Config {
    /// 882-sample hop with the full-length optimizer schedule.
    pub fn reference() -> Self {
        Self {
            generator: GeneratorConfig::hop_882(),
            g_optimizer: OptimizerConfig::stage2(),
            d_optimizer: OptimizerConfig::stage2(),
            steps: 350_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.weights.validate()?;
        self.g_optimizer.validate()?;
        self.d_optimizer.validate()?;
        if self.crop_frames == 0 || self.batch_size == 0 {
            return Err(Error::Config("stage2 crop_frames and batch_size must be positive".into()));
        }
        if self.mel_scales.iter().any(|&(f, m)| !f.is_power_of_two() || m == 0) {
            return Err(Error::Config("mel scales need power-of-two FFT sizes and positive mel counts".into()));
        }
        let crop = self.crop_frames * self.generator.hop();
        let need = self.mel_scales.iter().map(|s| s.0 / 2 + 1).chain(self.discriminator.fft_sizes.iter().map(|f| f / 2 + 1)).max().unwrap_or(0);
        if crop < need {
            return Err(Error::Config(format!("crop of {crop} samples shorter than the largest analysis window ({need})")));
        }
        Ok(())
    }
}

/// One training clip: its representation, audio and own timbre embedding.
#[derive(Clone, Debug)]
pub struct Stage2Example {
    pub id: String,
    pub z: FrameRepresentation,
    pub waveform: Waveform,
    pub embedding: TimbreEmbedding,
}

/// Frame-aligned excerpt of a [`Stage2Example`].
#[derive(Clone, Debug)]
pub struct Crop {
    pub id: String,
    pub z: FrameRepresentation,
    pub audio: Vec<f32>,
    pub embedding: TimbreEmbedding,
}

/// Picks a random run of `frames` whole frames; `None` if the clip is
/// shorter than that.
pub fn random_crop(ex: &Stage2Example, frames: usize, rng: &mut impl Rng) -> Option<Crop> {
    let hop = ex.z.f0.frame_spec.hop_samples;
    let usable = ex.z.n_frames().min(ex.waveform.len() / hop);
    if usable < frames {
        return None;
    }
    let start = rng.random_range(0..=usable - frames);
    Some(Crop {
        id: ex.id.clone(),
        z: ex.z.crop(start, start + frames).ok()?,
        audio: ex.waveform.samples()[start * hop..(start + frames) * hop].to_vec(),
        embedding: ex.embedding.clone(),
    })
}

/// Per-step generator for sampling, derived from `(seed, step)` only.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stage2Losses {
    pub step: u64,
    pub adv_g: f32,
    pub adv_d: f32,
    pub fm: f32,
    pub mel: f32,
    pub gen_total: f32,
}

/// Extra generator objective built inside the generator graph.
pub type ExtraLoss<'a> = dyn FnMut(&mut Graph, Ctx) -> Result<Option<Var>> + 'a;

pub struct Stage2Trainer {
    pub cfg: Stage2Config,
    pub gen: Generator,
    pub disc: MultiDiscriminator,
    pub mel: MelLoss,
    pub g_store: ParameterStore,
    pub d_store: ParameterStore,
    pub g_opt: OptimizerState,
    pub d_opt: OptimizerState,
    pub seed: u64,
    pub step: u64,
}

const DISC_PREFIX: &str = "disc";

impl Stage2Trainer {
    pub fn new(cfg: Stage2Config, layer_ids: Vec<u32>, vocab: Vec<usize>, sample_rate: u32, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let gen = Generator::new(cfg.generator.clone(), layer_ids, vocab, sample_rate)?;
        let disc = MultiDiscriminator::new(cfg.discriminator.clone())?;
        let mel = MelLoss::new(sample_rate, &cfg.mel_scales)?;
        let g_store = gen.init_params(seed)?;
        let d_store = disc.init_params(seed.wrapping_add(1))?;
        Ok(Self {
            g_opt: OptimizerState::new(cfg.g_optimizer.clone()),
            d_opt: OptimizerState::new(cfg.d_optimizer.clone()),
            cfg,
            gen,
            disc,
            mel,
            g_store,
            d_store,
            seed,
            step: 0,
        })
    }

    /// Generator parameters plus both optimizer states and the critic,
    /// nested under a reserved prefix.
    pub fn checkpoint(&self) -> ParameterStore {
        let mut s = self.g_store.clone();
        self.g_opt.export_into(&mut s);
        let mut d = self.d_store.clone();
        self.d_opt.export_into(&mut d);
        s.embed_prefixed(DISC_PREFIX, &d);
        s.set_meta("stage2.step", &[(self.step >> 24) as f32, (self.step & 0xFF_FFFF) as f32]);
        s
    }

    pub fn resume(cfg: Stage2Config, ckpt: &ParameterStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let gen = Generator::from_store(cfg.generator.clone(), ckpt)?;
        let disc = MultiDiscriminator::new(cfg.discriminator.clone())?;
        let mel = MelLoss::new(gen.sample_rate, &cfg.mel_scales)?;
        let mut g_store = gen.init_params(0)?;
        g_store.load_values_from(ckpt)?;
        let d_saved = ckpt.extract_prefixed(DISC_PREFIX);
        let mut d_store = disc.init_params(0)?;
        if d_saved.is_empty() {
            log::warn!("checkpoint has no critic state; starting the critic from scratch");
            d_store = disc.init_params(seed.wrapping_add(1))?;
        } else {
            d_store.load_values_from(&d_saved)?;
        }
        let step = ckpt
            .meta("stage2.step")
            .map(|v| ((v[0] as u64) << 24) | v[1] as u64)
            .unwrap_or(0);
        Ok(Self {
            g_opt: OptimizerState::import_from(cfg.g_optimizer.clone(), &g_store),
            d_opt: OptimizerState::import_from(cfg.d_optimizer.clone(), &d_store),
            cfg,
            gen,
            disc,
            mel,
            g_store,
            d_store,
            seed,
            step,
        })
    }

    /// Draws a batch for the current step: example indices, then crops,
    /// all from the step's generator.
    pub fn sample_crops(&self, data: &[Stage2Example]) -> Result<Vec<Crop>> {
        if data.is_empty() {
            return Err(Error::Data("no stage-2 training examples".into()));
        }
        let mut rng = step_rng(self.seed, self.step);
        let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        Ok(self.crops_for(idx.iter().map(|&i| &data[i]), &mut rng))
    }

    pub fn crops_for<'a>(&self, batch: impl Iterator<Item = &'a Stage2Example>, rng: &mut impl Rng) -> Vec<Crop> {
        batch
            .filter_map(|ex| {
                let c = random_crop(ex, self.cfg.crop_frames, rng);
                if c.is_none() {
                    log::info!("skipping {}: shorter than {} frames", ex.id, self.cfg.crop_frames);
                }
                c
            })
            .collect()
    }

    /// One step over the given examples.
    pub fn step(&mut self, batch: &[&Stage2Example]) -> Result<Stage2Losses> {
        let mut rng = step_rng(self.seed, self.step);
        let crops = self.crops_for(batch.iter().copied(), &mut rng);
        if crops.is_empty() {
            return Err(Error::Data("every example in the batch is shorter than the crop".into()));
        }
        self.gan_step(&crops, None)
    }

    /// Sampled step over a data set.
    pub fn train_step(&mut self, data: &[Stage2Example]) -> Result<Stage2Losses> {
        let crops = self.sample_crops(data)?;
        if crops.is_empty() {
            return Err(Error::Data("every sampled example is shorter than the crop".into()));
        }
        self.gan_step(&crops, None)
    }

    /// Critic update on `paired` crops, then one generator update with the
    /// full adversarial objective on them plus `extra` (if any).
    pub fn gan_step(&mut self, paired: &[Crop], mut extra: Option<&mut ExtraLoss>) -> Result<Stage2Losses> {
        let mut g = Graph::new();
        let gctx = Ctx::trainable(&self.g_store);
        let mut fakes = Vec::with_capacity(paired.len());
        for c in paired {
            fakes.push(self.gen.forward(&mut g, gctx, &c.z, &c.embedding)?);
        }
        let mut out = Stage2Losses {
            step: self.step,
            ..Stage2Losses::default()
        };
        let n = paired.len().max(1) as f32;

        if !paired.is_empty() {
            let mut gd = Graph::new();
            let dctx = Ctx::trainable(&self.d_store);
            let mut parts = Vec::with_capacity(paired.len());
            for (c, &f) in paired.iter().zip(&fakes) {
                let len = c.audio.len();
                let real = gd.constant(&[1, 1, len], c.audio.clone())?;
                let fake = gd.constant(&[1, 1, len], g.value(f).to_vec())?;
                let r_out = self.disc.forward(&mut gd, dctx, real)?;
                let f_out = self.disc.forward(&mut gd, dctx, fake)?;
                parts.push(discriminator_loss(&mut gd, &r_out, &f_out, self.cfg.objective)?);
            }
            let total = gd.sum_scalars(&parts)?;
            let total = gd.scale(total, 1.0 / n)?;
            out.adv_d = gd.scalar(total);
            gd.backward(total)?;
            gd.accumulate_grads(&mut self.d_store);
            adamw_step(&mut self.d_store, &mut self.d_opt)?;
        }

        let mut terms = Vec::new();
        for (c, &f) in paired.iter().zip(&fakes) {
            let len = c.audio.len();
            let real = g.constant(&[1, 1, len], c.audio.clone())?;
            let l = generator_loss(&mut g, &self.disc, &self.d_store, &self.mel, real, f, self.cfg.weights, self.cfg.objective)?;
            out.adv_g += g.scalar(l.adv) / n;
            out.fm += g.scalar(l.fm) / n;
            out.mel += g.scalar(l.mel) / n;
            terms.push(g.scale(l.total, 1.0 / n)?);
        }
        if let Some(f) = extra.as_mut() {
            if let Some(v) = f(&mut g, gctx)? {
                terms.push(v);
            }
        }
        if terms.is_empty() {
            return Err(Error::Data("step has neither paired nor auxiliary terms".into()));
        }
        let total = g.sum_scalars(&terms)?;
        out.gen_total = g.scalar(total);
        g.backward(total)?;
        g.accumulate_grads(&mut self.g_store);
        adamw_step(&mut self.g_store, &mut self.g_opt)?;
        self.step += 1;
        Ok(out)
    }
}
