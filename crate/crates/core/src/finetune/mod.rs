//! Domain finetuning with unpaired timbre conditioning.
//!
//! Each step draws a batch with non-human clips oversampled against human
//! ones, re-pairs contents with the batch's timbre embeddings, and trains:
//! the predictor on real clips; the critic and generator adversarially on
//! self-paired items; the generator through the frozen predictor on
//! unpaired generations.

pub mod predictor;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::Ctx;
use crate::numerics::{adamw_step, Graph, OptimizerConfig, OptimizerKind, OptimizerState, ParameterStore, Var};
use crate::pitch::log_f0;
use crate::representation::{FrameRepresentation, TimbreEmbedding};
use crate::stage2::train::{step_rng, Crop, Stage2Example, Stage2Losses, Stage2Trainer};

pub use predictor::{frame_alignment, Predictor, PredictorConfig, PredictorOutput};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    /// Uniform random permutation; self-pairs occur by chance.
    #[default]
    Uniform,
    /// Random permutation without fixed points.
    Derangement,
    /// Every item keeps its own embedding.
    SelfPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub predictor: PredictorConfig,
    /// Target count ratio of non-human to human items.
    pub oversample_ratio: f64,
    pub pairing: PairingMode,
    pub batch_size: usize,
    /// Crop length in frames for every item.
    pub crop_frames: usize,
    pub steps: u64,
    pub lambda_token: f32,
    pub lambda_f0: f32,
    pub lambda_timbre: f32,
    /// Scale of the whole auxiliary group on unpaired generations.
    pub unpaired_weight: f32,
    pub predictor_optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorConfig::default(),
            oversample_ratio: 0.9,
            pairing: PairingMode::Uniform,
            batch_size: 4,
            crop_frames: 8,
            steps: 500,
            lambda_token: 1.0,
            lambda_f0: 1.0,
            lambda_timbre: 1.0,
            unpaired_weight: 1.0,
            predictor_optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-3,
                warmup_steps: 0,
                decay_gamma: 1.0,
                weight_decay: 0.0,
                ..OptimizerConfig::stage2()
            },
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, hop: usize) -> Result<()> {
        self.predictor.validate(hop)?;
        if !(self.oversample_ratio > 0.0 && self.oversample_ratio.is_finite()) {
            return Err(Error::Config(format!("oversample_ratio {} must be positive", self.oversample_ratio)));
        }
        if [self.lambda_token, self.lambda_f0, self.lambda_timbre, self.unpaired_weight].iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("finetune loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 || self.crop_frames == 0 {
            return Err(Error::Config("finetune batch_size and crop_frames must be positive".into()));
        }
        self.predictor_optimizer.validate()
    }
}

/// Target index for every batch item.
pub fn unpaired_batch(n: usize, mode: PairingMode, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        if n == 1 && mode != PairingMode::SelfPair {
            log::debug!("batch of one: keeping its own timbre");
        }
        return idx;
    }
    match mode {
        PairingMode::SelfPair => {}
        PairingMode::Uniform => idx.shuffle(rng),
        PairingMode::Derangement => loop {
            idx.shuffle(rng);
            if idx.iter().enumerate().all(|(i, &j)| i != j) {
                break;
            }
        },
    }
    idx
}

/// Deterministic interleaving that keeps the non-human/human count ratio
/// as close as possible to the target.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OversampleCounter {
    pub human: u64,
    pub non_human: u64,
}

impl OversampleCounter {
    pub fn next_is_non_human(&mut self, ratio: f64, have_human: bool) -> bool {
        let pick = !have_human || (self.non_human as f64) <= ratio * self.human as f64;
        if pick {
            self.non_human += 1;
        } else {
            self.human += 1;
        }
        pick
    }

    pub fn measured_ratio(&self) -> f64 {
        self.non_human as f64 / self.human.max(1) as f64
    }
}

/// Scalar auxiliary terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct AuxLosses {
    pub token: f32,
    pub f0: f32,
    pub timbre: f32,
}

pub struct AuxVars {
    pub token: Var,
    pub f0: Var,
    pub timbre: Var,
}

/// Token CE (summed over layers, averaged over frames; the padding class
/// is removed from the softmax), voiced-masked log-F0 MSE, and
/// `1 - cos(e_target, e_pred)`.
pub fn auxiliary_losses(g: &mut Graph, out: &PredictorOutput, z: &FrameRepresentation, e_target: &TimbreEmbedding) -> Result<AuxVars> {
    let t = z.n_frames();
    let available = g.shape(out.log_f0)[0];
    let align = frame_alignment(available, t)?;
    if out.token_logits.len() != z.tokens.n_layers() {
        return Err(Error::Shape(format!("{} token heads for {} layers", out.token_logits.len(), z.tokens.n_layers())));
    }
    let mut per_layer = Vec::with_capacity(out.token_logits.len());
    for (l, &logits) in out.token_logits.iter().enumerate() {
        let k = z.tokens.vocab[l];
        let rows = g.gather_rows(logits, &align)?;
        let real = g.slice_cols(rows, 0, k)?;
        let target: Vec<usize> = z.tokens.tokens[l].iter().map(|&c| c as usize).collect();
        per_layer.push(g.cross_entropy(real, &target, None)?);
    }
    let token = g.sum_scalars(&per_layer)?;

    let col = g.reshape(out.log_f0, &[available, 1])?;
    let col = g.gather_rows(col, &align)?;
    let pred = g.reshape(col, &[t])?;
    let target = g.constant(&[t], log_f0(&z.f0))?;
    let mask: Vec<f32> = z.f0.voiced.iter().map(|&v| v as u8 as f32).collect();
    let f0 = g.mse_loss(pred, target, Some(&mask))?;

    let e = g.constant(&[1, e_target.dim()], e_target.vector.clone())?;
    if g.value(out.timbre).len() != e_target.dim() {
        return Err(Error::Shape(format!("timbre head has {} dims, target {}", g.value(out.timbre).len(), e_target.dim())));
    }
    let cos = g.cosine_similarity(out.timbre, e)?;
    let one = g.constant(&[1], vec![1.0])?;
    let neg = g.scale(cos, -1.0)?;
    let timbre = g.add(one, neg)?;
    Ok(AuxVars { token, f0, timbre })
}

/// Scalar values of one set of auxiliary terms.
pub fn aux_values(g: &Graph, v: &AuxVars) -> AuxLosses {
    AuxLosses {
        token: g.scalar(v.token),
        f0: g.scalar(v.f0),
        timbre: g.scalar(v.timbre),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FinetuneLosses {
    pub gan: Stage2Losses,
    /// Auxiliary terms on unpaired generations (mean over items).
    pub unpaired: AuxLosses,
    /// Predictor's own terms on real clips.
    pub predictor: AuxLosses,
    pub n_paired: usize,
    pub n_unpaired: usize,
    pub non_human_items: usize,
    /// Ids of the items drawn this step, in batch order.
    pub batch_ids: Vec<String>,
}

pub struct FinetuneTrainer {
    pub cfg: FinetuneConfig,
    pub stage2: Stage2Trainer,
    pub predictor: Predictor,
    pub p_store: ParameterStore,
    pub p_opt: OptimizerState,
    pub counter: OversampleCounter,
}

const SELECT_SALT: u64 = 0x5EED_F1E7_0000_0001;
const PAIR_SALT: u64 = 0x5EED_F1E7_0000_0002;
const PRED_PREFIX: &str = "pred";

impl FinetuneTrainer {
    /// Wraps a (pretrained) stage-2 trainer; the predictor starts fresh.
    pub fn new(cfg: FinetuneConfig, mut stage2: Stage2Trainer) -> Result<Self> {
        let hop = stage2.gen.hop();
        cfg.validate(hop)?;
        stage2.cfg.crop_frames = cfg.crop_frames;
        stage2.cfg.validate()?;
        let predictor = Predictor::new(cfg.predictor.clone(), stage2.gen.vocab.clone(), hop)?;
        let p_store = predictor.init_params(stage2.seed.wrapping_add(2))?;
        Ok(Self {
            p_opt: OptimizerState::new(cfg.predictor_optimizer.clone()),
            cfg,
            stage2,
            predictor,
            p_store,
            counter: OversampleCounter::default(),
        })
    }

    /// Stage-2 checkpoint with the predictor and sampling counters nested.
    pub fn checkpoint(&self) -> ParameterStore {
        let mut s = self.stage2.checkpoint();
        let mut p = self.p_store.clone();
        self.p_opt.export_into(&mut p);
        s.embed_prefixed(PRED_PREFIX, &p);
        s.set_meta("finetune.counter", &[self.counter.human as f32, self.counter.non_human as f32]);
        s
    }

    pub fn resume(cfg: FinetuneConfig, stage2: Stage2Trainer, ckpt: &ParameterStore) -> Result<Self> {
        let mut t = Self::new(cfg, stage2)?;
        let saved = ckpt.extract_prefixed(PRED_PREFIX);
        if !saved.is_empty() {
            t.p_store.load_values_from(&saved)?;
            t.p_opt = OptimizerState::import_from(t.cfg.predictor_optimizer.clone(), &t.p_store);
        }
        if let Some(c) = ckpt.meta("finetune.counter") {
            t.counter = OversampleCounter { human: c[0] as u64, non_human: c[1] as u64 };
        }
        Ok(t)
    }

    /// Items for the current step: `(example, is_non_human)`.
    fn select<'a>(&mut self, human: &'a [Stage2Example], non_human: &'a [Stage2Example]) -> Vec<(&'a Stage2Example, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(step_rng(self.stage2.seed ^ SELECT_SALT, self.stage2.step).random());
        (0..self.cfg.batch_size)
            .map(|_| {
                if self.counter.next_is_non_human(self.cfg.oversample_ratio, !human.is_empty()) {
                    (&non_human[rng.random_range(0..non_human.len())], true)
                } else {
                    (&human[rng.random_range(0..human.len())], false)
                }
            })
            .collect()
    }

    pub fn step(&mut self, human: &[Stage2Example], non_human: &[Stage2Example]) -> Result<FinetuneLosses> {
        if non_human.is_empty() {
            return Err(Error::Config("finetuning needs non-human examples".into()));
        }
        let picked = self.select(human, non_human);
        let batch_ids = picked.iter().map(|(e, _)| e.id.clone()).collect();
        let non_human_items = picked.iter().filter(|p| p.1).count();
        let mut rng = step_rng(self.stage2.seed, self.stage2.step);
        let crops = self.stage2.crops_for(picked.iter().map(|p| p.0), &mut rng);
        if crops.is_empty() {
            return Err(Error::Data("every selected example is shorter than the crop".into()));
        }
        let mut prng = step_rng(self.stage2.seed ^ PAIR_SALT, self.stage2.step);
        let targets = unpaired_batch(crops.len(), self.cfg.pairing, &mut prng);
        let (paired, unpaired): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
            targets.iter().copied().enumerate().partition(|(i, j)| i == j);
        let paired: Vec<Crop> = paired.iter().map(|&(i, _)| crops[i].clone()).collect();

        let predictor_losses = self.train_predictor(&crops)?;

        let mut unpaired_vals = AuxLosses::default();
        let n_unpaired = unpaired.len();
        let gan = {
            let cfg = &self.cfg;
            let predictor = &self.predictor;
            let p_store = &self.p_store;
            let gen = self.stage2.gen.clone();
            let vals = &mut unpaired_vals;
            let mut extra = |g: &mut Graph, gctx: Ctx| -> Result<Option<Var>> {
                if unpaired.is_empty() || cfg.unpaired_weight == 0.0 {
                    return Ok(None);
                }
                let pctx = Ctx::frozen(p_store);
                let scale = cfg.unpaired_weight / unpaired.len() as f32;
                let mut terms = Vec::new();
                for &(i, j) in &unpaired {
                    let e = &crops[j].embedding;
                    let y = gen.forward(g, gctx, &crops[i].z, e)?;
                    let out = predictor.forward(g, pctx, y)?;
                    let a = auxiliary_losses(g, &out, &crops[i].z, e)?;
                    let v = aux_values(g, &a);
                    vals.token += v.token / unpaired.len() as f32;
                    vals.f0 += v.f0 / unpaired.len() as f32;
                    vals.timbre += v.timbre / unpaired.len() as f32;
                    terms.push(g.scale(a.token, cfg.lambda_token * scale)?);
                    terms.push(g.scale(a.f0, cfg.lambda_f0 * scale)?);
                    terms.push(g.scale(a.timbre, cfg.lambda_timbre * scale)?);
                }
                Ok(Some(g.sum_scalars(&terms)?))
            };
            self.stage2.gan_step(&paired, Some(&mut extra))?
        };
        Ok(FinetuneLosses {
            gan,
            unpaired: unpaired_vals,
            predictor: predictor_losses,
            n_paired: paired.len(),
            n_unpaired,
            non_human_items,
            batch_ids,
        })
    }

    /// Fits the predictor to real crops (own representation and timbre).
    fn train_predictor(&mut self, crops: &[Crop]) -> Result<AuxLosses> {
        let mut g = Graph::new();
        let ctx = Ctx::trainable(&self.p_store);
        let n = crops.len() as f32;
        let mut terms = Vec::new();
        let mut acc = AuxLosses::default();
        for c in crops {
            let x = g.constant(&[1, 1, c.audio.len()], c.audio.clone())?;
            let out = self.predictor.forward(&mut g, ctx, x)?;
            let a = auxiliary_losses(&mut g, &out, &c.z, &c.embedding)?;
            let v = aux_values(&g, &a);
            acc.token += v.token / n;
            acc.f0 += v.f0 / n;
            acc.timbre += v.timbre / n;
            terms.push(g.scale(a.token, self.cfg.lambda_token / n)?);
            terms.push(g.scale(a.f0, self.cfg.lambda_f0 / n)?);
            terms.push(g.scale(a.timbre, self.cfg.lambda_timbre / n)?);
        }
        let total = g.sum_scalars(&terms)?;
        g.backward(total)?;
        g.accumulate_grads(&mut self.p_store);
        adamw_step(&mut self.p_store, &mut self.p_opt)?;
        Ok(acc)
    }
}
