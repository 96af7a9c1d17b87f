//! Score encoder: phoneme/note sequence to frame-level tokens and log-F0.
//!
//! Encoder and decoder are stacks of feed-forward Transformer blocks
//! (self-attention with a learned relative-position bias, then a
//! two-layer convolutional FFN, each followed by residual + layer norm).
//! Durations and pitch come from small convolutional predictor heads.

pub mod score;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::stft::FrameSpec;
use crate::error::{Error, Result};
use crate::numerics::nn::{self, Ctx};
use crate::numerics::{adamw_step, Graph, OptimizerConfig, OptimizerState, ParameterStore, Var};
use crate::pitch::{log_f0, F0Contour};
use crate::representation::{ContentTokens, FrameRepresentation};

pub use score::{Score, ScoreEntry, NOTE_VOCAB, REST_NOTE_INDEX, REST_PHONEME};

/// Log-F0 offset removed before the pitch embedding.
const LF0_CENTER: f32 = 5.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputLoss {
    /// Per-layer cross-entropy against the target tokens.
    #[default]
    CrossEntropy,
    /// L1 between softmax probabilities and one-hot targets.
    L1OneHot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub ffn_kernel: usize,
    /// Relative offsets beyond this share one bias entry.
    pub max_relative_position: usize,
    pub predictor_hidden: usize,
    pub predictor_kernel: usize,
    pub lambda_out: f32,
    pub lambda_dur: f32,
    pub lambda_pitch: f32,
    pub output_loss: OutputLoss,
    /// Phoneme inventory; index = phoneme id. Must contain `SP`.
    pub phoneme_set: Vec<String>,
    /// First-layer tokens treated as silence at inference. `None` derives
    /// the set from training data (tokens mostly on unvoiced frames).
    pub silence_tokens: Option<Vec<u32>>,
    /// Predicted F0 below this is unvoiced.
    pub vuv_min_hz: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        let phonemes = ["SP", "a", "i", "u", "e", "o", "k", "s", "t", "n", "m", "l", "r", "w", "y"];
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            dim: 64,
            heads: 2,
            ffn_mult: 2,
            ffn_kernel: 3,
            max_relative_position: 16,
            predictor_hidden: 64,
            predictor_kernel: 3,
            lambda_out: 1.0,
            lambda_dur: 1.0,
            lambda_pitch: 1.0,
            output_loss: OutputLoss::CrossEntropy,
            phoneme_set: phonemes.iter().map(|s| s.to_string()).collect(),
            silence_tokens: None,
            vuv_min_hz: 40.0,
            epochs: 70,
            batch_size: 1,
            optimizer: OptimizerConfig::stage1(),
        }
    }
}

impl Stage1Config {
    /// Reference-scale dimensions.
    pub fn reference() -> Self {
        Self {
            encoder_layers: 6,
            decoder_layers: 6,
            dim: 384,
            heads: 2,
            ffn_mult: 4,
            predictor_hidden: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.dim, self.heads, self.ffn_mult, self.ffn_kernel, self.predictor_hidden, self.predictor_kernel, self.batch_size];
        if dims.contains(&0) {
            return Err(Error::Config("stage1 sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("stage1.dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.ffn_kernel % 2 == 0 || self.predictor_kernel % 2 == 0 {
            return Err(Error::Config("stage1 kernels must be odd".into()));
        }
        if [self.lambda_out, self.lambda_dur, self.lambda_pitch].iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("stage1 loss weights must be non-negative".into()));
        }
        if !self.phoneme_set.iter().any(|p| p == REST_PHONEME) {
            return Err(Error::Config(format!("stage1.phoneme_set must contain {REST_PHONEME}")));
        }
        self.optimizer.validate()
    }
}

/// Architecture plus the data-dependent sizes it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Model {
    pub cfg: Stage1Config,
    pub layer_ids: Vec<u32>,
    /// Codebook sizes `K_l`; heads emit `K_l + 1` logits.
    pub vocab: Vec<usize>,
}

/// Graph handles of one forward pass.
pub struct Stage1Output {
    pub token_logits: Vec<Var>,
    pub log_f0_pred: Var,
    pub log_durations_pred: Var,
}

/// Scalar loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stage1Losses {
    pub total: f32,
    pub out: f32,
    pub dur: f32,
    pub pitch: f32,
    /// No voiced frames: the pitch term was forced to zero.
    pub no_voiced: bool,
}

/// One training pair.
#[derive(Clone, Debug)]
pub struct Stage1Example {
    pub id: String,
    pub score: Score,
    pub z: FrameRepresentation,
}

impl Stage1Example {
    pub fn new(id: impl Into<String>, score: Score, z: FrameRepresentation) -> Result<Self> {
        let id = id.into();
        if score.total_frames() != z.n_frames() {
            return Err(Error::Data(format!(
                "{id}: score spans {} frames, representation has {}",
                score.total_frames(),
                z.n_frames()
            )));
        }
        Ok(Self { id, score, z })
    }
}

fn attention_block(g: &mut Graph, ctx: Ctx, p: &str, x: Var, heads: usize) -> Result<Var> {
    let q = nn::linear(g, ctx, &format!("{p}.q"), x)?;
    let k = nn::linear(g, ctx, &format!("{p}.k"), x)?;
    let v = nn::linear(g, ctx, &format!("{p}.v"), x)?;
    let rel = ctx.p(g, &format!("{p}.rel"))?;
    let a = g.scaled_dot_attention(q, k, v, Some(rel), heads)?;
    nn::linear(g, ctx, &format!("{p}.o"), a)
}

/// Convolution over `[T, C]` rows, returning rows.
fn conv_rows(g: &mut Graph, ctx: Ctx, name: &str, x: Var, kernel: usize) -> Result<Var> {
    let s = nn::rows_to_seq(g, x)?;
    let y = nn::conv1d_same(g, ctx, name, s, kernel, 1)?;
    nn::seq_to_rows(g, y)
}

fn fft_block(g: &mut Graph, ctx: Ctx, p: &str, x: Var, cfg: &Stage1Config) -> Result<Var> {
    let a = attention_block(g, ctx, &format!("{p}.attn"), x, cfg.heads)?;
    let h = g.add(x, a)?;
    let h = nn::layer_norm(g, ctx, &format!("{p}.ln1"), h)?;
    let f = conv_rows(g, ctx, &format!("{p}.ffn1"), h, cfg.ffn_kernel)?;
    let f = g.relu(f)?;
    let f = conv_rows(g, ctx, &format!("{p}.ffn2"), f, cfg.ffn_kernel)?;
    let o = g.add(h, f)?;
    nn::layer_norm(g, ctx, &format!("{p}.ln2"), o)
}

fn predictor_head(g: &mut Graph, ctx: Ctx, p: &str, x: Var, cfg: &Stage1Config) -> Result<Var> {
    let mut h = x;
    for i in 0..2 {
        h = conv_rows(g, ctx, &format!("{p}.conv{i}"), h, cfg.predictor_kernel)?;
        h = g.relu(h)?;
        h = nn::layer_norm(g, ctx, &format!("{p}.ln{i}"), h)?;
    }
    let o = nn::linear(g, ctx, &format!("{p}.out"), h)?;
    let n = g.shape(o)[0];
    g.reshape(o, &[n])
}

/// Repeats row `i` of `hidden[N, d]` `durations[i]` times.
pub fn length_regulate(g: &mut Graph, hidden: Var, durations: &[usize]) -> Result<Var> {
    if durations.len() != g.shape(hidden)[0] {
        return Err(Error::Shape(format!("{} durations for {} states", durations.len(), g.shape(hidden)[0])));
    }
    if durations.contains(&0) {
        return Err(Error::Config("length regulation needs durations >= 1".into()));
    }
    let idx: Vec<usize> = durations.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect();
    g.gather_rows(hidden, &idx)
}

impl Stage1Model {
    pub fn new(cfg: Stage1Config, layer_ids: Vec<u32>, vocab: Vec<usize>) -> Result<Self> {
        cfg.validate()?;
        if layer_ids.len() != vocab.len() || vocab.is_empty() || vocab.contains(&0) {
            return Err(Error::Config("stage1 needs one positive vocabulary size per layer".into()));
        }
        Ok(Self { cfg, layer_ids, vocab })
    }

    /// Rebuilds the model description from a checkpoint's metadata.
    pub fn from_store(cfg: Stage1Config, store: &ParameterStore) -> Result<Self> {
        let ids = store.meta("layer_ids").ok_or_else(|| Error::Structure("checkpoint lacks stage-1 metadata".into()))?;
        let vocab = store.meta("vocab").ok_or_else(|| Error::Structure("checkpoint lacks stage-1 metadata".into()))?;
        let model = Self::new(cfg, ids.iter().map(|&v| v as u32).collect(), vocab.iter().map(|&v| v as usize).collect())?;
        store.check_structure(&model.init_params(0)?)?;
        Ok(model)
    }

    pub fn n_phonemes(&self) -> usize {
        self.cfg.phoneme_set.len()
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        let d = c.dim;
        s.insert("emb.phoneme", nn::normal_tensor(&mut rng, &[self.n_phonemes(), d], 0.3))?;
        s.insert("emb.note", nn::normal_tensor(&mut rng, &[NOTE_VOCAB, d], 0.3))?;
        let rel = 2 * c.max_relative_position + 1;
        let blocks = (0..c.encoder_layers)
            .map(|i| format!("enc{i}"))
            .chain((0..c.decoder_layers).map(|i| format!("dec{i}")));
        for p in blocks {
            for proj in ["q", "k", "v", "o"] {
                nn::add_linear(&mut s, &mut rng, &format!("{p}.attn.{proj}"), d, d, true)?;
            }
            s.insert(format!("{p}.attn.rel"), nn::const_tensor(&[c.heads, rel], 0.0))?;
            nn::add_layer_norm(&mut s, &format!("{p}.ln1"), d)?;
            nn::add_conv1d(&mut s, &mut rng, &format!("{p}.ffn1"), d, d * c.ffn_mult, c.ffn_kernel, false, None)?;
            nn::add_conv1d(&mut s, &mut rng, &format!("{p}.ffn2"), d * c.ffn_mult, d, c.ffn_kernel, false, None)?;
            nn::add_layer_norm(&mut s, &format!("{p}.ln2"), d)?;
        }
        for head in ["dur", "pitch"] {
            let mut d_in = d;
            for i in 0..2 {
                nn::add_conv1d(&mut s, &mut rng, &format!("{head}.conv{i}"), d_in, c.predictor_hidden, c.predictor_kernel, false, None)?;
                nn::add_layer_norm(&mut s, &format!("{head}.ln{i}"), c.predictor_hidden)?;
                d_in = c.predictor_hidden;
            }
            nn::add_linear(&mut s, &mut rng, &format!("{head}.out"), c.predictor_hidden, 1, true)?;
        }
        // start the heads near typical values: ln(4 frames), ln(200 Hz)
        s.get_mut("dur.out.b").expect("registered").data_mut()[0] = 4f32.ln();
        s.get_mut("pitch.out.b").expect("registered").data_mut()[0] = 200f32.ln();
        nn::add_linear(&mut s, &mut rng, "pitch_emb", 2, d, true)?;
        for (l, &k) in self.vocab.iter().enumerate() {
            nn::add_linear(&mut s, &mut rng, &format!("head{l}"), d, k + 1, true)?;
        }
        s.set_meta("layer_ids", &self.layer_ids.iter().map(|&v| v as f32).collect::<Vec<_>>());
        s.set_meta("vocab", &self.vocab.iter().map(|&v| v as f32).collect::<Vec<_>>());
        Ok(s)
    }

    /// Phoneme-level hidden states `[N, dim]`.
    pub fn encode(&self, g: &mut Graph, ctx: Ctx, score: &Score) -> Result<Var> {
        if score.phoneme_vocab_size != self.n_phonemes() {
            return Err(Error::Vocab(format!(
                "score uses {} phonemes, model has {}",
                score.phoneme_vocab_size,
                self.n_phonemes()
            )));
        }
        let ph: Vec<usize> = score.entries.iter().map(|e| e.phoneme).collect();
        let notes: Vec<usize> = score.entries.iter().map(ScoreEntry::note_index).collect();
        let tp = ctx.p(g, "emb.phoneme")?;
        let tn = ctx.p(g, "emb.note")?;
        let a = g.embedding(tp, &ph)?;
        let b = g.embedding(tn, &notes)?;
        let mut h = g.add(a, b)?;
        for i in 0..self.cfg.encoder_layers {
            h = fft_block(g, ctx, &format!("enc{i}"), h, &self.cfg)?;
        }
        Ok(h)
    }

    /// Log-durations `[N]`.
    pub fn predict_durations(&self, g: &mut Graph, ctx: Ctx, hidden: Var) -> Result<Var> {
        predictor_head(g, ctx, "dur", hidden, &self.cfg)
    }

    /// Log-F0 `[T]`.
    pub fn predict_pitch(&self, g: &mut Graph, ctx: Ctx, frames: Var) -> Result<Var> {
        predictor_head(g, ctx, "pitch", frames, &self.cfg)
    }

    /// Per-layer logits `[T, K_l + 1]` conditioned on the given log-F0 and
    /// voicing (ground truth in training, predictions at inference).
    pub fn decode_tokens(&self, g: &mut Graph, ctx: Ctx, frames: Var, log_f0: &[f32], voiced: &[f32]) -> Result<Vec<Var>> {
        let t = g.shape(frames)[0];
        if log_f0.len() != t || voiced.len() != t {
            return Err(Error::Shape(format!("{t} frames, {} log-F0 values, {} voicing flags", log_f0.len(), voiced.len())));
        }
        let pin: Vec<f32> = log_f0
            .iter()
            .zip(voiced)
            .flat_map(|(&l, &v)| [(l - LF0_CENTER) * v, v])
            .collect();
        let pin = g.constant(&[t, 2], pin)?;
        let pe = nn::linear(g, ctx, "pitch_emb", pin)?;
        let mut h = g.add(frames, pe)?;
        for i in 0..self.cfg.decoder_layers {
            h = fft_block(g, ctx, &format!("dec{i}"), h, &self.cfg)?;
        }
        (0..self.vocab.len()).map(|l| nn::linear(g, ctx, &format!("head{l}"), h)).collect()
    }

    /// Teacher-forced pass: ground-truth durations, log-F0 and voicing.
    pub fn forward_teacher(&self, g: &mut Graph, ctx: Ctx, score: &Score, z: &FrameRepresentation) -> Result<Stage1Output> {
        let hidden = self.encode(g, ctx, score)?;
        let log_durations_pred = self.predict_durations(g, ctx, hidden)?;
        let frames = length_regulate(g, hidden, &score.durations())?;
        if g.shape(frames)[0] != z.n_frames() {
            return Err(Error::Data(format!("score spans {} frames, target has {}", g.shape(frames)[0], z.n_frames())));
        }
        let log_f0_pred = self.predict_pitch(g, ctx, frames)?;
        let voiced: Vec<f32> = z.f0.voiced.iter().map(|&v| v as u8 as f32).collect();
        let token_logits = self.decode_tokens(g, ctx, frames, &log_f0(&z.f0), &voiced)?;
        Ok(Stage1Output {
            token_logits,
            log_f0_pred,
            log_durations_pred,
        })
    }

    /// Predicts a representation from a score alone. Durations are
    /// `max(1, round(exp(pred)))`; frames under rests are fed to the
    /// decoder as unvoiced.
    pub fn infer(&self, store: &ParameterStore, score: &Score, frame_spec: FrameSpec) -> Result<FrameRepresentation> {
        if score.is_empty() {
            return Err(Error::Config("empty score".into()));
        }
        let ctx = Ctx::frozen(store);
        let mut g = Graph::new();
        let hidden = self.encode(&mut g, ctx, score)?;
        let ld = self.predict_durations(&mut g, ctx, hidden)?;
        let durations: Vec<usize> = g.value(ld).iter().map(|&l| (l.exp().round() as usize).clamp(1, 10_000)).collect();
        let frames = length_regulate(&mut g, hidden, &durations)?;
        let lf = self.predict_pitch(&mut g, ctx, frames)?;
        let lf0: Vec<f32> = g.value(lf).to_vec();
        let rest: Vec<bool> = score
            .entries
            .iter()
            .zip(&durations)
            .flat_map(|(e, &d)| std::iter::repeat_n(e.note.is_none(), d))
            .collect();
        let voiced_in: Vec<f32> = rest.iter().map(|&r| if r { 0.0 } else { 1.0 }).collect();
        let logits = self.decode_tokens(&mut g, ctx, frames, &lf0, &voiced_in)?;
        let t = lf0.len();
        let mut tokens = Vec::with_capacity(logits.len());
        for (l, &lv) in logits.iter().enumerate() {
            let k = self.vocab[l];
            let vals = g.value(lv);
            // the padding class is never emitted
            tokens.push(
                (0..t)
                    .map(|i| {
                        let row = &vals[i * (k + 1)..i * (k + 1) + k];
                        argmax(row) as u32
                    })
                    .collect::<Vec<u32>>(),
            );
        }
        let silence = self.silence_set(store);
        let nyq = frame_spec.sample_rate as f32 / 2.0;
        let f0: Vec<f32> = (0..t)
            .map(|i| {
                let hz = lf0[i].exp();
                let silent = silence.contains(&tokens[0][i]);
                if hz >= self.cfg.vuv_min_hz && hz < nyq && !silent {
                    hz
                } else {
                    0.0
                }
            })
            .collect();
        let tokens = ContentTokens::new(self.layer_ids.clone(), self.vocab.clone(), tokens)?;
        FrameRepresentation::new(tokens, F0Contour::from_hz(f0, frame_spec)?)
    }

    /// Configured silence tokens, else the set learned at training time.
    pub fn silence_set(&self, store: &ParameterStore) -> Vec<u32> {
        match &self.cfg.silence_tokens {
            Some(s) => s.clone(),
            None => store
                .meta("silence_tokens")
                .map(|v| v.iter().map(|&x| x as u32).collect())
                .unwrap_or_default(),
        }
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Targets of one example in the form the loss consumes.
pub struct Stage1Targets<'a> {
    pub tokens: &'a ContentTokens,
    pub log_f0: Vec<f32>,
    pub voiced: Vec<bool>,
    pub durations: Vec<usize>,
}

impl<'a> Stage1Targets<'a> {
    pub fn from_example(ex: &'a Stage1Example) -> Self {
        Self {
            tokens: &ex.z.tokens,
            log_f0: log_f0(&ex.z.f0),
            voiced: ex.z.f0.voiced.clone(),
            durations: ex.score.durations(),
        }
    }
}

/// `λ_out·L_out + λ_dur·L_dur + λ_pitch·L_pitch`; the pitch term covers
/// voiced frames only.
pub fn stage1_loss(g: &mut Graph, out: &Stage1Output, targets: &Stage1Targets, cfg: &Stage1Config) -> Result<(Var, Stage1Losses)> {
    let t = targets.tokens.n_frames();
    if out.token_logits.len() != targets.tokens.n_layers() {
        return Err(Error::Shape(format!("{} logit layers, {} target layers", out.token_logits.len(), targets.tokens.n_layers())));
    }
    let mut per_layer = Vec::with_capacity(out.token_logits.len());
    for (l, &logits) in out.token_logits.iter().enumerate() {
        let target: Vec<usize> = targets.tokens.tokens[l].iter().map(|&c| c as usize).collect();
        let v = g.shape(logits)[1];
        let loss = match cfg.output_loss {
            OutputLoss::CrossEntropy => g.cross_entropy(logits, &target, None)?,
            OutputLoss::L1OneHot => {
                let p = g.softmax(logits)?;
                let mut onehot = vec![0.0f32; t * v];
                for (i, &c) in target.iter().enumerate() {
                    onehot[i * v + c] = 1.0;
                }
                let oh = g.constant(&[t, v], onehot)?;
                g.l1_loss(p, oh, None)?
            }
        };
        per_layer.push(loss);
    }
    let out_sum = g.sum_scalars(&per_layer)?;
    let l_out = g.scale(out_sum, 1.0 / per_layer.len() as f32)?;

    let n = targets.durations.len();
    let ld_t = g.constant(&[n], targets.durations.iter().map(|&d| (d as f32).ln()).collect())?;
    let l_dur = g.l1_loss(out.log_durations_pred, ld_t, None)?;

    let mask: Vec<f32> = targets.voiced.iter().map(|&v| v as u8 as f32).collect();
    let no_voiced = !targets.voiced.iter().any(|&v| v);
    let lf_t = g.constant(&[t], targets.log_f0.clone())?;
    let l_pitch = g.l1_loss(out.log_f0_pred, lf_t, Some(&mask))?;

    let parts = [
        g.scale(l_out, cfg.lambda_out)?,
        g.scale(l_dur, cfg.lambda_dur)?,
        g.scale(l_pitch, cfg.lambda_pitch)?,
    ];
    let total = g.sum_scalars(&parts)?;
    let losses = Stage1Losses {
        total: g.scalar(total),
        out: g.scalar(l_out),
        dur: g.scalar(l_dur),
        pitch: g.scalar(l_pitch),
        no_voiced,
    };
    Ok((total, losses))
}

/// Training state: model, parameters, optimizer and epoch counter.
pub struct Stage1Trainer {
    pub model: Stage1Model,
    pub store: ParameterStore,
    pub opt: OptimizerState,
    pub seed: u64,
    pub epoch: u64,
}

/// Mean losses over one epoch plus per-step totals.
#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub mean: Stage1Losses,
    pub step_totals: Vec<f32>,
}

impl Stage1Trainer {
    pub fn new(model: Stage1Model, seed: u64) -> Result<Self> {
        let store = model.init_params(seed)?;
        let opt = OptimizerState::new(model.cfg.optimizer.clone());
        Ok(Self { model, store, opt, seed, epoch: 0 })
    }

    /// Resumes from a checkpoint written by [`Stage1Trainer::checkpoint`].
    pub fn resume(cfg: Stage1Config, store: ParameterStore, seed: u64) -> Result<Self> {
        let model = Stage1Model::from_store(cfg, &store)?;
        let opt = OptimizerState::import_from(model.cfg.optimizer.clone(), &store);
        let epoch = store.meta("epoch").and_then(|v| v.first().copied()).unwrap_or(0.0) as u64;
        Ok(Self { model, store, opt, seed, epoch })
    }

    /// Parameters with optimizer state and counters attached.
    pub fn checkpoint(&self) -> ParameterStore {
        let mut s = self.store.clone();
        self.opt.export_into(&mut s);
        s.set_meta("epoch", &[self.epoch as f32]);
        s
    }

    /// One optimizer update over a mini-batch (gradients averaged).
    pub fn step(&mut self, batch: &[&Stage1Example]) -> Result<Stage1Losses> {
        let mut acc = Stage1Losses { total: 0.0, out: 0.0, dur: 0.0, pitch: 0.0, no_voiced: false };
        let scale = 1.0 / batch.len() as f32;
        for ex in batch {
            let mut g = Graph::new();
            let ctx = Ctx::trainable(&self.store);
            let out = self.model.forward_teacher(&mut g, ctx, &ex.score, &ex.z)?;
            let (loss, l) = stage1_loss(&mut g, &out, &Stage1Targets::from_example(ex), &self.model.cfg)?;
            let scaled = g.scale(loss, scale)?;
            g.backward(scaled)?;
            g.accumulate_grads(&mut self.store);
            acc.total += l.total * scale;
            acc.out += l.out * scale;
            acc.dur += l.dur * scale;
            acc.pitch += l.pitch * scale;
            acc.no_voiced |= l.no_voiced;
        }
        adamw_step(&mut self.store, &mut self.opt)?;
        Ok(acc)
    }

    /// One pass over `data` in a seeded order derived from `(seed, epoch)`.
    pub fn train_epoch(&mut self, data: &[Stage1Example]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Data("no stage-1 training examples".into()));
        }
        if self.epoch == 0 && self.model.cfg.silence_tokens.is_none() && self.store.meta("silence_tokens").is_none() {
            let set = derive_silence_tokens(data, self.model.vocab[0]);
            self.store.set_meta("silence_tokens", &set.iter().map(|&v| v as f32).collect::<Vec<_>>());
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut totals = Vec::new();
        let mut sum = Stage1Losses { total: 0.0, out: 0.0, dur: 0.0, pitch: 0.0, no_voiced: false };
        for chunk in order.chunks(self.model.cfg.batch_size) {
            let batch: Vec<&Stage1Example> = chunk.iter().map(|&i| &data[i]).collect();
            let l = self.step(&batch)?;
            totals.push(l.total);
            sum.total += l.total;
            sum.out += l.out;
            sum.dur += l.dur;
            sum.pitch += l.pitch;
            sum.no_voiced |= l.no_voiced;
        }
        let n = totals.len() as f32;
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            mean: Stage1Losses {
                total: sum.total / n,
                out: sum.out / n,
                dur: sum.dur / n,
                pitch: sum.pitch / n,
                no_voiced: sum.no_voiced,
            },
            step_totals: totals,
        })
    }
}

/// First-layer tokens whose frames are mostly unvoiced in the data.
pub fn derive_silence_tokens(data: &[Stage1Example], k0: usize) -> Vec<u32> {
    let mut counts = vec![(0usize, 0usize); k0];
    for ex in data {
        for (&tok, &v) in ex.z.tokens.tokens[0].iter().zip(&ex.z.f0.voiced) {
            let c = &mut counts[tok as usize];
            c.0 += 1;
            c.1 += !v as usize;
        }
    }
    counts
        .iter()
        .enumerate()
        .filter(|(_, &(n, unv))| n > 0 && 2 * unv > n)
        .map(|(i, _)| i as u32)
        .collect()
}

/// Teacher-forced accuracy figures on a data set.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Stage1Accuracy {
    pub token_accuracy: f32,
    pub duration_match: f32,
    pub pitch_l1: f32,
}

pub fn evaluate_teacher_forced(model: &Stage1Model, store: &ParameterStore, data: &[Stage1Example]) -> Result<Stage1Accuracy> {
    let (mut tok_hit, mut tok_n, mut dur_hit, mut dur_n) = (0usize, 0usize, 0usize, 0usize);
    let (mut l1, mut l1_n) = (0.0f64, 0usize);
    for ex in data {
        let mut g = Graph::new();
        let out = model.forward_teacher(&mut g, Ctx::frozen(store), &ex.score, &ex.z)?;
        for (l, &lv) in out.token_logits.iter().enumerate() {
            let k1 = model.vocab[l] + 1;
            let vals = g.value(lv);
            for (i, &target) in ex.z.tokens.tokens[l].iter().enumerate() {
                tok_hit += (argmax(&vals[i * k1..(i + 1) * k1]) == target as usize) as usize;
                tok_n += 1;
            }
        }
        for (&p, e) in g.value(out.log_durations_pred).iter().zip(&ex.score.entries) {
            dur_hit += ((p.exp().round().max(1.0)) as usize == e.duration) as usize;
            dur_n += 1;
        }
        let target = log_f0(&ex.z.f0);
        for ((&p, &t), &v) in g.value(out.log_f0_pred).iter().zip(&target).zip(&ex.z.f0.voiced) {
            if v {
                l1 += (p - t).abs() as f64;
                l1_n += 1;
            }
        }
    }
    Ok(Stage1Accuracy {
        token_accuracy: tok_hit as f32 / tok_n.max(1) as f32,
        duration_match: dur_hit as f32 / dur_n.max(1) as f32,
        pitch_l1: if l1_n > 0 { (l1 / l1_n as f64) as f32 } else { 0.0 },
    })
}

#[cfg(test)]
mod tests;
