//! End-to-end steps over a manifest and a per-clip cache directory:
//! feature extraction, codebook fitting, stage training, synthesis and
//! conversion.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::dsp::{read_wav, Waveform};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneLosses, FinetuneTrainer};
use crate::manifest::{Manifest, ManifestRow, Split};
use crate::numerics::checkpoint::decode_params;
use crate::numerics::{ParameterStore, Tensor};
use crate::representation::formats::{
    decode_codebook, decode_embedding, decode_features, decode_representation, CACHE_MAGIC, CODEBOOK_MAGIC, EMBEDDING_MAGIC, FEATURES_MAGIC,
};
use crate::representation::{
    build_representation, embed_timbre, extract_content_features, fit_kmeans, read_embedding, read_representation, write_embedding,
    write_representation, Codebook, CodebookLayer, ContentExtractor, ContentFeatures, FrameRepresentation, TimbreEmbedder, TimbreEmbedding,
    EMBED_DIM,
};
use crate::stage1::score::Score;
use crate::stage1::{EpochStats, Stage1Example, Stage1Model, Stage1Trainer};
use crate::stage2::{Generator, Stage2Example, Stage2Losses, Stage2Trainer};

const CODEBOOK_PREFIX: &str = "__codebook.";

/// Per-clip artifacts keyed by manifest id.
#[derive(Clone, Debug)]
pub struct Cache {
    pub dir: PathBuf,
}

impl Cache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn features(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.nhft"))
    }

    pub fn embedding(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.nhte"))
    }

    pub fn representation(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.nhrc"))
    }
}

pub fn extractor(cfg: &PipelineConfig) -> ContentExtractor {
    ContentExtractor::PseudoSsl(cfg.representation.pseudo_ssl.clone())
}

fn read_clip(m: &Manifest, row: &ManifestRow, cfg: &PipelineConfig) -> Result<Waveform> {
    let w = read_wav(m.resolve(&row.audio_path))?;
    if w.sample_rate() != cfg.audio.sample_rate {
        return Err(Error::Unsupported(format!(
            "{}: {} Hz audio, configured for {} Hz",
            row.id,
            w.sample_rate(),
            cfg.audio.sample_rate
        )));
    }
    Ok(w)
}

#[derive(Clone, Debug, Default)]
pub struct ExtractSummary {
    pub features: usize,
    pub representations: usize,
    /// `(id, reason)` for clips without a representation.
    pub skipped: Vec<(String, String)>,
}

/// Writes features and timbre embeddings for every row, plus
/// representations when a codebook is given. Clips that cannot be
/// represented (too short, never voiced) are skipped and reported.
pub fn extract(m: &Manifest, cfg: &PipelineConfig, cache: &Cache, codebook: Option<&Codebook>) -> Result<ExtractSummary> {
    let spec = cfg.audio.frame_spec()?;
    let ex = extractor(cfg);
    let mut sum = ExtractSummary::default();
    for row in &m.rows {
        let w = read_clip(m, row, cfg)?;
        let f = extract_content_features(&w, &spec, &ex)?;
        crate::representation::formats::write_features(&f, cache.features(&row.id))?;
        sum.features += 1;
        let e = match &row.embedding_path {
            Some(p) => read_embedding(m.resolve(p), EMBED_DIM)?,
            None => match embed_timbre(&w, &TimbreEmbedder::Builtin, &row.id) {
                Ok(e) => e,
                Err(err) => {
                    sum.skipped.push((row.id.clone(), err.to_string()));
                    continue;
                }
            },
        };
        write_embedding(&e, cache.embedding(&row.id))?;
        if let Some(cb) = codebook {
            match build_representation(&w, &spec, &ex, cb, &cfg.pitch) {
                Ok(z) => {
                    write_representation(&z, cache.representation(&row.id))?;
                    sum.representations += 1;
                }
                Err(e @ (Error::InvalidSegment | Error::TooShort(_))) => {
                    log::warn!("{}: {e}", row.id);
                    sum.skipped.push((row.id.clone(), e.to_string()));
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(sum)
}

/// Seeded subset of `n` frames (all frames when `n` is 0 or larger).
fn subsample(f: ContentFeatures, n: usize, rng: &mut ChaCha8Rng) -> Result<ContentFeatures> {
    if n == 0 || n >= f.n_frames {
        return Ok(f);
    }
    let mut idx = sample(rng, f.n_frames, n).into_vec();
    idx.sort_unstable();
    let layers = f
        .layers
        .iter()
        .zip(&f.dims)
        .map(|(l, &d)| idx.iter().flat_map(|&t| l[t * d..(t + 1) * d].iter().copied()).collect())
        .collect();
    ContentFeatures::new(f.layer_ids, f.dims, layers, n, f.frame_spec)
}

/// Fits the codebook on annotated training rows (all human training rows
/// when none are annotated).
pub fn fit_codebook(m: &Manifest, cfg: &PipelineConfig, cache: &Cache) -> Result<Codebook> {
    let spec = cfg.audio.frame_spec()?;
    let mut rows: Vec<&ManifestRow> = m.rows.iter().filter(|r| r.annotated && r.split == Split::Train).collect();
    if rows.is_empty() {
        rows = m.select(Some(Split::Train), Some(true));
    }
    if rows.is_empty() {
        return Err(Error::Data("no annotated or human training rows for k-means".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let feats = rows
        .iter()
        .map(|r| {
            let f = crate::representation::formats::read_features(cache.features(&r.id), spec)?;
            subsample(f, cfg.representation.kmeans_frames_per_clip, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let ks = vec![cfg.representation.k; cfg.representation.n_layers()];
    fit_kmeans(&feats, &ks, cfg.representation.kmeans_max_iter, cfg.seed)
}

pub fn stage1_examples(m: &Manifest, cfg: &PipelineConfig, cache: &Cache, split: Split) -> Result<Vec<Stage1Example>> {
    m.rows
        .iter()
        .filter(|r| r.annotated && r.split == split)
        .filter(|r| cache.representation(&r.id).exists())
        .map(|r| {
            let score = Score::read(m.resolve(r.score_path.as_ref().expect("annotated rows carry scores")), &cfg.stage1.phoneme_set)?;
            let z = read_representation(cache.representation(&r.id))?;
            Stage1Example::new(r.id.clone(), score, z)
        })
        .collect()
}

pub fn stage2_examples(m: &Manifest, cfg: &PipelineConfig, cache: &Cache, rows: &[&ManifestRow]) -> Result<Vec<Stage2Example>> {
    rows.iter()
        .filter(|r| cache.representation(&r.id).exists())
        .map(|r| {
            Ok(Stage2Example {
                id: r.id.clone(),
                z: read_representation(cache.representation(&r.id))?,
                waveform: read_clip(m, r, cfg)?,
                embedding: read_embedding(cache.embedding(&r.id), EMBED_DIM)?,
            })
        })
        .collect()
}

pub fn train_stage1(
    cfg: &PipelineConfig,
    data: &[Stage1Example],
    codebook: &Codebook,
    resume: Option<ParameterStore>,
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<ParameterStore> {
    let mut t = match resume {
        Some(s) => Stage1Trainer::resume(cfg.stage1.clone(), s, cfg.seed)?,
        None => Stage1Trainer::new(Stage1Model::new(cfg.stage1.clone(), codebook.layer_ids(), codebook.vocab_sizes())?, cfg.seed)?,
    };
    while (t.epoch as usize) < epochs {
        let stats = t.train_epoch(data)?;
        on_epoch(&stats);
    }
    Ok(t.checkpoint())
}

pub fn embed_codebook(store: &mut ParameterStore, cb: &Codebook) -> Result<()> {
    for l in &cb.layers {
        store.set(format!("{CODEBOOK_PREFIX}{}", l.layer_id), Tensor::new(&[l.k, l.dim], l.centroids.clone())?);
    }
    Ok(())
}

pub fn embedded_codebook(store: &ParameterStore) -> Option<Codebook> {
    let layers: Vec<CodebookLayer> = store
        .iter()
        .filter_map(|(n, t)| {
            let id = n.strip_prefix(CODEBOOK_PREFIX)?.parse().ok()?;
            Some(CodebookLayer {
                layer_id: id,
                k: t.shape()[0],
                dim: t.shape()[1],
                centroids: t.data().to_vec(),
                iterations: 0,
                inertia: 0.0,
            })
        })
        .collect();
    (!layers.is_empty()).then_some(Codebook { layers, seed: 0 })
}

/// Runs `steps` total stage-2 steps (counting any resumed ones), calling
/// `on_step` after each; the codebook travels inside the checkpoint.
pub fn train_stage2(
    cfg: &PipelineConfig,
    data: &[Stage2Example],
    codebook: &Codebook,
    resume: Option<&ParameterStore>,
    steps: u64,
    mut on_step: impl FnMut(&Stage2Trainer, &Stage2Losses) -> Result<()>,
) -> Result<ParameterStore> {
    let mut t = match resume {
        Some(s) => Stage2Trainer::resume(cfg.stage2.clone(), s, cfg.seed)?,
        None => Stage2Trainer::new(cfg.stage2.clone(), codebook.layer_ids(), codebook.vocab_sizes(), cfg.audio.sample_rate, cfg.seed)?,
    };
    while t.step < steps {
        let l = t.train_step(data)?;
        on_step(&t, &l)?;
    }
    let mut s = t.checkpoint();
    embed_codebook(&mut s, codebook)?;
    Ok(s)
}

pub fn finetune(
    cfg: &PipelineConfig,
    human: &[Stage2Example],
    non_human: &[Stage2Example],
    init: &ParameterStore,
    steps: u64,
    mut on_step: impl FnMut(&FinetuneTrainer, &FinetuneLosses) -> Result<()>,
) -> Result<ParameterStore> {
    let s2 = Stage2Trainer::resume(cfg.stage2.clone(), init, cfg.seed)?;
    let start = s2.step;
    let mut t = FinetuneTrainer::resume(cfg.finetune.clone(), s2, init)?;
    while t.stage2.step < start + steps {
        let l = t.step(human, non_human)?;
        on_step(&t, &l)?;
    }
    let mut s = t.checkpoint();
    if let Some(cb) = embedded_codebook(init) {
        embed_codebook(&mut s, &cb)?;
    }
    Ok(s)
}

/// Timbre from an `NHTE` file or, for anything else, the builtin embedder
/// over a WAV file.
pub fn load_timbre(path: &Path) -> Result<TimbreEmbedding> {
    let is_nhte = std::fs::read(path).map_err(|e| Error::io(path, e))?.starts_with(EMBEDDING_MAGIC);
    if is_nhte {
        read_embedding(path, EMBED_DIM)
    } else {
        let w = read_wav(path)?;
        embed_timbre(&w, &TimbreEmbedder::Builtin, &path.display().to_string())
    }
}

/// Score to audio: stage-1 inference, then the vocoder.
pub fn synthesize(cfg: &PipelineConfig, stage1: &ParameterStore, vocoder: &ParameterStore, score: &Score, timbre: &TimbreEmbedding) -> Result<Waveform> {
    let model = Stage1Model::from_store(cfg.stage1.clone(), stage1)?;
    let z = model.infer(stage1, score, cfg.audio.frame_spec()?)?;
    vocode(cfg, vocoder, &z, timbre)
}

pub fn vocode(cfg: &PipelineConfig, vocoder: &ParameterStore, z: &FrameRepresentation, timbre: &TimbreEmbedding) -> Result<Waveform> {
    let gen = Generator::from_store(cfg.stage2.generator.clone(), vocoder)?;
    gen.vocode(vocoder, z, timbre)
}

/// Audio to audio: source representation, then the vocoder with the
/// target timbre.
pub fn convert(
    cfg: &PipelineConfig,
    vocoder: &ParameterStore,
    codebook: Option<&Codebook>,
    source: &Waveform,
    timbre: &TimbreEmbedding,
) -> Result<(FrameRepresentation, Waveform)> {
    if source.sample_rate() != cfg.audio.sample_rate {
        return Err(Error::Unsupported(format!(
            "source is {} Hz, configured for {} Hz",
            source.sample_rate(),
            cfg.audio.sample_rate
        )));
    }
    let embedded = embedded_codebook(vocoder);
    let cb = codebook
        .or(embedded.as_ref())
        .ok_or_else(|| Error::Config("vocoder checkpoint carries no codebook; pass one explicitly".into()))?;
    let z = build_representation(source, &cfg.audio.frame_spec()?, &extractor(cfg), cb, &cfg.pitch)?;
    let w = vocode(cfg, vocoder, &z, timbre)?;
    Ok((z, w))
}

fn describe_representation(z: &FrameRepresentation) -> String {
    let mut out = String::new();
    let s = z.f0.frame_spec;
    let _ = writeln!(out, "representation: {} frames, {} Hz, hop {}, win {}", z.n_frames(), s.sample_rate, s.hop_samples, s.win_samples);
    let _ = writeln!(out, "layers {:?}, K {:?}", z.tokens.layer_ids, z.tokens.vocab);
    let _ = writeln!(out, "voiced {:.1}%", 100.0 * z.f0.voiced_fraction());
    let header: Vec<String> = z.tokens.layer_ids.iter().map(|l| format!("L{l}")).collect();
    let _ = writeln!(out, "frame\tf0_hz\t{}", header.join("\t"));
    for t in 0..z.n_frames() {
        let toks: Vec<String> = z.tokens.tokens.iter().map(|l| l[t].to_string()).collect();
        let _ = writeln!(out, "{t}\t{:.2}\t{}", z.f0.f0_hz[t], toks.join("\t"));
    }
    out
}

/// Human-readable dump of any artifact, chosen by its magic bytes.
pub fn inspect(path: &Path, cfg: &PipelineConfig) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = bytes.get(..4).ok_or_else(|| Error::Format(format!("{}: too short to identify", path.display())))?;
    let mut out = String::new();
    if magic == CACHE_MAGIC {
        out = describe_representation(&decode_representation(&bytes)?);
    } else if magic == CODEBOOK_MAGIC {
        let cb = decode_codebook(&bytes)?;
        let _ = writeln!(out, "codebook: seed {}", cb.seed);
        for l in &cb.layers {
            let _ = writeln!(out, "layer {}: K {}, dim {}, {} iterations, inertia {:.6}", l.layer_id, l.k, l.dim, l.iterations, l.inertia);
        }
    } else if magic == EMBEDDING_MAGIC {
        let e = decode_embedding(&bytes, EMBED_DIM, &path.display().to_string())?;
        let _ = writeln!(out, "embedding: dim {}, norm {:.6}", e.dim(), e.norm());
        let vals: Vec<String> = e.vector.iter().map(|v| format!("{v:.5}")).collect();
        let _ = writeln!(out, "{}", vals.join(" "));
    } else if magic == FEATURES_MAGIC {
        let f = decode_features(&bytes, cfg.audio.frame_spec()?)?;
        let _ = writeln!(out, "features: {} frames, layers {:?}, dims {:?}", f.n_frames, f.layer_ids, f.dims);
    } else if magic == crate::numerics::checkpoint::MAGIC {
        let s = decode_params(&bytes)?;
        let _ = writeln!(out, "checkpoint: step {}, {} trainable scalars", s.step, s.num_scalars());
        for (n, t) in s.iter() {
            let _ = writeln!(out, "{n}\t{:?}", t.shape());
        }
    } else {
        return Err(Error::Format(format!("{}: unrecognised magic {:?}", path.display(), String::from_utf8_lossy(magic))));
    }
    Ok(out)
}
