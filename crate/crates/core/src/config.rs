//! Run configuration: one TOML file with a mandatory `version` and one
//! table per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::FrameSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::finetune::FinetuneConfig;
use crate::pitch::PitchConfig;
use crate::representation::RepresentationConfig;
use crate::segmentation::SegmentationConfig;
use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "NHSG_SEED";

/// Keys that are valid but absent from the default (unset options).
const OPTIONAL_KEYS: &[&str] = &["stage1.silence_tokens"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub win: usize,
    pub fft: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            hop: 320,
            win: 1024,
            fft: 1024,
        }
    }
}

impl AudioConfig {
    pub fn frame_spec(&self) -> Result<FrameSpec> {
        FrameSpec::new(self.hop, self.win, self.sample_rate)
    }

    pub fn frame_period_ms(&self) -> f64 {
        1000.0 * self.hop as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub audio: AudioConfig,
    #[serde(default)]
    pub pitch: PitchConfig,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
    #[serde(default)]
    pub representation: RepresentationConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            audio: AudioConfig::default(),
            pitch: PitchConfig::default(),
            segmentation: SegmentationConfig::default(),
            representation: RepresentationConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn collect_unknown(prefix: &str, given: &toml::Table, known: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            Some(toml::Value::Table(kt)) => {
                if let toml::Value::Table(gt) = v {
                    collect_unknown(&path, gt, kt, out);
                }
            }
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => out.push(path),
        }
    }
}

impl PipelineConfig {
    /// 44.1 kHz audio, 882-sample hop and full-size stage-1 dimensions.
    pub fn reference() -> Self {
        let mut c = Self::default();
        c.audio = AudioConfig {
            sample_rate: 44100,
            hop: 882,
            win: 2048,
            fft: 2048,
        };
        c.stage1 = Stage1Config::reference();
        c.stage2 = Stage2Config::reference();
        c.finetune.predictor = crate::finetune::PredictorConfig::hop_882();
        c.finetune.crop_frames = c.stage2.crop_frames;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        match table.get("version") {
            None => return Err(Error::Config("missing required key: version".into())),
            Some(toml::Value::Integer(v)) if *v == CONFIG_VERSION as i64 => {}
            Some(v) => return Err(Error::Config(format!("unsupported config version {v}, expected {CONFIG_VERSION}"))),
        }
        let known = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        collect_unknown("", &table, &known, &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks every section and the cross-section constraints, reporting
    /// all failures at once.
    pub fn validate(&self) -> Result<()> {
        let a = &self.audio;
        let mut errs: Vec<String> = Vec::new();
        let mut check = |key: &str, r: Result<()>| {
            if let Err(e) = r {
                errs.push(format!("{key}: {e}"));
            }
        };
        check("audio", a.frame_spec().map(|_| ()));
        if !a.fft.is_power_of_two() || a.fft < a.win {
            check("audio.fft", Err(Error::Config(format!("{} must be a power of two >= win {}", a.fft, a.win))));
        }
        check("pitch", self.pitch.validate(a.sample_rate));
        if (self.pitch.frame_period_ms as f64 - a.frame_period_ms()).abs() > 1e-6 {
            check(
                "pitch.frame_period_ms",
                Err(Error::Config(format!("{} differs from the audio frame period {}", self.pitch.frame_period_ms, a.frame_period_ms()))),
            );
        }
        check("segmentation", self.segmentation.validate());
        check("representation", self.representation.validate());
        check("stage1", self.stage1.validate());
        check("stage2", self.stage2.validate());
        if self.stage2.generator.hop() != a.hop {
            check(
                "stage2.generator.upsample_factors",
                Err(Error::Config(format!("product {} differs from audio.hop {}", self.stage2.generator.hop(), a.hop))),
            );
        }
        check("finetune", self.finetune.validate(a.hop));
        check("eval", self.eval.validate());
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// Applies `NHSG_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

const NOTES: &[(&str, &str)] = &[
    ("version", "config format version (required)"),
    ("seed", "global seed; the NHSG_SEED environment variable overrides it"),
    ("audio", "toy rate; the reference setup is 44.1 kHz with an 882-sample (20 ms) hop"),
    ("audio.hop", "samples per frame; must equal the generator upsampling product"),
    ("pitch.fmin", "Hz; the analysis window spans 4 periods of fmin"),
    ("pitch.harmonicity_threshold", "cumulative-mean-normalised difference threshold for voicing"),
    ("segmentation.silence_threshold_db", "dB relative to full scale"),
    ("segmentation.max_clip_s", "clips longer than this after re-segmentation are dropped"),
    ("segmentation.resegment_above_s", "clips longer than this are split again"),
    ("segmentation.max_iterations", "segmentation passes, tightening the threshold each time"),
    ("representation.k", "codebook size per layer"),
    ("representation.pseudo_ssl.layer_ids", "feature layers taken from the extractor stack"),
    ("stage1.dim", "toy width; the reference encoder uses 6 layers of width 384"),
    ("stage1.lambda_out", "multi-task weights for output tokens, durations and pitch"),
    ("stage1.output_loss", "cross-entropy or l1-one-hot"),
    ("stage1.silence_tokens", "first-layer tokens treated as silence; derived from data when unset"),
    ("stage1.optimizer", "Adam, lr 5e-4"),
    ("stage2.weights", "adversarial 1.0, feature matching 2.0, mel 15.0"),
    ("stage2.objective", "least-squares or hinge"),
    ("stage2.generator.upsample_factors", "product is the hop; [7, 7, 6, 3] gives 882"),
    ("stage2.generator.resblock_kernels", "multi-receptive-field kernels, each with every dilation"),
    ("stage2.g_optimizer", "toy schedule; the reference run uses AdamW lr 1e-4, betas 0.8/0.99, 40k warmup steps"),
    ("finetune.oversample_ratio", "non-human to human item ratio, between 0.8 and 1"),
    ("finetune.pairing", "uniform, derangement or self-pair timbre assignment"),
    ("finetune.predictor.strides", "product must equal audio.hop"),
    ("eval.mcd_coeffs", "cepstral coefficients 1..=n; c0 is excluded"),
];

/// Default configuration as commented TOML.
pub fn template() -> Result<String> {
    let body = PipelineConfig::default().to_toml()?;
    let mut out = String::new();
    let mut section = String::new();
    let note = |path: &str| NOTES.iter().find(|(k, _)| *k == path).map(|(_, n)| *n);
    for line in body.lines() {
        let t = line.trim();
        let path = if let Some(s) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = s.to_string();
            Some(section.clone())
        } else if let Some((k, _)) = t.split_once(" = ") {
            Some(if section.is_empty() { k.to_string() } else { format!("{section}.{k}") })
        } else {
            None
        };
        if let Some(n) = path.as_deref().and_then(note) {
            out.push_str(&format!("# {n}\n"));
        }
        out.push_str(line);
        out.push('\n');
        if section == "stage1" && t.starts_with("vuv_min_hz") {
            out.push_str(&format!("# {}\n# silence_tokens = [0]\n", note("stage1.silence_tokens").unwrap_or_default()));
        }
    }
    Ok(out)
}
