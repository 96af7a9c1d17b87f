//! Seeded synthetic corpus: scored harmonic "voices" plus non-human
//! sources (sawtooth instruments, FM chirps, tone-plus-noise).

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRow, Split, HUMAN_DOMAIN};
use crate::stage1::score::{Score, ScoreEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToySource {
    Human,
    Instrumental,
    Bird,
    General,
}

impl ToySource {
    pub fn domain(self) -> &'static str {
        match self {
            Self::Human => HUMAN_DOMAIN,
            Self::Instrumental => "instrumental",
            Self::Bird => "bird",
            Self::General => "general",
        }
    }

    /// MIDI range of generated melodies.
    fn notes(self) -> (u8, u8) {
        match self {
            Self::Human => (52, 69),
            Self::Instrumental => (45, 64),
            Self::Bird => (74, 82),
            Self::General => (48, 60),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusSpec {
    pub counts: Vec<(ToySource, usize)>,
    pub sample_rate: u32,
    pub hop: usize,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            counts: vec![(ToySource::Human, 10), (ToySource::Instrumental, 4), (ToySource::Bird, 3), (ToySource::General, 3)],
            sample_rate: 16000,
            hop: 320,
            seed: 0,
        }
    }
}

fn midi_hz(n: u8) -> f64 {
    440.0 * 2f64.powf((n as f64 - 69.0) / 12.0)
}

/// Random melody: 6 to 9 sung entries with occasional rests, framed by
/// short rests.
pub fn toy_score(rng: &mut impl Rng, source: ToySource, n_phonemes: usize) -> Result<Score> {
    if n_phonemes < 2 {
        return Err(Error::Config("toy scores need at least one non-rest phoneme".into()));
    }
    let (lo, hi) = source.notes();
    let rest = |d| ScoreEntry { phoneme: 0, note: None, duration: d };
    let mut entries = vec![rest(rng.random_range(2..=4))];
    for i in 0..rng.random_range(6..=9) {
        if i > 0 && rng.random::<f32>() < 0.15 {
            entries.push(rest(rng.random_range(2..=4)));
        }
        entries.push(ScoreEntry {
            phoneme: rng.random_range(1..n_phonemes),
            note: Some(rng.random_range(lo..=hi)),
            duration: rng.random_range(4..=10),
        });
    }
    entries.push(rest(rng.random_range(2..=4)));
    Score::new(entries, n_phonemes)
}

/// Harmonic weights of a phoneme: a formant-like bump over a 1/h tilt.
fn phoneme_profile(p: usize, n: usize) -> Vec<f64> {
    let centre = 1.0 + ((p * 5) % 7) as f64;
    let width = 1.0 + (p % 3) as f64;
    (1..=n)
        .map(|h| {
            let h = h as f64;
            0.35 / h + (-(h - centre).powi(2) / (2.0 * width * width)).exp()
        })
        .collect()
}

/// Renders `score` at `hop` samples per frame; output length is exactly
/// `total_frames * hop`.
pub fn render_score(score: &Score, source: ToySource, sample_rate: u32, hop: usize, rng: &mut impl Rng) -> Result<Waveform> {
    let sr = sample_rate as f64;
    let n = score.total_frames() * hop;
    let mut out = Vec::with_capacity(n);
    let (mut phase, mut lp) = (0.0f64, 0.0f64);
    let ramp = (0.01 * sr) as usize;
    for e in &score.entries {
        let len = e.duration * hop;
        let Some(note) = e.note else {
            out.extend((0..len).map(|_| 1e-3 * rng.random_range(-1.0f32..1.0)));
            continue;
        };
        let f = midi_hz(note);
        let harmonics = ((sr / 2.0 / f).floor() as usize).clamp(1, 12);
        let profile = phoneme_profile(e.phoneme, harmonics);
        let norm: f64 = profile.iter().sum();
        for i in 0..len {
            let t = i as f64 / sr;
            let env = (i.min(len - 1 - i) as f64 / ramp as f64).min(1.0);
            let (inst, v) = match source {
                ToySource::Human => {
                    let inst = f * (1.0 + 0.01 * (TAU * 5.5 * t).sin());
                    let v: f64 = profile.iter().enumerate().map(|(h, w)| w * ((h + 1) as f64 * phase).sin()).sum::<f64>() / norm;
                    (inst, 0.5 * v)
                }
                ToySource::Instrumental => {
                    let saw = (phase / TAU).fract() * 2.0 - 1.0;
                    (f, 0.35 * saw)
                }
                ToySource::Bird => {
                    let inst = f * (1.0 + 0.04 * (TAU * 11.0 * t).sin());
                    let am = 0.6 + 0.4 * (TAU * 23.0 * t).sin().abs();
                    (inst, 0.45 * am * phase.sin())
                }
                ToySource::General => {
                    lp += 0.15 * (rng.random_range(-1.0..1.0) - lp);
                    (f, 0.3 * phase.sin() + 0.12 * (0.5 * (2.0 * phase).sin() + lp))
                }
            };
            out.push((env * v) as f32);
            phase = (phase + TAU * inst / sr) % (TAU * 64.0);
        }
    }
    Waveform::new(out, sample_rate)
}

fn split_for(i: usize, n: usize) -> Split {
    match n - 1 - i {
        0 => Split::Test,
        1 if n >= 6 => Split::Dev,
        _ => Split::Train,
    }
}

/// One clip per requested item: `(row, waveform, score)`; scores are kept
/// for every source, but only human rows are marked annotated.
pub fn toy_clips(spec: &ToyCorpusSpec, n_phonemes: usize) -> Result<Vec<(ManifestRow, Waveform, Score)>> {
    let mut out = Vec::new();
    for (k, &(source, count)) in spec.counts.iter().enumerate() {
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((k as u64 + 1) << 32) ^ i as u64);
            let score = toy_score(&mut rng, source, n_phonemes)?;
            let w = render_score(&score, source, spec.sample_rate, spec.hop, &mut rng)?;
            let id = format!("{}_{i:02}", source.domain());
            let human = source == ToySource::Human;
            let row = ManifestRow {
                audio_path: format!("audio/{id}.wav").into(),
                score_path: human.then(|| format!("scores/{id}.txt").into()),
                id,
                domain: source.domain().into(),
                annotated: human,
                embedding_path: None,
                split: split_for(i, count),
            };
            out.push((row, w, score));
        }
    }
    Ok(out)
}

/// Writes `audio/`, `scores/` and `manifest.jsonl` under `dir`.
pub fn write_toy_corpus(dir: impl AsRef<Path>, spec: &ToyCorpusSpec, phoneme_set: &[String]) -> Result<Manifest> {
    let dir = dir.as_ref();
    for sub in ["audio", "scores"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rows = Vec::new();
    for (row, w, score) in toy_clips(spec, phoneme_set.len())? {
        write_wav(&w, dir.join(&row.audio_path))?;
        if let Some(s) = &row.score_path {
            score.write(dir.join(s), phoneme_set)?;
        }
        rows.push(row);
    }
    let m = Manifest::new(rows, dir)?;
    m.write(dir.join("manifest.jsonl"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pitch::{estimate_f0, PitchConfig};

    #[test]
    fn clips_match_scores_and_are_deterministic() {
        let spec = ToyCorpusSpec::default();
        let a = toy_clips(&spec, 15).unwrap();
        let b = toy_clips(&spec, 15).unwrap();
        assert_eq!(a.len(), 20);
        for ((ra, wa, sa), (_, wb, _)) in a.iter().zip(&b) {
            assert_eq!(wa, wb);
            assert_eq!(wa.len(), sa.total_frames() * 320);
            assert!(wa.samples().iter().all(|v| v.abs() < 1.0), "{}", ra.id);
        }
        assert_eq!(a.iter().filter(|c| c.0.split == Split::Test).count(), 4);
    }

    #[test]
    fn sung_notes_carry_their_pitch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = PitchConfig::default();
        for source in [ToySource::Human, ToySource::Instrumental, ToySource::Bird, ToySource::General] {
            let score = toy_score(&mut rng, source, 15).unwrap();
            let w = render_score(&score, source, 16000, 320, &mut rng).unwrap();
            let f0 = estimate_f0(&w, &cfg).unwrap();
            let (mut t, mut hits, mut total) = (0, 0, 0);
            for e in &score.entries {
                if let Some(n) = e.note {
                    // interior frames only: edges straddle note changes
                    for k in t + 2..t + e.duration - 1 {
                        total += 1;
                        if f0.voiced[k] && ((f0.f0_hz[k] as f64) / midi_hz(n) - 1.0).abs() < 0.06 {
                            hits += 1;
                        }
                    }
                }
                t += e.duration;
            }
            assert!(hits as f64 >= 0.9 * total as f64, "{source:?}: {hits}/{total}");
        }
    }

    #[test]
    fn written_corpus_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let phonemes: Vec<String> = crate::stage1::Stage1Config::default().phoneme_set;
        let spec = ToyCorpusSpec {
            counts: vec![(ToySource::Human, 2), (ToySource::Bird, 1)],
            ..ToyCorpusSpec::default()
        };
        let m = write_toy_corpus(dir.path(), &spec, &phonemes).unwrap();
        let back = Manifest::read(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.rows, m.rows);
        let s = Score::read(back.resolve(back.rows[0].score_path.as_ref().unwrap()), &phonemes).unwrap();
        let w = crate::dsp::read_wav(back.resolve(&back.rows[0].audio_path)).unwrap();
        assert_eq!(w.len(), s.total_frames() * 320);
    }
}
