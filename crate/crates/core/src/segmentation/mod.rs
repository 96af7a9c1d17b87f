//! Energy-based silence detection and recursive splitting of long
//! recordings into clips, followed by an F0-validity filter.

use serde::{Deserialize, Serialize};

use crate::dsp::wav::Waveform;
use crate::error::{Error, Result};
use crate::pitch::{estimate_f0, is_valid_f0, PitchConfig};

/// RMS analysis window.
const RMS_WINDOW_MS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    pub silence_threshold_db: f32,
    pub min_silence_ms: u32,
    pub max_clip_s: f32,
    pub resegment_above_s: f32,
    pub max_iterations: u32,
    pub threshold_step_db: f32,
    pub min_silence_step_ms: i32,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            silence_threshold_db: -40.0,
            min_silence_ms: 300,
            max_clip_s: 30.0,
            resegment_above_s: 15.0,
            max_iterations: 3,
            threshold_step_db: 5.0,
            min_silence_step_ms: -100,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::Config("segmentation.max_iterations must be >= 1".into()));
        }
        if !(self.resegment_above_s < self.max_clip_s) || self.resegment_above_s <= 0.0 {
            return Err(Error::Config("segmentation.resegment_above_s must be positive and below max_clip_s".into()));
        }
        Ok(())
    }

    /// Threshold and minimum silence for pass `pass` (0-based).
    pub fn pass_params(&self, pass: u32) -> (f32, u32) {
        let thr = self.silence_threshold_db + pass as f32 * self.threshold_step_db;
        let min_ms = self.min_silence_ms as i64 + pass as i64 * self.min_silence_step_ms as i64;
        (thr, min_ms.max(RMS_WINDOW_MS as i64) as u32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub source_id: String,
    pub start_sample: usize,
    pub end_sample: usize,
    pub waveform: Waveform,
    /// Splitting pass (0-based) that produced this clip.
    pub pass: u32,
}

impl Segment {
    pub fn duration_s(&self) -> f64 {
        (self.end_sample - self.start_sample) as f64 / self.waveform.sample_rate() as f64
    }

    /// `<source_id>_<start_sample>`.
    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.source_id, self.start_sample)
    }
}

/// Silent intervals `[start, end)` in samples: maximal runs of 10 ms RMS
/// windows below `threshold_db` (dBFS) lasting at least `min_silence_ms`.
pub fn detect_silence(w: &Waveform, threshold_db: f32, min_silence_ms: u32) -> Vec<(usize, usize)> {
    let sr = w.sample_rate() as f64;
    let win = ((sr * RMS_WINDOW_MS / 1000.0).round() as usize).max(1);
    let x = w.samples();
    let min_windows = ((min_silence_ms as f64 / RMS_WINDOW_MS).ceil() as usize).max(1);
    let thr = 10f64.powf(threshold_db as f64 / 20.0);
    let silent: Vec<bool> = x
        .chunks(win)
        .map(|c| {
            let e = c.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / c.len() as f64;
            e.sqrt() < thr
        })
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < silent.len() {
        if !silent[i] {
            i += 1;
            continue;
        }
        let s = i;
        while i < silent.len() && silent[i] {
            i += 1;
        }
        let covered = (i * win).min(x.len()) - s * win;
        if i - s >= min_windows || covered as f64 >= min_silence_ms as f64 * sr / 1000.0 {
            out.push((s * win, (i * win).min(x.len())));
        }
    }
    out
}

/// Splits at silence midpoints, trims silence at span ends, and recursively
/// re-splits pieces longer than `resegment_above_s` with progressively more
/// sensitive parameters. Pieces longer than `max_clip_s` after the last pass
/// are dropped.
pub fn segment_recording(w: &Waveform, source_id: &str, cfg: &SegmentationConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    let mut out = Vec::new();
    split_span(w, source_id, cfg, 0, w.len(), 0, &mut out)?;
    Ok(out)
}

fn split_span(w: &Waveform, id: &str, cfg: &SegmentationConfig, a: usize, b: usize, pass: u32, out: &mut Vec<Segment>) -> Result<()> {
    let sr = w.sample_rate() as f64;
    let (thr, min_ms) = cfg.pass_params(pass);
    let span = w.slice(a, b)?;
    let silences: Vec<(usize, usize)> = detect_silence(&span, thr, min_ms)
        .into_iter()
        .map(|(s, e)| (s + a, e + a))
        .collect();

    let mut pieces = Vec::new();
    let mut cur = a;
    for &(s, e) in &silences {
        if s == a {
            cur = e;
        } else if e == b {
            pieces.push((cur, s));
            cur = b;
        } else {
            let mid = (s + e) / 2;
            pieces.push((cur, mid));
            cur = mid;
        }
    }
    if cur < b {
        pieces.push((cur, b));
    }

    for (s, e) in pieces {
        if e <= s || silences.iter().any(|&(ss, se)| ss <= s && e <= se) {
            continue;
        }
        let dur = (e - s) as f64 / sr;
        if dur > cfg.resegment_above_s as f64 && pass + 1 < cfg.max_iterations {
            split_span(w, id, cfg, s, e, pass + 1, out)?;
        } else if dur <= cfg.max_clip_s as f64 {
            out.push(Segment {
                source_id: id.to_string(),
                start_sample: s,
                end_sample: e,
                waveform: w.slice(s, e)?,
                pass,
            });
        } else {
            log::debug!("{id}: dropping {dur:.1} s piece at sample {s} after {} passes", pass + 1);
        }
    }
    Ok(())
}

/// Keeps segments with at least one voiced frame. Segments too short for
/// pitch analysis count as unvoiced.
pub fn filter_by_f0(segments: Vec<Segment>, cfg: &PitchConfig) -> Result<Vec<Segment>> {
    let mut kept = Vec::with_capacity(segments.len());
    for seg in segments {
        match estimate_f0(&seg.waveform, cfg) {
            Ok(c) if is_valid_f0(&c) => kept.push(seg),
            Ok(_) | Err(Error::TooShort(_)) => log::debug!("{}: no voiced frames, removed", seg.file_stem()),
            Err(e) => return Err(e),
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const SR: u32 = 16000;

    fn tone(secs: f64, amp: f32) -> Vec<f32> {
        let n = (secs * SR as f64).round() as usize;
        (0..n)
            .map(|i| amp * (std::f32::consts::TAU * 220.0 * i as f32 / SR as f32).sin())
            .collect()
    }

    fn wave(parts: &[Vec<f32>]) -> Waveform {
        Waveform::new(parts.concat(), SR).unwrap()
    }

    #[test]
    fn all_zero_is_one_interval() {
        let w = Waveform::new(vec![0.0; 16000], SR).unwrap();
        assert_eq!(detect_silence(&w, -40.0, 300), vec![(0, 16000)]);
    }

    #[test]
    fn full_scale_sine_has_no_silence() {
        assert!(detect_silence(&wave(&[tone(2.0, 1.0)]), -40.0, 300).is_empty());
    }

    #[test]
    fn gap_is_located_within_10ms() {
        let w = wave(&[tone(1.0, 0.5), vec![0.0; 8000], tone(1.0, 0.5)]);
        let s = detect_silence(&w, -40.0, 300);
        assert_eq!(s.len(), 1);
        assert!((s[0].0 as i64 - 16000).abs() <= 160 && (s[0].1 as i64 - 24000).abs() <= 160);
    }

    #[test]
    fn short_gap_is_ignored() {
        let w = wave(&[tone(1.0, 0.5), vec![0.0; 1600], tone(1.0, 0.5)]);
        assert!(detect_silence(&w, -40.0, 300).is_empty());
    }

    #[test]
    fn continuous_five_seconds_is_one_segment() {
        let w = wave(&[tone(5.0, 0.5)]);
        let segs = segment_recording(&w, "a", &SegmentationConfig::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].start_sample, segs[0].end_sample), (0, w.len()));
    }

    #[test]
    fn forty_seconds_without_silence_is_discarded() {
        let w = wave(&[tone(40.0, 0.5)]);
        assert!(segment_recording(&w, "a", &SegmentationConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn graded_silence_needs_second_pass() {
        // the gap sits at about -38 dBFS: above the first-pass threshold
        // (-40 dB) but below the second (-35 dB)
        let gap = tone(0.5, 10f32.powf(-38.0 / 20.0) * std::f32::consts::SQRT_2);
        let w = wave(&[tone(17.0, 0.5), gap, tone(17.5, 0.5)]);
        let cfg = SegmentationConfig::default();
        assert!(detect_silence(&w, cfg.pass_params(0).0, cfg.pass_params(0).1).is_empty());
        let segs = segment_recording(&w, "g", &cfg).unwrap();
        assert!(segs.len() >= 2, "{segs:?}");
        assert!(segs.iter().all(|s| s.duration_s() <= 30.0 && s.pass >= 1 && s.pass < 3));
    }

    #[test]
    fn silence_at_ends_is_trimmed_and_pieces_ordered() {
        let w = wave(&[vec![0.0; 8000], tone(1.0, 0.5), vec![0.0; 8000], tone(2.0, 0.5), vec![0.0; 8000]]);
        let segs = segment_recording(&w, "t", &SegmentationConfig::default()).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].start_sample, 8000);
        assert_eq!(segs[0].end_sample, segs[1].start_sample);
        assert_eq!(segs[1].end_sample, w.len() - 8000);
        assert_eq!(segs[0].file_stem(), "t_8000");
    }

    #[test]
    fn f0_filter_drops_noise_keeps_sine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0f32, 0.3).unwrap();
        let noise: Vec<f32> = (0..16000).map(|_| n.sample(&mut rng)).collect();
        let mk = |s: Vec<f32>, id: &str| Segment {
            source_id: id.into(),
            start_sample: 0,
            end_sample: s.len(),
            waveform: Waveform::new(s, SR).unwrap(),
            pass: 0,
        };
        let kept = filter_by_f0(vec![mk(noise, "n"), mk(tone(1.0, 0.5), "s")], &PitchConfig::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].source_id, "s");
        assert!(filter_by_f0(vec![], &PitchConfig::default()).unwrap().is_empty());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn segments_are_ordered_bounded_and_disjoint(
            layout in proptest::collection::vec((0.05f64..3.0, 0.0f64..1.0), 1..6),
        ) {
            let mut parts = Vec::new();
            for (t, g) in layout {
                parts.push(tone(t, 0.5));
                parts.push(vec![0.0; (g * SR as f64) as usize]);
            }
            let w = wave(&parts);
            let cfg = SegmentationConfig { resegment_above_s: 1.5, max_clip_s: 2.5, ..Default::default() };
            let segs = segment_recording(&w, "p", &cfg).unwrap();
            let mut prev = 0;
            for s in &segs {
                proptest::prop_assert!(s.start_sample >= prev && s.start_sample < s.end_sample && s.end_sample <= w.len());
                proptest::prop_assert!(s.duration_s() <= 2.5 && s.pass < 3);
                prev = s.end_sample;
            }
        }
    }
}
