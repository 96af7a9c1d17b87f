use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dsp::{write_wav, FrameSpec, Waveform};
use crate::pitch::{F0Contour, PitchConfig};
use crate::representation::{write_embedding, TimbreEmbedder, TimbreEmbedding};

fn spec() -> FrameSpec {
    FrameSpec::new(80, 160, 16000).unwrap()
}

fn contour(f0: Vec<f32>) -> F0Contour {
    F0Contour::from_hz(f0, spec()).unwrap()
}

fn random_contour(rng: &mut ChaCha8Rng, n: usize) -> F0Contour {
    contour((0..n).map(|_| if rng.random::<f32>() < 0.3 { 0.0 } else { rng.random_range(60.0..900.0) }).collect())
}

fn tone(f: f64, secs: f64, amp: f32) -> Waveform {
    let n = (16000.0 * secs) as usize;
    let x = (0..n)
        .map(|i| {
            let t = i as f64 / 16000.0;
            let s: f64 = (1..=4).map(|h| (2.0 * std::f64::consts::PI * f * h as f64 * t).sin() / h as f64).sum();
            amp * 0.4 * s as f32
        })
        .collect();
    Waveform::new(x, 16000).unwrap()
}

fn noise(seed: u64, n: usize, amp: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| amp * rng.random_range(-1.0f32..1.0)).collect()
}

#[test]
fn lf0_rmse_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (a, b) = (random_contour(&mut rng, 10), random_contour(&mut rng, 10));
        let pairs: Vec<(f64, f64)> = a
            .f0_hz
            .iter()
            .zip(&b.f0_hz)
            .filter(|(x, y)| **x > 0.0 && **y > 0.0)
            .map(|(&x, &y)| (x as f64, y as f64))
            .collect();
        let got = lf0_rmse(&a, &b);
        if pairs.is_empty() {
            assert_eq!(got, None);
            continue;
        }
        let mut acc = 0.0;
        for (x, y) in &pairs {
            acc += (x.ln() - y.ln()) * (x.ln() - y.ln());
        }
        let want = (acc / pairs.len() as f64).sqrt();
        assert!((got.unwrap() - want).abs() < 1e-9);
        assert!((lf0_rmse(&b, &a).unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn lf0_rmse_trivial_cases() {
    let a = contour(vec![0.0, 110.0, 220.0, 0.0, 440.0]);
    assert_eq!(lf0_rmse(&a, &a), Some(0.0));
    let e = std::f32::consts::E;
    let b = contour(a.f0_hz.iter().map(|v| v * e).collect());
    assert!((lf0_rmse(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(lf0_rmse(&a, &contour(vec![0.0; 5])), None);
}

#[test]
fn lf0_rmse_trims_to_shorter() {
    let a = contour(vec![100.0; 6]);
    let b = contour(vec![100.0, 100.0, 100.0, 100.0]);
    assert_eq!(lf0_rmse(&a, &b), Some(0.0));
    assert_eq!(vuv_error(&a, &b), 0.0);
}

#[test]
fn vuv_error_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let (a, b) = (random_contour(&mut rng, n), random_contour(&mut rng, n));
        let mut diff = 0;
        for i in 0..n {
            if (a.f0_hz[i] > 0.0) != (b.f0_hz[i] > 0.0) {
                diff += 1;
            }
        }
        assert_eq!(vuv_error(&a, &b), 100.0 * diff as f64 / n as f64);
    }
    let a = contour(vec![0.0, 200.0, 0.0, 300.0]);
    let b = contour(vec![150.0, 0.0, 150.0, 0.0]);
    assert_eq!(vuv_error(&a, &a), 0.0);
    assert_eq!(vuv_error(&a, &b), 100.0);
}

#[test]
fn sim_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v: Vec<f32> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
    let e = TimbreEmbedding::new(v.clone(), "a").unwrap();
    let neg = TimbreEmbedding::new(v.iter().map(|x| -x).collect(), "b").unwrap();
    assert_eq!(sim(&e, &e).unwrap(), 1.0);
    assert_eq!(sim(&e, &neg).unwrap(), -1.0);
    let basis = |i: usize| {
        let mut b = vec![0.0f32; 192];
        b[i] = 1.0;
        TimbreEmbedding::new(b, "basis").unwrap()
    };
    assert_eq!(sim(&basis(0), &basis(7)).unwrap(), 0.0);
    for _ in 0..50 {
        let a: Vec<f32> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..192 {
            dot += a[i] as f64 * b[i] as f64;
            na += (a[i] as f64).powi(2);
            nb += (b[i] as f64).powi(2);
        }
        let want = dot / (na.sqrt() * nb.sqrt());
        let ea = TimbreEmbedding::new(a, "a").unwrap();
        let eb = TimbreEmbedding::new(b, "b").unwrap();
        assert!((sim(&ea, &eb).unwrap() - want).abs() < 1e-9);
        assert_eq!(sim(&ea, &eb).unwrap(), sim(&eb, &ea).unwrap());
    }
}

#[test]
fn mcd_from_cepstra_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let a: Vec<Vec<f64>> = (0..3).map(|_| (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|_| (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut total = 0.0;
        for t in 0..3 {
            let mut s = 0.0;
            for d in 0..24 {
                s += (a[t][d] - b[t][d]) * (a[t][d] - b[t][d]);
            }
            total += s.sqrt();
        }
        let want = 10.0 / 10f64.ln() * 2f64.sqrt() * total / 3.0;
        assert!((mcd_from_cepstra(&a, &b).unwrap() - want).abs() < 1e-9);
        assert!((mcd_from_cepstra(&b, &a).unwrap() - want).abs() < 1e-9);
    }
    assert_eq!(mcd_from_cepstra(&[], &[vec![0.0; 24]]).map_err(|e| matches!(e, Error::TooShort(_))).unwrap_err(), true);
}

#[test]
fn mel_cepstrum_is_dct_of_log_mel() {
    let cfg = EvalConfig::default();
    let w = tone(220.0, 0.5, 1.0);
    let c = mel_cepstrum(&w, &cfg).unwrap();
    let hop = 320;
    let mel = crate::dsp::log_mel(
        &w,
        &FrameSpec::new(hop, 2 * hop, 16000).unwrap(),
        1024,
        &crate::dsp::MelConfig { n_mels: 40, ..Default::default() },
    )
    .unwrap();
    assert_eq!(c.len(), mel.n_frames);
    let m = 40.0f64;
    for t in [0, 3, mel.n_frames - 1] {
        for k in 1..=24 {
            let mut s = 0.0;
            for n in 0..40 {
                s += mel.get(t, n) as f64 * ((std::f64::consts::PI / m) * (n as f64 + 0.5) * k as f64).cos();
            }
            assert!((c[t][k - 1] - s * (2.0 / m).sqrt()).abs() < 1e-9);
        }
    }
}

#[test]
fn mcd_identity_and_gain_invariance() {
    let cfg = EvalConfig::default();
    let w = tone(330.0, 0.5, 1.0);
    assert_eq!(mcd(&w, &w, &cfg).unwrap(), 0.0);
    let x = noise(9, 8000, 0.3);
    let a = Waveform::new(x.clone(), 16000).unwrap();
    let b = Waveform::new(x.iter().map(|v| 2.0 * v).collect(), 16000).unwrap();
    assert!(mcd(&a, &b, &cfg).unwrap() < 1e-3);
    assert!(mcd(&a, &tone(330.0, 0.5, 1.0), &cfg).unwrap() > 1.0);
}

#[test]
fn mcd_too_short() {
    let w = Waveform::new(vec![0.1; 100], 16000).unwrap();
    assert!(matches!(mcd(&w, &w, &EvalConfig::default()), Err(Error::TooShort(_))));
}

#[test]
fn config_validation() {
    assert!(EvalConfig::default().validate().is_ok());
    let bad = EvalConfig { mcd_coeffs: 40, ..EvalConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

fn write_pairs(dir: &std::path::Path, rows: &[PairRow]) -> std::path::PathBuf {
    let p = dir.join("pairs.jsonl");
    let text: Vec<String> = rows.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    std::fs::write(&p, text.join("\n")).unwrap();
    p
}

fn row(id: &str, hyp: &str, reference: Option<&str>, metrics: &[&str]) -> PairRow {
    PairRow {
        id: id.into(),
        hyp_path: hyp.into(),
        ref_path: reference.map(Into::into),
        ref_embedding_path: None,
        metrics: metrics.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn self_evaluation_gives_identity_scores() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for (i, f) in [140.0, 260.0, 410.0].into_iter().enumerate() {
        let name = format!("c{i}.wav");
        let mut w = tone(f, 0.6, 1.0);
        let n = noise(i as u64, w.len(), 0.01);
        w = Waveform::new(w.samples().iter().zip(&n).map(|(a, b)| a + b).collect(), 16000).unwrap();
        write_wav(&w, dir.path().join(&name)).unwrap();
        rows.push(row(&format!("c{i}"), &name, Some(&name), &report::METRICS));
    }
    let pairs = write_pairs(dir.path(), &rows);
    let rep = evaluate_manifest(&pairs, &TimbreEmbedder::Builtin, &PitchConfig::default(), &EvalConfig::default()).unwrap();
    assert_eq!(rep.records.len(), 3);
    for (r, want) in rep.records.iter().zip(["c0", "c1", "c2"]) {
        assert_eq!(r.id, want);
        assert_eq!(r.error, None);
        assert_eq!((r.lf0_rmse, r.vuv_pct, r.mcd, r.sim), (Some(0.0), Some(0.0), Some(0.0), Some(1.0)));
    }
    assert_eq!(rep.aggregates.failed, 0);
    assert_eq!(rep.aggregates.f0_nan_pct, 0.0);
}

#[test]
fn nan_rate_counts_silent_hyps_and_failures_continue() {
    let dir = tempfile::tempdir().unwrap();
    write_wav(&tone(200.0, 0.5, 1.0), dir.path().join("ref.wav")).unwrap();
    write_wav(&Waveform::new(vec![0.0; 8000], 16000).unwrap(), dir.path().join("silent.wav")).unwrap();
    let e = TimbreEmbedding::new((0..192).map(|i| (i as f32).sin()).collect(), "t").unwrap();
    write_embedding(&e, dir.path().join("t.nhte")).unwrap();
    let mut with_emb = row("emb", "ref.wav", None, &["sim"]);
    with_emb.ref_embedding_path = Some("t.nhte".into());
    let rows = vec![
        row("a", "ref.wav", Some("ref.wav"), &["lf0_rmse"]),
        row("b", "silent.wav", Some("ref.wav"), &["lf0_rmse"]),
        row("c", "silent.wav", Some("ref.wav"), &["lf0_rmse", "vuv"]),
        row("d", "ref.wav", Some("ref.wav"), &["lf0_rmse"]),
        row("missing", "nope.wav", Some("ref.wav"), &["lf0_rmse"]),
        with_emb,
    ];
    let pairs = write_pairs(dir.path(), &rows);
    let rep = evaluate_manifest(&pairs, &TimbreEmbedder::Builtin, &PitchConfig::default(), &EvalConfig::default()).unwrap();
    let agg = &rep.aggregates;
    assert_eq!(agg.rows, 6);
    assert_eq!(agg.failed, 1);
    assert!(rep.records[4].error.is_some());
    assert_eq!(agg.lf0_rmse_count, 2);
    assert_eq!(agg.f0_nan_pct, 50.0);
    assert_eq!(rep.records[2].vuv_pct.map(|v| v > 50.0), Some(true));
    assert!(rep.records[5].sim.unwrap().abs() <= 1.0);
}

#[test]
fn report_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let rep = MetricReport::from_records(vec![
        PairRecord {
            id: "x,1".into(),
            lf0_rmse: Some(0.1234567890123),
            vuv_pct: Some(12.5),
            sim: Some(-0.25),
            mcd: Some(3.0),
            f0_nan: false,
            error: None,
        },
        PairRecord {
            id: "y".into(),
            f0_nan: true,
            error: Some("io: \"quoted\" path".into()),
            ..PairRecord::default()
        },
    ]);
    let p = dir.path().join("report.csv");
    write_report_csv(&rep, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("id,lf0_rmse,vuv_pct,sim,mcd,f0_nan,error\n"));
    assert_eq!(read_report_csv(&p).unwrap(), rep);
    write_report_json(&rep, dir.path().join("report.json")).unwrap();
    let back: MetricReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back, rep);
}

#[test]
fn unknown_metric_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = write_pairs(dir.path(), &[row("a", "a.wav", None, &["mos"])]);
    let r = evaluate_manifest(&pairs, &TimbreEmbedder::Builtin, &PitchConfig::default(), &EvalConfig::default());
    assert!(matches!(r, Err(Error::Format(_))));
}
