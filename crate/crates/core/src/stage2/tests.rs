use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dsp::{log_mel, FrameSpec, MelConfig};
use crate::numerics::checkpoint::{decode_params, encode_params};
use crate::pitch::F0Contour;
use crate::representation::ContentTokens;

pub(crate) fn tiny_gen_cfg(factors: Vec<usize>) -> GeneratorConfig {
    GeneratorConfig {
        token_dim: 8,
        f0_dim: 4,
        upsample_factors: factors,
        resblock_kernels: vec![3],
        resblock_dilations: vec![1, 3],
        base_channels: 8,
        pre_kernel: 3,
        post_kernel: 3,
    }
}

pub(crate) fn tiny_cfg() -> Stage2Config {
    Stage2Config {
        generator: tiny_gen_cfg(vec![8, 5, 4, 2]),
        discriminator: DiscriminatorConfig {
            periods: vec![2, 3],
            fft_sizes: vec![64, 128],
            n_bands: 2,
            period_channels: vec![4, 8],
            spectral_channels: 4,
        },
        mel_scales: vec![(64, 10), (128, 16)],
        crop_frames: 4,
        ..Stage2Config::default()
    }
}

pub(crate) fn toy_z(t: usize, hop: usize, sr: u32, rng: &mut impl Rng) -> FrameRepresentation {
    let toks = vec![
        (0..t).map(|_| rng.random_range(0..6u32)).collect(),
        (0..t).map(|_| rng.random_range(0..4u32)).collect(),
    ];
    let tokens = ContentTokens::new(vec![5, 8], vec![6, 4], toks).unwrap();
    let f0: Vec<f32> = (0..t).map(|i| if i % 5 == 4 { 0.0 } else { 150.0 + 10.0 * i as f32 }).collect();
    let spec = FrameSpec::new(hop, hop.max(4 * hop / 2), sr).unwrap();
    FrameRepresentation::new(tokens, F0Contour::from_hz(f0, spec).unwrap()).unwrap()
}

pub(crate) fn toy_embedding(rng: &mut impl Rng) -> TimbreEmbedding {
    TimbreEmbedding::new((0..EMBED_DIM).map(|_| rng.random_range(-1.0..1.0f32)).collect(), "e").unwrap()
}

pub(crate) fn toy_example(id: &str, t: usize, seed: u64) -> Stage2Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = toy_z(t, 320, 16000, &mut rng);
    let samples: Vec<f32> = (0..t * 320)
        .map(|n| 0.5 * (2.0 * std::f32::consts::PI * 220.0 * n as f32 / 16000.0).sin())
        .collect();
    Stage2Example {
        id: id.into(),
        z,
        waveform: Waveform::new(samples, 16000).unwrap(),
        embedding: toy_embedding(&mut rng),
    }
}

#[test]
fn output_length_is_frames_times_hop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for factors in [vec![8, 5, 4, 2], vec![7, 7, 6, 3], vec![2, 3], vec![5]] {
        let hop: usize = factors.iter().product();
        let gen = Generator::new(tiny_gen_cfg(factors), vec![5, 8], vec![6, 4], 16000.max(hop as u32 * 50)).unwrap();
        let store = gen.init_params(1).unwrap();
        for _ in 0..3 {
            let t = rng.random_range(1..6);
            let z = toy_z(t, hop, gen.sample_rate, &mut rng);
            let w = gen.vocode(&store, &z, &toy_embedding(&mut rng)).unwrap();
            assert_eq!(w.len(), t * hop);
            assert!(w.samples().iter().all(|v| v.abs() < 1.0));
        }
    }
}

#[test]
fn upsample_geometry_is_exact() {
    for s in 1..12 {
        let (k, p) = GeneratorConfig::upsample_geometry(s);
        for len in 1..5 {
            assert_eq!(crate::numerics::ops::conv_transpose1d_out_len(len, k, s, p), Some(len * s));
        }
    }
}

#[test]
fn parameter_counts_follow_formula() {
    let cfg = tiny_cfg();
    let gen = Generator::new(cfg.generator.clone(), vec![5, 8], vec![6, 4], 16000).unwrap();
    assert_eq!(gen.init_params(0).unwrap().num_scalars(), gen.param_count());
    let full = Generator::new(GeneratorConfig::default(), vec![5, 8], vec![64, 64], 16000).unwrap();
    assert_eq!(full.init_params(0).unwrap().num_scalars(), full.param_count());
    for dcfg in [cfg.discriminator.clone(), DiscriminatorConfig::default()] {
        let d = MultiDiscriminator::new(dcfg.clone()).unwrap();
        assert_eq!(d.init_params(0).unwrap().num_scalars(), dcfg.param_count().unwrap());
    }
}

#[test]
fn conditioning_shape_weights_and_timbre_sensitivity() {
    let gen = Generator::new(tiny_cfg().generator, vec![5, 8], vec![6, 4], 16000).unwrap();
    let store = gen.init_params(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = toy_z(7, 320, 16000, &mut rng);
    let e1 = toy_embedding(&mut rng);
    let e2 = toy_embedding(&mut rng);
    let mut g = Graph::new();
    let h = gen.condition(&mut g, Ctx::frozen(&store), &z, &e1).unwrap();
    assert_eq!(g.shape(h), &[7, 12]);
    let w = layer_weights(&store).unwrap();
    assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    let a = gen.vocode(&store, &z, &e1).unwrap();
    let b = gen.vocode(&store, &z, &e2).unwrap();
    let a2 = gen.vocode(&store, &z, &e1).unwrap();
    assert_eq!(a.samples(), a2.samples());
    let diff: f32 = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-3);
    let bad = TimbreEmbedding::new(vec![1.0; 8], "x").unwrap();
    let mut g = Graph::new();
    assert!(matches!(gen.condition(&mut g, Ctx::frozen(&store), &z, &bad), Err(Error::Shape(_))));
}

#[test]
fn mel_loss_gradient_reaches_timbre_projection() {
    let cfg = tiny_cfg();
    let gen = Generator::new(cfg.generator.clone(), vec![5, 8], vec![6, 4], 16000).unwrap();
    let mut store = gen.init_params(3).unwrap();
    let ex = toy_example("a", 4, 9);
    let mel = MelLoss::new(16000, &cfg.mel_scales).unwrap();
    let loss_of = |s: &ParameterStore, trainable: bool| {
        let mut g = Graph::new();
        let ctx = if trainable { Ctx::trainable(s) } else { Ctx::frozen(s) };
        let y = gen.forward(&mut g, ctx, &ex.z, &ex.embedding).unwrap();
        let r = g.constant(&[1, 1, ex.waveform.len()], ex.waveform.samples().to_vec()).unwrap();
        let l = mel.loss(&mut g, r, y).unwrap();
        (g, l)
    };
    let (mut g, l) = loss_of(&store, true);
    g.backward(l).unwrap();
    g.accumulate_grads(&mut store);
    let grad = store.get("gen.timbre.w").unwrap().grad().unwrap().to_vec();
    let i = (0..grad.len()).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap();
    assert!(grad[i].abs() > 0.0);
    let h = 1e-2;
    let eval = |delta: f32| {
        let mut s = store.clone();
        s.get_mut("gen.timbre.w").unwrap().data_mut()[i] += delta;
        let (g, l) = loss_of(&s, false);
        g.scalar(l) as f64
    };
    let numeric = (eval(h) - eval(-h)) / (2.0 * h as f64);
    assert!((numeric - grad[i] as f64).abs() < 0.1 * grad[i].abs() as f64 + 1e-3, "{numeric} vs {}", grad[i]);
}

#[test]
fn discriminator_branches_and_short_input() {
    let cfg = tiny_cfg().discriminator;
    let d = MultiDiscriminator::new(cfg.clone()).unwrap();
    let store = d.init_params(0).unwrap();
    let mut g = Graph::new();
    let x: Vec<f32> = (0..1280).map(|i| (i as f32 * 0.05).sin()).collect();
    let xv = g.constant(&[1, 1, 1280], x.clone()).unwrap();
    let out = d.forward(&mut g, Ctx::frozen(&store), xv).unwrap();
    assert_eq!(out.len(), cfg.periods.len() + cfg.fft_sizes.len() * cfg.n_bands);
    let mut g2 = Graph::new();
    let xv2 = g2.constant(&[1, 1, 1280], x).unwrap();
    let out2 = d.forward(&mut g2, Ctx::frozen(&store), xv2).unwrap();
    for (a, b) in out.iter().zip(&out2) {
        assert_eq!(g.value(a.score), g2.value(b.score));
    }
    let short = g.constant(&[1, 1, 10], vec![0.1; 10]).unwrap();
    assert!(matches!(d.forward(&mut g, Ctx::frozen(&store), short), Err(Error::TooShort(_))));
    let bad = DiscriminatorConfig { periods: vec![2, 4], ..cfg };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn identical_inputs_give_zero_matching_terms() {
    let cfg = tiny_cfg();
    let d = MultiDiscriminator::new(cfg.discriminator.clone()).unwrap();
    let ds = d.init_params(5).unwrap();
    let mel = MelLoss::new(16000, &cfg.mel_scales).unwrap();
    let w = toy_example("r", 4, 1).waveform;
    let l = gan_losses(&w, &w, &d, &ds, &mel, GanLossWeights::default(), GanObjective::LeastSquares).unwrap();
    assert_eq!(l.fm, 0.0);
    assert_eq!(l.mel, 0.0);
    let zero = GanLossWeights { adv: 0.0, feature_match: 0.0, mel: 0.0 };
    let noise = Waveform::new((0..w.len()).map(|i| ((i * 7919) % 101) as f32 / 101.0 - 0.5).collect(), 16000).unwrap();
    let l = gan_losses(&w, &noise, &d, &ds, &mel, zero, GanObjective::LeastSquares).unwrap();
    assert_eq!(l.gen_total, 0.0);
    let short = Waveform::new(vec![0.0; 100], 16000).unwrap();
    assert!(matches!(
        gan_losses(&w, &short, &d, &ds, &mel, zero, GanObjective::LeastSquares),
        Err(Error::Shape(_))
    ));
}

/// Two branches: feature `a_b * x`, score `c_b * a_b * x`.
pub(crate) struct StubDisc {
    pub a: [f32; 2],
    pub c: [f32; 2],
}

impl Discriminator for StubDisc {
    fn n_branches(&self) -> usize {
        2
    }

    fn forward(&self, g: &mut Graph, _: Ctx, x: Var) -> Result<Vec<BranchOutput>> {
        (0..2)
            .map(|b| {
                let f = g.scale(x, self.a[b])?;
                let score = g.scale(f, self.c[b])?;
                Ok(BranchOutput { score, features: vec![f] })
            })
            .collect()
    }
}

pub(crate) fn stub_oracle(real: &[f32], fake: &[f32], stub: &StubDisc, scales: &[(usize, usize)], w: GanLossWeights) -> (f64, f64, f64, f64, f64) {
    let n = real.len() as f64;
    let (mut adv_g, mut adv_d, mut fm) = (0.0, 0.0, 0.0);
    for b in 0..2 {
        let k = (stub.a[b] * stub.c[b]) as f64;
        adv_g += fake.iter().map(|&f| (k * f as f64 - 1.0).powi(2)).sum::<f64>() / n;
        adv_d += real.iter().map(|&r| (k * r as f64 - 1.0).powi(2)).sum::<f64>() / n;
        adv_d += fake.iter().map(|&f| (k * f as f64).powi(2)).sum::<f64>() / n;
        fm += real.iter().zip(fake).map(|(&r, &f)| (stub.a[b] as f64 * (r - f) as f64).abs()).sum::<f64>() / n;
    }
    fm /= 2.0;
    let rw = Waveform::new(real.to_vec(), 16000).unwrap();
    let fw = Waveform::new(fake.to_vec(), 16000).unwrap();
    let mut mel = 0.0;
    for &(fft, m) in scales {
        let spec = FrameSpec::new(fft / 4, fft, 16000).unwrap();
        let mc = MelConfig { n_mels: m, ..MelConfig::default() };
        let a = log_mel(&rw, &spec, fft, &mc).unwrap();
        let b = log_mel(&fw, &spec, fft, &mc).unwrap();
        mel += a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.data.len() as f64;
    }
    let gen = w.adv as f64 * adv_g + w.feature_match as f64 * fm + w.mel as f64 * mel;
    (gen, adv_g, adv_d, fm, mel)
}

#[test]
fn stub_discriminator_matches_hand_computation() {
    let stub = StubDisc { a: [0.5, -1.5], c: [2.0, 0.25] };
    let scales = [(64, 10), (128, 16)];
    let mel = MelLoss::new(16000, &scales).unwrap();
    let real: Vec<f32> = (0..512).map(|i| 0.4 * (i as f32 * 0.07).sin()).collect();
    let fake: Vec<f32> = (0..512).map(|i| 0.3 * (i as f32 * 0.11).sin() + 0.05).collect();
    let rw = Waveform::new(real.clone(), 16000).unwrap();
    let fw = Waveform::new(fake.clone(), 16000).unwrap();
    let w = GanLossWeights::default();
    let l = gan_losses(&rw, &fw, &stub, &ParameterStore::new(), &mel, w, GanObjective::LeastSquares).unwrap();
    let (gen, adv_g, adv_d, fm, m) = stub_oracle(&real, &fake, &stub, &scales, w);
    let close = |a: f32, b: f64| (a as f64 - b).abs() <= 1e-6 * b.abs().max(1.0);
    assert!(close(l.adv_g, adv_g), "{} {adv_g}", l.adv_g);
    assert!(close(l.adv_d, adv_d), "{} {adv_d}", l.adv_d);
    assert!(close(l.fm, fm), "{} {fm}", l.fm);
    assert!(close(l.mel, m), "{} {m}", l.mel);
    assert!(close(l.gen_total, gen), "{} {gen}", l.gen_total);
}

#[test]
fn hinge_objective_signs() {
    let stub = StubDisc { a: [1.0, 1.0], c: [1.0, 1.0] };
    let mut g = Graph::new();
    let r = g.constant(&[4], vec![2.0; 4]).unwrap();
    let f = g.constant(&[4], vec![-2.0; 4]).unwrap();
    let ro = stub.forward(&mut g, Ctx::frozen(&ParameterStore::new()), r).unwrap();
    let fo = stub.forward(&mut g, Ctx::frozen(&ParameterStore::new()), f).unwrap();
    let d = loss::discriminator_loss(&mut g, &ro, &fo, GanObjective::Hinge).unwrap();
    assert_eq!(g.scalar(d), 0.0);
    let a = loss::generator_adv_loss(&mut g, &fo, GanObjective::Hinge).unwrap();
    assert_eq!(g.scalar(a), 4.0);
}

#[test]
fn seeded_steps_reproduce_and_resume() {
    let data = vec![toy_example("a", 6, 1), toy_example("b", 5, 2)];
    let run = |n: usize| {
        let mut tr = Stage2Trainer::new(tiny_cfg(), vec![5, 8], vec![6, 4], 16000, 7).unwrap();
        let losses: Vec<Stage2Losses> = (0..n).map(|_| tr.train_step(&data).unwrap()).collect();
        (tr, losses)
    };
    let (tr_a, la) = run(4);
    let (_, lb) = run(4);
    assert_eq!(la, lb);
    let (mut tr_c, _) = run(2);
    let restored = decode_params(&encode_params(&tr_c.checkpoint())).unwrap();
    let mut tr_d = Stage2Trainer::resume(tiny_cfg(), &restored, 7).unwrap();
    assert_eq!(tr_d.step, 2);
    for i in 2..4 {
        let lc = tr_c.train_step(&data).unwrap();
        let ld = tr_d.train_step(&data).unwrap();
        assert_eq!(lc, ld);
        assert_eq!(lc, la[i]);
    }
    assert_eq!(tr_a.step, 4);
}

#[test]
fn short_examples_are_skipped() {
    let mut tr = Stage2Trainer::new(tiny_cfg(), vec![5, 8], vec![6, 4], 16000, 7).unwrap();
    let short = toy_example("s", 2, 1);
    let long = toy_example("l", 6, 2);
    assert!(matches!(tr.step(&[&short]), Err(Error::Data(_))));
    let l = tr.step(&[&short, &long]).unwrap();
    assert!(l.mel.is_finite() && l.mel > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = random_crop(&long, 4, &mut rng).unwrap();
    assert_eq!(c.audio.len(), 4 * 320);
    assert_eq!(c.z.n_frames(), 4);
}
