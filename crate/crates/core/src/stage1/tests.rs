use super::*;
use crate::numerics::checkpoint::{decode_params, encode_params};

fn spec() -> FrameSpec {
    FrameSpec::new(320, 1024, 16000).unwrap()
}

fn tiny_cfg() -> Stage1Config {
    Stage1Config {
        encoder_layers: 1,
        decoder_layers: 1,
        dim: 8,
        heads: 2,
        max_relative_position: 4,
        predictor_hidden: 8,
        phoneme_set: ["SP", "a", "o"].iter().map(|s| s.to_string()).collect(),
        ..Stage1Config::default()
    }
}

fn tiny_model() -> Stage1Model {
    Stage1Model::new(tiny_cfg(), vec![5, 8], vec![4, 3]).unwrap()
}

/// Tokens are a function of the phoneme; F0 follows the note.
fn example(id: &str, entries: &[(usize, Option<u8>, usize)]) -> Stage1Example {
    let score = Score::new(
        entries.iter().map(|&(p, n, d)| ScoreEntry { phoneme: p, note: n, duration: d }).collect(),
        3,
    )
    .unwrap();
    let mut l0 = Vec::new();
    let mut l1 = Vec::new();
    let mut f0 = Vec::new();
    for &(p, n, d) in entries {
        for j in 0..d {
            l0.push(p as u32);
            l1.push(((p + j) % 3) as u32);
            f0.push(n.map_or(0.0, |m| 440.0 * 2f32.powf((m as f32 - 69.0) / 12.0)));
        }
    }
    let tokens = ContentTokens::new(vec![5, 8], vec![4, 3], vec![l0, l1]).unwrap();
    let z = FrameRepresentation::new(tokens, F0Contour::from_hz(f0, spec()).unwrap()).unwrap();
    Stage1Example::new(id, score, z).unwrap()
}

fn sample() -> Stage1Example {
    example("s", &[(1, Some(60), 2), (0, None, 1), (2, Some(64), 3)])
}

#[test]
fn length_regulate_repeats_rows() {
    let mut g = Graph::new();
    let h = g.constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let r = length_regulate(&mut g, h, &[2, 1, 3]).unwrap();
    assert_eq!(g.shape(r), &[6, 2]);
    assert_eq!(g.value(r), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0, 5.0, 6.0]);
    assert!(matches!(length_regulate(&mut g, h, &[2, 0, 1]), Err(Error::Config(_))));
    assert!(matches!(length_regulate(&mut g, h, &[2, 1]), Err(Error::Shape(_))));
}

#[test]
fn config_validation() {
    let mut c = tiny_cfg();
    c.dim = 7;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny_cfg();
    c.phoneme_set.retain(|p| p != "SP");
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    assert!(Stage1Config::reference().validate().is_ok());
}

#[test]
fn example_frame_mismatch_rejected() {
    let ex = sample();
    let short = Score::new(vec![ScoreEntry { phoneme: 1, note: Some(60), duration: 2 }], 3).unwrap();
    assert!(matches!(Stage1Example::new("x", short, ex.z), Err(Error::Data(_))));
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

#[test]
fn loss_matches_direct_computation() {
    let model = tiny_model();
    let store = model.init_params(3).unwrap();
    let ex = sample();
    let mut g = Graph::new();
    let out = model.forward_teacher(&mut g, Ctx::frozen(&store), &ex.score, &ex.z).unwrap();
    let (_, l) = stage1_loss(&mut g, &out, &Stage1Targets::from_example(&ex), &model.cfg).unwrap();

    let t = ex.z.n_frames();
    let mut ce = 0.0f64;
    for (layer, &lv) in out.token_logits.iter().enumerate() {
        let k1 = model.vocab[layer] + 1;
        let vals = g.value(lv);
        let mut s = 0.0;
        for i in 0..t {
            let ls = log_softmax(&vals[i * k1..(i + 1) * k1]);
            s -= ls[ex.z.tokens.tokens[layer][i] as usize];
        }
        ce += s / t as f64;
    }
    ce /= 2.0;
    let dur: f64 = g
        .value(out.log_durations_pred)
        .iter()
        .zip(ex.score.durations())
        .map(|(&p, d)| (p as f64 - (d as f64).ln()).abs())
        .sum::<f64>()
        / 3.0;
    let lf = log_f0(&ex.z.f0);
    let (mut pitch, mut n) = (0.0f64, 0);
    for i in 0..t {
        if ex.z.f0.voiced[i] {
            pitch += (g.value(out.log_f0_pred)[i] - lf[i]).abs() as f64;
            n += 1;
        }
    }
    pitch /= n as f64;
    assert!((l.out as f64 - ce).abs() < 1e-4, "{} {ce}", l.out);
    assert!((l.dur as f64 - dur).abs() < 1e-5);
    assert!((l.pitch as f64 - pitch).abs() < 1e-5);
    assert!((l.total as f64 - (ce + dur + pitch)).abs() < 1e-4);
    assert!(!l.no_voiced);
}

#[test]
fn all_unvoiced_pitch_term_is_zero_and_flagged() {
    let model = tiny_model();
    let store = model.init_params(3).unwrap();
    let ex = example("u", &[(0, None, 3), (1, None, 2)]);
    let mut g = Graph::new();
    let out = model.forward_teacher(&mut g, Ctx::frozen(&store), &ex.score, &ex.z).unwrap();
    let (_, l) = stage1_loss(&mut g, &out, &Stage1Targets::from_example(&ex), &model.cfg).unwrap();
    assert_eq!(l.pitch, 0.0);
    assert!(l.no_voiced);
}

#[test]
fn l1_onehot_output_loss_in_unit_range() {
    let mut cfg = tiny_cfg();
    cfg.output_loss = OutputLoss::L1OneHot;
    let model = Stage1Model::new(cfg, vec![5, 8], vec![4, 3]).unwrap();
    let store = model.init_params(1).unwrap();
    let ex = sample();
    let mut g = Graph::new();
    let out = model.forward_teacher(&mut g, Ctx::frozen(&store), &ex.score, &ex.z).unwrap();
    let (_, l) = stage1_loss(&mut g, &out, &Stage1Targets::from_example(&ex), &model.cfg).unwrap();
    assert!(l.out > 0.0 && l.out < 1.0);
}

fn total_loss(model: &Stage1Model, store: &ParameterStore, ex: &Stage1Example) -> f64 {
    let mut g = Graph::new();
    let out = model.forward_teacher(&mut g, Ctx::frozen(store), &ex.score, &ex.z).unwrap();
    let (_, l) = stage1_loss(&mut g, &out, &Stage1Targets::from_example(ex), &model.cfg).unwrap();
    l.total as f64
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let model = tiny_model();
    let mut store = model.init_params(11).unwrap();
    let ex = example("g", &[(1, Some(62), 2), (2, Some(65), 2)]);
    let mut g = Graph::new();
    let out = model.forward_teacher(&mut g, Ctx::trainable(&store), &ex.score, &ex.z).unwrap();
    let (loss, _) = stage1_loss(&mut g, &out, &Stage1Targets::from_example(&ex), &model.cfg).unwrap();
    g.backward(loss).unwrap();
    store.zero_grad();
    g.accumulate_grads(&mut store);

    let mut picks = Vec::new();
    for (name, t) in store.iter() {
        if let Some(gr) = t.grad() {
            for (i, &v) in gr.iter().enumerate() {
                if v.abs() > 0.01 {
                    picks.push((name.clone(), i, v));
                }
            }
        }
    }
    assert!(picks.len() >= 10);
    let stride = picks.len() / 10;
    let h = 1e-3f32;
    for (name, i, analytic) in picks.iter().step_by(stride).take(10) {
        let mut plus = store.clone();
        plus.get_mut(name).unwrap().data_mut()[*i] += h;
        let mut minus = store.clone();
        minus.get_mut(name).unwrap().data_mut()[*i] -= h;
        let numeric = (total_loss(&model, &plus, &ex) - total_loss(&model, &minus, &ex)) / (2.0 * h as f64);
        let err = (numeric - *analytic as f64).abs();
        assert!(
            err < 0.05 * analytic.abs() as f64 + 2e-3,
            "{name}[{i}]: analytic {analytic}, numeric {numeric}"
        );
    }
}

#[test]
fn training_reduces_loss_and_resumes() {
    let model = tiny_model();
    let data = vec![sample(), example("b", &[(2, Some(67), 2), (1, Some(55), 2)])];
    let mut tr = Stage1Trainer::new(model, 5).unwrap();
    let first = tr.train_epoch(&data).unwrap().mean.total;
    let mut last = first;
    for _ in 0..30 {
        last = tr.train_epoch(&data).unwrap().mean.total;
    }
    assert!(last < 0.7 * first, "{first} -> {last}");

    let bytes = encode_params(&tr.checkpoint());
    let restored = decode_params(&bytes).unwrap();
    let mut a = Stage1Trainer::resume(tiny_cfg(), restored, 5).unwrap();
    assert_eq!(a.epoch, 31);
    let sa = a.train_epoch(&data).unwrap();
    let sb = tr.train_epoch(&data).unwrap();
    assert_eq!(sa.step_totals, sb.step_totals);
}

#[test]
fn structure_mismatch_on_resume() {
    let store = tiny_model().init_params(0).unwrap();
    let mut other = tiny_cfg();
    other.dim = 16;
    assert!(matches!(Stage1Model::from_store(other, &store), Err(Error::Structure(_))));
}

#[test]
fn inference_shapes_and_voicing() {
    let model = tiny_model();
    let data = vec![sample()];
    let mut tr = Stage1Trainer::new(model, 2).unwrap();
    for _ in 0..5 {
        tr.train_epoch(&data).unwrap();
    }
    let z = tr.model.infer(&tr.store, &data[0].score, spec()).unwrap();
    assert_eq!(z.tokens.n_layers(), 2);
    assert!(z.n_frames() >= 3);
    for l in 0..2 {
        assert!(z.tokens.tokens[l].iter().all(|&c| (c as usize) < tr.model.vocab[l]));
    }
    assert!(z.f0.f0_hz.iter().zip(&z.f0.voiced).all(|(&f, &v)| v == (f > 0.0)));
}

#[test]
fn silence_tokens_from_unvoiced_majority() {
    let data = vec![sample()];
    // phoneme 0 (rest) maps to layer-0 token 0 on unvoiced frames only
    assert_eq!(derive_silence_tokens(&data, 4), vec![0]);
}
