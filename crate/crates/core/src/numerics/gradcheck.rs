//! Central finite-difference verification of every registered operator.
//!
//! Each [`OpKind`] has a seeded case: input tensors plus a forward closure.
//! The check contracts the op output with a fixed random cotangent `c`,
//! compares the analytic input gradients against
//! `(⟨c, f(x + h e_i)⟩ - ⟨c, f(x - h e_i)⟩) / 2h`, and reports the worst
//! element. An element passes when its absolute error is below `abs_tol` or
//! its relative error below `rel_tol`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::stft::{Padding, StftPlan};
use crate::error::Result;
use crate::numerics::graph::{Graph, Var};

macro_rules! op_registry {
    ($($kind:ident => $name:literal),* $(,)?) => {
        /// Every differentiable operator exposed by [`Graph`].
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum OpKind { $($kind),* }

        impl OpKind {
            pub const ALL: &'static [OpKind] = &[$(OpKind::$kind),*];

            pub fn name(self) -> &'static str {
                match self { $(OpKind::$kind => $name),* }
            }
        }
    };
}

op_registry! {
    Linear => "linear",
    Matmul => "matmul",
    Embedding => "embedding_lookup",
    Conv1d => "conv1d",
    Conv1dStrided => "conv1d(stride,dilation)",
    ConvTranspose1d => "transposed_conv1d",
    LeakyRelu => "leaky_relu",
    Tanh => "tanh",
    LogClamp => "log_clamp",
    Scale => "scale",
    Softmax => "softmax",
    LayerNorm => "layer_norm",
    Attention => "scaled_dot_attention",
    SnakeBeta => "snake_beta",
    Concat => "concat",
    Add => "add",
    AddBroadcast => "add(broadcast)",
    Mul => "mul",
    Mean => "mean",
    SumScalars => "sum_scalars",
    L1Loss => "l1_loss",
    MseLoss => "mse_loss",
    CrossEntropy => "cross_entropy",
    CosineSimilarity => "cosine_similarity",
    Transpose => "transpose",
    Reshape => "reshape",
    StftMagnitude => "stft_magnitude",
    PeriodFold => "period_fold",
    SliceCols => "slice_cols",
    MeanRows => "mean_rows",
    WeightNorm => "weight_norm",
    GatherRows => "gather_rows",
}

type Forward = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A seeded instance of one operator.
pub struct Case {
    /// `(shape, data, differentiable)` per input.
    pub inputs: Vec<(Vec<usize>, Vec<f32>, bool)>,
    pub forward: Forward,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero (keeps kinks out of the FD stencil).
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1f32..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn input(shape: &[usize], data: Vec<f32>) -> (Vec<usize>, Vec<f32>, bool) {
    (shape.to_vec(), data, true)
}

pub fn build_case(kind: OpKind, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let f = |b: Forward| b;
    match kind {
        OpKind::Linear => Case {
            inputs: vec![input(&[3, 4], uniform(r, 12, -1.0, 1.0)), input(&[5, 4], uniform(r, 20, -1.0, 1.0)), input(&[5], uniform(r, 5, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])))),
        },
        OpKind::Matmul => Case {
            inputs: vec![input(&[3, 4], uniform(r, 12, -1.0, 1.0)), input(&[4, 2], uniform(r, 8, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.matmul(v[0], v[1]))),
        },
        OpKind::Embedding => Case {
            inputs: vec![input(&[6, 3], uniform(r, 18, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.embedding(v[0], &[0, 5, 2, 5, 1]))),
        },
        OpKind::Conv1d => Case {
            inputs: vec![input(&[2, 3, 9], uniform(r, 54, -1.0, 1.0)), input(&[4, 3, 3], uniform(r, 36, -0.5, 0.5)), input(&[4], uniform(r, 4, -0.5, 0.5))],
            forward: f(Box::new(|g, v| g.conv1d(v[0], v[1], Some(v[2]), 1, 1, 1))),
        },
        OpKind::Conv1dStrided => Case {
            inputs: vec![input(&[1, 2, 17], uniform(r, 34, -1.0, 1.0)), input(&[3, 2, 4], uniform(r, 24, -0.5, 0.5)), input(&[3], uniform(r, 3, -0.5, 0.5))],
            forward: f(Box::new(|g, v| g.conv1d(v[0], v[1], Some(v[2]), 3, 2, 2))),
        },
        OpKind::ConvTranspose1d => Case {
            inputs: vec![input(&[1, 3, 5], uniform(r, 15, -1.0, 1.0)), input(&[3, 2, 11], uniform(r, 66, -0.5, 0.5)), input(&[2], uniform(r, 2, -0.5, 0.5))],
            forward: f(Box::new(|g, v| g.conv_transpose1d(v[0], v[1], Some(v[2]), 5, 3))),
        },
        OpKind::LeakyRelu => Case {
            inputs: vec![input(&[4, 5], away_from_zero(r, 20))],
            forward: f(Box::new(|g, v| g.leaky_relu(v[0], 0.1))),
        },
        OpKind::Tanh => Case {
            inputs: vec![input(&[4, 5], uniform(r, 20, -2.0, 2.0))],
            forward: f(Box::new(|g, v| g.tanh(v[0]))),
        },
        OpKind::LogClamp => Case {
            inputs: vec![input(&[12], uniform(r, 12, 0.05, 3.0))],
            forward: f(Box::new(|g, v| g.log_clamp(v[0], 1e-5))),
        },
        OpKind::Scale => Case {
            inputs: vec![input(&[7], uniform(r, 7, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.scale(v[0], -1.7))),
        },
        OpKind::Softmax => Case {
            inputs: vec![input(&[3, 6], uniform(r, 18, -2.0, 2.0))],
            forward: f(Box::new(|g, v| g.softmax(v[0]))),
        },
        OpKind::LayerNorm => Case {
            inputs: vec![input(&[3, 6], uniform(r, 18, -2.0, 2.0)), input(&[6], uniform(r, 6, 0.5, 1.5)), input(&[6], uniform(r, 6, -0.5, 0.5))],
            forward: f(Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]))),
        },
        OpKind::Attention => Case {
            inputs: vec![
                input(&[5, 4], uniform(r, 20, -1.0, 1.0)),
                input(&[5, 4], uniform(r, 20, -1.0, 1.0)),
                input(&[5, 4], uniform(r, 20, -1.0, 1.0)),
                input(&[2, 5], uniform(r, 10, -0.5, 0.5)),
            ],
            forward: f(Box::new(|g, v| g.scaled_dot_attention(v[0], v[1], v[2], Some(v[3]), 2))),
        },
        OpKind::SnakeBeta => Case {
            inputs: vec![input(&[2, 3, 6], uniform(r, 36, -1.5, 1.5)), input(&[3], uniform(r, 3, -0.5, 0.5)), input(&[3], uniform(r, 3, -0.5, 0.5))],
            forward: f(Box::new(|g, v| g.snake_beta(v[0], v[1], v[2]))),
        },
        OpKind::Concat => Case {
            inputs: vec![input(&[2, 3, 2], uniform(r, 12, -1.0, 1.0)), input(&[2, 1, 2], uniform(r, 4, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        },
        OpKind::Add => Case {
            inputs: vec![input(&[3, 4], uniform(r, 12, -1.0, 1.0)), input(&[3, 4], uniform(r, 12, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.add(v[0], v[1]))),
        },
        OpKind::AddBroadcast => Case {
            inputs: vec![input(&[3, 4], uniform(r, 12, -1.0, 1.0)), input(&[1, 4], uniform(r, 4, -1.0, 1.0)), input(&[1, 3, 4], uniform(r, 12, -1.0, 1.0)), input(&[1, 3, 1], uniform(r, 3, -1.0, 1.0))],
            forward: f(Box::new(|g, v| {
                let a = g.add(v[0], v[1])?;
                let b = g.add(v[2], v[3])?;
                let b = g.reshape(b, &[3, 4])?;
                g.mul(a, b)
            })),
        },
        OpKind::Mul => Case {
            inputs: vec![input(&[3, 4], uniform(r, 12, -1.0, 1.0)), input(&[3, 4], uniform(r, 12, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.mul(v[0], v[1]))),
        },
        OpKind::Mean => Case {
            inputs: vec![input(&[3, 4], uniform(r, 12, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.mean(v[0]))),
        },
        OpKind::SumScalars => Case {
            inputs: vec![input(&[1], uniform(r, 1, -1.0, 1.0)), input(&[1], uniform(r, 1, -1.0, 1.0)), input(&[1], uniform(r, 1, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.sum_scalars(v))),
        },
        OpKind::L1Loss => {
            let a = uniform(r, 10, -1.0, 1.0);
            let b: Vec<f32> = a.iter().zip(away_from_zero(r, 10)).map(|(x, d)| x + d).collect();
            let mask = vec![1.0, 0.0, 1.0, 1.0, 0.5, 1.0, 0.0, 1.0, 1.0, 1.0];
            Case {
                inputs: vec![input(&[10], a), input(&[10], b)],
                forward: f(Box::new(move |g, v| g.l1_loss(v[0], v[1], Some(&mask)))),
            }
        }
        OpKind::MseLoss => Case {
            inputs: vec![input(&[2, 5], uniform(r, 10, -1.0, 1.0)), input(&[2, 5], uniform(r, 10, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.mse_loss(v[0], v[1], None))),
        },
        OpKind::CrossEntropy => Case {
            inputs: vec![input(&[4, 5], uniform(r, 20, -2.0, 2.0))],
            forward: f(Box::new(|g, v| g.cross_entropy(v[0], &[1, 4, 5, 0], Some(5)))),
        },
        OpKind::CosineSimilarity => Case {
            inputs: vec![input(&[6], uniform(r, 6, -1.0, 1.0)), input(&[6], uniform(r, 6, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.cosine_similarity(v[0], v[1]))),
        },
        OpKind::Transpose => Case {
            inputs: vec![input(&[3, 5], uniform(r, 15, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.transpose(v[0]))),
        },
        OpKind::Reshape => Case {
            inputs: vec![input(&[3, 4], uniform(r, 12, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        },
        OpKind::StftMagnitude => {
            let plan = Arc::new(StftPlan::new(16, 8, 16, Padding::Center).expect("plan"));
            Case {
                inputs: vec![input(&[24], uniform(r, 24, -1.0, 1.0))],
                forward: f(Box::new(move |g, v| g.stft_magnitude(v[0], &plan))),
            }
        }
        OpKind::PeriodFold => Case {
            inputs: vec![input(&[23], uniform(r, 23, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.period_fold(v[0], 5))),
        },
        OpKind::SliceCols => Case {
            inputs: vec![input(&[3, 7], uniform(r, 21, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.slice_cols(v[0], 2, 6))),
        },
        OpKind::MeanRows => Case {
            inputs: vec![input(&[4, 3], uniform(r, 12, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.mean_rows(v[0]))),
        },
        OpKind::WeightNorm => Case {
            inputs: vec![input(&[3, 2, 4], uniform(r, 24, -1.0, 1.0)), input(&[3], uniform(r, 3, 0.5, 1.5))],
            forward: f(Box::new(|g, v| g.weight_norm(v[0], v[1]))),
        },
        OpKind::GatherRows => Case {
            inputs: vec![input(&[3, 4], uniform(r, 12, -1.0, 1.0))],
            forward: f(Box::new(|g, v| g.gather_rows(v[0], &[0, 0, 2, 1, 2, 2]))),
        },
    }
}

/// Runs the finite-difference comparison for an arbitrary case.
pub fn check_case(op: &'static str, case: &Case, seed: u64, h: f32, rel_tol: f64, abs_tol: f64) -> Result<GradCheckReport> {
    let build = |g: &mut Graph, data: &[Vec<f32>]| -> Result<(Vec<Var>, Var)> {
        let vars = case
            .inputs
            .iter()
            .zip(data)
            .map(|((shape, _, diff), d)| {
                if *diff {
                    g.variable(shape, d.clone())
                } else {
                    g.constant(shape, d.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let out = (case.forward)(g, &vars)?;
        Ok((vars, out))
    };
    let base: Vec<Vec<f32>> = case.inputs.iter().map(|(_, d, _)| d.clone()).collect();
    let mut g = Graph::new();
    let (vars, out) = build(&mut g, &base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9);
    let cot: Vec<f32> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    g.backward_from(out, cot.clone())?;
    let analytic: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| g.grad(v).map(<[f32]>::to_vec)).collect();

    let contract = |data: &[Vec<f32>]| -> Result<f64> {
        let mut g = Graph::new();
        let (_, out) = build(&mut g, data)?;
        Ok(g.value(out).iter().zip(&cot).map(|(&y, &c)| y as f64 * c as f64).sum())
    };

    let mut report = GradCheckReport {
        op,
        checked: 0,
        failures: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
    };
    for (i, (_, _, diff)) in case.inputs.iter().enumerate() {
        if !diff {
            continue;
        }
        let zeros = vec![0.0; base[i].len()];
        let an = analytic[i].as_deref().unwrap_or(&zeros);
        for j in 0..base[i].len() {
            let mut plus = base.clone();
            plus[i][j] += h;
            let mut minus = base.clone();
            minus[i][j] -= h;
            let numeric = (contract(&plus)? - contract(&minus)?) / (2.0 * h as f64);
            let a = an[j] as f64;
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > abs_tol {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel > rel_tol {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Standard check: h = 1e-3, rel 1e-2, abs 1e-4.
pub fn check_op(kind: OpKind, seed: u64) -> Result<GradCheckReport> {
    check_case(kind.name(), &build_case(kind, seed), seed, 1e-3, 1e-2, 1e-4)
}
