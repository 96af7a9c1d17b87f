//! Parameter initialisation and layer wrappers over [`Graph`] ops.
//! Layers are stateless: weights live in a [`ParameterStore`] under
//! dotted names, and a [`Ctx`] selects whether they are trainable for the
//! graph being built.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::{ParameterStore, Tensor};

/// Store view used while building a forward graph.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub store: &'a ParameterStore,
    pub trainable: bool,
}

impl<'a> Ctx<'a> {
    pub fn trainable(store: &'a ParameterStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParameterStore) -> Self {
        Self { store, trainable: false }
    }

    pub fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(self.store, name, self.trainable)
    }
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape")
        .with_grad()
}

pub fn const_tensor(shape: &[usize], v: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![v; n]).expect("shape").with_grad()
}

/// Registers `name.w [out, in]` and optionally `name.b [out]`.
pub fn add_linear(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<()> {
    let std = (1.0 / d_in as f32).sqrt();
    store.insert(format!("{name}.w"), normal_tensor(rng, &[d_out, d_in], std))?;
    if bias {
        store.insert(format!("{name}.b"), const_tensor(&[d_out], 0.0))?;
    }
    Ok(())
}

pub fn linear(g: &mut Graph, ctx: Ctx, name: &str, x: Var) -> Result<Var> {
    let w = ctx.p(g, &format!("{name}.w"))?;
    let b_name = format!("{name}.b");
    let b = if ctx.store.contains(&b_name) {
        Some(ctx.p(g, &b_name)?)
    } else {
        None
    };
    g.linear(x, w, b)
}

/// Registers a convolution `name.w [out, in, k]` (or `name.v`/`name.g`
/// when weight-normalised) and `name.b [out]`.
pub fn add_conv1d(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    weight_norm: bool,
    init_std: Option<f32>,
) -> Result<()> {
    let std = init_std.unwrap_or_else(|| (1.0 / (c_in * kernel) as f32).sqrt());
    let w = normal_tensor(rng, &[c_out, c_in, kernel], std);
    if weight_norm {
        let per = c_in * kernel;
        let norms: Vec<f32> = w.data().chunks(per).map(|r| r.iter().map(|v| v * v).sum::<f32>().sqrt()).collect();
        store.insert(format!("{name}.v"), w)?;
        store.insert(format!("{name}.g"), Tensor::new(&[c_out], norms)?.with_grad())?;
    } else {
        store.insert(format!("{name}.w"), w)?;
    }
    store.insert(format!("{name}.b"), const_tensor(&[c_out], 0.0))
}

/// Kernel of a convolution registered by [`add_conv1d`], resolving weight norm.
pub fn conv_kernel(g: &mut Graph, ctx: Ctx, name: &str) -> Result<Var> {
    let v_name = format!("{name}.v");
    if ctx.store.contains(&v_name) {
        let v = ctx.p(g, &v_name)?;
        let gain = ctx.p(g, &format!("{name}.g"))?;
        g.weight_norm(v, gain)
    } else {
        ctx.p(g, &format!("{name}.w"))
    }
}

pub fn conv1d(g: &mut Graph, ctx: Ctx, name: &str, x: Var, stride: usize, padding: usize, dilation: usize) -> Result<Var> {
    let w = conv_kernel(g, ctx, name)?;
    let b = ctx.p(g, &format!("{name}.b"))?;
    g.conv1d(x, w, Some(b), stride, padding, dilation)
}

/// Length-preserving convolution (odd kernel, stride 1).
pub fn conv1d_same(g: &mut Graph, ctx: Ctx, name: &str, x: Var, kernel: usize, dilation: usize) -> Result<Var> {
    conv1d(g, ctx, name, x, 1, dilation * (kernel - 1) / 2, dilation)
}

/// Registers a transposed convolution `name.w [in, out, k]`, `name.b [out]`.
pub fn add_conv_transpose1d(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<()> {
    let std = (1.0 / (c_in * kernel) as f32).sqrt();
    store.insert(format!("{name}.w"), normal_tensor(rng, &[c_in, c_out, kernel], std))?;
    store.insert(format!("{name}.b"), const_tensor(&[c_out], 0.0))
}

pub fn conv_transpose1d(g: &mut Graph, ctx: Ctx, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = ctx.p(g, &format!("{name}.w"))?;
    let b = ctx.p(g, &format!("{name}.b"))?;
    g.conv_transpose1d(x, w, Some(b), stride, padding)
}

pub fn add_layer_norm(store: &mut ParameterStore, name: &str, d: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), const_tensor(&[d], 1.0))?;
    store.insert(format!("{name}.beta"), const_tensor(&[d], 0.0))
}

pub fn layer_norm(g: &mut Graph, ctx: Ctx, name: &str, x: Var) -> Result<Var> {
    let gamma = ctx.p(g, &format!("{name}.gamma"))?;
    let beta = ctx.p(g, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// `[T, C]` rows to a `[1, C, T]` sequence.
pub fn rows_to_seq(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.transpose(x)?;
    g.reshape(t, &[1, s[1], s[0]])
}

/// `[1, C, T]` sequence to `[T, C]` rows.
pub fn seq_to_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let m = g.reshape(x, &[s[1], s[2]])?;
    g.transpose(m)
}
