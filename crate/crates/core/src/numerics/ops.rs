//! Differentiable operators. Every op validates shapes, computes the forward
//! value eagerly and registers an exact analytic backward closure.
//!
//! Layout conventions: sequences are `[batch, channels, time]` for
//! convolutions and `[rows, features]` for dense ops.

use std::sync::Arc;

use rustfft::num_complex::Complex32;

use crate::dsp::stft::StftPlan;
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};

fn shape_err<T>(op: &str, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Shape(format!("{op}: {msg}")))
}

/// Output length of a strided, padded, dilated convolution.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * padding;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

/// Output length of a transposed convolution.
pub fn conv_transpose1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let full = (len - 1) * stride + kernel;
    (full > 2 * padding).then(|| full - 2 * padding)
}

/// Range of output positions `t` for which `t*stride + offset` lands in `[0, len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi_excl = if (len as isize) - offset <= 0 {
        0
    } else {
        ((len as isize) - offset - 1) / s + 1
    };
    let hi_excl = hi_excl.min(out_len as isize);
    (lo as usize, hi_excl.max(lo) as usize)
}

#[inline]
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

impl Graph {
    /// `x[N, I] · w[O, I]ᵀ + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", format!("x {xs:?} w {ws:?}"));
        }
        let (n, i_dim, o_dim) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b).iter().product::<usize>() != o_dim {
                return shape_err("linear", "bias length");
            }
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0f32; n * o_dim];
        for r in 0..n {
            let xr = &xv[r * i_dim..(r + 1) * i_dim];
            for o in 0..o_dim {
                let wr = &wv[o * i_dim..(o + 1) * i_dim];
                out[r * o_dim + o] = dot(xr, wr);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..n {
                for (y, bb) in out[r * o_dim..(r + 1) * o_dim].iter_mut().zip(bv) {
                    *y += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            vec![n, o_dim],
            out,
            &parents,
            Box::new(move |vals, g, sink| {
                let xv = &vals[x.0].data;
                let wv = &vals[w.0].data;
                if sink.needs(x) {
                    let gx = sink.buf(x);
                    for r in 0..n {
                        let gxr = &mut gx[r * i_dim..(r + 1) * i_dim];
                        for o in 0..o_dim {
                            axpy(gxr, g[r * o_dim + o], &wv[o * i_dim..(o + 1) * i_dim]);
                        }
                    }
                }
                if sink.needs(w) {
                    let gw = sink.buf(w);
                    for r in 0..n {
                        let xr = &xv[r * i_dim..(r + 1) * i_dim];
                        for o in 0..o_dim {
                            axpy(&mut gw[o * i_dim..(o + 1) * i_dim], g[r * o_dim + o], xr);
                        }
                    }
                }
                if let Some(b) = b {
                    if sink.needs(b) {
                        let gb = sink.buf(b);
                        for r in 0..n {
                            for (a, gg) in gb.iter_mut().zip(&g[r * o_dim..(r + 1) * o_dim]) {
                                *a += gg;
                            }
                        }
                    }
                }
            }),
            "linear",
        )
    }

    /// `a[N, K] · b[K, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return shape_err("matmul", format!("{as_:?} x {bs:?}"));
        }
        let (n, k, m) = (as_[0], as_[1], bs[1]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0f32; n * m];
        for r in 0..n {
            let orow = &mut out[r * m..(r + 1) * m];
            for j in 0..k {
                axpy(orow, av[r * k + j], &bv[j * m..(j + 1) * m]);
            }
        }
        self.push(
            vec![n, m],
            out,
            &[a, b],
            Box::new(move |vals, g, sink| {
                let av = &vals[a.0].data;
                let bv = &vals[b.0].data;
                if sink.needs(a) {
                    let ga = sink.buf(a);
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for j in 0..k {
                            ga[r * k + j] += dot(gr, &bv[j * m..(j + 1) * m]);
                        }
                    }
                }
                if sink.needs(b) {
                    let gb = sink.buf(b);
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for j in 0..k {
                            axpy(&mut gb[j * m..(j + 1) * m], av[r * k + j], gr);
                        }
                    }
                }
            }),
            "matmul",
        )
    }

    /// Row lookup `table[ids[n], :]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return shape_err("embedding", format!("table {ts:?}"));
        }
        if ids.is_empty() {
            return shape_err("embedding", "no ids");
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocab(format!("id {bad} outside table of {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        self.push(
            vec![ids.len(), d],
            out,
            &[table],
            Box::new(move |_, g, sink| {
                let gt = sink.buf(table);
                for (r, &i) in ids.iter().enumerate() {
                    for (a, b) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
            }),
            "embedding",
        )
    }

    /// Zero-padded 1-D convolution: `x[B, C, L]`, `w[O, C, K]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || stride == 0 || dilation == 0 {
            return shape_err("conv1d", format!("x {xs:?} w {ws:?}"));
        }
        let (bsz, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        let Some(l_out) = conv1d_out_len(len, k, stride, padding, dilation) else {
            return Err(Error::TooShort(format!("conv1d input length {len} below kernel span")));
        };
        if let Some(b) = b {
            if self.shape(b).iter().product::<usize>() != c_out {
                return shape_err("conv1d", "bias length");
            }
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0f32; bsz * c_out * l_out];
        let ranges: Vec<(isize, usize, usize)> = (0..k)
            .map(|kk| {
                let off = (kk * dilation) as isize - padding as isize;
                let (lo, hi) = valid_range(off, stride, len, l_out);
                (off, lo, hi)
            })
            .collect();
        for bi in 0..bsz {
            for o in 0..c_out {
                let orow = &mut out[(bi * c_out + o) * l_out..(bi * c_out + o + 1) * l_out];
                for c in 0..c_in {
                    let xrow = &xv[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                    let wrow = &wv[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                    for (kk, &(off, lo, hi)) in ranges.iter().enumerate() {
                        if hi <= lo {
                            continue;
                        }
                        let wk = wrow[kk];
                        if stride == 1 {
                            let start = (lo as isize + off) as usize;
                            axpy(&mut orow[lo..hi], wk, &xrow[start..start + (hi - lo)]);
                        } else {
                            for t in lo..hi {
                                orow[t] += wk * xrow[(t as isize * stride as isize + off) as usize];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).to_vec();
            for bi in 0..bsz {
                for (o, bb) in bv.iter().enumerate() {
                    out[(bi * c_out + o) * l_out..(bi * c_out + o + 1) * l_out]
                        .iter_mut()
                        .for_each(|y| *y += bb);
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            vec![bsz, c_out, l_out],
            out,
            &parents,
            Box::new(move |vals, g, sink| {
                let xv = &vals[x.0].data;
                let wv = &vals[w.0].data;
                if sink.needs(x) {
                    let gx = sink.buf(x);
                    for bi in 0..bsz {
                        for o in 0..c_out {
                            let grow = &g[(bi * c_out + o) * l_out..(bi * c_out + o + 1) * l_out];
                            for c in 0..c_in {
                                let gxrow = &mut gx[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                                let wrow = &wv[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                                for (kk, &(off, lo, hi)) in ranges.iter().enumerate() {
                                    if hi <= lo {
                                        continue;
                                    }
                                    let wk = wrow[kk];
                                    if stride == 1 {
                                        let start = (lo as isize + off) as usize;
                                        axpy(&mut gxrow[start..start + (hi - lo)], wk, &grow[lo..hi]);
                                    } else {
                                        for t in lo..hi {
                                            gxrow[(t as isize * stride as isize + off) as usize] += wk * grow[t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if sink.needs(w) {
                    let gw = sink.buf(w);
                    for bi in 0..bsz {
                        for o in 0..c_out {
                            let grow = &g[(bi * c_out + o) * l_out..(bi * c_out + o + 1) * l_out];
                            for c in 0..c_in {
                                let xrow = &xv[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                                let gwrow = &mut gw[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                                for (kk, &(off, lo, hi)) in ranges.iter().enumerate() {
                                    if hi <= lo {
                                        continue;
                                    }
                                    if stride == 1 {
                                        let start = (lo as isize + off) as usize;
                                        gwrow[kk] += dot(&grow[lo..hi], &xrow[start..start + (hi - lo)]);
                                    } else {
                                        let mut acc = 0.0;
                                        for t in lo..hi {
                                            acc += grow[t] * xrow[(t as isize * stride as isize + off) as usize];
                                        }
                                        gwrow[kk] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if sink.needs(b) {
                        let gb = sink.buf(b);
                        for bi in 0..bsz {
                            for (o, gbo) in gb.iter_mut().enumerate() {
                                *gbo += g[(bi * c_out + o) * l_out..(bi * c_out + o + 1) * l_out]
                                    .iter()
                                    .sum::<f32>();
                            }
                        }
                    }
                }
            }),
            "conv1d",
        )
    }

    /// Transposed 1-D convolution: `x[B, C, L]`, `w[C, O, K]`,
    /// output length `(L-1)*stride - 2*padding + K`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[0] || stride == 0 {
            return shape_err("conv_transpose1d", format!("x {xs:?} w {ws:?}"));
        }
        let (bsz, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[1], ws[2]);
        let Some(l_out) = conv_transpose1d_out_len(len, k, stride, padding) else {
            return shape_err("conv_transpose1d", "padding consumes whole output");
        };
        if let Some(b) = b {
            if self.shape(b).iter().product::<usize>() != c_out {
                return shape_err("conv_transpose1d", "bias length");
            }
        }
        // out[j] with j = i*stride + kk - padding, i.e. i ranges where that lands in [0, l_out)
        let ranges: Vec<(isize, usize, usize)> = (0..k)
            .map(|kk| {
                let off = kk as isize - padding as isize;
                let (lo, hi) = valid_range(off, stride, l_out, len);
                (off, lo, hi)
            })
            .collect();
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0f32; bsz * c_out * l_out];
        for bi in 0..bsz {
            for c in 0..c_in {
                let xrow = &xv[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                for o in 0..c_out {
                    let orow = &mut out[(bi * c_out + o) * l_out..(bi * c_out + o + 1) * l_out];
                    let wrow = &wv[(c * c_out + o) * k..(c * c_out + o + 1) * k];
                    for (kk, &(off, lo, hi)) in ranges.iter().enumerate() {
                        let wk = wrow[kk];
                        for i in lo..hi {
                            orow[(i as isize * stride as isize + off) as usize] += wk * xrow[i];
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).to_vec();
            for bi in 0..bsz {
                for (o, bb) in bv.iter().enumerate() {
                    out[(bi * c_out + o) * l_out..(bi * c_out + o + 1) * l_out]
                        .iter_mut()
                        .for_each(|y| *y += bb);
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            vec![bsz, c_out, l_out],
            out,
            &parents,
            Box::new(move |vals, g, sink| {
                let xv = &vals[x.0].data;
                let wv = &vals[w.0].data;
                if sink.needs(x) {
                    let gx = sink.buf(x);
                    for bi in 0..bsz {
                        for c in 0..c_in {
                            let gxrow = &mut gx[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                            for o in 0..c_out {
                                let grow = &g[(bi * c_out + o) * l_out..(bi * c_out + o + 1) * l_out];
                                let wrow = &wv[(c * c_out + o) * k..(c * c_out + o + 1) * k];
                                for (kk, &(off, lo, hi)) in ranges.iter().enumerate() {
                                    let wk = wrow[kk];
                                    for i in lo..hi {
                                        gxrow[i] += wk * grow[(i as isize * stride as isize + off) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                if sink.needs(w) {
                    let gw = sink.buf(w);
                    for bi in 0..bsz {
                        for c in 0..c_in {
                            let xrow = &xv[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                            for o in 0..c_out {
                                let grow = &g[(bi * c_out + o) * l_out..(bi * c_out + o + 1) * l_out];
                                let gwrow = &mut gw[(c * c_out + o) * k..(c * c_out + o + 1) * k];
                                for (kk, &(off, lo, hi)) in ranges.iter().enumerate() {
                                    let mut acc = 0.0;
                                    for i in lo..hi {
                                        acc += xrow[i] * grow[(i as isize * stride as isize + off) as usize];
                                    }
                                    gwrow[kk] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if sink.needs(b) {
                        let gb = sink.buf(b);
                        for bi in 0..bsz {
                            for (o, gbo) in gb.iter_mut().enumerate() {
                                *gbo += g[(bi * c_out + o) * l_out..(bi * c_out + o + 1) * l_out]
                                    .iter()
                                    .sum::<f32>();
                            }
                        }
                    }
                }
            }),
            "conv_transpose1d",
        )
    }

    fn unary(
        &mut self,
        x: Var,
        op: &'static str,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out: Vec<f32> = self.value(x).iter().map(|&v| f(v)).collect();
        let y_idx = self.len();
        self.push(
            shape,
            out,
            &[x],
            Box::new(move |vals, g, sink| {
                let xv = &vals[x.0].data;
                let yv = &vals[y_idx].data;
                let gx = sink.buf(x);
                for i in 0..gx.len() {
                    gx[i] += g[i] * df(xv[i], yv[i]);
                }
            }),
            op,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        self.unary(
            x,
            "leaky_relu",
            move |v| if v >= 0.0 { v } else { slope * v },
            move |v, _| if v >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", f32::tanh, |_, y| 1.0 - y * y)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamp(&mut self, x: Var, eps: f32) -> Result<Var> {
        self.unary(
            x,
            "log_clamp",
            move |v| v.max(eps).ln(),
            move |v, _| if v > eps { 1.0 / v } else { 0.0 },
        )
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.unary(x, "scale", move |v| c * v, move |_, _| c)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let mut out = self.value(x).to_vec();
        out.chunks_mut(d).for_each(softmax_inplace);
        let y_idx = self.len();
        self.push(
            shape,
            out,
            &[x],
            Box::new(move |vals, g, sink| {
                let y = &vals[y_idx].data;
                let gx = sink.buf(x);
                for ((gxr, yr), gr) in gx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let s = dot(yr, gr);
                    for i in 0..d {
                        gxr[i] += yr[i] * (gr[i] - s);
                    }
                }
            }),
            "softmax",
        )
    }

    /// Layer normalisation over the last axis of `x[N, D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f32 = 1e-5;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma).iter().product::<usize>() != d || self.shape(beta).iter().product::<usize>() != d {
            return shape_err("layer_norm", "affine length");
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0f32; xv.len()];
        let mut inv_std = vec![0.0f32; rows];
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..rows {
            let xr = &xv[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f32>() / d as f32;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (xr[i] - mean) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gv[i] + bv[i];
            }
        }
        self.push(
            shape,
            out,
            &[x, gamma, beta],
            Box::new(move |vals, g, sink| {
                let gv = &vals[gamma.0].data;
                if sink.needs(x) {
                    let gx = sink.buf(x);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..d {
                            let gh = gr[i] * gv[i];
                            m1 += gh;
                            m2 += gh * hr[i];
                        }
                        m1 /= d as f32;
                        m2 /= d as f32;
                        for i in 0..d {
                            gx[r * d + i] += inv_std[r] * (gr[i] * gv[i] - m1 - hr[i] * m2);
                        }
                    }
                }
                if sink.needs(gamma) {
                    let gg = sink.buf(gamma);
                    for r in 0..rows {
                        for i in 0..d {
                            gg[i] += g[r * d + i] * xhat[r * d + i];
                        }
                    }
                }
                if sink.needs(beta) {
                    let gb = sink.buf(beta);
                    for r in 0..rows {
                        for i in 0..d {
                            gb[i] += g[r * d + i];
                        }
                    }
                }
            }),
            "layer_norm",
        )
    }

    /// Multi-head scaled dot-product self-attention over `q, k, v [T, D]`
    /// with an optional learned relative-position bias table
    /// `[heads, 2*max_rel + 1]` indexed by the clipped offset `j - i`.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        rel_bias: Option<Var>,
        heads: usize,
    ) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return shape_err("attention", "q, k, v must share shape [T, D]");
        }
        let (t_len, d) = (qs[0], qs[1]);
        if heads == 0 || d % heads != 0 {
            return shape_err("attention", format!("dim {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        let max_rel = match rel_bias {
            Some(b) => {
                let bs = self.shape(b);
                if bs.len() != 2 || bs[0] != heads || bs[1] % 2 == 0 {
                    return shape_err("attention", format!("relative bias {bs:?}"));
                }
                (bs[1] - 1) / 2
            }
            None => 0,
        };
        let rel_idx = move |i: usize, j: usize| -> usize {
            let off = (j as isize - i as isize).clamp(-(max_rel as isize), max_rel as isize);
            (off + max_rel as isize) as usize
        };
        let scale = 1.0 / (dh as f32).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let bias = rel_bias.map(|b| self.value(b).to_vec());
        let width = 2 * max_rel + 1;
        let mut probs = vec![0.0f32; heads * t_len * t_len];
        let mut out = vec![0.0f32; t_len * d];
        for h in 0..heads {
            for i in 0..t_len {
                let qi = &qv[i * d + h * dh..i * d + (h + 1) * dh];
                let row = &mut probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                for j in 0..t_len {
                    let kj = &kv[j * d + h * dh..j * d + (h + 1) * dh];
                    let mut s = dot(qi, kj) * scale;
                    if let Some(b) = &bias {
                        s += b[h * width + rel_idx(i, j)];
                    }
                    row[j] = s;
                }
                softmax_inplace(row);
                let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..t_len {
                    axpy(oi, row[j], &vv[j * d + h * dh..j * d + (h + 1) * dh]);
                }
            }
        }
        let mut parents = vec![q, k, v];
        parents.extend(rel_bias);
        self.push(
            vec![t_len, d],
            out,
            &parents,
            Box::new(move |vals, g, sink| {
                let qv = &vals[q.0].data;
                let kv = &vals[k.0].data;
                let vv = &vals[v.0].data;
                let mut gq = vec![0.0f32; t_len * d];
                let mut gk = vec![0.0f32; t_len * d];
                let mut gvv = vec![0.0f32; t_len * d];
                let mut gb = vec![0.0f32; heads * width];
                let mut ds = vec![0.0f32; t_len];
                for h in 0..heads {
                    for i in 0..t_len {
                        let p = &probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                        let gi = &g[i * d + h * dh..i * d + (h + 1) * dh];
                        let mut s = 0.0;
                        for j in 0..t_len {
                            let vj = &vv[j * d + h * dh..j * d + (h + 1) * dh];
                            let dp = dot(gi, vj);
                            ds[j] = dp;
                            s += p[j] * dp;
                            axpy(&mut gvv[j * d + h * dh..j * d + (h + 1) * dh], p[j], gi);
                        }
                        for j in 0..t_len {
                            let dsj = p[j] * (ds[j] - s);
                            if dsj == 0.0 {
                                continue;
                            }
                            gb[h * width + rel_idx(i, j)] += dsj;
                            let c = dsj * scale;
                            axpy(&mut gq[i * d + h * dh..i * d + (h + 1) * dh], c, &kv[j * d + h * dh..j * d + (h + 1) * dh]);
                            axpy(&mut gk[j * d + h * dh..j * d + (h + 1) * dh], c, &qv[i * d + h * dh..i * d + (h + 1) * dh]);
                        }
                    }
                }
                for (var, buf) in [(q, gq), (k, gk), (v, gvv)] {
                    if sink.needs(var) {
                        sink.buf(var).iter_mut().zip(buf).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(b) = rel_bias {
                    if sink.needs(b) {
                        sink.buf(b).iter_mut().zip(gb).for_each(|(a, v)| *a += v);
                    }
                }
            }),
            "attention",
        )
    }

    /// Periodic activation `x + 1/(e^β + 1e-9) · sin²(e^α · x)` with
    /// per-channel `α`, `β` stored in log scale. `x[B, C, L]`.
    pub fn snake_beta(&mut self, x: Var, log_alpha: Var, log_beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return shape_err("snake_beta", format!("x {xs:?}"));
        }
        let (bsz, c, len) = (xs[0], xs[1], xs[2]);
        if self.shape(log_alpha).iter().product::<usize>() != c
            || self.shape(log_beta).iter().product::<usize>() != c
        {
            return shape_err("snake_beta", "per-channel parameter length");
        }
        let alpha: Vec<f32> = self.value(log_alpha).iter().map(|v| v.exp()).collect();
        let beta: Vec<f32> = self.value(log_beta).iter().map(|v| v.exp()).collect();
        let xv = self.value(x);
        let mut out = vec![0.0f32; xv.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                let (a, inv_b) = (alpha[ch], 1.0 / (beta[ch] + 1e-9));
                let base = (bi * c + ch) * len;
                for t in 0..len {
                    let xx = xv[base + t];
                    let s = (a * xx).sin();
                    out[base + t] = xx + inv_b * s * s;
                }
            }
        }
        self.push(
            xs,
            out,
            &[x, log_alpha, log_beta],
            Box::new(move |vals, g, sink| {
                let xv = &vals[x.0].data;
                let mut gx = vec![0.0f32; xv.len()];
                let mut ga = vec![0.0f32; c];
                let mut gb = vec![0.0f32; c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let (a, b) = (alpha[ch], beta[ch]);
                        let inv_b = 1.0 / (b + 1e-9);
                        let dinv_dlb = -b * inv_b * inv_b;
                        let base = (bi * c + ch) * len;
                        let (mut acc_a, mut acc_b) = (0.0f32, 0.0f32);
                        for t in 0..len {
                            let xx = xv[base + t];
                            let gg = g[base + t];
                            let (s, co) = (a * xx).sin_cos();
                            let s2 = 2.0 * s * co;
                            gx[base + t] = gg * (1.0 + inv_b * a * s2);
                            acc_a += gg * inv_b * s2 * xx * a;
                            acc_b += gg * s * s * dinv_dlb;
                        }
                        ga[ch] += acc_a;
                        gb[ch] += acc_b;
                    }
                }
                for (var, buf) in [(x, gx), (log_alpha, ga), (log_beta, gb)] {
                    if sink.needs(var) {
                        sink.buf(var).iter_mut().zip(buf).for_each(|(a, b)| *a += b);
                    }
                }
            }),
            "snake_beta",
        )
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", "axis out of range");
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return shape_err("concat", format!("{s:?} vs {base:?}"));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = vec![0.0f32; outer * total * inner];
        let mut off = 0;
        for (&p, &sz) in parts.iter().zip(&sizes) {
            let pv = self.value(p);
            for o in 0..outer {
                let src = &pv[o * sz * inner..(o + 1) * sz * inner];
                let dst = o * total * inner + off * inner;
                out[dst..dst + sz * inner].copy_from_slice(src);
            }
            off += sz;
        }
        let mut shape = base;
        shape[axis] = total;
        let parts_v = parts.to_vec();
        self.push(
            shape,
            out,
            parts,
            Box::new(move |_, g, sink| {
                let mut off = 0;
                for (&p, &sz) in parts_v.iter().zip(&sizes) {
                    if sink.needs(p) {
                        let gp = sink.buf(p);
                        for o in 0..outer {
                            let src = o * total * inner + off * inner;
                            for (a, b) in gp[o * sz * inner..(o + 1) * sz * inner]
                                .iter_mut()
                                .zip(&g[src..src + sz * inner])
                            {
                                *a += b;
                            }
                        }
                    }
                    off += sz;
                }
            }),
            "concat",
        )
    }

    /// Elementwise sum. `b` may also be a single row broadcast over `a`'s
    /// last axis, or a per-channel vector broadcast over `a[B, C, L]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let bn: usize = bs.iter().product();
        #[derive(Clone, Copy)]
        enum Mode {
            Same,
            Row(usize),
            Channel(usize, usize),
        }
        let mode = if as_ == bs {
            Mode::Same
        } else if bn == *as_.last().unwrap() && bs.iter().rev().skip(1).all(|&d| d == 1) {
            Mode::Row(bn)
        } else if as_.len() == 3 && bn == as_[1] && bs.len() == 3 && bs[2] == 1 {
            Mode::Channel(as_[1], as_[2])
        } else {
            return shape_err("add", format!("{as_:?} + {bs:?}"));
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = av.to_vec();
        match mode {
            Mode::Same => out.iter_mut().zip(bv).for_each(|(x, y)| *x += y),
            Mode::Row(d) => out.chunks_mut(d).for_each(|r| r.iter_mut().zip(bv).for_each(|(x, y)| *x += y)),
            Mode::Channel(c, l) => {
                for (i, x) in out.iter_mut().enumerate() {
                    *x += bv[(i / l) % c];
                }
            }
        }
        self.push(
            as_,
            out,
            &[a, b],
            Box::new(move |_, g, sink| {
                if sink.needs(a) {
                    sink.buf(a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if sink.needs(b) {
                    let gb = sink.buf(b);
                    match mode {
                        Mode::Same => gb.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        Mode::Row(d) => g.chunks(d).for_each(|r| gb.iter_mut().zip(r).for_each(|(x, y)| *x += y)),
                        Mode::Channel(c, l) => {
                            for (i, gg) in g.iter().enumerate() {
                                gb[(i / l) % c] += gg;
                            }
                        }
                    }
                }
            }),
            "add",
        )
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(
            self.shape(a).to_vec(),
            out,
            &[a, b],
            Box::new(move |vals, g, sink| {
                if sink.needs(a) {
                    let bv = &vals[b.0].data;
                    sink.buf(a).iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * bv[i]);
                }
                if sink.needs(b) {
                    let av = &vals[a.0].data;
                    sink.buf(b).iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * av[i]);
                }
            }),
            "mul",
        )
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let m = (self.value(x).iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
        self.push(
            vec![1],
            vec![m],
            &[x],
            Box::new(move |_, g, sink| {
                let c = g[0] / n as f32;
                sink.buf(x).iter_mut().for_each(|v| *v += c);
            }),
            "mean",
        )
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = match xs.first() {
            Some(&x) => x,
            None => return self.constant(&[1], vec![0.0]),
        };
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    fn pairwise_loss(
        &mut self,
        a: Var,
        b: Var,
        mask: Option<&[f32]>,
        op: &'static str,
        f: fn(f32) -> f32,
        df: fn(f32) -> f32,
    ) -> Result<Var> {
        let n = self.value(a).len();
        if self.value(b).len() != n {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let weights: Vec<f32> = match mask {
            Some(m) if m.len() != n => return shape_err(op, "mask length"),
            Some(m) => m.to_vec(),
            None => vec![1.0; n],
        };
        let wsum: f64 = weights.iter().map(|&w| w as f64).sum();
        let av = self.value(a);
        let bv = self.value(b);
        let total: f64 = (0..n).map(|i| (weights[i] * f(av[i] - bv[i])) as f64).sum();
        let loss = if wsum > 0.0 { (total / wsum) as f32 } else { 0.0 };
        self.push(
            vec![1],
            vec![loss],
            &[a, b],
            Box::new(move |vals, g, sink| {
                if wsum <= 0.0 {
                    return;
                }
                let av = &vals[a.0].data;
                let bv = &vals[b.0].data;
                let c = g[0] / wsum as f32;
                let d: Vec<f32> = (0..n).map(|i| c * weights[i] * df(av[i] - bv[i])).collect();
                if sink.needs(a) {
                    sink.buf(a).iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
                if sink.needs(b) {
                    sink.buf(b).iter_mut().zip(&d).for_each(|(x, y)| *x -= y);
                }
            }),
            op,
        )
    }

    /// Mean absolute difference; with a mask, a weighted mean over the
    /// masked entries (0 when the mask is empty).
    pub fn l1_loss(&mut self, a: Var, b: Var, mask: Option<&[f32]>) -> Result<Var> {
        self.pairwise_loss(a, b, mask, "l1_loss", f32::abs, f32::signum)
    }

    pub fn mse_loss(&mut self, a: Var, b: Var, mask: Option<&[f32]>) -> Result<Var> {
        self.pairwise_loss(a, b, mask, "mse_loss", |d| d * d, |d| 2.0 * d)
    }

    /// Mean cross-entropy of `logits[N, V]` against class indices; rows
    /// whose target equals `ignore` are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return shape_err("cross_entropy", format!("logits {ls:?}, {} targets", targets.len()));
        }
        let (n, v) = (ls[0], ls[1]);
        if let Some(bad) = targets.iter().find(|&&t| t >= v && Some(t) != ignore) {
            return Err(Error::Vocab(format!("target {bad} outside {v} classes")));
        }
        let lv = self.value(logits);
        let mut probs = lv.to_vec();
        probs.chunks_mut(v).for_each(softmax_inplace);
        let active: Vec<usize> = (0..n).filter(|&r| Some(targets[r]) != ignore).collect();
        let mut total = 0.0f64;
        for &r in &active {
            let row = &lv[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m as f64 + row.iter().map(|&x| ((x - m) as f64).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]] as f64;
        }
        let count = active.len();
        let loss = if count > 0 { (total / count as f64) as f32 } else { 0.0 };
        let targets = targets.to_vec();
        self.push(
            vec![1],
            vec![loss],
            &[logits],
            Box::new(move |_, g, sink| {
                if count == 0 {
                    return;
                }
                let c = g[0] / count as f32;
                let gl = sink.buf(logits);
                for &r in &active {
                    for j in 0..v {
                        let ind = if j == targets[r] { 1.0 } else { 0.0 };
                        gl[r * v + j] += c * (probs[r * v + j] - ind);
                    }
                }
            }),
            "cross_entropy",
        )
    }

    /// Cosine similarity of two equally sized tensors (flattened), `[1]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len();
        if self.value(b).len() != n {
            return shape_err("cosine_similarity", "length mismatch");
        }
        let av = self.value(a);
        let bv = self.value(b);
        let ab = dot(av, bv);
        let na = dot(av, av).sqrt().max(1e-8);
        let nb = dot(bv, bv).sqrt().max(1e-8);
        let cos = ab / (na * nb);
        self.push(
            vec![1],
            vec![cos],
            &[a, b],
            Box::new(move |vals, g, sink| {
                let av = &vals[a.0].data;
                let bv = &vals[b.0].data;
                let gg = g[0];
                if sink.needs(a) {
                    let ga = sink.buf(a);
                    for i in 0..n {
                        ga[i] += gg * (bv[i] / (na * nb) - cos * av[i] / (na * na));
                    }
                }
                if sink.needs(b) {
                    let gb = sink.buf(b);
                    for i in 0..n {
                        gb[i] += gg * (av[i] / (na * nb) - cos * bv[i] / (nb * nb));
                    }
                }
            }),
            "cosine_similarity",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return shape_err("transpose", format!("{xs:?}"));
        }
        let (r, c) = (xs[0], xs[1]);
        let xv = self.value(x);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.push(
            vec![c, r],
            out,
            &[x],
            Box::new(move |_, g, sink| {
                let gx = sink.buf(x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }),
            "transpose",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)));
        }
        let out = self.value(x).to_vec();
        self.push(
            shape.to_vec(),
            out,
            &[x],
            Box::new(move |_, g, sink| {
                sink.buf(x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }),
            "reshape",
        )
    }

    /// Hann-windowed STFT magnitude of a mono signal with reflection
    /// centre padding; output `[frames, fft/2 + 1]`.
    pub fn stft_magnitude(&mut self, x: Var, plan: &Arc<StftPlan>) -> Result<Var> {
        let signal = self.value(x).to_vec();
        let (frames, spectra) = plan.complex_frames(&signal)?;
        let bins = plan.bins();
        let mags: Vec<f32> = spectra.iter().map(|c| c.norm()).collect();
        let plan = Arc::clone(plan);
        let len = signal.len();
        self.push(
            vec![frames, bins],
            mags,
            &[x],
            Box::new(move |_, g, sink| {
                let weighted: Vec<Complex32> = spectra
                    .iter()
                    .zip(g)
                    .map(|(c, &gg)| {
                        let n = c.norm();
                        if n > 1e-12 {
                            c * (gg / n)
                        } else {
                            Complex32::new(0.0, 0.0)
                        }
                    })
                    .collect();
                plan.backprop_frames(&weighted, frames, len, sink.buf(x));
            }),
            "stft_magnitude",
        )
    }

    /// Folds a mono signal into `[period, 1, ceil(L/period)]` columns
    /// (`out[p, 0, t] = x[t*period + p]`), reflection-padding the tail.
    pub fn period_fold(&mut self, x: Var, period: usize) -> Result<Var> {
        let len = self.value(x).len();
        if period == 0 || len < period {
            return Err(Error::TooShort(format!("signal of {len} samples for period {period}")));
        }
        let cols = len.div_ceil(period);
        let xv = self.value(x);
        let src: Vec<usize> = (0..period * cols)
            .map(|i| {
                let (p, t) = (i / cols, i % cols);
                reflect((t * period + p) as isize, len)
            })
            .collect();
        let out: Vec<f32> = src.iter().map(|&s| xv[s]).collect();
        self.push(
            vec![period, 1, cols],
            out,
            &[x],
            Box::new(move |_, g, sink| {
                let gx = sink.buf(x);
                for (i, &s) in src.iter().enumerate() {
                    gx[s] += g[i];
                }
            }),
            "period_fold",
        )
    }

    /// Column slice `x[:, start..end]` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || start >= end || end > xs[1] {
            return shape_err("slice_cols", format!("{xs:?}[{start}..{end}]"));
        }
        let (r, c, w) = (xs[0], xs[1], end - start);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        self.push(
            vec![r, w],
            out,
            &[x],
            Box::new(move |_, g, sink| {
                let gx = sink.buf(x);
                for i in 0..r {
                    for j in 0..w {
                        gx[i * c + start + j] += g[i * w + j];
                    }
                }
            }),
            "slice_cols",
        )
    }

    /// Column means of `x[N, D]`, shape `[1, D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return shape_err("mean_rows", format!("{xs:?}"));
        }
        let (n, d) = (xs[0], xs[1]);
        let xv = self.value(x);
        let mut out = vec![0.0f32; d];
        for r in 0..n {
            out.iter_mut().zip(&xv[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
        }
        out.iter_mut().for_each(|v| *v /= n as f32);
        self.push(
            vec![1, d],
            out,
            &[x],
            Box::new(move |_, g, sink| {
                let gx = sink.buf(x);
                for r in 0..n {
                    for j in 0..d {
                        gx[r * d + j] += g[j] / n as f32;
                    }
                }
            }),
            "mean_rows",
        )
    }

    /// Weight-normalised kernel `g[o] · v[o, ...] / ‖v[o, ...]‖`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let vs = self.shape(v).to_vec();
        let o = vs[0];
        if self.value(g).len() != o {
            return shape_err("weight_norm", format!("gain length vs {vs:?}"));
        }
        let vv = self.value(v);
        let gv = self.value(g);
        let per = vv.len() / o;
        let norms: Vec<f32> = vv.chunks(per).map(|r| dot(r, r).sqrt().max(1e-12)).collect();
        let mut out = vec![0.0f32; vv.len()];
        for r in 0..o {
            for j in 0..per {
                out[r * per + j] = gv[r] * vv[r * per + j] / norms[r];
            }
        }
        self.push(
            vs,
            out,
            &[v, g],
            Box::new(move |vals, gr, sink| {
                let vv = &vals[v.0].data;
                let gv = &vals[g.0].data;
                let mut gg = vec![0.0f32; o];
                let mut gvv = vec![0.0f32; vv.len()];
                for r in 0..o {
                    let row = &vv[r * per..(r + 1) * per];
                    let grow = &gr[r * per..(r + 1) * per];
                    let n = norms[r];
                    let proj = dot(grow, row) / n;
                    gg[r] = proj;
                    for j in 0..per {
                        gvv[r * per + j] = gv[r] / n * (grow[j] - proj * row[j] / n);
                    }
                }
                if sink.needs(v) {
                    sink.buf(v).iter_mut().zip(gvv).for_each(|(a, b)| *a += b);
                }
                if sink.needs(g) {
                    sink.buf(g).iter_mut().zip(gg).for_each(|(a, b)| *a += b);
                }
            }),
            "weight_norm",
        )
    }

    /// Row gather `x[idx[n], :]`; gradients of repeated rows accumulate.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= xs[0]) {
            return shape_err("gather_rows", format!("{xs:?} with {} indices", idx.len()));
        }
        let d = xs[1];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let idx = idx.to_vec();
        self.push(
            vec![idx.len(), d],
            out,
            &[x],
            Box::new(move |_, g, sink| {
                let gx = sink.buf(x);
                for (r, &i) in idx.iter().enumerate() {
                    gx[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }),
            "gather_rows",
        )
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

pub(crate) fn softmax_inplace(row: &mut [f32]) {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 1, 5], vec![1.0, -2.0, 3.0, 0.5, 4.0]).unwrap();
        let w = g.constant(&[1, 1, 1], vec![1.0]).unwrap();
        let y = g.conv1d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn uniform_cross_entropy_is_log_v() {
        let mut g = Graph::new();
        let v = 7;
        let logits = g.constant(&[3, v], vec![0.25; 3 * v]).unwrap();
        let ce = g.cross_entropy(logits, &[0, 3, 6], None).unwrap();
        assert!((g.scalar(ce) - (v as f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn conv_lengths_follow_formula() {
        assert_eq!(conv1d_out_len(100, 3, 1, 1, 1), Some(100));
        assert_eq!(conv1d_out_len(100, 5, 3, 2, 1), Some(34));
        assert_eq!(conv1d_out_len(2, 5, 1, 0, 1), None);
        assert_eq!(conv_transpose1d_out_len(10, 16, 8, 4), Some(80));
        assert_eq!(conv_transpose1d_out_len(10, 11, 5, 3), Some(50));
    }

    #[test]
    fn non_finite_forward_is_numerics_error() {
        let mut g = Graph::new();
        let x = g.constant(&[2], vec![1e30, 1e30]).unwrap();
        let y = g.constant(&[2], vec![1e30, 1e30]).unwrap();
        assert!(matches!(g.mul(x, y), Err(Error::Numerics(_))));
    }

    #[test]
    fn shape_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let x = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let w = g.constant(&[4, 2], vec![0.0; 8]).unwrap();
        assert!(matches!(g.linear(x, w, None), Err(Error::Shape(_))));
    }

    #[test]
    fn reflect_mirrors_without_repeating_edges() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }
}
