//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! read straight from a borrowed [`ParamStore`]; calling [`Tape::backward`]
//! on a scalar node returns the gradient of every parameter that fed it.
//! Attention and layer normalisation are single fused nodes so the tape stays
//! short for transformer-sized graphs.

use crate::mask::AttentionMask;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Mat, MatMut, MatRef};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    LogSoftmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ZeroRows {
        x: Var,
        keep: Vec<bool>,
    },
    Nll {
        x: Var,
        targets: Vec<Option<usize>>,
    },
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    /// The node for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Mat::zeros(0, 0), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols(), bm.cols(), "matmul_nt inner dimension");
        let mut out = Mat::zeros(am.rows(), bm.rows());
        gemm(1.0, MatRef::of(am), MatRef::of(bm).t(), 0.0, MatMut::of(&mut out));
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shapes");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `[1, cols]` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, out.cols()), "add_row bias shape");
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Multiplies `a` by the `[1, 1]` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).scalar_value();
        let mut out = self.value(a).clone();
        out.scale_assign(sv);
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let out = Mat::from_vec(
            src.rows(),
            src.cols(),
            src.data().iter().map(|x| x.exp()).collect(),
        );
        self.push(out, Op::Exp(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let out = Mat::from_vec(
            src.rows(),
            src.cols(),
            src.data()
                .iter()
                .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
                .collect(),
        );
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalisation (biased variance, eps [`LAYER_NORM_EPS`]).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), cols, "layer_norm gamma");
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[n, d]`, `k` is `[m, d]`, `v` is `[m, dv]`; both `d` and `dv`
    /// split evenly into `heads` blocks and each head scales its logits by
    /// `1 / sqrt(d / heads)`. A query row whose mask blocks every key yields
    /// a zero output row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttentionMask>) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qm.shape();
        let m = km.rows();
        let dv = vm.cols();
        assert_eq!(km.cols(), d, "attention key dim");
        assert_eq!(vm.rows(), m, "attention value rows");
        assert!(heads > 0 && d % heads == 0 && dv % heads == 0, "attention heads");
        if let Some(mask) = mask {
            assert_eq!(mask.shape(), (n, m), "attention mask shape");
        }
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(n, dv);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut p = Mat::zeros(n, m);
            gemm(
                scale,
                MatRef::cols_of(qm, h * dh, dh),
                MatRef::cols_of(km, h * dh, dh).t(),
                0.0,
                MatMut::of(&mut p),
            );
            for i in 0..n {
                let allowed = mask.map(|mk| mk.row(i));
                masked_softmax_in_place(p.row_mut(i), allowed);
            }
            gemm(
                1.0,
                MatRef::of(&p),
                MatRef::cols_of(vm, h * dvh, dvh),
                0.0,
                MatMut::cols_of(&mut out, h * dvh, dvh),
            );
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = src.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Scales each row to unit Euclidean length.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x: a, norms })
    }

    /// Rows `idx` of `table`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        self.push(out, Op::SliceRows { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Zeroes every row `r` with `keep[r] == false`.
    pub fn zero_rows(&mut self, x: Var, keep: &[bool]) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(keep.len(), out.rows(), "zero_rows length");
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.push(
            out,
            Op::ZeroRows {
                x,
                keep: keep.to_vec(),
            },
        )
    }

    /// `-sum_t x[t, targets[t]]` over rows whose target is `Some`.
    pub fn nll(&mut self, x: Var, targets: &[Option<usize>]) -> Var {
        let xm = self.value(x);
        assert_eq!(targets.len(), xm.rows(), "nll target length");
        let total: f64 = targets
            .iter()
            .enumerate()
            .filter_map(|(t, tgt)| tgt.map(|c| -xm.get(t, c)))
            .sum();
        self.push(
            Mat::scalar(total),
            Op::Nll {
                x,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Mat::scalar(s), Op::Sum(x))
    }

    /// Gradients of the scalar `root` with respect to every parameter.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads = Gradients::zeros_like(self.params);
        self.backward_into(root, 1.0, &mut grads);
        grads
    }

    /// Adds `scale * d(root)/d(param)` into `out`.
    pub fn backward_into(&self, root: Var, scale: f64, out: &mut Gradients) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut g: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        g[root.0] = Some(Mat::scalar(scale));
        for i in (0..=root.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.accumulate(*id, &dy, 1.0),
                Op::MatMul(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(am.rows(), am.cols());
                    gemm(1.0, MatRef::of(&dy), MatRef::of(bm).t(), 0.0, MatMut::of(&mut da));
                    let mut db = Mat::zeros(bm.rows(), bm.cols());
                    gemm(1.0, MatRef::of(am).t(), MatRef::of(&dy), 0.0, MatMut::of(&mut db));
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(am.rows(), am.cols());
                    gemm(1.0, MatRef::of(&dy), MatRef::of(bm), 0.0, MatMut::of(&mut da));
                    let mut db = Mat::zeros(bm.rows(), bm.cols());
                    gemm(1.0, MatRef::of(&dy).t(), MatRef::of(am), 0.0, MatMut::of(&mut db));
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Mat::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (s, v) in db.data_mut().iter_mut().zip(dy.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut g, *bias, db);
                    acc(&mut g, *a, dy);
                }
                Op::Scale(a, s) => {
                    let mut da = dy;
                    da.scale_assign(*s);
                    acc(&mut g, *a, da);
                }
                Op::MulScalar(a, s) => {
                    let am = self.value(*a);
                    let sv = self.value(*s).scalar_value();
                    let ds: f64 = dy.data().iter().zip(am.data()).map(|(x, y)| x * y).sum();
                    let mut da = dy;
                    da.scale_assign(sv);
                    acc(&mut g, *a, da);
                    acc(&mut g, *s, Mat::scalar(ds));
                }
                Op::Exp(a) => {
                    let mut da = dy;
                    for (d, y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y;
                    }
                    acc(&mut g, *a, da);
                }
                Op::Gelu(a) => {
                    let xm = self.value(*a);
                    let mut da = dy;
                    for (d, &x) in da.data_mut().iter_mut().zip(xm.data()) {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    }
                    acc(&mut g, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gamma).data();
                    let (rows, cols) = dy.shape();
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    let mut dx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for (r, &inv) in inv_std.iter().enumerate().take(rows) {
                        let dyr = dy.row(r);
                        let xh = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            dg.data_mut()[c] += dyr[c] * xh[c];
                            db.data_mut()[c] += dyr[c];
                            let dxh = dyr[c] * gm[c];
                            sum_d += dxh;
                            sum_dx += dxh * xh[c];
                        }
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let dxh = dyr[c] * gm[c];
                            out[c] = inv / n * (n * dxh - sum_d - xh[c] * sum_dx);
                        }
                    }
                    acc(&mut g, *gamma, dg);
                    acc(&mut g, *beta, db);
                    acc(&mut g, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qm.shape();
                    let m = km.rows();
                    let dv = vm.cols();
                    let dh = d / heads;
                    let dvh = dv / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(n, d);
                    let mut dk = Mat::zeros(m, d);
                    let mut dvm = Mat::zeros(m, dv);
                    for (h, p) in probs.iter().enumerate() {
                        gemm(
                            1.0,
                            MatRef::of(p).t(),
                            MatRef::cols_of(&dy, h * dvh, dvh),
                            0.0,
                            MatMut::cols_of(&mut dvm, h * dvh, dvh),
                        );
                        let mut dp = Mat::zeros(n, m);
                        gemm(
                            1.0,
                            MatRef::cols_of(&dy, h * dvh, dvh),
                            MatRef::cols_of(vm, h * dvh, dvh).t(),
                            0.0,
                            MatMut::of(&mut dp),
                        );
                        for i in 0..n {
                            let pr = p.row(i);
                            let dpr = dp.row_mut(i);
                            let dot: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                            for (ds, &pv) in dpr.iter_mut().zip(pr) {
                                *ds = pv * (*ds - dot);
                            }
                        }
                        gemm(
                            scale,
                            MatRef::of(&dp),
                            MatRef::cols_of(km, h * dh, dh),
                            0.0,
                            MatMut::cols_of(&mut dq, h * dh, dh),
                        );
                        gemm(
                            scale,
                            MatRef::of(&dp).t(),
                            MatRef::cols_of(qm, h * dh, dh),
                            0.0,
                            MatMut::cols_of(&mut dk, h * dh, dh),
                        );
                    }
                    acc(&mut g, *q, dq);
                    acc(&mut g, *k, dk);
                    acc(&mut g, *v, dvm);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut da = dy;
                    for r in 0..da.rows() {
                        let s: f64 = da.row(r).iter().sum();
                        let yr = y.row(r);
                        for (d, yv) in da.row_mut(r).iter_mut().zip(yr) {
                            *d -= yv.exp() * s;
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = dy;
                    for (r, &norm) in norms.iter().enumerate().take(dx.rows()) {
                        let yr = y.row(r);
                        let dot: f64 = dx.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (d, yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = (*d - yv * dot) / norm;
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Gather { table, idx } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows(), t.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, b) in dt.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *a += b;
                        }
                    }
                    acc(&mut g, *table, dt);
                }
                Op::SliceRows { x, start } => {
                    let xm = self.value(*x);
                    let mut dx = Mat::zeros(xm.rows(), xm.cols());
                    let c = xm.cols();
                    dx.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                    acc(&mut g, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        acc(&mut g, p, dy.slice_rows(offset, rows));
                        offset += rows;
                    }
                }
                Op::ZeroRows { x, keep } => {
                    let mut dx = dy;
                    for (r, &k) in keep.iter().enumerate() {
                        if !k {
                            dx.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Nll { x, targets } => {
                    let xm = self.value(*x);
                    let gs = dy.scalar_value();
                    let mut dx = Mat::zeros(xm.rows(), xm.cols());
                    for (t, tgt) in targets.iter().enumerate() {
                        if let Some(c) = tgt {
                            dx.set(t, *c, -gs);
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(&mut g, *x, Mat::filled(r, c, dy.scalar_value()));
                }
            }
        }
    }
}

fn acc(g: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Softmax over `row` restricted to `allowed` entries; blocked entries and
/// fully blocked rows become zero.
pub(crate) fn masked_softmax_in_place(row: &mut [f64], allowed: Option<&[bool]>) {
    let visible = |j: usize| allowed.is_none_or(|a| a[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if visible(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if visible(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(store: &mut ParamStore, id: ParamId, f: &dyn Fn(&ParamStore) -> f64) -> Mat {
        let h = 1e-5;
        let n = store.get(id).len();
        let (r, c) = store.get(id).shape();
        let mut out = Mat::zeros(r, c);
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let fp = f(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let fm = f(store);
            store.get_mut(id).data_mut()[i] = orig;
            out.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Mat, b: &Mat) -> f64 {
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        diff / a.norm().max(b.norm()).max(1e-12)
    }

    fn seq(rows: usize, cols: usize, seed: f64) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64 + 1.0) * seed).sin())
                .collect(),
        )
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut store = ParamStore::new();
        let a = store.add("a", seq(3, 4, 0.7), true);
        let b = store.add("b", seq(4, 4, 1.3), true);
        let g = store.add("g", seq(1, 4, 0.4), false);
        let bias = store.add("bias", seq(1, 4, 2.1), false);
        let s = store.add("s", Mat::scalar(0.3), false);
        let table = store.add("table", seq(5, 4, 0.9), true);
        let mask = AttentionMask::from_fn(3, 5, |i, j| (i + j) % 3 != 0 || j == 0);

        let f = |store: &ParamStore, want_grad: bool| -> (f64, Option<Gradients>) {
            let mut t = Tape::new(store);
            let (a, b, g, bias, s, table) = (
                t.param(a),
                t.param(b),
                t.param(g),
                t.param(bias),
                t.param(s),
                t.param(table),
            );
            let ab = t.matmul(a, b);
            let abt = t.matmul_nt(a, b);
            let h = t.add_row(ab, bias);
            let h = t.gelu(h);
            let ln = t.layer_norm(h, g, bias);
            let kv = t.gather(table, &[4, 0, 2, 2, 1]);
            let att = t.attention(ln, kv, kv, 2, Some(&mask));
            let es = t.exp(s);
            let sc = t.mul_scalar(att, es);
            let sc = t.scale(sc, 1.7);
            let x = t.add(sc, a);
            let n = t.l2_normalize(x);
            let first = t.slice_rows(n, 1, 2);
            let cat = t.concat_rows(&[first, abt]);
            let z = t.zero_rows(cat, &[true, false, true, true, true]);
            let shifted = t.add_row(z, g);
            let lp = t.log_softmax(shifted);
            let nll = t.nll(lp, &[Some(1), None, Some(0), Some(2), Some(1)]);
            let extra = t.sum(ln);
            let extra = t.scale(extra, 0.1);
            let loss = t.add(nll, extra);
            let v = t.value(loss).scalar_value();
            (v, want_grad.then(|| t.backward(loss)))
        };
        let (_, grads) = f(&store, true);
        let grads = grads.unwrap();
        for id in [a, b, g, bias, s, table] {
            let num = numeric_grad(&mut store, id, &|st| f(st, false).0);
            let ana = grads.get(id).unwrap();
            let e = rel_err(ana, &num);
            assert!(e < 1e-6, "{}: rel err {e}", store.entry(id).name);
        }
    }

    #[test]
    fn fully_masked_rows_are_zero() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let q = t.constant(seq(2, 4, 0.3));
        let k = t.constant(seq(3, 4, 0.5));
        let mask = AttentionMask::from_fn(2, 3, |i, _| i == 0);
        let out = t.attention(q, k, k, 1, Some(&mask));
        assert!(t.value(out).row(1).iter().all(|&x| x == 0.0));
        assert!(t.value(out).row(0).iter().any(|&x| x != 0.0));
    }
}
