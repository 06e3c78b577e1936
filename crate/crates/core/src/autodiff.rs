//! Minimal reverse-mode differentiation over the array operations the layers
//! need, plus named parameter storage and an Adam optimizer.
//!
//! One [`Tape`] records one evaluation: an append-only list of primitive
//! operations with their forward values. Gradients of a scalar loss with
//! respect to every registered parameter come from a single reverse sweep.
//! Tapes are never shared between evaluations; data-parallel training builds
//! one tape per sample and reduces gradients in a fixed sample order.
//!
//! The primitive set is deliberately closed: exactly the operations used by
//! the radial networks, attention, self-interaction, and losses, each with a
//! finite-difference-tested backward rule. No broadcasting beyond what the
//! layers use.

use crate::error::{Error, Result};
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Ix2, IxDyn};
use std::collections::HashMap;
use std::sync::Arc;

pub type Value = Arc<ArrayD<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SqrtEps(NodeId),
    SumAll(NodeId),
    SumLast(NodeId),
    Reshape(NodeId),
    /// `y = a * s` where `s`'s shape is a leading prefix of `a`'s.
    BcastMulPrefix(NodeId, NodeId),
    /// `y = x w^T + b` over rows.
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// Row-wise layer norm with learnable affine.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// `y[n,o,m] = Σ_i w[o,i] f[n,i,m]` — shared per-degree channel mixing.
    ChannelMix {
        w: NodeId,
        f: NodeId,
    },
    /// `y[n,o,m] = Σ_i w[n,o,i] f[n,i,m]` — per-node mixing weights.
    NodeMatmul {
        w: NodeId,
        f: NodeId,
    },
    /// `y[n,c,d] = Σ_m f[n,c,m] f[n,d,m]` — per-node channel Gram matrix.
    Gram(NodeId),
    GatherRows {
        f: NodeId,
        idx: Arc<Vec<usize>>,
    },
    ScatterAddRows {
        m: NodeId,
        idx: Arc<Vec<usize>>,
    },
    /// Softmax over contiguous row segments, independently per column.
    SegmentSoftmax {
        logits: NodeId,
        offsets: Arc<Vec<usize>>,
    },
    /// `y[e,o,m] = Σ_{J,i,n} r[e,J,i,o] basis[e,J,m,n] f[e,i,n]` with a
    /// constant basis. The fused contraction of radial coefficients with the
    /// equivariant basis blocks and gathered source features.
    KernelMessage {
        radial: NodeId,
        basis: Value,
        feats: NodeId,
    },
    /// Max over axis 0 of a `[n, c]` array; argmax rows saved for backward.
    MaxAxis0 {
        f: NodeId,
        argmax: Vec<usize>,
    },
}



struct Node {
    op: Op,
    value: Value,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d value")
}

fn as2_mut(a: &mut ArrayD<f64>) -> ArrayViewMut2<'_, f64> {
    a.view_mut().into_dimensionality::<Ix2>().expect("2-d value")
}

/// Recording tape. One per evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Extracts a scalar value (0-d array).
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.sum()
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>) -> NodeId {
        self.push_shared(op, Arc::new(value))
    }

    // Every tape value is kept in standard (row-major, contiguous) layout so
    // flat-slice kernels and reshapes are always valid. ndarray's `dot` can
    // return other layouts for thin matrices.
    fn push_shared(&mut self, op: Op, value: Value) -> NodeId {
        let value = if value.is_standard_layout() {
            value
        } else {
            Arc::new(value.as_standard_layout().into_owned())
        };
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn constant_shared(&mut self, value: Value) -> NodeId {
        self.push_shared(Op::Const, value)
    }

    /// Registers a parameter leaf; gradients accumulate under its store index.
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> NodeId {
        self.push_shared(Op::Param(idx), store.value_arc(idx))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        Ok((av.clone(), bv.clone()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = self.binary_same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), av + bv))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = self.binary_same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), av - bv))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = self.binary_same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), av * bv))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = self.binary_same_shape("div", a, b)?;
        Ok(self.push(Op::Div(a, b), av / bv))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    /// `√(x + eps)` elementwise; the epsilon removes the 0/0 singularity when
    /// the result is used to normalize.
    pub fn sqrt_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.value(a).mapv(|x| (x + eps).sqrt());
        self.push(Op::SqrtEps(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(
            Op::SumAll(a),
            ArrayD::from_elem(IxDyn(&[]), s),
        )
    }

    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() == 0 {
            return Err(shape_err("sum_last", "0-d input".into()));
        }
        let axis = av.ndim() - 1;
        let v = av.sum_axis(ndarray::Axis(axis));
        Ok(self.push(Op::SumLast(a), v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        let total: usize = shape.iter().product();
        if av.len() != total {
            return Err(shape_err(
                "reshape",
                format!("{} elements into {:?}", av.len(), shape),
            ));
        }
        let v = av
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("checked length");
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Multiplies `a` by `s`, broadcasting `s` over the trailing axes of `a`.
    pub fn bcast_mul_prefix(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let sv = self.value(s);
        if sv.ndim() > av.ndim() || av.shape()[..sv.ndim()] != *sv.shape() {
            return Err(shape_err(
                "bcast_mul_prefix",
                format!("{:?} not a prefix of {:?}", sv.shape(), av.shape()),
            ));
        }
        let rest: usize = av.shape()[sv.ndim()..].iter().product();
        let mut out = av.clone();
        {
            let flat = out.as_slice_mut().expect("standard layout");
            let sflat = sv.as_slice().expect("standard layout");
            for (i, block) in flat.chunks_mut(rest).enumerate() {
                let f = sflat[i];
                for v in block {
                    *v *= f;
                }
            }
        }
        Ok(self.push(Op::BcastMulPrefix(a, s), out))
    }

    /// `y = x w^T + b`: `x [r, fi]`, `w [fo, fi]`, `b [fo]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        if xv.ndim() != 2 || wv.ndim() != 2 || bv.ndim() != 1 {
            return Err(shape_err("linear", "expects x:2d w:2d b:1d".into()));
        }
        let (_, fi) = (xv.shape()[0], xv.shape()[1]);
        let (fo, wfi) = (wv.shape()[0], wv.shape()[1]);
        if wfi != fi || bv.shape()[0] != fo {
            return Err(shape_err(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let mut y = as2(xv).dot(&as2(wv).t());
        for mut row in y.rows_mut() {
            for (o, v) in row.iter_mut().enumerate() {
                *v += bv[[o]];
            }
        }
        Ok(self.push(Op::Linear { x, w, b }, y.into_dyn()))
    }

    /// Row-wise layer norm over the last axis of a 2-d array, with affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if xv.ndim() != 2 || gv.ndim() != 1 || bv.ndim() != 1 {
            return Err(shape_err("layer_norm", "expects x:2d gamma:1d beta:1d".into()));
        }
        let w = xv.shape()[1];
        if gv.shape()[0] != w || bv.shape()[0] != w {
            return Err(shape_err(
                "layer_norm",
                format!("width {w} vs affine {:?}/{:?}", gv.shape(), bv.shape()),
            ));
        }
        let x2 = as2(xv);
        let mut y = x2.to_owned();
        for mut row in y.rows_mut() {
            let mean = row.sum() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gv[[c]] + bv[[c]];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, y.into_dyn()))
    }

    /// `y[n,o,m] = Σ_i w[o,i] f[n,i,m]`.
    pub fn channel_mix(&mut self, w: NodeId, f: NodeId) -> Result<NodeId> {
        let wv = self.value(w);
        let fv = self.value(f);
        if wv.ndim() != 2 || fv.ndim() != 3 {
            return Err(shape_err("channel_mix", "expects w:2d f:3d".into()));
        }
        let (co, ci) = (wv.shape()[0], wv.shape()[1]);
        let (n, fci, m) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
        if fci != ci {
            return Err(shape_err(
                "channel_mix",
                format!("w {:?} vs f {:?}", wv.shape(), fv.shape()),
            ));
        }
        let mut y = ArrayD::zeros(IxDyn(&[n, co, m]));
        {
            let ws = wv.as_slice().expect("standard layout");
            let fs = fv.as_slice().expect("standard layout");
            let ys = y.as_slice_mut().expect("standard layout");
            for nn in 0..n {
                for o in 0..co {
                    let yrow = &mut ys[(nn * co + o) * m..(nn * co + o + 1) * m];
                    for i in 0..ci {
                        let wv = ws[o * ci + i];
                        if wv != 0.0 {
                            let frow = &fs[(nn * ci + i) * m..(nn * ci + i + 1) * m];
                            for (yv, fv) in yrow.iter_mut().zip(frow) {
                                *yv += wv * fv;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::ChannelMix { w, f }, y))
    }

    /// `y[n,o,m] = Σ_i w[n,o,i] f[n,i,m]`.
    pub fn node_matmul(&mut self, w: NodeId, f: NodeId) -> Result<NodeId> {
        let wv = self.value(w);
        let fv = self.value(f);
        if wv.ndim() != 3 || fv.ndim() != 3 {
            return Err(shape_err("node_matmul", "expects w:3d f:3d".into()));
        }
        let (n, co, ci) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        let (fn_, fci, m) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
        if fn_ != n || fci != ci {
            return Err(shape_err(
                "node_matmul",
                format!("w {:?} vs f {:?}", wv.shape(), fv.shape()),
            ));
        }
        let mut y = ArrayD::zeros(IxDyn(&[n, co, m]));
        for nn in 0..n {
            for o in 0..co {
                for i in 0..ci {
                    let wv_ = wv[[nn, o, i]];
                    if wv_ != 0.0 {
                        for mm in 0..m {
                            y[[nn, o, mm]] += wv_ * fv[[nn, i, mm]];
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::NodeMatmul { w, f }, y))
    }

    /// Per-node channel Gram matrix `y[n,c,d] = Σ_m f[n,c,m] f[n,d,m]`.
    pub fn gram(&mut self, f: NodeId) -> Result<NodeId> {
        let fv = self.value(f);
        if fv.ndim() != 3 {
            return Err(shape_err("gram", "expects f:3d".into()));
        }
        let (n, c, m) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
        let mut y = ArrayD::zeros(IxDyn(&[n, c, c]));
        for nn in 0..n {
            for a in 0..c {
                for b in 0..c {
                    let mut acc = 0.0;
                    for mm in 0..m {
                        acc += fv[[nn, a, mm]] * fv[[nn, b, mm]];
                    }
                    y[[nn, a, b]] = acc;
                }
            }
        }
        Ok(self.push(Op::Gram(f), y))
    }

    /// `y[e, ...] = f[idx[e], ...]`.
    pub fn gather_rows(&mut self, f: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let fv = self.value(f);
        if fv.ndim() == 0 {
            return Err(shape_err("gather_rows", "0-d input".into()));
        }
        let n = fv.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", format!("index {bad} >= {n}")));
        }
        let rest: usize = fv.shape()[1..].iter().product();
        let mut shape = fv.shape().to_vec();
        shape[0] = idx.len();
        let mut y = ArrayD::zeros(IxDyn(&shape));
        {
            let fs = fv.as_slice().expect("standard layout");
            let ys = y.as_slice_mut().expect("standard layout");
            for (e, &i) in idx.iter().enumerate() {
                ys[e * rest..(e + 1) * rest].copy_from_slice(&fs[i * rest..(i + 1) * rest]);
            }
        }
        Ok(self.push(Op::GatherRows { f, idx }, y))
    }

    /// `y[i, ...] = Σ_{e : idx[e] = i} m[e, ...]`, accumulated in edge order.
    pub fn scatter_add_rows(
        &mut self,
        m: NodeId,
        idx: Arc<Vec<usize>>,
        n_rows: usize,
    ) -> Result<NodeId> {
        let mv = self.value(m);
        if mv.ndim() == 0 || mv.shape()[0] != idx.len() {
            return Err(shape_err(
                "scatter_add_rows",
                format!("{:?} rows vs {} indices", mv.shape(), idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(shape_err("scatter_add_rows", format!("index {bad} >= {n_rows}")));
        }
        let rest: usize = mv.shape()[1..].iter().product();
        let mut shape = mv.shape().to_vec();
        shape[0] = n_rows;
        let mut y = ArrayD::zeros(IxDyn(&shape));
        {
            let ms = mv.as_slice().expect("standard layout");
            let ys = y.as_slice_mut().expect("standard layout");
            for (e, &i) in idx.iter().enumerate() {
                let src = &ms[e * rest..(e + 1) * rest];
                let dst = &mut ys[i * rest..(i + 1) * rest];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(self.push(Op::ScatterAddRows { m, idx }, y))
    }

    /// Numerically stabilized softmax over contiguous row segments
    /// (`offsets[i]..offsets[i+1]`), independently per column. Every segment
    /// must be nonempty.
    pub fn segment_softmax(&mut self, logits: NodeId, offsets: Arc<Vec<usize>>) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.ndim() != 2 {
            return Err(shape_err("segment_softmax", "expects logits:2d".into()));
        }
        let e = lv.shape()[0];
        let h = lv.shape()[1];
        if *offsets.last().unwrap_or(&0) != e || offsets.first() != Some(&0) {
            return Err(shape_err(
                "segment_softmax",
                format!("offsets {:?} do not cover {e} rows", offsets.len()),
            ));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "neighborhoods",
                "every node needs at least one neighbor for attention",
            ));
        }
        let mut y = lv.clone();
        {
            let mut y2 = as2_mut(&mut y);
            for seg in offsets.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                for col in 0..h {
                    let mut mx = f64::NEG_INFINITY;
                    for r in a..b {
                        mx = mx.max(y2[[r, col]]);
                    }
                    let mut z = 0.0;
                    for r in a..b {
                        let v = (y2[[r, col]] - mx).exp();
                        y2[[r, col]] = v;
                        z += v;
                    }
                    for r in a..b {
                        y2[[r, col]] /= z;
                    }
                }
            }
        }
        Ok(self.push(Op::SegmentSoftmax { logits, offsets }, y))
    }

    /// Fused kernel application:
    /// `y[e,o,m] = Σ_{J,i,n} radial[e,J,i,o] · basis[e,J,m,n] · feats[e,i,n]`.
    pub fn kernel_message(&mut self, radial: NodeId, basis: Value, feats: NodeId) -> Result<NodeId> {
        let rv = self.value(radial);
        let fv = self.value(feats);
        if rv.ndim() != 4 || basis.ndim() != 4 || fv.ndim() != 3 {
            return Err(shape_err(
                "kernel_message",
                "expects radial:4d basis:4d feats:3d".into(),
            ));
        }
        let (e, jn, ci, co) = (rv.shape()[0], rv.shape()[1], rv.shape()[2], rv.shape()[3]);
        let (be, bj, ml, mk) = (
            basis.shape()[0],
            basis.shape()[1],
            basis.shape()[2],
            basis.shape()[3],
        );
        let (fe, fci, fmk) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
        if be != e || bj != jn || fe != e || fci != ci || fmk != mk {
            return Err(shape_err(
                "kernel_message",
                format!(
                    "radial {:?}, basis {:?}, feats {:?}",
                    rv.shape(),
                    basis.shape(),
                    fv.shape()
                ),
            ));
        }
        let mut y = ArrayD::zeros(IxDyn(&[e, co, ml]));
        // contract basis with features first: t[J,i,m] = Σ_n basis[J,m,n] f[i,n]
        let mut t = vec![0.0; jn * ci * ml];
        for ee in 0..e {
            t.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..jn {
                for i in 0..ci {
                    for m in 0..ml {
                        let mut acc = 0.0;
                        for n in 0..mk {
                            acc += basis[[ee, j, m, n]] * fv[[ee, i, n]];
                        }
                        t[(j * ci + i) * ml + m] = acc;
                    }
                }
            }
            for o in 0..co {
                for m in 0..ml {
                    let mut acc = 0.0;
                    for j in 0..jn {
                        for i in 0..ci {
                            acc += rv[[ee, j, i, o]] * t[(j * ci + i) * ml + m];
                        }
                    }
                    y[[ee, o, m]] = acc;
                }
            }
        }
        Ok(self.push(Op::KernelMessage { radial, basis, feats }, y))
    }

    /// Column maxima of a `[n, c]` array.
    pub fn max_axis0(&mut self, f: NodeId) -> Result<NodeId> {
        let fv = self.value(f);
        if fv.ndim() != 2 || fv.shape()[0] == 0 {
            return Err(shape_err("max_axis0", "expects nonempty 2-d input".into()));
        }
        let (n, c) = (fv.shape()[0], fv.shape()[1]);
        let mut argmax = vec![0usize; c];
        let mut y = ArrayD::zeros(IxDyn(&[c]));
        for col in 0..c {
            let mut best = fv[[0, col]];
            for r in 1..n {
                if fv[[r, col]] > best {
                    best = fv[[r, col]];
                    argmax[col] = r;
                }
            }
            y[[col]] = best;
        }
        Ok(self.push(Op::MaxAxis0 { f, argmax }, y))
    }

    /// Reverse sweep: gradients of a scalar loss with respect to every
    /// parameter in the store (zeros for parameters the loss does not reach).
    pub fn grad(&self, loss: NodeId, store: &ParamStore) -> Result<Vec<ArrayD<f64>>> {
        if !self.value(loss).shape().is_empty() {
            return Err(shape_err("grad", "loss must be a scalar (0-d) node".into()));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        let mut param_grads: Vec<ArrayD<f64>> = store
            .shapes()
            .iter()
            .map(|s| ArrayD::zeros(IxDyn(s)))
            .collect();

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Const => {}
                Op::Param(p) => {
                    param_grads[*p] += &g;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).clone();
                    let bv = self.value(*b).clone();
                    accumulate(&mut grads, *a, &g * &bv);
                    accumulate(&mut grads, *b, &g * &av);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let y = &node.value;
                    accumulate(&mut grads, *a, &g / bv);
                    accumulate(&mut grads, *b, -(&g * &(&**y / bv)));
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let mut d = g;
                    d.zip_mut_with(av, |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::SqrtEps(a) => {
                    let y = &node.value;
                    let mut d = g;
                    d.zip_mut_with(y, |gv, &yv| *gv *= 0.5 / yv);
                    accumulate(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let gs = g.sum();
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, ArrayD::from_elem(av.raw_dim(), gs));
                }
                Op::SumLast(a) => {
                    let av = self.value(*a);
                    let m = *av.shape().last().expect("nonzero ndim");
                    let mut d = ArrayD::zeros(av.raw_dim());
                    {
                        let ds = d.as_slice_mut().expect("standard layout");
                        let gs = g.as_slice().expect("standard layout");
                        for (i, block) in ds.chunks_mut(m).enumerate() {
                            block.fill(gs[i]);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape(a) => {
                    let av = self.value(*a);
                    let d = g
                        .into_shape_with_order(av.raw_dim())
                        .expect("same length");
                    accumulate(&mut grads, *a, d);
                }
                Op::BcastMulPrefix(a, s) => {
                    let av = self.value(*a);
                    let sv = self.value(*s);
                    let rest: usize = av.shape()[sv.ndim()..].iter().product();
                    let mut da = g.clone();
                    let mut ds = ArrayD::zeros(sv.raw_dim());
                    {
                        let das = da.as_slice_mut().expect("standard layout");
                        let gs = g.as_slice().expect("standard layout");
                        let avs = av.as_slice().expect("standard layout");
                        let svs = sv.as_slice().expect("standard layout");
                        let dss = ds.as_slice_mut().expect("standard layout");
                        for i in 0..svs.len() {
                            let f = svs[i];
                            let mut acc = 0.0;
                            for r in 0..rest {
                                let k = i * rest + r;
                                das[k] = gs[k] * f;
                                acc += gs[k] * avs[k];
                            }
                            dss[i] = acc;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *s, ds);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                    let dx = g2.dot(&as2(wv));
                    let dw = g2.t().dot(&as2(xv));
                    let db = g2.sum_axis(ndarray::Axis(0));
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *w, dw.into_dyn());
                    accumulate(&mut grads, *b, db.into_dyn());
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let x2 = as2(xv);
                    let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                    let (r, w) = x2.dim();
                    let mut dx = ndarray::Array2::<f64>::zeros((r, w));
                    let mut dgamma = ndarray::Array1::<f64>::zeros(w);
                    let mut dbeta = ndarray::Array1::<f64>::zeros(w);
                    for rr in 0..r {
                        let row = x2.row(rr);
                        let mean = row.sum() / w as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                            / w as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // xhat and the two reduction terms
                        let mut m1 = 0.0; // mean of dxhat
                        let mut m2 = 0.0; // mean of dxhat * xhat
                        let mut dxhat = vec![0.0; w];
                        let mut xhat = vec![0.0; w];
                        for c in 0..w {
                            xhat[c] = (row[c] - mean) * inv;
                            dxhat[c] = g2[[rr, c]] * gv[[c]];
                            dgamma[c] += g2[[rr, c]] * xhat[c];
                            dbeta[c] += g2[[rr, c]];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * xhat[c];
                        }
                        m1 /= w as f64;
                        m2 /= w as f64;
                        for c in 0..w {
                            dx[[rr, c]] = inv * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *gamma, dgamma.into_dyn());
                    accumulate(&mut grads, *beta, dbeta.into_dyn());
                }
                Op::ChannelMix { w, f } => {
                    let wv = self.value(*w);
                    let fv = self.value(*f);
                    let (co, ci) = (wv.shape()[0], wv.shape()[1]);
                    let (n, m) = (fv.shape()[0], fv.shape()[2]);
                    let mut dw = ArrayD::zeros(wv.raw_dim());
                    let mut df = ArrayD::zeros(fv.raw_dim());
                    for nn in 0..n {
                        for o in 0..co {
                            for i in 0..ci {
                                let wcur = wv[[o, i]];
                                let mut acc = 0.0;
                                for mm in 0..m {
                                    let gm = g[[nn, o, mm]];
                                    acc += gm * fv[[nn, i, mm]];
                                    df[[nn, i, mm]] += wcur * gm;
                                }
                                dw[[o, i]] += acc;
                            }
                        }
                    }
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *f, df);
                }
                Op::NodeMatmul { w, f } => {
                    let wv = self.value(*w);
                    let fv = self.value(*f);
                    let (n, co, ci) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                    let m = fv.shape()[2];
                    let mut dw = ArrayD::zeros(wv.raw_dim());
                    let mut df = ArrayD::zeros(fv.raw_dim());
                    for nn in 0..n {
                        for o in 0..co {
                            for i in 0..ci {
                                let wcur = wv[[nn, o, i]];
                                let mut acc = 0.0;
                                for mm in 0..m {
                                    let gm = g[[nn, o, mm]];
                                    acc += gm * fv[[nn, i, mm]];
                                    df[[nn, i, mm]] += wcur * gm;
                                }
                                dw[[nn, o, i]] += acc;
                            }
                        }
                    }
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *f, df);
                }
                Op::Gram(f) => {
                    let fv = self.value(*f);
                    let (n, c, m) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
                    let mut df = ArrayD::zeros(fv.raw_dim());
                    for nn in 0..n {
                        for a in 0..c {
                            for d in 0..c {
                                let coeff = g[[nn, a, d]] + g[[nn, d, a]];
                                if coeff != 0.0 {
                                    for mm in 0..m {
                                        df[[nn, a, mm]] += coeff * fv[[nn, d, mm]];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *f, df);
                }
                Op::GatherRows { f, idx } => {
                    let fv = self.value(*f);
                    let rest: usize = fv.shape()[1..].iter().product();
                    let mut df = ArrayD::zeros(fv.raw_dim());
                    {
                        let dfs = df.as_slice_mut().expect("standard layout");
                        let gs = g.as_slice().expect("standard layout");
                        for (e, &i) in idx.iter().enumerate() {
                            let src = &gs[e * rest..(e + 1) * rest];
                            let dst = &mut dfs[i * rest..(i + 1) * rest];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    accumulate(&mut grads, *f, df);
                }
                Op::ScatterAddRows { m, idx } => {
                    let mv = self.value(*m);
                    let rest: usize = mv.shape()[1..].iter().product();
                    let mut dm = ArrayD::zeros(mv.raw_dim());
                    {
                        let dms = dm.as_slice_mut().expect("standard layout");
                        let gs = g.as_slice().expect("standard layout");
                        for (e, &i) in idx.iter().enumerate() {
                            let src = &gs[i * rest..(i + 1) * rest];
                            let dst = &mut dms[e * rest..(e + 1) * rest];
                            dst.copy_from_slice(src);
                        }
                    }
                    accumulate(&mut grads, *m, dm);
                }
                Op::SegmentSoftmax { logits, offsets } => {
                    let y = &node.value;
                    let h = y.shape()[1];
                    let mut dl = ArrayD::zeros(y.raw_dim());
                    for seg in offsets.windows(2) {
                        let (a, b) = (seg[0], seg[1]);
                        for col in 0..h {
                            let mut dot = 0.0;
                            for r in a..b {
                                dot += y[[r, col]] * g[[r, col]];
                            }
                            for r in a..b {
                                dl[[r, col]] = y[[r, col]] * (g[[r, col]] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::KernelMessage { radial, basis, feats } => {
                    let rv = self.value(*radial);
                    let fv = self.value(*feats);
                    let (e, jn, ci, co) =
                        (rv.shape()[0], rv.shape()[1], rv.shape()[2], rv.shape()[3]);
                    let (ml, mk) = (basis.shape()[2], basis.shape()[3]);
                    let mut dr = ArrayD::zeros(rv.raw_dim());
                    let mut df = ArrayD::zeros(fv.raw_dim());
                    let mut t = vec![0.0; jn * ci * ml];
                    let mut u = vec![0.0; jn * ci * ml];
                    for ee in 0..e {
                        // recompute t[J,i,m] = Σ_n basis[J,m,n] f[i,n]
                        for j in 0..jn {
                            for i in 0..ci {
                                for m in 0..ml {
                                    let mut acc = 0.0;
                                    for n in 0..mk {
                                        acc += basis[[ee, j, m, n]] * fv[[ee, i, n]];
                                    }
                                    t[(j * ci + i) * ml + m] = acc;
                                }
                            }
                        }
                        // u[J,i,m] = Σ_o radial[J,i,o] g[o,m]
                        for j in 0..jn {
                            for i in 0..ci {
                                for m in 0..ml {
                                    let mut acc = 0.0;
                                    for o in 0..co {
                                        acc += rv[[ee, j, i, o]] * g[[ee, o, m]];
                                    }
                                    u[(j * ci + i) * ml + m] = acc;
                                }
                            }
                        }
                        // dr[J,i,o] = Σ_m g[o,m] t[J,i,m]
                        for j in 0..jn {
                            for i in 0..ci {
                                for o in 0..co {
                                    let mut acc = 0.0;
                                    for m in 0..ml {
                                        acc += g[[ee, o, m]] * t[(j * ci + i) * ml + m];
                                    }
                                    dr[[ee, j, i, o]] = acc;
                                }
                            }
                        }
                        // df[i,n] = Σ_{J,m} u[J,i,m] basis[J,m,n]
                        for i in 0..ci {
                            for n in 0..mk {
                                let mut acc = 0.0;
                                for j in 0..jn {
                                    for m in 0..ml {
                                        acc += u[(j * ci + i) * ml + m] * basis[[ee, j, m, n]];
                                    }
                                }
                                df[[ee, i, n]] = acc;
                            }
                        }
                    }
                    accumulate(&mut grads, *radial, dr);
                    accumulate(&mut grads, *feats, df);
                }
                Op::MaxAxis0 { f, argmax } => {
                    let fv = self.value(*f);
                    let mut df = ArrayD::zeros(fv.raw_dim());
                    for (col, &row) in argmax.iter().enumerate() {
                        df[[row, col]] += g[[col]];
                    }
                    accumulate(&mut grads, *f, df);
                }
            }
        }
        Ok(param_grads)
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot @ None => {
            *slot = Some(if delta.is_standard_layout() {
                delta
            } else {
                delta.as_standard_layout().into_owned()
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter storage and optimizer
// ---------------------------------------------------------------------------

/// Named parameter arrays. Registration order is the canonical index order;
/// names are unique.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Value>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let idx = self.values.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, idx: usize) -> &ArrayD<f64> {
        &self.values[idx]
    }

    pub fn value_arc(&self, idx: usize) -> Value {
        self.values[idx].clone()
    }

    pub fn set_value(&mut self, idx: usize, value: ArrayD<f64>) {
        self.values[idx] = Arc::new(value);
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        Arc::make_mut(&mut self.values[idx])
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.values.iter().map(|v| v.shape().to_vec()).collect()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Adam with bias correction. Deterministic; state arrays are aligned with
/// the parameter store's index order.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store
                .shapes()
                .iter()
                .map(|s| ArrayD::zeros(IxDyn(s)))
                .collect(),
            v: store
                .shapes()
                .iter()
                .map(|s| ArrayD::zeros(IxDyn(s)))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> (&[ArrayD<f64>], &[ArrayD<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// One update. Rejects non-finite gradients, naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[ArrayD<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid("gradient count mismatch"));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}`",
                    store.names()[i]
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            let v = &mut self.v[i];
            v.zip_mut_with(g, |vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv
            });
            let p = store.value_mut(i);
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(&mut *p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Central finite-difference derivative of `f` with respect to one scalar
/// entry of one parameter.
pub fn finite_diff<F>(
    store: &mut ParamStore,
    param: usize,
    elem: usize,
    h: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let orig = store.value(param).as_slice().expect("standard layout")[elem];
    set_elem(store, param, elem, orig + h);
    let hi = f(store)?;
    set_elem(store, param, elem, orig - h);
    let lo = f(store)?;
    set_elem(store, param, elem, orig);
    Ok((hi - lo) / (2.0 * h))
}

fn set_elem(store: &mut ParamStore, param: usize, elem: usize, value: f64) {
    store.value_mut(param).as_slice_mut().expect("standard layout")[elem] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut impl Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks tape gradients of `build` (wired to a scalar) against central
    /// finite differences on every parameter entry.
    fn check_grads<F>(store: &mut ParamStore, build: F, tol: f64)
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store).unwrap();
        let grads = tape.grad(loss, store).unwrap();
        for p in 0..store.len() {
            let n = store.value(p).len();
            for e in 0..n {
                let fd = finite_diff(store, p, e, 1e-5, |s| {
                    let mut t = Tape::new();
                    let id = build(&mut t, s).unwrap();
                    Ok(t.scalar(id))
                })
                .unwrap();
                let an = grads[p].as_slice().unwrap()[e];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "param {p} elem {e}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn closed_form_quadratic_gradient() {
        // loss = 1/2 ||W x - y||^2, dW = (Wx - y) x^T
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut store = ParamStore::new();
        let w = store.register("w", rand_arr(&[3, 4], &mut rng)).unwrap();
        let x = rand_arr(&[1, 4], &mut rng);
        let y = rand_arr(&[1, 3], &mut rng);

        let mut tape = Tape::new();
        let wid = tape.param(&store, w);
        let xid = tape.constant(x.clone());
        let yid = tape.constant(y.clone());
        let zero_b = tape.constant(ArrayD::zeros(IxDyn(&[3])));
        let pred = tape.linear(xid, wid, zero_b).unwrap();
        let diff = tape.sub(pred, yid).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.grad(loss, &store).unwrap();

        for o in 0..3 {
            for i in 0..4 {
                let mut r = 0.0;
                for k in 0..4 {
                    r += store.value(w)[[o, k]] * x[[0, k]];
                }
                let expect = (r - y[[0, o]]) * x[[0, i]];
                assert!((grads[w][[o, i]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_loss_zero_gradient() {
        let mut store = ParamStore::new();
        store
            .register("w", ArrayD::zeros(IxDyn(&[2, 2])))
            .unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(ArrayD::from_elem(IxDyn(&[]), 3.5));
        let loss = tape.scale(c, 2.0);
        let grads = tape.grad(loss, &store).unwrap();
        assert!(grads[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        store.register("a", rand_arr(&[3, 4], &mut rng)).unwrap();
        store
            .register("b", rand_arr(&[3, 4], &mut rng).mapv(|v| v + 2.5))
            .unwrap();
        check_grads(
            &mut store,
            |t, s| {
                let a = t.param(s, 0);
                let b = t.param(s, 1);
                let m = t.mul(a, b)?;
                let d = t.div(m, b)?;
                let r = t.relu(d);
                let q = t.sqrt_eps(b, 1e-12);
                let sum = t.add(r, q)?;
                let sl = t.sum_last(sum)?;
                let s2 = t.sum_all(sl);
                Ok(t.scale(s2, 0.7))
            },
            1e-6,
        );
    }

    #[test]
    fn linear_and_layer_norm_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut store = ParamStore::new();
        store.register("x", rand_arr(&[5, 3], &mut rng)).unwrap();
        store.register("w", rand_arr(&[4, 3], &mut rng)).unwrap();
        store.register("b", rand_arr(&[4], &mut rng)).unwrap();
        store
            .register("gamma", rand_arr(&[4], &mut rng).mapv(|v| v + 1.5))
            .unwrap();
        store.register("beta", rand_arr(&[4], &mut rng)).unwrap();
        check_grads(
            &mut store,
            |t, s| {
                let x = t.param(s, 0);
                let w = t.param(s, 1);
                let b = t.param(s, 2);
                let gamma = t.param(s, 3);
                let beta = t.param(s, 4);
                let y = t.linear(x, w, b)?;
                let n = t.layer_norm(y, gamma, beta, 1e-5)?;
                let r = t.relu(n);
                Ok(t.sum_all(r))
            },
            1e-5,
        );
    }

    #[test]
    fn mixing_gram_and_broadcast_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut store = ParamStore::new();
        store.register("w", rand_arr(&[2, 3], &mut rng)).unwrap();
        store.register("f", rand_arr(&[4, 3, 5], &mut rng)).unwrap();
        store.register("wn", rand_arr(&[4, 2, 3], &mut rng)).unwrap();
        store.register("s", rand_arr(&[4, 2], &mut rng)).unwrap();
        check_grads(
            &mut store,
            |t, s| {
                let w = t.param(s, 0);
                let f = t.param(s, 1);
                let wn = t.param(s, 2);
                let sc = t.param(s, 3);
                let mixed = t.channel_mix(w, f)?; // [4,2,5]
                let scaled = t.bcast_mul_prefix(mixed, sc)?;
                let nm = t.node_matmul(wn, f)?; // [4,2,5]
                let both = t.add(scaled, nm)?;
                let gr = t.gram(both)?; // [4,2,2]
                Ok(t.sum_all(gr))
            },
            1e-5,
        );
    }

    #[test]
    fn gather_scatter_softmax_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut store = ParamStore::new();
        store.register("f", rand_arr(&[3, 2], &mut rng)).unwrap();
        store.register("logits", rand_arr(&[5, 2], &mut rng)).unwrap();
        let idx = Arc::new(vec![1usize, 2, 0, 2, 1]);
        let dst = Arc::new(vec![0usize, 0, 1, 1, 2]);
        let offsets = Arc::new(vec![0usize, 2, 4, 5]);
        check_grads(
            &mut store,
            |t, s| {
                let f = t.param(s, 0);
                let logits = t.param(s, 1);
                let gathered = t.gather_rows(f, idx.clone())?; // [5,2]
                let alpha = t.segment_softmax(logits, offsets.clone())?;
                let weighted = t.mul(gathered, alpha)?;
                let pooled = t.scatter_add_rows(weighted, dst.clone(), 3)?;
                Ok(t.sum_all(pooled))
            },
            1e-5,
        );
    }

    #[test]
    fn kernel_message_and_max_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut store = ParamStore::new();
        store.register("r", rand_arr(&[3, 2, 2, 3], &mut rng)).unwrap();
        store.register("f", rand_arr(&[3, 2, 5], &mut rng)).unwrap();
        let basis = Arc::new(rand_arr(&[3, 2, 3, 5], &mut rng));
        check_grads(
            &mut store,
            |t, s| {
                let r = t.param(s, 0);
                let f = t.param(s, 1);
                let msg = t.kernel_message(r, basis.clone(), f)?; // [3,3,3]
                let reshaped = t.reshape(msg, &[3, 9])?;
                let mx = t.max_axis0(reshaped)?;
                let wide = t.reshape(mx, &[1, 9])?;
                let sq = t.mul(wide, wide)?;
                Ok(t.sum_all(sq))
            },
            1e-5,
        );
    }

    #[test]
    fn segment_softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut tape = Tape::new();
        let logits = tape.constant(rand_arr(&[6, 3], &mut rng).mapv(|v| v * 40.0));
        let offsets = Arc::new(vec![0usize, 1, 4, 6]);
        let alpha = tape.segment_softmax(logits, offsets.clone()).unwrap();
        let a = tape.value(alpha);
        // single-element segment is exactly 1
        for h in 0..3 {
            assert_eq!(a[[0, h]], 1.0);
        }
        for seg in offsets.windows(2) {
            for h in 0..3 {
                let s: f64 = (seg[0]..seg[1]).map(|r| a[[r, h]]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segment_softmax_equal_logits_uniform() {
        let mut tape = Tape::new();
        let logits = tape.constant(ArrayD::zeros(IxDyn(&[4, 1])));
        let offsets = Arc::new(vec![0usize, 4]);
        let alpha = tape.segment_softmax(logits, offsets).unwrap();
        for v in tape.value(alpha).iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_segment_is_config_error() {
        let mut tape = Tape::new();
        let logits = tape.constant(ArrayD::zeros(IxDyn(&[2, 1])));
        let offsets = Arc::new(vec![0usize, 2, 2]);
        assert!(matches!(
            tape.segment_softmax(logits, offsets),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn tape_replay_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let mut store = ParamStore::new();
        store.register("w", rand_arr(&[8, 8], &mut rng)).unwrap();
        let x = rand_arr(&[4, 8], &mut rng);
        let run = |s: &ParamStore| {
            let mut t = Tape::new();
            let w = t.param(s, 0);
            let xid = t.constant(x.clone());
            let b = t.constant(ArrayD::zeros(IxDyn(&[8])));
            let y = t.linear(xid, w, b).unwrap();
            let r = t.relu(y);
            let sum = t.sum_all(r);
            t.scalar(sum)
        };
        assert_eq!(run(&store).to_bits(), run(&store).to_bits());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", ArrayD::from_elem(IxDyn(&[2]), 1.25))
            .unwrap();
        let mut opt = Adam::new(0.1, &store);
        let zero = vec![ArrayD::zeros(IxDyn(&[2]))];
        opt.step(&mut store, &zero).unwrap();
        assert_eq!(store.value(w)[[0]], 1.25);
    }

    #[test]
    fn adam_rejects_nan_gradients() {
        let mut store = ParamStore::new();
        store
            .register("w", ArrayD::from_elem(IxDyn(&[1]), 0.0))
            .unwrap();
        let mut opt = Adam::new(0.1, &store);
        let bad = vec![ArrayD::from_elem(IxDyn(&[1]), f64::NAN)];
        assert!(matches!(
            opt.step(&mut store, &bad),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn adam_identical_runs_identical_trajectories() {
        let run = || {
            let mut store = ParamStore::new();
            store
                .register("w", ArrayD::from_elem(IxDyn(&[1]), 2.0))
                .unwrap();
            let mut opt = Adam::new(0.05, &store);
            for _ in 0..50 {
                let w = store.value(0)[[0]];
                let g = vec![ArrayD::from_elem(IxDyn(&[1]), 2.0 * (w - 0.7))];
                opt.step(&mut store, &g).unwrap();
            }
            store.value(0)[[0]]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        // f(w) = (w - 3)^2; minimum at 3
        let mut store = ParamStore::new();
        store
            .register("w", ArrayD::from_elem(IxDyn(&[1]), 0.0))
            .unwrap();
        let mut opt = Adam::new(0.05, &store);
        for _ in 0..1000 {
            let w = store.value(0)[[0]];
            let g = vec![ArrayD::from_elem(IxDyn(&[1]), 2.0 * (w - 3.0))];
            opt.step(&mut store, &g).unwrap();
        }
        let w = store.value(0)[[0]];
        assert!((w - 3.0).abs() < 1e-6, "w = {w}");
    }
}
