//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LOG_FLOOR: f64 = 1e-12;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: T },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Reshape { x: Var },
    Gather { x: Var, idx: Vec<usize>, width: usize },
    Concat { parts: Vec<Var> },
    BroadcastRows { x: Var },
    SwapAxes { x: Var, outer: usize, a: usize, b: usize, inner: usize },
    Sum { x: Var },
    CrossEntropy { probs: Var, targets: Vec<usize> },
    CosineRows { a: Var, b: Var, norm_a: Vec<T>, norm_b: Vec<T>, cos: Vec<T> },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::Bmm { a, b, .. }
            | Op::Add { a, b }
            | Op::Mul { a, b }
            | Op::CosineRows { a, b, .. } => vec![*a, *b],
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Scale { x, .. }
            | Op::Softmax { x }
            | Op::Gelu { x }
            | Op::Reshape { x }
            | Op::Gather { x, .. }
            | Op::BroadcastRows { x, .. }
            | Op::SwapAxes { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::Concat { parts } => parts.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations, in construction (topological) order.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every node that requires one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that gradients never flow into.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        if cfg!(debug_assertions) {
            value.check_finite(name)?;
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[.., k] · b[k, n]`, flattening all leading axes of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if bd.len() != 2 || *ad.last().unwrap() != bd[0] {
            return Err(shape_err!("matmul {ad:?} x {bd:?}"));
        }
        let (k, n) = (bd[0], bd[1]);
        let m = self.value(a).len() / k;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut dims = ad[..ad.len() - 1].to_vec();
        dims.push(n);
        let value = Tensor::new(dims, out)?;
        self.push(value, Op::MatMul { a, b, m, k, n }, "matmul")
    }

    /// Batched product of `[batch, m, k]` with `[batch, k, n]`, or with
    /// `[batch, n, k]` transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] {
            return Err(shape_err!("bmm {ad:?} x {bd:?}"));
        }
        let (batch, m, k) = (ad[0], ad[1], ad[2]);
        let n = if trans_b { bd[1] } else { bd[2] };
        let kb = if trans_b { bd[2] } else { bd[1] };
        if kb != k {
            return Err(shape_err!("bmm inner dims {ad:?} x {bd:?} (trans_b={trans_b})"));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let cb = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(ab, bb, cb, m, k, n);
                } else {
                    gemm_nn(ab, bb, cb, m, k, n);
                }
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(
            value,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            "bmm",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err!("add {:?} + {:?}", self.dims(a), self.dims(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.dims(a).to_vec(), data)?;
        self.push(value, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err!("mul {:?} * {:?}", self.dims(a), self.dims(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.dims(a).to_vec(), data)?;
        self.push(value, Op::Mul { a, b }, "mul")
    }

    /// Adds a `[n]` vector to every last-axis slice of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).len() != n {
            return Err(shape_err!("add_row {:?} + {:?}", self.dims(x), self.dims(bias)));
        }
        let bv = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            axpy(T::one(), &bv, row);
        }
        let value = Tensor::new(self.dims(x).to_vec(), data)?;
        self.push(value, Op::AddRow { x, bias }, "add_row")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(self.dims(x).to_vec(), data)?;
        self.push(value, Op::Scale { x, c }, "scale")
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.dims(x).to_vec(), data)?;
        self.push(value, Op::Softmax { x }, "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d < 2 {
            return Err(shape_err!("layer_norm needs a last axis of at least 2, got {d}"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err!(
                "layer_norm affine params {:?}/{:?} for width {d}",
                self.dims(gain),
                self.dims(bias)
            ));
        }
        let rows = self.value(x).rows();
        let mut xhat = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        let inv_d = T::one() / T::lit(d as f64);
        for row in xhat.chunks_exact_mut(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let mut var = T::zero();
            for v in row.iter_mut() {
                *v = *v - mean;
                var += *v * *v;
            }
            let r = T::one() / (var * inv_d + eps).sqrt();
            for v in row.iter_mut() {
                *v = *v * r;
            }
            rstd.push(r);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(d) {
            for ((v, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        let value = Tensor::new(self.dims(x).to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.dims(x).to_vec(), data)?;
        self.push(value, Op::Gelu { x }, "gelu")
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(dims)?;
        self.push(value, Op::Reshape { x }, "reshape")
    }

    /// Selects last-axis rows of `x` by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let width = self.value(x).last_dim();
        let rows = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} of {rows}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(vec![idx.len(), width], data)?;
        self.push(
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
                width,
            },
            "gather_rows",
        )
    }

    /// Concatenates along the first axis; trailing axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err!("concat of nothing"));
        };
        let tail = self.dims(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let d = self.dims(p);
            if d[1..] != tail[..] {
                return Err(shape_err!("concat {:?} onto trailing {tail:?}", d));
            }
            lead += d[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut dims = vec![lead];
        dims.extend(tail);
        let value = Tensor::new(dims, data)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            "concat",
        )
    }

    /// Repeats a `[d]` vector into `[n, d]`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let d = self.value(x).len();
        let src = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&src);
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push(value, Op::BroadcastRows { x }, "broadcast_rows")
    }

    /// Views `x` as `[outer, a, b, inner]` and swaps the middle axes.
    pub fn swap_axes(
        &mut self,
        x: Var,
        outer: usize,
        a: usize,
        b: usize,
        inner: usize,
        out_dims: &[usize],
    ) -> Result<Var> {
        let n = outer * a * b * inner;
        if self.value(x).len() != n || out_dims.iter().product::<usize>() != n {
            return Err(shape_err!(
                "swap_axes [{outer},{a},{b},{inner}] on {:?} -> {out_dims:?}",
                self.dims(x)
            ));
        }
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n];
        swap_middle(src, &mut data, outer, a, b, inner);
        let value = Tensor::new(out_dims.to_vec(), data)?;
        self.push(
            value,
            Op::SwapAxes {
                x,
                outer,
                a,
                b,
                inner,
            },
            "swap_axes",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    /// Mean negative log-probability of `targets` (0-based) under the rows of
    /// `probs`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let nt = self.value(probs).last_dim();
        let rows = self.value(probs).rows();
        if targets.len() != rows {
            return Err(shape_err!(
                "cross_entropy: {} targets for {rows} probability rows",
                targets.len()
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= nt) {
            return Err(Error::Index(format!(
                "token {} outside codebook of size {nt}",
                bad + 1
            )));
        }
        let p = self.value(probs).data();
        let floor = T::lit(LOG_FLOOR);
        let mut acc = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            acc += p[r * nt + t].max(floor).ln();
        }
        let loss = -acc / T::lit(rows as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            "cross_entropy",
        )
    }

    /// Mean over leading positions of the cosine between last-axis slices.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err!("cosine_rows {:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        let d = self.value(a).last_dim();
        let rows = self.value(a).rows();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut norm_a = Vec::with_capacity(rows);
        let mut norm_b = Vec::with_capacity(rows);
        let mut cos = Vec::with_capacity(rows);
        for (ra, rb) in av.chunks_exact(d).zip(bv.chunks_exact(d)) {
            let na = dot(ra, ra).sqrt();
            let nb = dot(rb, rb).sqrt();
            if na == T::zero() || nb == T::zero() {
                return Err(Error::Domain("cosine of a zero-norm slice".into()));
            }
            norm_a.push(na);
            norm_b.push(nb);
            cos.push(dot(ra, rb) / (na * nb));
        }
        let mean = cos.iter().copied().sum::<T>() / T::lit(rows as f64);
        self.push(
            Tensor::scalar(mean),
            Op::CosineRows {
                a,
                b,
                norm_a,
                norm_b,
                cos,
            },
            "cosine_rows",
        )
    }

    /// Reverse sweep from a scalar `output`. Every node is visited once, in
    /// reverse construction order; fan-out contributions are summed.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(shape_err!("backward from non-scalar {:?}", self.dims(output)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(vec![T::one()]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = self.grad_slot(grads, $v) {
                    $body
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                with_grad!(*a, |ga| { gemm_nt(g, bv, ga, *m, *n, *k) });
                with_grad!(*b, |gb| { gemm_tn(av, g, gb, *m, *k, *n) });
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (sa, sb, sc) = (m * k, k * n, m * n);
                with_grad!(*a, |ga| {
                    for i in 0..*batch {
                        let gi = &g[i * sc..(i + 1) * sc];
                        let bb = &bv[i * sb..(i + 1) * sb];
                        let gab = &mut ga[i * sa..(i + 1) * sa];
                        if *trans_b {
                            gemm_nn(gi, bb, gab, *m, *n, *k);
                        } else {
                            gemm_nt(gi, bb, gab, *m, *n, *k);
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for i in 0..*batch {
                        let gi = &g[i * sc..(i + 1) * sc];
                        let ab = &av[i * sa..(i + 1) * sa];
                        let gbb = &mut gb[i * sb..(i + 1) * sb];
                        if *trans_b {
                            gemm_tn(gi, ab, gbb, *m, *n, *k);
                        } else {
                            gemm_tn(ab, gi, gbb, *m, *k, *n);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                with_grad!(*a, |ga| { axpy(T::one(), g, ga) });
                with_grad!(*b, |gb| { axpy(T::one(), g, gb) });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                with_grad!(*a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddRow { x, bias } => {
                with_grad!(*x, |gx| { axpy(T::one(), g, gx) });
                with_grad!(*bias, |gb| {
                    for row in g.chunks_exact(gb.len()) {
                        axpy(T::one(), row, gb);
                    }
                });
            }
            Op::Scale { x, c } => {
                with_grad!(*x, |gx| { axpy(*c, g, gx) });
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                with_grad!(*x, |gx| {
                    for ((yr, gr), gxr) in y
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let s = dot(yr, gr);
                        for ((o, &yi), &gi) in gxr.iter_mut().zip(yr).zip(gr) {
                            *o += yi * (gi - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                with_grad!(*gain, |gg| {
                    for (xr, gr) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                        for ((o, &xi), &gi) in gg.iter_mut().zip(xr).zip(gr) {
                            *o += xi * gi;
                        }
                    }
                });
                with_grad!(*bias, |gb| {
                    for gr in g.chunks_exact(d) {
                        axpy(T::one(), gr, gb);
                    }
                });
                with_grad!(*x, |gx| {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (((xr, gr), gxr), &r) in xhat
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .zip(rstd)
                    {
                        for ((o, &gi), &w) in dxhat.iter_mut().zip(gr).zip(gv) {
                            *o = gi * w;
                        }
                        let s1: T = dxhat.iter().copied().sum();
                        let s2 = dot(&dxhat, xr);
                        for ((o, &dh), &xh) in gxr.iter_mut().zip(&dxhat).zip(xr) {
                            *o += r * (dh - (s1 + xh * s2) * inv_d);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                with_grad!(*x, |gx| {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_grad(xi);
                    }
                });
            }
            Op::Reshape { x } => {
                with_grad!(*x, |gx| { axpy(T::one(), g, gx) });
            }
            Op::Gather { x, idx, width } => {
                let w = *width;
                with_grad!(*x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(T::one(), &g[r * w..(r + 1) * w], &mut gx[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    with_grad!(p, |gp| { axpy(T::one(), &g[off..off + len], gp) });
                    off += len;
                }
            }
            Op::BroadcastRows { x, .. } => {
                with_grad!(*x, |gx| {
                    for row in g.chunks_exact(gx.len()) {
                        axpy(T::one(), row, gx);
                    }
                });
            }
            Op::SwapAxes {
                x,
                outer,
                a,
                b,
                inner,
            } => {
                with_grad!(*x, |gx| {
                    let mut back = vec![T::zero(); g.len()];
                    swap_middle(g, &mut back, *outer, *b, *a, *inner);
                    axpy(T::one(), &back, gx);
                });
            }
            Op::Sum { x } => {
                with_grad!(*x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::CrossEntropy { probs, targets } => {
                let p = self.value(*probs).data();
                let nt = self.value(*probs).last_dim();
                let scale = g[0] / T::lit(targets.len() as f64);
                let floor = T::lit(LOG_FLOOR);
                with_grad!(*probs, |gp| {
                    for (r, &t) in targets.iter().enumerate() {
                        let pt = p[r * nt + t];
                        if pt > floor {
                            gp[r * nt + t] += -scale / pt;
                        }
                    }
                });
            }
            Op::CosineRows {
                a,
                b,
                norm_a,
                norm_b,
                cos,
            } => {
                let d = self.value(*a).last_dim();
                let rows = cos.len();
                let scale = g[0] / T::lit(rows as f64);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                with_grad!(*a, |ga| {
                    for r in 0..rows {
                        let (ra, rb) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                        let c1 = scale / (norm_a[r] * norm_b[r]);
                        let c2 = scale * cos[r] / (norm_a[r] * norm_a[r]);
                        for ((o, &x), &y) in ga[r * d..(r + 1) * d].iter_mut().zip(ra).zip(rb) {
                            *o += c1 * y - c2 * x;
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for r in 0..rows {
                        let (ra, rb) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                        let c1 = scale / (norm_a[r] * norm_b[r]);
                        let c2 = scale * cos[r] / (norm_b[r] * norm_b[r]);
                        for ((o, &x), &y) in gb[r * d..(r + 1) * d].iter_mut().zip(ra).zip(rb) {
                            *o += c1 * x - c2 * y;
                        }
                    }
                });
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

fn swap_middle<T: Scalar>(src: &[T], dst: &mut [T], outer: usize, a: usize, b: usize, inner: usize) {
    for o in 0..outer {
        let base = o * a * b * inner;
        for i in 0..a {
            for j in 0..b {
                let s = base + (i * b + j) * inner;
                let d = base + (j * a + i) * inner;
                dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
