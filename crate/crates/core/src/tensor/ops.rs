//! Built-in differentiable operations.

use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::graph::{BackwardCtx, Graph, Op, Var};
use super::{dot_lanes, sum_lanes, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// `b` repeats over the leading axes of `a`; the payload is `b.len()`.
    Suffix(usize),
    Scalar,
}

fn broadcast_rule(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    let blen: usize = b.iter().product();
    if a == b {
        Ok(Bcast::Same)
    } else if blen == 1 {
        Ok(Bcast::Scalar)
    } else if b.len() <= a.len() && a.ends_with(b) {
        Ok(Bcast::Suffix(blen))
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn reduce_to<F: Real>(g: Vec<F>, rule: Bcast) -> Vec<F> {
    match rule {
        Bcast::Same => g,
        Bcast::Scalar => vec![g.iter().copied().sum()],
        Bcast::Suffix(n) => {
            let mut out = vec![F::zero(); n];
            for chunk in g.chunks_exact(n) {
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            out
        }
    }
}

#[inline]
fn broadcast_map<F: Real>(a: &[F], b: &[F], rule: Bcast, f: impl Fn(F, F) -> F) -> Vec<F> {
    match rule {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Scalar => a.iter().map(|&x| f(x, b[0])).collect(),
        Bcast::Suffix(n) => {
            let mut out = Vec::with_capacity(a.len());
            for chunk in a.chunks_exact(n) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
    }
}

/// Inverted-dropout multipliers: each entry is 0 with probability `p`,
/// else `1 / (1 - p)`. One draw from `rng` seeds a fast generator that
/// supplies the per-unit `u32` draws.
pub fn dropout_mask<F: Real, R: RngCore + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<F> {
    let cut = (p * 4_294_967_296.0).min(u32::MAX as f64) as u32;
    let keep = F::lit(1.0 / (1.0 - p));
    let mut fast = Xoshiro256PlusPlus::seed_from_u64(rng.next_u64());
    let mut out = vec![F::zero(); n];
    let mut buf = [0u8; 16384];
    for dst in out.chunks_mut(buf.len() / 4) {
        let bytes = &mut buf[..dst.len() * 4];
        fast.fill_bytes(bytes);
        for (o, c) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            let u = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            // a select, not a conditional store, so the loop vectorizes
            *o = if u >= cut { keep } else { F::zero() };
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinaryKind,
    a: Var,
    b: Var,
    rule: Bcast,
}

impl<F: Real> Op<F> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        match self.kind {
            BinaryKind::Add => {
                let ga = ctx.needs(0).then(|| g.to_vec());
                let gb = ctx.needs(1).then(|| reduce_to(g.to_vec(), self.rule));
                vec![ga, gb]
            }
            BinaryKind::Sub => {
                let ga = ctx.needs(0).then(|| g.to_vec());
                let gb = ctx
                    .needs(1)
                    .then(|| reduce_to(g.iter().map(|&v| -v).collect(), self.rule));
                vec![ga, gb]
            }
            BinaryKind::Mul => {
                let a = ctx.value(self.a).data();
                let b = ctx.value(self.b).data();
                let ga = ctx.needs(0).then(|| broadcast_map(g, b, self.rule, |x, y| x * y));
                let gb = ctx.needs(1).then(|| {
                    let full = g.iter().zip(a).map(|(&gv, &av)| gv * av).collect();
                    reduce_to(full, self.rule)
                });
                vec![ga, gb]
            }
        }
    }
}

struct MatMul {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    /// Optional `[n]` row bias folded into the product.
    bias: Option<Var>,
}

impl<F: Real> Op<F> for MatMul {
    fn name(&self) -> &'static str {
        if self.bias.is_some() {
            "linear"
        } else {
            "matmul"
        }
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.a, self.b];
        v.extend(self.bias);
        v
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = ctx.value(self.a).data();
        let b = ctx.value(self.b).data();
        let ga = ctx.needs(0).then(|| {
            let mut out = vec![F::zero(); m * k];
            // dA = dC . B^T
            let (rs, cs) = if self.trans_b { (k, 1) } else { (1, n) };
            F::gemm(m, n, k, F::one(), g, n, 1, b, rs, cs, F::zero(), &mut out, k, 1);
            out
        });
        let gb = ctx.needs(1).then(|| {
            let mut out = vec![F::zero(); k * n];
            if self.trans_b {
                // dB (n x k) = dC^T . A
                F::gemm(n, m, k, F::one(), g, 1, n, a, k, 1, F::zero(), &mut out, k, 1);
            } else {
                // dB (k x n) = A^T . dC
                F::gemm(k, m, n, F::one(), a, 1, k, g, n, 1, F::zero(), &mut out, n, 1);
            }
            out
        });
        let mut grads = vec![ga, gb];
        if self.bias.is_some() {
            grads.push(ctx.needs(2).then(|| reduce_to(g.to_vec(), Bcast::Suffix(n))));
        }
        grads
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Sigmoid,
    Gelu,
    Scale(f64),
}

struct Unary {
    kind: UnaryKind,
    x: Var,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn gelu<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).fast_tanh())
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.fast_tanh();
    let dinner = c * (F::one() + F::lit(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

impl<F: Real> Op<F> for Unary {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Scale(_) => "scale",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let out = match self.kind {
            UnaryKind::Sigmoid => {
                let y = ctx.output().data();
                g.iter()
                    .zip(y)
                    .map(|(&gv, &s)| gv * s * (F::one() - s))
                    .collect()
            }
            UnaryKind::Gelu => {
                let x = ctx.value(self.x).data();
                g.iter().zip(x).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect()
            }
            UnaryKind::Scale(c) => {
                let c = F::lit(c);
                g.iter().map(|&gv| gv * c).collect()
            }
        };
        vec![Some(out)]
    }
}

struct Embedding {
    table: Var,
    indices: Vec<usize>,
    dim: usize,
}

impl<F: Real> Op<F> for Embedding {
    fn name(&self) -> &'static str {
        "embedding"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.table]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let mut out = vec![F::zero(); ctx.value(self.table).len()];
        let d = self.dim;
        for (row, &ix) in self.indices.iter().enumerate() {
            let dst = &mut out[ix * d..(ix + 1) * d];
            for (o, &v) in dst.iter_mut().zip(&g[row * d..(row + 1) * d]) {
                *o += v;
            }
        }
        vec![Some(out)]
    }
}

struct Concat {
    parts: Vec<Var>,
    widths: Vec<usize>,
    rows: usize,
}

impl<F: Real> Op<F> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn inputs(&self) -> Vec<Var> {
        self.parts.clone()
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.parts.len());
        for (i, &w) in self.widths.iter().enumerate() {
            if ctx.needs(i) {
                let mut gi = Vec::with_capacity(self.rows * w);
                for r in 0..self.rows {
                    gi.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                out.push(Some(gi));
            } else {
                out.push(None);
            }
            offset += w;
        }
        out
    }
}

struct Slice {
    x: Var,
    start: usize,
    end: usize,
    cols: usize,
}

impl<F: Real> Op<F> for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let mut out = vec![F::zero(); ctx.value(self.x).len()];
        let w = self.end - self.start;
        for (r, chunk) in g.chunks_exact(w).enumerate() {
            out[r * self.cols + self.start..r * self.cols + self.end].copy_from_slice(chunk);
        }
        vec![Some(out)]
    }
}

struct Reduce {
    x: Var,
    mean: bool,
}

impl<F: Real> Op<F> for Reduce {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let n = ctx.value(self.x).len();
        let v = if self.mean {
            g[0] / F::lit(n as f64)
        } else {
            g[0]
        };
        vec![Some(vec![v; n])]
    }
}

struct Reshape {
    x: Var,
}

impl<F: Real> Op<F> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        vec![Some(g.to_vec())]
    }
}

struct LayerNorm<F> {
    x: Var,
    gain: Var,
    bias: Var,
    xhat: Vec<F>,
    rstd: Vec<F>,
    dim: usize,
}

impl<F: Real> Op<F> for LayerNorm<F> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gain, self.bias]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let d = self.dim;
        let gain = ctx.value(self.gain).data();
        let dn = F::lit(d as f64);
        let gx = ctx.needs(0).then(|| {
            let mut out = vec![F::zero(); g.len()];
            let mut dxh = vec![F::zero(); d];
            for (r, (grow, xrow)) in g.chunks_exact(d).zip(self.xhat.chunks_exact(d)).enumerate() {
                for ((o, &gv), &gn) in dxh.iter_mut().zip(grow).zip(gain) {
                    *o = gv * gn;
                }
                let mean_dx = sum_lanes(&dxh) / dn;
                let mean_dx_x = dot_lanes(&dxh, xrow) / dn;
                let rs = self.rstd[r];
                for ((o, &dv), &xv) in out[r * d..(r + 1) * d].iter_mut().zip(&dxh).zip(xrow) {
                    *o = rs * (dv - mean_dx - xv * mean_dx_x);
                }
            }
            out
        });
        let gg = ctx.needs(1).then(|| {
            let mut out = vec![F::zero(); d];
            for (grow, xrow) in g.chunks_exact(d).zip(self.xhat.chunks_exact(d)) {
                for ((o, &gv), &xv) in out.iter_mut().zip(grow).zip(xrow) {
                    *o += gv * xv;
                }
            }
            out
        });
        let gb = ctx.needs(2).then(|| reduce_to(g.to_vec(), Bcast::Suffix(d)));
        vec![gx, gg, gb]
    }
}

struct RowNormalize<F> {
    x: Var,
    norms: Vec<F>,
    eps: F,
}

impl<F: Real> Op<F> for RowNormalize<F> {
    fn name(&self) -> &'static str {
        "row_normalize"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let y = ctx.output();
        let d = y.cols();
        let mut out = vec![F::zero(); g.len()];
        for (r, (grow, yrow)) in g.chunks_exact(d).zip(y.data().chunks_exact(d)).enumerate() {
            let n = self.norms[r];
            let orow = &mut out[r * d..(r + 1) * d];
            if n > self.eps {
                let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    orow[j] = (grow[j] - yrow[j] * dot) / n;
                }
            } else {
                for j in 0..d {
                    orow[j] = grow[j] / self.eps;
                }
            }
        }
        vec![Some(out)]
    }
}

/// Result of [`Graph::softmax_topk`].
#[derive(Clone, Debug)]
pub struct TopK {
    /// `rows x k` restricted-softmax weights.
    pub weights: Var,
    /// Selected column per `(row, slot)`, row-major, highest score first.
    pub indices: Vec<usize>,
    pub k: usize,
}

struct SoftmaxTopK {
    scores: Var,
    indices: Vec<usize>,
    k: usize,
    width: usize,
}

impl<F: Real> Op<F> for SoftmaxTopK {
    fn name(&self) -> &'static str {
        "softmax_topk"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.scores]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let w = ctx.output().data();
        let k = self.k;
        let mut out = vec![F::zero(); ctx.value(self.scores).len()];
        for r in 0..w.len() / k {
            let wr = &w[r * k..(r + 1) * k];
            let gr = &g[r * k..(r + 1) * k];
            let dot: F = wr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for j in 0..k {
                if wr[j] != F::zero() {
                    out[r * self.width + self.indices[r * k + j]] += wr[j] * (gr[j] - dot);
                }
            }
        }
        vec![Some(out)]
    }
}

struct CrossEntropy<F> {
    logits: Var,
    targets: Vec<usize>,
    probs: Vec<F>,
}

impl<F: Real> Op<F> for CrossEntropy<F> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let n = self.targets.len();
        let v = self.probs.len() / n;
        let scale = g[0] / F::lit(n as f64);
        let mut out: Vec<F> = self.probs.iter().map(|&p| p * scale).collect();
        for (r, &t) in self.targets.iter().enumerate() {
            out[r * v + t] -= scale;
        }
        vec![Some(out)]
    }
}

struct Dropout<F> {
    x: Var,
    mask: Vec<F>,
}

impl<F: Real> Op<F> for Dropout<F> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        vec![Some(g.iter().zip(&self.mask).map(|(&a, &m)| a * m).collect())]
    }
}

/// Indices of the `k` largest entries of `row`, highest first, ties broken
/// by lowest index.
pub(crate) fn top_k_indices<F: Real>(row: &[F], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

impl<F: Real> Graph<F> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let av = self.value(a);
        let bv = self.value(b);
        let rule = broadcast_rule(name, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<F> = match kind {
            BinaryKind::Add => broadcast_map(ad, bd, rule, |x, y| x + y),
            BinaryKind::Sub => broadcast_map(ad, bd, rule, |x, y| x - y),
            BinaryKind::Mul => broadcast_map(ad, bd, rule, |x, y| x * y),
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.record(value, Box::new(Binary { kind, a, b, rule })))
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading axes of `a`
    /// or be a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool, bias: Option<Var>) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if bv.shape().len() != 2 || av.shape().is_empty() {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let k = av.cols();
        let m = av.rows();
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if bk != k {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (mut out, beta) = match bias {
            Some(bias) => {
                let bias = self.value(bias);
                if bias.len() != n {
                    return Err(Error::shape("linear", bv.shape(), bias.shape()));
                }
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend_from_slice(bias.data());
                }
                (out, F::one())
            }
            None => (vec![F::zero(); m * n], F::zero()),
        };
        let (rs, cs) = if trans_b { (1, k) } else { (n, 1) };
        F::gemm(m, k, n, F::one(), av.data(), k, 1, bv.data(), rs, cs, beta, &mut out, n, 1);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("non-empty") = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(
            value,
            Box::new(MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
                bias,
            }),
        ))
    }

    /// `a @ b` with `a: [.., k]` (leading axes flattened) and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, None)
    }

    /// `a @ b^T` with `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, None)
    }

    /// `x @ w + bias` with `w: [k, n]` and `bias: [n]`, fused.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        self.matmul_impl(x, w, false, Some(bias))
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let xv = self.value(x);
        let data: Vec<F> = match kind {
            UnaryKind::Sigmoid => xv.data().iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::Gelu => xv.data().iter().map(|&v| gelu(v)).collect(),
            UnaryKind::Scale(c) => {
                let c = F::lit(c);
                xv.data().iter().map(|&v| v * c).collect()
            }
        };
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.record(value, Box::new(Unary { kind, x }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }

    /// Gathers rows of `table: [n, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("embedding", tv.shape(), &[indices.len()]));
        }
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= n {
                return Err(Error::Data(format!("embedding index {ix} out of range for {n} rows")));
            }
            data.extend_from_slice(tv.row(ix));
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.record(
            value,
            Box::new(Embedding {
                table,
                indices: indices.to_vec(),
                dim: d,
            }),
        ))
    }

    /// Concatenates along the trailing axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = self.value(*first).shape()[..self.value(*first).shape().len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.value(*first).shape(), s));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.record(
            value,
            Box::new(Concat {
                parts: parts.to_vec(),
                widths,
                rows,
            }),
        ))
    }

    /// Columns `start..end` of the trailing axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if start >= end || end > cols {
            return Err(Error::shape("slice", xv.shape(), &[start, end]));
        }
        let mut data = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-empty") = end - start;
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, Box::new(Slice { x, start, end, cols })))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        self.record(Tensor::scalar(s), Box::new(Reduce { x, mean: false }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: F = xv.data().iter().copied().sum::<F>() / F::lit(xv.len() as f64);
        self.record(Tensor::scalar(s), Box::new(Reduce { x, mean: true }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.record(value, Box::new(Reshape { x })))
    }

    /// Normalizes each trailing-axis vector to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(Error::Config(format!("layer norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let gv = self.value(gain);
        let bv = self.value(bias);
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let dn = F::lit(d as f64);
        let eps = F::lit(eps);
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![F::zero(); rows * d];
        let (gd, bd) = (gv.data(), bv.data());
        for ((row, hrow), orow) in xv.data().chunks_exact(d).zip(xhat.chunks_exact_mut(d)).zip(out.chunks_exact_mut(d)) {
            let mean = sum_lanes(row) / dn;
            for (h, &v) in hrow.iter_mut().zip(row) {
                *h = v - mean;
            }
            let var = dot_lanes(hrow, hrow) / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (((o, h), &gn), &bn) in orow.iter_mut().zip(hrow.iter_mut()).zip(gd).zip(bd) {
                *h *= rs;
                *o = *h * gn + bn;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.record(
            value,
            Box::new(LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                dim: d,
            }),
        ))
    }

    /// Scales each trailing-axis vector to unit Euclidean norm; norms below
    /// `eps` are floored to `eps`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let eps = F::lit(eps);
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            norms.push(n);
            let denom = if n > eps { n } else { eps };
            out.extend(row.iter().map(|&v| v / denom));
        }
        debug_assert_eq!(out.len(), xv.rows() * d);
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.record(value, Box::new(RowNormalize { x, norms, eps }))
    }

    /// Selects the `k` highest scores per row (ties to the lowest index) and
    /// applies a softmax restricted to them. No gradient flows through the
    /// selection itself.
    ///
    /// `dropped[row] = Some(slot)` zeroes that selected slot and renormalizes
    /// the remaining `k - 1` weights.
    pub fn softmax_topk(
        &mut self,
        scores: Var,
        k: usize,
        dropped: Option<&[Option<usize>]>,
    ) -> Result<TopK> {
        let sv = self.value(scores);
        let width = sv.cols();
        if k == 0 || k > width {
            return Err(Error::Config(format!(
                "top-k needs 1 <= k <= {width}, got k = {k}"
            )));
        }
        if let Some(bad) = sv.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite routing score at row {}, column {}",
                bad / width,
                bad % width
            )));
        }
        let rows = sv.rows();
        let mut indices = Vec::with_capacity(rows * k);
        let mut weights = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = sv.row(r);
            let sel = top_k_indices(row, k);
            let drop = dropped.and_then(|d| d[r]);
            let max = row[sel[0]];
            let mut z = F::zero();
            let start = weights.len();
            for (slot, &i) in sel.iter().enumerate() {
                let e = if drop == Some(slot) {
                    F::zero()
                } else {
                    (row[i] - max).exp()
                };
                z += e;
                weights.push(e);
            }
            for w in &mut weights[start..] {
                *w /= z;
            }
            indices.extend(sel);
        }
        let value = Tensor::new(vec![rows, k], weights)?;
        let weights = self.record(
            value,
            Box::new(SoftmaxTopK {
                scores,
                indices: indices.clone(),
                k,
                width,
            }),
        );
        Ok(TopK {
            weights,
            indices,
            k,
        })
    }

    /// Mean negative log-likelihood of `targets` under a row-wise softmax of
    /// `logits: [rows, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.cols();
        let rows = lv.rows();
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Data(format!("target {t} out of range for {v} classes")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            let start = probs.len();
            for &x in row {
                let e = (x - max).exp();
                z += e;
                probs.push(e);
            }
            for p in &mut probs[start..] {
                *p /= z;
            }
            total += z.ln() + max - row[t];
        }
        let loss = total / F::lit(rows as f64);
        Ok(self.record(
            Tensor::scalar(loss),
            Box::new(CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            }),
        ))
    }

    /// Inverted dropout. Returns `x` unchanged when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let mask: Vec<F> = dropout_mask(self.value(x).len(), p, rng);
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.record(value, Box::new(Dropout { x, mask })))
    }
}
