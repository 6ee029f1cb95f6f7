//! Attractor Patch Network sublayer.
//!
//! A bank of `K` patch experts. Each token is routed by cosine similarity
//! between its layer-normalized representation and learned prototypes; the
//! top-`k` patches each decode a gated `r`-dimensional code through their
//! own `d x r` decoder, and the weighted sum is added back to the residual
//! stream:
//!
//! ```text
//! z   = LN(h)
//! s_i = <z/|z|, p_i/|p_i|> / tau
//! w   = softmax over the top-k s_i
//! u   = V^T z
//! phi = u * sigmoid(a_i * u + b_i)
//! y   = h + gamma * sum_i w_i U_i phi_i
//! ```

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, Graph, Op, Real, Tensor, Var};

/// Floor applied to vector norms before unit normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Layer norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// Separate gate slope and offset per code coordinate.
    PerDimension,
    /// One learned gate value per patch, shared by all coordinates.
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApnConfig {
    /// Number of patches `K`.
    pub patches: usize,
    /// Active patches per token `k`.
    pub active: usize,
    /// Code dimension `r`.
    pub code_dim: usize,
    /// Routing temperature `tau`.
    pub temperature: f64,
    /// Residual scale `gamma`.
    pub residual_scale: f64,
    pub residual_scale_trainable: bool,
    /// Linear warmup of `gamma` from 0 over this many optimizer steps; 0 disables.
    pub residual_warmup_steps: usize,
    pub patch_dropout: f64,
    pub balance_weight: f64,
    pub entropy_weight: f64,
    pub gating: GatingMode,
    /// Frobenius cap on each decoder, enforced after every optimizer step.
    pub norm_cap: Option<f64>,
}

impl Default for ApnConfig {
    fn default() -> Self {
        ApnConfig {
            patches: 256,
            active: 4,
            code_dim: 32,
            temperature: 0.07,
            residual_scale: 1.0,
            residual_scale_trainable: false,
            residual_warmup_steps: 0,
            patch_dropout: 0.0,
            balance_weight: 0.01,
            entropy_weight: 0.0,
            gating: GatingMode::PerDimension,
            norm_cap: None,
        }
    }
}

impl ApnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.active == 0 || self.active > self.patches {
            return bad(format!(
                "apn: need 1 <= active <= patches, got active = {}, patches = {}",
                self.active, self.patches
            ));
        }
        if self.code_dim == 0 {
            return bad("apn: code_dim must be >= 1".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("apn: temperature must be > 0, got {}", self.temperature));
        }
        if !self.residual_scale.is_finite() {
            return bad("apn: residual_scale must be finite".into());
        }
        if !(0.0..1.0).contains(&self.patch_dropout) {
            return bad(format!("apn: patch_dropout must be in [0, 1), got {}", self.patch_dropout));
        }
        if !(self.balance_weight >= 0.0) || !(self.entropy_weight >= 0.0) {
            return bad("apn: regularizer weights must be >= 0".into());
        }
        if let Some(k) = self.norm_cap {
            if !(k > 0.0) {
                return bad(format!("apn: norm_cap must be > 0, got {k}"));
            }
        }
        Ok(())
    }

    /// Width of the gate slope/offset vectors.
    pub fn gate_width(&self) -> usize {
        match self.gating {
            GatingMode::PerDimension => self.code_dim,
            GatingMode::Scalar => 1,
        }
    }

    /// Prototypes `Kd` + code `dr` + decoders `Kdr` + gates `2Kr` (or `2K`
    /// with scalar gating). Excludes the input layer norm and `gamma`.
    pub fn core_param_count(&self, d: usize) -> usize {
        let (k, r) = (self.patches, self.code_dim);
        k * d + d * r + k * d * r + 2 * k * self.gate_width()
    }

    /// `gamma` after warmup at optimizer step `step`.
    pub fn effective_scale(&self, step: usize) -> f64 {
        if self.residual_warmup_steps == 0 || step >= self.residual_warmup_steps {
            self.residual_scale
        } else {
            self.residual_scale * step as f64 / self.residual_warmup_steps as f64
        }
    }
}

/// Learnable parameters of one APN sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct ApnParams<F> {
    pub norm_gain: Tensor<F>,
    pub norm_bias: Tensor<F>,
    /// `K x d`
    pub prototypes: Tensor<F>,
    /// `d x r`
    pub code: Tensor<F>,
    /// `K x d x r`
    pub decoders: Tensor<F>,
    /// `K x r` (or `K x 1`)
    pub gate_slope: Tensor<F>,
    pub gate_offset: Tensor<F>,
    pub residual_scale: F,
}

impl<F: Real> ApnParams<F> {
    /// Prototypes uniform on the unit sphere, code entries with variance
    /// `1/d`, zero decoders (identity sublayer), `a = 1`, `b = 0`.
    pub fn init<R: Rng + ?Sized>(d: usize, cfg: &ApnConfig, rng: &mut R) -> Self {
        let (k, r, gw) = (cfg.patches, cfg.code_dim, cfg.gate_width());
        let mut prototypes = Vec::with_capacity(k * d);
        for _ in 0..k {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            prototypes.extend(v.iter().map(|x| F::lit(x / n)));
        }
        let std = (1.0 / d as f64).sqrt();
        let code = Tensor::from_fn(&[d, r], |_| {
            F::lit(std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        });
        ApnParams {
            norm_gain: Tensor::full(&[d], F::one()),
            norm_bias: Tensor::zeros(&[d]),
            prototypes: Tensor::new(vec![k, d], prototypes).expect("shape"),
            code,
            decoders: Tensor::zeros(&[k, d, r]),
            gate_slope: Tensor::full(&[k, gw], F::one()),
            gate_offset: Tensor::zeros(&[k, gw]),
            residual_scale: F::lit(cfg.residual_scale),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    /// Places every tensor on `g` as a trainable leaf.
    pub fn to_vars(&self, g: &mut Graph<F>, trainable_scale: bool) -> ApnVars {
        ApnVars {
            norm_gain: g.param(self.norm_gain.clone()),
            norm_bias: g.param(self.norm_bias.clone()),
            prototypes: g.param(self.prototypes.clone()),
            code: g.param(self.code.clone()),
            decoders: g.param(self.decoders.clone()),
            gate_slope: g.param(self.gate_slope.clone()),
            gate_offset: g.param(self.gate_offset.clone()),
            scale: trainable_scale.then(|| g.param(Tensor::scalar(self.residual_scale))),
        }
    }
}

/// Graph handles for one sublayer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ApnVars {
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub prototypes: Var,
    pub code: Var,
    pub decoders: Var,
    pub gate_slope: Var,
    pub gate_offset: Var,
    /// Trainable `gamma`; `None` means a fixed scale is supplied by the caller.
    pub scale: Option<Var>,
}

/// Per-token routing outcome of one sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub tokens: usize,
    pub patches: usize,
    pub k: usize,
    /// `tokens x k` selected patch indices, highest score first.
    pub indices: Vec<usize>,
    /// `tokens x k` restricted-softmax weights.
    pub weights: Vec<f64>,
    /// `tokens x patches` raw scores before selection.
    pub scores: Vec<f64>,
    /// `max_i s_i` per token.
    pub confidence: Vec<f64>,
}

impl RoutingDecision {
    pub fn active(&self, t: usize) -> &[usize] {
        &self.indices[t * self.k..(t + 1) * self.k]
    }

    pub fn token_weights(&self, t: usize) -> &[f64] {
        &self.weights[t * self.k..(t + 1) * self.k]
    }

    pub fn token_scores(&self, t: usize) -> &[f64] {
        &self.scores[t * self.patches..(t + 1) * self.patches]
    }

    /// Weights scattered back to all `K` slots (zeros for inactive patches).
    pub fn dense_weights(&self, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.patches];
        for (&i, &w) in self.active(t).iter().zip(self.token_weights(t)) {
            out[i] += w;
        }
        out
    }

    /// Patches active for at least one token.
    pub fn active_union(&self) -> Vec<bool> {
        let mut out = vec![false; self.patches];
        for &i in &self.indices {
            out[i] = true;
        }
        out
    }

    fn from_graph<F: Real>(g: &Graph<F>, scores: Var, weights: Var, indices: Vec<usize>, k: usize) -> Self {
        let sv = g.value(scores);
        let patches = sv.cols();
        let tokens = sv.rows();
        let scores = sv.to_f64();
        let confidence = (0..tokens)
            .map(|t| scores[t * patches + indices[t * k]])
            .collect();
        RoutingDecision {
            tokens,
            patches,
            k,
            indices,
            weights: g.value(weights).to_f64(),
            scores,
            confidence,
        }
    }
}

/// Fraction of active-set memberships that fall on each patch (sums to 1).
pub fn usage_frequencies(indices: &[usize], patches: usize) -> Vec<f64> {
    let mut counts = vec![0.0; patches];
    for &i in indices {
        counts[i] += 1.0;
    }
    let total = indices.len().max(1) as f64;
    counts.iter_mut().for_each(|c| *c /= total);
    counts
}

/// `sum_i (u_i - 1/K)^2`.
pub fn balance_penalty(usage: &[f64]) -> f64 {
    let target = 1.0 / usage.len() as f64;
    usage.iter().map(|u| (u - target) * (u - target)).sum()
}

/// `sum_i p_i ln p_i`, i.e. negative entropy with `0 ln 0 = 0`.
pub fn negative_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

fn validate_dims<F: Real>(p: &ApnParams<F>, cfg: &ApnConfig) -> Result<()> {
    cfg.validate()?;
    let d = p.model_dim();
    let (k, r, gw) = (cfg.patches, cfg.code_dim, cfg.gate_width());
    let checks: [(&'static str, &[usize], Vec<usize>); 6] = [
        ("apn prototypes", p.prototypes.shape(), vec![k, d]),
        ("apn code", p.code.shape(), vec![d, r]),
        ("apn decoders", p.decoders.shape(), vec![k, d, r]),
        ("apn gate_slope", p.gate_slope.shape(), vec![k, gw]),
        ("apn gate_offset", p.gate_offset.shape(), vec![k, gw]),
        ("apn norm", p.norm_gain.shape(), vec![d]),
    ];
    for (op, got, want) in checks {
        if got != want.as_slice() {
            return Err(Error::shape(op, got, &want));
        }
    }
    Ok(())
}

/// Routes layer-normalized representations `z: tokens x d`.
pub fn route<F: Real>(z: &Tensor<F>, params: &ApnParams<F>, cfg: &ApnConfig) -> Result<RoutingDecision> {
    validate_dims(params, cfg)?;
    if z.cols() != params.model_dim() {
        return Err(Error::shape("route", z.shape(), params.prototypes.shape()));
    }
    for i in 0..cfg.patches {
        if params.prototypes.row(i).iter().all(|v| *v == F::zero()) {
            return Err(Error::Numerical(format!("prototype {i} has zero norm")));
        }
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let pv = g.constant(params.prototypes.clone());
    let (decision, _, _) = route_graph(&mut g, zv, pv, cfg, None)?;
    Ok(decision)
}

fn route_graph<F: Real>(
    g: &mut Graph<F>,
    z: Var,
    prototypes: Var,
    cfg: &ApnConfig,
    dropped: Option<&[Option<usize>]>,
) -> Result<(RoutingDecision, Var, Var)> {
    let zn = g.row_normalize(z, NORM_EPS);
    let pn = g.row_normalize(prototypes, NORM_EPS);
    let cos = g.matmul_t(zn, pn)?;
    let scores = g.scale(cos, 1.0 / cfg.temperature);
    let topk = g.softmax_topk(scores, cfg.active, dropped)?;
    let decision = RoutingDecision::from_graph(g, scores, topk.weights, topk.indices, topk.k);
    Ok((decision, scores, topk.weights))
}

/// Compact code `u = V^T z` for each row of `z`.
pub fn encode<F: Real>(z: &Tensor<F>, code: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let cv = g.constant(code.clone());
    let u = g.matmul(zv, cv)?;
    Ok(g.value(u).clone())
}

#[inline]
fn gate_at<F: Real>(a: &[F], c: usize) -> F {
    if a.len() == 1 {
        a[0]
    } else {
        a[c]
    }
}

/// `phi = u * sigmoid(a * u + b)` row by row. `a`/`b` have length `r`
/// (per-dimension gating) or 1 (scalar gate broadcast over the code).
pub fn patch_feature<F: Real>(u: &Tensor<F>, a: &[F], b: &[F], mode: GatingMode) -> Result<Tensor<F>> {
    let r = u.cols();
    let want = match mode {
        GatingMode::PerDimension => r,
        GatingMode::Scalar => 1,
    };
    if a.len() != want || b.len() != want {
        return Err(Error::shape("patch_feature", u.shape(), &[a.len(), b.len()]));
    }
    let data = u
        .data()
        .iter()
        .enumerate()
        .map(|(ix, &uv)| {
            let c = ix % r;
            uv * crate::tensor::sigmoid(gate_at(a, c) * uv + gate_at(b, c))
        })
        .collect();
    Tensor::new(u.shape().to_vec(), data)
}

/// Fused gated low-rank decode and top-k mixing.
/// Weighted sum of the selected patches' gated low-rank outputs. Work is
/// grouped by patch so each patch's decoder is applied with one matrix
/// product over all the slots routed to it.
struct PatchMix {
    code: Var,
    weights: Var,
    decoders: Var,
    slope: Var,
    offset: Var,
    /// Flat slot ids (`t * k + j`) routed to each patch, ascending.
    by_patch: Vec<Vec<usize>>,
    k: usize,
    d: usize,
    r: usize,
}

impl PatchMix {
    #[allow(clippy::too_many_arguments)]
    fn new(code: Var, weights: Var, vars: &ApnVars, indices: &[usize], patches: usize, k: usize, d: usize, r: usize) -> Self {
        let mut by_patch = vec![Vec::new(); patches];
        for (slot, &i) in indices.iter().enumerate() {
            by_patch[i].push(slot);
        }
        PatchMix {
            code,
            weights,
            decoders: vars.decoders,
            slope: vars.gate_slope,
            offset: vars.gate_offset,
            by_patch,
            k,
            d,
            r,
        }
    }

    /// Gate activations `sigmoid(a u + b)` and features `phi = u * gate` for
    /// every slot of patch `i`, row by row.
    fn features<F: Real>(&self, i: usize, u: &[F], a: &Tensor<F>, b: &Tensor<F>, sig: &mut Vec<F>, phi: &mut Vec<F>) {
        let r = self.r;
        let (ai, bi) = (a.row(i), b.row(i));
        sig.clear();
        phi.clear();
        for &slot in &self.by_patch[i] {
            let ut = &u[(slot / self.k) * r..(slot / self.k + 1) * r];
            for (c, &uc) in ut.iter().enumerate() {
                let s = crate::tensor::sigmoid(gate_at(ai, c) * uc + gate_at(bi, c));
                sig.push(s);
                phi.push(uc * s);
            }
        }
    }

    fn forward<F: Real>(&self, g: &Graph<F>) -> std::result::Result<Vec<F>, (usize, usize)> {
        let (k, d, r) = (self.k, self.d, self.r);
        let u = g.value(self.code).data();
        let w = g.value(self.weights).data();
        let dec = g.value(self.decoders).data();
        let (a, b) = (g.value(self.slope), g.value(self.offset));
        let tokens = u.len() / r;
        let mut out = vec![F::zero(); tokens * d];
        let (mut sig, mut psi, mut tmp) = (Vec::new(), Vec::new(), Vec::new());
        for (i, slots) in self.by_patch.iter().enumerate() {
            if slots.is_empty() {
                continue;
            }
            self.features(i, u, a, b, &mut sig, &mut psi);
            for (row, &slot) in psi.chunks_exact_mut(r).zip(slots) {
                row.iter_mut().for_each(|v| *v *= w[slot]);
            }
            // [n, r] x U_i^T, with U_i stored row-major as [d, r]
            let n = slots.len();
            tmp.clear();
            tmp.resize(n * d, F::zero());
            let ui = &dec[i * d * r..(i + 1) * d * r];
            F::gemm(n, r, d, F::one(), &psi, r, 1, ui, 1, r, F::zero(), &mut tmp, d, 1);
            for (row, &slot) in tmp.chunks_exact(d).zip(slots) {
                let t = slot / k;
                if row.iter().any(|v| !v.is_finite()) {
                    return Err((t, i));
                }
                for (o, &v) in out[t * d..(t + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }
}

impl<F: Real> Op<F> for PatchMix {
    fn name(&self) -> &'static str {
        "patch_mix"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.code, self.weights, self.decoders, self.slope, self.offset]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let (k, d, r) = (self.k, self.d, self.r);
        let u = ctx.value(self.code).data();
        let w = ctx.value(self.weights).data();
        let dec = ctx.value(self.decoders).data();
        let (a, b) = (ctx.value(self.slope), ctx.value(self.offset));
        let gw = a.cols();
        let mut du = vec![F::zero(); u.len()];
        let mut dw = vec![F::zero(); w.len()];
        let mut ddec = vec![F::zero(); dec.len()];
        let mut da = vec![F::zero(); a.len()];
        let mut db = vec![F::zero(); b.len()];
        let (mut sig, mut phi, mut psi, mut gi, mut dpsi) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, slots) in self.by_patch.iter().enumerate() {
            if slots.is_empty() {
                continue;
            }
            let n = slots.len();
            self.features(i, u, a, b, &mut sig, &mut phi);
            psi.clear();
            for (row, &slot) in phi.chunks_exact(r).zip(slots) {
                psi.extend(row.iter().map(|&v| v * w[slot]));
            }
            gi.clear();
            for &slot in slots {
                let t = slot / k;
                gi.extend_from_slice(&g[t * d..(t + 1) * d]);
            }
            let ui = &dec[i * d * r..(i + 1) * d * r];
            // dU_i = G^T psi   ([d, n] x [n, r])
            F::gemm(d, n, r, F::one(), &gi, 1, d, &psi, r, 1, F::zero(), &mut ddec[i * d * r..(i + 1) * d * r], r, 1);
            // dpsi = G U_i     ([n, d] x [d, r])
            dpsi.clear();
            dpsi.resize(n * r, F::zero());
            F::gemm(n, d, r, F::one(), &gi, d, 1, ui, r, 1, F::zero(), &mut dpsi, r, 1);
            let ai = a.row(i);
            for (row, &slot) in slots.iter().enumerate() {
                let t = slot / k;
                let wt = w[slot];
                let range = row * r..(row + 1) * r;
                let (dp_row, ph, sg) = (&dpsi[range.clone()], &phi[range.clone()], &sig[range]);
                dw[slot] = dp_row.iter().zip(ph).map(|(&x, &y)| x * y).sum();
                let ut = &u[t * r..(t + 1) * r];
                for c in 0..r {
                    let dp = dp_row[c] * wt;
                    let s = sg[c];
                    // d phi / d pre-activation
                    let dpre = dp * ut[c] * s * (F::one() - s);
                    du[t * r + c] += dp * s + dpre * gate_at(ai, c);
                    let gc = if gw == 1 { 0 } else { c };
                    da[i * gw + gc] += dpre * ut[c];
                    db[i * gw + gc] += dpre;
                }
            }
        }
        vec![
            ctx.needs(0).then_some(du),
            ctx.needs(1).then_some(dw),
            ctx.needs(2).then_some(ddec),
            ctx.needs(3).then_some(da),
            ctx.needs(4).then_some(db),
        ]
    }
}

/// Usage-balance penalty on the hard active-set frequencies. The value is
/// exact; the gradient treats each frequency as the batch mean of the
/// routing weights (straight-through), so `d/dw[t, j] = 2 (u_i - 1/K) / T`.
struct BalanceLoss {
    weights: Var,
    indices: Vec<usize>,
    patches: usize,
}

impl<F: Real> Op<F> for BalanceLoss {
    fn name(&self) -> &'static str {
        "balance_loss"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.weights]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let w = ctx.value(self.weights);
        let tokens = w.rows() as f64;
        let usage = usage_frequencies(&self.indices, self.patches);
        let target = 1.0 / self.patches as f64;
        let out = self
            .indices
            .iter()
            .map(|&i| g[0] * F::lit(2.0 * (usage[i] - target) / tokens))
            .collect();
        vec![Some(out)]
    }
}

/// `sum_i wbar_i ln wbar_i` over the batch-mean scattered routing weights.
struct RoutingNegEntropy {
    weights: Var,
    indices: Vec<usize>,
    patches: usize,
}

impl RoutingNegEntropy {
    fn mean_weights<F: Real>(&self, w: &Tensor<F>) -> Vec<f64> {
        let mut mean = vec![0.0; self.patches];
        for (&i, &v) in self.indices.iter().zip(w.data()) {
            mean[i] += v.as_f64();
        }
        let t = w.rows() as f64;
        mean.iter_mut().for_each(|m| *m /= t);
        mean
    }
}

impl<F: Real> Op<F> for RoutingNegEntropy {
    fn name(&self) -> &'static str {
        "routing_neg_entropy"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.weights]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let w = ctx.value(self.weights);
        let mean = self.mean_weights(w);
        let t = w.rows() as f64;
        let out = self
            .indices
            .iter()
            .map(|&i| {
                if mean[i] > 0.0 {
                    g[0] * F::lit((mean[i].ln() + 1.0) / t)
                } else {
                    F::zero()
                }
            })
            .collect();
        vec![Some(out)]
    }
}

/// Everything the graph-level forward exposes for one sublayer.
#[derive(Clone, Debug)]
pub struct ApnTrace {
    /// Unscaled mixture `sum_i w_i U_i phi_i`.
    pub delta: Var,
    /// `gamma * delta`, the term added to the residual stream.
    pub residual: Var,
    /// Layer-normalized input.
    pub normed: Var,
    pub weights: Var,
    pub decision: RoutingDecision,
    pub balance: Var,
    pub neg_entropy: Var,
}

/// Records one APN sublayer on `g` and returns its residual term. The caller
/// adds it to `h` (possibly after residual dropout).
///
/// `gamma` is used when `vars.scale` is `None`. `rng` drives patch dropout
/// and is only consulted when `training` is set.
pub fn apn_residual<F: Real>(
    g: &mut Graph<F>,
    h: Var,
    vars: &ApnVars,
    cfg: &ApnConfig,
    gamma: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<ApnTrace> {
    let d = g.value(h).cols();
    let r = cfg.code_dim;
    let z = g.layer_norm(h, vars.norm_gain, vars.norm_bias, LN_EPS)?;
    let tokens = g.value(z).rows();
    let dropped: Option<Vec<Option<usize>>> = (training && cfg.patch_dropout > 0.0 && cfg.active >= 2).then(|| {
        (0..tokens)
            .map(|_| {
                (rng.random::<f64>() < cfg.patch_dropout).then(|| rng.random_range(0..cfg.active))
            })
            .collect()
    });
    let (decision, _scores, weights) = route_graph(g, z, vars.prototypes, cfg, dropped.as_deref())?;
    let u = g.matmul(z, vars.code)?;
    let mix = PatchMix::new(u, weights, vars, &decision.indices, cfg.patches, cfg.active, d, r);
    let out = mix.forward(g).map_err(|(t, i)| {
        Error::Numerical(format!("non-finite residual from patch {i} at token {t}"))
    })?;
    let delta = g.record(Tensor::new(vec![tokens, d], out)?, Box::new(mix));
    let residual = match vars.scale {
        Some(s) => g.mul(delta, s)?,
        None => g.scale(delta, gamma),
    };
    let usage = usage_frequencies(&decision.indices, cfg.patches);
    let balance = g.record(
        Tensor::scalar(F::lit(balance_penalty(&usage))),
        Box::new(BalanceLoss {
            weights,
            indices: decision.indices.clone(),
            patches: cfg.patches,
        }),
    );
    let ent_op = RoutingNegEntropy {
        weights,
        indices: decision.indices.clone(),
        patches: cfg.patches,
    };
    let ent_value = negative_entropy(&ent_op.mean_weights(g.value(weights)));
    let neg_entropy = g.record(Tensor::scalar(F::lit(ent_value)), Box::new(ent_op));
    Ok(ApnTrace {
        delta,
        residual,
        normed: z,
        weights,
        decision,
        balance,
        neg_entropy,
    })
}

/// Output of a standalone [`apn_forward`].
#[derive(Clone, Debug)]
pub struct ApnOutput<F> {
    pub y: Tensor<F>,
    pub decision: RoutingDecision,
    pub delta: Tensor<F>,
}

/// `y = h + gamma * sum_{i in K(h)} w_i U_i phi_i(u(h))` for `h: tokens x d`.
pub fn apn_forward<F: Real>(
    h: &Tensor<F>,
    params: &ApnParams<F>,
    cfg: &ApnConfig,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<ApnOutput<F>> {
    validate_dims(params, cfg)?;
    if h.cols() != params.model_dim() {
        return Err(Error::shape("apn_forward", h.shape(), params.prototypes.shape()));
    }
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let vars = ApnVars {
        norm_gain: g.constant(params.norm_gain.clone()),
        norm_bias: g.constant(params.norm_bias.clone()),
        prototypes: g.constant(params.prototypes.clone()),
        code: g.constant(params.code.clone()),
        decoders: g.constant(params.decoders.clone()),
        gate_slope: g.constant(params.gate_slope.clone()),
        gate_offset: g.constant(params.gate_offset.clone()),
        scale: None,
    };
    let trace = apn_residual(
        &mut g,
        hv,
        &vars,
        cfg,
        params.residual_scale.as_f64(),
        training,
        rng,
    )?;
    let y = g.add(hv, trace.residual)?;
    Ok(ApnOutput {
        y: g.value(y).clone(),
        decision: trace.decision,
        delta: g.value(trace.delta).clone(),
    })
}

/// Balance and negative-entropy penalties over a batch of routing
/// decisions, unweighted.
pub fn auxiliary_losses(decisions: &[RoutingDecision], cfg: &ApnConfig) -> Result<(f64, f64)> {
    let tokens: usize = decisions.iter().map(|d| d.tokens).sum();
    if tokens == 0 {
        return Err(Error::Usage("auxiliary losses over an empty batch".into()));
    }
    let mut indices = Vec::new();
    let mut mean = vec![0.0; cfg.patches];
    for dec in decisions {
        if dec.patches != cfg.patches {
            return Err(Error::Usage(format!(
                "decision has {} patches, config has {}",
                dec.patches, cfg.patches
            )));
        }
        indices.extend_from_slice(&dec.indices);
        for t in 0..dec.tokens {
            for (&i, &w) in dec.active(t).iter().zip(dec.token_weights(t)) {
                mean[i] += w;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= tokens as f64);
    let usage = usage_frequencies(&indices, cfg.patches);
    Ok((balance_penalty(&usage), negative_entropy(&mean)))
}

/// Projects each decoder `U_i` (a `d x r` slab of `decoders`) onto the
/// Frobenius ball of radius `kappa`.
pub fn cap_decoders<F: Real>(decoders: &mut Tensor<F>, kappa: f64) -> Result<()> {
    if !(kappa > 0.0) {
        return Err(Error::Config(format!("norm cap must be > 0, got {kappa}")));
    }
    let k = decoders.shape()[0];
    let slab = decoders.len() / k.max(1);
    let kappa_f = F::lit(kappa);
    for chunk in decoders.data_mut().chunks_exact_mut(slab) {
        let n = chunk.iter().map(|&v| v * v).sum::<F>().sqrt();
        if n > kappa_f {
            let s = kappa_f / n;
            chunk.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(())
}

pub fn apply_norm_cap<F: Real>(params: &mut ApnParams<F>, kappa: f64) -> Result<()> {
    cap_decoders(&mut params.decoders, kappa)
}
