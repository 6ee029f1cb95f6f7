//! Two-domain continual-learning protocol: localized online adaptation,
//! update gating and clipping, patch allocation, and retention/adaptation
//! measurement.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::apn::{usage_frequencies, RoutingDecision, NORM_EPS};
use crate::data::{sample_batch, CharVocab, DomainSplit};
use crate::error::{Error, Result};
use crate::model::{forward, ForwardOptions, ModelConfig, ModelState, Role, Trainable};
use crate::optim::{apply, propose, AdamWConfig, BlockMask, OptimizerState, UpdateMask};
use crate::tensor::{Real, Tensor};
use crate::train::{
    collect_grads, enforce_norm_cap, evaluate_ppl, rng_for, streams, train_offline, EvalSpec, History, TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateRule {
    /// Every parameter is trainable.
    Global,
    /// Only active patches' decoders and gates plus the shared code
    /// projection and prototypes.
    PatchLocal,
}

impl UpdateRule {
    pub fn label(self) -> &'static str {
        match self {
            UpdateRule::Global => "global",
            UpdateRule::PatchLocal => "patch-local",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub iters: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub context: usize,
    pub rule: UpdateRule,
    /// Apply an update every `budget` steps.
    pub budget: usize,
    /// Gain `alpha` on the optimizer-proposed step.
    pub gain: f64,
    /// Per-block norm cap `kappa` on each emitted update.
    pub update_cap: Option<f64>,
    pub confidence_threshold: Option<f64>,
    pub entropy_low: Option<f64>,
    pub entropy_high: Option<f64>,
    /// Prototype moving-average rate `rho`.
    pub prototype_ema: Option<f64>,
    pub allocation: bool,
    pub novelty_threshold: f64,
    /// Consecutive low-confidence update steps before allocating.
    pub novelty_window: usize,
    pub usage_ema: f64,
    pub cooldown: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            iters: 500,
            lr: 1e-4,
            batch_size: 32,
            context: 256,
            rule: UpdateRule::PatchLocal,
            budget: 1,
            gain: 1.0,
            update_cap: None,
            confidence_threshold: None,
            entropy_low: None,
            entropy_high: None,
            prototype_ema: None,
            allocation: false,
            novelty_threshold: 0.0,
            novelty_window: 10,
            usage_ema: 0.01,
            cooldown: 200,
            optimizer: AdamWConfig::default(),
            seed: 1337,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("adapt: lr must be > 0, got {}", self.lr));
        }
        if self.budget == 0 {
            return bad("adapt: budget must be >= 1".into());
        }
        if self.batch_size == 0 || self.context == 0 {
            return bad("adapt: batch_size and context must be >= 1".into());
        }
        if !self.gain.is_finite() || !self.novelty_threshold.is_finite() {
            return bad("adapt: gain and novelty_threshold must be finite".into());
        }
        if let Some(k) = self.update_cap {
            if !(k > 0.0) {
                return bad(format!("adapt: update_cap must be > 0, got {k}"));
            }
        }
        for (name, v) in [
            ("confidence_threshold", self.confidence_threshold),
            ("entropy_low", self.entropy_low),
            ("entropy_high", self.entropy_high),
        ] {
            if v.is_some_and(|x| !x.is_finite()) {
                return bad(format!("adapt: {name} must be finite"));
            }
        }
        if self.entropy_low.is_some() != self.entropy_high.is_some() {
            return bad("adapt: entropy_low and entropy_high must be set together".into());
        }
        if let (Some(lo), Some(hi)) = (self.entropy_low, self.entropy_high) {
            if lo > hi {
                return bad(format!("adapt: entropy band low {lo} exceeds high {hi}"));
            }
        }
        if let Some(r) = self.prototype_ema {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("adapt: prototype_ema must be in [0, 1], got {r}"));
            }
        }
        if !(0.0..=1.0).contains(&self.usage_ema) {
            return bad("adapt: usage_ema must be in [0, 1]".into());
        }
        if self.allocation && self.novelty_window == 0 {
            return bad("adapt: novelty_window must be >= 1".into());
        }
        self.optimizer.validate()
    }
}

/// Trainability per parameter under `rule`, given the routing decisions of
/// the current batch (one per APN layer, in layer order).
pub fn build_update_mask<F: Real>(rule: UpdateRule, state: &ModelState<F>, decisions: &[&RoutingDecision]) -> UpdateMask {
    match rule {
        UpdateRule::Global => UpdateMask::all(state.params.len()),
        UpdateRule::PatchLocal => {
            let blocks = state
                .params
                .iter()
                .map(|p| {
                    if !p.role.patch_local() {
                        return BlockMask::Frozen;
                    }
                    if !p.role.per_patch() {
                        return BlockMask::Trainable;
                    }
                    let layer = p.layer.expect("patch parameters are per layer");
                    match decisions.get(layer) {
                        Some(d) => BlockMask::Rows(d.active_union()),
                        None => BlockMask::Frozen,
                    }
                })
                .collect();
            UpdateMask { blocks }
        }
    }
}

/// Graph-level trainability implied by `rule` (before routing is known).
pub fn rule_needs_grad<F: Real>(rule: UpdateRule, state: &ModelState<F>) -> Vec<bool> {
    state
        .params
        .iter()
        .map(|p| rule == UpdateRule::Global || p.role.patch_local())
        .collect()
}

fn norm<F: Real>(v: &[F]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

fn clip_block<F: Real>(blocks: &mut [&mut [F]], kappa: f64) {
    let n = blocks.iter().map(|b| norm(b).powi(2)).sum::<f64>().sqrt();
    if n > kappa {
        let s = F::lit(kappa / n);
        for b in blocks.iter_mut() {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Scales proposed deltas by `alpha`, then clips each block to norm `kappa`.
/// A block is one patch (`U_i`, `a_i`, `b_i` of one layer together) for
/// per-patch parameters, and a whole tensor for everything else.
pub fn clipped_patch_update<F: Real>(
    state: &ModelState<F>,
    deltas: &mut [Option<Vec<F>>],
    alpha: f64,
    kappa: Option<f64>,
) -> Result<()> {
    if let Some(k) = kappa {
        if !(k > 0.0) {
            return Err(Error::Config(format!("update cap must be > 0, got {k}")));
        }
    }
    let a = F::lit(alpha);
    for d in deltas.iter_mut().flatten() {
        d.iter_mut().for_each(|x| *x *= a);
    }
    let Some(kappa) = kappa else { return Ok(()) };
    for (p, d) in state.params.iter().zip(deltas.iter_mut()) {
        if p.role.per_patch() {
            continue;
        }
        if let Some(d) = d {
            clip_block(&mut [d.as_mut_slice()], kappa);
        }
    }
    for layer in 0..state.config.n_layers {
        let idx: Vec<usize> = [Role::ApnDecoders, Role::ApnGateSlope, Role::ApnGateOffset]
            .iter()
            .filter_map(|&r| state.position(r, Some(layer)))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let patches = state.config.apn.patches;
        // split borrows of the three tensors
        let mut taken: Vec<(usize, Vec<F>)> = idx.iter().filter_map(|&i| deltas[i].take().map(|d| (i, d))).collect();
        for patch in 0..patches {
            let mut blocks: Vec<&mut [F]> = taken
                .iter_mut()
                .map(|(_, d)| {
                    let w = d.len() / patches;
                    &mut d[patch * w..(patch + 1) * w]
                })
                .collect();
            clip_block(&mut blocks, kappa);
        }
        for (i, d) in taken {
            deltas[i] = Some(d);
        }
    }
    Ok(())
}

/// Mean per-token entropy (nats) of the softmax over each logits row.
pub fn prediction_entropy<F: Real>(logits: &Tensor<F>) -> f64 {
    let rows = logits.rows();
    let mut total = 0.0;
    for r in 0..rows {
        let row = logits.row(r);
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        total -= e.iter().map(|&x| x / z).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    }
    total / rows.max(1) as f64
}

/// Mean routing confidence over all tokens of all given decisions.
pub fn mean_confidence(decisions: &[&RoutingDecision]) -> f64 {
    let (sum, n) = decisions
        .iter()
        .flat_map(|d| d.confidence.iter())
        .fold((0.0, 0usize), |(s, n), &c| (s + c, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Whether an update may be applied. Gates that are not configured pass.
pub fn confidence_gate(mean_confidence: f64, prediction_entropy: f64, cfg: &AdaptConfig) -> Result<bool> {
    if let (Some(lo), Some(hi)) = (cfg.entropy_low, cfg.entropy_high) {
        if lo > hi {
            return Err(Error::Config(format!("entropy band low {lo} exceeds high {hi}")));
        }
    }
    let conf_ok = cfg.confidence_threshold.is_none_or(|t| mean_confidence >= t);
    let ent_ok = match (cfg.entropy_low, cfg.entropy_high) {
        (Some(lo), Some(hi)) => (lo..=hi).contains(&prediction_entropy),
        _ => true,
    };
    Ok(conf_ok && ent_ok)
}

/// Patch replacement bookkeeping for one APN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchUsage {
    pub ema: Vec<f64>,
    /// Step until which each patch may not be reallocated.
    pub cooldown_until: Vec<usize>,
}

impl PatchUsage {
    pub fn new(patches: usize) -> Self {
        PatchUsage {
            ema: vec![1.0 / patches as f64; patches],
            cooldown_until: vec![0; patches],
        }
    }

    pub fn observe(&mut self, decision: &RoutingDecision, rate: f64) {
        let q = usage_frequencies(&decision.indices, decision.patches);
        for (e, qi) in self.ema.iter_mut().zip(q) {
            *e = (1.0 - rate) * *e + rate * qi;
        }
    }

    /// Lowest-usage patch not in cooldown at `step`; ties go to the lowest index.
    pub fn victim(&self, step: usize) -> Option<usize> {
        (0..self.ema.len())
            .filter(|&i| self.cooldown_until[i] <= step)
            .min_by(|&a, &b| self.ema[a].total_cmp(&self.ema[b]).then(a.cmp(&b)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationEvent {
    pub step: usize,
    pub layer: usize,
    pub patch: usize,
    pub usage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Allocation {
    Allocated(AllocationEvent),
    /// Every patch is cooling down.
    Skipped { step: usize, layer: usize, reason: String },
}

/// Re-seeds the lowest-usage patch of `layer` at representation `z`:
/// prototype set to `z/|z|`, decoder zeroed, gate reset to `a = 1, b = 0`.
pub fn allocate_on_novelty<F: Real>(
    state: &mut ModelState<F>,
    layer: usize,
    z: &[F],
    usage: &mut PatchUsage,
    step: usize,
    cooldown: usize,
) -> Result<Allocation> {
    let Some(victim) = usage.victim(step) else {
        return Ok(Allocation::Skipped {
            step,
            layer,
            reason: "all patches in cooldown".into(),
        });
    };
    let l = Some(layer);
    let n = norm(z).max(NORM_EPS);
    let missing = || Error::Usage(format!("layer {layer} has no APN sublayer"));
    let p = state.get_mut(Role::ApnPrototypes, l).ok_or_else(missing)?;
    let d = p.cols();
    if z.len() != d {
        return Err(Error::shape("allocate_on_novelty", &[z.len()], p.shape()));
    }
    for (dst, &src) in p.data_mut()[victim * d..(victim + 1) * d].iter_mut().zip(z) {
        *dst = F::lit(src.as_f64() / n);
    }
    for (role, value) in [
        (Role::ApnDecoders, F::zero()),
        (Role::ApnGateSlope, F::one()),
        (Role::ApnGateOffset, F::zero()),
    ] {
        let t = state.get_mut(role, l).ok_or_else(missing)?;
        let w = t.len() / t.shape()[0];
        t.data_mut()[victim * w..(victim + 1) * w].iter_mut().for_each(|x| *x = value);
    }
    usage.cooldown_until[victim] = step + cooldown;
    Ok(Allocation::Allocated(AllocationEvent {
        step,
        layer,
        patch: victim,
        usage: usage.ema[victim],
    }))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptTrace {
    pub losses: Vec<f64>,
    pub update_steps: usize,
    pub applied: usize,
    pub gated_out: usize,
    pub skipped_nonfinite: Vec<usize>,
    pub allocations: Vec<Allocation>,
    /// Parameter entries trainable in at least one applied update.
    pub updated_params: usize,
}

/// Prototype pull toward the renormalized mean representation routed to each
/// active patch: `p_i <- (1 - rho) p_i + rho * zbar_i / |zbar_i|`.
fn prototype_ema<F: Real>(state: &mut ModelState<F>, layer: usize, z: &Tensor<F>, decision: &RoutingDecision, rho: f64) {
    let Some(p) = state.get_mut(Role::ApnPrototypes, Some(layer)) else { return };
    let d = p.cols();
    let mut sums = vec![vec![0.0; d]; decision.patches];
    let mut hit = vec![false; decision.patches];
    for t in 0..decision.tokens {
        let zt = z.row(t);
        for &i in decision.active(t) {
            hit[i] = true;
            for (s, &v) in sums[i].iter_mut().zip(zt) {
                *s += v.as_f64();
            }
        }
    }
    for i in (0..decision.patches).filter(|&i| hit[i]) {
        let n = sums[i].iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
        for (dst, s) in p.data_mut()[i * d..(i + 1) * d].iter_mut().zip(&sums[i]) {
            *dst = F::lit((1.0 - rho) * dst.as_f64() + rho * s / n);
        }
    }
}

fn reset_rows<F: Real>(opt: &mut OptimizerState<F>, state: &ModelState<F>, layer: usize, patch: usize) {
    for role in [Role::ApnDecoders, Role::ApnGateSlope, Role::ApnGateOffset] {
        if let Some(i) = state.position(role, Some(layer)) {
            let rows = opt.counts[i].len();
            let w = opt.m[i].len() / rows;
            opt.counts[i][patch] = 0;
            opt.m[i][patch * w..(patch + 1) * w].iter_mut().for_each(|x| *x = F::zero());
            opt.v[i][patch * w..(patch + 1) * w].iter_mut().for_each(|x| *x = F::zero());
        }
    }
}

/// Online adaptation on `stream` with fresh optimizer moments and a
/// constant learning rate. Forward passes run without dropout.
pub fn adapt_online<F: Real>(state: &mut ModelState<F>, stream: &[u16], cfg: &AdaptConfig) -> Result<AdaptTrace> {
    cfg.validate()?;
    if cfg.context > state.config.context {
        return Err(Error::Config(format!(
            "adapt.context {} exceeds model context {}",
            cfg.context, state.config.context
        )));
    }
    let mut opt = OptimizerState::<F>::new(cfg.optimizer.clone(), state);
    let mut rng = rng_for(cfg.seed, streams::BATCHES);
    let mut trace = AdaptTrace::default();
    let n_apn = if state.config.ffn == crate::model::FfnKind::Apn { state.config.n_layers } else { 0 };
    let mut usage: Vec<PatchUsage> = (0..n_apn).map(|_| PatchUsage::new(state.config.apn.patches)).collect();
    let mut low_conf_run = 0usize;
    let mut touched: Vec<Vec<bool>> = state.params.iter().map(|p| vec![false; p.value.len()]).collect();
    let graph_mask = rule_needs_grad(cfg.rule, state);
    for step in 0..cfg.iters {
        let update_now = (step + 1) % cfg.budget == 0;
        let batch = sample_batch(stream, cfg.batch_size, cfg.context, &mut rng)?;
        let trainable = if update_now { Trainable::Mask(&graph_mask) } else { Trainable::None };
        let f = forward(
            state,
            &batch.inputs,
            Some(&batch.targets),
            batch.batch,
            ForwardOptions {
                training: false,
                rng: None,
                trainable,
            },
        )?;
        let loss = f.loss_value().expect("targets");
        trace.losses.push(loss);
        if !update_now {
            continue;
        }
        trace.update_steps += 1;
        if !loss.is_finite() {
            trace.skipped_nonfinite.push(step);
            continue;
        }
        let decisions = f.decisions();
        let conf = mean_confidence(&decisions);
        let ent = prediction_entropy(f.graph.value(f.logits));
        for (u, d) in usage.iter_mut().zip(&decisions) {
            u.observe(d, cfg.usage_ema);
        }
        if !confidence_gate(conf, ent, cfg)? {
            trace.gated_out += 1;
            continue;
        }
        let mask = build_update_mask(cfg.rule, state, &decisions);
        let grads = collect_grads(&f, f.loss.expect("targets"))?;
        let mut deltas = propose(&mut opt, state, &grads, cfg.lr, &mask)?;
        clipped_patch_update(state, &mut deltas, cfg.gain, cfg.update_cap)?;
        // captured before the graph is released
        let routed: Vec<(Tensor<F>, RoutingDecision)> = f
            .blocks
            .iter()
            .filter_map(|b| b.apn.as_ref().map(|a| (f.graph.value(a.normed).clone(), a.decision.clone())))
            .collect();
        drop(f);
        for (t, (m, p)) in touched.iter_mut().zip(mask.blocks.iter().zip(&state.params)) {
            let rows = p.value.shape().first().copied().unwrap_or(1);
            let w = p.value.len() / rows.max(1);
            for r in 0..rows {
                let on = match m {
                    BlockMask::Frozen => false,
                    BlockMask::Trainable => true,
                    BlockMask::Rows(v) => v[r],
                };
                if on {
                    t[r * w..(r + 1) * w].iter_mut().for_each(|x| *x = true);
                }
            }
        }
        apply(state, &deltas);
        enforce_norm_cap(state)?;
        trace.applied += 1;
        if let Some(rho) = cfg.prototype_ema {
            for (layer, (z, d)) in routed.iter().enumerate() {
                prototype_ema(state, layer, z, d, rho);
            }
        }
        if cfg.allocation && !routed.is_empty() {
            if conf < cfg.novelty_threshold {
                low_conf_run += 1;
            } else {
                low_conf_run = 0;
            }
            if low_conf_run >= cfg.novelty_window {
                low_conf_run = 0;
                for (layer, (z, d)) in routed.iter().enumerate() {
                    let (tok, _) = d
                        .confidence
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.total_cmp(b.1))
                        .expect("non-empty batch");
                    let event = allocate_on_novelty(state, layer, z.row(tok), &mut usage[layer], step, cfg.cooldown)?;
                    if let Allocation::Allocated(e) = &event {
                        reset_rows(&mut opt, state, layer, e.patch);
                    }
                    trace.allocations.push(event);
                }
            }
        }
    }
    trace.updated_params = touched.iter().map(|t| t.iter().filter(|&&b| b).count()).sum();
    Ok(trace)
}

/// Summary of pairwise active-set overlaps.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapStats {
    pub pairs: usize,
    pub k: usize,
    pub normalized: bool,
    pub mean: f64,
    pub std: f64,
    /// `histogram[j]` = number of pairs sharing exactly `j` patches.
    pub histogram: Vec<usize>,
}

/// `|K(h) ∩ K(h')|` for two active sets.
pub fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|i| b.contains(i)).count()
}

/// Overlap between tokens of `a` and tokens of `b` over `pairs` uniformly
/// sampled cross pairs, divided by `k` when `normalize` is set.
pub fn overlap_score<R: Rng + ?Sized>(
    a: &RoutingDecision,
    b: &RoutingDecision,
    normalize: bool,
    pairs: usize,
    rng: &mut R,
) -> Result<OverlapStats> {
    if a.k != b.k || a.patches != b.patches {
        return Err(Error::Usage(format!(
            "overlap needs matching routing configs: k {} vs {}, K {} vs {}",
            a.k, b.k, a.patches, b.patches
        )));
    }
    if a.tokens == 0 || b.tokens == 0 || pairs == 0 {
        return Err(Error::Usage("overlap needs at least one token pair".into()));
    }
    let k = a.k;
    let mut histogram = vec![0usize; k + 1];
    let (mut sum, mut sq) = (0.0, 0.0);
    let scale = if normalize { 1.0 / k as f64 } else { 1.0 };
    for _ in 0..pairs {
        let i = rng.random_range(0..a.tokens);
        let j = rng.random_range(0..b.tokens);
        let n = intersection_size(a.active(i), b.active(j));
        histogram[n] += 1;
        let v = n as f64 * scale;
        sum += v;
        sq += v * v;
    }
    let mean = sum / pairs as f64;
    let var = (sq / pairs as f64 - mean * mean).max(0.0);
    Ok(OverlapStats {
        pairs,
        k,
        normalized: normalize,
        mean,
        std: var.sqrt(),
        histogram,
    })
}

/// One arm of the protocol: a model family, its pretraining and its
/// adaptation rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub domain_b_seed: u64,
    pub domain_b_tokens: usize,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    pub eval_seed: u64,
    pub overlap_pairs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            domain_b_seed: 0,
            domain_b_tokens: 250_000,
            eval_batches: 20,
            eval_batch_size: 32,
            eval_seed: 7,
            overlap_pairs: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmReport {
    pub name: String,
    pub ffn: crate::model::FfnKind,
    pub rule: UpdateRule,
    pub seed: u64,
    pub total_params: usize,
    /// Entries the rule allows to change.
    pub eligible_params: usize,
    /// Entries actually trainable in at least one applied update.
    pub updated_params: usize,
    pub pre_a: f64,
    pub pre_b: f64,
    pub retention: f64,
    pub adaptation: f64,
    /// Unnormalized and normalized overlap between A and B tokens, per APN layer.
    pub overlap: Vec<(OverlapStats, OverlapStats)>,
    pub trace: AdaptTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolReport {
    pub config: ProtocolConfig,
    pub arms: Vec<ArmReport>,
    /// Config echo for each arm, TOML.
    pub echo: Vec<String>,
}

/// Rule-level count of adaptable parameter entries.
pub fn eligible_count<F: Real>(rule: UpdateRule, state: &ModelState<F>) -> usize {
    state
        .params
        .iter()
        .zip(rule_needs_grad(rule, state))
        .filter(|(_, on)| *on)
        .map(|(p, _)| p.value.len())
        .sum()
}

/// Evaluates a pretrained arm on both domains, adapts it on B, and
/// evaluates again.
pub fn run_arm<F: Real>(
    name: &str,
    pretrained: &ModelState<F>,
    a: &DomainSplit,
    b: &DomainSplit,
    adapt: &AdaptConfig,
    pcfg: &ProtocolConfig,
) -> Result<(ArmReport, ModelState<F>)> {
    let spec = EvalSpec {
        batches: pcfg.eval_batches,
        batch_size: pcfg.eval_batch_size,
        context: adapt.context,
        seed: pcfg.eval_seed,
    };
    let pre_a = evaluate_ppl(pretrained, &a.val, &spec)?;
    let pre_b = evaluate_ppl(pretrained, &b.val, &spec)?;
    let overlap = overlap_between(pretrained, &a.val, &b.val, &spec, pcfg)?;
    let mut state = pretrained.clone();
    let trace = adapt_online(&mut state, &b.train, adapt)?;
    let retention = evaluate_ppl(&state, &a.val, &spec)?;
    let adaptation = evaluate_ppl(&state, &b.val, &spec)?;
    Ok((
        ArmReport {
            name: name.to_string(),
            ffn: pretrained.config.ffn,
            rule: adapt.rule,
            seed: adapt.seed,
            total_params: pretrained.param_count(),
            eligible_params: eligible_count(adapt.rule, pretrained),
            updated_params: trace.updated_params,
            pre_a,
            pre_b,
            retention,
            adaptation,
            overlap,
            trace,
        },
        state,
    ))
}

/// Routes one evaluation batch of each domain and compares active sets.
pub fn overlap_between<F: Real>(
    state: &ModelState<F>,
    a: &[u16],
    b: &[u16],
    spec: &EvalSpec,
    pcfg: &ProtocolConfig,
) -> Result<Vec<(OverlapStats, OverlapStats)>> {
    if state.config.ffn != crate::model::FfnKind::Apn || pcfg.overlap_pairs == 0 {
        return Ok(Vec::new());
    }
    let one = EvalSpec { batches: 1, ..*spec };
    let route = |tokens: &[u16]| -> Result<Vec<RoutingDecision>> {
        let off = crate::train::eval_offsets(tokens.len(), &one)?;
        let batch = crate::data::batch_at(tokens, &off[0], one.context);
        let f = forward(state, &batch.inputs, None, batch.batch, ForwardOptions::eval())?;
        Ok(f.decisions().into_iter().cloned().collect())
    };
    let (da, db) = (route(a)?, route(b)?);
    let mut rng = rng_for(pcfg.eval_seed, streams::EVAL);
    da.iter()
        .zip(&db)
        .map(|(x, y)| Ok((overlap_score(x, y, false, pcfg.overlap_pairs, &mut rng)?, overlap_score(x, y, true, pcfg.overlap_pairs, &mut rng)?)))
        .collect()
}

/// Pretrains one arm on domain A from its seed; returns the best-validation
/// state and the training history.
pub fn pretrain_arm<F: Real>(
    arm: &ArmConfig,
    a: &DomainSplit,
    progress: Option<&mut dyn FnMut(&crate::train::Record)>,
) -> Result<(ModelState<F>, History)> {
    let init = ModelState::<F>::init(&arm.model, &mut rng_for(arm.train.seed, streams::INIT))?;
    let out = train_offline(init, &a.train, &a.val, &arm.train, progress)?;
    Ok((out.best, out.history))
}

/// Full protocol: synthesize B, then for each arm pretrain on A, measure,
/// adapt on B and measure again.
pub fn run_protocol<F: Real>(
    vocab: &CharVocab,
    a: &DomainSplit,
    arms: &[ArmConfig],
    pcfg: &ProtocolConfig,
    mut progress: Option<&mut dyn FnMut(&str, &crate::train::Record)>,
) -> Result<ProtocolReport> {
    let b = crate::data::synthesize_domain_b(vocab, pcfg.domain_b_seed, pcfg.domain_b_tokens)?;
    let mut reports = Vec::new();
    let mut echo = Vec::new();
    for arm in arms {
        let name = arm.name.clone();
        let mut cb = |r: &crate::train::Record| {
            if let Some(p) = progress.as_deref_mut() {
                p(&name, r);
            }
        };
        let (pre, _) = pretrain_arm::<F>(arm, a, Some(&mut cb)).map_err(|e| arm_error(&arm.name, e))?;
        let (report, _) = run_arm(&arm.name, &pre, a, &b, &arm.adapt, pcfg).map_err(|e| arm_error(&arm.name, e))?;
        reports.push(report);
        echo.push(toml::to_string(arm).map_err(|e| Error::Config(e.to_string()))?);
    }
    Ok(ProtocolReport {
        config: pcfg.clone(),
        arms: reports,
        echo,
    })
}

fn arm_error(name: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("arm {name}: {m}")),
        Error::Data(m) => Error::Data(format!("arm {name}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("arm {name}: {m}")),
        other => other,
    }
}

impl ProtocolReport {
    /// Comma-separated table: one row per arm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,update_rule,retention_ppl,adaptation_ppl,updated_params,total_params,pre_a_ppl,pre_b_ppl,seed\n",
        );
        for a in &self.arms {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{},{},{:.6},{:.6},{}",
                a.name,
                a.rule.label(),
                a.retention,
                a.adaptation,
                a.updated_params,
                a.total_params,
                a.pre_a,
                a.pre_b,
                a.seed
            );
        }
        out
    }

    /// Aligned plain-text table for terminals and logs.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<12} {:>14} {:>15} {:>15}\n",
            "Model", "Update Rule", "Retention PPL", "Adaptation PPL", "Updated Params"
        );
        for a in &self.arms {
            let pct = 100.0 * a.updated_params as f64 / a.total_params.max(1) as f64;
            let _ = writeln!(
                out,
                "{:<12} {:<12} {:>14.2} {:>15.2} {:>8} ({:>3.0}%)",
                a.name,
                a.rule.label(),
                a.retention,
                a.adaptation,
                a.updated_params,
                pct
            );
        }
        for a in &self.arms {
            for (l, (u, n)) in a.overlap.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "overlap {} layer {l}: mean |K_A∩K_B| = {:.4}, normalized = {:.4}, histogram {:?}",
                    a.name, u.mean, n.mean, u.histogram
                );
            }
        }
        out
    }
}
