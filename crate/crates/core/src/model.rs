//! Pre-norm causal transformer with a pluggable positionwise sublayer.

use std::collections::HashMap;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::apn::{self, ApnConfig, ApnParams, ApnTrace, ApnVars, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{dropout_mask, BackwardCtx, Graph, Op, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Dense,
    Apn,
    /// No positionwise sublayer at all; blocks are attention only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub context: usize,
    pub dropout: f64,
    pub ffn: FfnKind,
    /// `d_ff / d` for the dense sublayer.
    pub ffn_ratio: usize,
    pub apn: ApnConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 6,
            d_model: 384,
            vocab_size: 65,
            context: 256,
            dropout: 0.2,
            ffn: FfnKind::Apn,
            ffn_ratio: 4,
            apn: ApnConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return bad("model: n_layers, n_heads and d_model must be >= 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "model: d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context == 0 {
            return bad("model: context must be >= 1".into());
        }
        if self.vocab_size == 0 {
            return bad("model: vocab_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("model: dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.ffn == FfnKind::Dense && self.ffn_ratio == 0 {
            return bad("model: ffn_ratio must be >= 1".into());
        }
        if self.ffn == FfnKind::Apn {
            self.apn.validate()?;
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.ffn_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// What a parameter tensor is, independent of its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    TokenEmbedding,
    PositionEmbedding,
    Ln1Gain,
    Ln1Bias,
    AttnQkvWeight,
    AttnQkvBias,
    AttnProjWeight,
    AttnProjBias,
    Ln2Gain,
    Ln2Bias,
    FfnInWeight,
    FfnInBias,
    FfnOutWeight,
    FfnOutBias,
    ApnNormGain,
    ApnNormBias,
    ApnPrototypes,
    ApnCode,
    ApnDecoders,
    ApnGateSlope,
    ApnGateOffset,
    ApnScale,
    FinalLnGain,
    FinalLnBias,
}

impl Role {
    /// Matrix-shaped weights that receive weight decay.
    pub fn decays(self) -> bool {
        matches!(
            self,
            Role::TokenEmbedding
                | Role::PositionEmbedding
                | Role::AttnQkvWeight
                | Role::AttnProjWeight
                | Role::FfnInWeight
                | Role::FfnOutWeight
                | Role::ApnCode
                | Role::ApnDecoders
        )
    }

    /// Parameters that belong to individual patches (leading axis = patch).
    pub fn per_patch(self) -> bool {
        matches!(self, Role::ApnDecoders | Role::ApnGateSlope | Role::ApnGateOffset)
    }

    /// Trainable under the patch-local adaptation rule.
    pub fn patch_local(self) -> bool {
        matches!(
            self,
            Role::ApnDecoders | Role::ApnGateSlope | Role::ApnGateOffset | Role::ApnCode | Role::ApnPrototypes
        )
    }

    pub fn is_apn(self) -> bool {
        matches!(
            self,
            Role::ApnNormGain
                | Role::ApnNormBias
                | Role::ApnPrototypes
                | Role::ApnCode
                | Role::ApnDecoders
                | Role::ApnGateSlope
                | Role::ApnGateOffset
                | Role::ApnScale
        )
    }

    fn suffix(self) -> &'static str {
        match self {
            Role::TokenEmbedding => "wte",
            Role::PositionEmbedding => "wpe",
            Role::Ln1Gain => "ln_1.weight",
            Role::Ln1Bias => "ln_1.bias",
            Role::AttnQkvWeight => "attn.qkv.weight",
            Role::AttnQkvBias => "attn.qkv.bias",
            Role::AttnProjWeight => "attn.proj.weight",
            Role::AttnProjBias => "attn.proj.bias",
            Role::Ln2Gain => "ln_2.weight",
            Role::Ln2Bias => "ln_2.bias",
            Role::FfnInWeight => "mlp.fc.weight",
            Role::FfnInBias => "mlp.fc.bias",
            Role::FfnOutWeight => "mlp.proj.weight",
            Role::FfnOutBias => "mlp.proj.bias",
            Role::ApnNormGain => "apn.ln.weight",
            Role::ApnNormBias => "apn.ln.bias",
            Role::ApnPrototypes => "apn.prototypes",
            Role::ApnCode => "apn.code",
            Role::ApnDecoders => "apn.decoders",
            Role::ApnGateSlope => "apn.gate_slope",
            Role::ApnGateOffset => "apn.gate_offset",
            Role::ApnScale => "apn.gamma",
            Role::FinalLnGain => "ln_f.weight",
            Role::FinalLnBias => "ln_f.bias",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub role: Role,
    pub layer: Option<usize>,
    pub value: Tensor<F>,
}

/// All model parameters plus the optimizer step they correspond to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<F> {
    pub config: ModelConfig,
    pub params: Vec<Param<F>>,
    pub step: usize,
    index: HashMap<(Role, Option<usize>), usize>,
}

fn normal<F: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("std > 0");
    Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
}

impl<F: Real> ModelState<F> {
    /// Linear and embedding weights `N(0, 0.02)`, output projections scaled
    /// by `1/sqrt(2L)`, biases zero, layer norms identity.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, v, t, l) = (config.d_model, config.vocab_size, config.context, config.n_layers);
        let proj_std = 0.02 / ((2 * l) as f64).sqrt();
        let mut params = Vec::new();
        let mut push = |role: Role, layer: Option<usize>, value: Tensor<F>| {
            let name = match layer {
                Some(i) => format!("h.{i}.{}", role.suffix()),
                None => role.suffix().to_string(),
            };
            params.push(Param {
                name,
                role,
                layer,
                value,
            });
        };
        push(Role::TokenEmbedding, None, normal(&[v, d], 0.02, rng));
        push(Role::PositionEmbedding, None, normal(&[t, d], 0.02, rng));
        for i in 0..l {
            let li = Some(i);
            push(Role::Ln1Gain, li, Tensor::full(&[d], F::one()));
            push(Role::Ln1Bias, li, Tensor::zeros(&[d]));
            push(Role::AttnQkvWeight, li, normal(&[d, 3 * d], 0.02, rng));
            push(Role::AttnQkvBias, li, Tensor::zeros(&[3 * d]));
            push(Role::AttnProjWeight, li, normal(&[d, d], proj_std, rng));
            push(Role::AttnProjBias, li, Tensor::zeros(&[d]));
            match config.ffn {
                FfnKind::Dense => {
                    let f = config.d_ff();
                    push(Role::Ln2Gain, li, Tensor::full(&[d], F::one()));
                    push(Role::Ln2Bias, li, Tensor::zeros(&[d]));
                    push(Role::FfnInWeight, li, normal(&[d, f], 0.02, rng));
                    push(Role::FfnInBias, li, Tensor::zeros(&[f]));
                    push(Role::FfnOutWeight, li, normal(&[f, d], proj_std, rng));
                    push(Role::FfnOutBias, li, Tensor::zeros(&[d]));
                }
                FfnKind::Apn => {
                    let p = ApnParams::<F>::init(d, &config.apn, rng);
                    push(Role::ApnNormGain, li, p.norm_gain);
                    push(Role::ApnNormBias, li, p.norm_bias);
                    push(Role::ApnPrototypes, li, p.prototypes);
                    push(Role::ApnCode, li, p.code);
                    push(Role::ApnDecoders, li, p.decoders);
                    push(Role::ApnGateSlope, li, p.gate_slope);
                    push(Role::ApnGateOffset, li, p.gate_offset);
                    if config.apn.residual_scale_trainable {
                        push(Role::ApnScale, li, Tensor::scalar(p.residual_scale));
                    }
                }
                FfnKind::None => {}
            }
        }
        push(Role::FinalLnGain, None, Tensor::full(&[d], F::one()));
        push(Role::FinalLnBias, None, Tensor::zeros(&[d]));
        Ok(Self::from_params(config.clone(), params, 0))
    }

    pub fn from_params(config: ModelConfig, params: Vec<Param<F>>, step: usize) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| ((p.role, p.layer), i))
            .collect();
        ModelState {
            config,
            params,
            step,
            index,
        }
    }

    pub fn position(&self, role: Role, layer: Option<usize>) -> Option<usize> {
        self.index.get(&(role, layer)).copied()
    }

    pub fn get(&self, role: Role, layer: Option<usize>) -> Option<&Tensor<F>> {
        self.position(role, layer).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, role: Role, layer: Option<usize>) -> Option<&mut Tensor<F>> {
        self.position(role, layer).map(|i| &mut self.params[i].value)
    }

    fn expect(&self, role: Role, layer: Option<usize>) -> Result<&Tensor<F>> {
        self.get(role, layer)
            .ok_or_else(|| Error::Usage(format!("model has no {role:?} parameter for layer {layer:?}")))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// APN sublayer parameters of one block as a standalone struct.
    pub fn apn_params(&self, layer: usize) -> Result<ApnParams<F>> {
        let l = Some(layer);
        let residual_scale = match self.get(Role::ApnScale, l) {
            Some(t) => t.data()[0],
            None => F::lit(self.config.apn.effective_scale(self.step)),
        };
        Ok(ApnParams {
            norm_gain: self.expect(Role::ApnNormGain, l)?.clone(),
            norm_bias: self.expect(Role::ApnNormBias, l)?.clone(),
            prototypes: self.expect(Role::ApnPrototypes, l)?.clone(),
            code: self.expect(Role::ApnCode, l)?.clone(),
            decoders: self.expect(Role::ApnDecoders, l)?.clone(),
            gate_slope: self.expect(Role::ApnGateSlope, l)?.clone(),
            gate_offset: self.expect(Role::ApnGateOffset, l)?.clone(),
            residual_scale,
        })
    }

    pub fn cast<G: Real>(&self) -> ModelState<G> {
        let params = self
            .params
            .iter()
            .map(|p| Param {
                name: p.name.clone(),
                role: p.role,
                layer: p.layer,
                value: p.value.cast(),
            })
            .collect();
        ModelState::from_params(self.config.clone(), params, self.step)
    }
}

/// Parameter counts broken down by component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub embeddings: usize,
    pub attention: usize,
    pub ffn: usize,
    /// APN prototypes + code + decoders + gates, summed over layers.
    pub apn_core: usize,
    /// APN input layer norm (2d per layer) and trainable scales.
    pub apn_extra: usize,
    pub other: usize,
}

pub fn param_counts<F: Real>(state: &ModelState<F>) -> ParamCounts {
    let mut c = ParamCounts {
        total: 0,
        embeddings: 0,
        attention: 0,
        ffn: 0,
        apn_core: 0,
        apn_extra: 0,
        other: 0,
    };
    for p in &state.params {
        let n = p.value.len();
        c.total += n;
        match p.role {
            Role::TokenEmbedding | Role::PositionEmbedding => c.embeddings += n,
            Role::Ln1Gain
            | Role::Ln1Bias
            | Role::AttnQkvWeight
            | Role::AttnQkvBias
            | Role::AttnProjWeight
            | Role::AttnProjBias => c.attention += n,
            Role::Ln2Gain
            | Role::Ln2Bias
            | Role::FfnInWeight
            | Role::FfnInBias
            | Role::FfnOutWeight
            | Role::FfnOutBias => c.ffn += n,
            Role::ApnPrototypes | Role::ApnCode | Role::ApnDecoders | Role::ApnGateSlope | Role::ApnGateOffset => {
                c.apn_core += n
            }
            Role::ApnNormGain | Role::ApnNormBias | Role::ApnScale => c.apn_extra += n,
            Role::FinalLnGain | Role::FinalLnBias => c.other += n,
        }
    }
    c
}

/// Fused multi-head causal attention over a packed `[B*T, 3d]` projection.
struct CausalAttention<F> {
    qkv: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
    /// Post-softmax probabilities, `[B, H, T, T]`.
    probs: Vec<F>,
    /// Inverted-dropout multipliers on the causal (lower-triangular) part of
    /// each `T x T` block, packed row by row.
    mask: Option<Vec<F>>,
}

fn tri(t: usize) -> usize {
    t * (t + 1) / 2
}

impl<F: Real> CausalAttention<F> {
    fn scale(&self) -> F {
        F::lit(1.0 / ((self.d / self.heads) as f64).sqrt())
    }

    /// Probabilities with the dropout mask of block `bh` applied, written
    /// into `buf` (entries above the diagonal are left untouched).
    fn masked<'s>(&self, bh: usize, p: &'s [F], buf: &'s mut [F]) -> &'s [F] {
        let t = self.seq;
        match &self.mask {
            None => p,
            Some(m) => {
                let m = &m[bh * tri(t)..(bh + 1) * tri(t)];
                for i in 0..t {
                    let row = &p[i * t..i * t + i + 1];
                    let mr = &m[tri(i)..tri(i + 1)];
                    for ((o, &a), &mm) in buf[i * t..].iter_mut().zip(row).zip(mr) {
                        *o = a * mm;
                    }
                }
                buf
            }
        }
    }

    fn forward(&mut self, qkv: &[F]) -> Vec<F> {
        let (b, t, h, d) = (self.batch, self.seq, self.heads, self.d);
        let hd = d / h;
        let scale = self.scale();
        let mut out = vec![F::zero(); b * t * d];
        self.probs = vec![F::zero(); b * h * t * t];
        let mut probs = std::mem::take(&mut self.probs);
        let mut dropped = vec![F::zero(); t * t];
        for bi in 0..b {
            let base = bi * t * 3 * d;
            for hi in 0..h {
                let bh = bi * h + hi;
                let p = &mut probs[bh * t * t..(bh + 1) * t * t];
                let q = &qkv[base + hi * hd..];
                let k = &qkv[base + d + hi * hd..];
                F::gemm(t, hd, t, scale, q, 3 * d, 1, k, 1, 3 * d, F::zero(), p, t, 1);
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let max = row[..=i].iter().copied().fold(F::neg_infinity(), F::max);
                    for v in &mut row[..=i] {
                        *v = (*v - max).fast_exp();
                    }
                    let z: F = row[..=i].iter().copied().sum();
                    let inv = F::one() / z;
                    for v in &mut row[..=i] {
                        *v *= inv;
                    }
                    row[i + 1..].iter_mut().for_each(|v| *v = F::zero());
                }
                let pv = self.masked(bh, p, &mut dropped);
                let v = &qkv[base + 2 * d + hi * hd..];
                let o = &mut out[bi * t * d + hi * hd..];
                F::gemm(t, t, hd, F::one(), pv, t, 1, v, 3 * d, 1, F::zero(), o, d, 1);
            }
        }
        self.probs = probs;
        out
    }
}

impl<F: Real> Op<F> for CausalAttention<F> {
    fn name(&self) -> &'static str {
        "causal_attention"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.qkv]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>, g: &[F]) -> Vec<Option<Vec<F>>> {
        let (b, t, h, d) = (self.batch, self.seq, self.heads, self.d);
        let hd = d / h;
        let scale = self.scale();
        let qkv = ctx.value(self.qkv).data();
        let mut dqkv = vec![F::zero(); qkv.len()];
        let mut dp = vec![F::zero(); t * t];
        let mut pd = vec![F::zero(); t * t];
        for bi in 0..b {
            let base = bi * t * 3 * d;
            for hi in 0..h {
                let bh = bi * h + hi;
                let p = &self.probs[bh * t * t..(bh + 1) * t * t];
                let pv = self.masked(bh, p, &mut pd);
                let go = &g[bi * t * d + hi * hd..];
                let v = &qkv[base + 2 * d + hi * hd..];
                // dV = P^T dO
                F::gemm(t, t, hd, F::one(), pv, 1, t, go, d, 1, F::zero(), &mut dqkv[base + 2 * d + hi * hd..], 3 * d, 1);
                // dP = dO V^T
                F::gemm(t, hd, t, F::one(), go, d, 1, v, 1, 3 * d, F::zero(), &mut dp, t, 1);
                if let Some(m) = &self.mask {
                    let m = &m[bh * tri(t)..(bh + 1) * tri(t)];
                    for i in 0..t {
                        let mr = &m[tri(i)..tri(i + 1)];
                        for (x, &mm) in dp[i * t..].iter_mut().zip(mr) {
                            *x *= mm;
                        }
                    }
                }
                // softmax backward, then fold in the score scale
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: F = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                    dr[i + 1..].iter_mut().for_each(|x| *x = F::zero());
                }
                let q = &qkv[base + hi * hd..];
                let k = &qkv[base + d + hi * hd..];
                // dQ = dS K, dK = dS^T Q
                F::gemm(t, t, hd, F::one(), &dp, t, 1, k, 3 * d, 1, F::zero(), &mut dqkv[base + hi * hd..], 3 * d, 1);
                F::gemm(t, t, hd, F::one(), &dp, 1, t, q, 3 * d, 1, F::zero(), &mut dqkv[base + d + hi * hd..], 3 * d, 1);
            }
        }
        vec![Some(dqkv)]
    }
}

/// Records multi-head causal self-attention of `qkv: [B*T, 3d]` (packed
/// query, key, value projections) and returns `[B*T, d]`.
pub fn causal_attention<F: Real>(
    g: &mut Graph<F>,
    qkv: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    attn_dropout: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let shape = g.shape(qkv).to_vec();
    let d3 = *shape.last().unwrap_or(&0);
    if d3 % 3 != 0 || (d3 / 3) % heads != 0 || g.value(qkv).rows() != batch * seq {
        return Err(Error::shape("causal_attention", &shape, &[batch, seq, heads]));
    }
    let d = d3 / 3;
    let mask = match rng {
        Some(rng) if attn_dropout > 0.0 => {
            Some(dropout_mask(batch * heads * tri(seq), attn_dropout, rng))
        }
        _ => None,
    };
    let mut op = CausalAttention {
        qkv,
        batch,
        seq,
        heads,
        d,
        probs: Vec::new(),
        mask,
    };
    let out = op.forward(g.value(qkv).data());
    Ok(g.record(Tensor::new(vec![batch * seq, d], out)?, Box::new(op)))
}

/// Which parameters get gradients in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Trainable<'a> {
    All,
    None,
    /// One flag per entry of `ModelState::params`.
    Mask(&'a [bool]),
}

/// Forward-pass switches.
pub struct ForwardOptions<'a> {
    pub training: bool,
    /// Drives dropout and patch dropout; required when `training` is set.
    pub rng: Option<&'a mut dyn RngCore>,
    pub trainable: Trainable<'a>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions {
            training: false,
            rng: None,
            trainable: Trainable::None,
        }
    }
}

/// Per-block outputs surfaced for monitoring and masking.
pub struct BlockTrace {
    /// Input to the positionwise sublayer (`h'`).
    pub sublayer_input: Var,
    pub apn: Option<ApnTrace>,
    /// Residual-stream output of the block.
    pub output: Var,
}

pub struct Forward<F: Real> {
    pub graph: Graph<F>,
    /// One graph leaf per entry of `ModelState::params`.
    pub params: Vec<Var>,
    pub logits: Var,
    /// Mean next-token cross-entropy, when targets were supplied.
    pub ce: Option<Var>,
    /// `ce` plus weighted auxiliary APN losses.
    pub loss: Option<Var>,
    pub blocks: Vec<BlockTrace>,
}

impl<F: Real> Forward<F> {
    pub fn ce_value(&self) -> Option<f64> {
        self.ce.map(|v| self.graph.value(v).data()[0].as_f64())
    }

    pub fn loss_value(&self) -> Option<f64> {
        self.loss.map(|v| self.graph.value(v).data()[0].as_f64())
    }

    pub fn decisions(&self) -> Vec<&apn::RoutingDecision> {
        self.blocks.iter().filter_map(|b| b.apn.as_ref().map(|a| &a.decision)).collect()
    }

    /// Mean `||gamma * delta||_2` per APN layer (or per-layer sublayer output
    /// for dense models), for diagnostics.
    pub fn residual_magnitudes(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| {
                let v = match &b.apn {
                    Some(a) => self.graph.value(a.residual),
                    None => self.graph.value(b.output),
                };
                let rows = v.rows().max(1);
                (0..v.rows())
                    .map(|r| v.row(r).iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt())
                    .sum::<f64>()
                    / rows as f64
            })
            .collect()
    }
}

fn reborrow<'b>(r: &'b mut Option<&mut dyn RngCore>) -> Option<&'b mut dyn RngCore> {
    match r {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Runs the model on `inputs: [batch, seq]` token ids. With `targets`
/// (same layout), also records the loss.
pub fn forward<F: Real>(
    state: &ModelState<F>,
    inputs: &[usize],
    targets: Option<&[usize]>,
    batch: usize,
    mut opts: ForwardOptions<'_>,
) -> Result<Forward<F>> {
    let cfg = &state.config;
    if batch == 0 || inputs.len() % batch != 0 || inputs.is_empty() {
        return Err(Error::Usage(format!(
            "{} tokens do not form {batch} equal sequences",
            inputs.len()
        )));
    }
    let seq = inputs.len() / batch;
    if seq > cfg.context {
        return Err(Error::Usage(format!(
            "sequence length {seq} exceeds context {}",
            cfg.context
        )));
    }
    if let Some(t) = targets {
        if t.len() != inputs.len() {
            return Err(Error::shape("lm targets", &[inputs.len()], &[t.len()]));
        }
    }
    if opts.training && opts.rng.is_none() {
        return Err(Error::Usage("training forward needs an rng".into()));
    }
    if let Trainable::Mask(m) = opts.trainable {
        if m.len() != state.params.len() {
            return Err(Error::shape("trainable mask", &[state.params.len()], &[m.len()]));
        }
    }
    let mut rng_slot = opts.rng.take();
    let mut g = Graph::new();
    let params: Vec<Var> = state
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let train = match opts.trainable {
                Trainable::All => true,
                Trainable::None => false,
                Trainable::Mask(m) => m[i],
            };
            g.leaf(p.value.clone(), train)
        })
        .collect();
    let var = |role: Role, layer: Option<usize>| -> Result<Var> {
        state
            .position(role, layer)
            .map(|i| params[i])
            .ok_or_else(|| Error::Usage(format!("model has no {role:?} parameter for layer {layer:?}")))
    };
    let p_drop = if opts.training { cfg.dropout } else { 0.0 };

    let wte = var(Role::TokenEmbedding, None)?;
    let tok = g.embedding(wte, inputs)?;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let pos_table = var(Role::PositionEmbedding, None)?;
    let pos = g.embedding(pos_table, &positions)?;
    let mut x = g.add(tok, pos)?;
    if let Some(rng) = reborrow(&mut rng_slot) {
        x = g.dropout(x, p_drop, rng)?;
    }

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let mut aux: Vec<Var> = Vec::new();
    for l in 0..cfg.n_layers {
        let li = Some(l);
        let ln1 = g.layer_norm(x, var(Role::Ln1Gain, li)?, var(Role::Ln1Bias, li)?, LN_EPS)?;
        let qkv = g.linear(ln1, var(Role::AttnQkvWeight, li)?, var(Role::AttnQkvBias, li)?)?;
        let att = causal_attention(&mut g, qkv, batch, seq, cfg.n_heads, p_drop, reborrow(&mut rng_slot))?;
        let mut att = g.linear(att, var(Role::AttnProjWeight, li)?, var(Role::AttnProjBias, li)?)?;
        if let Some(rng) = reborrow(&mut rng_slot) {
            att = g.dropout(att, p_drop, rng)?;
        }
        let h = g.add(x, att)?;

        let (out, trace) = match cfg.ffn {
            FfnKind::Dense => {
                let z = g.layer_norm(h, var(Role::Ln2Gain, li)?, var(Role::Ln2Bias, li)?, LN_EPS)?;
                let a = g.linear(z, var(Role::FfnInWeight, li)?, var(Role::FfnInBias, li)?)?;
                let a = g.gelu(a);
                let mut m = g.linear(a, var(Role::FfnOutWeight, li)?, var(Role::FfnOutBias, li)?)?;
                if let Some(rng) = reborrow(&mut rng_slot) {
                    m = g.dropout(m, p_drop, rng)?;
                }
                (g.add(h, m)?, None)
            }
            FfnKind::Apn => {
                let vars = ApnVars {
                    norm_gain: var(Role::ApnNormGain, li)?,
                    norm_bias: var(Role::ApnNormBias, li)?,
                    prototypes: var(Role::ApnPrototypes, li)?,
                    code: var(Role::ApnCode, li)?,
                    decoders: var(Role::ApnDecoders, li)?,
                    gate_slope: var(Role::ApnGateSlope, li)?,
                    gate_offset: var(Role::ApnGateOffset, li)?,
                    scale: state.position(Role::ApnScale, li).map(|i| params[i]),
                };
                let gamma = cfg.apn.effective_scale(state.step);
                // only consulted for patch dropout, which is off outside training
                let mut no_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
                let rng: &mut dyn RngCore = match reborrow(&mut rng_slot) {
                    Some(r) => r,
                    None => &mut no_rng,
                };
                let trace = apn::apn_residual(&mut g, h, &vars, &cfg.apn, gamma, opts.training, &mut *rng)?;
                let mut res = trace.residual;
                if opts.training {
                    res = g.dropout(res, p_drop, rng)?;
                }
                if targets.is_some() {
                    if cfg.apn.balance_weight > 0.0 {
                        aux.push(g.scale(trace.balance, cfg.apn.balance_weight));
                    }
                    if cfg.apn.entropy_weight > 0.0 {
                        aux.push(g.scale(trace.neg_entropy, cfg.apn.entropy_weight));
                    }
                }
                (g.add(h, res)?, Some(trace))
            }
            FfnKind::None => (h, None),
        };
        blocks.push(BlockTrace {
            sublayer_input: h,
            apn: trace,
            output: out,
        });
        x = out;
    }
    let xf = g.layer_norm(x, var(Role::FinalLnGain, None)?, var(Role::FinalLnBias, None)?, LN_EPS)?;
    let logits = g.matmul_t(xf, wte)?;
    let (ce, loss) = match targets {
        Some(t) => {
            let ce = g.cross_entropy(logits, t)?;
            let mut loss = ce;
            for a in aux {
                loss = g.add(loss, a)?;
            }
            (Some(ce), Some(loss))
        }
        None => (None, None),
    };
    Ok(Forward {
        graph: g,
        params,
        logits,
        ce,
        loss,
        blocks,
    })
}

/// Mean next-token cross-entropy of one batch without dropout.
pub fn lm_loss<F: Real>(state: &ModelState<F>, inputs: &[usize], targets: &[usize], batch: usize) -> Result<f64> {
    let f = forward(state, inputs, Some(targets), batch, ForwardOptions::eval())?;
    Ok(f.ce_value().expect("targets supplied"))
}

/// Greedy-free sampling for smoke tests: draws `n` tokens after `prompt`.
pub fn sample<F: Real, R: Rng + ?Sized>(
    state: &ModelState<F>,
    prompt: &[usize],
    n: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Usage("sampling needs a non-empty prompt".into()));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let start = seq.len().saturating_sub(state.config.context);
        let window = &seq[start..];
        let f = forward(state, window, None, 1, ForwardOptions::eval())?;
        let logits = f.graph.value(f.logits);
        let last = logits.row(window.len() - 1);
        let max = last.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = last.iter().map(|v| ((v.as_f64() - max) / temperature).exp()).collect();
        let z: f64 = probs.iter().sum();
        let mut u = rng.random::<f64>() * z;
        let mut next = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            if u < *p {
                next = i;
                break;
            }
            u -= p;
        }
        seq.push(next);
    }
    Ok(seq[prompt.len()..].to_vec())
}
