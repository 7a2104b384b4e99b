//! Dense decoder-only transformer with SwiGLU FFN blocks: pre-norm causal
//! multi-head attention, RMS normalization, learned absolute positions, no
//! biases. The same forward graph also runs the upcycled MoE variant.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tape::{MixPart, Tape, ValueId};
use crate::tensor::{arg_err, Real, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub lb_alpha: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.ffn_dim,
            self.n_layers,
            self.n_heads,
            self.vocab_size,
            self.max_seq_len,
            self.n_experts,
            self.top_k,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(arg_err("ModelConfig", "all dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(arg_err(
                "ModelConfig",
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.top_k > self.n_experts {
            return Err(arg_err(
                "ModelConfig",
                format!("top_k {} exceeds n_experts {}", self.top_k, self.n_experts),
            ));
        }
        if !self.lb_alpha.is_finite() || self.lb_alpha < 0.0 {
            return Err(arg_err("ModelConfig", "lb_alpha must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Delta merging precondition: everything except the MoE settings match.
    pub fn arch_compatible(&self, other: &ModelConfig) -> bool {
        self.d_model == other.d_model
            && self.ffn_dim == other.ffn_dim
            && self.n_layers == other.n_layers
            && self.n_heads == other.n_heads
            && self.vocab_size == other.vocab_size
            && self.max_seq_len == other.max_seq_len
    }

    pub fn dense_param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.ffn_dim, self.vocab_size);
        v * d
            + self.max_seq_len * d
            + self.n_layers * (d + 4 * d * d + d + 2 * d * f + f * d)
            + d
            + d * v
    }

    pub fn moe_param_count(&self) -> usize {
        let (d, f, n) = (self.d_model, self.ffn_dim, self.n_experts);
        self.dense_param_count() + self.n_layers * ((n - 1) * (2 * d * f + f * d) + d * n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Dense,
    Moe,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Dense => "dense",
            ModelKind::Moe => "moe",
        }
    }
}

enum InitKind {
    Normal,
    Ones,
    Zeros,
}

const INIT_STD: f64 = 0.02;

fn dense_param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let (d, f, v) = (cfg.d_model, cfg.ffn_dim, cfg.vocab_size);
    let mut specs = vec![
        ("embed.tok".to_string(), vec![v, d], InitKind::Normal),
        ("embed.pos".to_string(), vec![cfg.max_seq_len, d], InitKind::Normal),
    ];
    for l in 0..cfg.n_layers {
        specs.push((format!("layers.{l}.attn.norm"), vec![d], InitKind::Ones));
        for proj in ["q", "k", "v", "o"] {
            specs.push((format!("layers.{l}.attn.{proj}"), vec![d, d], InitKind::Normal));
        }
        specs.push((format!("layers.{l}.ffn.norm"), vec![d], InitKind::Ones));
        specs.push((format!("layers.{l}.ffn.gate"), vec![d, f], InitKind::Normal));
        specs.push((format!("layers.{l}.ffn.up"), vec![d, f], InitKind::Normal));
        specs.push((format!("layers.{l}.ffn.down"), vec![f, d], InitKind::Normal));
    }
    specs.push(("final.norm".to_string(), vec![d], InitKind::Ones));
    // Zero head makes an untrained model produce exactly uniform logits.
    specs.push(("lm_head".to_string(), vec![d, v], InitKind::Zeros));
    specs
}

/// Canonical (name, shape) list of a dense model, in store order.
pub fn dense_param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    dense_param_specs(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Canonical (name, shape) list of an upcycled model, in store order.
pub fn moe_param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, n) = (cfg.d_model, cfg.ffn_dim, cfg.n_experts);
    let mut out = Vec::new();
    for (name, shape) in dense_param_shapes(cfg) {
        if let Some(layer_part) = name
            .strip_prefix("layers.")
            .and_then(|r| r.split_once(".ffn."))
            .filter(|(_, part)| matches!(*part, "gate" | "up" | "down"))
        {
            let (layer, part) = layer_part;
            if part == "gate" {
                out.push((format!("layers.{layer}.moe.router"), vec![d, n]));
                for e in 0..n {
                    out.push((format!("layers.{layer}.moe.experts.{e}.gate"), vec![d, f]));
                }
            } else {
                for e in 0..n {
                    out.push((format!("layers.{layer}.moe.experts.{e}.{part}"), vec![d, f]));
                }
            }
        } else {
            out.push((name, shape));
        }
    }
    // down projections have shape [f, d]
    for (name, shape) in out.iter_mut() {
        if name.ends_with(".down") {
            *shape = vec![f, d];
        }
    }
    out
}

#[derive(Clone)]
pub struct DenseModel {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
}

impl DenseModel {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, kind) in dense_param_specs(cfg) {
            let t = match kind {
                InitKind::Normal => Tensor::randn(&shape, INIT_STD, &mut rng),
                InitKind::Ones => Tensor::full(&shape, 1.0),
                InitKind::Zeros => Tensor::zeros(&shape),
            };
            params.insert(name, t)?;
        }
        Ok(DenseModel { cfg: cfg.clone(), params })
    }

    /// Logits for one sequence, deterministic, no gradients recorded.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<f32>> {
        let mut g = Graph::eval(&self.params);
        let out = forward_graph(&mut g, &self.cfg, ModelKind::Dense, tokens, 1, tokens.len())?;
        Ok(g.tape.value(out.logits).clone())
    }
}

#[derive(Clone)]
pub struct MoeModel {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    /// Names whose tensors must stay bit-identical across training steps.
    pub frozen: BTreeSet<String>,
}

impl MoeModel {
    /// Logits plus the per-layer routing selections of one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<(Tensor<f32>, RoutingTrace)> {
        let mut g = Graph::eval(&self.params);
        let out = forward_graph(&mut g, &self.cfg, ModelKind::Moe, tokens, 1, tokens.len())?;
        let logits = g.tape.value(out.logits).clone();
        Ok((
            logits,
            RoutingTrace { selections: out.selections, k: self.cfg.top_k, positions: tokens.len() },
        ))
    }
}

/// Per-layer top-k membership of every position in a forward pass.
pub struct RoutingTrace {
    /// One row-major [positions x k] index list per MoE layer.
    pub selections: Vec<Vec<u32>>,
    pub k: usize,
    pub positions: usize,
}

#[derive(Clone)]
pub enum Model {
    Dense(DenseModel),
    Moe(MoeModel),
}

impl Model {
    pub fn cfg(&self) -> &ModelConfig {
        match self {
            Model::Dense(m) => &m.cfg,
            Model::Moe(m) => &m.cfg,
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        match self {
            Model::Dense(m) => &m.params,
            Model::Moe(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            Model::Dense(m) => &mut m.params,
            Model::Moe(m) => &mut m.params,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Dense(_) => ModelKind::Dense,
            Model::Moe(_) => ModelKind::Moe,
        }
    }

    pub fn frozen(&self) -> BTreeSet<String> {
        match self {
            Model::Dense(_) => BTreeSet::new(),
            Model::Moe(m) => m.frozen.clone(),
        }
    }

    pub fn as_dense(&self) -> Option<&DenseModel> {
        match self {
            Model::Dense(m) => Some(m),
            Model::Moe(_) => None,
        }
    }

    pub fn as_moe(&self) -> Option<&MoeModel> {
        match self {
            Model::Moe(m) => Some(m),
            Model::Dense(_) => None,
        }
    }
}

/// Binds named parameters to tape leaves for one forward/backward pass.
pub struct Graph<'p, S: Real> {
    pub tape: Tape<S>,
    params: &'p ParamStore<S>,
    bound: Vec<(String, ValueId, Vec<usize>)>,
}

impl<'p, S: Real> Graph<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Graph { tape: Tape::new(), params, bound: Vec::new() }
    }

    pub fn eval(params: &'p ParamStore<S>) -> Self {
        Graph { tape: Tape::eval(), params, bound: Vec::new() }
    }

    pub fn param(&mut self, name: &str) -> Result<ValueId> {
        if let Some((_, id, _)) = self.bound.iter().find(|(n, _, _)| n == name) {
            return Ok(*id);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| arg_err("Graph::param", format!("unknown parameter {name}")))?
            .clone();
        let shape = t.shape().to_vec();
        let id = self.tape.leaf(t)?;
        self.bound.push((name.to_string(), id, shape));
        Ok(id)
    }

    /// Backward pass; returns per-name gradients, exact zeros for bound
    /// parameters the loss never touched.
    pub fn grads(&self, loss: ValueId) -> Result<ParamStore<S>> {
        let g = self.tape.backward(loss)?;
        let mut out = ParamStore::new();
        for (name, id, shape) in &self.bound {
            out.insert(name.clone(), g.get_or_zeros(*id, shape))?;
        }
        Ok(out)
    }
}

pub struct ForwardOut {
    pub logits: ValueId,
    /// Per-MoE-layer load-balance scalars (Eq. 6), one per layer.
    pub lb: Vec<ValueId>,
    /// Per-MoE-layer row-major [b*t x k] top-k memberships.
    pub selections: Vec<Vec<u32>>,
}

/// SwiGLU composition: (SiLU(x gate) . (x up)) down.
pub fn ffn_graph<S: Real>(
    tape: &mut Tape<S>,
    x: ValueId,
    gate: ValueId,
    up: ValueId,
    down: ValueId,
) -> Result<ValueId> {
    let xg = tape.matmul(x, gate)?;
    let act = tape.silu(xg)?;
    let xu = tape.matmul(x, up)?;
    let hidden = tape.mul(act, xu)?;
    tape.matmul(hidden, down)
}

/// Standalone single-expert forward for plain tensors.
pub fn ffn_forward(x: &Tensor<f32>, gate: &Tensor<f32>, up: &Tensor<f32>, down: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::eval();
    let xi = tape.leaf(x.clone())?;
    let gi = tape.leaf(gate.clone())?;
    let ui = tape.leaf(up.clone())?;
    let di = tape.leaf(down.clone())?;
    let out = ffn_graph(&mut tape, xi, gi, ui, di)?;
    Ok(tape.value(out).clone())
}

/// Full batched forward: token embeddings + positions, pre-norm attention
/// and FFN/MoE residual blocks, final norm, LM head.
pub fn forward_graph<S: Real>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    kind: ModelKind,
    tokens: &[u32],
    b: usize,
    t: usize,
) -> Result<ForwardOut> {
    if tokens.len() != b * t || t == 0 || b == 0 {
        return Err(arg_err("forward", format!("expected {b}x{t} tokens, got {}", tokens.len())));
    }
    if t > cfg.max_seq_len {
        return Err(arg_err("forward", format!("sequence length {t} exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    let heads = cfg.n_heads;

    let tok_table = g.param("embed.tok")?;
    let tok_emb = g.tape.gather_rows(tok_table, tokens)?;
    let pos_table = g.param("embed.pos")?;
    let pos_idx: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
    let pos_emb = g.tape.gather_rows(pos_table, &pos_idx)?;
    let mut h = g.tape.add(tok_emb, pos_emb)?;

    let inv_sqrt_hd = S::of_f64(1.0 / (cfg.head_dim() as f64).sqrt());
    let mut lb = Vec::new();
    let mut selections = Vec::new();

    for l in 0..cfg.n_layers {
        // Attention block.
        let norm = g.param(&format!("layers.{l}.attn.norm"))?;
        let xn = g.tape.rms_norm(h, norm)?;
        let wq = g.param(&format!("layers.{l}.attn.q"))?;
        let wk = g.param(&format!("layers.{l}.attn.k"))?;
        let wv = g.param(&format!("layers.{l}.attn.v"))?;
        let q = g.tape.matmul(xn, wq)?;
        let k = g.tape.matmul(xn, wk)?;
        let v = g.tape.matmul(xn, wv)?;
        let qh = g.tape.split_heads(q, b, t, heads)?;
        let kh = g.tape.split_heads(k, b, t, heads)?;
        let vh = g.tape.split_heads(v, b, t, heads)?;
        let scores = g.tape.bmm(qh, kh, true)?;
        let scaled = g.tape.scale(scores, inv_sqrt_hd)?;
        let probs = g.tape.causal_softmax(scaled)?;
        let ctx = g.tape.bmm(probs, vh, false)?;
        let merged = g.tape.merge_heads(ctx, b, t, heads)?;
        let wo = g.param(&format!("layers.{l}.attn.o"))?;
        let attn_out = g.tape.matmul(merged, wo)?;
        h = g.tape.add(h, attn_out)?;

        // FFN / MoE block.
        let norm = g.param(&format!("layers.{l}.ffn.norm"))?;
        let xn = g.tape.rms_norm(h, norm)?;
        match kind {
            ModelKind::Dense => {
                let gate = g.param(&format!("layers.{l}.ffn.gate"))?;
                let up = g.param(&format!("layers.{l}.ffn.up"))?;
                let down = g.param(&format!("layers.{l}.ffn.down"))?;
                let f = ffn_graph(&mut g.tape, xn, gate, up, down)?;
                h = g.tape.add(h, f)?;
            }
            ModelKind::Moe => {
                let (mix, lb_id, sel) = moe_block(g, cfg, l, xn, b * t)?;
                h = g.tape.add(h, mix)?;
                lb.push(lb_id);
                selections.push(sel);
            }
        }
    }

    let norm = g.param("final.norm")?;
    let hn = g.tape.rms_norm(h, norm)?;
    let head = g.param("lm_head")?;
    let logits = g.tape.matmul(hn, head)?;
    Ok(ForwardOut { logits, lb, selections })
}

/// One MoE layer over normalized hidden states: top-k gate, dispatch to the
/// selected experts only, weighted scatter back, plus the Eq. 6 scalar.
fn moe_block<S: Real>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    layer: usize,
    xn: ValueId,
    rows: usize,
) -> Result<(ValueId, ValueId, Vec<u32>)> {
    let n = cfg.n_experts;
    let k = cfg.top_k;
    let router = g.param(&format!("layers.{layer}.moe.router"))?;
    let r_logits = g.tape.matmul(xn, router)?;
    let probs = g.tape.softmax(r_logits)?;
    let (weights, sel) = g.tape.topk_renorm(probs, k)?;

    // Token rows routed to each expert, in token order.
    let mut routed: Vec<Vec<u32>> = vec![Vec::new(); n];
    for row in 0..rows {
        for &e in &sel[row * k..(row + 1) * k] {
            routed[e as usize].push(row as u32);
        }
    }

    let mut parts = Vec::new();
    for (e, rows_e) in routed.iter().enumerate() {
        if rows_e.is_empty() {
            continue;
        }
        let gate = g.param(&format!("layers.{layer}.moe.experts.{e}.gate"))?;
        let up = g.param(&format!("layers.{layer}.moe.experts.{e}.up"))?;
        let down = g.param(&format!("layers.{layer}.moe.experts.{e}.down"))?;
        let xg = g.tape.gather_rows(xn, rows_e)?;
        let out = ffn_graph(&mut g.tape, xg, gate, up, down)?;
        parts.push(MixPart { expert: e, value: out, rows: rows_e.clone() });
    }
    let mix = g.tape.mix_rows(weights, parts, cfg.d_model)?;

    // Load balance: f_i = assignments / (rows * k) as constants, P_i = mean
    // router probability over all tokens; lb = N * sum f_i P_i.
    let mean_p = g.tape.mean_rows(probs)?;
    let coeffs: Vec<S> = routed
        .iter()
        .map(|r| S::of_f64(n as f64 * r.len() as f64 / (rows as f64 * k as f64)))
        .collect();
    let lb = g.tape.dot_vec(mean_p, coeffs)?;
    Ok((mix, lb, sel))
}

/// Builds NTP row weights and shifted targets from a token/mask batch.
///
/// `mask[i]` marks token `i` as a real prediction target; the loss is the
/// mean over sequences of the per-sequence mean of -log p (Eq. 5 double
/// average). Logit row `p` predicts token `p+1` of the same sequence.
pub fn ntp_targets(tokens: &[u32], mask: &[u8], b: usize, t: usize) -> Result<(Vec<u32>, Vec<f64>)> {
    if tokens.len() != b * t || mask.len() != b * t {
        return Err(arg_err("ntp_targets", "tokens/mask must be b*t long"));
    }
    let mut targets = vec![0u32; b * t];
    let mut weights = vec![0.0f64; b * t];
    let mut seq_counts = Vec::with_capacity(b);
    for s in 0..b {
        let count = (1..t).filter(|&p| mask[s * t + p] != 0).count();
        seq_counts.push(count);
    }
    let active = seq_counts.iter().filter(|&&c| c > 0).count();
    if active == 0 {
        return Err(arg_err("ntp_targets", "batch has no maskable positions"));
    }
    for s in 0..b {
        if seq_counts[s] == 0 {
            continue;
        }
        let w = 1.0 / (seq_counts[s] as f64 * active as f64);
        for p in 0..t - 1 {
            if mask[s * t + p + 1] != 0 {
                targets[s * t + p] = tokens[s * t + p + 1];
                weights[s * t + p] = w;
            }
        }
    }
    Ok((targets, weights))
}

/// Graph-level NTP loss over a padded batch.
pub fn ntp_loss_graph<S: Real>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    kind: ModelKind,
    tokens: &[u32],
    mask: &[u8],
    b: usize,
    t: usize,
) -> Result<(ValueId, ForwardOut)> {
    let out = forward_graph(g, cfg, kind, tokens, b, t)?;
    let (targets, weights) = ntp_targets(tokens, mask, b, t)?;
    let loss = g.tape.cross_entropy_weighted(out.logits, &targets, weights)?;
    Ok((loss, out))
}

/// Mean over sequences of mean per-token -log P(y_t | y_<t).
pub fn ntp_loss(model: &Model, seqs: &[Vec<u32>]) -> Result<f32> {
    if seqs.is_empty() {
        return Err(arg_err("ntp_loss", "empty batch"));
    }
    if seqs.iter().any(|s| s.len() < 2) {
        return Err(arg_err("ntp_loss", "every sequence needs length >= 2"));
    }
    let b = seqs.len();
    let t = seqs.iter().map(|s| s.len()).max().unwrap();
    let mut tokens = vec![0u32; b * t];
    let mut mask = vec![0u8; b * t];
    for (s, seq) in seqs.iter().enumerate() {
        for (p, &tok) in seq.iter().enumerate() {
            tokens[s * t + p] = tok;
            if p > 0 {
                mask[s * t + p] = 1;
            }
        }
    }
    let params = model.params();
    let mut g = Graph::eval(params);
    let (loss, _) = ntp_loss_graph(&mut g, model.cfg(), model.kind(), &tokens, &mask, b, t)?;
    Ok(g.tape.value(loss).item())
}
