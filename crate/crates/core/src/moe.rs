//! Sparse upcycling and the MoE layer: expert bank, top-k router,
//! residual combination, load-balancing loss, frozen-parameter bookkeeping.

use std::collections::BTreeSet;

use crate::model::{ffn_graph, ntp_loss_graph, Graph, Model, ModelConfig, ModelKind, DenseModel, MoeModel};
use crate::params::ParamStore;
use crate::tape::{MixPart, Tape, ValueId};
use crate::tensor::{arg_err, Real, Result, Tensor};

/// Replaces every FFN block by an expert bank of `n_experts` deep copies
/// plus a zero-initialized router. Expert 0 and every original dense
/// tensor are flagged frozen; only expansion experts and routers train.
pub fn upcycle(dense: &DenseModel, n_experts: usize, top_k: usize) -> Result<MoeModel> {
    if n_experts < 2 {
        return Err(arg_err("upcycle", format!("n_experts must be >= 2, got {n_experts}")));
    }
    if top_k == 0 || top_k > n_experts {
        return Err(arg_err("upcycle", format!("top_k must be in 1..={n_experts}, got {top_k}")));
    }
    let mut cfg = dense.cfg.clone();
    cfg.n_experts = n_experts;
    cfg.top_k = top_k;

    let d = cfg.d_model;
    let mut params = ParamStore::new();
    let mut frozen = BTreeSet::new();
    for (name, tensor) in dense.params.iter() {
        if let Some((layer, part)) = split_ffn_name(name) {
            match part {
                "gate" => {
                    // First FFN tensor of the layer: emit router + expert bank.
                    let router_name = format!("layers.{layer}.moe.router");
                    params.insert(router_name.clone(), Tensor::zeros(&[d, n_experts]))?;
                    for e in 0..n_experts {
                        let gate_name = format!("layers.{layer}.moe.experts.{e}.gate");
                        params.insert(gate_name.clone(), tensor.clone())?;
                        if e == 0 {
                            frozen.insert(gate_name);
                        }
                    }
                }
                "up" | "down" => {
                    for e in 0..n_experts {
                        let ename = format!("layers.{layer}.moe.experts.{e}.{part}");
                        params.insert(ename.clone(), tensor.clone())?;
                        if e == 0 {
                            frozen.insert(ename);
                        }
                    }
                }
                _ => unreachable!("split_ffn_name only yields gate/up/down"),
            }
        } else {
            params.insert(name.to_string(), tensor.clone())?;
            frozen.insert(name.to_string());
        }
    }
    Ok(MoeModel { cfg, params, frozen })
}

fn split_ffn_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layers.")?;
    let (layer, part) = rest.split_once('.')?;
    let part = part.strip_prefix("ffn.")?;
    if matches!(part, "gate" | "up" | "down") {
        Some((layer.parse().ok()?, part))
    } else {
        None
    }
}

/// Trainable names for CPT: expansion experts (1..N-1) and routers.
pub fn cpt_trainable(model: &MoeModel) -> BTreeSet<String> {
    model
        .params
        .names()
        .filter(|n| n.contains(".moe.") && !model.frozen.contains(*n))
        .map(|n| n.to_string())
        .collect()
}

/// Trainable names for router tuning: routers only.
pub fn router_trainable(model: &MoeModel) -> BTreeSet<String> {
    model
        .params
        .names()
        .filter(|n| n.ends_with(".moe.router"))
        .map(|n| n.to_string())
        .collect()
}

/// Gating weights per Eq. 2-3: p = softmax(x router), top-k re-normalized.
/// Returns the [t x n] weight matrix and the per-token selected indices.
pub fn moe_gate(x: &Tensor<f32>, router: &Tensor<f32>, k: usize) -> Result<(Tensor<f32>, Vec<Vec<usize>>)> {
    let mut tape = Tape::<f32>::eval();
    let xi = tape.leaf(x.clone())?;
    let ri = tape.leaf(router.clone())?;
    let logits = tape.matmul(xi, ri)?;
    let probs = tape.softmax(logits)?;
    let (w, sel) = tape.topk_renorm(probs, k)?;
    let rows = x.shape()[0];
    let per_token = (0..rows)
        .map(|r| sel[r * k..(r + 1) * k].iter().map(|&i| i as usize).collect())
        .collect();
    Ok((tape.value(w).clone(), per_token))
}

/// One standalone MoE layer: expert weights, router, and k.
pub struct MoeLayer {
    pub experts: Vec<ExpertWeights>,
    pub router: Tensor<f32>,
    pub k: usize,
}

pub struct ExpertWeights {
    pub gate: Tensor<f32>,
    pub up: Tensor<f32>,
    pub down: Tensor<f32>,
}

impl MoeLayer {
    pub fn from_model(model: &MoeModel, layer: usize) -> Result<Self> {
        let fetch = |name: String| -> Result<Tensor<f32>> {
            model
                .params
                .get(&name)
                .cloned()
                .ok_or_else(|| arg_err("MoeLayer::from_model", format!("missing {name}")))
        };
        let experts = (0..model.cfg.n_experts)
            .map(|e| {
                Ok(ExpertWeights {
                    gate: fetch(format!("layers.{layer}.moe.experts.{e}.gate"))?,
                    up: fetch(format!("layers.{layer}.moe.experts.{e}.up"))?,
                    down: fetch(format!("layers.{layer}.moe.experts.{e}.down"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MoeLayer {
            experts,
            router: fetch(format!("layers.{layer}.moe.router"))?,
            k: model.cfg.top_k,
        })
    }
}

/// Per-batch routing accumulators: assignment fractions f_i and mean
/// router probabilities P_i (Eq. 6), plus raw top-k memberships.
pub struct RoutingInfo {
    pub assignment_fractions: Vec<f64>,
    pub mean_probs: Vec<f64>,
    /// Row-major [t x k] selected expert indices.
    pub selections: Vec<u32>,
}

/// Eq. 4: y = sum_i w_i E_i(x) + x, dispatching each token to its selected
/// experts only.
pub fn moe_forward(layer: &MoeLayer, x: &Tensor<f32>) -> Result<(Tensor<f32>, RoutingInfo)> {
    let n = layer.experts.len();
    let k = layer.k;
    let rows = x.shape()[0];
    let d = *x.shape().last().unwrap();

    let mut tape = Tape::<f32>::eval();
    let xi = tape.leaf(x.clone())?;
    let ri = tape.leaf(layer.router.clone())?;
    let logits = tape.matmul(xi, ri)?;
    let probs = tape.softmax(logits)?;
    let (w, sel) = tape.topk_renorm(probs, k)?;

    let mut routed: Vec<Vec<u32>> = vec![Vec::new(); n];
    for r in 0..rows {
        for &e in &sel[r * k..(r + 1) * k] {
            routed[e as usize].push(r as u32);
        }
    }
    let mut parts = Vec::new();
    for (e, rows_e) in routed.iter().enumerate() {
        if rows_e.is_empty() {
            continue;
        }
        let gate = tape.leaf(layer.experts[e].gate.clone())?;
        let up = tape.leaf(layer.experts[e].up.clone())?;
        let down = tape.leaf(layer.experts[e].down.clone())?;
        let xg = tape.gather_rows(xi, rows_e)?;
        let out = ffn_graph(&mut tape, xg, gate, up, down)?;
        parts.push(MixPart { expert: e, value: out, rows: rows_e.clone() });
    }
    let mix = tape.mix_rows(w, parts, d)?;
    let y = tape.add(mix, xi)?;

    let probs_t = tape.value(probs);
    let mut mean_probs = vec![0.0f64; n];
    for r in 0..rows {
        for e in 0..n {
            mean_probs[e] += probs_t.data()[r * n + e] as f64;
        }
    }
    for m in mean_probs.iter_mut() {
        *m /= rows as f64;
    }
    let assignment_fractions = routed
        .iter()
        .map(|r| r.len() as f64 / (rows as f64 * k as f64))
        .collect();
    Ok((
        tape.value(y).clone(),
        RoutingInfo { assignment_fractions, mean_probs, selections: sel },
    ))
}

/// Eq. 6: N * sum_i f_i * P_i over non-negative fraction vectors.
pub fn lb_loss(f: &[f64], p: &[f64], n: usize) -> Result<f64> {
    if f.len() != n || p.len() != n {
        return Err(arg_err("lb_loss", format!("expected {n} entries, got {} and {}", f.len(), p.len())));
    }
    if f.iter().chain(p.iter()).any(|&v| v < 0.0) {
        return Err(arg_err("lb_loss", "entries must be non-negative"));
    }
    Ok(n as f64 * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
}

pub struct LossBreakdown {
    pub l_ntp: f64,
    pub l_lb: f64,
}

pub struct MoeLossOut {
    pub total: ValueId,
    pub ntp: ValueId,
    pub lb_mean: ValueId,
    pub forward: crate::model::ForwardOut,
}

/// Eq. 7 on the tape: L = L_NTP + alpha * mean(L_LB over MoE layers).
pub fn total_loss_graph<S: Real>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    tokens: &[u32],
    mask: &[u8],
    b: usize,
    t: usize,
    alpha: f64,
) -> Result<MoeLossOut> {
    if alpha < 0.0 {
        return Err(arg_err("total_loss", "alpha must be >= 0"));
    }
    let (ntp, forward) = ntp_loss_graph(g, cfg, ModelKind::Moe, tokens, mask, b, t)?;
    let lb_mean = g.tape.mean_scalars(&forward.lb)?;
    let total = g.tape.add_scaled(ntp, lb_mean, S::of_f64(alpha))?;
    Ok(MoeLossOut { total, ntp, lb_mean, forward })
}

/// Eq. 7 over a batch of sequences, reporting the breakdown separately.
pub fn total_loss(model: &MoeModel, seqs: &[Vec<u32>], alpha: f64) -> Result<(f64, LossBreakdown)> {
    if seqs.is_empty() {
        return Err(arg_err("total_loss", "empty batch"));
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
    let mut g = Graph::eval(&model.params);
    let out = total_loss_graph(&mut g, &model.cfg, &tokens, &mask, b, t, alpha)?;
    Ok((
        g.tape.value(out.total).item() as f64,
        LossBreakdown {
            l_ntp: g.tape.value(out.ntp).item() as f64,
            l_lb: g.tape.value(out.lb_mean).item() as f64,
        },
    ))
}

/// Batched MoE logits used by evaluation paths; selections per layer are
/// returned for routing statistics.
pub fn moe_forward_batch(
    model: &MoeModel,
    tokens: &[u32],
    b: usize,
    t: usize,
) -> Result<(Tensor<f32>, Vec<Vec<u32>>)> {
    let mut g = Graph::eval(&model.params);
    let out = crate::model::forward_graph(&mut g, &model.cfg, ModelKind::Moe, tokens, b, t)?;
    Ok((g.tape.value(out.logits).clone(), out.selections))
}

/// Batched logits for either kind.
pub fn forward_batch(model: &Model, tokens: &[u32], b: usize, t: usize) -> Result<(Tensor<f32>, Vec<Vec<u32>>)> {
    let mut g = Graph::eval(model.params());
    let out = crate::model::forward_graph(&mut g, model.cfg(), model.kind(), tokens, b, t)?;
    Ok((g.tape.value(out.logits).clone(), out.selections))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            ffn_dim: 24,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 29,
            max_seq_len: 12,
            n_experts: 4,
            top_k: 2,
            lb_alpha: 0.01,
        }
    }

    #[test]
    fn upcycle_rejects_small_expert_counts() {
        let cfg = toy_config();
        let dense = DenseModel::init(&cfg, 0).unwrap();
        assert!(upcycle(&dense, 1, 1).is_err());
        assert!(upcycle(&dense, 4, 5).is_err());
    }

    #[test]
    fn upcycle_param_count_matches_formula() {
        let cfg = toy_config();
        let dense = DenseModel::init(&cfg, 0).unwrap();
        let moe = upcycle(&dense, 4, 2).unwrap();
        let (d, f, n, l) = (cfg.d_model, cfg.ffn_dim, 4usize, cfg.n_layers);
        let expect = cfg.dense_param_count() + l * ((n - 1) * (2 * d * f + f * d)) + l * d * n;
        assert_eq!(moe.params.total_elements(), expect);
        assert_eq!(expect, moe.cfg.moe_param_count());
    }

    #[test]
    fn upcycle_experts_are_bit_identical_copies() {
        let cfg = toy_config();
        let dense = DenseModel::init(&cfg, 5).unwrap();
        let moe = upcycle(&dense, 4, 2).unwrap();
        for l in 0..cfg.n_layers {
            for part in ["gate", "up", "down"] {
                let src = dense.params.get(&format!("layers.{l}.ffn.{part}")).unwrap();
                for e in 0..4 {
                    let dst = moe
                        .params
                        .get(&format!("layers.{l}.moe.experts.{e}.{part}"))
                        .unwrap();
                    assert!(src.bit_eq(dst));
                }
            }
            let router = moe.params.get(&format!("layers.{l}.moe.router")).unwrap();
            assert!(router.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn upcycle_freezes_expert_zero_and_dense_tensors() {
        let cfg = toy_config();
        let dense = DenseModel::init(&cfg, 5).unwrap();
        let moe = upcycle(&dense, 4, 2).unwrap();
        assert!(moe.frozen.contains("embed.tok"));
        assert!(moe.frozen.contains("lm_head"));
        assert!(moe.frozen.contains("layers.0.attn.q"));
        assert!(moe.frozen.contains("layers.0.moe.experts.0.gate"));
        assert!(!moe.frozen.contains("layers.0.moe.experts.1.gate"));
        assert!(!moe.frozen.contains("layers.0.moe.router"));
        let trainable = cpt_trainable(&moe);
        for l in 0..cfg.n_layers {
            assert!(trainable.contains(&format!("layers.{l}.moe.router")));
            for e in 1..4 {
                assert!(trainable.contains(&format!("layers.{l}.moe.experts.{e}.up")));
            }
        }
        assert_eq!(trainable.len(), cfg.n_layers * (1 + 3 * 3));
        let router_only = router_trainable(&moe);
        assert_eq!(router_only.len(), cfg.n_layers);
    }

    #[test]
    fn init_equivalence_upcycled_matches_dense() {
        let cfg = toy_config();
        let dense = DenseModel::init(&cfg, 11).unwrap();
        let moe = upcycle(&dense, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..20 {
            let len = rng.random_range(2..=cfg.max_seq_len);
            let prompt: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
            let dl = dense.forward(&prompt).unwrap();
            let (ml, _) = moe.forward(&prompt).unwrap();
            assert!(dl.max_abs_diff(&ml) <= 1e-5, "diff {}", dl.max_abs_diff(&ml));
        }
    }

    #[test]
    fn moe_gate_hand_case() {
        // x router = ln(5,3,1,1) so p = (0.5, 0.3, 0.1, 0.1).
        let x = Tensor::new(&[1, 4], vec![5.0f32.ln(), 3.0f32.ln(), 0.0, 0.0]).unwrap();
        let router = {
            let mut eye = Tensor::zeros(&[4, 4]);
            for i in 0..4 {
                eye.data_mut()[i * 4 + i] = 1.0;
            }
            eye
        };
        let (w, sel) = moe_gate(&x, &router, 2).unwrap();
        assert_eq!(sel[0], vec![0, 1]);
        assert!((w.data()[0] - 0.625).abs() < 1e-6);
        assert!((w.data()[1] - 0.375).abs() < 1e-6);
        assert_eq!(w.data()[2], 0.0);
        assert_eq!(w.data()[3], 0.0);
    }

    #[test]
    fn moe_gate_zero_router_tie_breaks_to_first_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(&[5, 8], 1.0, &mut rng);
        let router = Tensor::zeros(&[8, 4]);
        let (w, sel) = moe_gate(&x, &router, 2).unwrap();
        for r in 0..5 {
            assert_eq!(sel[r], vec![0, 1]);
            assert_eq!(&w.data()[r * 4..(r + 1) * 4], &[0.5, 0.5, 0.0, 0.0]);
        }
    }

    #[test]
    fn moe_gate_rows_sum_to_one_and_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (t, d, n, k) = (17, 8, 5, 3);
        let x = Tensor::<f32>::randn(&[t, d], 1.0, &mut rng);
        let router = Tensor::<f32>::randn(&[d, n], 0.7, &mut rng);
        let (w, sel) = moe_gate(&x, &router, k).unwrap();

        // Brute-force oracle: softmax in f64, full sort, renormalize.
        for r in 0..t {
            let row_sum: f32 = w.data()[r * n..(r + 1) * n].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6);
            let mut logits = vec![0.0f64; n];
            for j in 0..n {
                for c in 0..d {
                    logits[j] += x.data()[r * d + c] as f64 * router.data()[c * n + j] as f64;
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
            let chosen = &order[..k];
            let mut want_sel: Vec<usize> = chosen.to_vec();
            want_sel.sort_unstable();
            let mut got_sel = sel[r].clone();
            got_sel.sort_unstable();
            assert_eq!(got_sel, want_sel, "row {r}");
            let s: f64 = chosen.iter().map(|&i| p[i]).sum();
            for &i in chosen {
                assert!((w.data()[r * n + i] as f64 - p[i] / s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn moe_forward_zero_experts_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, f, n) = (6, 9, 4);
        let x = Tensor::<f32>::randn(&[7, d], 1.0, &mut rng);
        let layer = MoeLayer {
            experts: (0..n)
                .map(|_| ExpertWeights {
                    gate: Tensor::zeros(&[d, f]),
                    up: Tensor::zeros(&[d, f]),
                    down: Tensor::zeros(&[f, d]),
                })
                .collect(),
            router: Tensor::<f32>::randn(&[d, n], 0.5, &mut rng),
            k: 2,
        };
        let (y, _) = moe_forward(&layer, &x).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn moe_forward_identical_experts_reduce_to_single_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, f, n) = (6, 9, 4);
        let x = Tensor::<f32>::randn(&[7, d], 1.0, &mut rng);
        let gate = Tensor::<f32>::randn(&[d, f], 0.3, &mut rng);
        let up = Tensor::<f32>::randn(&[d, f], 0.3, &mut rng);
        let down = Tensor::<f32>::randn(&[f, d], 0.3, &mut rng);
        let layer = MoeLayer {
            experts: (0..n)
                .map(|_| ExpertWeights { gate: gate.clone(), up: up.clone(), down: down.clone() })
                .collect(),
            router: Tensor::<f32>::randn(&[d, n], 0.5, &mut rng),
            k: 2,
        };
        let (y, info) = moe_forward(&layer, &x).unwrap();
        let e0 = crate::model::ffn_forward(&x, &gate, &up, &down).unwrap();
        for i in 0..y.numel() {
            let want = e0.data()[i] + x.data()[i];
            assert!((y.data()[i] - want).abs() < 1e-6);
        }
        let f_sum: f64 = info.assignment_fractions.iter().sum();
        assert!((f_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn moe_forward_k_equals_n_matches_full_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, d, f, n) = (5, 6, 9, 3);
        let x = Tensor::<f32>::randn(&[t, d], 1.0, &mut rng);
        let experts: Vec<ExpertWeights> = (0..n)
            .map(|_| ExpertWeights {
                gate: Tensor::<f32>::randn(&[d, f], 0.3, &mut rng),
                up: Tensor::<f32>::randn(&[d, f], 0.3, &mut rng),
                down: Tensor::<f32>::randn(&[f, d], 0.3, &mut rng),
            })
            .collect();
        let router = Tensor::<f32>::randn(&[d, n], 0.5, &mut rng);
        let layer = MoeLayer {
            experts: experts
                .iter()
                .map(|e| ExpertWeights { gate: e.gate.clone(), up: e.up.clone(), down: e.down.clone() })
                .collect(),
            router: router.clone(),
            k: n,
        };
        let (y, _) = moe_forward(&layer, &x).unwrap();

        // With k = N Eq. 3 reduces to p itself; dense weighted sum oracle.
        let (w, _) = moe_gate(&x, &router, n).unwrap();
        let outs: Vec<Tensor<f32>> = experts
            .iter()
            .map(|e| crate::model::ffn_forward(&x, &e.gate, &e.up, &e.down).unwrap())
            .collect();
        for ti in 0..t {
            for c in 0..d {
                let mut want = x.data()[ti * d + c] as f64;
                for (e, out) in outs.iter().enumerate() {
                    want += w.data()[ti * n + e] as f64 * out.data()[ti * d + c] as f64;
                }
                let got = y.data()[ti * d + c] as f64;
                assert!((got - want).abs() < 1e-5, "({ti},{c}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn lb_loss_uniform_collapse_and_hand_cases() {
        for n in [2usize, 4, 8] {
            let u = vec![1.0 / n as f64; n];
            assert_eq!(lb_loss(&u, &u, n).unwrap(), 1.0);
        }
        let mut f = vec![0.0; 4];
        f[0] = 1.0;
        assert_eq!(lb_loss(&f, &f, 4).unwrap(), 4.0);
        let f = vec![0.5, 0.5, 0.0, 0.0];
        let p = vec![0.4, 0.4, 0.1, 0.1];
        assert!((lb_loss(&f, &p, 4).unwrap() - 1.6).abs() < 1e-6);
    }

    #[test]
    fn lb_loss_rejects_negative_entries() {
        assert!(lb_loss(&[-0.1, 1.1], &[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn total_loss_alpha_zero_equals_ntp() {
        let cfg = toy_config();
        let dense = DenseModel::init(&cfg, 3).unwrap();
        let moe = upcycle(&dense, 4, 2).unwrap();
        let seqs = vec![vec![1u32, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        let (l, parts) = total_loss(&moe, &seqs, 0.0).unwrap();
        assert_eq!(l, parts.l_ntp);
        let (l2, parts2) = total_loss(&moe, &seqs, 0.01).unwrap();
        let recomputed = parts2.l_ntp + 0.01 * parts2.l_lb;
        assert!((l2 - recomputed).abs() < 1e-7, "{l2} vs {recomputed}");
    }

    #[test]
    fn gate_weights_nonzero_exactly_k_and_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (t, d, n, k) = (23, 8, 6, 3);
        let x = Tensor::<f32>::randn(&[t, d], 1.0, &mut rng);
        let router = Tensor::<f32>::randn(&[d, n], 0.9, &mut rng);
        let (w, _) = moe_gate(&x, &router, k).unwrap();
        for r in 0..t {
            let row = &w.data()[r * n..(r + 1) * n];
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), k);
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
