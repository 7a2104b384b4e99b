//! Evaluation: per-language perplexity, echo exact-match (the desk-scale
//! alignment metric), expert-selection frequency tables, and the
//! expanded-vs-original trade-off report.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{epoch_batches, Corpus, AMARK, EOS, QMARK};
use crate::model::Model;
use crate::moe::forward_batch;
use crate::tensor::{arg_err, Result, Tensor};

/// Fixed batching seed for evaluation; results must not depend on it
/// beyond batch grouping, and determinism requires pinning it.
const EVAL_SEED: u64 = 0;

/// exp(mean per-token NTP loss) over the corpus with teacher forcing.
/// The per-token log-losses accumulate in binary64.
pub fn perplexity(model: &Model, corpus: &Corpus, batch_size: usize, seq_len: usize) -> Result<f64> {
    if corpus.docs.is_empty() {
        return Err(arg_err("perplexity", "corpus is empty"));
    }
    let batches = epoch_batches(std::slice::from_ref(corpus), batch_size, seq_len, EVAL_SEED)
        .map_err(|e| arg_err("perplexity", e.to_string()))?;
    let mut total = 0.0f64;
    let mut count = 0u64;
    for batch in &batches {
        let (logits, _) = forward_batch(model, &batch.tokens, batch.b, batch.t)?;
        let (sum, n) = masked_ce_sum(&logits, &batch.tokens, &batch.mask, batch.b, batch.t);
        total += sum;
        count += n;
    }
    if count == 0 {
        return Err(arg_err("perplexity", "corpus has no predictable positions"));
    }
    Ok((total / count as f64).exp())
}

/// Sum over masked target positions of -log p(target), plus the count.
/// Logit row p predicts token p+1 of the same sequence.
pub(crate) fn masked_ce_sum(logits: &Tensor<f32>, tokens: &[u32], mask: &[u8], b: usize, t: usize) -> (f64, u64) {
    let v = *logits.shape().last().unwrap();
    let ld = logits.data();
    let mut total = 0.0f64;
    let mut count = 0u64;
    for s in 0..b {
        for p in 0..t - 1 {
            if mask[s * t + p + 1] == 0 {
                continue;
            }
            let row = &ld[(s * t + p) * v..(s * t + p + 1) * v];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x as f64));
            let lse = mx + row.iter().map(|&x| (x as f64 - mx).exp()).sum::<f64>().ln();
            total += lse - row[tokens[s * t + p + 1] as usize] as f64;
            count += 1;
        }
    }
    (total, count)
}

fn argmax_lowest_index(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decode from "Q: payload A:"; exact match of the decoded answer
/// against the payload, terminated by EOS.
pub fn echo_accuracy(model: &Model, payloads: &[Vec<u32>]) -> Result<f64> {
    if payloads.is_empty() {
        return Err(arg_err("echo_accuracy", "no payloads"));
    }
    let max_seq = model.cfg().max_seq_len;
    let mut hits = 0usize;
    for payload in payloads {
        if payload.is_empty() || 2 * payload.len() + 3 > max_seq {
            return Err(arg_err(
                "echo_accuracy",
                format!("payload of {} tokens does not fit max_seq_len {max_seq}", payload.len()),
            ));
        }
        let mut seq = Vec::with_capacity(2 * payload.len() + 3);
        seq.push(QMARK);
        seq.extend_from_slice(payload);
        seq.push(AMARK);
        let prompt_len = seq.len();
        let mut saw_eos = false;
        for _ in 0..payload.len() + 2 {
            let (logits, _) = forward_batch(model, &seq, 1, seq.len())?;
            let v = *logits.shape().last().unwrap();
            let last = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
            let next = argmax_lowest_index(last);
            if next == EOS {
                saw_eos = true;
                break;
            }
            seq.push(next);
        }
        let decoded = &seq[prompt_len..];
        if saw_eos && decoded == payload.as_slice() {
            hits += 1;
        }
    }
    Ok(hits as f64 / payloads.len() as f64)
}

/// Per-layer, per-expert top-k selection counts partitioned by language.
#[derive(Debug)]
pub struct RouterStats {
    pub n_layers: usize,
    pub n_experts: usize,
    pub k: usize,
    /// counts[language][layer][expert]
    pub counts: BTreeMap<String, Vec<Vec<u64>>>,
    /// Real (non-padding) positions routed per language; identical for
    /// every layer.
    pub tokens_seen: BTreeMap<String, u64>,
}

impl RouterStats {
    pub fn frequency(&self, layer: usize, expert: usize, language: &str) -> f64 {
        let c = self.counts[language][layer][expert] as f64;
        c / (self.k as f64 * self.tokens_seen[language] as f64)
    }

    /// Sum_expert counts == k * tokens_seen for every (layer, language),
    /// and normalized frequencies sum to 1.
    pub fn conservation_holds(&self) -> bool {
        self.counts.iter().all(|(lang, layers)| {
            layers.iter().enumerate().all(|(l, experts)| {
                let total: u64 = experts.iter().sum();
                let freq_sum: f64 = (0..self.n_experts).map(|e| self.frequency(l, e, lang)).sum();
                total == self.k as u64 * self.tokens_seen[lang] && (freq_sum - 1.0).abs() < 1e-9
            })
        })
    }

    /// CSV rows "layer,expert,language,count,frequency", deterministic.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,expert,language,count,frequency\n");
        for layer in 0..self.n_layers {
            for expert in 0..self.n_experts {
                for (lang, layers) in &self.counts {
                    let count = layers[layer][expert];
                    let freq = self.frequency(layer, expert, lang);
                    out.push_str(&format!("{layer},{expert},{lang},{count},{freq}\n"));
                }
            }
        }
        out
    }
}

/// Runs the model over tagged corpora and accumulates top-k memberships
/// per (layer, expert, language), counting real token positions only.
pub fn route_frequencies(model: &Model, corpora: &[Corpus], batch_size: usize, seq_len: usize) -> Result<RouterStats> {
    let Model::Moe(moe) = model else {
        return Err(arg_err("route_frequencies", "routing statistics need an MoE model"));
    };
    let cfg = &moe.cfg;
    let mut stats = RouterStats {
        n_layers: cfg.n_layers,
        n_experts: cfg.n_experts,
        k: cfg.top_k,
        counts: BTreeMap::new(),
        tokens_seen: BTreeMap::new(),
    };
    for corpus in corpora {
        let entry = stats
            .counts
            .entry(corpus.tag.clone())
            .or_insert_with(|| vec![vec![0u64; cfg.n_experts]; cfg.n_layers]);
        let seen = stats.tokens_seen.entry(corpus.tag.clone()).or_insert(0);
        let batches = epoch_batches(std::slice::from_ref(corpus), batch_size, seq_len, EVAL_SEED)
            .map_err(|e| arg_err("route_frequencies", e.to_string()))?;
        for batch in &batches {
            let (_, selections) = forward_batch(model, &batch.tokens, batch.b, batch.t)?;
            debug_assert_eq!(selections.len(), cfg.n_layers);
            for s in 0..batch.b {
                *seen += batch.lengths[s] as u64;
            }
            for (layer, sel) in selections.iter().enumerate() {
                for s in 0..batch.b {
                    for p in 0..batch.lengths[s] {
                        let row = s * batch.t + p;
                        for &e in &sel[row * cfg.top_k..(row + 1) * cfg.top_k] {
                            entry[layer][e as usize] += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Serialize)]
pub struct LangMetric {
    pub language: String,
    pub perplexity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TradeoffRow {
    pub model: String,
    pub checkpoint: String,
    pub expanded_perplexity: Vec<LangMetric>,
    pub original_perplexity: Vec<LangMetric>,
    /// Echo exact-match on original-language payloads.
    pub echo_original: f64,
}

/// One model to evaluate: a display id, its checkpoint hash, the state.
pub struct EvalEntry<'a> {
    pub id: String,
    pub hash: String,
    pub model: &'a Model,
}

/// One row per model: expanded/original perplexities plus echo accuracy.
pub fn tradeoff_report(
    entries: &[EvalEntry<'_>],
    original: &[Corpus],
    expanded: &[Corpus],
    payloads: &[Vec<u32>],
    batch_size: usize,
    seq_len: usize,
) -> Result<Vec<TradeoffRow>> {
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let eval_langs = |corpora: &[Corpus]| -> Result<Vec<LangMetric>> {
            corpora
                .iter()
                .map(|c| {
                    Ok(LangMetric {
                        language: c.tag.clone(),
                        perplexity: perplexity(entry.model, c, batch_size, seq_len)?,
                    })
                })
                .collect()
        };
        rows.push(TradeoffRow {
            model: entry.id.clone(),
            checkpoint: entry.hash.clone(),
            expanded_perplexity: eval_langs(expanded)?,
            original_perplexity: eval_langs(original)?,
            echo_original: echo_accuracy(entry.model, payloads)?,
        });
    }
    Ok(rows)
}

pub fn report_to_json(rows: &[TradeoffRow]) -> String {
    serde_json::to_string_pretty(rows).expect("rows serialize")
}

/// Flat CSV: model,checkpoint,metric,language,value with stable ordering.
pub fn report_to_csv(rows: &[TradeoffRow]) -> String {
    let mut out = String::from("model,checkpoint,metric,language,value\n");
    for row in rows {
        for m in &row.expanded_perplexity {
            out.push_str(&format!(
                "{},{},expanded_perplexity,{},{}\n",
                row.model, row.checkpoint, m.language, m.perplexity
            ));
        }
        for m in &row.original_perplexity {
            out.push_str(&format!(
                "{},{},original_perplexity,{},{}\n",
                row.model, row.checkpoint, m.language, m.perplexity
            ));
        }
        out.push_str(&format!("{},{},echo_original,,{}\n", row.model, row.checkpoint, row.echo_original));
    }
    out
}
