//! Parameter-delta computation and merge strategies: delta grafting onto an
//! upcycled MoE, dense averaging, dense delta addition, and MoE averaging.
//!
//! Deltas are held in binary64 so that base + (post - base) reconstructs
//! post bit-exactly; merges round back to binary32 at the end.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::model::{DenseModel, ModelConfig, MoeModel};
use crate::params::ParamStore;
use crate::tensor::{KernelError, Tensor};

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("incompatible models: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

pub type Result<T> = std::result::Result<T, SurgeryError>;

/// Per-name difference post - base between two dense checkpoints.
#[derive(Clone)]
pub struct Delta {
    pub cfg: ModelConfig,
    pub tensors: ParamStore<f64>,
    pub base_id: String,
    pub post_id: String,
}

#[derive(Debug, Serialize)]
pub struct MergeReport {
    pub strategy: String,
    pub shared_names: Vec<String>,
    pub expert_broadcast_names: Vec<String>,
    pub skipped_names: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_base: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_post: Option<String>,
}

impl MergeReport {
    fn new(strategy: &str) -> Self {
        MergeReport {
            strategy: strategy.to_string(),
            shared_names: Vec::new(),
            expert_broadcast_names: Vec::new(),
            skipped_names: Vec::new(),
            lambda: None,
            delta_base: None,
            delta_post: None,
        }
    }

    fn finish(mut self) -> Self {
        self.shared_names.sort();
        self.expert_broadcast_names.sort();
        self.skipped_names.sort();
        self
    }

    /// Merge totality: the three sets partition the target's name set.
    pub fn covers(&self, names: &BTreeSet<String>) -> bool {
        let mut all: BTreeSet<String> = self.shared_names.iter().cloned().collect();
        all.extend(self.expert_broadcast_names.iter().cloned());
        all.extend(self.skipped_names.iter().cloned());
        all.len()
            == self.shared_names.len() + self.expert_broadcast_names.len() + self.skipped_names.len()
            && all == *names
    }
}

fn check_name_sets(op: &str, a: &BTreeSet<String>, b: &BTreeSet<String>) -> Result<()> {
    if a != b {
        let only_a: Vec<&String> = a.difference(b).collect();
        let only_b: Vec<&String> = b.difference(a).collect();
        return Err(SurgeryError::Incompatible(format!(
            "{op}: name sets differ; only in first: {only_a:?}, only in second: {only_b:?}"
        )));
    }
    Ok(())
}

fn check_arch(op: &str, a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    if !a.arch_compatible(b) {
        return Err(SurgeryError::Incompatible(format!(
            "{op}: architectures differ: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

/// Delta_post = theta_post - theta_base, per name, exact in binary64.
pub fn compute_delta(base: &DenseModel, post: &DenseModel, base_id: &str, post_id: &str) -> Result<Delta> {
    check_arch("compute_delta", &base.cfg, &post.cfg)?;
    check_name_sets("compute_delta", &base.params.name_set(), &post.params.name_set())?;
    let mut tensors = ParamStore::new();
    for (name, b) in base.params.iter() {
        let p = post.params.get(name).expect("name sets checked");
        if b.shape() != p.shape() {
            return Err(SurgeryError::Incompatible(format!(
                "compute_delta: shape mismatch for {name}: {:?} vs {:?}",
                b.shape(),
                p.shape()
            )));
        }
        let data = b
            .data()
            .iter()
            .zip(p.data())
            .map(|(&bv, &pv)| pv as f64 - bv as f64)
            .collect();
        tensors.insert(name.to_string(), Tensor::new(b.shape(), data)?)?;
    }
    Ok(Delta {
        cfg: base.cfg.clone(),
        tensors,
        base_id: base_id.to_string(),
        post_id: post_id.to_string(),
    })
}

fn add_delta(target: &Tensor<f32>, delta: &Tensor<f64>) -> Tensor<f32> {
    let data = target
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&t, &d)| (t as f64 + d) as f32)
        .collect();
    Tensor::new(target.shape(), data).expect("same shape")
}

fn expert_to_ffn_name(name: &str) -> Option<String> {
    // layers.{l}.moe.experts.{e}.{part} -> layers.{l}.ffn.{part}
    let rest = name.strip_prefix("layers.")?;
    let (layer, tail) = rest.split_once('.')?;
    let tail = tail.strip_prefix("moe.experts.")?;
    let (_expert, part) = tail.split_once('.')?;
    Some(format!("layers.{layer}.ffn.{part}"))
}

/// Eq. 8-9: shared parameters receive their delta directly; the per-layer
/// FFN delta broadcasts to every expert including the frozen one; routers
/// have no dense counterpart and are reported as skipped.
pub fn graft_delta_moe(moe: &MoeModel, delta: &Delta) -> Result<(MoeModel, MergeReport)> {
    check_arch("graft_delta_moe", &moe.cfg, &delta.cfg)?;
    let mut report = MergeReport::new("delta_moe");
    report.delta_base = Some(delta.base_id.clone());
    report.delta_post = Some(delta.post_id.clone());

    let mut params = ParamStore::new();
    let mut used_delta: BTreeSet<String> = BTreeSet::new();
    for (name, tensor) in moe.params.iter() {
        if name.ends_with(".moe.router") {
            params.insert(name.to_string(), tensor.clone())?;
            report.skipped_names.push(name.to_string());
        } else if let Some(ffn_name) = expert_to_ffn_name(name) {
            let d = delta.tensors.get(&ffn_name).ok_or_else(|| {
                SurgeryError::Incompatible(format!("graft_delta_moe: delta missing {ffn_name} for {name}"))
            })?;
            if d.shape() != tensor.shape() {
                return Err(SurgeryError::Incompatible(format!(
                    "graft_delta_moe: shape mismatch for {name}: {:?} vs {:?}",
                    tensor.shape(),
                    d.shape()
                )));
            }
            params.insert(name.to_string(), add_delta(tensor, d))?;
            used_delta.insert(ffn_name);
            report.expert_broadcast_names.push(name.to_string());
        } else {
            let d = delta.tensors.get(name).ok_or_else(|| {
                SurgeryError::Incompatible(format!("graft_delta_moe: delta missing shared tensor {name}"))
            })?;
            if d.shape() != tensor.shape() {
                return Err(SurgeryError::Incompatible(format!(
                    "graft_delta_moe: shape mismatch for {name}: {:?} vs {:?}",
                    tensor.shape(),
                    d.shape()
                )));
            }
            params.insert(name.to_string(), add_delta(tensor, d))?;
            used_delta.insert(name.to_string());
            report.shared_names.push(name.to_string());
        }
    }
    let unused: Vec<&str> = delta
        .tensors
        .names()
        .filter(|n| !used_delta.contains(*n))
        .collect();
    if !unused.is_empty() {
        return Err(SurgeryError::Incompatible(format!(
            "graft_delta_moe: delta tensors without a target: {unused:?}"
        )));
    }
    let out = MoeModel { cfg: moe.cfg.clone(), params, frozen: moe.frozen.clone() };
    let report = report.finish();
    debug_assert!(report.covers(&out.params.name_set()));
    Ok((out, report))
}

/// Dense-FT-Avg: per-name lambda * a + (1 - lambda) * b.
pub fn merge_avg_dense(a: &DenseModel, b: &DenseModel, lambda: f64) -> Result<(DenseModel, MergeReport)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SurgeryError::Incompatible(format!(
            "merge_avg_dense: lambda must be in [0, 1], got {lambda}"
        )));
    }
    check_arch("merge_avg_dense", &a.cfg, &b.cfg)?;
    check_name_sets("merge_avg_dense", &a.params.name_set(), &b.params.name_set())?;
    let mut report = MergeReport::new("avg_dense");
    report.lambda = Some(lambda);
    let mut params = ParamStore::new();
    for (name, ta) in a.params.iter() {
        let tb = b.params.get(name).expect("name sets checked");
        if ta.shape() != tb.shape() {
            return Err(SurgeryError::Incompatible(format!(
                "merge_avg_dense: shape mismatch for {name}"
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (lambda * x as f64 + (1.0 - lambda) * y as f64) as f32)
            .collect();
        params.insert(name.to_string(), Tensor::new(ta.shape(), data)?)?;
        report.shared_names.push(name.to_string());
    }
    let out = DenseModel { cfg: a.cfg.clone(), params };
    let report = report.finish();
    debug_assert!(report.covers(&out.params.name_set()));
    Ok((out, report))
}

/// Dense-FT-Delta: per-name cpt + delta.
pub fn merge_delta_dense(cpt: &DenseModel, delta: &Delta) -> Result<(DenseModel, MergeReport)> {
    check_arch("merge_delta_dense", &cpt.cfg, &delta.cfg)?;
    check_name_sets("merge_delta_dense", &cpt.params.name_set(), &delta.tensors.name_set())?;
    let mut report = MergeReport::new("delta_dense");
    report.delta_base = Some(delta.base_id.clone());
    report.delta_post = Some(delta.post_id.clone());
    let mut params = ParamStore::new();
    for (name, t) in cpt.params.iter() {
        let d = delta.tensors.get(name).expect("name sets checked");
        if d.shape() != t.shape() {
            return Err(SurgeryError::Incompatible(format!(
                "merge_delta_dense: shape mismatch for {name}"
            )));
        }
        params.insert(name.to_string(), add_delta(t, d))?;
        report.shared_names.push(name.to_string());
    }
    let out = DenseModel { cfg: cpt.cfg.clone(), params };
    let report = report.finish();
    debug_assert!(report.covers(&out.params.name_set()));
    Ok((out, report))
}

/// MoE-CPT-Avg: shared parameters and every expert averaged 0.5/0.5 with
/// the instruct model's counterparts; routers untouched.
pub fn merge_avg_moe(moe_cpt: &MoeModel, instruct: &DenseModel) -> Result<(MoeModel, MergeReport)> {
    check_arch("merge_avg_moe", &moe_cpt.cfg, &instruct.cfg)?;
    let mut report = MergeReport::new("avg_moe");
    report.lambda = Some(0.5);
    let mut params = ParamStore::new();
    for (name, tensor) in moe_cpt.params.iter() {
        if name.ends_with(".moe.router") {
            params.insert(name.to_string(), tensor.clone())?;
            report.skipped_names.push(name.to_string());
            continue;
        }
        let (counterpart, broadcast) = match expert_to_ffn_name(name) {
            Some(ffn_name) => (ffn_name, true),
            None => (name.to_string(), false),
        };
        let other = instruct.params.get(&counterpart).ok_or_else(|| {
            SurgeryError::Incompatible(format!("merge_avg_moe: instruct model missing {counterpart}"))
        })?;
        if other.shape() != tensor.shape() {
            return Err(SurgeryError::Incompatible(format!(
                "merge_avg_moe: shape mismatch for {name}"
            )));
        }
        let data = tensor
            .data()
            .iter()
            .zip(other.data())
            .map(|(&x, &y)| (0.5 * x as f64 + 0.5 * y as f64) as f32)
            .collect();
        params.insert(name.to_string(), Tensor::new(tensor.shape(), data)?)?;
        if broadcast {
            report.expert_broadcast_names.push(name.to_string());
        } else {
            report.shared_names.push(name.to_string());
        }
    }
    let out = MoeModel { cfg: moe_cpt.cfg.clone(), params, frozen: moe_cpt.frozen.clone() };
    let report = report.finish();
    debug_assert!(report.covers(&out.params.name_set()));
    Ok((out, report))
}
