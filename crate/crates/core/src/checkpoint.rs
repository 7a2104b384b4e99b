//! Single-file checkpoint container: 8-byte little-endian manifest length,
//! UTF-8 JSON manifest, raw little-endian tensor payload. Save/load is
//! bit-exact; every manifest invariant is validated before the payload is
//! touched. Files are written to a temp path and renamed into place.
//!
//! The content hash covers the identity-bearing manifest fields (format
//! version, kind, config, tensor table, frozen set) plus the payload;
//! provenance records lineage and does not change a model's identity, so
//! two equal states reached by different routes hash equal.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{dense_param_shapes, moe_param_shapes, DenseModel, Model, ModelConfig, MoeModel};
use crate::params::ParamStore;
use crate::surgery::{Delta, SurgeryError};
use crate::tensor::{KernelError, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint ({field}): {detail}")]
    Malformed { field: &'static str, detail: String },
    #[error("unsupported format_version {0}")]
    UnknownVersion(u32),
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

fn malformed(field: &'static str, detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed { field, detail: detail.into() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage: String,
    pub parent: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeltaSources {
    base: String,
    post: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model_kind: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    frozen: Vec<String>,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta_sources: Option<DeltaSources>,
}

/// The manifest fields the content hash is computed over.
#[derive(Serialize)]
struct HashView<'a> {
    format_version: u32,
    model_kind: &'a str,
    config: &'a ModelConfig,
    tensors: &'a [TensorEntry],
    frozen: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_sources: &'a Option<DeltaSources>,
}

fn content_hash(manifest: &Manifest, payload: &[u8]) -> String {
    let view = HashView {
        format_version: manifest.format_version,
        model_kind: &manifest.model_kind,
        config: &manifest.config,
        tensors: &manifest.tensors,
        frozen: &manifest.frozen,
        delta_sources: &manifest.delta_sources,
    };
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&view).expect("manifest serializes"));
    hasher.update(payload);
    hex::encode(hasher.finalize())
}

pub struct CheckpointData {
    pub model: Model,
    pub provenance: Provenance,
    pub hash: String,
}

fn dtype_size(dtype: &str) -> Option<u64> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

fn build_entries<F>(names: Vec<(String, Vec<usize>)>, dtype: &str, mut len_of: F) -> Vec<TensorEntry>
where
    F: FnMut(&str) -> usize,
{
    let size = dtype_size(dtype).expect("known dtype");
    let mut offset = 0u64;
    names
        .into_iter()
        .map(|(name, shape)| {
            let byte_length = size * len_of(&name) as u64;
            let entry = TensorEntry {
                name,
                dtype: dtype.to_string(),
                shape,
                byte_offset: offset,
                byte_length,
            };
            offset += byte_length;
            entry
        })
        .collect()
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

fn assemble(manifest: &Manifest, payload: &[u8]) -> Vec<u8> {
    let mjson = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut bytes = Vec::with_capacity(8 + mjson.len() + payload.len());
    bytes.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&mjson);
    bytes.extend_from_slice(payload);
    bytes
}

/// Serializes a model, returns its content hash.
pub fn save(model: &Model, provenance: &Provenance, path: &Path) -> Result<String> {
    let params = model.params();
    let entries = build_entries(
        params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        "f32",
        |name| params.get(name).unwrap().numel(),
    );
    let mut payload = Vec::new();
    for (_, t) in params.iter() {
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut frozen: Vec<String> = model.frozen().into_iter().collect();
    frozen.sort();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_kind: model.kind().as_str().to_string(),
        config: model.cfg().clone(),
        tensors: entries,
        frozen,
        provenance: provenance.clone(),
        delta_sources: None,
    };
    let hash = content_hash(&manifest, &payload);
    write_atomically(path, &assemble(&manifest, &payload))?;
    Ok(hash)
}

/// Serializes a parameter delta (binary64 payload, kind "delta").
pub fn save_delta(delta: &Delta, provenance: &Provenance, path: &Path) -> Result<String> {
    let entries = build_entries(
        delta.tensors.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        "f64",
        |name| delta.tensors.get(name).unwrap().numel(),
    );
    let mut payload = Vec::new();
    for (_, t) in delta.tensors.iter() {
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_kind: "delta".to_string(),
        config: delta.cfg.clone(),
        tensors: entries,
        frozen: Vec::new(),
        provenance: provenance.clone(),
        delta_sources: Some(DeltaSources { base: delta.base_id.clone(), post: delta.post_id.clone() }),
    };
    let hash = content_hash(&manifest, &payload);
    write_atomically(path, &assemble(&manifest, &payload))?;
    Ok(hash)
}

struct RawCheckpoint {
    manifest: Manifest,
    payload: Vec<u8>,
    hash: String,
}

fn read_raw(path: &Path) -> Result<RawCheckpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 8 {
        return Err(malformed("header", format!("file is {} bytes, need at least 8", bytes.len())));
    }
    let mlen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let mlen_usize = usize::try_from(mlen).map_err(|_| malformed("manifest_length", "does not fit in memory"))?;
    if 8 + mlen_usize > bytes.len() {
        return Err(malformed(
            "manifest_length",
            format!("declares {mlen} manifest bytes but file has {}", bytes.len() - 8),
        ));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + mlen_usize])
        .map_err(|e| malformed("manifest", e.to_string()))?;
    let payload = bytes[8 + mlen_usize..].to_vec();
    validate_manifest(&manifest, payload.len() as u64)?;
    let hash = content_hash(&manifest, &payload);
    Ok(RawCheckpoint { manifest, payload, hash })
}

fn validate_manifest(m: &Manifest, payload_len: u64) -> Result<()> {
    if m.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnknownVersion(m.format_version));
    }
    let expected_dtype = match m.model_kind.as_str() {
        "dense" | "moe" => "f32",
        "delta" => "f64",
        other => return Err(malformed("model_kind", format!("unknown kind {other:?}"))),
    };
    m.config.validate().map_err(|e| malformed("config", e.to_string()))?;
    if m.tensors.is_empty() {
        return Err(malformed("tensors", "tensor table is empty"));
    }
    let mut seen = BTreeSet::new();
    let mut cursor = 0u64;
    for (i, e) in m.tensors.iter().enumerate() {
        if !seen.insert(e.name.clone()) {
            return Err(malformed("tensors", format!("duplicate tensor name {}", e.name)));
        }
        if e.dtype != expected_dtype {
            return Err(malformed(
                "tensors",
                format!("tensor {} has dtype {:?}, kind {} requires {:?}", e.name, e.dtype, m.model_kind, expected_dtype),
            ));
        }
        crate::tensor::validate_shape("checkpoint", &e.shape)
            .map_err(|err| malformed("tensors", format!("tensor {}: {err}", e.name)))?;
        let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
        let want_len = numel * dtype_size(&e.dtype).unwrap();
        if e.byte_length != want_len {
            return Err(malformed(
                "tensors",
                format!("tensor {}: byte_length {} != {} * product(shape) = {}", e.name, e.byte_length, dtype_size(&e.dtype).unwrap(), want_len),
            ));
        }
        if e.byte_offset != cursor {
            let prev = if i == 0 { "payload start".to_string() } else { m.tensors[i - 1].name.clone() };
            return Err(malformed(
                "tensors",
                format!(
                    "tensor {} at offset {} overlaps or leaves a gap after {} (expected offset {})",
                    e.name, e.byte_offset, prev, cursor
                ),
            ));
        }
        cursor += e.byte_length;
    }
    if cursor != payload_len {
        return Err(malformed(
            "payload",
            format!("tensor table covers {cursor} bytes but payload has {payload_len}"),
        ));
    }
    for f in &m.frozen {
        if !seen.contains(f) {
            return Err(malformed("frozen", format!("frozen name {f} has no tensor")));
        }
    }
    if m.model_kind == "dense" && !m.frozen.is_empty() {
        return Err(malformed("frozen", "dense checkpoints must not freeze tensors"));
    }
    // The name set must be exactly the canonical set for the kind/config.
    let expected: Vec<(String, Vec<usize>)> = match m.model_kind.as_str() {
        "moe" => moe_param_shapes(&m.config),
        _ => dense_param_shapes(&m.config),
    };
    let expected_names: BTreeSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    let actual_names: BTreeSet<&str> = m.tensors.iter().map(|e| e.name.as_str()).collect();
    if expected_names != actual_names {
        let missing: Vec<&&str> = expected_names.difference(&actual_names).collect();
        let extra: Vec<&&str> = actual_names.difference(&expected_names).collect();
        return Err(malformed(
            "tensors",
            format!("name set mismatch for {} config: missing {missing:?}, unexpected {extra:?}", m.model_kind),
        ));
    }
    for e in &m.tensors {
        let want = &expected.iter().find(|(n, _)| n == &e.name).unwrap().1;
        if &e.shape != want {
            return Err(malformed(
                "tensors",
                format!("tensor {}: shape {:?} does not match config ({want:?})", e.name, e.shape),
            ));
        }
    }
    Ok(())
}

fn decode_f32(entry: &TensorEntry, payload: &[u8]) -> Result<Tensor<f32>> {
    let start = entry.byte_offset as usize;
    let end = start + entry.byte_length as usize;
    let data: Vec<f32> = payload[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(malformed("payload", format!("tensor {} contains non-finite values", entry.name)));
    }
    Ok(Tensor::new(&entry.shape, data)?)
}

fn decode_f64(entry: &TensorEntry, payload: &[u8]) -> Result<Tensor<f64>> {
    let start = entry.byte_offset as usize;
    let end = start + entry.byte_length as usize;
    let data: Vec<f64> = payload[start..end]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(malformed("payload", format!("tensor {} contains non-finite values", entry.name)));
    }
    Ok(Tensor::new(&entry.shape, data)?)
}

/// Loads and validates a model checkpoint.
pub fn load(path: &Path) -> Result<CheckpointData> {
    let raw = read_raw(path)?;
    let m = &raw.manifest;
    if m.model_kind == "delta" {
        return Err(CheckpointError::Incompatible(
            "file holds a parameter delta, not a model; load it with load_delta".to_string(),
        ));
    }
    let mut params = ParamStore::new();
    for e in &m.tensors {
        params.insert(e.name.clone(), decode_f32(e, &raw.payload)?)?;
    }
    let model = match m.model_kind.as_str() {
        "dense" => Model::Dense(DenseModel { cfg: m.config.clone(), params }),
        "moe" => Model::Moe(MoeModel {
            cfg: m.config.clone(),
            params,
            frozen: m.frozen.iter().cloned().collect(),
        }),
        _ => unreachable!("validated"),
    };
    Ok(CheckpointData { model, provenance: m.provenance.clone(), hash: raw.hash })
}

/// Loads a parameter delta saved with [`save_delta`].
pub fn load_delta(path: &Path) -> Result<(Delta, Provenance, String)> {
    let raw = read_raw(path)?;
    let m = &raw.manifest;
    if m.model_kind != "delta" {
        return Err(CheckpointError::Incompatible(format!(
            "expected a delta file, found model_kind {:?}",
            m.model_kind
        )));
    }
    let sources = m
        .delta_sources
        .clone()
        .ok_or_else(|| malformed("delta_sources", "delta file missing source ids"))?;
    let mut tensors = ParamStore::new();
    for e in &m.tensors {
        tensors.insert(e.name.clone(), decode_f64(e, &raw.payload)?)?;
    }
    Ok((
        Delta { cfg: m.config.clone(), tensors, base_id: sources.base, post_id: sources.post },
        m.provenance.clone(),
        raw.hash,
    ))
}

/// Content hash of an existing checkpoint file.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(read_raw(path)?.hash)
}

#[derive(Debug, Serialize)]
pub struct NameDiff {
    pub name: String,
    pub max_abs: f64,
    pub l2: f64,
}

#[derive(Debug, Serialize)]
pub struct DiffReport {
    pub base: String,
    pub post: String,
    pub per_name: Vec<NameDiff>,
    pub only_in_base: Vec<String>,
    pub only_in_post: Vec<String>,
}

/// Per-name subtraction of two dense checkpoints plus a change report.
pub fn diff(path_a: &Path, path_b: &Path) -> Result<(Delta, DiffReport)> {
    let a = load(path_a)?;
    let b = load(path_b)?;
    let (Some(base), Some(post)) = (a.model.as_dense(), b.model.as_dense()) else {
        return Err(CheckpointError::Incompatible("diff requires two dense checkpoints".to_string()));
    };
    let a_names = base.params.name_set();
    let b_names = post.params.name_set();
    if a_names != b_names {
        let only_a: Vec<&String> = a_names.difference(&b_names).collect();
        let only_b: Vec<&String> = b_names.difference(&a_names).collect();
        return Err(CheckpointError::Incompatible(format!(
            "name sets differ; only in {}: {only_a:?}, only in {}: {only_b:?}",
            path_a.display(),
            path_b.display()
        )));
    }
    let delta = crate::surgery::compute_delta(base, post, &a.hash, &b.hash)?;
    let per_name = delta
        .tensors
        .iter()
        .map(|(name, t)| {
            let max_abs = t.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            let l2 = t.data().iter().map(|&v| v * v).sum::<f64>().sqrt();
            NameDiff { name: name.to_string(), max_abs, l2 }
        })
        .collect();
    Ok((
        delta,
        DiffReport {
            base: a.hash,
            post: b.hash,
            per_name,
            only_in_base: Vec::new(),
            only_in_post: Vec::new(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::upcycle;
    use tempfile::tempdir;

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

    fn prov(stage: &str) -> Provenance {
        Provenance { stage: stage.to_string(), parent: None, seed: 0 }
    }

    #[test]
    fn roundtrip_is_bit_exact_with_identical_bytes_and_hash() {
        let dir = tempdir().unwrap();
        let cfg = toy_config();
        let model = Model::Dense(DenseModel::init(&cfg, 3).unwrap());
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let h1 = save(&model, &prov("test"), &p1).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.hash, h1);
        assert!(loaded.model.params().bit_eq(model.params()));
        let h2 = save(&loaded.model, &loaded.provenance, &p2).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn moe_roundtrip_preserves_frozen_set() {
        let dir = tempdir().unwrap();
        let cfg = toy_config();
        let dense = DenseModel::init(&cfg, 3).unwrap();
        let moe = upcycle(&dense, 4, 2).unwrap();
        let frozen = moe.frozen.clone();
        let path = dir.path().join("moe.ckpt");
        save(&Model::Moe(moe), &prov("upcycle"), &path).unwrap();
        let loaded = load(&path).unwrap();
        match loaded.model {
            Model::Moe(m) => assert_eq!(m.frozen, frozen),
            Model::Dense(_) => panic!("expected MoE"),
        }
    }

    #[test]
    fn corrupting_one_payload_byte_changes_the_hash() {
        let dir = tempdir().unwrap();
        let cfg = toy_config();
        let model = Model::Dense(DenseModel::init(&cfg, 3).unwrap());
        let path = dir.path().join("a.ckpt");
        let h1 = save(&model, &prov("test"), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        match file_hash(&path) {
            Ok(h2) => assert_ne!(h1, h2),
            // Flipping a low bit may also produce a NaN payload, which load
            // rejects; either way the original hash is gone.
            Err(CheckpointError::Malformed { .. }) => (),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn overlapping_offsets_are_rejected_naming_the_tensors() {
        let dir = tempdir().unwrap();
        let cfg = toy_config();
        let model = Model::Dense(DenseModel::init(&cfg, 3).unwrap());
        let path = dir.path().join("a.ckpt");
        save(&model, &prov("test"), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + mlen]).unwrap();
        // Shift the second tensor's offset backwards into the first.
        manifest["tensors"][1]["byte_offset"] = serde_json::json!(4);
        let mjson = serde_json::to_vec(&manifest).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&mjson);
        out.extend_from_slice(&bytes[8 + mlen..]);
        fs::write(&path, &out).unwrap();
        match load(&path) {
            Err(CheckpointError::Malformed { field: "tensors", detail }) => {
                assert!(detail.contains("embed.pos") && detail.contains("embed.tok"), "{detail}");
            }
            other => panic!("expected overlap rejection, got {:?}", other.err()),
        }
    }

    #[test]
    fn delta_roundtrip_preserves_f64_payload() {
        let dir = tempdir().unwrap();
        let cfg = toy_config();
        let base = DenseModel::init(&cfg, 1).unwrap();
        let post = DenseModel::init(&cfg, 2).unwrap();
        let delta = crate::surgery::compute_delta(&base, &post, "b", "p").unwrap();
        let path = dir.path().join("d.ckpt");
        save_delta(&delta, &prov("delta"), &path).unwrap();
        let (loaded, _, _) = load_delta(&path).unwrap();
        assert_eq!(loaded.base_id, "b");
        assert_eq!(loaded.post_id, "p");
        assert!(loaded.tensors.bit_eq(&delta.tensors));
        // Model loader must refuse delta files.
        assert!(matches!(load(&path), Err(CheckpointError::Incompatible(_))));
    }

    #[test]
    fn diff_of_identical_files_is_all_zero() {
        let dir = tempdir().unwrap();
        let cfg = toy_config();
        let model = Model::Dense(DenseModel::init(&cfg, 3).unwrap());
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&model, &prov("x"), &p1).unwrap();
        save(&model, &prov("y"), &p2).unwrap();
        let (delta, report) = diff(&p1, &p2).unwrap();
        assert!(delta.tensors.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        assert!(report.per_name.iter().all(|d| d.max_abs == 0.0 && d.l2 == 0.0));
        assert!(report.only_in_base.is_empty() && report.only_in_post.is_empty());
        // Different provenance, same state: identical hashes.
        assert_eq!(report.base, report.post);
    }

    #[test]
    fn truncated_file_yields_structured_error() {
        let dir = tempdir().unwrap();
        let cfg = toy_config();
        let model = Model::Dense(DenseModel::init(&cfg, 3).unwrap());
        let path = dir.path().join("a.ckpt");
        save(&model, &prov("test"), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Malformed { field: "payload", .. })));
    }
}
