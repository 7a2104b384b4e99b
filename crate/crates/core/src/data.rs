//! Byte-level tokenizer, synthetic language generation, corpus ingestion,
//! and deterministic batching with per-sequence language tags.
//!
//! "Languages" are order-2 Markov byte streams over disjoint core
//! alphabets: cheap to generate, statistically separable, and learnable by
//! a small transformer, which is all the routing analysis needs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Byte values map to ids 0..=255; specials occupy 256..271.
pub const EOS: u32 = 256;
pub const PAD: u32 = 257;
pub const QMARK: u32 = 258;
pub const AMARK: u32 = 259;
pub const FIRST_RESERVED: u32 = 260;
pub const VOCAB_SIZE: usize = 272;

/// UTF-8 replacement character, emitted when detokenizing a special id.
const REPLACEMENT: &[u8] = "\u{FFFD}".as_bytes();

pub const MIN_DOC_TOKENS: usize = 64;
pub const MAX_DOC_TOKENS: usize = 512;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus cache ({0})")]
    MalformedCache(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn invalid(msg: impl Into<String>) -> DataError {
    DataError::InvalidArgument(msg.into())
}

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`] on plain byte strings; special ids become the
/// UTF-8 replacement character instead of crashing.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < 256 {
            out.push(id as u8);
        } else {
            out.extend_from_slice(REPLACEMENT);
        }
    }
    out
}

/// One tagged corpus: token-id documents, each ending in a single EOS.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub tag: String,
    pub docs: Vec<Vec<u32>>,
    pub provenance: String,
}

impl Corpus {
    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(|d| d.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.docs.is_empty() {
            return Err(invalid(format!("corpus {} has no documents", self.tag)));
        }
        for doc in &self.docs {
            if doc.is_empty() {
                return Err(invalid(format!("corpus {} contains an empty document", self.tag)));
            }
            if doc.iter().any(|&id| id as usize >= VOCAB_SIZE) {
                return Err(invalid(format!("corpus {} contains an out-of-vocab id", self.tag)));
            }
            if doc[doc.len() - 1] != EOS || doc[..doc.len() - 1].contains(&EOS) {
                return Err(invalid(format!(
                    "corpus {}: documents must end with exactly one EOS",
                    self.tag
                )));
            }
        }
        Ok(())
    }

    /// Line-oriented UTF-8 ingestion: one document per non-empty line.
    pub fn from_lines(tag: &str, path: &Path) -> Result<Corpus> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        let docs: Vec<Vec<u32>> = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let mut ids = tokenize(l.as_bytes());
                ids.push(EOS);
                ids
            })
            .collect();
        let corpus = Corpus {
            tag: tag.to_string(),
            docs,
            provenance: format!("file:{}", path.display()),
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Cache format: 8-byte little-endian token count, then each id as a
    /// little-endian u32. Document boundaries are recovered from EOS.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let total = self.total_tokens() as u64;
        let mut bytes = Vec::with_capacity(8 + total as usize * 4);
        bytes.extend_from_slice(&total.to_le_bytes());
        for doc in &self.docs {
            for &id in doc {
                bytes.extend_from_slice(&id.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp-write");
        fs::write(&tmp, &bytes).map_err(|source| DataError::Io { path: tmp.clone(), source })?;
        fs::rename(&tmp, path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        Ok(())
    }

    pub fn read_cache(tag: &str, path: &Path) -> Result<Corpus> {
        let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        if bytes.len() < 8 {
            return Err(DataError::MalformedCache("missing count header".to_string()));
        }
        let count = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if bytes.len() as u64 != 8 + count * 4 {
            return Err(DataError::MalformedCache(format!(
                "header declares {count} tokens but file holds {} payload bytes",
                bytes.len() - 8
            )));
        }
        let mut docs = Vec::new();
        let mut doc = Vec::new();
        for chunk in bytes[8..].chunks_exact(4) {
            let id = u32::from_le_bytes(chunk.try_into().unwrap());
            doc.push(id);
            if id == EOS {
                docs.push(std::mem::take(&mut doc));
            }
        }
        if !doc.is_empty() {
            return Err(DataError::MalformedCache("trailing tokens after final EOS".to_string()));
        }
        let corpus = Corpus {
            tag: tag.to_string(),
            docs,
            provenance: format!("cache:{}", path.display()),
        };
        corpus.validate().map_err(|e| DataError::MalformedCache(e.to_string()))?;
        Ok(corpus)
    }
}

/// Generator settings for one synthetic language.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub tag: String,
    pub seed: u64,
    pub n_tokens: usize,
    /// Inclusive byte range of the core alphabet. Distinct languages must
    /// overlap only on shared punctuation/digit bytes.
    pub alphabet_lo: u8,
    pub alphabet_hi: u8,
    /// Order-2 transition temperature; smaller means more deterministic.
    pub temperature: f64,
}

/// Order-2 Markov byte stream chunked into documents of 64..=512 tokens,
/// each terminated by EOS.
pub fn gen_language(spec: &LanguageSpec) -> Result<Corpus> {
    if spec.n_tokens < 1000 {
        return Err(invalid(format!("n_tokens must be >= 1000, got {}", spec.n_tokens)));
    }
    if spec.alphabet_hi < spec.alphabet_lo {
        return Err(invalid("alphabet_hi must be >= alphabet_lo"));
    }
    if !(spec.temperature.is_finite() && spec.temperature > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let a = (spec.alphabet_hi - spec.alphabet_lo + 1) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Transition table P(c | prev2, prev1) via tempered softmax of
    // standard normal logits.
    let mut table = vec![0.0f64; a * a * a];
    for ctx in 0..a * a {
        let row = &mut table[ctx * a..(ctx + 1) * a];
        let mut mx = f64::NEG_INFINITY;
        for v in row.iter_mut() {
            let z: f64 = standard_normal(&mut rng) / spec.temperature;
            *v = z;
            mx = mx.max(z);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let mut acc = 0.0;
        for v in row.iter_mut() {
            acc += *v / sum;
            *v = acc; // store the CDF for sampling
        }
    }

    let sample = |rng: &mut ChaCha8Rng, p2: usize, p1: usize| -> usize {
        let row = &table[(p2 * a + p1) * a..(p2 * a + p1 + 1) * a];
        let u: f64 = rng.random();
        row.iter().position(|&c| u < c).unwrap_or(a - 1)
    };

    let mut p2 = rng.random_range(0..a);
    let mut p1 = rng.random_range(0..a);
    let mut docs = Vec::new();
    let mut remaining = spec.n_tokens;
    while remaining > 0 {
        // Keep every document inside 64..=512 payload tokens: absorb the
        // tail when it fits, otherwise leave at least a minimum document.
        let mut len = rng.random_range(MIN_DOC_TOKENS..=MAX_DOC_TOKENS).min(remaining);
        if remaining - len < MIN_DOC_TOKENS {
            len = if remaining <= MAX_DOC_TOKENS { remaining } else { remaining - MIN_DOC_TOKENS };
        }
        let mut doc = Vec::with_capacity(len + 1);
        for _ in 0..len {
            let c = sample(&mut rng, p2, p1);
            doc.push((spec.alphabet_lo as usize + c) as u32);
            p2 = p1;
            p1 = c;
        }
        doc.push(EOS);
        docs.push(doc);
        remaining -= len;
    }
    let corpus = Corpus {
        tag: spec.tag.clone(),
        docs,
        provenance: format!(
            "gen:seed={},n_tokens={},alphabet={}..={},temperature={}",
            spec.seed, spec.n_tokens, spec.alphabet_lo, spec.alphabet_hi, spec.temperature
        ),
    };
    corpus.validate()?;
    Ok(corpus)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniform draws per normal keeps the stream simple.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One padded training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Row-major [b x t] token ids, EOS-padded.
    pub tokens: Vec<u32>,
    /// Row-major [b x t]; 1 marks a position whose token is a real
    /// prediction target (never position 0, never padding, and only the
    /// answer span in post-training batches).
    pub mask: Vec<u8>,
    pub b: usize,
    pub t: usize,
    /// Per-sequence language tags.
    pub tags: Vec<String>,
    /// Per-sequence count of real (non-padding) tokens.
    pub lengths: Vec<usize>,
}

/// Deterministic shuffled packing of one epoch: per corpus, documents are
/// concatenated in order and chunked into length-`t` sequences; sequences
/// from all corpora are then shuffled together and grouped into batches of
/// `b`. Every document is visited exactly once.
pub fn epoch_batches(corpora: &[Corpus], b: usize, t: usize, seed: u64) -> Result<Vec<Batch>> {
    if b == 0 || t < 2 {
        return Err(invalid("batch size must be >= 1 and sequence length >= 2"));
    }
    if corpora.is_empty() {
        return Err(invalid("at least one corpus required"));
    }
    let mut sequences: Vec<(usize, Vec<u32>)> = Vec::new(); // (corpus idx, tokens)
    for (ci, corpus) in corpora.iter().enumerate() {
        corpus.validate()?;
        let mut current: Vec<u32> = Vec::with_capacity(t);
        for doc in &corpus.docs {
            for &id in doc {
                current.push(id);
                if current.len() == t {
                    sequences.push((ci, std::mem::take(&mut current)));
                    current = Vec::with_capacity(t);
                }
            }
        }
        if !current.is_empty() {
            sequences.push((ci, current));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut sequences, &mut rng);

    let mut batches = Vec::new();
    for group in sequences.chunks(b) {
        let rows = group.len();
        let mut tokens = vec![EOS; rows * t];
        let mut mask = vec![0u8; rows * t];
        let mut tags = Vec::with_capacity(rows);
        let mut lengths = Vec::with_capacity(rows);
        for (r, (ci, seq)) in group.iter().enumerate() {
            for (p, &id) in seq.iter().enumerate() {
                tokens[r * t + p] = id;
                if p > 0 {
                    mask[r * t + p] = 1;
                }
            }
            tags.push(corpora[*ci].tag.clone());
            lengths.push(seq.len());
        }
        batches.push(Batch { tokens, mask, b: rows, t, tags, lengths });
    }
    Ok(batches)
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
