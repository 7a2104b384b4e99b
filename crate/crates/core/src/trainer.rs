//! Training stages: dense pretraining, dense post-training (manufactures
//! the parameter delta), MoE continued pretraining with freezing, and
//! router-only replay tuning. AdamW with cosine decay throughout;
//! identical plan + seed + data reproduce bit-identical parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{epoch_batches, Batch, Corpus, DataError, AMARK, EOS, QMARK};
use crate::model::{ntp_loss_graph, Graph, Model, ModelKind};
use crate::moe::{cpt_trainable, router_trainable, total_loss_graph};
use crate::params::ParamStore;
use crate::tensor::KernelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage {stage} requires a {want} model")]
    StageMismatch { stage: &'static str, want: &'static str },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("non-finite loss at step {step}{}", last_good.as_ref().map(|p| format!("; last good state saved to {}", p.display())).unwrap_or_default())]
    NonFinite {
        step: usize,
        last_good: Option<PathBuf>,
        #[source]
        source: KernelError,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Posttrain,
    Cpt,
    RouterTune,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Posttrain => "posttrain",
            Stage::Cpt => "cpt",
            Stage::RouterTune => "router_tune",
        }
    }

    fn wants_moe(&self) -> bool {
        matches!(self, Stage::Cpt | Stage::RouterTune)
    }
}

/// Stage settings; stream construction consumes the batch geometry, the
/// step loop consumes the rest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub stage: Stage,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    pub peak_lr: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_floor_frac")]
    pub floor_frac: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    #[serde(default = "default_lb_alpha")]
    pub lb_alpha: f64,
    pub seed: u64,
    /// original : expansion batch ratio for router-tune replay.
    #[serde(default = "default_replay_ratio")]
    pub replay_ratio: (u32, u32),
}

fn default_warmup_frac() -> f64 {
    0.03
}
fn default_floor_frac() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_lb_alpha() -> f64 {
    0.01
}
fn default_replay_ratio() -> (u32, u32) {
    (1, 2)
}

/// Cosine-with-floor: linear warmup to the peak, cosine decay down to
/// floor_frac * peak, non-increasing after warmup, ends at the floor.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64, warmup_steps: usize, floor: f64) -> f64 {
    debug_assert!(step < total_steps);
    if step < warmup_steps {
        return peak * (step + 1) as f64 / warmup_steps as f64;
    }
    let last = total_steps.saturating_sub(1);
    if last <= warmup_steps {
        return peak;
    }
    let progress = (step - warmup_steps) as f64 / (last - warmup_steps) as f64;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled weight decay Adam. Moments exist only for trainable names.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn moment_names(&self) -> Vec<&str> {
        self.m.keys().map(|s| s.as_str()).collect()
    }

    /// One update over the trainable set, in sorted name order.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &ParamStore<f32>,
        trainable: &BTreeSet<String>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for name in trainable {
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            let p = params.get_mut(name).expect("trainable name exists");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let theta = pd[i] as f64;
                pd[i] = (theta - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * theta)) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_ntp: f64,
    pub l_lb: f64,
    pub l: f64,
}

#[derive(Debug, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Deterministic batch sources for the step loop.
pub enum BatchStream {
    Epochs(EpochStream),
    /// Two sources interleaved at an exact batch-level ratio.
    Mix {
        first: Box<BatchStream>,
        second: Option<Box<BatchStream>>,
        ratio: (u32, u32),
        step: usize,
    },
    Synth(SynthStream),
    /// Fixed batches cycled in order (tests).
    Fixed { batches: Vec<Batch>, next: usize },
}

impl BatchStream {
    /// Multi-epoch LM stream; each epoch reshuffles with a seed derived
    /// from (seed, epoch).
    pub fn lm(corpora: Vec<Corpus>, b: usize, t: usize, seed: u64) -> Result<Self> {
        Ok(BatchStream::Epochs(EpochStream::new(corpora, b, t, seed)?))
    }

    /// Interleaves two streams so every window of (a + b) batches holds
    /// exactly `a` from the first and `b` from the second.
    pub fn mix(first: BatchStream, second: BatchStream, ratio: (u32, u32)) -> Result<Self> {
        if ratio.0 == 0 {
            return Err(TrainError::InvalidPlan("mix ratio needs at least one part of the first stream".to_string()));
        }
        let second = if ratio.1 > 0 { Some(Box::new(second)) } else { None };
        Ok(BatchStream::Mix { first: Box::new(first), second, ratio, step: 0 })
    }

    pub fn next_batch(&mut self) -> Batch {
        match self {
            BatchStream::Epochs(s) => s.next_batch(),
            BatchStream::Mix { first, second, ratio, step } => {
                let (a, b) = *ratio;
                let pos = (*step as u64 % (a + b) as u64) as u32;
                *step += 1;
                if pos < a {
                    first.next_batch()
                } else {
                    second.as_mut().expect("ratio.1 > 0 checked").next_batch()
                }
            }
            BatchStream::Synth(s) => s.next_batch(),
            BatchStream::Fixed { batches, next } => {
                let b = batches[*next % batches.len()].clone();
                *next += 1;
                b
            }
        }
    }

    pub fn batches_per_epoch(&self) -> Option<usize> {
        match self {
            BatchStream::Epochs(s) => Some(s.per_epoch),
            BatchStream::Fixed { batches, .. } => Some(batches.len()),
            _ => None,
        }
    }
}

pub struct EpochStream {
    corpora: Vec<Corpus>,
    b: usize,
    t: usize,
    seed: u64,
    epoch: usize,
    current: Vec<Batch>,
    idx: usize,
    per_epoch: usize,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl EpochStream {
    pub fn new(corpora: Vec<Corpus>, b: usize, t: usize, seed: u64) -> Result<Self> {
        let current = epoch_batches(&corpora, b, t, epoch_seed(seed, 0))?;
        let per_epoch = current.len();
        Ok(EpochStream { corpora, b, t, seed, epoch: 0, current, idx: 0, per_epoch })
    }

    fn next_batch(&mut self) -> Batch {
        if self.idx >= self.current.len() {
            self.epoch += 1;
            self.current = epoch_batches(&self.corpora, self.b, self.t, epoch_seed(self.seed, self.epoch))
                .expect("valid corpora");
            self.idx = 0;
        }
        let b = self.current[self.idx].clone();
        self.idx += 1;
        b
    }
}

/// Mixes original and expansion data at an exact batch-level ratio
/// (default 1:2): over every window of (orig + exp) batches the
/// per-source counts match the ratio exactly. Sources cycle over epochs.
pub fn make_replay_stream(
    original: Corpus,
    expansion: Corpus,
    ratio: (u32, u32),
    b: usize,
    t: usize,
    seed: u64,
) -> Result<BatchStream> {
    if ratio.0 == 0 {
        return Err(TrainError::InvalidPlan("replay ratio needs at least one original part".to_string()));
    }
    BatchStream::mix(
        BatchStream::Epochs(EpochStream::new(vec![original], b, t, seed)?),
        BatchStream::Epochs(EpochStream::new(vec![expansion], b, t, seed ^ 0xA5A5)?),
        ratio,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub payload_min: usize,
    pub payload_max: usize,
}

/// Supervised echo sequences: Q-marker, payload, A-marker, payload, EOS,
/// with the loss mask covering exactly the answer payload and the EOS.
pub struct SynthStream {
    payloads: PayloadSampler,
    cfg: SynthConfig,
    tag: String,
}

/// Builds one echo example; returns (tokens, mask) of length `t`.
pub fn echo_example(payload: &[u32], t: usize) -> Result<(Vec<u32>, Vec<u8>)> {
    let need = 2 * payload.len() + 3;
    if need > t {
        return Err(TrainError::InvalidPlan(format!(
            "payload of {} tokens needs sequence length {need}, have {t}",
            payload.len()
        )));
    }
    let mut tokens = vec![EOS; t];
    let mut mask = vec![0u8; t];
    tokens[0] = QMARK;
    tokens[1..1 + payload.len()].copy_from_slice(payload);
    tokens[1 + payload.len()] = AMARK;
    let answer_start = payload.len() + 2;
    tokens[answer_start..answer_start + payload.len()].copy_from_slice(payload);
    // tokens[2 * payload.len() + 2] is already EOS (padding value), but it
    // is the real terminator here; mark answer span + EOS as targets.
    for p in answer_start..=2 * payload.len() + 2 {
        mask[p] = 1;
    }
    Ok((tokens, mask))
}

/// Parses an echo sequence back into (prompt payload, answer span).
pub fn parse_echo_example(tokens: &[u32]) -> Option<(Vec<u32>, Vec<u32>)> {
    if tokens.first() != Some(&QMARK) {
        return None;
    }
    let a_pos = tokens.iter().position(|&t| t == AMARK)?;
    let prompt = tokens[1..a_pos].to_vec();
    let rest = &tokens[a_pos + 1..];
    let end = rest.iter().position(|&t| t == EOS)?;
    Some((prompt, rest[..end].to_vec()))
}

/// Deterministic payload sampler over a corpus' document bytes.
pub struct PayloadSampler {
    docs: Vec<Vec<u32>>,
    rng: rand_chacha::ChaCha8Rng,
    min_len: usize,
    max_len: usize,
}

impl PayloadSampler {
    pub fn new(corpus: &Corpus, min_len: usize, max_len: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        if min_len == 0 || max_len < min_len {
            return Err(TrainError::InvalidPlan("payload lengths must satisfy 1 <= min <= max".to_string()));
        }
        let docs: Vec<Vec<u32>> = corpus
            .docs
            .iter()
            .map(|d| d[..d.len() - 1].to_vec()) // strip trailing EOS
            .filter(|d| d.len() >= min_len)
            .collect();
        if docs.is_empty() {
            return Err(TrainError::InvalidPlan("corpus has no document long enough for a payload".to_string()));
        }
        Ok(PayloadSampler {
            docs,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
            min_len,
            max_len,
        })
    }

    pub fn sample(&mut self) -> Vec<u32> {
        use rand::Rng;
        let doc = &self.docs[self.rng.random_range(0..self.docs.len())];
        let len = self.rng.random_range(self.min_len..=self.max_len).min(doc.len());
        let start = self.rng.random_range(0..=doc.len() - len);
        doc[start..start + len].to_vec()
    }

    pub fn take(&mut self, n: usize) -> Vec<Vec<u32>> {
        (0..n).map(|_| self.sample()).collect()
    }
}

/// Desk-scale stand-in for alignment data: an echo task whose success is
/// mechanically checkable as exact-match reproduction of the payload.
pub fn synth_posttrain_task(corpus: &Corpus, seed: u64, cfg: SynthConfig) -> Result<BatchStream> {
    let max_payload = (cfg.seq_len.saturating_sub(3)) / 2;
    if cfg.payload_min == 0 || cfg.payload_max < cfg.payload_min || cfg.payload_max > max_payload {
        return Err(TrainError::InvalidPlan(format!(
            "payload range [{}, {}] must fit 1..={} for seq_len {}",
            cfg.payload_min, cfg.payload_max, max_payload, cfg.seq_len
        )));
    }
    let tag = corpus.tag.clone();
    Ok(BatchStream::Synth(SynthStream {
        payloads: PayloadSampler::new(corpus, cfg.payload_min, cfg.payload_max, seed)?,
        cfg,
        tag,
    }))
}

impl SynthStream {
    fn next_batch(&mut self) -> Batch {
        let (b, t) = (self.cfg.batch_size, self.cfg.seq_len);
        let mut tokens = Vec::with_capacity(b * t);
        let mut mask = Vec::with_capacity(b * t);
        let mut lengths = Vec::with_capacity(b);
        for _ in 0..b {
            let payload = self.payloads.sample();
            let (tk, mk) = echo_example(&payload, t).expect("payload bounds validated");
            lengths.push(2 * payload.len() + 3);
            tokens.extend_from_slice(&tk);
            mask.extend_from_slice(&mk);
        }
        Batch { tokens, mask, b, t, tags: vec![self.tag.clone(); b], lengths }
    }
}

pub struct StageResult {
    pub model: Model,
    pub log: TrainLog,
}

fn trainable_for(model: &Model, stage: Stage) -> BTreeSet<String> {
    match (model, stage) {
        (Model::Moe(m), Stage::Cpt) => cpt_trainable(m),
        (Model::Moe(m), Stage::RouterTune) => router_trainable(m),
        (m, _) => m.params().names().map(str::to_string).collect(),
    }
}

/// Runs one training stage. AdamW updates touch only the stage's
/// trainable set; on a non-finite loss the last good state is saved to
/// `abort_path` (when given) and the error references it.
pub fn run_stage(
    model: Model,
    plan: &TrainPlan,
    stream: &mut BatchStream,
    abort_path: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(&StepRecord)>,
) -> Result<StageResult> {
    match (plan.stage.wants_moe(), &model) {
        (true, Model::Dense(_)) => {
            return Err(TrainError::StageMismatch { stage: plan.stage.as_str(), want: "moe" })
        }
        (false, Model::Moe(_)) => {
            return Err(TrainError::StageMismatch { stage: plan.stage.as_str(), want: "dense" })
        }
        _ => {}
    }
    if !(plan.peak_lr.is_finite() && plan.peak_lr >= 0.0) {
        return Err(TrainError::InvalidPlan("peak_lr must be finite and >= 0".to_string()));
    }
    let total_steps = match (plan.steps, plan.epochs) {
        (Some(s), _) if s > 0 => s,
        (None, Some(e)) if e > 0 => {
            let per = stream.batches_per_epoch().ok_or_else(|| {
                TrainError::InvalidPlan("epoch-based plan needs an epoch-length stream".to_string())
            })?;
            e * per
        }
        _ => return Err(TrainError::InvalidPlan("plan needs steps or epochs".to_string())),
    };
    let warmup = ((total_steps as f64 * plan.warmup_frac).round() as usize).min(total_steps);
    let floor = plan.peak_lr * plan.floor_frac;

    let mut model = model;
    let trainable = trainable_for(&model, plan.stage);
    let mut opt = AdamW::new(plan.weight_decay);
    let mut log = TrainLog::default();

    for step in 0..total_steps {
        // A ragged tail batch can hold only target-free rows (a lone
        // terminal EOS); such batches carry nothing to learn from.
        let mut skipped = 0;
        let batch = loop {
            let b = stream.next_batch();
            if has_targets(&b) {
                break b;
            }
            skipped += 1;
            if skipped > 10_000 {
                return Err(TrainError::InvalidPlan("stream yields no trainable batches".to_string()));
            }
        };
        let lr = cosine_lr(step, total_steps, plan.peak_lr, warmup, floor);
        let step_out = run_step(&mut model, &batch, plan.lb_alpha);
        let (l, l_ntp, l_lb, grads) = match step_out {
            Ok(v) => v,
            Err(TrainError::Kernel(source @ KernelError::NonFinite { .. })) => {
                let last_good = save_abort(&model, abort_path, plan, step);
                return Err(TrainError::NonFinite { step, last_good, source });
            }
            Err(e) => return Err(e),
        };
        opt.step(model.params_mut(), &grads, &trainable, lr);
        let record = StepRecord { step, lr, l_ntp, l_lb, l };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&record);
        }
        log.records.push(record);
    }
    Ok(StageResult { model, log })
}

fn run_step(model: &mut Model, batch: &Batch, alpha: f64) -> Result<(f64, f64, f64, ParamStore<f32>)> {
    match model {
        Model::Dense(m) => {
            let mut g = Graph::new(&m.params);
            let (loss, _) =
                ntp_loss_graph(&mut g, &m.cfg, ModelKind::Dense, &batch.tokens, &batch.mask, batch.b, batch.t)?;
            let l = g.tape.value(loss).item() as f64;
            let grads = g.grads(loss)?;
            check_grads_finite(&grads)?;
            Ok((l, l, 0.0, grads))
        }
        Model::Moe(m) => {
            let mut g = Graph::new(&m.params);
            let out = total_loss_graph(&mut g, &m.cfg, &batch.tokens, &batch.mask, batch.b, batch.t, alpha)?;
            let l = g.tape.value(out.total).item() as f64;
            let l_ntp = g.tape.value(out.ntp).item() as f64;
            let l_lb = g.tape.value(out.lb_mean).item() as f64;
            let grads = g.grads(out.total)?;
            check_grads_finite(&grads)?;
            Ok((l, l_ntp, l_lb, grads))
        }
    }
}

fn has_targets(batch: &Batch) -> bool {
    (0..batch.b).any(|s| (1..batch.t).any(|p| batch.mask[s * batch.t + p] != 0))
}

fn check_grads_finite(grads: &ParamStore<f32>) -> Result<()> {
    for (_, g) in grads.iter() {
        if !g.is_finite() {
            return Err(TrainError::Kernel(KernelError::NonFinite { op: "backward" }));
        }
    }
    Ok(())
}

fn save_abort(model: &Model, abort_path: Option<&Path>, plan: &TrainPlan, step: usize) -> Option<PathBuf> {
    let path = abort_path?;
    let provenance = crate::checkpoint::Provenance {
        stage: format!("{}-abort-step-{}", plan.stage.as_str(), step),
        parent: None,
        seed: plan.seed,
    };
    crate::checkpoint::save(model, &provenance, path).ok()?;
    Some(path.to_path_buf())
}
