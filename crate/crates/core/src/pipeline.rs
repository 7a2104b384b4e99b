//! Subcommand implementations and the end-to-end pipeline: corpus
//! generation, the four training stages, diffing, merging, evaluation, and
//! routing statistics. Every command reads/writes under the workdir and
//! records a run directory with the resolved config and content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::analytics::{
    report_to_csv, report_to_json, route_frequencies, tradeoff_report, EvalEntry, RouterStats, TradeoffRow,
};
use crate::checkpoint::{self, CheckpointError, Provenance};
use crate::config::{ConfigError, LangRole, MergeStrategy, RunConfig, StageConfig};
use crate::data::{gen_language, Corpus, DataError, LanguageSpec};
use crate::model::{DenseModel, Model};
use crate::moe::upcycle;
use crate::surgery::{
    graft_delta_moe, merge_avg_dense, merge_avg_moe, merge_delta_dense, MergeReport, SurgeryError,
};
use crate::tensor::KernelError;
use crate::trainer::{
    make_replay_stream, run_stage, synth_posttrain_task, BatchStream, PayloadSampler, Stage, StageResult,
    SynthConfig, TrainError, TrainLog, TrainPlan,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid invocation: {0}")]
    Usage(String),
}

impl PipelineError {
    /// Stable machine-parseable error code for the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "E_CONFIG",
            PipelineError::Data(_) => "E_DATA",
            PipelineError::Checkpoint(CheckpointError::Io { .. }) => "E_IO",
            PipelineError::Checkpoint(CheckpointError::Incompatible(_)) => "E_INCOMPAT",
            PipelineError::Checkpoint(_) => "E_FORMAT",
            PipelineError::Surgery(SurgeryError::Incompatible(_)) => "E_INCOMPAT",
            PipelineError::Surgery(_) => "E_NUMERIC",
            PipelineError::Train(TrainError::StageMismatch { .. }) => "E_STAGE",
            PipelineError::Train(TrainError::NonFinite { .. }) => "E_NUMERIC",
            PipelineError::Train(TrainError::InvalidPlan(_)) => "E_CONFIG",
            PipelineError::Train(_) => "E_TRAIN",
            PipelineError::Kernel(_) => "E_NUMERIC",
            PipelineError::MissingInput(_) => "E_MISSING_INPUT",
            PipelineError::Io { .. } => "E_IO",
            PipelineError::Usage(_) => "E_ARGS",
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Workdir layout and config holder for one invocation.
pub struct Workspace {
    pub cfg: RunConfig,
    quiet: bool,
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> Result<Workspace> {
        cfg.validate()?;
        Ok(Workspace { cfg, quiet: false })
    }

    /// Silences per-step progress (used by tests).
    pub fn quiet(mut self) -> Workspace {
        self.quiet = true;
        self
    }

    pub fn workdir(&self) -> &Path {
        &self.cfg.paths.workdir
    }

    pub fn corpora_dir(&self) -> PathBuf {
        self.workdir().join("corpora")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.workdir().join("checkpoints")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.workdir().join("reports")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.workdir().join("runs")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        let file = if name.ends_with(".ckpt") { name.to_string() } else { format!("{name}.ckpt") };
        self.checkpoints_dir().join(file)
    }

    fn ensure_dirs(&self) -> Result<()> {
        for dir in [self.corpora_dir(), self.checkpoints_dir(), self.reports_dir(), self.runs_dir()] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(())
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[moegraft] {msg}");
        }
    }

    fn corpus_path(&self, tag: &str, split: &str) -> PathBuf {
        self.corpora_dir().join(format!("{tag}.{split}.tok"))
    }

    fn load_corpus(&self, tag: &str, split: &str) -> Result<Corpus> {
        let path = self.corpus_path(tag, split);
        if !path.exists() {
            return Err(PipelineError::MissingInput(format!(
                "corpus cache {} (run gen-corpus first)",
                path.display()
            )));
        }
        Ok(Corpus::read_cache(tag, &path)?)
    }

    fn corpora_by_role(&self, role: LangRole, split: &str) -> Result<Vec<Corpus>> {
        self.cfg
            .data
            .languages
            .iter()
            .filter(|l| l.role == role)
            .map(|l| self.load_corpus(&l.tag, split))
            .collect()
    }

    fn require_checkpoint(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(PipelineError::MissingInput(format!("checkpoint {}", path.display())));
        }
        Ok(())
    }
}

/// Per-invocation bookkeeping: resolved config, input/output hashes, logs.
pub struct RunDir {
    pub path: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct HashesFile<'a> {
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(ws: &Workspace, command: &str) -> Result<RunDir> {
        ws.ensure_dirs()?;
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let mut path = ws.runs_dir().join(format!("{command}-{stamp}"));
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = ws.runs_dir().join(format!("{command}-{stamp}-{n}"));
        }
        fs::create_dir_all(&path).map_err(io_err(&path))?;
        let cfg_path = path.join("resolved_config.toml");
        fs::write(&cfg_path, ws.cfg.to_toml()).map_err(io_err(&cfg_path))?;
        Ok(RunDir { path, inputs: BTreeMap::new(), outputs: BTreeMap::new() })
    }

    pub fn record_input(&mut self, name: &str, hash: &str) {
        self.inputs.insert(name.to_string(), hash.to_string());
    }

    pub fn record_output(&mut self, name: &str, hash: &str) {
        self.outputs.insert(name.to_string(), hash.to_string());
    }

    pub fn write_log(&self, name: &str, log: &TrainLog) -> Result<()> {
        let path = self.path.join(format!("{name}.jsonl"));
        log.write_jsonl(&path).map_err(io_err(&path))?;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let path = self.path.join("hashes.json");
        let body = serde_json::to_string_pretty(&HashesFile { inputs: &self.inputs, outputs: &self.outputs })
            .expect("hashes serialize");
        fs::write(&path, body).map_err(io_err(&path))?;
        Ok(())
    }
}

fn stage_seed(base: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the run seed.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    base ^ h
}

fn plan_from(stage: Stage, cfg: &StageConfig, data: &crate::config::DataConfig, lb_alpha: f64, seed: u64) -> TrainPlan {
    TrainPlan {
        stage,
        steps: cfg.steps,
        epochs: cfg.epochs,
        peak_lr: cfg.peak_lr,
        warmup_frac: cfg.warmup_frac,
        floor_frac: cfg.floor_frac,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size.unwrap_or(data.batch_size),
        seq_len: cfg.seq_len.unwrap_or(data.seq_len),
        lb_alpha,
        seed,
        replay_ratio: cfg.replay_ratio,
    }
}

fn merge_docs(corpora: Vec<Corpus>, tag: &str) -> Corpus {
    let provenance = format!(
        "merge:[{}]",
        corpora.iter().map(|c| c.tag.as_str()).collect::<Vec<_>>().join(",")
    );
    Corpus {
        tag: tag.to_string(),
        docs: corpora.into_iter().flat_map(|c| c.docs).collect(),
        provenance,
    }
}

/// gen-corpus: materialize train/eval (and replay for originals) caches.
pub fn cmd_gen_corpus(ws: &Workspace) -> Result<()> {
    let run = RunDir::create(ws, "gen-corpus")?;
    for lang in &ws.cfg.data.languages {
        let n_train = if lang.role == LangRole::Expansion {
            (lang.n_tokens as f64 * ws.cfg.data.token_multiplier).round() as usize
        } else {
            lang.n_tokens
        };
        let train = match &lang.file {
            Some(path) => Corpus::from_lines(&lang.tag, path)?,
            None => gen_language(&LanguageSpec {
                tag: lang.tag.clone(),
                seed: lang.seed,
                n_tokens: n_train,
                alphabet_lo: lang.alphabet_lo,
                alphabet_hi: lang.alphabet_hi,
                temperature: lang.temperature,
            })?,
        };
        train.write_cache(&ws.corpus_path(&lang.tag, "train"))?;
        ws.log(&format!("gen-corpus: {}.train = {} tokens", lang.tag, train.total_tokens()));

        let eval = gen_language(&LanguageSpec {
            tag: lang.tag.clone(),
            seed: lang.seed.wrapping_add(1),
            n_tokens: ws.cfg.eval.eval_tokens,
            alphabet_lo: lang.alphabet_lo,
            alphabet_hi: lang.alphabet_hi,
            temperature: lang.temperature,
        })?;
        eval.write_cache(&ws.corpus_path(&lang.tag, "eval"))?;

        if lang.role == LangRole::Original {
            let replay = gen_language(&LanguageSpec {
                tag: lang.tag.clone(),
                seed: lang.seed.wrapping_add(2),
                n_tokens: ws.cfg.eval.replay_tokens,
                alphabet_lo: lang.alphabet_lo,
                alphabet_hi: lang.alphabet_hi,
                temperature: lang.temperature,
            })?;
            replay.write_cache(&ws.corpus_path(&lang.tag, "replay"))?;
        } else if pilot_tokens(&ws.cfg) > 0 {
            // Pilot sample for pretraining, disjoint seed from the CPT
            // corpus: the base model must not be blind to the alphabet.
            let pilot = gen_language(&LanguageSpec {
                tag: lang.tag.clone(),
                seed: lang.seed.wrapping_add(3),
                n_tokens: pilot_tokens(&ws.cfg),
                alphabet_lo: lang.alphabet_lo,
                alphabet_hi: lang.alphabet_hi,
                temperature: lang.temperature,
            })?;
            pilot.write_cache(&ws.corpus_path(&lang.tag, "pilot"))?;
        }
    }
    run.finish()
}

/// Pilot tokens per expansion language: a fraction of the original
/// training volume split across the expansion languages.
fn pilot_tokens(cfg: &RunConfig) -> usize {
    let frac = cfg.data.pretrain_expansion_fraction;
    if frac <= 0.0 {
        return 0;
    }
    let orig_total: usize = cfg
        .data
        .languages
        .iter()
        .filter(|l| l.role == LangRole::Original)
        .map(|l| l.n_tokens)
        .sum();
    let n_exp = cfg.data.languages.iter().filter(|l| l.role == LangRole::Expansion).count();
    if n_exp == 0 {
        return 0;
    }
    ((orig_total as f64 * frac / n_exp as f64) as usize).max(1000)
}

fn train_and_save(
    ws: &Workspace,
    run: &mut RunDir,
    model: Model,
    plan: &TrainPlan,
    stream: &mut BatchStream,
    parent_hash: Option<String>,
    out_name: &str,
    log_name: &str,
) -> Result<String> {
    let abort_path = run.path.join(format!("{log_name}-abort.ckpt"));
    let total_hint = plan.steps.or_else(|| plan.epochs.zip(stream.batches_per_epoch()).map(|(e, p)| e * p));
    let started = Instant::now();
    let quiet = ws.quiet;
    let log_label = log_name.to_string();
    let mut progress = move |r: &crate::trainer::StepRecord| {
        if !quiet && (r.step % 50 == 0 || Some(r.step + 1) == total_hint) {
            eprintln!(
                "[moegraft] {log_label} step {:4}{} lr {:.2e} loss {:.4}",
                r.step,
                total_hint.map(|t| format!("/{t}")).unwrap_or_default(),
                r.lr,
                r.l
            );
        }
    };
    let StageResult { model, log } = run_stage(model, plan, stream, Some(&abort_path), Some(&mut progress))?;
    ws.log(&format!("{log_name}: done in {:.1}s", started.elapsed().as_secs_f64()));
    let provenance = Provenance { stage: plan.stage.as_str().to_string(), parent: parent_hash, seed: plan.seed };
    let out_path = ws.checkpoint_path(out_name);
    let hash = checkpoint::save(&model, &provenance, &out_path)?;
    run.write_log(log_name, &log)?;
    run.record_output(out_name, &hash);
    Ok(hash)
}

/// Which corpora a dense LM stage trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSelector {
    Original,
    Expansion,
}

impl std::str::FromStr for DataSelector {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "original" => Ok(DataSelector::Original),
            "expansion" => Ok(DataSelector::Expansion),
            other => Err(format!("unknown data selector {other:?} (expected original or expansion)")),
        }
    }
}

/// pretrain: dense NTP training, fresh init or continued from --init.
pub fn cmd_pretrain(ws: &Workspace, init: Option<&Path>, data: DataSelector, out_name: &str) -> Result<String> {
    let mut run = RunDir::create(ws, "pretrain")?;
    let role = match data {
        DataSelector::Original => LangRole::Original,
        DataSelector::Expansion => LangRole::Expansion,
    };
    let mut corpora = ws.corpora_by_role(role, "train")?;
    if corpora.is_empty() {
        return Err(PipelineError::MissingInput("no corpora with the requested role".to_string()));
    }
    if data == DataSelector::Original && pilot_tokens(&ws.cfg) > 0 {
        corpora.extend(ws.corpora_by_role(LangRole::Expansion, "pilot")?);
    }
    let (model, parent) = match init {
        Some(path) => {
            ws.require_checkpoint(path)?;
            let data = checkpoint::load(path)?;
            run.record_input("init", &data.hash);
            (data.model, Some(data.hash))
        }
        None => (Model::Dense(DenseModel::init(&ws.cfg.model, ws.cfg.seed)?), None),
    };
    let seed = stage_seed(ws.cfg.seed, &format!("pretrain:{out_name}"));
    let plan = plan_from(Stage::Pretrain, &ws.cfg.stages.pretrain, &ws.cfg.data, ws.cfg.model.lb_alpha as f64, seed);
    let mut stream = BatchStream::lm(corpora, plan.batch_size, plan.seq_len, seed)?;
    let hash = train_and_save(ws, &mut run, model, &plan, &mut stream, parent, out_name, "pretrain")?;
    run.finish()?;
    Ok(hash)
}

/// posttrain: supervised echo fine-tune of a dense checkpoint on
/// original-language payloads; manufactures the alignment delta's source.
pub fn cmd_posttrain(ws: &Workspace, init: &Path, out_name: &str) -> Result<String> {
    let mut run = RunDir::create(ws, "posttrain")?;
    ws.require_checkpoint(init)?;
    let data = checkpoint::load(init)?;
    run.record_input("init", &data.hash);
    if data.model.as_dense().is_none() {
        return Err(TrainError::StageMismatch { stage: "posttrain", want: "dense" }.into());
    }
    let originals = ws.corpora_by_role(LangRole::Original, "train")?;
    let payload_source = merge_docs(originals, "orig_payloads");
    let seed = stage_seed(ws.cfg.seed, "posttrain");
    let plan = plan_from(Stage::Posttrain, &ws.cfg.stages.posttrain, &ws.cfg.data, ws.cfg.model.lb_alpha as f64, seed);
    let echo = synth_posttrain_task(
        &payload_source,
        seed,
        SynthConfig {
            batch_size: plan.batch_size,
            seq_len: plan.seq_len,
            payload_min: ws.cfg.eval.payload_min,
            payload_max: ws.cfg.eval.payload_max,
        },
    )?;
    // Echo-only fine-tuning destroys the model's language ability; real
    // post-training mixes instruction data with plain text. 2:1 echo:LM.
    let lm = BatchStream::lm(
        ws.corpora_by_role(LangRole::Original, "train")?,
        plan.batch_size,
        plan.seq_len,
        seed ^ 0x5151,
    )?;
    let mut stream = BatchStream::mix(echo, lm, (2, 1))?;
    let hash = train_and_save(ws, &mut run, data.model, &plan, &mut stream, Some(data.hash.clone()), out_name, "posttrain")?;
    run.finish()?;
    Ok(hash)
}

/// upcycle: dense checkpoint -> MoE checkpoint with frozen originals.
pub fn cmd_upcycle(ws: &Workspace, input: &Path, out_name: &str) -> Result<String> {
    let mut run = RunDir::create(ws, "upcycle")?;
    ws.require_checkpoint(input)?;
    let data = checkpoint::load(input)?;
    run.record_input("input", &data.hash);
    let Some(dense) = data.model.as_dense() else {
        return Err(PipelineError::Usage("upcycle needs a dense checkpoint".to_string()));
    };
    let moe = upcycle(dense, ws.cfg.model.n_experts, ws.cfg.model.top_k)?;
    let provenance = Provenance { stage: "upcycle".to_string(), parent: Some(data.hash), seed: ws.cfg.seed };
    let out_path = ws.checkpoint_path(out_name);
    let hash = checkpoint::save(&Model::Moe(moe), &provenance, &out_path)?;
    run.record_output(out_name, &hash);
    run.finish()?;
    Ok(hash)
}

/// cpt: MoE continued pretraining on expansion-language data with the
/// original tensors frozen.
pub fn cmd_cpt(ws: &Workspace, input: &Path, out_name: &str) -> Result<String> {
    let mut run = RunDir::create(ws, "cpt")?;
    ws.require_checkpoint(input)?;
    let data = checkpoint::load(input)?;
    run.record_input("input", &data.hash);
    let corpora = ws.corpora_by_role(LangRole::Expansion, "train")?;
    if corpora.is_empty() {
        return Err(PipelineError::MissingInput("no expansion-role corpora".to_string()));
    }
    let seed = stage_seed(ws.cfg.seed, "cpt");
    let plan = plan_from(Stage::Cpt, &ws.cfg.stages.cpt, &ws.cfg.data, ws.cfg.model.lb_alpha as f64, seed);
    let mut stream = BatchStream::lm(corpora, plan.batch_size, plan.seq_len, seed)?;
    let hash = train_and_save(ws, &mut run, data.model, &plan, &mut stream, Some(data.hash.clone()), out_name, "cpt")?;
    run.finish()?;
    Ok(hash)
}

/// Dense-baseline CPT: same expansion data and plan as `cpt`, but training
/// every parameter of a dense checkpoint (the Dense-FT baselines).
fn dense_cpt(ws: &Workspace, run: &mut RunDir, init_hash: String, model: Model, out_name: &str) -> Result<String> {
    let corpora = ws.corpora_by_role(LangRole::Expansion, "train")?;
    let seed = stage_seed(ws.cfg.seed, "cpt");
    let mut plan = plan_from(Stage::Pretrain, &ws.cfg.stages.cpt, &ws.cfg.data, ws.cfg.model.lb_alpha as f64, seed);
    plan.stage = Stage::Pretrain;
    let mut stream = BatchStream::lm(corpora, plan.batch_size, plan.seq_len, seed)?;
    train_and_save(ws, run, model, &plan, &mut stream, Some(init_hash), out_name, &format!("dense-cpt-{out_name}"))
}

/// router-tune: router-only training on a 1:2 original:expansion replay mix.
pub fn cmd_router_tune(ws: &Workspace, input: &Path, out_name: &str) -> Result<String> {
    let mut run = RunDir::create(ws, "router-tune")?;
    ws.require_checkpoint(input)?;
    let data = checkpoint::load(input)?;
    run.record_input("input", &data.hash);
    let replay = merge_docs(ws.corpora_by_role(LangRole::Original, "replay")?, "orig_replay");
    let expansion = merge_docs(ws.corpora_by_role(LangRole::Expansion, "train")?, "expansion");
    let seed = stage_seed(ws.cfg.seed, "router_tune");
    let plan = plan_from(
        Stage::RouterTune,
        &ws.cfg.stages.router_tune,
        &ws.cfg.data,
        ws.cfg.model.lb_alpha as f64,
        seed,
    );
    let mut stream = make_replay_stream(replay, expansion, plan.replay_ratio, plan.batch_size, plan.seq_len, seed)?;
    let hash = train_and_save(ws, &mut run, data.model, &plan, &mut stream, Some(data.hash.clone()), out_name, "router_tune")?;
    run.finish()?;
    Ok(hash)
}

/// diff: delta checkpoint plus a JSON change report.
pub fn cmd_diff(ws: &Workspace, base: &Path, post: &Path, out_name: &str, report_name: &str) -> Result<String> {
    let mut run = RunDir::create(ws, "diff")?;
    ws.require_checkpoint(base)?;
    ws.require_checkpoint(post)?;
    let (delta, report) = checkpoint::diff(base, post)?;
    run.record_input("base", &report.base);
    run.record_input("post", &report.post);
    let provenance = Provenance { stage: "diff".to_string(), parent: Some(report.base.clone()), seed: ws.cfg.seed };
    let out_path = ws.checkpoint_path(out_name);
    let hash = checkpoint::save_delta(&delta, &provenance, &out_path)?;
    let report_path = ws.reports_dir().join(report_name);
    fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(io_err(&report_path))?;
    run.record_output(out_name, &hash);
    run.finish()?;
    Ok(hash)
}

fn write_merge_report(ws: &Workspace, name: &str, report: &MergeReport) -> Result<()> {
    let path = ws.reports_dir().join(name);
    fs::write(&path, serde_json::to_string_pretty(report).expect("report serializes")).map_err(io_err(&path))?;
    Ok(())
}

/// merge: delta (onto dense or MoE), avg (two dense), or moe_avg (MoE +
/// dense instruct). Emits the merge report JSON next to the checkpoint.
pub fn cmd_merge(
    ws: &Workspace,
    strategy: MergeStrategy,
    target: &Path,
    second: Option<&Path>,
    delta_path: Option<&Path>,
    lambda: f64,
    out_name: &str,
) -> Result<String> {
    let mut run = RunDir::create(ws, "merge")?;
    ws.require_checkpoint(target)?;
    let target_data = checkpoint::load(target)?;
    run.record_input("target", &target_data.hash);

    let (merged, report): (Model, MergeReport) = match strategy {
        MergeStrategy::Delta => {
            let dpath = delta_path
                .ok_or_else(|| PipelineError::Usage("--strategy delta needs --delta PATH".to_string()))?;
            ws.require_checkpoint(dpath)?;
            let (delta, _, dhash) = checkpoint::load_delta(dpath)?;
            run.record_input("delta", &dhash);
            match &target_data.model {
                Model::Dense(m) => {
                    let (out, report) = merge_delta_dense(m, &delta)?;
                    (Model::Dense(out), report)
                }
                Model::Moe(m) => {
                    let (out, report) = graft_delta_moe(m, &delta)?;
                    (Model::Moe(out), report)
                }
            }
        }
        MergeStrategy::Avg => {
            let spath = second
                .ok_or_else(|| PipelineError::Usage("--strategy avg needs two checkpoints".to_string()))?;
            ws.require_checkpoint(spath)?;
            let second_data = checkpoint::load(spath)?;
            run.record_input("second", &second_data.hash);
            let (Some(a), Some(b)) = (target_data.model.as_dense(), second_data.model.as_dense()) else {
                return Err(PipelineError::Usage("--strategy avg needs two dense checkpoints".to_string()));
            };
            let (out, report) = merge_avg_dense(a, b, lambda)?;
            (Model::Dense(out), report)
        }
        MergeStrategy::MoeAvg => {
            let spath = second
                .ok_or_else(|| PipelineError::Usage("--strategy moe_avg needs MOE and DENSE checkpoints".to_string()))?;
            ws.require_checkpoint(spath)?;
            let second_data = checkpoint::load(spath)?;
            run.record_input("second", &second_data.hash);
            let (Some(moe), Some(dense)) = (target_data.model.as_moe(), second_data.model.as_dense()) else {
                return Err(PipelineError::Usage(
                    "--strategy moe_avg needs an MoE target and a dense instruct checkpoint".to_string(),
                ));
            };
            let (out, report) = merge_avg_moe(moe, dense)?;
            (Model::Moe(out), report)
        }
    };
    let provenance = Provenance {
        stage: format!("merge:{}", report.strategy),
        parent: Some(target_data.hash),
        seed: ws.cfg.seed,
    };
    let out_path = ws.checkpoint_path(out_name);
    let hash = checkpoint::save(&merged, &provenance, &out_path)?;
    write_merge_report(ws, &format!("merge_{out_name}.json"), &report)?;
    run.record_output(out_name, &hash);
    run.finish()?;
    Ok(hash)
}

fn eval_payloads(ws: &Workspace) -> Result<Vec<Vec<u32>>> {
    let source = merge_docs(ws.corpora_by_role(LangRole::Original, "eval")?, "orig_eval");
    let mut sampler = PayloadSampler::new(
        &source,
        ws.cfg.eval.payload_min,
        ws.cfg.eval.payload_max,
        stage_seed(ws.cfg.seed, "echo-eval"),
    )?;
    Ok(sampler.take(ws.cfg.eval.echo_payloads))
}

/// eval: tradeoff report over the given checkpoints, written as JSON + CSV.
pub fn cmd_eval(ws: &Workspace, ckpts: &[PathBuf]) -> Result<Vec<TradeoffRow>> {
    let mut run = RunDir::create(ws, "eval")?;
    if ckpts.is_empty() {
        return Err(PipelineError::Usage("eval needs at least one checkpoint".to_string()));
    }
    let mut loaded = Vec::new();
    for path in ckpts {
        ws.require_checkpoint(path)?;
        let data = checkpoint::load(path)?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        run.record_input(&id, &data.hash);
        loaded.push((id, data));
    }
    let original = ws.corpora_by_role(LangRole::Original, "eval")?;
    let expanded = ws.corpora_by_role(LangRole::Expansion, "eval")?;
    let payloads = eval_payloads(ws)?;
    let entries: Vec<EvalEntry> = loaded
        .iter()
        .map(|(id, data)| EvalEntry { id: id.clone(), hash: data.hash.clone(), model: &data.model })
        .collect();
    let rows = tradeoff_report(&entries, &original, &expanded, &payloads, ws.cfg.data.batch_size, ws.cfg.data.seq_len)?;
    let json_path = ws.reports_dir().join("tradeoff.json");
    fs::write(&json_path, report_to_json(&rows)).map_err(io_err(&json_path))?;
    let csv_path = ws.reports_dir().join("tradeoff.csv");
    fs::write(&csv_path, report_to_csv(&rows)).map_err(io_err(&csv_path))?;
    run.finish()?;
    Ok(rows)
}

/// route-stats: expert-selection frequency CSV over the eval corpora.
pub fn cmd_route_stats(ws: &Workspace, ckpt: &Path) -> Result<RouterStats> {
    let mut run = RunDir::create(ws, "route-stats")?;
    ws.require_checkpoint(ckpt)?;
    let data = checkpoint::load(ckpt)?;
    run.record_input("input", &data.hash);
    let mut corpora = ws.corpora_by_role(LangRole::Original, "eval")?;
    corpora.extend(ws.corpora_by_role(LangRole::Expansion, "eval")?);
    let stats = route_frequencies(&data.model, &corpora, ws.cfg.data.batch_size, ws.cfg.data.seq_len)?;
    let path = ws.reports_dir().join("route_frequencies.csv");
    fs::write(&path, stats.to_csv()).map_err(io_err(&path))?;
    run.finish()?;
    Ok(stats)
}

/// Everything the full pipeline produced, for the acceptance suite.
pub struct PipelineOutcome {
    pub rows: Vec<TradeoffRow>,
    pub router_stats: RouterStats,
    pub hashes: BTreeMap<String, String>,
    pub elapsed_secs: f64,
}

impl PipelineOutcome {
    pub fn row(&self, id: &str) -> &TradeoffRow {
        self.rows
            .iter()
            .find(|r| r.model == id)
            .unwrap_or_else(|| panic!("pipeline row {id} missing"))
    }

    pub fn expanded_ppl(&self, id: &str) -> f64 {
        mean(self.row(id).expanded_perplexity.iter().map(|m| m.perplexity))
    }

    pub fn original_ppl(&self, id: &str) -> f64 {
        mean(self.row(id).original_perplexity.iter().map(|m| m.perplexity))
    }

    pub fn echo(&self, id: &str) -> f64 {
        self.row(id).echo_original
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// The full two-stage pipeline plus baselines from the same artifacts:
/// gen-corpus, pretrain, posttrain, diff, upcycle, cpt, delta graft,
/// router-tune, then Dense-FT-Avg / Dense-FT-Delta / MoE-CPT-Avg branches,
/// evaluation, and routing statistics.
pub fn cmd_pipeline(ws: &Workspace) -> Result<PipelineOutcome> {
    let started = Instant::now();
    let mut hashes = BTreeMap::new();

    ws.log("pipeline: generating corpora");
    cmd_gen_corpus(ws)?;

    ws.log("pipeline: pretraining base model");
    let base_hash = cmd_pretrain(ws, None, DataSelector::Original, "base")?;
    hashes.insert("base".to_string(), base_hash);
    let base_path = ws.checkpoint_path("base");

    ws.log("pipeline: post-training (echo task)");
    let post_hash = cmd_posttrain(ws, &base_path, "post")?;
    hashes.insert("post".to_string(), post_hash);
    let post_path = ws.checkpoint_path("post");

    ws.log("pipeline: computing parameter delta");
    let delta_hash = cmd_diff(ws, &base_path, &post_path, "delta", "diff_report.json")?;
    hashes.insert("delta".to_string(), delta_hash);
    let delta_path = ws.checkpoint_path("delta");

    ws.log("pipeline: upcycling base into MoE");
    let up_hash = cmd_upcycle(ws, &base_path, "moe_upcycled")?;
    hashes.insert("moe_upcycled".to_string(), up_hash);

    ws.log("pipeline: MoE continued pretraining (frozen anchor)");
    let cpt_hash = cmd_cpt(ws, &ws.checkpoint_path("moe_upcycled"), "moe_cpt")?;
    hashes.insert("moe_cpt".to_string(), cpt_hash);

    ws.log("pipeline: grafting delta onto the MoE");
    let graft_hash = cmd_merge(
        ws,
        MergeStrategy::Delta,
        &ws.checkpoint_path("moe_cpt"),
        None,
        Some(&delta_path),
        ws.cfg.merge.lambda,
        "moe_grafted",
    )?;
    hashes.insert("moe_grafted".to_string(), graft_hash);

    ws.log("pipeline: router tuning with replay");
    let tuned_hash = cmd_router_tune(ws, &ws.checkpoint_path("moe_grafted"), "moe_router_tuned")?;
    hashes.insert("moe_router_tuned".to_string(), tuned_hash);

    // Baselines share the same base/post/delta artifacts and CPT data.
    ws.log("pipeline: Dense-FT-Delta baseline (dense CPT of base + delta)");
    {
        let mut run = RunDir::create(ws, "baseline-dense-ft-delta")?;
        let base_data = checkpoint::load(&base_path)?;
        let h = dense_cpt(ws, &mut run, base_data.hash.clone(), base_data.model, "dense_cpt_base")?;
        hashes.insert("dense_cpt_base".to_string(), h);
        run.finish()?;
    }
    let h = cmd_merge(
        ws,
        MergeStrategy::Delta,
        &ws.checkpoint_path("dense_cpt_base"),
        None,
        Some(&delta_path),
        ws.cfg.merge.lambda,
        "dense_ft_delta",
    )?;
    hashes.insert("dense_ft_delta".to_string(), h);

    ws.log("pipeline: Dense-FT-Avg baseline (dense CPT of post, averaged with post)");
    {
        let mut run = RunDir::create(ws, "baseline-dense-ft-avg")?;
        let post_data = checkpoint::load(&post_path)?;
        let h = dense_cpt(ws, &mut run, post_data.hash.clone(), post_data.model, "dense_cpt_post")?;
        hashes.insert("dense_cpt_post".to_string(), h);
        run.finish()?;
    }
    let h = cmd_merge(
        ws,
        MergeStrategy::Avg,
        &ws.checkpoint_path("dense_cpt_post"),
        Some(&post_path),
        None,
        ws.cfg.merge.lambda,
        "dense_ft_avg",
    )?;
    hashes.insert("dense_ft_avg".to_string(), h);

    ws.log("pipeline: MoE-CPT-Avg baseline (upcycled post, CPT, averaged with post)");
    let h = cmd_upcycle(ws, &post_path, "moe_post_upcycled")?;
    hashes.insert("moe_post_upcycled".to_string(), h);
    let h = cmd_cpt(ws, &ws.checkpoint_path("moe_post_upcycled"), "moe_cpt_post")?;
    hashes.insert("moe_cpt_post".to_string(), h);
    let h = cmd_merge(
        ws,
        MergeStrategy::MoeAvg,
        &ws.checkpoint_path("moe_cpt_post"),
        Some(&post_path),
        None,
        ws.cfg.merge.lambda,
        "moe_cpt_avg",
    )?;
    hashes.insert("moe_cpt_avg".to_string(), h);

    ws.log("pipeline: evaluating all models");
    let eval_list: Vec<PathBuf> = [
        "base",
        "post",
        "moe_cpt",
        "moe_grafted",
        "moe_router_tuned",
        "dense_ft_delta",
        "dense_ft_avg",
        "moe_cpt_avg",
    ]
    .iter()
    .map(|n| ws.checkpoint_path(n))
    .collect();
    let rows = cmd_eval(ws, &eval_list)?;

    ws.log("pipeline: routing statistics");
    let router_stats = cmd_route_stats(ws, &ws.checkpoint_path("moe_router_tuned"))?;

    let elapsed_secs = started.elapsed().as_secs_f64();
    ws.log(&format!("pipeline: complete in {elapsed_secs:.0}s"));
    Ok(PipelineOutcome { rows, router_stats, hashes, elapsed_secs })
}
