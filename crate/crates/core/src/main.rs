//! Command-line front end: one declarative config file, flag and
//! MOEGRAFT_* environment overrides (flags win), all outputs under the
//! workdir.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moegraft::config::{MergeStrategy, Overrides, RunConfig};
use moegraft::pipeline::{self, DataSelector, PipelineError, Workspace};

#[derive(Parser)]
#[command(name = "moegraft", about = "Sparse-upcycled MoE training with delta grafting, at desk scale")]
struct Cli {
    /// Declarative TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    workdir: Option<PathBuf>,

    /// Merge strategy: delta, avg, or moe_avg.
    #[arg(long, global = true)]
    strategy: Option<MergeStrategy>,

    /// Interpolation weight for avg merging.
    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Scales expansion-language training tokens (the 2x-data knob).
    #[arg(long, global = true)]
    token_multiplier: Option<f64>,

    /// Rayon pool size; 0 keeps the default.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) corpora and write token caches.
    GenCorpus,
    /// Dense NTP training; fresh init unless --init is given.
    Pretrain {
        #[arg(long)]
        init: Option<PathBuf>,
        /// Which corpora to train on: original or expansion.
        #[arg(long, default_value = "original")]
        data: DataSelector,
        #[arg(long, default_value = "base")]
        out: String,
    },
    /// Supervised echo fine-tune of a dense checkpoint.
    Posttrain {
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "post")]
        out: String,
    },
    /// Replicate a dense checkpoint's FFNs into an expert bank.
    Upcycle {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "moe_upcycled")]
        out: String,
    },
    /// MoE continued pretraining with the original weights frozen.
    Cpt {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "moe_cpt")]
        out: String,
    },
    /// Router-only replay tuning.
    RouterTune {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "moe_router_tuned")]
        out: String,
    },
    /// Subtract two dense checkpoints into a delta file plus a report.
    Diff {
        base: PathBuf,
        post: PathBuf,
        #[arg(long, default_value = "delta")]
        out: String,
        #[arg(long, default_value = "diff_report.json")]
        report: String,
    },
    /// Apply a merge strategy; see --strategy.
    Merge {
        /// Target checkpoint (dense or MoE depending on strategy).
        target: PathBuf,
        /// Second checkpoint for avg / moe_avg strategies.
        second: Option<PathBuf>,
        /// Delta file for the delta strategy.
        #[arg(long)]
        delta: Option<PathBuf>,
        #[arg(long, default_value = "merged")]
        out: String,
    },
    /// Perplexity + echo evaluation over one or more checkpoints.
    Eval {
        #[arg(required = true)]
        ckpts: Vec<PathBuf>,
    },
    /// Expert-selection frequency table for an MoE checkpoint.
    RouteStats { ckpt: PathBuf },
    /// The whole pipeline: corpora, training stages, merges, baselines,
    /// evaluation, and routing statistics.
    Pipeline,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let env_config = std::env::var("MOEGRAFT_CONFIG").ok().map(PathBuf::from);
    let mut cfg = match cli.config.clone().or(env_config) {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    let flags = Overrides {
        seed: cli.seed,
        workdir: cli.workdir.clone(),
        strategy: cli.strategy,
        lambda: cli.lambda,
        token_multiplier: cli.token_multiplier,
        threads: cli.threads,
    };
    cfg.apply(&flags.layered_over(Overrides::from_env()?));
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = resolve_config(&cli)?;
    if cfg.threads > 0 {
        // Results are bit-identical for any pool size; this only trades
        // latency. A pool may already exist when embedded, so ignore that.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let ws = Workspace::new(cfg)?;
    let ckpt = |name: &str, flag: &Option<PathBuf>| -> PathBuf {
        flag.clone().unwrap_or_else(|| ws.checkpoint_path(name))
    };
    match &cli.command {
        Command::GenCorpus => pipeline::cmd_gen_corpus(&ws)?,
        Command::Pretrain { init, data, out } => {
            let hash = pipeline::cmd_pretrain(&ws, init.as_deref(), *data, out)?;
            println!("{hash}  {}", ws.checkpoint_path(out).display());
        }
        Command::Posttrain { init, out } => {
            let init = ckpt("base", init);
            let hash = pipeline::cmd_posttrain(&ws, &init, out)?;
            println!("{hash}  {}", ws.checkpoint_path(out).display());
        }
        Command::Upcycle { input, out } => {
            let input = ckpt("base", input);
            let hash = pipeline::cmd_upcycle(&ws, &input, out)?;
            println!("{hash}  {}", ws.checkpoint_path(out).display());
        }
        Command::Cpt { input, out } => {
            let input = ckpt("moe_upcycled", input);
            let hash = pipeline::cmd_cpt(&ws, &input, out)?;
            println!("{hash}  {}", ws.checkpoint_path(out).display());
        }
        Command::RouterTune { input, out } => {
            let input = ckpt("moe_grafted", input);
            let hash = pipeline::cmd_router_tune(&ws, &input, out)?;
            println!("{hash}  {}", ws.checkpoint_path(out).display());
        }
        Command::Diff { base, post, out, report } => {
            let hash = pipeline::cmd_diff(&ws, base, post, out, report)?;
            println!("{hash}  {}", ws.checkpoint_path(out).display());
        }
        Command::Merge { target, second, delta, out } => {
            let hash = pipeline::cmd_merge(
                &ws,
                ws.cfg.merge.strategy,
                target,
                second.as_deref(),
                delta.as_deref(),
                ws.cfg.merge.lambda,
                out,
            )?;
            println!("{hash}  {}", ws.checkpoint_path(out).display());
        }
        Command::Eval { ckpts } => {
            let rows = pipeline::cmd_eval(&ws, ckpts)?;
            println!("{}", moegraft::analytics::report_to_csv(&rows));
        }
        Command::RouteStats { ckpt } => {
            let stats = pipeline::cmd_route_stats(&ws, ckpt)?;
            println!("{}", stats.to_csv());
        }
        Command::Pipeline => {
            let outcome = pipeline::cmd_pipeline(&ws)?;
            println!("{}", moegraft::analytics::report_to_csv(&outcome.rows));
            for (name, hash) in &outcome.hashes {
                println!("{hash}  {name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
