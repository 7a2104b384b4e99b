//! Scratch harness: scaled-down pipeline for wiring checks and tuning.

use moegraft::config::RunConfig;
use moegraft::pipeline::{cmd_pipeline, Workspace};

fn main() {
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let workdir = std::env::args().nth(2).unwrap_or_else(|| "/tmp/moegraft-probe".to_string());
    let mut cfg = RunConfig::default();
    for lang in &mut cfg.data.languages {
        lang.n_tokens = ((lang.n_tokens as f64 * scale) as usize).max(2000);
    }
    cfg.eval.eval_tokens = ((cfg.eval.eval_tokens as f64 * scale.max(0.2)) as usize).max(4000);
    cfg.eval.replay_tokens = ((cfg.eval.replay_tokens as f64 * scale.max(0.2)) as usize).max(4000);
    cfg.eval.echo_payloads = 100;
    cfg.paths.workdir = workdir.into();
    let _ = std::fs::remove_dir_all(&cfg.paths.workdir);
    let ws = Workspace::new(cfg).unwrap();
    let outcome = cmd_pipeline(&ws).unwrap();
    println!("\n== metrics (exp_ppl / orig_ppl / echo) ==");
    for id in [
        "base",
        "post",
        "moe_cpt",
        "moe_grafted",
        "moe_router_tuned",
        "dense_ft_delta",
        "dense_ft_avg",
        "moe_cpt_avg",
    ] {
        println!(
            "{id:18} exp {:9.3}  orig {:9.3}  echo {:.3}",
            outcome.expanded_ppl(id),
            outcome.original_ppl(id),
            outcome.echo(id)
        );
    }
    println!("\n== routing: frozen expert frequency per layer ==");
    let stats = &outcome.router_stats;
    for layer in 0..stats.n_layers {
        let mut line = format!("layer {layer}:");
        for lang in stats.counts.keys() {
            line.push_str(&format!("  {lang}={:.3}", stats.frequency(layer, 0, lang)));
        }
        println!("{line}");
    }
    println!("\nelapsed: {:.1}s", outcome.elapsed_secs);
}
