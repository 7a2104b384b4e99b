//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Criteria 6 and 7 share a single full-pipeline run on the default
//! configuration (about half an hour on two CPU cores).

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::time::Instant;

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use moegraft::checkpoint::{self, Provenance};
use moegraft::config::RunConfig;
use moegraft::data::{gen_language, Corpus, LanguageSpec, EOS};
use moegraft::gradcheck::{grad_check, GradCheckOptions, LossEval};
use moegraft::model::{DenseModel, Graph, Model, ModelConfig};
use moegraft::moe::{cpt_trainable, lb_loss, total_loss_graph, upcycle};
use moegraft::params::ParamStore;
use moegraft::pipeline::{cmd_pipeline, PipelineOutcome, Workspace};
use moegraft::surgery::{compute_delta, graft_delta_moe, merge_delta_dense};
use moegraft::tensor::Tensor;
use moegraft::trainer::{run_stage, BatchStream, Stage, TrainPlan};

fn desk_config() -> ModelConfig {
    RunConfig::default().model
}

fn pass(n: usize, name: &str, detail: String) {
    println!("ACCEPTANCE {n} ({name}): PASS — {detail}");
}

/// Criterion 1: init equivalence of the upcycled MoE, 100 random prompts,
/// max |logit diff| <= 1e-5, under 10 s.
#[test]
fn acceptance_1_init_equivalence() {
    let started = Instant::now();
    let cfg = desk_config();
    let dense = DenseModel::init(&cfg, 42).unwrap();
    let moe = upcycle(&dense, 4, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.random_range(2..=32usize);
        let prompt: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        let dl = dense.forward(&prompt).unwrap();
        let (ml, _) = moe.forward(&prompt).unwrap();
        worst = worst.max(dl.max_abs_diff(&ml));
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(worst <= 1e-5, "max |logits(upcycled) - logits(dense)| = {worst}");
    assert!(elapsed < 10.0, "took {elapsed:.1}s, budget 10s");
    pass(1, "init equivalence", format!("max diff {worst:.2e} over 100 prompts in {elapsed:.1}s"));
}

/// Criterion 2: after 200 CPT steps every frozen tensor is bit-identical
/// and every expansion-expert/router tensor differs, under 2 minutes.
#[test]
fn acceptance_2_freezing_contract() {
    let started = Instant::now();
    let cfg = desk_config();
    let dense = DenseModel::init(&cfg, 7).unwrap();
    let moe = upcycle(&dense, cfg.n_experts, cfg.top_k).unwrap();
    let before = moe.params.clone();
    let frozen = moe.frozen.clone();
    let corpus = gen_language(&LanguageSpec {
        tag: "exp".to_string(),
        seed: 5,
        n_tokens: 150_000,
        alphabet_lo: b'A',
        alphabet_hi: b'Z',
        temperature: 0.4,
    })
    .unwrap();
    let plan = TrainPlan {
        stage: Stage::Cpt,
        steps: Some(200),
        epochs: None,
        peak_lr: 1e-3,
        warmup_frac: 0.03,
        floor_frac: 0.1,
        weight_decay: 0.01,
        batch_size: 8,
        seq_len: 64,
        lb_alpha: 0.01,
        seed: 5,
        replay_ratio: (1, 2),
    };
    let mut stream = BatchStream::lm(vec![corpus], 8, 64, 5).unwrap();
    let result = run_stage(Model::Moe(moe), &plan, &mut stream, None, None).unwrap();
    let after = result.model.params();
    let mut frozen_checked = 0;
    let mut trainable_changed = 0;
    let mut trainable_total = 0;
    for (name, tensor) in after.iter() {
        let orig = before.get(name).unwrap();
        if frozen.contains(name) {
            assert!(tensor.bit_eq(orig), "frozen tensor {name} changed during CPT");
            frozen_checked += 1;
        } else {
            trainable_total += 1;
            if !tensor.bit_eq(orig) {
                trainable_changed += 1;
            }
        }
    }
    assert_eq!(
        trainable_changed, trainable_total,
        "every expansion-expert and router tensor must differ after 200 steps"
    );
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "took {elapsed:.1}s, budget 120s");
    pass(
        2,
        "freezing contract",
        format!("{frozen_checked} frozen tensors bit-identical, {trainable_changed} trainable tensors moved, {elapsed:.0}s"),
    );
}

/// Criterion 3: load-balance loss values (Eq. 6).
#[test]
fn acceptance_3_load_balance_values() {
    for n in [2usize, 4, 16] {
        let u = vec![1.0 / n as f64; n];
        assert_eq!(lb_loss(&u, &u, n).unwrap(), 1.0, "uniform case must be exactly 1.0");
    }
    let mut collapse = vec![0.0; 4];
    collapse[0] = 1.0;
    assert_eq!(lb_loss(&collapse, &collapse, 4).unwrap(), 4.0, "full collapse must be exactly N");
    let f = vec![0.5, 0.5, 0.0, 0.0];
    let p = vec![0.4, 0.4, 0.1, 0.1];
    let got = lb_loss(&f, &p, 4).unwrap();
    assert!((got - 1.6).abs() <= 1e-6, "hand case: {got}");
    pass(3, "load-balance loss values", format!("uniform=1, collapse=N, hand case={got}"));
}

/// Criterion 4: binary64 finite differences on the full MoE loss over the
/// trainable set, >= 200 elements off tie boundaries, max rel err < 1e-4,
/// under 5 minutes.
#[test]
fn acceptance_4_gradient_correctness() {
    let started = Instant::now();
    let cfg = ModelConfig {
        d_model: 12,
        ffn_dim: 16,
        n_layers: 2,
        n_heads: 3,
        vocab_size: 23,
        max_seq_len: 8,
        n_experts: 4,
        top_k: 2,
        lb_alpha: 0.01,
    };
    let dense = DenseModel::init(&cfg, 7).unwrap();
    let mut moe = upcycle(&dense, cfg.n_experts, cfg.top_k).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let names: Vec<String> = moe.params.names().map(str::to_string).collect();
    for name in names {
        if name.ends_with(".moe.router") {
            let shape = moe.params.get(&name).unwrap().shape().to_vec();
            moe.params.set(&name, Tensor::randn(&shape, 0.3, &mut rng)).unwrap();
        } else if name.contains(".moe.experts.") && !name.contains(".experts.0.") {
            let t = moe.params.get(&name).unwrap();
            let noise = Tensor::<f32>::randn(t.shape(), 0.02, &mut rng);
            let shape = t.shape().to_vec();
            let data = t.data().iter().zip(noise.data()).map(|(&a, &b)| a + b).collect();
            moe.params.set(&name, Tensor::new(&shape, data).unwrap()).unwrap();
        }
    }
    let (b, t) = (2usize, 6usize);
    let tokens: Vec<u32> = (0..b * t).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
    let mut mask = vec![1u8; b * t];
    for s in 0..b {
        mask[s * t] = 0;
    }
    let trainable = cpt_trainable(&moe);
    let full64 = moe.params.to_f64();
    let cfg2 = moe.cfg.clone();
    let trainable_store: ParamStore<f64> = full64
        .iter()
        .filter(|(n, _)| trainable.contains(*n))
        .map(|(n, tns)| (n.to_string(), tns.clone()))
        .collect();
    let f = |p: &ParamStore<f64>, need_grads: bool| {
        let mut merged = full64.clone();
        for (name, tns) in p.iter() {
            merged.set(name, tns.clone()).unwrap();
        }
        let mut g = if need_grads { Graph::new(&merged) } else { Graph::eval(&merged) };
        let out = total_loss_graph(&mut g, &cfg2, &tokens, &mask, b, t, 0.01)?;
        let loss_v = g.tape.value(out.total).item();
        let mut h = DefaultHasher::new();
        out.forward.selections.hash(&mut h);
        let grads = if need_grads { Some(g.grads(out.total)?) } else { None };
        Ok(LossEval { loss: loss_v, grads, signature: h.finish() })
    };
    let report = grad_check(
        f,
        &trainable_store,
        &GradCheckOptions { eps: 1e-4, max_samples: 260, seed: 0 },
    )
    .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert!(report.checked >= 200, "only {} elements checked", report.checked);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(elapsed < 300.0, "took {elapsed:.1}s, budget 300s");
    pass(
        4,
        "gradient correctness",
        format!(
            "max rel err {:.2e} over {} elements ({} tie-boundary skips), {elapsed:.0}s",
            report.max_rel_error, report.checked, report.skipped_tie_boundary
        ),
    );
}

/// Criterion 5: merge identities (Eq. 8-9, delta reconstruction).
#[test]
fn acceptance_5_merge_identities() {
    let dir = TempDir::new().unwrap();
    let cfg = ModelConfig {
        d_model: 32,
        ffn_dim: 48,
        n_layers: 2,
        n_heads: 4,
        vocab_size: 272,
        max_seq_len: 64,
        n_experts: 4,
        top_k: 2,
        lb_alpha: 0.01,
    };
    let base = DenseModel::init(&cfg, 3).unwrap();

    // Manufacture a genuine post model with a short echo fine-tune, so the
    // delta is a real training delta rather than synthetic noise.
    let corpus = gen_language(&LanguageSpec {
        tag: "orig".to_string(),
        seed: 31,
        n_tokens: 50_000,
        alphabet_lo: b'a',
        alphabet_hi: b'z',
        temperature: 0.4,
    })
    .unwrap();
    let mut stream = moegraft::trainer::synth_posttrain_task(
        &corpus,
        9,
        moegraft::trainer::SynthConfig { batch_size: 16, seq_len: 32, payload_min: 1, payload_max: 8 },
    )
    .unwrap();
    let plan = TrainPlan {
        stage: Stage::Posttrain,
        steps: Some(60),
        epochs: None,
        peak_lr: 1e-3,
        warmup_frac: 0.03,
        floor_frac: 0.1,
        weight_decay: 0.01,
        batch_size: 16,
        seq_len: 32,
        lb_alpha: 0.01,
        seed: 9,
        replay_ratio: (1, 2),
    };
    let result = run_stage(Model::Dense(base.clone()), &plan, &mut stream, None, None).unwrap();
    let Model::Dense(post) = result.model else { unreachable!() };

    // (a) zero-delta graft is bit-identical.
    let moe = upcycle(&base, 4, 2).unwrap();
    let zero = compute_delta(&base, &base, "b", "b").unwrap();
    let (same, _) = graft_delta_moe(&moe, &zero).unwrap();
    assert!(same.params.bit_eq(&moe.params), "(a) zero-delta graft must be bit-identical");

    // (b) graft onto a fresh upcycle reproduces the post forward <= 1e-5.
    let delta = compute_delta(&base, &post, "base", "post").unwrap();
    let (grafted, _) = graft_delta_moe(&moe, &delta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_b = 0.0f64;
    for _ in 0..20 {
        let len = rng.random_range(2..=24usize);
        let prompt: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        let dl = post.forward(&prompt).unwrap();
        let (ml, _) = grafted.forward(&prompt).unwrap();
        worst_b = worst_b.max(dl.max_abs_diff(&ml));
    }
    assert!(worst_b <= 1e-5, "(b) grafted forward deviates by {worst_b}");

    // (c) diff -> merge_delta_dense reconstructs the post checkpoint
    // hash-identically, through actual files.
    let prov = |stage: &str| Provenance { stage: stage.to_string(), parent: None, seed: 0 };
    let base_path = dir.path().join("base.ckpt");
    let post_path = dir.path().join("post.ckpt");
    checkpoint::save(&Model::Dense(base.clone()), &prov("pretrain"), &base_path).unwrap();
    let post_hash = checkpoint::save(&Model::Dense(post.clone()), &prov("posttrain"), &post_path).unwrap();
    let (file_delta, _) = checkpoint::diff(&base_path, &post_path).unwrap();
    let delta_path = dir.path().join("delta.ckpt");
    checkpoint::save_delta(&file_delta, &prov("diff"), &delta_path).unwrap();
    let (loaded_delta, _, _) = checkpoint::load_delta(&delta_path).unwrap();
    let (rebuilt, _) = merge_delta_dense(&base, &loaded_delta).unwrap();
    let rebuilt_path = dir.path().join("rebuilt.ckpt");
    let rebuilt_hash = checkpoint::save(&Model::Dense(rebuilt), &prov("merge"), &rebuilt_path).unwrap();
    assert_eq!(rebuilt_hash, post_hash, "(c) reconstruction must be hash-identical");

    // (d) upcycle/graft commutation within 1e-6 per element.
    let (merged_dense, _) = merge_delta_dense(&base, &delta).unwrap();
    let a = upcycle(&merged_dense, 4, 2).unwrap();
    let (b_model, _) = graft_delta_moe(&upcycle(&base, 4, 2).unwrap(), &delta).unwrap();
    let mut worst_d = 0.0f64;
    for (name, ta) in a.params.iter() {
        worst_d = worst_d.max(ta.max_abs_diff(b_model.params.get(name).unwrap()));
    }
    assert!(worst_d <= 1e-6, "(d) commutation deviates by {worst_d}");
    pass(
        5,
        "merge identities",
        format!("zero-graft exact, graft fwd diff {worst_b:.2e}, reconstruction hash equal, commutation diff {worst_d:.2e}"),
    );
}

/// One full default-config pipeline shared by criteria 6 and 7.
static PIPELINE: Lazy<(TempDir, PipelineOutcome)> = Lazy::new(|| {
    let dir = TempDir::new().expect("tempdir");
    let mut cfg = RunConfig::default();
    cfg.paths.workdir = dir.path().join("work");
    let ws = Workspace::new(cfg).expect("valid default config");
    let outcome = cmd_pipeline(&ws).expect("pipeline completes");
    (dir, outcome)
});

/// Criterion 6: directional reproduction of the trade-off on the default
/// desk-scale configuration.
#[test]
fn acceptance_6_desk_scale_tradeoff() {
    let (_, outcome) = &*PIPELINE;
    let deltamoe = "moe_router_tuned";

    let exp_dm = outcome.expanded_ppl(deltamoe);
    let exp_cpt = outcome.expanded_ppl("moe_cpt");
    let ratio = exp_dm / exp_cpt;
    assert!(
        ratio <= 1.10,
        "(i) grafting must not destroy new knowledge: exp ppl {exp_dm:.2f} vs CPT {exp_cpt:.2f} (ratio {ratio:.3})"
    );

    let orig_post = outcome.original_ppl("post");
    let retention_dm = outcome.original_ppl(deltamoe) - orig_post;
    let retention_delta = outcome.original_ppl("dense_ft_delta") - orig_post;
    assert!(
        retention_dm < retention_delta,
        "(ii) retention: increase {retention_dm:.2f} must be below Dense-FT-Delta's {retention_delta:.2f}"
    );

    let exp_avg = outcome.expanded_ppl("dense_ft_avg");
    let exp_moe_avg = outcome.expanded_ppl("moe_cpt_avg");
    assert!(
        exp_dm < exp_avg && exp_dm < exp_moe_avg,
        "(iii) dilution: exp ppl {exp_dm:.2f} must beat Dense-FT-Avg {exp_avg:.2f} and MoE-CPT-Avg {exp_moe_avg:.2f}"
    );

    let echo_gain = outcome.echo(deltamoe) - outcome.echo("moe_cpt");
    assert!(
        echo_gain >= 0.3,
        "(iv) alignment transfer: echo gain {echo_gain:.2f} must be >= 0.3 (grafted {:.2f}, ungrafted {:.2f})",
        outcome.echo(deltamoe),
        outcome.echo("moe_cpt")
    );

    assert!(
        outcome.elapsed_secs <= 45.0 * 60.0,
        "pipeline took {:.0}s, budget 45 minutes",
        outcome.elapsed_secs
    );
    pass(
        6,
        "desk-scale trade-off",
        format!(
            "(i) ratio {ratio:.3} <= 1.10; (ii) {retention_dm:.2f} < {retention_delta:.2f}; (iii) {exp_dm:.2f} < min({exp_avg:.2f}, {exp_moe_avg:.2f}); (iv) echo gain {echo_gain:.2f} >= 0.3; {:.0}s",
            outcome.elapsed_secs
        ),
    );
}

/// Criterion 7: routing specialization after router tuning.
#[test]
fn acceptance_7_routing_specialization() {
    let (_, outcome) = &*PIPELINE;
    let stats = &outcome.router_stats;
    assert!(stats.conservation_holds(), "RouterStats count conservation must hold exactly");

    let orig_tags: Vec<&String> = stats.counts.keys().filter(|t| t.starts_with("orig")).collect();
    let exp_tags: Vec<&String> = stats.counts.keys().filter(|t| t.starts_with("exp")).collect();
    assert!(!orig_tags.is_empty() && !exp_tags.is_empty());
    let mut majority = 0;
    let mut detail = String::new();
    for layer in 0..stats.n_layers {
        let orig_freq: f64 = orig_tags.iter().map(|t| stats.frequency(layer, 0, t)).sum::<f64>() / orig_tags.len() as f64;
        let exp_freq: f64 = exp_tags.iter().map(|t| stats.frequency(layer, 0, t)).sum::<f64>() / exp_tags.len() as f64;
        if orig_freq > exp_freq {
            majority += 1;
        }
        detail.push_str(&format!("L{layer}: orig {orig_freq:.3} vs exp {exp_freq:.3}; "));
    }
    assert!(
        majority * 2 > stats.n_layers,
        "frozen expert must prefer original tokens at a majority of layers ({majority}/{}): {detail}",
        stats.n_layers
    );
    pass(7, "routing specialization", format!("{majority}/{} layers; {detail}", stats.n_layers));
}

/// Criterion 8: persistence fuzzing — 1000 bit-exact roundtrips and >= 20
/// malformed-manifest corruption patterns, all structured errors.
#[test]
fn acceptance_8_persistence_fuzz() {
    let dir = TempDir::new().unwrap();

    // Part 1: 1000-iteration save/load roundtrip with bit-exactness over
    // randomized small configs, kinds, and seeds.
    let mut rng = ChaCha8Rng::seed_from_u64(888);
    let path = dir.path().join("fuzz.ckpt");
    for i in 0..1000u64 {
        let heads = [1usize, 2, 4][rng.random_range(0..3)];
        let cfg = ModelConfig {
            d_model: heads * rng.random_range(2..5usize),
            ffn_dim: rng.random_range(4..10usize),
            n_layers: rng.random_range(1..3usize),
            n_heads: heads,
            vocab_size: rng.random_range(8..40usize),
            max_seq_len: rng.random_range(4..12usize),
            n_experts: rng.random_range(2..5usize),
            top_k: 1,
            lb_alpha: 0.01,
        };
        let dense = DenseModel::init(&cfg, i).unwrap();
        let model = if i % 3 == 0 {
            Model::Moe(upcycle(&dense, cfg.n_experts, cfg.top_k).unwrap())
        } else {
            Model::Dense(dense)
        };
        let prov = Provenance { stage: "fuzz".to_string(), parent: None, seed: i };
        let h1 = checkpoint::save(&model, &prov, &path).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        assert_eq!(loaded.hash, h1, "iteration {i}: hash mismatch");
        assert!(loaded.model.params().bit_eq(model.params()), "iteration {i}: payload not bit-exact");
        assert_eq!(loaded.model.frozen(), model.frozen(), "iteration {i}: frozen set changed");
    }

    // Part 2: malformed files must yield structured errors, never panics.
    let cfg = desk_config();
    let model = Model::Dense(DenseModel::init(&cfg, 1).unwrap());
    let good_path = dir.path().join("good.ckpt");
    checkpoint::save(&model, &Provenance { stage: "x".to_string(), parent: None, seed: 0 }, &good_path).unwrap();
    let good = fs::read(&good_path).unwrap();
    let mlen = u64::from_le_bytes(good[..8].try_into().unwrap()) as usize;
    let manifest_json: serde_json::Value = serde_json::from_slice(&good[8..8 + mlen]).unwrap();
    let payload = good[8 + mlen..].to_vec();

    let rebuild = |manifest: &serde_json::Value, payload: &[u8]| -> Vec<u8> {
        let mjson = serde_json::to_vec(manifest).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&mjson);
        out.extend_from_slice(payload);
        out
    };

    let mut corruptions: Vec<(&str, Vec<u8>)> = Vec::new();
    corruptions.push(("empty file", Vec::new()));
    corruptions.push(("four bytes", vec![1, 2, 3, 4]));
    corruptions.push(("manifest length beyond file", {
        let mut b = good.clone();
        b[..8].copy_from_slice(&(u64::MAX).to_le_bytes());
        b
    }));
    corruptions.push(("manifest not json", {
        let mut b = good.clone();
        b[8] = b'~';
        b
    }));
    corruptions.push(("truncated payload", good[..good.len() - 13].to_vec()));
    corruptions.push(("payload with trailing junk", {
        let mut b = good.clone();
        b.extend_from_slice(&[0u8; 24]);
        b
    }));
    let mutate = |f: &dyn Fn(&mut serde_json::Value)| -> Vec<u8> {
        let mut m = manifest_json.clone();
        f(&mut m);
        rebuild(&m, &payload)
    };
    corruptions.push(("unknown format version", mutate(&|m| m["format_version"] = 99.into())));
    corruptions.push(("unknown model kind", mutate(&|m| m["model_kind"] = "sparse".into())));
    corruptions.push(("unknown manifest field", mutate(&|m| m["extra_field"] = 1.into())));
    corruptions.push(("duplicate tensor name", mutate(&|m| {
        let name = m["tensors"][0]["name"].clone();
        m["tensors"][1]["name"] = name;
    })));
    corruptions.push(("overlapping offsets", mutate(&|m| m["tensors"][1]["byte_offset"] = 4.into())));
    corruptions.push(("gap between tensors", mutate(&|m| {
        let v = m["tensors"][1]["byte_offset"].as_u64().unwrap();
        m["tensors"][1]["byte_offset"] = (v + 8).into();
    })));
    corruptions.push(("byte length vs shape", mutate(&|m| {
        let v = m["tensors"][0]["byte_length"].as_u64().unwrap();
        m["tensors"][0]["byte_length"] = (v - 4).into();
    })));
    corruptions.push(("rank four shape", mutate(&|m| m["tensors"][0]["shape"] = serde_json::json!([1, 1, 1, 1]))));
    corruptions.push(("zero dimension", mutate(&|m| m["tensors"][0]["shape"] = serde_json::json!([0, 4]))));
    corruptions.push(("unknown dtype", mutate(&|m| m["tensors"][0]["dtype"] = "f16".into())));
    corruptions.push(("dtype kind mismatch", mutate(&|m| {
        m["tensors"][0]["dtype"] = "f64".into();
    })));
    corruptions.push(("frozen name without tensor", mutate(&|m| m["frozen"] = serde_json::json!(["ghost"]))));
    corruptions.push(("frozen tensors on dense kind", mutate(&|m| {
        m["frozen"] = serde_json::json!(["embed.tok"]);
    })));
    corruptions.push(("renamed tensor breaks name set", mutate(&|m| m["tensors"][0]["name"] = "mystery".into())));
    corruptions.push(("shape contradicts config", mutate(&|m| {
        m["tensors"][0]["shape"] = serde_json::json!([1, 4]);
        m["tensors"][0]["byte_length"] = 16.into();
    })));
    corruptions.push(("invalid config", mutate(&|m| m["config"]["top_k"] = 99.into())));
    corruptions.push(("empty tensor table", mutate(&|m| {
        m["tensors"] = serde_json::json!([]);
    })));
    corruptions.push(("non-finite payload", {
        let mut p = payload.clone();
        p[0..4].copy_from_slice(&f32::NAN.to_le_bytes());
        rebuild(&manifest_json, &p)
    }));
    corruptions.push(("negative offset type", mutate(&|m| m["tensors"][0]["byte_offset"] = (-1).into())));

    assert!(corruptions.len() >= 20, "need at least 20 corruption patterns");
    let fuzz_path = dir.path().join("corrupt.ckpt");
    for (name, bytes) in &corruptions {
        fs::write(&fuzz_path, bytes).unwrap();
        match checkpoint::load(&fuzz_path) {
            Err(_) => {}
            Ok(_) => {
                // The only corruption allowed to load is none of these.
                panic!("corruption {name:?} was accepted by load");
            }
        }
    }
    pass(
        8,
        "persistence",
        format!("1000 bit-exact roundtrips; {} corruption patterns all rejected with structured errors", corruptions.len()),
    );
}
