//! Scratch: how many steps until the Markov structure is learned?

use moegraft::analytics::perplexity;
use moegraft::data::{gen_language, LanguageSpec};
use moegraft::model::{DenseModel, Model};
use moegraft::trainer::*;

fn main() {
    let orig = gen_language(&LanguageSpec { tag: "o".into(), seed: 101, n_tokens: 2_000_000, alphabet_lo: b'a', alphabet_hi: b'z', temperature: 0.4 }).unwrap();
    let orig_eval = gen_language(&LanguageSpec { tag: "o".into(), seed: 102, n_tokens: 33_000, alphabet_lo: b'a', alphabet_hi: b'z', temperature: 0.4 }).unwrap();
    let cfg = moegraft::config::RunConfig::default().model;
    for lr in [1e-3f64, 3e-3] {
        for steps in [500usize, 1500] {
            let model = Model::Dense(DenseModel::init(&cfg, 7).unwrap());
            let mut stream = BatchStream::lm(vec![orig.clone()], 32, 128, 5).unwrap();
            let plan = TrainPlan { stage: Stage::Pretrain, steps: Some(steps), epochs: None, peak_lr: lr,
                warmup_frac: 0.03, floor_frac: 0.1, weight_decay: 0.01, batch_size: 32, seq_len: 128,
                lb_alpha: 0.01, seed: 5, replay_ratio: (1, 2) };
            let t0 = std::time::Instant::now();
            let out = run_stage(model, &plan, &mut stream, None, None).unwrap();
            let ppl = perplexity(&out.model, &orig_eval, 32, 128).unwrap();
            let r: Vec<f64> = out.log.records.iter().map(|x| x.l_ntp).collect();
            println!("lr {lr:.0e} steps {steps:4}: eval ppl {ppl:7.3}  (loss@100 {:.3}, @300 {:.3}, final {:.3})  {:.0}s",
                r[100.min(r.len()-1)], r[300.min(r.len()-1)], r.last().unwrap(), t0.elapsed().as_secs_f64());
        }
    }
}
