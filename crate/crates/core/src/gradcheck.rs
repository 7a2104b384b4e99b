//! Central finite-difference verification of tape gradients.
//!
//! Runs in binary64 shadow mode: the caller converts its parameter store
//! with [`ParamStore::to_f64`] and supplies a loss closure built from the
//! same forward code the trainer uses.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tensor::{arg_err, KernelError, Result};

/// One evaluation of the loss under inspection.
///
/// `signature` fingerprints every discrete choice made during the forward
/// pass (top-k selections); perturbed evaluations whose signature differs
/// from the base run sit on a tie boundary and are skipped.
pub struct LossEval {
    pub loss: f64,
    pub grads: Option<ParamStore<f64>>,
    pub signature: u64,
}

pub struct GradCheckOptions {
    pub eps: f64,
    /// Upper bound on checked elements; everything is checked when the
    /// store is smaller.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-4, max_samples: 256, seed: 0 }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_tie_boundary: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares tape gradients against central finite differences over every
/// parameter element (or a seeded subsample of at least
/// `options.max_samples` when the store is large). Returns the max
/// relative error.
pub fn grad_check<F>(f: F, params: &ParamStore<f64>, options: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, bool) -> Result<LossEval>,
{
    if options.eps <= 0.0 {
        return Err(arg_err("grad_check", "eps must be positive"));
    }
    let base = f(params, true)?;
    if !base.loss.is_finite() {
        return Err(KernelError::NonFinite { op: "grad_check" });
    }
    let grads = base
        .grads
        .ok_or_else(|| arg_err("grad_check", "loss function did not return gradients"))?;

    // Flat index space over (name, element).
    let layout: Vec<(String, usize)> = params.iter().map(|(n, t)| (n.to_string(), t.numel())).collect();
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let picks: Vec<usize> = if total <= options.max_samples {
        (0..total).collect()
    } else {
        let mut p = sample(&mut rng, total, options.max_samples).into_vec();
        p.sort_unstable();
        p
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_tie_boundary: 0,
        worst: None,
    };

    for flat in picks {
        let (name, offset) = locate(&layout, flat);
        let eval_at = |delta: f64| -> Result<LossEval> {
            let mut perturbed = params.clone();
            let t = perturbed.get_mut(&name).expect("known name");
            t.data_mut()[offset] += delta;
            f(&perturbed, false)
        };
        let hi = eval_at(options.eps)?;
        let lo = eval_at(-options.eps)?;
        if hi.signature != base.signature || lo.signature != base.signature {
            report.skipped_tie_boundary += 1;
            continue;
        }
        let fd = (hi.loss - lo.loss) / (2.0 * options.eps);
        let an = grads
            .get(&name)
            .map(|g| g.data()[offset])
            .unwrap_or(0.0);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name.clone(), offset, fd, an));
        }
    }
    Ok(report)
}

fn locate(layout: &[(String, usize)], mut flat: usize) -> (String, usize) {
    for (name, n) in layout {
        if flat < *n {
            return (name.clone(), flat);
        }
        flat -= n;
    }
    unreachable!("flat index within total element count")
}

/// Convenience for closures with no discrete choices.
pub fn eval_with_grads(loss: f64, grads: Option<ParamStore<f64>>) -> LossEval {
    LossEval { loss, grads, signature: 0 }
}
