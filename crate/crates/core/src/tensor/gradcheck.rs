use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, Params, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many entries of each parameter tensor. `None` checks all.
    pub max_entries_per_param: Option<usize>,
    /// Seeds the entry subsample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Max over all trainable entries of `|analytic - numeric| / max(1, |numeric|)`
/// with a central difference of step `h`.
pub fn grad_check<F>(f: F, params: &Params, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let opts = GradCheckOptions {
        h,
        ..Default::default()
    };
    Ok(grad_check_with(f, params, &opts)?.max_rel_error)
}

pub fn grad_check_with<F>(f: F, params: &Params, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let analytic = tape.backward(loss)?.for_params(params);

    let eval = |p: &Params| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let loss = f(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (name, grad) in &analytic {
        let n = grad.len();
        let indices: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + opts.h;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - opts.h;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_param = Some(name.clone());
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
