//! Central-difference gradient checking.
//!
//! The check never looks at how a gradient was produced: it perturbs one
//! parameter entry at a time, re-runs the forward closure on a fresh tape,
//! and compares the slope against what [`Tape::backward`] reported.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries checked per tensor; `None` checks every entry.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
    /// Absolute disagreement below this counts as a match. Keeps exactly-zero
    /// gradients from failing on finite-difference roundoff.
    pub abs_tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_tensor: None,
            seed: 0,
            abs_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// `|a − fd| / (|a| + |fd| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compares backprop gradients of every parameter in `store` against
/// central differences of `loss`.
pub fn check_gradients<F>(store: &ParamStore<f64>, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'a> Fn(Ctx<'a, f64>) -> Result<Var<'a, f64>>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let out = loss(Ctx::new(&tape, s))?;
        out.value().item()
    };

    let tape = Tape::new();
    // bind every parameter so unused ones report a zero gradient
    let ctx = Ctx::new(&tape, store);
    for name in store.names() {
        ctx.p(name)?;
    }
    let out = loss(ctx)?;
    tape.backward(out)?;
    let grads = tape.param_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let numel = store.tensor(&name)?.numel();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(k) if k < numel => {
                let mut v = sample(&mut rng, numel, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        for i in entries {
            let original = store.tensor(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = original + opts.step;
            let plus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = original - opts.step;
            let minus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at {name}[{i}]")));
            }
            let err = if (analytic - numeric).abs() <= opts.abs_tol {
                0.0
            } else {
                relative_error(analytic, numeric)
            };
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{i}]: analytic {analytic:e} vs numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}
