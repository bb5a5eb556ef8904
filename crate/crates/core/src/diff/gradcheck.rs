//! Finite-difference gradient checking.
//!
//! This is the oracle for every backward rule in the crate: build a scalar
//! loss from named parameters, run one reverse sweep, then probe random
//! coordinates with central differences and compare.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Tensor, Var};

/// Relative tolerance for analytic-vs-numeric agreement.
pub const DEFAULT_REL_TOL: f64 = 1e-3;
/// Absolute floor below which disagreement is ignored.
pub const DEFAULT_ABS_TOL: f64 = 1e-6;

const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of coordinates probed.
    pub checked: usize,
    /// Largest relative error seen (over `abs_tol`-significant coordinates).
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Check `n_probes` random parameter coordinates of the scalar function built
/// by `f` against central finite differences.
///
/// `f` is called with a fresh tape and one leaf per entry of `params` (same
/// names) and must return a `[1, 1]` loss. The same closure is reused for the
/// analytic sweep and every FD evaluation, so the two sides cannot drift
/// apart. Probes are drawn deterministically from `seed`.
pub fn check_gradients<F>(
    params: &BTreeMap<String, Tensor>,
    f: F,
    n_probes: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Var,
{
    let build = |p: &BTreeMap<String, Tensor>| -> (Tape, BTreeMap<String, Var>, Var) {
        let mut tape = Tape::new();
        let vars: BTreeMap<String, Var> = p
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect();
        let loss = f(&mut tape, &vars);
        assert_eq!(tape.value(loss).dim(), (1, 1), "gradcheck loss must be scalar");
        (tape, vars, loss)
    };

    let (mut tape, vars, loss) = build(params);
    tape.backward(loss).expect("gradcheck backward");
    let analytic: BTreeMap<String, Option<Tensor>> = vars
        .iter()
        .map(|(name, &v)| (name.clone(), tape.grad(v).cloned()))
        .collect();

    let names: Vec<&String> = params.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut max_rel_err: f64 = 0.0;

    for _ in 0..n_probes {
        let name = names[rng.gen_range(0..names.len())];
        let t = &params[name.as_str()];
        let (rows, cols) = t.dim();
        let r = rng.gen_range(0..rows);
        let c = rng.gen_range(0..cols);

        let eval = |delta: f64| -> f64 {
            let mut perturbed = params.clone();
            perturbed.get_mut(name.as_str()).unwrap()[(r, c)] += delta;
            let (tape, _, loss) = build(&perturbed);
            tape.value(loss)[(0, 0)]
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        let a = analytic[name.as_str()]
            .as_ref()
            .map(|g| g[(r, c)])
            .unwrap_or(0.0);

        let err = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        if err > DEFAULT_ABS_TOL {
            max_rel_err = max_rel_err.max(err / scale.max(1e-300));
        }
        if err > DEFAULT_ABS_TOL + DEFAULT_REL_TOL * scale {
            failures.push(GradCheckFailure {
                param: name.to_string(),
                row: r,
                col: c,
                analytic: a,
                numeric,
            });
        }
    }

    GradCheckReport {
        checked: n_probes,
        max_rel_err,
        failures,
    }
}
