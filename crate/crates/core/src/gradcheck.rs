//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{evaluate, evaluate_with_gradients, ParameterStore};

/// Above this many coordinates a seeded random subsample is checked.
pub const MAX_CHECKED_COORDINATES: usize = 10_000;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
}

/// Worst relative error between reverse-mode gradients and central
/// differences `(f(p+ε) − f(p−ε)) / 2ε`, using the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(objective: &F, store: &ParameterStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    Ok(gradient_check_report(objective, store, eps, 0)?.max_rel_error)
}

pub fn gradient_check_report<F>(
    objective: &F,
    store: &ParameterStore,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut work = store.clone();
    evaluate_with_gradients(objective, &mut work)?;
    let analytic_store = work.clone();

    let coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let selected: Vec<&(String, usize)> = if coords.len() > MAX_CHECKED_COORDINATES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = index::sample(&mut rng, coords.len(), MAX_CHECKED_COORDINATES).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| &coords[i]).collect()
    } else {
        coords.iter().collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: selected.len(),
    };
    for (name, i) in selected {
        let original = work.value(name).unwrap().data()[*i];
        work.value_mut(name).unwrap().data_mut()[*i] = original + eps;
        let plus = evaluate(objective, &work)?;
        work.value_mut(name).unwrap().data_mut()[*i] = original - eps;
        let minus = evaluate(objective, &work)?;
        work.value_mut(name).unwrap().data_mut()[*i] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = analytic_store.grad(name).unwrap().data()[*i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name.clone(), *i));
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
