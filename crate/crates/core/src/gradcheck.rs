//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::optim::ParamStore;
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients of `loss_fn` against central differences on
/// `n_coords` coordinates drawn from the trainable parameters.
///
/// Relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &ParamStore,
    epsilon: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let (l0, grads) = loss_fn(params)?;
    let (l1, _) = loss_fn(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::NonDeterministic {
            first: l0,
            second: l1,
        });
    }

    let coords: Vec<(String, usize)> = params
        .iter()
        .filter(|(n, _)| !params.is_frozen(n))
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.to_string(), i)))
        .collect();
    let mut r = rng::keyed(seed, &[rng::domain::GRADCHECK]);
    let k = n_coords.min(coords.len());
    let picked = sample(&mut r, coords.len(), k);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for idx in picked.iter() {
        let (name, i) = &coords[idx];
        let analytic = grads.param(name).map(|g| g.data()[*i]).unwrap_or(0.0);
        let mut plus = params.clone();
        plus.get_mut(name).unwrap().data_mut()[*i] += epsilon;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().data_mut()[*i] -= epsilon;
        let numeric = (loss_fn(&plus)?.0 - loss_fn(&minus)?.0) / (2.0 * epsilon);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name.clone(), *i));
        }
        report.checked += 1;
    }
    Ok(report)
}
