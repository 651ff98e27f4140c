//! Central finite-difference verification of backward passes.

use super::graph::{Graph, NodeId};
use super::params::ParameterStore;
use crate::error::{Error, Result};

/// Denominator floor for relative errors, per unit of loss magnitude, so
/// that gradients which are zero up to rounding do not blow the ratio up.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter entry and element index of the worst mismatch.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at `worst`.
    pub worst_values: (f64, f64),
    /// Number of scalar parameters compared.
    pub checked: usize,
    /// Trainable entries the loss cannot reach (every path passes a gradient
    /// stop). Their analytic gradient is exactly zero and they are skipped.
    pub blocked: Vec<String>,
}

/// `|a - n| / max(|a|, |n|, floor)` where the floor grows with the loss
/// value, which keeps the ratio unchanged when the loss is rescaled.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = REL_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(store: &ParameterStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let loss = build(&mut g)?;
    Ok(g.scalar(loss))
}

/// Compares the analytic gradient of the scalar built by `build` against
/// central differences for every trainable parameter the loss reaches.
/// `build` must be deterministic (fixed dropout seed, no state).
pub fn grad_check<F>(store: &mut ParameterStore, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let (loss_value, grads) = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        (g.scalar(loss), g.backward(loss)?)
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, worst_values: (0.0, 0.0), checked: 0, blocked: Vec::new() };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.entry(id).trainable {
            continue;
        }
        let Some(analytic) = grads.get(id).map(<[f64]>::to_vec) else {
            report.blocked.push(store.entry(id).name.clone());
            continue;
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.value(id)[i];
            store.value_mut(id)[i] = orig + eps;
            let plus = eval_loss(store, &build);
            store.value_mut(id)[i] = orig - eps;
            let minus = eval_loss(store, &build);
            store.value_mut(id)[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFiniteGradient(store.entry(id).name.clone()));
            }
            let rel = relative_error(a, numeric, loss_value);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((store.entry(id).name.clone(), i));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

/// Central differences with respect to a graph input instead of a parameter.
/// Returns the worst relative error over every element of `x`.
pub fn input_grad_check<F>(store: &ParameterStore, x: &[f64], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[f64]) -> Result<(NodeId, NodeId)>,
{
    let mut worst: f64 = 0.0;
    let (loss_value, analytic) = {
        let mut g = Graph::new(store);
        let (input, loss) = build(&mut g, x)?;
        (g.scalar(loss), g.input_gradient(loss, input)?)
    };
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let plus = {
            let mut g = Graph::new(store);
            let (_, l) = build(&mut g, &xp)?;
            g.scalar(l)
        };
        xp[i] = x[i] - eps;
        let minus = {
            let mut g = Graph::new(store);
            let (_, l) = build(&mut g, &xp)?;
            g.scalar(l)
        };
        xp[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * eps), loss_value));
    }
    Ok(worst)
}
