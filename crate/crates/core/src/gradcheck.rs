//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// Largest error among parameters whose name contains `pattern`.
    pub fn max_for(&self, pattern: &str) -> Option<f64> {
        self.params
            .iter()
            .filter(|p| p.name.contains(pattern))
            .map(|p| p.max_rel_err)
            .reduce(f64::max)
    }
}

/// `|analytic - fd| / max(1, |fd|)`.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// Evaluates `loss_fn` on a fresh graph and returns the scalar loss.
pub fn eval_loss<T, F>(store: &ParamStore<T>, loss_fn: &F) -> Result<T>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    Ok(loss_fn(&g, store)?.item())
}

/// Analytic gradients of `loss_fn` for `ids`, zeros where the loss does not
/// touch a parameter.
pub fn analytic_grads<T, F>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    loss_fn: &F,
) -> Result<Vec<Vec<T>>>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let loss = loss_fn(&g, store)?;
    let grads = g.backward(loss)?;
    Ok(ids
        .iter()
        .map(|&id| match grads.param(id) {
            Some(t) => t.into_data(),
            None => vec![T::zero(); store.value(id).numel()],
        })
        .collect())
}

/// Central difference of the loss along one parameter entry.
pub fn central_difference<T, F>(
    store: &mut ParamStore<T>,
    id: ParamId,
    entry: usize,
    eps: T,
    loss_fn: &F,
) -> Result<T>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    let orig = store.value(id).data()[entry];
    store.value_mut(id).data_mut()[entry] = orig + eps;
    let plus = eval_loss(store, loss_fn);
    store.value_mut(id).data_mut()[entry] = orig - eps;
    let minus = eval_loss(store, loss_fn);
    store.value_mut(id).data_mut()[entry] = orig;
    Ok((plus? - minus?) / (eps + eps))
}

fn entries(numel: usize, max_entries: Option<usize>) -> Vec<usize> {
    match max_entries {
        Some(m) if m > 0 && numel > m => (0..m).map(|i| i * numel / m).collect(),
        _ => (0..numel).collect(),
    }
}

/// Compares reverse-mode gradients against central differences for every
/// entry of the listed parameters (or an evenly spaced subset of at most
/// `max_entries` per parameter).
///
/// Frozen parameters are temporarily unfrozen so they are checked too. The
/// loss is evaluated twice up front; differing results are reported as a
/// determinism error.
pub fn grad_check<T, F>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    eps: T,
    max_entries: Option<usize>,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    if eps.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let first = eval_loss(store, &loss_fn)?;
    let second = eval_loss(store, &loss_fn)?;
    // f64 holds every f32 exactly, so this is a bitwise comparison
    if first.as_f64().to_bits() != second.as_f64().to_bits() {
        return Err(Error::NonDeterministic {
            first: first.as_f64(),
            second: second.as_f64(),
        });
    }

    let frozen: Vec<bool> = ids.iter().map(|&id| store.get(id).frozen).collect();
    for &id in ids {
        store.set_frozen(id, false);
    }
    let result = (|| {
        let analytic = analytic_grads(store, ids, &loss_fn)?;
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            params: Vec::with_capacity(ids.len()),
        };
        for (&id, grad) in ids.iter().zip(&analytic) {
            let picks = entries(grad.len(), max_entries);
            let mut worst = 0.0f64;
            for &e in &picks {
                let fd = central_difference(store, id, e, eps, &loss_fn)?;
                worst = worst.max(rel_err(grad[e].as_f64(), fd.as_f64()));
            }
            report.max_rel_err = report.max_rel_err.max(worst);
            report.params.push(ParamCheck {
                name: store.get(id).name.clone(),
                entries_checked: picks.len(),
                max_rel_err: worst,
            });
        }
        Ok(report)
    })();
    for (&id, &f) in ids.iter().zip(&frozen) {
        store.set_frozen(id, f);
    }
    result
}
