//! Finite-difference verification of tape gradients.
//!
//! Checks run in `f64`. The loss closure rebuilds the graph from the store on
//! every call, so perturbing a parameter value is enough to re-evaluate it.

use super::{Gradients, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-6, max_entries_per_param: usize::MAX }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    /// Entry with the largest absolute deviation.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8)` over the checked entries.
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    /// One entry per parameter, in store order.
    pub per_param: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.per_param.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("finite_difference_gradient", format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric("finite_difference_gradient", format!("function is not finite near element {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

fn entries(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    let stride = numel as f64 / max as f64;
    (0..max).map(|i| (i as f64 * stride) as usize).collect()
}

fn eval<F>(store: &ParamStore<f64>, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.value(loss).item()
}

/// Gradients from the tape.
pub fn analytic_gradients<F>(store: &ParamStore<f64>, mut f: F) -> Result<Gradients<f64>>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)
}

/// Central differences for the selected entries of every parameter.
/// Unchecked entries are left at zero.
pub fn numeric_gradients<F>(store: &ParamStore<f64>, mut f: F, opts: &GradCheckOptions) -> Result<Gradients<f64>>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    let mut out = Gradients::default();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let numel = store.get(id).value().numel();
        let mut grad = Tensor::zeros(store.get(id).value().shape());
        for i in entries(numel, opts.max_entries_per_param) {
            let orig = store.get(id).value().data()[i];
            work.get_mut(id).value_mut().data_mut()[i] = orig + opts.eps;
            let plus = eval(&work, &mut f)?;
            work.get_mut(id).value_mut().data_mut()[i] = orig - opts.eps;
            let minus = eval(&work, &mut f)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numeric("numeric_gradients", format!("loss is not finite near `{}`[{i}]", store.get(id).name)));
            }
            work.get_mut(id).value_mut().data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * opts.eps);
        }
        out.map.insert(id, grad);
    }
    Ok(out)
}

/// Compare two gradient sets on the entries selected by `opts`.
/// A parameter missing from `analytic` counts as a zero gradient.
pub fn compare(
    store: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    numeric: &Gradients<f64>,
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let mut report = GradCheckReport { checked: 0, per_param: Vec::new(), max_rel_error: 0.0 };
    for (id, p) in store.iter() {
        let idx = entries(p.value().numel(), opts.max_entries_per_param);
        let (mut scale, mut dev, mut at) = (0.0f64, -1.0f64, 0);
        for &i in &idx {
            let a = analytic.get(id).map_or(0.0, |t| t.data()[i]);
            let n = numeric.get(id).map_or(0.0, |t| t.data()[i]);
            scale = scale.max(a.abs()).max(n.abs());
            if (a - n).abs() > dev {
                dev = (a - n).abs();
                at = i;
            }
        }
        report.checked += idx.len();
        let rel = dev.max(0.0) / scale.max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        let a = analytic.get(id).map_or(0.0, |t| t.data()[at]);
        let n = numeric.get(id).map_or(0.0, |t| t.data()[at]);
        report.per_param.push(GradCheckEntry { param: p.name.clone(), index: at, analytic: a, numeric: n, rel_error: rel });
    }
    report
}

/// Analytic against numeric gradients for every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore<f64>, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &mut f)?;
    let numeric = numeric_gradients(store, &mut f, opts)?;
    Ok(compare(store, &analytic, &numeric, opts))
}
