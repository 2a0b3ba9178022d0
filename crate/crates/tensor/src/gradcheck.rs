//! Central finite-difference checks of analytic gradients.

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative error used throughout: `|a - n| / max(|a| + |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Compares analytic gradients of `loss(graph, store)` w.r.t. every entry of
/// `store` (up to `max_per_param` entries each) with central differences.
pub fn check_params<F>(store: &mut ParamStore<f64>, eps: f64, max_per_param: usize, loss: F) -> GradCheckReport
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Var,
{
    let g = Graph::new();
    let l = loss(&g, store);
    let grads = g.backward(l);
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let eval = |store: &ParamStore<f64>| {
        let g = Graph::inference();
        let l = loss(&g, store);
        g.value(l).item()
    };
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let analytic = grads
            .param(store, id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let stride = (n / max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride).take(max_per_param) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric, 1e-6));
            report.checked += 1;
        }
    }
    report
}

/// Same check for a differentiable input tensor.
pub fn check_input<F>(input: &Tensor<f64>, eps: f64, loss: F) -> GradCheckReport
where
    F: Fn(&Graph<f64>, Var) -> Var,
{
    let g = Graph::new();
    let x = g.leaf(input.clone());
    let l = loss(&g, x);
    let grads = g.backward(l);
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    let eval = |t: &Tensor<f64>| {
        let g = Graph::inference();
        let x = g.constant(t.clone());
        let l = loss(&g, x);
        g.value(l).item()
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric, 1e-6));
        report.checked += 1;
    }
    report
}
