//! Central finite differences, used as an independent oracle for analytic
//! gradients in tests.

use crate::params::{Gradients, ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Numerical gradient of `loss` with respect to every parameter.
pub fn numeric_param_gradients(
    store: &ParameterStore<f64>,
    eps: f64,
    loss: impl Fn(&ParameterStore<f64>) -> f64,
) -> Vec<Tensor<f64>> {
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut g = Tensor::zeros(store.get(id).shape());
        for k in 0..store.get(id).len() {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let plus = loss(&work);
            work.get_mut(id).data_mut()[k] = orig - eps;
            let minus = loss(&work);
            work.get_mut(id).data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Numerical gradient of a scalar function of one tensor.
pub fn numeric_input_gradient(x: &Tensor<f64>, eps: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut work = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for k in 0..x.len() {
        let orig = work.data()[k];
        work.data_mut()[k] = orig + eps;
        let plus = f(&work);
        work.data_mut()[k] = orig - eps;
        let minus = f(&work);
        work.data_mut()[k] = orig;
        g.data_mut()[k] = (plus - minus) / (2.0 * eps);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Worst per-parameter relative error between analytic and numeric
/// gradients, with the offending parameter's name. Parameters the loss never
/// reached are compared against zero.
pub fn worst_param_error(
    store: &ParameterStore<f64>,
    analytic: &Gradients<f64>,
    numeric: &[Tensor<f64>],
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (i, num) in numeric.iter().enumerate() {
        let id: ParamId = store.ids().nth(i).expect("same store");
        let zeros = vec![0.0; num.len()];
        let a = analytic.get(id).map_or(zeros.as_slice(), |t| t.data());
        let e = relative_error(a, num.data());
        if e > worst.0 {
            worst = (e, store.name(id).to_string());
        }
    }
    worst
}
