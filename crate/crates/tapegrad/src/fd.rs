//! Central finite differences — the independent oracle for gradient checks.
//!
//! Deliberately knows nothing about the tape: it only re-evaluates a closure
//! with perturbed parameters, so it stays a second route to the same numbers.

use crate::nn::Params;
use indexmap::IndexMap;
use ndarray::ArrayD;

#[derive(Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub n_checked: usize,
}

/// Compares analytic gradients to central differences of `loss_fn`.
///
/// Relative error per element is `|g - fd| / max(|g|, |fd|, floor)` with a
/// `1e-6` floor so true-zero gradients do not divide by noise.
pub fn check_grads(
    loss_fn: &mut dyn FnMut(&Params<f64>) -> f64,
    params: &Params<f64>,
    analytic: &IndexMap<String, ArrayD<f64>>,
    step: f64,
) -> FdReport {
    let mut work = params.clone();
    let mut report = FdReport { max_rel_err: 0.0, worst_param: String::new(), worst_index: 0, n_checked: 0 };

    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).len();
        let grad = analytic.get(&name).unwrap_or_else(|| panic!("missing analytic grad for {name}"));
        assert_eq!(grad.len(), len);
        for idx in 0..len {
            let orig = work.get(&name).as_slice().unwrap()[idx];
            let h = step * orig.abs().max(1.0);

            work.get_mut(&name).as_slice_mut().unwrap()[idx] = orig + h;
            let up = loss_fn(&work);
            work.get_mut(&name).as_slice_mut().unwrap()[idx] = orig - h;
            let down = loss_fn(&work);
            work.get_mut(&name).as_slice_mut().unwrap()[idx] = orig;

            let fd = (up - down) / (2.0 * h);
            let g = grad.as_slice().unwrap()[idx];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    report
}

/// Finite-difference gradient of `loss_fn` with respect to a single tensor.
pub fn fd_grad_tensor(
    loss_fn: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    x: &ArrayD<f64>,
    step: f64,
) -> ArrayD<f64> {
    let mut work = x.clone();
    let mut out = ArrayD::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let orig = work.as_slice().unwrap()[idx];
        let h = step * orig.abs().max(1.0);
        work.as_slice_mut().unwrap()[idx] = orig + h;
        let up = loss_fn(&work);
        work.as_slice_mut().unwrap()[idx] = orig - h;
        let down = loss_fn(&work);
        work.as_slice_mut().unwrap()[idx] = orig;
        out.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * h);
    }
    out
}

/// Max relative error between two gradient tensors with a `1e-6` floor.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
