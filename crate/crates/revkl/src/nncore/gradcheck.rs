//! Central finite differences as an independent gradient oracle. Used only
//! in tests and the `gradcheck` command, on small models.

use super::params::{HeadKind, ModelParams};

/// Central-difference gradient of `loss_fn` at `params`, one coordinate at a
/// time, in the canonical flat order.
pub fn finite_diff_grad(
    loss_fn: impl Fn(&ModelParams) -> f64,
    params: &ModelParams,
    h: f64,
) -> Vec<f64> {
    assert!(h > 0.0);
    let base = params.to_flat();
    let head = params.head;
    let dims = params.dims;
    let rebuild = |flat: &[f64], head: HeadKind| ModelParams::from_flat(dims, head, flat).unwrap();
    let mut grad = Vec::with_capacity(base.len());
    let mut work = base.clone();
    for idx in 0..base.len() {
        work[idx] = base[idx] + h;
        let plus = loss_fn(&rebuild(&work, head));
        work[idx] = base[idx] - h;
        let minus = loss_fn(&rebuild(&work, head));
        work[idx] = base[idx];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Comparison of an analytic gradient against a finite-difference oracle.
///
/// Central differences at h = 1e-4 on an f64 loss carry an absolute noise
/// floor of roughly `eps * |loss| / h ~ 5e-12`, so relative comparison is
/// only meaningful for coordinates well above it. Coordinates below
/// `rel_cutoff` are instead held to the absolute tolerance tracked in
/// `max_abs_err_small`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
    pub worst_index: usize,
    pub compared: usize,
}

pub const REL_CUTOFF: f64 = 1e-5;

pub fn compare_grads(analytic: &[f64], reference: &[f64], rel_cutoff: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), reference.len());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err_small: 0.0,
        worst_index: 0,
        compared: analytic.len(),
    };
    for (idx, (&a, &r)) in analytic.iter().zip(reference.iter()).enumerate() {
        let scale = a.abs().max(r.abs());
        if scale < rel_cutoff {
            let err = (a - r).abs();
            if err > report.max_abs_err_small {
                report.max_abs_err_small = err;
            }
        } else {
            let err = (a - r).abs() / scale;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = idx;
            }
        }
    }
    report
}
