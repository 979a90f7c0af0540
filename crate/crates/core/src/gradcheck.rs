//! Central finite-difference gradient checking.
//!
//! The harness perturbs every parameter element by ±h, reruns a
//! user-supplied forward closure, and compares the numeric derivative
//! against the analytic gradient from one backward pass. An element
//! passes when `|a - n| <= tol * max(|a|, |n|)` or the absolute gap is
//! below the noise floor for 64-bit central differences.

use crate::error::Result;
use crate::graph::Graph;
use crate::params::ParamStore;

pub const DEFAULT_H: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-5;
const ABS_FLOOR: f64 = 1e-7;

/// Rescale weight matrices and kernels to roughly unit-preserving scale
/// (std ~ 1/sqrt(fan_in)) so layer norms downstream see healthy row
/// variances. Gradient correctness is point-wise; checking at a generic
/// well-conditioned point keeps the central-difference truncation error
/// (which grows with the cube of the input/row-std ratio) far below the
/// tolerance. Vectors (biases, gains, embeddings) are left untouched.
pub fn rescale_to_generic_point(store: &mut ParamStore) {
    for e in store.entries_mut() {
        if e.shape.len() < 2 {
            continue;
        }
        let fan_in: usize = match e.shape.len() {
            2 => e.shape[0],
            4 => e.shape[1] * e.shape[2] * e.shape[3],
            _ => e.shape[..e.shape.len() - 1].iter().product(),
        };
        let current = crate::nn::INIT_STD;
        let target = 1.0 / (fan_in as f64).sqrt();
        let factor = target / current;
        // Zero-initialized predictors stay zero under scaling, which is
        // what their contract wants.
        for v in e.data.iter_mut() {
            *v *= factor;
        }
    }
}

pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn assert_ok(&self) {
        assert!(
            self.failures.is_empty(),
            "gradient check failed ({} of {} elements), worst rel {:.3e}:\n{}",
            self.failures.len(),
            self.checked,
            self.worst_rel,
            self.failures.join("\n")
        );
    }
}

/// Check the analytic gradient of `forward` (a scalar-loss builder over
/// the store's parameters) against central finite differences.
pub fn check_gradients<F>(store: &mut ParamStore, mut forward: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<crate::graph::Var>,
{
    check_gradients_with(store, DEFAULT_H, DEFAULT_TOL, &mut forward)
}

pub fn check_gradients_with<F>(
    store: &mut ParamStore,
    h: f64,
    tol: f64,
    forward: &mut F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<crate::graph::Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = forward(&mut g, store)?;
    g.backward(loss, store)?;
    drop(g);

    let analytic: Vec<Vec<f64>> = store.entries().iter().map(|e| e.grad.clone()).collect();

    let mut report = GradCheckReport {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };

    let n_params = store.len();
    for pi in 0..n_params {
        let n_elems = store.entries()[pi].data.len();
        for ei in 0..n_elems {
            let orig = store.entries()[pi].data[ei];

            store.entries_mut()[pi].data[ei] = orig + h;
            let mut gp = Graph::new();
            let lp = forward(&mut gp, store)?;
            let fp = gp.data(lp)[0];
            drop(gp);

            store.entries_mut()[pi].data[ei] = orig - h;
            let mut gm = Graph::new();
            let lm = forward(&mut gm, store)?;
            let fm = gm.data(lm)[0];
            drop(gm);

            store.entries_mut()[pi].data[ei] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][ei];
            let denom = a.abs().max(numeric.abs());
            let gap = (a - numeric).abs();
            let rel = if denom > 0.0 { gap / denom } else { 0.0 };
            report.checked += 1;
            if rel > report.worst_rel && gap > ABS_FLOOR {
                report.worst_rel = rel;
            }
            if gap > ABS_FLOOR && rel > tol {
                let name = &store.entries()[pi].name;
                report.failures.push(format!(
                    "{name}[{ei}]: analytic {a:.9e} vs numeric {numeric:.9e} (rel {rel:.3e})"
                ));
            }
        }
    }
    store.zero_grads();
    Ok(report)
}
