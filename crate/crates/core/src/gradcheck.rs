//! Central-difference gradient verification.
//!
//! `grad_check` compares reverse-mode gradients against
//! `(f(x + eps) - f(x - eps)) / (2 eps)` per coordinate and reports the worst
//! relative error `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`. It is the
//! independent oracle for every differentiable op and for whole-model
//! forwards; run it in `f64`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Forward functions under test build a graph over the store and return the
/// scalar loss node. They must be deterministic.
pub type LossFn<S> = dyn Fn(&mut Graph<S>, &ParamStore<S>) -> Result<Var>;

pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (param name, flat index) of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Check every coordinate of every non-frozen parameter in the store.
pub fn grad_check<S: Scalar>(
    store: &mut ParamStore<S>,
    f: &LossFn<S>,
    eps: f64,
) -> Result<GradCheckReport> {
    let ids: Vec<ParamId> =
        store.iter().filter(|(_, e)| !e.frozen).map(|(id, _)| id).collect();
    grad_check_params(store, &ids, f, eps, None)
}

/// Check selected parameters; `max_coords_per_param` caps the flat indices
/// probed per tensor (front-loaded) to bound runtime on big models.
pub fn grad_check_params<S: Scalar>(
    store: &mut ParamStore<S>,
    ids: &[ParamId],
    f: &LossFn<S>,
    eps: f64,
    max_coords_per_param: Option<usize>,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Precondition(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }

    // Reverse-mode gradients.
    store.zero_grads();
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let l0 = g.scalar_value(loss).into_f64();
        if !l0.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        g.backward(loss)?;
        g.write_grads(store);
        ids.iter().map(|&id| store.entry(id).grad.to_f64_vec()).collect()
    };

    let eval = |store: &ParamStore<S>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let v = g.scalar_value(loss).into_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut coords = 0usize;

    for (slot, &id) in ids.iter().enumerate() {
        let numel = store.entry(id).value.numel();
        let limit = max_coords_per_param.unwrap_or(numel).min(numel);
        for i in 0..limit {
            let orig = store.entry(id).value.data()[i];
            let step = S::from_f64(eps);

            store.entry_mut(id).value.data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.entry_mut(id).value.data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.entry_mut(id).value.data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[slot][i];
            let rel = (ad - fd).abs() / 1.0f64.max(ad.abs()).max(fd.abs());
            coords += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((store.entry(id).name.clone(), i));
            }
        }
    }

    Ok(GradCheckReport { max_rel_err, worst, coords_checked: coords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_matches_to_machine_precision() {
        // f = sum of squares: FD is exact up to O(eps^2).
        let mut store: ParamStore<f64> = ParamStore::new(5);
        let id = store
            .register("x", Tensor::matrix(1, 3, vec![0.5, -1.25, 2.0]).unwrap())
            .unwrap();
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let x = g.param(s, id)?;
            let sq = g.matmul_nt(x, x)?; // x . x
            Ok(sq)
        };
        let report = grad_check(&mut store, &f, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store: ParamStore<f64> = ParamStore::new(5);
        let id = store.register_const("x", 1, 2, 1.0).unwrap();
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let _x = g.param(s, id)?;
            let c = g.input(&Tensor::scalar(4.0))?;
            g.scale(c, 1.0)
        };
        let report = grad_check(&mut store, &f, 1e-5).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let mut store: ParamStore<f64> = ParamStore::new(0);
        store.register_zeros("x", 1, 1).unwrap();
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let x = g.param(s, ParamId(0))?;
            g.scale(x, 1.0)
        };
        assert!(grad_check(&mut store, &f, 1e-2).is_err());
        assert!(grad_check(&mut store, &f, 1e-8).is_err());
    }
}
