//! Central finite-difference verification of reverse-mode gradients.
//!
//! The check never touches the tape's gradient machinery on the reference
//! side: it re-evaluates the forward value at perturbed parameters.

use crate::error::Result;
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Real;

/// Builds the scalar loss for the model under test. Called on a fresh graph
/// for every evaluation.
pub type LossFn<'a, T> = dyn Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var> + 'a;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_param: String,
}

fn eval_loss<T: Real>(f: &LossFn<'_, T>, store: &ParamStore<T>) -> Result<f64> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok(g.value(loss).data()[0].as_f64())
}

/// Compares tape gradients against central differences with step `h`,
/// parameter group by parameter group.
///
/// Up to `max_entries_per_param` buffer entries are probed per group
/// (evenly strided, so small tensors are covered exhaustively). The
/// reported error is the relative L2 distance between the sampled finite-
/// difference vector and the tape gradient vector of each group, which
/// keeps single near-zero entries from being drowned in FD roundoff.
pub fn check_gradients<T: Real>(
    store: &mut ParamStore<T>,
    f: &LossFn<'_, T>,
    h: f64,
    max_entries_per_param: usize,
) -> Result<GradCheckReport> {
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;

    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| store.grad(id).data().iter().map(|x| x.as_f64()).collect())
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        worst_rel: 0.0,
        worst_param: String::new(),
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        let n = store.value(*id).data().len();
        let stride = (n / max_entries_per_param.max(1)).max(1);
        let mut diff_sq = 0.0f64;
        let mut fd_sq = 0.0f64;
        let mut an_sq = 0.0f64;
        let mut entry = 0usize;
        while entry < n {
            let orig = store.value(*id).data()[entry];
            let step = T::of_f64(h);

            store.value_mut(*id).data_mut()[entry] = orig + step;
            let plus = eval_loss(f, store)?;
            store.value_mut(*id).data_mut()[entry] = orig - step;
            let minus = eval_loss(f, store)?;
            store.value_mut(*id).data_mut()[entry] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let an = analytic[pi][entry];
            diff_sq += (fd - an) * (fd - an);
            fd_sq += fd * fd;
            an_sq += an * an;
            report.checked += 1;
            entry += stride;
        }
        let scale = fd_sq.max(an_sq).sqrt();
        let rel = if scale < 1e-12 {
            0.0
        } else {
            diff_sq.sqrt() / scale
        };
        if rel > report.worst_rel {
            report.worst_rel = rel;
            report.worst_param = store.get(*id).name.clone();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn catches_correct_composite_gradients() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.register("a", Tensor::from_vec(&[3], vec![0.3, -0.7, 1.1]).unwrap());
        store.register("b", Tensor::scalar(0.4));
        let f: &LossFn<'_, f64> = &|g, s| {
            let a = g.param(s, s.lookup("a").unwrap());
            let b = g.param(s, s.lookup("b").unwrap());
            let ag = g.gelu(a);
            let sq = g.mul(ag, ag)?;
            let total = g.sum_all(sq);
            let scaled = g.mul(total, b)?;
            Ok(g.mean_all(scaled))
        };
        let report = check_gradients(&mut store, f, 1e-6, 16).unwrap();
        assert!(report.worst_rel < 1e-7, "report: {report:?}");
    }
}
