use super::{Graph, NodeId, ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares analytic parameter gradients with central differences.
///
/// `loss_fn` builds the forward pass on a fresh graph and returns the scalar
/// loss node; any noise it uses must be pinned. Relative error per entry is
/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, h: f64, loss_fn: F) -> f64
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> NodeId,
{
    let ids: Vec<ParamId> = store.ids().collect();
    gradcheck_params(store, &ids, h, usize::MAX, loss_fn).max_relative_error
}

/// Gradient check restricted to `ids`, probing at most `max_per_param`
/// evenly spaced entries of each parameter.
pub fn gradcheck_params<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    max_per_param: usize,
    loss_fn: F,
) -> GradcheckReport
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> NodeId,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g);
    g.backward(loss, store);

    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = loss_fn(s, &mut g);
        g.value(l).item()
    };

    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &id in ids {
        let len = store.value(id).len();
        let stride = len.div_ceil(max_per_param.min(len).max(1));
        for i in (0..len).step_by(stride.max(1)) {
            let analytic = store.grad(id).data[i];
            let orig = store.value(id).data[i];
            store.value_mut(id).data[i] = orig + h;
            let up = eval(store);
            store.value_mut(id).data[i] = orig - h;
            let down = eval(store);
            store.value_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-12);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = rel;
                report.worst = Some((store.get(id).name.clone(), i, analytic, numeric));
            }
        }
    }
    store.zero_grad();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::Tensor;

    #[test]
    fn exact_quadratic_has_negligible_error() {
        let mut s = ParamStore::new();
        s.register("q.p", Tensor::from_vec(1, 4, vec![0.3, -1.2, 2.5, 0.7]));
        let err = gradcheck(&mut s, DEFAULT_STEP, |s, g| {
            let p = g.param(s, ParamId(0));
            let sq = g.square(p);
            let sum = g.sum(sq);
            g.scale(sum, 0.5)
        });
        assert!(err < 1e-9, "error {err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut s = ParamStore::new();
        s.register("q.p", Tensor::scalar(1.0));
        // Clamp kink at the evaluation point: tape gradient 1, central difference 0.5.
        let rep = gradcheck_params(&mut s, &[ParamId(0)], 1e-5, 1, |s, g| {
            let p = g.param(s, ParamId(0));
            g.clamp(p, -5.0, 1.0)
        });
        assert!(rep.max_relative_error > 0.4);
        assert_eq!(rep.worst.unwrap().0, "q.p");
    }
}
