//! Central finite-difference verification of reverse-mode gradients.

use thiserror::Error;

use super::graph::{Graph, NodeId, ParamId, ParamStore};
use super::matrix::Matrix;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("objective is not finite ({value}) at parameter '{param}' coordinate {coord}")]
    NonFiniteObjective {
        param: String,
        coord: usize,
        value: f64,
    },
    #[error("objective is not finite ({value}) at the unperturbed point")]
    NonFiniteBase { value: f64 },
}

/// Max relative error between reverse-mode gradients and central differences.
///
/// `build` records the scalar objective for the current parameter values and
/// returns its node. The relative error at each coordinate is
/// |analytic - (f(t+h) - f(t-h)) / 2h| / max(1, |analytic|), and the maximum
/// over all coordinates of `params` is returned.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
    mut build: F,
) -> Result<f64, GradCheckError>
where
    F: FnMut(&mut Graph, &ParamStore) -> NodeId,
{
    assert!(h > 0.0, "finite difference step must be positive, got {h}");

    store.zero_grads();
    let mut g = Graph::new();
    let out = build(&mut g, store);
    let base = g.scalar(out);
    if !base.is_finite() {
        return Err(GradCheckError::NonFiniteBase { value: base });
    }
    g.backward(out, Matrix::from_vec(1, 1, vec![1.0]), store);

    let analytic: Vec<(ParamId, Vec<f64>)> = params
        .iter()
        .map(|&p| (p, store.get(p).grad.data().to_vec()))
        .collect();

    let mut max_rel = 0.0_f64;
    for (pid, grads) in &analytic {
        for coord in 0..grads.len() {
            let orig = store.get(*pid).value.data()[coord];

            store.get_mut(*pid).value.data_mut()[coord] = orig + h;
            let mut gp = Graph::new();
            let out = build(&mut gp, store);
            let f_plus = gp.scalar(out);

            store.get_mut(*pid).value.data_mut()[coord] = orig - h;
            let mut gm = Graph::new();
            let out = build(&mut gm, store);
            let f_minus = gm.scalar(out);

            store.get_mut(*pid).value.data_mut()[coord] = orig;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(GradCheckError::NonFiniteObjective {
                    param: store.get(*pid).name.clone(),
                    coord,
                    value: if f_plus.is_finite() { f_minus } else { f_plus },
                });
            }

            let fd = (f_plus - f_minus) / (2.0 * h);
            let a = grads[coord];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function() {
        // f(x) = x^2 at x = 3: analytic 6, central difference error O(h^2).
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::from_vec(1, 1, vec![3.0]));
        let err = finite_diff_check(&mut store, &[x], 1e-5, |g, s| {
            let xn = g.param(s, x);
            g.mul_elem(xn, xn)
        })
        .unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn masked_softmax_sum() {
        let mut store = ParamStore::new();
        let x = store.add(
            "scores",
            Matrix::from_vec(2, 3, vec![0.3, -0.2, 1.1, 0.0, 0.5, -0.7]),
        );
        let mask = Matrix::from_vec(2, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        // Weighted sum so the objective is not constant under renormalization.
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, -0.5, 0.3, 1.5, -1.0]);
        let err = finite_diff_check(&mut store, &[x], 1e-5, |g, s| {
            let xn = g.param(s, x);
            let sm = g.masked_softmax(xn, mask.clone());
            let wn = g.input(w.clone());
            let prod = g.mul_elem(sm, wn);
            g.sum(prod)
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn non_finite_reported() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::from_vec(1, 1, vec![1.0]));
        let res = finite_diff_check(&mut store, &[x], 1e-3, |g, s| {
            let xn = g.param(s, x);
            let bad = g.input(Matrix::from_vec(1, 1, vec![f64::NAN]));
            g.mul_elem(xn, bad)
        });
        assert!(matches!(res, Err(GradCheckError::NonFiniteBase { .. })));
    }
}
