//! Finite-difference gradient verification.

use crate::diffcore::graph::{Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| /
    /// max(|analytic|, |numeric|, 1e-12)
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink; compared
    /// signatures differ between the +eps and -eps forwards.
    pub skipped: usize,
}

/// Compare analytic parameter gradients against central differences of the
/// given scalar loss node. Inputs must already be bound.
pub fn grad_check(graph: &mut Graph, loss: NodeId, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!(
            "grad_check eps must be in (0, 1e-2], got {eps}"
        )));
    }
    graph.forward()?;
    graph.backward(loss)?;
    let params = graph.params().to_vec();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&p| graph.grad(p).map(|t| t.data.clone()))
        .collect::<Result<_>>()?;

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;

    for (pi, &p) in params.iter().enumerate() {
        let n = graph.param_tensor(p).numel();
        for c in 0..n {
            let orig = graph.param_tensor(p).data[c];

            graph.param_data_mut(p)[c] = orig + eps;
            graph.forward()?;
            let f_plus = graph.output(loss).data[0];
            let sig_plus = graph.relu_signature();

            graph.param_data_mut(p)[c] = orig - eps;
            graph.forward()?;
            let f_minus = graph.output(loss).data[0];
            let sig_minus = graph.relu_signature();

            graph.param_data_mut(p)[c] = orig;

            if sig_plus != sig_minus {
                skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    // Leave the graph in a consistent state for the caller.
    graph.forward()?;
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::nn::{one_hot, wire_softmax_ce, Mlp};
    use crate::diffcore::tensor::Tensor;
    use crate::seed::Rng;
    use rand::{Rng as _, SeedableRng};

    #[test]
    fn linear_model_is_exact_to_machine_precision() {
        let mut g = Graph::new();
        let x = g.input("x", 3);
        let w = g.param("w", Tensor::from_rows(3, 1, vec![0.5, -1.0, 2.0]).unwrap());
        let b = g.param("b", Tensor::from_rows(1, 1, vec![0.1]).unwrap());
        let y = g.affine(x, w, b).unwrap();
        let loss = g.mean_all(y);
        g.bind("x", Tensor::from_rows(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap())
            .unwrap();
        let report = grad_check(&mut g, loss, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn relu_mlp_away_from_kinks_passes() {
        let mut rng = Rng::seed_from_u64(11);
        let mlp = Mlp::init(&[4, 6, 2], false, &mut rng);
        let mut g = Graph::new();
        let x = g.input("x", 4);
        let oh = g.input("oh", 2);
        let (logits, _) = mlp.wire(&mut g, x, "m").unwrap();
        let loss = wire_softmax_ce(&mut g, logits, oh).unwrap();
        let xv: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        g.bind("x", Tensor::from_rows(5, 4, xv).unwrap()).unwrap();
        g.bind("oh", one_hot(&[0, 1, 1, 0, 1])).unwrap();
        let report = grad_check(&mut g, loss, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn relu_kink_coordinate_is_skipped_not_failed() {
        // w * x with x = 1 feeds a ReLU exactly at 0 when w = 0: the +eps
        // and -eps passes land on different sides of the kink.
        let mut g = Graph::new();
        let x = g.input("x", 1);
        let w = g.param("w", Tensor::scalar(0.0));
        let pre = g.mul(x, w).unwrap();
        let post = g.relu(pre);
        let loss = g.sum_all(post);
        g.bind("x", Tensor::scalar(1.0)).unwrap();
        let report = grad_check(&mut g, loss, 1e-5).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 0);
    }
}
