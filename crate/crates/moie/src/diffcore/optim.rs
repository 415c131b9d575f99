//! SGD-with-momentum and Adam parameter updates.

use crate::diffcore::graph::{Graph, NodeId};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Rule {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Per-parameter moment buffers plus a step counter.
#[derive(Debug)]
pub struct Optimizer {
    pub rule: Rule,
    pub lr: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    targets: Vec<NodeId>,
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64, targets: &[NodeId]) -> Self {
        Optimizer {
            rule: Rule::SgdMomentum { momentum },
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            targets: targets.to_vec(),
        }
    }

    pub fn adam(lr: f64, targets: &[NodeId]) -> Self {
        Optimizer {
            rule: Rule::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            targets: targets.to_vec(),
        }
    }

    /// Apply one update using the gradients currently held by the graph.
    pub fn step(&mut self, graph: &mut Graph) -> Result<()> {
        if self.first.is_empty() {
            for &id in &self.targets {
                let t = graph.param_tensor(id);
                self.first.push(Tensor::zeros(t.rows(), t.cols()));
                if matches!(self.rule, Rule::Adam { .. }) {
                    self.second.push(Tensor::zeros(t.rows(), t.cols()));
                }
            }
        }
        self.step += 1;
        let rule = self.rule.clone();
        let lr = self.lr;
        for (slot, &id) in self.targets.clone().iter().enumerate() {
            let grad = graph.grad(id)?.clone();
            if grad.numel() != self.first[slot].numel() {
                return Err(Error::ShapeMismatch {
                    node: graph.node_name(id).to_string(),
                    detail: "gradient shape does not match moment buffer".into(),
                });
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite {
                    node: graph.node_name(id).to_string(),
                    detail: "gradient contains NaN or Inf".into(),
                });
            }
            let data = graph.param_data_mut(id);
            match rule {
                Rule::SgdMomentum { momentum } => {
                    let buf = &mut self.first[slot];
                    for ((w, &g), v) in data.iter_mut().zip(&grad.data).zip(&mut buf.data) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                Rule::Adam { beta1, beta2, eps } => {
                    let t = self.step as f64;
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                    for (((w, &g), mi), vi) in data
                        .iter_mut()
                        .zip(&grad.data)
                        .zip(&mut m.data)
                        .zip(&mut v.data)
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_graph(w0: f64) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new();
        let x = g.input("x", 1);
        let w = g.param("w", Tensor::scalar(w0));
        let prod = g.mul(x, w).unwrap();
        let loss = g.sum_all(prod);
        (g, w, loss)
    }

    #[test]
    fn sgd_step_matches_hand_rule() {
        // w=1.0, g=2.0, lr=0.1, momentum=0  ->  w = 0.8
        let (mut g, w, loss) = one_param_graph(1.0);
        g.bind("x", Tensor::scalar(2.0)).unwrap();
        g.forward().unwrap();
        g.backward(loss).unwrap();
        let mut opt = Optimizer::sgd(0.1, 0.0, &[w]);
        opt.step(&mut g).unwrap();
        assert!((g.param_tensor(w).data[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        // With g = 1: mhat = g, vhat = g^2, so the first update is
        // lr * 1 / (1 + eps) ~= lr regardless of the betas.
        let (mut g, w, loss) = one_param_graph(0.5);
        g.bind("x", Tensor::scalar(1.0)).unwrap();
        g.forward().unwrap();
        g.backward(loss).unwrap();
        let mut opt = Optimizer::adam(0.01, &[w]);
        opt.step(&mut g).unwrap();
        let delta = 0.5 - g.param_tensor(w).data[0];
        assert!((delta - 0.01).abs() < 1e-6, "delta = {delta}");
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_without_momentum() {
        let (mut g, w, loss) = one_param_graph(1.5);
        g.bind("x", Tensor::scalar(0.0)).unwrap();
        g.forward().unwrap();
        g.backward(loss).unwrap();
        let mut opt = Optimizer::sgd(0.1, 0.0, &[w]);
        opt.step(&mut g).unwrap();
        assert_eq!(g.param_tensor(w).data[0], 1.5);
    }
}
