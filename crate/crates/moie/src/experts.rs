//! Concept-attention interpretable experts and first-order-logic
//! explanation extraction.
//!
//! An expert scores each admitted concept with a relevance parameter,
//! turns the scores into an attention distribution via a temperature
//! softmax, rescales the masked concepts, and classifies with a small MLP.
//! Explanations are disjunctions of concept-literal conjunctions collected
//! from correctly-predicted covered samples.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::nn::Mlp;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::logic::{DnfFormula, Literal, Minterm};
use crate::seed::Rng;

/// Interpretable concept-to-label classifier with per-concept attention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyLogicExpert {
    /// Relevance score per admitted concept (a 1 x n_c row).
    pub gamma: Tensor,
    pub t_lens: f64,
    pub lambda_lens: f64,
    /// Classifier over attention-masked concepts.
    pub mlp: Mlp,
}

impl EntropyLogicExpert {
    pub fn init(
        n_concepts: usize,
        hidden: &[usize],
        t_lens: f64,
        lambda_lens: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut dims = vec![n_concepts];
        dims.extend_from_slice(hidden);
        dims.push(2);
        // Relevance scores start concentrated on a random concept subset
        // (spread of ~2 temperature units) rather than uniform: an expert
        // begins near-blind outside a few concepts and widens its
        // attention only where the objective pulls it. Uniform starts let
        // every expert absorb the whole dataset during warmup, which
        // empties the residual of signal.
        use rand_distr::Distribution;
        let spread = rand_distr::Normal::new(0.0, 2.0 * t_lens).unwrap();
        let gamma: Vec<f64> = (0..n_concepts).map(|_| spread.sample(rng)).collect();
        EntropyLogicExpert {
            gamma: Tensor::from_rows(1, n_concepts, gamma).unwrap(),
            t_lens,
            lambda_lens,
            mlp: Mlp::init(&dims, false, rng),
        }
    }

    pub fn n_concepts(&self) -> usize {
        self.gamma.cols()
    }

    /// Attention distribution: softmax(gamma / t_lens). Recomputed, never
    /// stored; sums to 1 with every entry strictly positive.
    pub fn attention(&self) -> Vec<f64> {
        let mut scaled = self.gamma.clone();
        scaled.data.iter_mut().for_each(|v| *v /= self.t_lens);
        crate::diffcore::nn::softmax_host(&scaled).data
    }

    /// Concept indices sorted by descending attention (stable on ties).
    pub fn attention_order(&self) -> Vec<usize> {
        let alpha = self.attention();
        let mut order: Vec<usize> = (0..alpha.len()).collect();
        order.sort_by(|&a, &b| alpha[b].partial_cmp(&alpha[a]).unwrap().then(a.cmp(&b)));
        order
    }

    /// Attention-masked copy of a concept batch: c * (n_c * alpha).
    pub fn masked(&self, concepts: &Tensor) -> Tensor {
        let alpha = self.attention();
        let nc = self.n_concepts();
        let mut out = concepts.clone();
        for i in 0..out.rows() {
            for j in 0..nc {
                out.data[i * nc + j] *= nc as f64 * alpha[j];
            }
        }
        out
    }
}

/// Nodes of an expert wired into a graph.
pub struct WiredExpert {
    pub logits: NodeId,
    pub attention: NodeId,
    /// Scalar attention entropy, for the sparsity regularizer.
    pub entropy: NodeId,
    pub params: Vec<NodeId>,
}

/// Add the expert to a graph reading concepts from `c_input`.
pub fn wire_expert(
    expert: &EntropyLogicExpert,
    g: &mut Graph,
    c_input: NodeId,
    prefix: &str,
) -> Result<WiredExpert> {
    let nc = expert.n_concepts();
    let gamma = g.param(&format!("{prefix}.gamma"), expert.gamma.clone());
    let scaled = g.scale(gamma, 1.0 / expert.t_lens);
    let alpha = g.softmax(scaled);
    g.rename(alpha, &format!("{prefix}.attention"));
    let mask = g.scale(alpha, nc as f64);
    let masked = g.mul(c_input, mask)?;
    let (logits, mut params) = expert.mlp.wire(g, masked, &format!("{prefix}.mlp"))?;
    params.insert(0, gamma);

    let log_alpha = g.log_softmax(scaled);
    let plogp = g.mul(alpha, log_alpha)?;
    let sum = g.sum_all(plogp);
    let entropy = g.scale(sum, -1.0);
    Ok(WiredExpert {
        logits,
        attention: alpha,
        entropy,
        params,
    })
}

/// Copy trained expert parameters back out of a wired graph.
pub fn read_back_expert(expert: &mut EntropyLogicExpert, g: &Graph, wired: &WiredExpert) {
    expert.gamma = g.param_tensor(wired.params[0]).clone();
    expert.mlp.read_back(g, &wired.params[1..]);
}

/// Host-side forward: logits plus the attention weights.
pub fn ell_forward(expert: &EntropyLogicExpert, concepts: &Tensor) -> (Tensor, Vec<f64>) {
    (ell_logits(expert, concepts), expert.attention())
}

pub fn ell_logits(expert: &EntropyLogicExpert, concepts: &Tensor) -> Tensor {
    expert.mlp.forward_host(&expert.masked(concepts))
}

/// Shannon entropy of an attention distribution, in [0, ln n].
pub fn entropy_regularizer(alpha: &[f64]) -> f64 {
    -alpha
        .iter()
        .map(|&a| if a > 0.0 { a * a.ln() } else { 0.0 })
        .sum::<f64>()
}

/// A per-class logic explanation with fidelity metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FolExplanation {
    pub target_class: u8,
    /// Concept indices refer to the admitted-concept space.
    pub formula: DnfFormula,
    /// Number of covered, correctly-predicted samples behind the kept
    /// minterms.
    pub support: usize,
    /// Agreement between the formula and the expert on the covered set.
    pub fidelity: f64,
    /// True when no concept cleared the attention quantile and the
    /// top-attention concept was used instead.
    pub fallback_top1: bool,
    pub selected_concepts: Vec<usize>,
}

impl FolExplanation {
    pub fn render(&self, names: &[String]) -> String {
        self.formula.render(names)
    }
}

const MAX_MINTERMS_PER_CLASS: usize = 10;

/// Linear-interpolated empirical quantile.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Concepts whose attention lies strictly above the quantile threshold;
/// falls back to the single top-attention concept when none clears it.
fn select_concepts(alpha: &[f64], attention_quantile: f64) -> (Vec<usize>, bool) {
    let threshold = quantile(alpha, attention_quantile);
    let selected: Vec<usize> = (0..alpha.len())
        .filter(|&j| alpha[j] > threshold)
        .collect();
    if selected.is_empty() {
        let top = (0..alpha.len())
            .max_by(|&a, &b| alpha[a].partial_cmp(&alpha[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        (vec![top], true)
    } else {
        (selected, false)
    }
}

/// Extract per-class explanations from an expert's covered samples.
///
/// For each covered, correctly-predicted sample of a class, the selected
/// concepts form one conjunction (polarity = concept probability at 0.5);
/// conjunctions aggregate into a deduplicated disjunction capped at the
/// most frequent terms.
pub fn extract_fol(
    expert: &EntropyLogicExpert,
    covered_concepts: &Tensor,
    covered_labels: &[u8],
    attention_quantile: f64,
) -> Result<Vec<FolExplanation>> {
    if covered_concepts.rows() == 0 {
        return Err(Error::Data("cannot extract logic from an empty covered set".into()));
    }
    if !(attention_quantile > 0.0 && attention_quantile < 1.0) {
        return Err(Error::Config(format!(
            "attention quantile must lie in (0,1), got {attention_quantile}"
        )));
    }
    let alpha = expert.attention();
    let (selected, fallback) = select_concepts(&alpha, attention_quantile);

    let logits = ell_logits(expert, covered_concepts);
    let preds: Vec<u8> = (0..logits.rows())
        .map(|i| u8::from(logits.at(i, 1) > logits.at(i, 0)))
        .collect();

    let mut out = Vec::with_capacity(2);
    for class in 0..2u8 {
        let mut counts: HashMap<Minterm, usize> = HashMap::new();
        for i in 0..covered_concepts.rows() {
            if preds[i] != class || covered_labels[i] != class {
                continue;
            }
            let term = Minterm(
                selected
                    .iter()
                    .map(|&j| Literal {
                        concept: j,
                        negated: covered_concepts.at(i, j) < 0.5,
                    })
                    .collect(),
            );
            *counts.entry(term).or_insert(0) += 1;
        }
        let mut ranked: Vec<(Minterm, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0 .0.cmp(&b.0 .0)));
        ranked.truncate(MAX_MINTERMS_PER_CLASS);
        let support: usize = ranked.iter().map(|(_, c)| c).sum();
        let formula = DnfFormula::new(ranked.into_iter().map(|(t, _)| t).collect());
        let fidelity = fol_fidelity(&formula, class, expert, covered_concepts);
        out.push(FolExplanation {
            target_class: class,
            formula,
            support,
            fidelity,
            fallback_top1: fallback,
            selected_concepts: selected.clone(),
        });
    }
    Ok(out)
}

/// Fraction of samples where the formula's verdict matches the expert's
/// argmax membership in the target class.
pub fn fol_fidelity(
    formula: &DnfFormula,
    target_class: u8,
    expert: &EntropyLogicExpert,
    concepts: &Tensor,
) -> f64 {
    if concepts.rows() == 0 {
        return 0.0;
    }
    let logits = ell_logits(expert, concepts);
    let mut agree = 0usize;
    for i in 0..concepts.rows() {
        let pred_in_class = u8::from(logits.at(i, 1) > logits.at(i, 0)) == target_class;
        let bits: Vec<bool> = concepts.row(i).iter().map(|&v| v >= 0.5).collect();
        if formula.eval(&bits) == pred_in_class {
            agree += 1;
        }
    }
    agree as f64 / concepts.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn expert_with_gamma(gamma: Vec<f64>, seed: u64) -> EntropyLogicExpert {
        let mut rng = Rng::seed_from_u64(seed);
        let nc = gamma.len();
        let mut e = EntropyLogicExpert::init(nc, &[8], 7.6, 1e-4, &mut rng);
        e.gamma = Tensor::from_rows(1, nc, gamma).unwrap();
        e
    }

    #[test]
    fn uniform_gamma_leaves_concepts_unmasked() {
        let e = expert_with_gamma(vec![0.3; 5], 1);
        let alpha = e.attention();
        for &a in &alpha {
            assert!((a - 0.2).abs() < 1e-12);
        }
        let c = Tensor::from_rows(2, 5, vec![1.0, 0.0, 1.0, 0.5, 0.2, 0.9, 0.1, 0.0, 1.0, 0.4])
            .unwrap();
        let masked = e.masked(&c);
        for (m, v) in masked.data.iter().zip(&c.data) {
            assert!((m - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_gamma_concentrates_attention() {
        let mut gamma = vec![0.0; 6];
        gamma[2] = 500.0; // far above t_lens = 7.6
        let e = expert_with_gamma(gamma, 1);
        let alpha = e.attention();
        assert!(alpha[2] > 0.999);
        assert!(alpha.iter().enumerate().filter(|&(j, _)| j != 2).all(|(_, &a)| a < 1e-3));
        assert_eq!(e.attention_order()[0], 2);
    }

    #[test]
    fn attention_is_shift_invariant() {
        let e1 = expert_with_gamma(vec![0.1, 0.9, -0.4, 0.3], 3);
        let mut e2 = e1.clone();
        e2.gamma.data.iter_mut().for_each(|v| *v += 123.0);
        let (a1, a2) = (e1.attention(), e2.attention());
        for (x, y) in a1.iter().zip(&a2) {
            assert!((x - y).abs() < 1e-9);
        }
        let c = Tensor::from_rows(1, 4, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let l1 = ell_logits(&e1, &c);
        let l2 = ell_logits(&e2, &c);
        for (x, y) in l1.data.iter().zip(&l2.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_values_are_analytic() {
        assert_eq!(entropy_regularizer(&[1.0, 0.0, 0.0]), 0.0);
        assert!((entropy_regularizer(&[0.25; 4]) - 4.0f64.ln()).abs() < 1e-12);
        assert!((entropy_regularizer(&[0.5, 0.5]) - 2.0f64.ln()).abs() < 1e-12);
        assert!((entropy_regularizer(&[0.125; 8]) - 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn graph_and_host_expert_agree() {
        let e = expert_with_gamma(vec![0.4, -0.2, 0.9], 5);
        let c = Tensor::from_rows(2, 3, vec![1.0, 0.0, 0.6, 0.2, 0.9, 0.1]).unwrap();
        let host = ell_logits(&e, &c);

        let mut g = Graph::new();
        let cin = g.input("c", 3);
        let wired = wire_expert(&e, &mut g, cin, "e").unwrap();
        g.bind("c", c).unwrap();
        g.forward().unwrap();
        assert_eq!(g.output(wired.logits).data, host.data);
        let ent_graph = g.output(wired.entropy).data[0];
        assert!((ent_graph - entropy_regularizer(&e.attention())).abs() < 1e-12);
    }

    #[test]
    fn single_sample_minterm_uses_selected_polarity() {
        // Three concepts; gamma makes c0 and c1 clear the 0.3 quantile
        // while c2 stays below it. The expert is rigged to predict class 1.
        let mut e = expert_with_gamma(vec![2.0, 1.9, -5.0], 7);
        e.mlp = Mlp {
            layers: vec![crate::diffcore::nn::Dense {
                w: Tensor::zeros(3, 2),
                b: Tensor::from_rows(1, 2, vec![0.0, 1.0]).unwrap(),
            }],
            relu_output: false,
        };
        let c = Tensor::from_rows(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let fols = extract_fol(&e, &c, &[1], 0.3).unwrap();
        let class1 = &fols[1];
        assert!(!class1.fallback_top1);
        assert_eq!(class1.selected_concepts, vec![0, 1]);
        assert_eq!(class1.formula.terms.len(), 1);
        let term = &class1.formula.terms[0];
        assert!(term.0.contains(&Literal::pos(0)));
        assert!(term.0.contains(&Literal::neg(1)));
        assert_eq!(term.0.len(), 2);
        assert_eq!(class1.support, 1);
    }

    #[test]
    fn uniform_attention_falls_back_to_top1_flagged() {
        let mut e = expert_with_gamma(vec![0.0; 4], 9);
        e.mlp = Mlp {
            layers: vec![crate::diffcore::nn::Dense {
                w: Tensor::zeros(4, 2),
                b: Tensor::from_rows(1, 2, vec![0.0, 1.0]).unwrap(),
            }],
            relu_output: false,
        };
        let c = Tensor::from_rows(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let fols = extract_fol(&e, &c, &[1], 0.7).unwrap();
        assert!(fols[1].fallback_top1);
        assert_eq!(fols[1].selected_concepts.len(), 1);
    }

    #[test]
    fn formula_identical_to_expert_has_unit_fidelity() {
        // Expert predicts class 1 iff c0 >= 0.5 (w column for logit 1).
        let mut e = expert_with_gamma(vec![10.0, -10.0], 11);
        let mut w = Tensor::zeros(2, 2);
        w.data[1] = 20.0; // c0 (masked by ~2*alpha0~=2) drives logit 1
        e.mlp = Mlp {
            layers: vec![crate::diffcore::nn::Dense {
                w,
                b: Tensor::from_rows(1, 2, vec![0.5, 0.0]).unwrap(),
            }],
            relu_output: false,
        };
        let c = Tensor::from_rows(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let formula = DnfFormula::from_terms(&[&[(0, false)]]);
        assert_eq!(fol_fidelity(&formula, 1, &e, &c), 1.0);
        // Constant-false formula against an all-positive expert.
        let never = DnfFormula::new(vec![]);
        let all_pos = Tensor::from_rows(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(fol_fidelity(&never, 1, &e, &all_pos), 0.0);
    }

    #[test]
    fn empty_covered_set_is_rejected() {
        let e = expert_with_gamma(vec![0.0; 3], 13);
        let c = Tensor::zeros(1, 3);
        let err = extract_fol(&e, &Tensor { shape: vec![0, 3], data: vec![] }, &[], 0.7);
        assert!(err.is_err());
        assert!(extract_fol(&e, &c, &[0], 0.7).is_ok());
    }
}
