//! Sigmoid selector networks, class-stratified coverage accounting, the
//! selective risk, and the coverage-constraint penalty.

use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{sigmoid_host, Mlp};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Where a sample goes: the k-th expert (1-based iteration index) or the
/// final residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    Expert(usize),
    Residual,
}

/// Gating network for one iteration: concepts in, coverage probability out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selector {
    pub mlp: Mlp,
    pub iteration: usize,
}

impl Selector {
    pub fn init(n_concepts: usize, hidden: usize, iteration: usize, rng: &mut Rng) -> Self {
        Selector {
            mlp: Mlp::init(&[n_concepts, hidden, 1], false, rng),
            iteration,
        }
    }

    /// Coverage probabilities pi(c) in (0,1), one per row.
    pub fn pi(&self, concepts: &Tensor) -> Vec<f64> {
        sigmoid_host(&self.mlp.forward_host(concepts)).data
    }
}

/// Per-iteration coverage targets: total tau split into per-class targets
/// tau_m = w_m * tau.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoveragePlan {
    pub tau: f64,
    pub tau_m: [f64; 2],
    pub class_weights: [f64; 2],
    pub lambda_s: f64,
}

impl CoveragePlan {
    pub fn new(tau: f64, class_counts: [usize; 2], lambda_s: f64) -> Result<Self> {
        if lambda_s <= 0.0 {
            return Err(Error::Config(format!("lambda_s must be positive, got {lambda_s}")));
        }
        let tau_m = stratify_coverage(tau, class_counts)?;
        let n = (class_counts[0] + class_counts[1]) as f64;
        Ok(CoveragePlan {
            tau,
            tau_m,
            class_weights: [class_counts[0] as f64 / n, class_counts[1] as f64 / n],
            lambda_s,
        })
    }
}

/// Split a total coverage target into per-class targets proportional to
/// the class frequencies: tau_m = (N_m / N) * tau.
pub fn stratify_coverage(tau: f64, class_counts: [usize; 2]) -> Result<[f64; 2]> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0,1], got {tau}")));
    }
    if class_counts.iter().any(|&c| c == 0) {
        return Err(Error::Data("stratification requires both classes present".into()));
    }
    let n = (class_counts[0] + class_counts[1]) as f64;
    Ok([
        class_counts[0] as f64 / n * tau,
        class_counts[1] as f64 / n * tau,
    ])
}

/// Soft (mean pi) and hard (fraction with pi >= 0.5) coverage of one
/// class. The soft mean feeds the loss; the hard fraction is reported.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoverageEntry {
    pub soft: f64,
    pub hard: f64,
}

/// Empirical coverage per class group: the mean selector probability and
/// the thresholded fraction over each group's samples.
pub fn empirical_coverage(pi_by_class: &[Vec<f64>]) -> Result<Vec<CoverageEntry>> {
    pi_by_class
        .iter()
        .enumerate()
        .map(|(m, pis)| {
            if pis.is_empty() {
                return Err(Error::Data(format!("class {m} is empty")));
            }
            let n = pis.len() as f64;
            Ok(CoverageEntry {
                soft: pis.iter().sum::<f64>() / n,
                hard: pis.iter().filter(|&&p| p >= 0.5).count() as f64 / n,
            })
        })
        .collect()
}

/// Binary convenience form of `empirical_coverage`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoverageStats {
    pub soft: [f64; 2],
    pub hard: [f64; 2],
}

pub fn coverage_by_class(pi: &[f64], labels: &[u8]) -> Result<CoverageStats> {
    if pi.len() != labels.len() {
        return Err(Error::Metric("pi/label length mismatch".into()));
    }
    let mut groups = vec![Vec::new(), Vec::new()];
    for (&p, &y) in pi.iter().zip(labels) {
        groups[y as usize].push(p);
    }
    let entries = empirical_coverage(&groups)?;
    Ok(CoverageStats {
        soft: [entries[0].soft, entries[1].soft],
        hard: [entries[0].hard, entries[1].hard],
    })
}

/// Overall selective risk: sum over classes of the class-mean weighted
/// loss divided by that class's soft coverage. The per-sample losses must
/// already carry the pi and cumulative-weight factors.
pub fn selective_risk(
    weighted_losses: &[f64],
    zeta_soft: &[f64; 2],
    labels: &[u8],
) -> Result<f64> {
    if weighted_losses.len() != labels.len() {
        return Err(Error::Metric("loss/label length mismatch".into()));
    }
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (&l, &y) in weighted_losses.iter().zip(labels) {
        sums[y as usize] += l;
        counts[y as usize] += 1;
    }
    let mut risk = 0.0;
    for m in 0..2 {
        if counts[m] == 0 {
            continue;
        }
        if zeta_soft[m] <= 0.0 {
            return Err(Error::SelectorCollapse {
                class: m,
                zeta: zeta_soft[m],
            });
        }
        risk += sums[m] / counts[m] as f64 / zeta_soft[m];
    }
    Ok(risk)
}

/// Quadratic penalty for unmet per-class coverage:
/// lambda_s * sum_m max(0, tau_m - zeta_m)^2.
pub fn coverage_penalty(zeta: &[f64], tau_m: &[f64], lambda_s: f64) -> f64 {
    zeta.iter()
        .zip(tau_m)
        .map(|(&z, &t)| {
            let gap = (t - z).max(0.0);
            gap * gap
        })
        .sum::<f64>()
        * lambda_s
}

/// First-match routing over per-selector probabilities for one sample:
/// the smallest iteration with pi >= 0.5 wins, else the residual.
pub fn route_from_pis(pis: &[f64]) -> Route {
    for (k, &p) in pis.iter().enumerate() {
        if p >= 0.5 {
            return Route::Expert(k + 1);
        }
    }
    Route::Residual
}

/// Routing decision for a single concept vector.
pub fn route(selectors: &[Selector], concepts_row: &[f64]) -> Result<Route> {
    let t = Tensor::from_rows(1, concepts_row.len(), concepts_row.to_vec())?;
    let pis: Vec<f64> = selectors.iter().map(|s| s.pi(&t)[0]).collect();
    Ok(route_from_pis(&pis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn stratification_follows_class_fractions() {
        let tm = stratify_coverage(0.2, [80, 20]).unwrap();
        assert!((tm[0] - 0.16).abs() < 1e-12 && (tm[1] - 0.04).abs() < 1e-12);
        assert_eq!(stratify_coverage(1.0, [50, 50]).unwrap(), [0.5, 0.5]);
        let tm = stratify_coverage(0.5, [9700, 300]).unwrap();
        assert!((tm[0] - 0.485).abs() < 1e-12);
        assert!((tm[1] - 0.015).abs() < 1e-12);
        assert!(stratify_coverage(0.5, [10, 0]).is_err());
        assert!(stratify_coverage(0.0, [10, 10]).is_err());
    }

    #[test]
    fn empirical_coverage_soft_and_hard() {
        let stats = coverage_by_class(&[0.5, 0.5, 0.5, 0.5], &[0, 0, 1, 1]).unwrap();
        assert_eq!(stats.soft, [0.5, 0.5]);
        assert_eq!(stats.hard, [1.0, 1.0]); // 0.5 counts as covered

        // A single class group on its own: the soft mean of its pis.
        let entries = empirical_coverage(&[vec![0.2, 0.4, 0.9]]).unwrap();
        assert!((entries[0].soft - 0.5).abs() < 1e-12);

        let constant = empirical_coverage(&[vec![1.0, 1.0], vec![1.0]]).unwrap();
        assert!(constant.iter().all(|e| e.soft == 1.0 && e.hard == 1.0));

        assert!(coverage_by_class(&[1.0], &[1]).is_err()); // class 0 empty
    }

    #[test]
    fn selective_risk_zero_loss_and_cancellation() {
        assert_eq!(
            selective_risk(&[0.0, 0.0], &[1.0, 1.0], &[0, 1]).unwrap(),
            0.0
        );
        // One class, uniform raw loss L with constant pi p: the weighted
        // loss is L*p, coverage is p, so the risk is the raw loss again.
        let (l, p) = (0.7, 0.4);
        let weighted = vec![l * p; 5];
        let risk = selective_risk(&weighted, &[p, 1.0], &[0, 0, 0, 0, 0]).unwrap();
        assert!((risk - l).abs() < 1e-12);
    }

    #[test]
    fn low_coverage_class_dominates_risk() {
        let losses = vec![0.2, 0.2];
        let risk = selective_risk(&losses, &[0.9, 0.1], &[0, 1]).unwrap();
        let term0 = 0.2 / 0.9;
        let term1 = 0.2 / 0.1;
        assert!((risk - (term0 + term1)).abs() < 1e-12);
        assert!((term1 / term0 - 9.0).abs() < 1e-12);
    }

    #[test]
    fn collapsed_class_is_an_error() {
        let err = selective_risk(&[0.1, 0.1], &[0.5, 0.0], &[0, 1]).unwrap_err();
        assert!(matches!(err, Error::SelectorCollapse { class: 1, .. }));
    }

    #[test]
    fn penalty_zero_iff_constraint_met() {
        assert_eq!(coverage_penalty(&[0.5, 0.2], &[0.4, 0.1], 100.0), 0.0);
        let p = coverage_penalty(&[0.3], &[0.5], 100.0);
        assert!((p - 4.0).abs() < 1e-12);
        assert!(coverage_penalty(&[0.39999], &[0.4], 128.0) > 0.0);
    }

    #[test]
    fn routing_is_first_match_and_inclusive_at_half() {
        assert_eq!(route_from_pis(&[0.6, 0.9, 0.1]), Route::Expert(1));
        assert_eq!(route_from_pis(&[0.1, 0.2, 0.3]), Route::Residual);
        assert_eq!(route_from_pis(&[0.5, 0.0]), Route::Expert(1));
        assert_eq!(route_from_pis(&[0.49, 0.5]), Route::Expert(2));
        assert_eq!(route_from_pis(&[]), Route::Residual);
    }

    #[test]
    fn selector_outputs_are_probabilities() {
        let mut rng = Rng::seed_from_u64(3);
        let s = Selector::init(6, 16, 1, &mut rng);
        let c = Tensor::from_rows(4, 6, (0..24).map(|i| (i % 2) as f64).collect()).unwrap();
        for p in s.pi(&c) {
            assert!(p > 0.0 && p < 1.0);
        }
    }
}
