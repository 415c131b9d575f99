//! AUROC and the evaluation machinery: proportional AUROC, coverage
//! reporting, residual hardness tracing, concept ablation, and test-time
//! concept intervention.

use serde::{Deserialize, Serialize};

use crate::blackbox::{predict_concepts_from_features, Blackbox, Projection};
use crate::datagen::ConceptTriplet;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::experts::{ell_logits, EntropyLogicExpert};
use crate::pipeline::{MoieModel, Route, RouteTrace};

/// Area under the ROC curve via the Mann-Whitney rank statistic.
/// Ties contribute half credit (midranks). Errors on single-class input.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "AUROC requires both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Midranks over tie groups, 1-indexed.
    let n = scores.len();
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

/// A component's AUROC scaled by its empirical (hard) coverage.
pub fn proportional_auroc(auroc: f64, coverage: f64) -> f64 {
    auroc * coverage
}

/// Class-1 probability column from an [N,2] logit tensor.
pub fn positive_scores(logits: &Tensor) -> Vec<f64> {
    use crate::diffcore::nn::softmax_host;
    let p = softmax_host(logits);
    (0..p.rows()).map(|i| p.at(i, 1)).collect()
}

/// One row of the residual hardness trace: the samples still uncovered
/// after iterations 1..=k, and the original blackbox's AUROC on them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardnessRow {
    pub iteration: usize,
    pub subset_size: usize,
    /// None when the subset holds a single class.
    pub f0_auroc_on_subset: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardnessTrace {
    pub global_f0_auroc: f64,
    pub rows: Vec<HardnessRow>,
}

/// For each iteration k, score the original blackbox on the samples not
/// covered by experts 1..=k.
pub fn hardness_trace(
    model: &MoieModel,
    f0: &Blackbox,
    data: &ConceptTriplet,
) -> Result<HardnessTrace> {
    let logits = f0.logits(&data.x);
    let scores = positive_scores(&logits);
    let global = auroc(&scores, &data.y)?;
    let traces = model.predict(&data.x)?;

    let mut rows = Vec::new();
    for k in 1..=model.pairs.len() {
        let idx: Vec<usize> = traces
            .iter()
            .enumerate()
            .filter(|(_, t)| match t.route {
                Route::Expert(e) => e > k,
                Route::Residual => true,
            })
            .map(|(i, _)| i)
            .collect();
        let sub_scores: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let sub_labels: Vec<u8> = idx.iter().map(|&i| data.y[i]).collect();
        let value = if idx.is_empty() {
            None
        } else {
            auroc(&sub_scores, &sub_labels).ok()
        };
        rows.push(HardnessRow {
            iteration: k,
            subset_size: idx.len(),
            f0_auroc_on_subset: value,
        });
    }
    Ok(HardnessTrace {
        global_f0_auroc: global,
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationStep {
    /// None for the baseline point before any concept is zeroed.
    pub zeroed_concept: Option<usize>,
    pub auroc: f64,
}

/// Zero concept columns one at a time in the given order (cumulatively)
/// and re-score the expert after each removal.
pub fn concept_ablation(
    expert: &EntropyLogicExpert,
    concepts: &Tensor,
    labels: &[u8],
    order: &[usize],
) -> Result<Vec<AblationStep>> {
    let mut c = concepts.clone();
    let mut curve = Vec::with_capacity(order.len() + 1);
    let score = |c: &Tensor| -> Result<f64> {
        let logits = ell_logits(expert, c);
        auroc(&positive_scores(&logits), labels)
    };
    curve.push(AblationStep {
        zeroed_concept: None,
        auroc: score(&c)?,
    });
    for &j in order {
        let cols = c.cols();
        if j >= cols {
            return Err(Error::Metric(format!(
                "ablation order references concept {j} of {cols}"
            )));
        }
        for i in 0..c.rows() {
            c.data[i * cols + j] = 0.0;
        }
        curve.push(AblationStep {
            zeroed_concept: Some(j),
            auroc: score(&c)?,
        });
    }
    Ok(curve)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionPoint {
    pub fraction: f64,
    pub auroc: f64,
}

/// Test-time intervention: replace the top-`fraction` of predicted
/// concepts (by the routing expert's attention order) with ground truth
/// and re-score the experts on their covered samples. Routing itself is
/// computed on unintervened concepts and held fixed.
pub fn test_time_intervention(
    model: &MoieModel,
    bb: &Blackbox,
    projection: &Projection,
    data: &ConceptTriplet,
    fractions: &[f64],
) -> Result<Vec<InterventionPoint>> {
    let features = bb.features(&data.x);
    let predicted = predict_concepts_from_features(projection, &features)?;
    let truth = projection.admitted_columns(&data.concepts)?;
    let traces = model.predict_from_concepts(&predicted)?;

    let covered: Vec<usize> = traces
        .iter()
        .enumerate()
        .filter(|(_, t)| matches!(t.route, Route::Expert(_)))
        .map(|(i, _)| i)
        .collect();
    if covered.is_empty() {
        return Err(Error::Metric("no expert-covered samples to intervene on".into()));
    }

    let n_adm = predicted.cols();
    let mut points = Vec::with_capacity(fractions.len());
    for &frac in fractions {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::Metric(format!("fraction {frac} outside [0,1]")));
        }
        let k = (frac * n_adm as f64).round() as usize;
        let mut scores = Vec::with_capacity(covered.len());
        let mut labels = Vec::with_capacity(covered.len());
        for &i in &covered {
            let expert_idx = match traces[i].route {
                Route::Expert(e) => e - 1,
                Route::Residual => unreachable!(),
            };
            let expert = &model.pairs[expert_idx].1;
            let order = expert.attention_order();
            let mut row = predicted.row(i).to_vec();
            for &j in order.iter().take(k) {
                row[j] = truth.at(i, j);
            }
            let logits = ell_logits(expert, &Tensor::from_rows(1, n_adm, row)?);
            scores.push(positive_scores(&logits)[0]);
            labels.push(data.y[i]);
        }
        points.push(InterventionPoint {
            fraction: frac,
            auroc: auroc(&scores, &labels)?,
        });
    }
    Ok(points)
}

/// Mean and (for two or more values) standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-component evaluation of a trained mixture on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureEval {
    /// AUROC of expert-covered samples only (the interpretable mixture).
    pub moie_auroc: Option<f64>,
    /// AUROC over all samples, residual included.
    pub moie_plus_r_auroc: f64,
    /// Hard coverage fraction per expert (first-match routing), then the
    /// residual fraction; sums to 1.
    pub coverage_per_component: Vec<f64>,
    /// AUROC per component on its routed subset (None if single-class).
    pub auroc_per_component: Vec<Option<f64>>,
    pub proportional_auroc_per_component: Vec<Option<f64>>,
    pub covered_fraction: f64,
}

pub fn evaluate_mixture(traces: &[RouteTrace], labels: &[u8]) -> Result<MixtureEval> {
    let n = traces.len();
    if n == 0 || n != labels.len() {
        return Err(Error::Metric("trace/label length mismatch".into()));
    }
    let k = traces
        .iter()
        .filter_map(|t| match t.route {
            Route::Expert(e) => Some(e),
            Route::Residual => None,
        })
        .max()
        .unwrap_or(0);
    let n_components = traces
        .iter()
        .map(|t| match t.route {
            Route::Expert(e) => e,
            Route::Residual => 0,
        })
        .max()
        .map(|_| k + 1)
        .unwrap_or(1);

    let mut all_scores = Vec::with_capacity(n);
    for t in traces {
        all_scores.push(t.positive_score);
    }
    let moie_plus_r = auroc(&all_scores, labels)?;

    let covered_idx: Vec<usize> = (0..n)
        .filter(|&i| matches!(traces[i].route, Route::Expert(_)))
        .collect();
    let moie = if covered_idx.is_empty() {
        None
    } else {
        let s: Vec<f64> = covered_idx.iter().map(|&i| all_scores[i]).collect();
        let l: Vec<u8> = covered_idx.iter().map(|&i| labels[i]).collect();
        auroc(&s, &l).ok()
    };

    let mut coverage = Vec::new();
    let mut per_auroc = Vec::new();
    let mut per_prop = Vec::new();
    for comp in 0..n_components {
        let idx: Vec<usize> = (0..n)
            .filter(|&i| match traces[i].route {
                Route::Expert(e) => comp + 1 == e,
                Route::Residual => comp == n_components - 1,
            })
            .collect();
        let cov = idx.len() as f64 / n as f64;
        let a = if idx.is_empty() {
            None
        } else {
            let s: Vec<f64> = idx.iter().map(|&i| all_scores[i]).collect();
            let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            auroc(&s, &l).ok()
        };
        coverage.push(cov);
        per_prop.push(a.map(|v| proportional_auroc(v, cov)));
        per_auroc.push(a);
    }

    Ok(MixtureEval {
        moie_auroc: moie,
        moie_plus_r_auroc: moie_plus_r,
        coverage_per_component: coverage,
        auroc_per_component: per_auroc,
        proportional_auroc_per_component: per_prop,
        covered_fraction: covered_idx.len() as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force pair counting: fraction of (positive, negative) pairs
    /// ordered correctly, ties worth half.
    pub fn auroc_bruteforce(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_separation_scores_one() {
        let s = vec![0.9, 0.8, 0.2, 0.1];
        let y = vec![1, 1, 0, 0];
        assert_eq!(auroc(&s, &y).unwrap(), 1.0);
    }

    #[test]
    fn known_hand_value() {
        // 3 of 4 pairs correctly ordered.
        let s = vec![0.1, 0.4, 0.35, 0.8];
        let y = vec![0, 0, 1, 1];
        assert_eq!(auroc(&s, &y).unwrap(), 0.75);
        assert_eq!(auroc_bruteforce(&s, &y), 0.75);
    }

    #[test]
    fn shuffled_labels_near_half() {
        use rand::{Rng as _, SeedableRng};
        let mut rng = crate::seed::Rng::seed_from_u64(4);
        let n = 4000;
        let s: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        let a = auroc(&s, &y).unwrap();
        assert!((a - 0.5).abs() < 0.03, "auroc = {a}");
    }

    #[test]
    fn single_class_is_an_error_not_nan() {
        assert!(auroc(&[0.1, 0.9], &[1, 1]).is_err());
        assert!(auroc(&[0.1, 0.9], &[0, 0]).is_err());
    }

    #[test]
    fn rank_route_equals_bruteforce_exactly_with_ties() {
        use rand::{Rng as _, SeedableRng};
        let mut rng = crate::seed::Rng::seed_from_u64(99);
        for case in 0..100 {
            let n = rng.gen_range(5..=200);
            // Quantized scores force plenty of ties.
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..9) as f64 * 0.125).collect();
            let mut y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
            if y.iter().all(|&v| v == 1) {
                y[0] = 0;
            }
            if y.iter().all(|&v| v == 0) {
                y[0] = 1;
            }
            let fast = auroc(&s, &y).unwrap();
            let slow = auroc_bruteforce(&s, &y);
            assert_eq!(fast.to_bits(), slow.to_bits(), "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn proportional_auroc_is_a_plain_product() {
        assert_eq!(proportional_auroc(0.9, 0.5), 0.45);
        assert_eq!(proportional_auroc(0.7, 0.0), 0.0);
    }

    #[test]
    fn mean_stderr_requires_two_seeds() {
        let (m, se) = mean_stderr(&[0.8]);
        assert_eq!(m, 0.8);
        assert!(se.is_none());
        let (m, se) = mean_stderr(&[0.8, 0.9]);
        assert!((m - 0.85).abs() < 1e-12);
        assert!(se.is_some());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
