//! The iterative distillation loop: joint selector/expert training with
//! coverage-constrained selective risk, residual construction and head
//! refitting, the stopping rule, and mixture inference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blackbox::{
    gather_rows, predict_concepts_from_features, step_or_diverged, Blackbox, Projection,
};
use crate::datagen::ConceptTriplet;
use crate::diffcore::nn::{
    kd_teacher_constants, one_hot, param_hash, shuffled_indices, softmax_host, wire_kd_per_sample,
    Dense, Mlp,
};
use crate::diffcore::{Graph, Optimizer, Tensor};
use crate::error::{Error, Result};
use crate::experts::{
    ell_logits, extract_fol, read_back_expert, wire_expert, EntropyLogicExpert, FolExplanation,
};
use crate::seed::{derive_seed, Rng};
pub use crate::selectors::Route;
use crate::selectors::{coverage_by_class, CoveragePlan, CoverageStats, Selector};
use rand::SeedableRng;

/// Product of (1 - pi_j) over the prior selectors, per sample. The empty
/// product (first iteration) is 1.
pub fn cumulative_weights(prior_pis: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut w = vec![1.0; n];
    for pis in prior_pis {
        for (wi, &p) in w.iter_mut().zip(pis) {
            *wi *= 1.0 - p;
        }
    }
    w
}

/// Host-side distillation loss for one sample:
/// alpha * T^2 * KL(softmax(teacher/T) || softmax(student/T))
/// + (1 - alpha) * CE(y, student).
pub fn distillation_loss(
    teacher_logits: &[f64],
    student_logits: &[f64],
    label: u8,
    alpha_kd: f64,
    t_kd: f64,
) -> f64 {
    let m = teacher_logits.len();
    let t = Tensor::from_rows(1, m, teacher_logits.iter().map(|&v| v / t_kd).collect()).unwrap();
    let s = Tensor::from_rows(1, m, student_logits.iter().map(|&v| v / t_kd).collect()).unwrap();
    let pt = softmax_host(&t);
    let ps = softmax_host(&s);
    let kl: f64 = pt
        .data
        .iter()
        .zip(&ps.data)
        .map(|(&p, &q)| if p > 0.0 { p * (p.ln() - q.ln()) } else { 0.0 })
        .sum();
    let ps_raw = softmax_host(&Tensor::from_rows(1, m, student_logits.to_vec()).unwrap());
    let ce = -ps_raw.data[label as usize].ln();
    alpha_kd * t_kd * t_kd * kl + (1.0 - alpha_kd) * ce
}

/// Per-sample residual targets: teacher minus expert, the logit
/// difference the refit head must reproduce.
pub fn residual_targets(teacher_logits: &Tensor, expert_logits: &Tensor) -> Tensor {
    let mut out = teacher_logits.clone();
    for (o, &g) in out.data.iter_mut().zip(&expert_logits.data) {
        *o -= g;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationHyper {
    pub expert_hidden: Vec<usize>,
    pub selector_hidden: usize,
    pub t_lens: f64,
    pub lambda_lens: f64,
    pub alpha_kd: f64,
    pub t_kd: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
}

impl Default for IterationHyper {
    fn default() -> Self {
        IterationHyper {
            expert_hidden: vec![30, 30],
            selector_hidden: 16,
            t_lens: 7.6,
            lambda_lens: 1e-4,
            alpha_kd: 0.99,
            t_kd: 20.0,
            lr: 0.01,
            epochs: 150,
            batch_size: 1028,
            warmup_epochs: 10,
        }
    }
}

/// One split's worth of inputs for an iteration: predicted concepts,
/// labels, current-teacher logits, and the frozen cumulative weights.
pub struct IterationSplit<'a> {
    pub concepts: &'a Tensor,
    pub labels: &'a [u8],
    pub teacher_logits: &'a Tensor,
    pub w_prev: &'a [f64],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationStats {
    pub train_coverage: CoverageStats,
    pub val_coverage: CoverageStats,
    pub best_val_objective: f64,
    pub epochs_run: usize,
}

struct ObjectiveGraph {
    g: Graph,
    loss: crate::diffcore::NodeId,
    selector_params: Vec<crate::diffcore::NodeId>,
    wired_expert: crate::experts::WiredExpert,
    selector_mlp: Mlp,
}

/// Wire the full per-iteration objective:
///   selective risk of (KD loss * pi * w_prev) per class / soft coverage
///   + lambda_s * sum_m max(0, tau_m - zeta_m)^2
///   + lambda_lens * attention entropy.
fn build_objective(
    selector: &Selector,
    expert: &EntropyLogicExpert,
    plan: &CoveragePlan,
    hyper: &IterationHyper,
    train_selector: bool,
    train_expert: bool,
) -> Result<ObjectiveGraph> {
    let nc = expert.n_concepts();
    let mut g = Graph::new();
    let c = g.input("concepts", nc);
    let teacher_probs = g.input("teacher_probs", 2);
    let teacher_plogp = g.input("teacher_plogp", 1);
    let onehot = g.input("onehot", 2);
    let w_prev = g.input("w_prev", 1);
    let mask0 = g.input("mask0", 1);
    let mask1 = g.input("mask1", 1);

    let (sel_logit, selector_params) = selector.mlp.wire(&mut g, c, "selector")?;
    let pi = g.sigmoid(sel_logit);
    g.rename(pi, "pi");
    let wired = wire_expert(expert, &mut g, c, "expert")?;

    let kd = wire_kd_per_sample(
        &mut g,
        wired.logits,
        teacher_probs,
        teacher_plogp,
        onehot,
        hyper.alpha_kd,
        hyper.t_kd,
    )?;
    let kd_pi = g.mul(kd, pi)?;
    let weighted = g.mul(kd_pi, w_prev)?;

    let mut objective = None;
    for (m, mask) in [mask0, mask1].into_iter().enumerate() {
        let n_m = g.sum_all(mask);
        let num_sum = {
            let masked = g.mul(weighted, mask)?;
            g.sum_all(masked)
        };
        let num = g.div(num_sum, n_m)?;
        let zeta = {
            let pim = g.mul(pi, mask)?;
            let s = g.sum_all(pim);
            g.div(s, n_m)?
        };
        let risk_m = g.div(num, zeta)?;
        g.rename(risk_m, &format!("risk_class{m}"));
        // Penalty branch: lambda_s * relu(tau_m - zeta)^2
        let neg = g.scale(zeta, -1.0);
        let gap = g.add_scalar(neg, plan.tau_m[m]);
        let hinge = g.relu(gap);
        let sq = g.mul(hinge, hinge)?;
        let pen = g.scale(sq, plan.lambda_s);
        let term = g.add(risk_m, pen)?;
        objective = Some(match objective {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    let ent = g.scale(wired.entropy, expert.lambda_lens);
    let loss = g.add(objective.unwrap(), ent)?;
    g.rename(loss, "objective");

    // Frozen halves contribute to the loss but receive no updates.
    let _ = (train_selector, train_expert);
    Ok(ObjectiveGraph {
        g,
        loss,
        selector_params,
        wired_expert: wired,
        selector_mlp: selector.mlp.clone(),
    })
}

fn class_masks(labels: &[u8]) -> (Tensor, Tensor) {
    let m0: Vec<f64> = labels.iter().map(|&y| f64::from(y == 0)).collect();
    let m1: Vec<f64> = labels.iter().map(|&y| f64::from(y == 1)).collect();
    (Tensor::column(m0), Tensor::column(m1))
}

fn bind_split(g: &mut Graph, split: &IterationSplit, idx: &[usize], t_kd: f64) -> Result<()> {
    let concepts = gather_rows(split.concepts, idx);
    let teacher = gather_rows(split.teacher_logits, idx);
    let (probs, plogp) = kd_teacher_constants(&teacher, t_kd);
    let labels: Vec<u8> = idx.iter().map(|&i| split.labels[i]).collect();
    let (m0, m1) = class_masks(&labels);
    let w: Vec<f64> = idx.iter().map(|&i| split.w_prev[i]).collect();
    g.bind("concepts", concepts)?;
    g.bind("teacher_probs", probs)?;
    g.bind("teacher_plogp", plogp)?;
    g.bind("onehot", one_hot(&labels))?;
    g.bind("w_prev", Tensor::column(w))?;
    g.bind("mask0", m0)?;
    g.bind("mask1", m1)?;
    Ok(())
}

/// Jointly train one iteration's selector and expert against the frozen
/// teacher, honoring the coverage plan. Returns the best-validation pair.
pub fn train_iteration(
    train: &IterationSplit,
    val: &IterationSplit,
    plan: &CoveragePlan,
    hyper: &IterationHyper,
    iteration: usize,
    seed: u64,
) -> Result<(Selector, EntropyLogicExpert, IterationStats)> {
    train_iteration_inner(train, val, plan, hyper, iteration, seed, true, true)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn train_iteration_inner(
    train: &IterationSplit,
    val: &IterationSplit,
    plan: &CoveragePlan,
    hyper: &IterationHyper,
    iteration: usize,
    seed: u64,
    train_selector: bool,
    train_expert: bool,
) -> Result<(Selector, EntropyLogicExpert, IterationStats)> {
    let mut rng = Rng::seed_from_u64(seed);
    let nc = train.concepts.cols();
    let selector = Selector::init(nc, hyper.selector_hidden, iteration, &mut rng);
    let expert = EntropyLogicExpert::init(
        nc,
        &hyper.expert_hidden,
        hyper.t_lens,
        hyper.lambda_lens,
        &mut rng,
    );
    train_pair(
        selector,
        expert,
        train,
        val,
        plan,
        hyper,
        &mut rng,
        train_selector,
        train_expert,
    )
}

/// Training body shared by fresh iterations and transfer fine-tuning.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_pair(
    selector_init: Selector,
    expert_init: EntropyLogicExpert,
    train: &IterationSplit,
    val: &IterationSplit,
    plan: &CoveragePlan,
    hyper: &IterationHyper,
    rng: &mut Rng,
    train_selector: bool,
    train_expert: bool,
) -> Result<(Selector, EntropyLogicExpert, IterationStats)> {
    let mut built = build_objective(
        &selector_init,
        &expert_init,
        plan,
        hyper,
        train_selector,
        train_expert,
    )?;
    let mut trainable = Vec::new();
    if train_selector {
        trainable.extend_from_slice(&built.selector_params);
    }
    if train_expert {
        trainable.extend_from_slice(&built.wired_expert.params);
    }
    if trainable.is_empty() {
        return Err(Error::Config(
            "at least one of selector/expert must be trainable".into(),
        ));
    }
    let mut opt = Optimizer::adam(hyper.lr, &trainable);

    let n = train.labels.len();
    let all_val: Vec<usize> = (0..val.labels.len()).collect();
    let mut best: Option<(f64, Selector, EntropyLogicExpert)> = None;
    let mut epochs_run = 0;

    for epoch in 0..hyper.epochs {
        epochs_run = epoch + 1;
        let order = shuffled_indices(n, rng);
        for chunk in order.chunks(hyper.batch_size) {
            let has_both = chunk.iter().any(|&i| train.labels[i] == 0)
                && chunk.iter().any(|&i| train.labels[i] == 1);
            if !has_both {
                continue;
            }
            bind_split(&mut built.g, train, chunk, hyper.t_kd)?;
            step_or_diverged(&mut built.g, built.loss, &mut opt, epoch)?;
        }

        // Snapshot for validation scoring and collapse monitoring.
        let mut sel = selector_init.clone();
        sel.mlp = built.selector_mlp.clone();
        sel.mlp.read_back(&built.g, &built.selector_params);
        let mut exp = expert_init.clone();
        read_back_expert(&mut exp, &built.g, &built.wired_expert);

        bind_split(&mut built.g, val, &all_val, hyper.t_kd)?;
        built.g.forward()?;
        let val_objective = built.g.output(built.loss).data[0];

        if epoch >= hyper.warmup_epochs {
            let pis = sel.pi(train.concepts);
            let cov = coverage_by_class(&pis, train.labels)?;
            for m in 0..2 {
                if cov.soft[m] < 1e-3 {
                    return Err(Error::SelectorCollapse {
                        class: m,
                        zeta: cov.soft[m],
                    });
                }
            }
        }
        if best.as_ref().map_or(true, |(b, ..)| val_objective < *b) {
            best = Some((val_objective, sel, exp));
        }
    }

    let (best_val_objective, selector, expert) = best.ok_or_else(|| {
        Error::Config("iteration trained for zero epochs".into())
    })?;
    let train_coverage = coverage_by_class(&selector.pi(train.concepts), train.labels)?;
    let val_coverage = coverage_by_class(&selector.pi(val.concepts), val.labels)?;
    Ok((
        selector,
        expert,
        IterationStats {
            train_coverage,
            val_coverage,
            best_val_objective,
            epochs_run,
        },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ResidualHyper {
    fn default() -> Self {
        ResidualHyper {
            lr: 0.01,
            epochs: 30,
            batch_size: 1028,
        }
    }
}

/// Refit the classifier head on frozen features against the residual
/// targets (teacher minus expert logits), weighted by the probability of
/// the sample escaping every selector so far. Returns the head with the
/// best weighted validation loss.
#[allow(clippy::too_many_arguments)]
pub fn fit_residual(
    features_train: &Tensor,
    targets_train: &Tensor,
    weights_train: &[f64],
    features_val: &Tensor,
    targets_val: &Tensor,
    weights_val: &[f64],
    head_init: &Dense,
    hyper: &ResidualHyper,
    seed: u64,
) -> Result<Dense> {
    let mut rng = Rng::seed_from_u64(seed);
    let head_mlp = Mlp {
        layers: vec![head_init.clone()],
        relu_output: false,
    };
    let mut g = Graph::new();
    let f = g.input("features", features_train.cols());
    let target = g.input("target", 2);
    let w = g.input("w", 1);
    let (pred, params) = head_mlp.wire(&mut g, f, "residual_head")?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let per_sample = g.row_sum(sq);
    let per_sample = g.scale(per_sample, 0.5); // mean over the two logits
    let weighted = g.mul(per_sample, w)?;
    let loss = g.mean_all(weighted);
    let mut opt = Optimizer::adam(hyper.lr, &params);

    let n = features_train.rows();
    let all_val: Vec<usize> = (0..features_val.rows()).collect();
    let mut best: Option<(f64, Dense)> = None;

    let bind = |g: &mut Graph,
                feats: &Tensor,
                targs: &Tensor,
                ws: &[f64],
                idx: &[usize]|
     -> Result<()> {
        g.bind("features", gather_rows(feats, idx))?;
        g.bind("target", gather_rows(targs, idx))?;
        g.bind("w", Tensor::column(idx.iter().map(|&i| ws[i]).collect()))?;
        Ok(())
    };

    for epoch in 0..hyper.epochs {
        // Validate-then-train so the untouched initialization is a
        // candidate; with all-zero weights training is a no-op and the
        // initial head is returned.
        bind(&mut g, features_val, targets_val, weights_val, &all_val)?;
        g.forward()?;
        let val_loss = g.output(loss).data[0];
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            let mut tmp = head_mlp.clone();
            tmp.read_back(&g, &params);
            best = Some((val_loss, tmp.layers[0].clone()));
        }

        let order = shuffled_indices(n, &mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            bind(&mut g, features_train, targets_train, weights_train, chunk)?;
            step_or_diverged(&mut g, loss, &mut opt, epoch)?;
        }
    }
    // Final candidate after the last epoch.
    bind(&mut g, features_val, targets_val, weights_val, &all_val)?;
    g.forward()?;
    let val_loss = g.output(loss).data[0];
    if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
        let mut tmp = head_mlp.clone();
        tmp.read_back(&g, &params);
        best = Some((val_loss, tmp.layers[0].clone()));
    }
    Ok(best.unwrap().1)
}

// ── The mixture model ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationRef {
    /// 1-based expert iteration.
    pub expert: usize,
    pub class: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteTrace {
    pub sample: usize,
    pub route: Route,
    pub pis: Vec<f64>,
    pub logits: [f64; 2],
    pub positive_score: f64,
    pub predicted: u8,
    pub explanation: Option<ExplanationRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Scheduled coverage as a fraction of the full dataset.
    pub tau: f64,
    /// The same target rescaled to the still-uncovered remainder this
    /// iteration actually trains on.
    pub tau_effective: f64,
    pub tau_m: [f64; 2],
    /// Selector coverage measured on the training/validation remainder.
    pub train_coverage: CoverageStats,
    pub val_coverage: CoverageStats,
    pub best_val_objective: f64,
    /// Fraction of training samples covered by any selector so far
    /// (first-match union); non-decreasing in the iteration.
    pub cumulative_hard_coverage: f64,
    pub phi_hash: String,
}

/// The complete distilled artifact: frozen trunk, projection, ordered
/// (selector, expert) pairs, final residual head, plans and ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoieModel {
    pub phi: Mlp,
    pub projection: Projection,
    pub pairs: Vec<(Selector, EntropyLogicExpert)>,
    pub residual_head: Dense,
    pub plans: Vec<CoveragePlan>,
    pub ledger: Vec<IterationRecord>,
    /// Per expert, the per-class explanations extracted from its covered
    /// training samples.
    pub explanations: Vec<Vec<FolExplanation>>,
    pub phi_hash: String,
    pub attention_quantile: f64,
}

impl MoieModel {
    pub fn n_experts(&self) -> usize {
        self.pairs.len()
    }

    pub fn features(&self, x: &Tensor) -> Tensor {
        self.phi.forward_host(x)
    }

    pub fn concepts(&self, x: &Tensor) -> Result<Tensor> {
        predict_concepts_from_features(&self.projection, &self.features(x))
    }

    /// Full routing: concepts from the projection, first-match selector
    /// routing, expert logits for covered rows, residual-head logits for
    /// the rest.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<RouteTrace>> {
        let features = self.features(x);
        let concepts = predict_concepts_from_features(&self.projection, &features)?;
        self.predict_with(&concepts, Some(&features))
    }

    /// Routing from concepts alone. Residual rows get neutral logits when
    /// no features are supplied; expert-side analyses filter them out.
    pub fn predict_from_concepts(&self, concepts: &Tensor) -> Result<Vec<RouteTrace>> {
        self.predict_with(concepts, None)
    }

    pub fn predict_with(
        &self,
        concepts: &Tensor,
        features: Option<&Tensor>,
    ) -> Result<Vec<RouteTrace>> {
        let n = concepts.rows();
        let pis_per_selector: Vec<Vec<f64>> =
            self.pairs.iter().map(|(s, _)| s.pi(concepts)).collect();
        let expert_logits: Vec<Tensor> = self
            .pairs
            .iter()
            .map(|(_, e)| ell_logits(e, concepts))
            .collect();
        let residual_logits = features.map(|f| self.residual_head.forward_host(f));

        let mut traces = Vec::with_capacity(n);
        for i in 0..n {
            let pis: Vec<f64> = pis_per_selector.iter().map(|p| p[i]).collect();
            let route = crate::selectors::route_from_pis(&pis);
            let (logits, explanation) = match route {
                Route::Expert(k) => {
                    let l = &expert_logits[k - 1];
                    let logits = [l.at(i, 0), l.at(i, 1)];
                    let predicted = u8::from(logits[1] > logits[0]);
                    (
                        logits,
                        Some(ExplanationRef {
                            expert: k,
                            class: predicted,
                        }),
                    )
                }
                Route::Residual => match &residual_logits {
                    Some(l) => ([l.at(i, 0), l.at(i, 1)], None),
                    None => ([0.0, 0.0], None),
                },
            };
            let probs = softmax_host(&Tensor::from_rows(1, 2, logits.to_vec())?);
            traces.push(RouteTrace {
                sample: i,
                route,
                pis,
                logits,
                positive_score: probs.at(0, 1),
                predicted: u8::from(logits[1] > logits[0]),
                explanation,
            });
        }
        Ok(traces)
    }

    pub fn explanation_for(&self, r: &ExplanationRef) -> Option<&FolExplanation> {
        self.explanations
            .get(r.expert - 1)?
            .iter()
            .find(|f| f.target_class == r.class)
    }

    pub fn admitted_names(&self) -> Vec<String> {
        self.projection.admitted_names()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CoverageSchedule {
    /// tau_k = first * decay^(k-1)
    Geometric { first: f64, decay: f64 },
    Explicit(Vec<f64>),
}

impl CoverageSchedule {
    pub fn tau(&self, iteration: usize) -> f64 {
        match self {
            CoverageSchedule::Geometric { first, decay } => {
                first * decay.powi(iteration as i32 - 1)
            }
            CoverageSchedule::Explicit(taus) => {
                let idx = (iteration - 1).min(taus.len().saturating_sub(1));
                taus[idx]
            }
        }
    }
}

impl Default for CoverageSchedule {
    fn default() -> Self {
        // Full-data fractions per iteration; the decay keeps the infinite
        // sum at 1 so the loop lands near the stopping coverage instead of
        // being forced to drain the residual.
        CoverageSchedule::Geometric {
            first: 0.4,
            decay: 0.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub coverage_schedule: CoverageSchedule,
    pub max_experts: usize,
    pub stop_coverage: f64,
    pub lambda_s: f64,
    pub iteration: IterationHyper,
    pub residual: ResidualHyper,
    pub attention_quantile: f64,
    /// Train experts on thresholded ground-truth concepts instead of the
    /// projection's probabilities (deployment-consistent default: off).
    pub train_on_ground_truth_concepts: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            coverage_schedule: CoverageSchedule::default(),
            max_experts: 5,
            stop_coverage: 0.9,
            lambda_s: 128.0,
            iteration: IterationHyper::default(),
            residual: ResidualHyper::default(),
            attention_quantile: 0.7,
            train_on_ground_truth_concepts: false,
            seed: 0,
        }
    }
}

/// Run the full distillation loop: per iteration, jointly train a
/// selector/expert pair against the current teacher, then refit the head
/// on the residual; stop once the cumulative hard coverage reaches the
/// target or the expert budget is spent.
pub fn run_moie(
    bb: &Blackbox,
    projection: &Projection,
    train: &ConceptTriplet,
    val: &ConceptTriplet,
    cfg: &PipelineConfig,
) -> Result<MoieModel> {
    let phi_hash = bb.phi_hash();
    let features_train = bb.features(&train.x);
    let features_val = bb.features(&val.x);
    let concepts_train;
    let concepts_val;
    if cfg.train_on_ground_truth_concepts {
        concepts_train = projection.admitted_columns(&train.concepts)?;
        concepts_val = projection.admitted_columns(&val.concepts)?;
    } else {
        concepts_train = predict_concepts_from_features(projection, &features_train)?;
        concepts_val = predict_concepts_from_features(projection, &features_val)?;
    }

    let mut teacher_train = bb.logits_from_features(&features_train);
    let mut teacher_val = bb.logits_from_features(&features_val);
    let mut head = bb.head.clone();

    let mut prior_pis_train: Vec<Vec<f64>> = Vec::new();
    let mut prior_pis_val: Vec<Vec<f64>> = Vec::new();
    let mut pairs = Vec::new();
    let mut plans = Vec::new();
    let mut ledger = Vec::new();
    let mut explanations = Vec::new();

    // Iteration k trains on the remainder the earlier selectors left
    // uncovered; the scheduled tau is a full-dataset fraction, so it is
    // rescaled to that remainder before stratification.
    let mut remaining_train: Vec<usize> = (0..train.len()).collect();
    let mut remaining_val: Vec<usize> = (0..val.len()).collect();

    for k in 1..=cfg.max_experts {
        let tau = cfg.coverage_schedule.tau(k).clamp(1e-6, 1.0);
        let remainder_frac = remaining_train.len() as f64 / train.len() as f64;
        let tau_effective = (tau / remainder_frac).clamp(1e-6, 0.98);
        let rem_labels_train: Vec<u8> = remaining_train.iter().map(|&i| train.y[i]).collect();
        let rem_labels_val: Vec<u8> = remaining_val.iter().map(|&i| val.y[i]).collect();
        let rem_counts = {
            let pos = rem_labels_train.iter().filter(|&&y| y == 1).count();
            [rem_labels_train.len() - pos, pos]
        };
        if rem_counts[0] == 0 || rem_counts[1] == 0 {
            break; // nothing trainable is left uncovered
        }
        if rem_labels_val.iter().all(|&y| y == 0) || rem_labels_val.iter().all(|&y| y == 1) {
            break;
        }
        let plan = CoveragePlan::new(tau_effective, rem_counts, cfg.lambda_s)?;

        let w_prev_train = cumulative_weights(&prior_pis_train, train.len());
        let w_prev_val = cumulative_weights(&prior_pis_val, val.len());
        let rem_concepts_train = gather_rows(&concepts_train, &remaining_train);
        let rem_concepts_val = gather_rows(&concepts_val, &remaining_val);
        let rem_teacher_train = gather_rows(&teacher_train, &remaining_train);
        let rem_teacher_val = gather_rows(&teacher_val, &remaining_val);
        let rem_w_train: Vec<f64> = remaining_train.iter().map(|&i| w_prev_train[i]).collect();
        let rem_w_val: Vec<f64> = remaining_val.iter().map(|&i| w_prev_val[i]).collect();
        let train_split = IterationSplit {
            concepts: &rem_concepts_train,
            labels: &rem_labels_train,
            teacher_logits: &rem_teacher_train,
            w_prev: &rem_w_train,
        };
        let val_split = IterationSplit {
            concepts: &rem_concepts_val,
            labels: &rem_labels_val,
            teacher_logits: &rem_teacher_val,
            w_prev: &rem_w_val,
        };
        let (selector, expert, stats) = train_iteration(
            &train_split,
            &val_split,
            &plan,
            &cfg.iteration,
            k,
            derive_seed(cfg.seed, &format!("iteration-{k}")),
        )?;

        // Residual refit: the teacher minus this expert, weighted by the
        // probability of not being covered by any selector through k.
        let pis_train = selector.pi(&concepts_train);
        let pis_val = selector.pi(&concepts_val);
        let expert_logits_train = ell_logits(&expert, &concepts_train);
        let expert_logits_val = ell_logits(&expert, &concepts_val);
        let targets_train = residual_targets(&teacher_train, &expert_logits_train);
        let targets_val = residual_targets(&teacher_val, &expert_logits_val);
        let w_resid_train: Vec<f64> = w_prev_train
            .iter()
            .zip(&pis_train)
            .map(|(&w, &p)| w * (1.0 - p))
            .collect();
        let w_resid_val: Vec<f64> = w_prev_val
            .iter()
            .zip(&pis_val)
            .map(|(&w, &p)| w * (1.0 - p))
            .collect();
        head = fit_residual(
            &features_train,
            &targets_train,
            &w_resid_train,
            &features_val,
            &targets_val,
            &w_resid_val,
            &head,
            &cfg.residual,
            derive_seed(cfg.seed, &format!("residual-{k}")),
        )?;
        teacher_train = head.forward_host(&features_train);
        teacher_val = head.forward_host(&features_val);
        if std::env::var("MOIE_DEBUG").is_ok() {
            let s = crate::metrics::positive_scores(&teacher_val);
            let a = crate::metrics::auroc(&s, &val.y);
            let es = crate::metrics::positive_scores(&expert_logits_val);
            let ea = crate::metrics::auroc(&es, &val.y);
            eprintln!(
                "  [debug] iter {k}: f^{k} val auroc {:?}, expert-{k} global val auroc {:?}",
                a.map(|v| (v * 1e4).round() / 1e4),
                ea.map(|v| (v * 1e4).round() / 1e4)
            );
        }

        prior_pis_train.push(pis_train);
        prior_pis_val.push(pis_val);

        // First-match covered set of this expert on the training split.
        let covered_idx: Vec<usize> = (0..train.len())
            .filter(|&i| {
                prior_pis_train[k - 1][i] >= 0.5
                    && prior_pis_train[..k - 1].iter().all(|p| p[i] < 0.5)
            })
            .collect();
        let fols = if covered_idx.is_empty() {
            Vec::new()
        } else {
            let cov_c = gather_rows(&concepts_train, &covered_idx);
            let cov_y: Vec<u8> = covered_idx.iter().map(|&i| train.y[i]).collect();
            extract_fol(&expert, &cov_c, &cov_y, cfg.attention_quantile)?
        };

        remaining_train.retain(|&i| prior_pis_train[k - 1][i] < 0.5);
        remaining_val.retain(|&i| prior_pis_val[k - 1][i] < 0.5);
        let cumulative = 1.0 - remaining_train.len() as f64 / train.len() as f64;

        ledger.push(IterationRecord {
            iteration: k,
            tau,
            tau_effective,
            tau_m: plan.tau_m,
            train_coverage: stats.train_coverage,
            val_coverage: stats.val_coverage,
            best_val_objective: stats.best_val_objective,
            cumulative_hard_coverage: cumulative,
            phi_hash: phi_hash.clone(),
        });
        plans.push(plan);
        pairs.push((selector, expert));
        explanations.push(fols);

        if cumulative >= cfg.stop_coverage {
            break;
        }
    }

    if bb.phi_hash() != phi_hash {
        return Err(Error::Data(
            "feature extractor changed during distillation".into(),
        ));
    }
    Ok(MoieModel {
        phi: bb.phi.clone(),
        projection: projection.clone(),
        pairs,
        residual_head: head,
        plans,
        ledger,
        explanations,
        phi_hash,
        attention_quantile: cfg.attention_quantile,
    })
}

// ── Model directory serialization ────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    n_experts: usize,
    plans: Vec<CoveragePlan>,
    ledger: Vec<IterationRecord>,
    phi_hash: String,
    attention_quantile: f64,
    admitted_concepts: Vec<String>,
}

pub fn save_model(model: &MoieModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = ModelManifest {
        n_experts: model.n_experts(),
        plans: model.plans.clone(),
        ledger: model.ledger.clone(),
        phi_hash: model.phi_hash.clone(),
        attention_quantile: model.attention_quantile,
        admitted_concepts: model.admitted_names(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    crate::diffcore::nn::save_checkpoint(&dir.join("phi.json"), &model.phi.named_params("phi"))?;
    write_json(&dir.join("projection.json"), &model.projection)?;
    for (k, (selector, expert)) in model.pairs.iter().enumerate() {
        write_json(&dir.join(format!("selector_{}.json", k + 1)), selector)?;
        write_json(&dir.join(format!("expert_{}.json", k + 1)), expert)?;
    }
    write_json(&dir.join("residual_head.json"), &model.residual_head)?;
    write_json(&dir.join("explanations.json"), &model.explanations)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<MoieModel> {
    let manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
    let ck = crate::diffcore::nn::load_checkpoint(&dir.join("phi.json"))?;
    let n_layers = ck.keys().filter(|k| k.ends_with(".w")).count();
    let mut phi = Mlp {
        layers: (0..n_layers)
            .map(|_| Dense {
                w: Tensor::zeros(1, 1),
                b: Tensor::zeros(1, 1),
            })
            .collect(),
        relu_output: true,
    };
    phi.load_params("phi", &ck)?;
    let projection: Projection = read_json(&dir.join("projection.json"))?;
    let mut pairs = Vec::with_capacity(manifest.n_experts);
    for k in 1..=manifest.n_experts {
        let selector: Selector = read_json(&dir.join(format!("selector_{k}.json")))?;
        let expert: EntropyLogicExpert = read_json(&dir.join(format!("expert_{k}.json")))?;
        pairs.push((selector, expert));
    }
    let residual_head: Dense = read_json(&dir.join("residual_head.json"))?;
    let explanations: Vec<Vec<FolExplanation>> = read_json(&dir.join("explanations.json"))?;
    let model = MoieModel {
        phi,
        projection,
        pairs,
        residual_head,
        plans: manifest.plans,
        ledger: manifest.ledger,
        explanations,
        phi_hash: manifest.phi_hash,
        attention_quantile: manifest.attention_quantile,
    };
    if param_hash(&model.phi.named_params("phi")) != model.phi_hash {
        return Err(Error::Data(
            "loaded feature extractor does not match the recorded hash".into(),
        ));
    }
    Ok(model)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

/// RouteTrace batch as CSV: sample id, route, pi values, predicted label,
/// formula text.
pub fn export_traces_csv(
    traces: &[RouteTrace],
    model: &MoieModel,
    path: &Path,
) -> Result<()> {
    let names = model.admitted_names();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let n_sel = model.n_experts();
    let mut header = vec!["sample".to_string(), "route".to_string()];
    header.extend((1..=n_sel).map(|k| format!("pi_{k}")));
    header.push("predicted".into());
    header.push("formula".into());
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for t in traces {
        let route = match t.route {
            Route::Expert(k) => format!("expert_{k}"),
            Route::Residual => "residual".to_string(),
        };
        let formula = t
            .explanation
            .as_ref()
            .and_then(|r| model.explanation_for(r))
            .map(|f| f.render(&names))
            .unwrap_or_else(|| "no interpretable explanation (residual)".to_string());
        let mut rec = vec![t.sample.to_string(), route];
        rec.extend(t.pis.iter().map(|p| p.to_string()));
        rec.push(t.predicted.to_string());
        rec.push(formula);
        w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_weight_is_the_product_of_escapes() {
        assert_eq!(cumulative_weights(&[], 3), vec![1.0; 3]);
        let prior = vec![vec![0.3, 1.0], vec![0.6, 0.2]];
        let w = cumulative_weights(&prior, 2);
        assert!((w[0] - 0.7 * 0.4).abs() < 1e-15);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn distillation_loss_vanishes_for_matched_logits() {
        let f = [1.2, -0.4];
        assert!(distillation_loss(&f, &f, 1, 1.0, 20.0).abs() < 1e-12);
    }

    #[test]
    fn distillation_loss_alpha_zero_is_cross_entropy() {
        let teacher = [5.0, -5.0];
        let student = [0.2, 0.9];
        let got = distillation_loss(&teacher, &student, 1, 0.0, 20.0);
        let p = softmax_host(&Tensor::from_rows(1, 2, student.to_vec()).unwrap());
        let expect = -p.at(0, 1).ln();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn residual_plus_expert_reconstructs_teacher() {
        let teacher = Tensor::from_rows(2, 2, vec![3.0, -1.0, 0.5, 2.5]).unwrap();
        let expert = Tensor::from_rows(2, 2, vec![1.0, 1.0, -0.5, 2.0]).unwrap();
        let r = residual_targets(&teacher, &expert);
        for i in 0..4 {
            assert!((expert.data[i] + r.data[i] - teacher.data[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn geometric_schedule_decays() {
        let s = CoverageSchedule::default();
        assert!((s.tau(1) - 0.4).abs() < 1e-12);
        assert!((s.tau(2) - 0.3).abs() < 1e-12);
        assert!((s.tau(3) - 0.225).abs() < 1e-12);
        let e = CoverageSchedule::Explicit(vec![0.4, 0.3]);
        assert_eq!(e.tau(1), 0.4);
        assert_eq!(e.tau(2), 0.3);
        assert_eq!(e.tau(5), 0.3); // last value repeats past the list
    }

    #[test]
    fn telescoping_weights_sum_to_one() {
        use rand::{Rng as _, SeedableRng};
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..200 {
            let k = rng.gen_range(1..=5);
            let pis: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
            let mut total = 0.0;
            let mut escape = 1.0;
            for &p in &pis {
                total += p * escape;
                escape *= 1.0 - p;
            }
            total += escape;
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
