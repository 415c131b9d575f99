//! Domain transfer: pseudo-label target concepts with the source models,
//! learn the target projection semi-supervisedly, complete the target
//! triplet, and fine-tune the mixture — with analytic FLOP accounting.

use serde::{Deserialize, Serialize};

use crate::blackbox::{gather_rows, predict_concepts_from_features, Blackbox, Projection};
use crate::datagen::{ConceptTriplet, SplitTag};
use crate::diffcore::nn::{one_hot, shuffled_indices, sigmoid_host, wire_softmax_ce, Dense, Mlp};
use crate::diffcore::{Graph, Optimizer, Tensor};
use crate::error::{Error, Result};
use crate::experts::ell_logits;
use crate::pipeline::{
    cumulative_weights, fit_residual, residual_targets, train_pair, CoverageSchedule,
    IterationHyper, IterationSplit, MoieModel, ResidualHyper,
};
use crate::seed::{derive_seed, Rng};
use crate::selectors::CoveragePlan;
use rand::SeedableRng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferConfig {
    /// Pseudo-label budget: how many target rows get source-model labels.
    pub n_t_labeled: usize,
    /// Experts carried over from the source mixture.
    pub k_transfer: usize,
    pub finetune_epochs: usize,
    /// Self-training keeps unlabeled predictions whose confidence
    /// max(p, 1-p) reaches this threshold.
    pub confidence_threshold: f64,
    pub ssl_epochs: usize,
    pub ssl_lr: f64,
    /// Unlabeled-loss weight ramps linearly from 0 to 1 over this many
    /// epochs (defaults to half the SSL schedule).
    pub ssl_rampup_epochs: Option<usize>,
    pub target_coverage: CoverageSchedule,
    pub lambda_s: f64,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            n_t_labeled: 500,
            k_transfer: 3,
            finetune_epochs: 5,
            confidence_threshold: 0.8,
            ssl_epochs: 30,
            ssl_lr: 0.01,
            ssl_rampup_epochs: None,
            target_coverage: CoverageSchedule::default(),
            lambda_s: 128.0,
            finetune_lr: 0.01,
            batch_size: 1028,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneMode {
    /// Train only the selectors; experts and residual stay frozen.
    SelectorsOnly,
    /// Train selectors and experts jointly and refit the residual chain.
    Joint,
}

// ── FLOP accounting ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LayerCost {
    /// Dense layer: forward costs 2 * d_in * d_out flops per sample.
    Affine { d_in: usize, d_out: usize },
    /// Pointwise op: 1 flop per element.
    Elementwise { elements: usize },
}

impl LayerCost {
    fn forward_per_sample(&self) -> f64 {
        match *self {
            LayerCost::Affine { d_in, d_out } => 2.0 * d_in as f64 * d_out as f64,
            LayerCost::Elementwise { elements } => elements as f64,
        }
    }
}

/// What a training (or inference) run looked like, for analytic costing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub layers: Vec<LayerCost>,
    pub batch_size: usize,
    pub batches: usize,
    pub epochs: usize,
    /// Training counts backward as 2x forward; inference is forward-only.
    pub training: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopPhase {
    pub name: String,
    pub forward_per_sample: f64,
    pub backward_per_sample: f64,
    pub batch_size: usize,
    pub batches: usize,
    pub epochs: usize,
    pub total: f64,
}

/// (forward + backward) x batch size x batches x epochs, with backward
/// fixed at twice forward for trainable paths.
pub fn count_flops(name: &str, desc: &RunDescriptor) -> FlopPhase {
    let fwd: f64 = desc.layers.iter().map(|l| l.forward_per_sample()).sum();
    let bwd = if desc.training { 2.0 * fwd } else { 0.0 };
    let total =
        (fwd + bwd) * desc.batch_size as f64 * desc.batches as f64 * desc.epochs as f64;
    FlopPhase {
        name: name.to_string(),
        forward_per_sample: fwd,
        backward_per_sample: bwd,
        batch_size: desc.batch_size,
        batches: desc.batches,
        epochs: desc.epochs,
        total,
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FlopLedger {
    pub phases: Vec<FlopPhase>,
}

impl FlopLedger {
    pub fn push(&mut self, phase: FlopPhase) {
        self.phases.push(phase);
    }

    pub fn grand_total(&self) -> f64 {
        self.phases.iter().map(|p| p.total).sum()
    }

    /// Sum over phases whose name matches a prefix.
    pub fn total_for(&self, prefix: &str) -> f64 {
        self.phases
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.total)
            .sum()
    }
}

fn selector_layers(n_concepts: usize, hidden: usize) -> Vec<LayerCost> {
    vec![
        LayerCost::Affine { d_in: n_concepts, d_out: hidden },
        LayerCost::Elementwise { elements: hidden },
        LayerCost::Affine { d_in: hidden, d_out: 1 },
        LayerCost::Elementwise { elements: 1 },
    ]
}

fn expert_layers(n_concepts: usize, hidden: &[usize]) -> Vec<LayerCost> {
    let mut layers = vec![
        LayerCost::Elementwise { elements: n_concepts }, // attention softmax
        LayerCost::Elementwise { elements: n_concepts }, // mask scale
        LayerCost::Elementwise { elements: n_concepts }, // masked multiply
    ];
    let mut d_in = n_concepts;
    for &h in hidden {
        layers.push(LayerCost::Affine { d_in, d_out: h });
        layers.push(LayerCost::Elementwise { elements: h });
        d_in = h;
    }
    layers.push(LayerCost::Affine { d_in, d_out: 2 });
    layers
}

pub fn blackbox_layers(input_dim: usize, phi_widths: &[usize]) -> Vec<LayerCost> {
    let mut layers = Vec::new();
    let mut d_in = input_dim;
    for &w in phi_widths {
        layers.push(LayerCost::Affine { d_in, d_out: w });
        layers.push(LayerCost::Elementwise { elements: w });
        d_in = w;
    }
    layers.push(LayerCost::Affine { d_in, d_out: 2 });
    layers
}

// ── Pseudo-labeling ──────────────────────────────────────────────────

/// Target rows kept by the correctness filter, with their binarized
/// pseudo concepts in the admitted-concept space.
#[derive(Debug, Clone)]
pub struct PseudoLabeled {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub concepts: Tensor,
    pub drawn: usize,
    pub kept_fraction: f64,
}

/// Draw `n_t` target rows uniformly, keep those the source blackbox
/// classifies correctly, and pseudo-label their concepts with the source
/// projection thresholded at 0.5.
pub fn pseudo_label_concepts(
    bb_source: &Blackbox,
    proj_source: &Projection,
    target: &ConceptTriplet,
    n_t: usize,
    seed: u64,
) -> Result<PseudoLabeled> {
    if n_t == 0 {
        return Err(Error::Config("pseudo-label budget must be positive".into()));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut order = shuffled_indices(target.len(), &mut rng);
    order.truncate(n_t.min(target.len()));
    let drawn = order.len();

    let x_drawn = gather_rows(&target.x, &order);
    let logits = bb_source.logits(&x_drawn);
    let kept: Vec<usize> = (0..drawn)
        .filter(|&i| u8::from(logits.at(i, 1) > logits.at(i, 0)) == target.y[order[i]])
        .collect();
    if kept.is_empty() {
        return Err(Error::Data(
            "source model unusable on target: no drawn sample classified correctly".into(),
        ));
    }
    let indices: Vec<usize> = kept.iter().map(|&i| order[i]).collect();
    let x = gather_rows(&target.x, &indices);
    let probs = predict_concepts_from_features(proj_source, &bb_source.features(&x))?;
    let mut concepts = probs;
    concepts
        .data
        .iter_mut()
        .for_each(|v| *v = f64::from(*v >= 0.5));
    Ok(PseudoLabeled {
        indices,
        x,
        concepts,
        drawn,
        kept_fraction: kept.len() as f64 / drawn as f64,
    })
}

/// Agreement of pseudo concepts with the target's ground-truth concepts
/// (admitted columns), averaged over kept samples and concepts.
pub fn pseudo_label_accuracy(
    pseudo: &PseudoLabeled,
    target: &ConceptTriplet,
    proj_source: &Projection,
) -> Result<f64> {
    let truth_full = gather_rows(&target.concepts, &pseudo.indices);
    let truth = proj_source.admitted_columns(&truth_full)?;
    let total = truth.numel() as f64;
    let agree = truth
        .data
        .iter()
        .zip(&pseudo.concepts.data)
        .filter(|(&t, &p)| (t >= 0.5) == (p >= 0.5))
        .count() as f64;
    Ok(agree / total)
}

// ── Target projection (semi-supervised) ──────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetProjection {
    /// Maps frozen source features directly to the admitted concepts.
    pub head: Dense,
    /// Set when no unlabeled prediction ever cleared the confidence
    /// threshold and training fell back to the supervised loss.
    pub supervised_only: bool,
    pub low_data: bool,
}

impl TargetProjection {
    pub fn probabilities(&self, features: &Tensor) -> Tensor {
        sigmoid_host(&self.head.forward_host(features))
    }
}

/// Warm-start the target head from the source projection's admitted
/// columns.
fn admitted_head(proj: &Projection) -> Dense {
    let idx = proj.admitted_indices();
    let d_f = proj.head.w.rows();
    let mut w = Tensor::zeros(d_f, idx.len());
    for r in 0..d_f {
        for (c, &j) in idx.iter().enumerate() {
            w.data[r * idx.len() + c] = proj.head.w.at(r, j);
        }
    }
    let mut b = Tensor::zeros(1, idx.len());
    for (c, &j) in idx.iter().enumerate() {
        b.data[c] = proj.head.b.at(0, j);
    }
    Dense { w, b }
}

/// Supervised BCE on the pseudo-labeled subset plus confidence-gated
/// self-training on the unlabeled rows, with a linearly ramped unlabeled
/// weight. Returns the head with the best held-out supervised loss.
pub fn train_target_projection(
    labeled: &PseudoLabeled,
    unlabeled_x: &Tensor,
    bb_source: &Blackbox,
    proj_source: &Projection,
    cfg: &TransferConfig,
) -> Result<(TargetProjection, FlopPhase)> {
    if labeled.indices.is_empty() {
        return Err(Error::Data("labeled subset is empty".into()));
    }
    let mut rng = Rng::seed_from_u64(derive_seed(cfg.seed, "target-projection"));
    let n_adm = labeled.concepts.cols();
    let d_f = bb_source.feature_dim();

    let feats_labeled = bb_source.features(&labeled.x);
    let feats_unlabeled = bb_source.features(unlabeled_x);

    // Hold out part of the labeled subset for model selection.
    let n_lab = labeled.indices.len();
    let low_data = n_lab < 10;
    let mut order = shuffled_indices(n_lab, &mut rng);
    let n_val = (n_lab / 5).max(1).min(n_lab.saturating_sub(1)).max(0);
    let val_idx: Vec<usize> = order.drain(..n_val.min(order.len() - 1).max(0)).collect();
    let train_idx = order;
    let (f_tr, c_tr) = (
        gather_rows(&feats_labeled, &train_idx),
        gather_rows(&labeled.concepts, &train_idx),
    );
    let (f_va, c_va) = if val_idx.is_empty() {
        (f_tr.clone(), c_tr.clone())
    } else {
        (
            gather_rows(&feats_labeled, &val_idx),
            gather_rows(&labeled.concepts, &val_idx),
        )
    };

    let head_mlp = Mlp {
        layers: vec![admitted_head(proj_source)],
        relu_output: false,
    };
    // The labeled and unlabeled branches have different row counts, so
    // the head parameters are shared across two affine ops.
    let mut g = Graph::new();
    let fl = g.input("f_lab", d_f);
    let tl = g.input("t_lab", n_adm);
    let fu = g.input("f_unlab", d_f);
    let tu = g.input("t_unlab", n_adm);
    let conf = g.input("conf_mask", n_adm);
    let ramp = g.input("ramp", 1);
    let w = g.param("t_t.w", head_mlp.layers[0].w.clone());
    let b = g.param("t_t.b", head_mlp.layers[0].b.clone());
    let logits_lab = g.affine(fl, w, b)?;
    let logits_unlab = g.affine(fu, w, b)?;
    let sup_bce = g.bce_with_logits(logits_lab, tl)?;
    let sup = g.mean_all(sup_bce);
    let unl_bce = g.bce_with_logits(logits_unlab, tu)?;
    let masked = g.mul(unl_bce, conf)?;
    let masked_sum = g.sum_all(masked);
    let conf_count = g.sum_all(conf);
    let unl_mean = g.div(masked_sum, conf_count)?;
    let unl = g.mul(unl_mean, ramp)?;
    let loss = g.add(sup, unl)?;
    let mut opt = Optimizer::adam(cfg.ssl_lr, &[w, b]);

    let rampup = cfg
        .ssl_rampup_epochs
        .unwrap_or_else(|| (cfg.ssl_epochs / 2).max(1));
    let mut best: Option<(f64, Dense)> = None;
    let mut ever_confident = false;

    for epoch in 0..cfg.ssl_epochs.max(1) {
        // Current pseudo-targets for the unlabeled pool.
        let current = Dense {
            w: g.param_tensor(w).clone(),
            b: g.param_tensor(b).clone(),
        };
        let probs = sigmoid_host(&current.forward_host(&feats_unlabeled));
        let mut targets = Tensor::zeros(probs.rows().max(1), n_adm);
        let mut mask = Tensor::zeros(probs.rows().max(1), n_adm);
        let mut n_conf = 0usize;
        for i in 0..probs.rows() {
            for j in 0..n_adm {
                let p = probs.at(i, j);
                if p.max(1.0 - p) >= cfg.confidence_threshold {
                    mask.data[i * n_adm + j] = 1.0;
                    targets.data[i * n_adm + j] = f64::from(p >= 0.5);
                    n_conf += 1;
                }
            }
        }
        let ramp_value = if n_conf == 0 {
            // Sentinel keeps the graph finite while zeroing the term.
            mask.data[0] = 1.0;
            0.0
        } else {
            ever_confident = true;
            (epoch as f64 / rampup as f64).min(1.0)
        };
        let feats_u = if feats_unlabeled.rows() == 0 {
            gather_rows(&f_tr, &[0])
        } else {
            feats_unlabeled.clone()
        };
        let targets_u = if feats_unlabeled.rows() == 0 {
            Tensor::zeros(1, n_adm)
        } else {
            targets
        };
        let mask_u = if feats_unlabeled.rows() == 0 {
            let mut m = Tensor::zeros(1, n_adm);
            m.data[0] = 1.0;
            m
        } else {
            mask
        };

        g.bind("f_lab", f_tr.clone())?;
        g.bind("t_lab", c_tr.clone())?;
        g.bind("f_unlab", feats_u)?;
        g.bind("t_unlab", targets_u)?;
        g.bind("conf_mask", mask_u)?;
        g.bind(
            "ramp",
            Tensor::scalar(if feats_unlabeled.rows() == 0 { 0.0 } else { ramp_value }),
        )?;
        crate::blackbox::step_or_diverged(&mut g, loss, &mut opt, epoch)?;

        // Supervised loss on the held-out labeled rows.
        let snap = Dense {
            w: g.param_tensor(w).clone(),
            b: g.param_tensor(b).clone(),
        };
        let val_logits = snap.forward_host(&f_va);
        let mut val_bce = vec![0.0; val_logits.numel()];
        crate::diffcore::tensor::bce_with_logits(&val_logits.data, &c_va.data, &mut val_bce);
        let val_loss = val_bce.iter().sum::<f64>() / val_bce.len() as f64;
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, snap));
        }
    }

    let phase = count_flops(
        "target_projection_ssl",
        &RunDescriptor {
            layers: vec![
                LayerCost::Affine { d_in: d_f, d_out: n_adm },
                LayerCost::Elementwise { elements: n_adm },
            ],
            batch_size: f_tr.rows() + feats_unlabeled.rows(),
            batches: 1,
            epochs: cfg.ssl_epochs.max(1),
            training: true,
        },
    );
    Ok((
        TargetProjection {
            head: best.unwrap().1,
            supervised_only: !ever_confident,
            low_data,
        },
        phase,
    ))
}

// ── Triplet completion ───────────────────────────────────────────────

/// The completed target dataset: concept probabilities for every target
/// row (admitted space) plus a triplet view with thresholded concepts.
#[derive(Debug, Clone)]
pub struct CompletedTarget {
    pub probs: Tensor,
    pub triplet: ConceptTriplet,
}

pub fn complete_triplet(
    t_t: &TargetProjection,
    bb_source: &Blackbox,
    target: &ConceptTriplet,
) -> Result<CompletedTarget> {
    let probs = t_t.probabilities(&bb_source.features(&target.x));
    let mut binary = probs.clone();
    binary.data.iter_mut().for_each(|v| *v = f64::from(*v >= 0.5));
    let triplet = ConceptTriplet {
        x: target.x.clone(),
        concepts: binary,
        y: target.y.clone(),
        group_ids: target.group_ids.clone(),
        subgroups: target.subgroups.clone(),
        split: vec![SplitTag::Unassigned; target.len()],
        planted_rules: Vec::new(),
    };
    triplet.validate()?;
    Ok(CompletedTarget { probs, triplet })
}

// ── Fine-tuning ──────────────────────────────────────────────────────

/// One split of the completed target domain ready for fine-tuning.
pub struct TargetSplit<'a> {
    pub concept_probs: &'a Tensor,
    pub labels: &'a [u8],
    pub features: &'a Tensor,
}

/// Fine-tune the transferred selectors (and, in joint mode, the experts
/// plus the residual chain) on the completed target domain. The source
/// trunk stays frozen throughout; the FLOP ledger records every trainable
/// phase analytically.
pub fn finetune_moie(
    source: &MoieModel,
    bb_source: &Blackbox,
    train: &TargetSplit,
    val: &TargetSplit,
    cfg: &TransferConfig,
    mode: FinetuneMode,
) -> Result<(MoieModel, FlopLedger)> {
    let k_transfer = cfg.k_transfer.min(source.n_experts());
    if k_transfer == 0 {
        return Err(Error::Config("no experts to transfer".into()));
    }
    let phi_hash_before = bb_source.phi_hash();
    let n = train.labels.len();
    let n_val = val.labels.len();
    let n_adm = train.concept_probs.cols();
    let mut ledger = FlopLedger::default();
    let mut rng = Rng::seed_from_u64(derive_seed(cfg.seed, "finetune"));

    let hyper = IterationHyper {
        lr: cfg.finetune_lr,
        epochs: cfg.finetune_epochs,
        batch_size: cfg.batch_size,
        warmup_epochs: cfg.finetune_epochs, // no collapse check in 5 epochs
        ..IterationHyper::default()
    };

    let mut head = bb_source.head.clone();
    let mut teacher_train = head.forward_host(train.features);
    let mut teacher_val = head.forward_host(val.features);
    let mut prior_pis_train: Vec<Vec<f64>> = Vec::new();
    let mut prior_pis_val: Vec<Vec<f64>> = Vec::new();
    let mut pairs = Vec::new();
    let mut plans = Vec::new();
    let mut remaining_train: Vec<usize> = (0..n).collect();
    let mut remaining_val: Vec<usize> = (0..n_val).collect();

    for k in 1..=k_transfer {
        let tau = cfg.target_coverage.tau(k).clamp(1e-6, 1.0);
        let remainder_frac = remaining_train.len() as f64 / n as f64;
        let tau_effective = (tau / remainder_frac.max(1e-9)).clamp(1e-6, 0.98);
        let rem_labels_train: Vec<u8> = remaining_train.iter().map(|&i| train.labels[i]).collect();
        let rem_labels_val: Vec<u8> = remaining_val.iter().map(|&i| val.labels[i]).collect();
        let rem_counts = {
            let pos = rem_labels_train.iter().filter(|&&y| y == 1).count();
            [rem_labels_train.len() - pos, pos]
        };
        if rem_counts[0] == 0
            || rem_counts[1] == 0
            || rem_labels_val.iter().all(|&y| y == rem_labels_val[0])
        {
            // Remainder exhausted: carry the rest of the source pairs over
            // unmodified so the transferred mixture keeps its shape.
            for j in k..=k_transfer {
                let pair = source.pairs[j - 1].clone();
                prior_pis_train.push(pair.0.pi(train.concept_probs));
                prior_pis_val.push(pair.0.pi(val.concept_probs));
                plans.push(source.plans[j - 1].clone());
                pairs.push(pair);
            }
            break;
        }
        let plan = CoveragePlan::new(tau_effective, rem_counts, cfg.lambda_s)?;
        let w_prev_train = cumulative_weights(&prior_pis_train, n);
        let w_prev_val = cumulative_weights(&prior_pis_val, n_val);
        let (selector_init, expert_init) = source.pairs[k - 1].clone();
        let expert_hidden: Vec<usize> = expert_init
            .mlp
            .layers
            .iter()
            .take(expert_init.mlp.layers.len() - 1)
            .map(|l| l.w.cols())
            .collect();

        let rem_concepts_train = gather_rows(train.concept_probs, &remaining_train);
        let rem_concepts_val = gather_rows(val.concept_probs, &remaining_val);
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
        let train_expert = mode == FinetuneMode::Joint;
        let (selector, expert, _stats) = train_pair(
            selector_init,
            expert_init,
            &train_split,
            &val_split,
            &plan,
            &hyper,
            &mut rng,
            true,
            train_expert,
        )?;

        let mut layers = selector_layers(n_adm, hyper.selector_hidden);
        if train_expert {
            layers.extend(expert_layers(n_adm, &expert_hidden));
        }
        ledger.push(count_flops(
            &format!("finetune_iteration_{k}"),
            &RunDescriptor {
                layers,
                batch_size: n,
                batches: 1,
                epochs: cfg.finetune_epochs,
                training: true,
            },
        ));

        let pis_train = selector.pi(train.concept_probs);
        let pis_val = selector.pi(val.concept_probs);

        if mode == FinetuneMode::Joint {
            // Rebuild the residual chain on the target so the next
            // iteration distills from the refit blackbox.
            let expert_logits_train = ell_logits(&expert, train.concept_probs);
            let expert_logits_val = ell_logits(&expert, val.concept_probs);
            let targets_train = residual_targets(&teacher_train, &expert_logits_train);
            let targets_val = residual_targets(&teacher_val, &expert_logits_val);
            let w_res_train: Vec<f64> = w_prev_train
                .iter()
                .zip(&pis_train)
                .map(|(&w, &p)| w * (1.0 - p))
                .collect();
            let w_res_val: Vec<f64> = w_prev_val
                .iter()
                .zip(&pis_val)
                .map(|(&w, &p)| w * (1.0 - p))
                .collect();
            head = fit_residual(
                train.features,
                &targets_train,
                &w_res_train,
                val.features,
                &targets_val,
                &w_res_val,
                &head,
                &ResidualHyper {
                    lr: cfg.finetune_lr,
                    epochs: cfg.finetune_epochs,
                    batch_size: cfg.batch_size,
                },
                derive_seed(cfg.seed, &format!("target-residual-{k}")),
            )?;
            teacher_train = head.forward_host(train.features);
            teacher_val = head.forward_host(val.features);
            ledger.push(count_flops(
                &format!("finetune_residual_{k}"),
                &RunDescriptor {
                    layers: vec![LayerCost::Affine {
                        d_in: bb_source.feature_dim(),
                        d_out: 2,
                    }],
                    batch_size: n,
                    batches: 1,
                    epochs: cfg.finetune_epochs,
                    training: true,
                },
            ));
        }

        remaining_train.retain(|&i| pis_train[i] < 0.5);
        remaining_val.retain(|&i| pis_val[i] < 0.5);
        prior_pis_train.push(pis_train);
        prior_pis_val.push(pis_val);
        plans.push(plan);
        pairs.push((selector, expert));
    }

    if bb_source.phi_hash() != phi_hash_before {
        return Err(Error::Data("trunk changed during transfer".into()));
    }
    let residual_head = match mode {
        FinetuneMode::Joint => head,
        FinetuneMode::SelectorsOnly => source.residual_head.clone(),
    };
    let target_model = MoieModel {
        phi: source.phi.clone(),
        projection: source.projection.clone(),
        pairs,
        residual_head,
        plans,
        ledger: Vec::new(),
        explanations: source.explanations[..k_transfer].to_vec(),
        phi_hash: phi_hash_before,
        attention_quantile: source.attention_quantile,
    };
    Ok((target_model, ledger))
}

/// Full fine-tune of the source blackbox (trunk and head) on a labeled
/// target subset, the comparison baseline. Works on a deep copy; the
/// source model is untouched.
pub fn finetune_blackbox(
    bb_source: &Blackbox,
    train: &ConceptTriplet,
    val: &ConceptTriplet,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(Blackbox, FlopPhase)> {
    let model = bb_source.clone();
    let mut rng = Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let x = g.input("x", train.input_dim());
    let oh = g.input("onehot", 2);
    let (feat, phi_params) = model.phi.wire(&mut g, x, "phi")?;
    let head_mlp = Mlp {
        layers: vec![model.head.clone()],
        relu_output: false,
    };
    let (logits, head_params) = head_mlp.wire(&mut g, feat, "head")?;
    let loss = wire_softmax_ce(&mut g, logits, oh)?;
    let mut all = phi_params.clone();
    all.extend_from_slice(&head_params);
    let mut opt = Optimizer::adam(lr, &all);

    let onehot = one_hot(&train.y);
    let mut best: Option<(f64, Blackbox)> = None;
    for epoch in 0..epochs {
        let order = shuffled_indices(train.len(), &mut rng);
        for chunk in order.chunks(batch_size) {
            g.bind("x", gather_rows(&train.x, chunk))?;
            g.bind("onehot", gather_rows(&onehot, chunk))?;
            crate::blackbox::step_or_diverged(&mut g, loss, &mut opt, epoch)?;
        }
        let mut snap = model.clone();
        snap.phi.read_back(&g, &phi_params);
        let mut tmp = head_mlp.clone();
        tmp.read_back(&g, &head_params);
        snap.head = tmp.layers[0].clone();
        let scores = crate::metrics::positive_scores(&snap.logits(&val.x));
        let a = crate::metrics::auroc(&scores, &val.y)?;
        if best.as_ref().map_or(true, |(b, _)| a > *b) {
            best = Some((a, snap));
        }
    }
    let phi_widths: Vec<usize> = model.phi.layers.iter().map(|l| l.w.cols()).collect();
    let phase = count_flops(
        "blackbox_finetune",
        &RunDescriptor {
            layers: blackbox_layers(train.input_dim(), &phi_widths),
            batch_size: train.len(),
            batches: 1,
            epochs,
            training: true,
        },
    );
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, phase))
}

/// One row of the labeled-fraction / flops / AUROC comparison export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferComparisonRow {
    pub model: String,
    pub labeled_fraction: f64,
    pub flops: f64,
    pub auroc: f64,
}

pub fn export_comparison_csv(rows: &[TransferComparisonRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["model", "labeled_fraction", "flops", "auroc"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.labeled_fraction.to_string(),
            r.flops.to_string(),
            r.auroc.to_string(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
