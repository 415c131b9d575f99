//! The source blackbox f = head(phi(x)), the concept projection on frozen
//! features, and the concept-AUROC admission filter.

use serde::{Deserialize, Serialize};

use crate::datagen::ConceptTriplet;
use crate::diffcore::nn::{
    one_hot, param_hash, sigmoid_host, shuffled_indices, wire_softmax_ce, Dense, Mlp,
};
use crate::diffcore::{Graph, Optimizer, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{auroc, positive_scores};
use crate::seed::Rng;
use rand::SeedableRng;

/// Feature extractor plus classifier head. The trunk is frozen once
/// distillation starts; heads are replaced per iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Blackbox {
    pub phi: Mlp,
    pub head: Dense,
}

impl Blackbox {
    pub fn init(input_dim: usize, phi_widths: &[usize], rng: &mut Rng) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(phi_widths);
        let phi = Mlp::init(&dims, true, rng);
        let head = Dense::init(*phi_widths.last().unwrap(), 2, rng);
        Blackbox { phi, head }
    }

    pub fn feature_dim(&self) -> usize {
        self.phi.out_dim()
    }

    pub fn features(&self, x: &Tensor) -> Tensor {
        self.phi.forward_host(x)
    }

    pub fn logits(&self, x: &Tensor) -> Tensor {
        self.head.forward_host(&self.features(x))
    }

    pub fn logits_from_features(&self, features: &Tensor) -> Tensor {
        self.head.forward_host(features)
    }

    /// Content hash of the trunk parameters; constant across distillation
    /// and transfer by contract.
    pub fn phi_hash(&self) -> String {
        param_hash(&self.phi.named_params("phi"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlackboxHyper {
    pub phi_widths: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for BlackboxHyper {
    fn default() -> Self {
        BlackboxHyper {
            // A deliberately heavy trunk: the point of comparison is a
            // backbone that dwarfs the concept-space models built on top
            // of it. The feature width stays large enough that concepts
            // beyond the label pathway survive into the features.
            phi_widths: vec![1280, 256],
            lr: 1e-3,
            epochs: 18,
            batch_size: 256,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedBlackbox {
    pub model: Blackbox,
    pub history: Vec<EpochRecord>,
    pub best_val_auroc: Option<f64>,
}

/// Train the blackbox with softmax cross-entropy and return the checkpoint
/// with the best validation AUROC.
pub fn train_blackbox(
    train: &ConceptTriplet,
    val: &ConceptTriplet,
    hyper: &BlackboxHyper,
) -> Result<TrainedBlackbox> {
    let mut rng = Rng::seed_from_u64(hyper.seed);
    let mut model = Blackbox::init(train.input_dim(), &hyper.phi_widths, &mut rng);
    if hyper.epochs == 0 {
        return Ok(TrainedBlackbox {
            model,
            history: Vec::new(),
            best_val_auroc: None,
        });
    }

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

    let mut all_params = phi_params.clone();
    all_params.extend_from_slice(&head_params);
    let mut opt = Optimizer::adam(hyper.lr, &all_params);

    let onehot_train = one_hot(&train.y);
    let n = train.len();
    let mut best: Option<(f64, Blackbox)> = None;
    let mut history = Vec::new();
    let mut since_best = 0usize;

    for epoch in 0..hyper.epochs {
        let order = shuffled_indices(n, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let xb = gather_rows(&train.x, chunk);
            let ohb = gather_rows(&onehot_train, chunk);
            g.bind("x", xb)?;
            g.bind("onehot", ohb)?;
            step_or_diverged(&mut g, loss, &mut opt, epoch)?;
            epoch_loss += g.output(loss).data[0];
            batches += 1.0;
        }
        // Snapshot current parameters for validation scoring.
        let mut snapshot = model.clone();
        snapshot.phi.read_back(&g, &phi_params);
        let mut head_tmp = head_mlp.clone();
        head_tmp.read_back(&g, &head_params);
        snapshot.head = head_tmp.layers[0].clone();

        let scores = positive_scores(&snapshot.logits(&val.x));
        let val_auroc = auroc(&scores, &val.y)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches,
            val_auroc,
        });
        if best.as_ref().map_or(true, |(b, _)| val_auroc > *b) {
            best = Some((val_auroc, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }
    let (best_auroc, best_model) = best.unwrap();
    model = best_model;
    Ok(TrainedBlackbox {
        model,
        history,
        best_val_auroc: Some(best_auroc),
    })
}

pub(crate) fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_rows(idx.len(), c, data).unwrap()
}

pub(crate) fn step_or_diverged(
    g: &mut Graph,
    loss: crate::diffcore::NodeId,
    opt: &mut Optimizer,
    epoch: usize,
) -> Result<()> {
    let run = |g: &mut Graph, opt: &mut Optimizer| -> Result<()> {
        g.forward()?;
        g.backward(loss)?;
        opt.step(g)
    };
    run(g, opt).map_err(|e| match e {
        Error::NonFinite { node, detail } => Error::Diverged {
            epoch,
            detail: format!("{node}: {detail}"),
        },
        other => other,
    })
}

// ── Concept projection ───────────────────────────────────────────────

/// Head mapping frozen features to concept logits, with per-concept
/// validation AUROC and the admission mask (AUROC must exceed the
/// threshold, strictly).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Projection {
    pub head: Dense,
    pub concept_names: Vec<String>,
    pub val_auroc: Vec<f64>,
    /// Agreement rate of thresholded predictions on validation, used as
    /// the reference point for transfer pseudo-labeling checks.
    pub val_accuracy: Vec<f64>,
    pub admitted: Vec<bool>,
    pub threshold: f64,
}

impl Projection {
    pub fn n_concepts(&self) -> usize {
        self.admitted.len()
    }

    pub fn admitted_indices(&self) -> Vec<usize> {
        self.admitted
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_admitted(&self) -> usize {
        self.admitted.iter().filter(|&&a| a).count()
    }

    pub fn admitted_names(&self) -> Vec<String> {
        self.admitted_indices()
            .into_iter()
            .map(|i| self.concept_names[i].clone())
            .collect()
    }

    /// Select the admitted columns (in stable ascending concept order)
    /// out of a full concept matrix.
    pub fn admitted_columns(&self, full: &Tensor) -> Result<Tensor> {
        if full.cols() != self.n_concepts() {
            return Err(Error::ShapeMismatch {
                node: "projection".into(),
                detail: format!(
                    "expected {} concept columns, got {}",
                    self.n_concepts(),
                    full.cols()
                ),
            });
        }
        let idx = self.admitted_indices();
        if idx.is_empty() {
            return Err(Error::Data("no admitted concepts".into()));
        }
        let mut data = Vec::with_capacity(full.rows() * idx.len());
        for i in 0..full.rows() {
            let row = full.row(i);
            for &j in &idx {
                data.push(row[j]);
            }
        }
        Tensor::from_rows(full.rows(), idx.len(), data)
    }

    /// Mean validation accuracy over admitted concepts.
    pub fn mean_admitted_accuracy(&self) -> f64 {
        let idx = self.admitted_indices();
        idx.iter().map(|&j| self.val_accuracy[j]).sum::<f64>() / idx.len().max(1) as f64
    }
}

/// Strict-inequality admission: AUROC must exceed the threshold.
pub fn admit(val_auroc: &[f64], threshold: f64) -> Vec<bool> {
    val_auroc.iter().map(|&a| a > threshold).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub admission_threshold: f64,
    pub seed: u64,
}

impl Default for ProjectionHyper {
    fn default() -> Self {
        ProjectionHyper {
            lr: 0.01,
            epochs: 30,
            batch_size: 1028,
            admission_threshold: 0.7,
            seed: 0,
        }
    }
}

/// Train the projection on frozen features: independent binary heads with
/// cross-entropy, model selection by mean per-concept validation AUROC.
pub fn train_projection(
    bb: &Blackbox,
    train: &ConceptTriplet,
    val: &ConceptTriplet,
    hyper: &ProjectionHyper,
) -> Result<Projection> {
    let n_c = train.n_concepts();
    let mut rng = Rng::seed_from_u64(hyper.seed);
    let features_train = bb.features(&train.x);
    let features_val = bb.features(&val.x);

    let head_init = Dense::init(bb.feature_dim(), n_c, &mut rng);
    let head_mlp = Mlp {
        layers: vec![head_init],
        relu_output: false,
    };
    let mut g = Graph::new();
    let f = g.input("features", bb.feature_dim());
    let targets = g.input("targets", n_c);
    let (logits, params) = head_mlp.wire(&mut g, f, "t")?;
    let bce = g.bce_with_logits(logits, targets)?;
    let loss = g.mean_all(bce);
    let mut opt = Optimizer::adam(hyper.lr, &params);

    let n = train.len();
    let mut best: Option<(f64, Dense, Vec<f64>, Vec<f64>)> = None;
    for epoch in 0..hyper.epochs.max(1) {
        let order = shuffled_indices(n, &mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            g.bind("features", gather_rows(&features_train, chunk))?;
            g.bind("targets", gather_rows(&train.concepts, chunk))?;
            step_or_diverged(&mut g, loss, &mut opt, epoch)?;
        }
        let mut tmp = head_mlp.clone();
        tmp.read_back(&g, &params);
        let head = tmp.layers[0].clone();
        let probs = sigmoid_host(&head.forward_host(&features_val));
        let (aurocs, accs) = per_concept_metrics(&probs, &val.concepts);
        let mean_auroc = aurocs.iter().sum::<f64>() / n_c as f64;
        if best.as_ref().map_or(true, |(b, ..)| mean_auroc > *b) {
            best = Some((mean_auroc, head, aurocs, accs));
        }
    }
    let (_, head, val_auroc, val_accuracy) = best.unwrap();
    let admitted = admit(&val_auroc, hyper.admission_threshold);
    Ok(Projection {
        head,
        concept_names: (0..n_c).map(|j| format!("c_{j}")).collect(),
        val_auroc,
        val_accuracy,
        admitted,
        threshold: hyper.admission_threshold,
    })
}

/// Per-concept AUROC (0.5 for constant columns) and accuracy at 0.5.
fn per_concept_metrics(probs: &Tensor, truth: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, n_c) = (probs.rows(), probs.cols());
    let mut aurocs = Vec::with_capacity(n_c);
    let mut accs = Vec::with_capacity(n_c);
    for j in 0..n_c {
        let scores: Vec<f64> = (0..n).map(|i| probs.at(i, j)).collect();
        let labels: Vec<u8> = (0..n).map(|i| truth.at(i, j) as u8).collect();
        aurocs.push(auroc(&scores, &labels).unwrap_or(0.5));
        let correct = (0..n)
            .filter(|&i| (scores[i] >= 0.5) == (labels[i] == 1))
            .count();
        accs.push(correct as f64 / n as f64);
    }
    (aurocs, accs)
}

/// Sigmoid concept probabilities for the admitted columns only, stable
/// ascending column order.
pub fn predict_concepts(proj: &Projection, bb: &Blackbox, x: &Tensor) -> Result<Tensor> {
    predict_concepts_from_features(proj, &bb.features(x))
}

pub fn predict_concepts_from_features(proj: &Projection, features: &Tensor) -> Result<Tensor> {
    let idx = proj.admitted_indices();
    if idx.is_empty() {
        return Err(Error::Data("no admitted concepts".into()));
    }
    let logits = proj.head.forward_host(features);
    let mut data = Vec::with_capacity(features.rows() * idx.len());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        for &j in &idx {
            data.push(crate::diffcore::nn::sigmoid_host(&Tensor::scalar(row[j])).data[0]);
        }
    }
    Tensor::from_rows(features.rows(), idx.len(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic, split, SynthConfig};
    use crate::logic::DnfFormula;
    use rand::Rng as _;

    fn toy_hyper(seed: u64) -> BlackboxHyper {
        BlackboxHyper {
            phi_widths: vec![24, 16],
            lr: 3e-3,
            epochs: 30,
            batch_size: 128,
            patience: 10,
            seed,
        }
    }

    fn separable_data(seed: u64, n: usize) -> ConceptTriplet {
        // Two well-separated gaussian blobs in 4 dims.
        let mut rng = Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n * 4);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            let center = if label == 1 { 1.5 } else { -1.5 };
            for _ in 0..4 {
                x.push(center + 0.4 * (rng.gen::<f64>() - 0.5));
            }
            y.push(label);
        }
        ConceptTriplet {
            x: Tensor::from_rows(n, 4, x).unwrap(),
            concepts: Tensor::zeros(n, 1),
            y,
            group_ids: (0..n as u64).collect(),
            subgroups: vec![0; n],
            split: vec![crate::datagen::SplitTag::Unassigned; n],
            planted_rules: Vec::new(),
        }
    }

    #[test]
    fn separable_data_reaches_high_auroc() {
        let train = separable_data(1, 400);
        let val = separable_data(2, 200);
        let out = train_blackbox(&train, &val, &toy_hyper(3)).unwrap();
        assert!(out.best_val_auroc.unwrap() > 0.99, "{:?}", out.best_val_auroc);
        assert!(!out.history.is_empty());
    }

    #[test]
    fn random_labels_stay_at_chance() {
        let mut rng = Rng::seed_from_u64(10);
        let mut train = separable_data(4, 400);
        // Validation is large so the best-epoch max does not drift from
        // the permutation null.
        let mut val = separable_data(5, 4000);
        for y in train.y.iter_mut().chain(val.y.iter_mut()) {
            *y = rng.gen_range(0..2u8);
        }
        let mut hyper = toy_hyper(6);
        hyper.epochs = 8;
        let out = train_blackbox(&train, &val, &hyper).unwrap();
        let a = out.best_val_auroc.unwrap();
        assert!((0.45..=0.55).contains(&a), "auroc {a}");
    }

    #[test]
    fn zero_epochs_returns_initialized_model_with_empty_history() {
        let train = separable_data(1, 64);
        let val = separable_data(2, 64);
        let mut hyper = toy_hyper(3);
        hyper.epochs = 0;
        let out = train_blackbox(&train, &val, &hyper).unwrap();
        assert!(out.history.is_empty());
        assert!(out.best_val_auroc.is_none());
        assert_eq!(out.model.phi.in_dim(), 4);
    }

    #[test]
    fn batching_does_not_change_logits() {
        let mut rng = Rng::seed_from_u64(2);
        let bb = Blackbox::init(4, &[8, 6], &mut rng);
        let data = separable_data(3, 32);
        let full = bb.logits(&data.x);
        let single = bb.logits(&gather_rows(&data.x, &[7]));
        assert_eq!(single.row(0), full.row(7));
    }

    #[test]
    fn duplicated_rows_give_duplicated_logits() {
        let mut rng = Rng::seed_from_u64(2);
        let bb = Blackbox::init(4, &[8, 6], &mut rng);
        let data = separable_data(3, 8);
        let dup = gather_rows(&data.x, &[1, 1]);
        let logits = bb.logits(&dup);
        assert_eq!(logits.row(0), logits.row(1));
    }

    fn concept_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            n: 1200,
            input_dim: 10,
            n_concepts: 5,
            rules: vec![DnfFormula::from_terms(&[&[(0, false), (1, false)]])],
            subgroup_weights: vec![1.0],
            prevalence: 0.3,
            concept_noise: 0.0,
            label_noise: 0.0,
            seed,
        }
    }

    #[test]
    fn noiseless_concepts_are_recoverable_and_noise_concept_is_masked() {
        let mut data = generate_synthetic(&concept_cfg(5)).unwrap();
        // Replace the last concept column with coin flips uncorrelated
        // with the inputs.
        let mut rng = Rng::seed_from_u64(77);
        let nc = data.n_concepts();
        for i in 0..data.len() {
            data.concepts.data[i * nc + (nc - 1)] = f64::from(rng.gen::<bool>());
        }
        let (train, val, _) = split(&data, [0.7, 0.3, 0.0], 1).unwrap();
        // A generously wide trunk keeps concept information in the
        // features the way the full-scale configuration does.
        let mut bb_hyper = toy_hyper(3);
        bb_hyper.phi_widths = vec![96, 48];
        bb_hyper.epochs = 5;
        let bb = train_blackbox(&train, &val, &bb_hyper).unwrap().model;
        let proj = train_projection(
            &bb,
            &train,
            &val,
            &ProjectionHyper {
                epochs: 40,
                batch_size: 256,
                ..Default::default()
            },
        )
        .unwrap();
        let informative: Vec<f64> = proj.val_auroc[..nc - 1].to_vec();
        let mean = informative.iter().sum::<f64>() / informative.len() as f64;
        assert!(mean > 0.95, "mean informative auroc {mean}");
        assert!(
            (0.4..=0.6).contains(&proj.val_auroc[nc - 1]),
            "noise concept auroc {}",
            proj.val_auroc[nc - 1]
        );
        assert!(!proj.admitted[nc - 1]);
        assert!(proj.admitted[..nc - 1].iter().all(|&a| a));
    }

    #[test]
    fn admission_is_strictly_greater_than_threshold() {
        let mask = admit(&[0.69, 0.70, 0.7000001, 0.9], 0.7);
        assert_eq!(mask, vec![false, false, true, true]);
    }

    #[test]
    fn admission_is_monotone_in_the_threshold() {
        let aurocs = [0.5, 0.65, 0.71, 0.8, 0.95];
        let at_high = admit(&aurocs, 0.7);
        let at_low = admit(&aurocs, 0.6);
        for (h, l) in at_high.iter().zip(&at_low) {
            assert!(!h | l, "lowering the threshold removed a concept");
        }
    }

    #[test]
    fn zero_weight_projection_outputs_half() {
        let mut rng = Rng::seed_from_u64(1);
        let bb = Blackbox::init(4, &[6, 4], &mut rng);
        let proj = Projection {
            head: Dense {
                w: Tensor::zeros(4, 3),
                b: Tensor::zeros(1, 3),
            },
            concept_names: vec!["c_0".into(), "c_1".into(), "c_2".into()],
            val_auroc: vec![0.9, 0.9, 0.9],
            val_accuracy: vec![0.9, 0.9, 0.9],
            admitted: vec![true, true, true],
            threshold: 0.7,
        };
        let x = Tensor::from_rows(2, 4, vec![0.3; 8]).unwrap();
        let probs = predict_concepts(&proj, &bb, &x).unwrap();
        assert!(probs.data.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn empty_admitted_set_is_an_error() {
        let mut rng = Rng::seed_from_u64(1);
        let bb = Blackbox::init(4, &[6, 4], &mut rng);
        let proj = Projection {
            head: Dense {
                w: Tensor::zeros(4, 2),
                b: Tensor::zeros(1, 2),
            },
            concept_names: vec!["c_0".into(), "c_1".into()],
            val_auroc: vec![0.5, 0.5],
            val_accuracy: vec![0.5, 0.5],
            admitted: vec![false, false],
            threshold: 0.7,
        };
        let x = Tensor::from_rows(1, 4, vec![0.0; 4]).unwrap();
        let err = predict_concepts(&proj, &bb, &x).unwrap_err();
        assert!(err.to_string().contains("no admitted concepts"));
    }

    #[test]
    fn phi_hash_is_stable_and_value_sensitive() {
        let mut rng = Rng::seed_from_u64(9);
        let bb = Blackbox::init(4, &[6, 4], &mut rng);
        let h1 = bb.phi_hash();
        let mut bb2 = bb.clone();
        assert_eq!(h1, bb2.phi_hash());
        bb2.phi.layers[0].w.data[0] += 1e-9;
        assert_ne!(h1, bb2.phi_hash());
    }
}
