use moie::blackbox::{train_blackbox, train_projection, predict_concepts_from_features, BlackboxHyper, ProjectionHyper};
use moie::datagen::{benchmark_config, generate_synthetic, split};
use moie::metrics::{auroc, positive_scores};
use moie::pipeline::{cumulative_weights, distillation_loss, train_iteration, IterationSplit, IterationHyper};
use moie::selectors::CoveragePlan;
use moie::seed::derive_seed;

fn main() {
    let root = 11u64;
    let mut dcfg = benchmark_config(derive_seed(root, "datagen"));
    dcfg.n = 10_000;
    let data = generate_synthetic(&dcfg).unwrap();
    // mark flips: y != rule eval
    let rule_y = data.relabel_via_rules().unwrap();
    let (train, val, _test) = split(&data, [0.8, 0.1, 0.1], derive_seed(root, "split")).unwrap();
    let train_rule_y = train.relabel_via_rules().unwrap();
    let flip: Vec<bool> = train_rule_y.iter().zip(&train.y).map(|(a, b)| a != b).collect();
    println!("train flips: {:.4}", flip.iter().filter(|&&f| f).count() as f64 / flip.len() as f64);
    let _ = rule_y;

    let bb_hyper = BlackboxHyper { seed: derive_seed(root, "bb"), ..Default::default() };
    let bb = train_blackbox(&train, &val, &bb_hyper).unwrap();
    println!("bb val auroc {:.4}", bb.best_val_auroc.unwrap());
    // BB accuracy on flips vs non-flips (train)
    let logits = bb.model.logits(&train.x);
    let mut flip_ok = 0; let mut flip_n = 0; let mut norm_ok = 0; let mut norm_n = 0;
    for i in 0..train.len() {
        let pred = u8::from(logits.at(i,1) > logits.at(i,0));
        if flip[i] { flip_n += 1; if pred == train.y[i] { flip_ok += 1; } }
        else { norm_n += 1; if pred == train.y[i] { norm_ok += 1; } }
    }
    println!("bb acc on flip {:.3} ({}), on normal {:.3}", flip_ok as f64/flip_n as f64, flip_n, norm_ok as f64/norm_n as f64);

    let proj = train_projection(&bb.model, &train, &val, &ProjectionHyper{ seed: derive_seed(root, "proj"), ..Default::default() }).unwrap();
    let f_tr = bb.model.features(&train.x);
    let f_va = bb.model.features(&val.x);
    let c_tr = predict_concepts_from_features(&proj, &f_tr).unwrap();
    let c_va = predict_concepts_from_features(&proj, &f_va).unwrap();
    let t_tr = bb.model.logits_from_features(&f_tr);
    let t_va = bb.model.logits_from_features(&f_va);
    let w_tr = cumulative_weights(&[], train.len());
    let w_va = cumulative_weights(&[], val.len());

    let plan = CoveragePlan::new(0.4, train.class_counts(), 128.0).unwrap();
    let hyper = IterationHyper::default();
    let (sel, exp, stats) = train_iteration(
        &IterationSplit{ concepts: &c_tr, labels: &train.y, teacher_logits: &t_tr, w_prev: &w_tr },
        &IterationSplit{ concepts: &c_va, labels: &val.y, teacher_logits: &t_va, w_prev: &w_va },
        &plan, &hyper, 1, derive_seed(root, "it1")).unwrap();
    println!("iter1 coverage train hard {:?} soft {:?} (floors {:?})", stats.train_coverage.hard, stats.train_coverage.soft, plan.tau_m);

    // per-sample KD loss of the final expert vs selector pi
    let pis = sel.pi(&c_tr);
    let el = moie::experts::ell_logits(&exp, &c_tr);
    let mut loss: Vec<f64> = Vec::new();
    for i in 0..train.len() {
        loss.push(distillation_loss(t_tr.row(i), el.row(i), train.y[i], 0.99, 20.0));
    }
    let covered: Vec<usize> = (0..train.len()).filter(|&i| pis[i] >= 0.5).collect();
    let uncov: Vec<usize> = (0..train.len()).filter(|&i| pis[i] < 0.5).collect();
    let mean = |idx: &[usize]| idx.iter().map(|&i| loss[i]).sum::<f64>() / idx.len().max(1) as f64;
    println!("covered n={} mean-kd {:.4}; uncovered n={} mean-kd {:.4}", covered.len(), mean(&covered), uncov.len(), mean(&uncov));
    let cov_flip = covered.iter().filter(|&&i| flip[i]).count() as f64 / covered.len() as f64;
    let unc_flip = uncov.iter().filter(|&&i| flip[i]).count() as f64 / uncov.len() as f64;
    println!("flip fraction: covered {:.4} uncovered {:.4}", cov_flip, unc_flip);
    // covered auroc of expert vs bb
    let es = positive_scores(&el);
    let cs: Vec<f64> = covered.iter().map(|&i| es[i]).collect();
    let cy: Vec<u8> = covered.iter().map(|&i| train.y[i]).collect();
    let bs = positive_scores(&logits);
    let cbs: Vec<f64> = covered.iter().map(|&i| bs[i]).collect();
    println!("expert covered auroc {:?} bb covered auroc {:?}",
        auroc(&cs, &cy).ok(), auroc(&cbs, &cy).ok());
    // teacher confidence on flips
    let mut td_flip = 0.0; let mut td_norm = 0.0;
    for i in 0..train.len() {
        let d = (t_tr.at(i,1) - t_tr.at(i,0)).abs();
        if flip[i] { td_flip += d / flip_n as f64; } else { td_norm += d / norm_n as f64; }
    }
    println!("teacher |logit diff|: flips {:.3} normal {:.3}", td_flip, td_norm);
}
