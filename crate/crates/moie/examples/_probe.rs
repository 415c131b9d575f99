use moie::blackbox::{train_blackbox, train_projection, BlackboxHyper, ProjectionHyper};
use moie::datagen::{benchmark_config, generate_synthetic, split};
use moie::metrics::{auroc, evaluate_mixture, positive_scores, hardness_trace};
use moie::pipeline::{run_moie, PipelineConfig, Route};
use moie::seed::derive_seed;
use std::time::Instant;

fn main() {
    let root = 11u64;
    let t0 = Instant::now();
    let mut dcfg = benchmark_config(derive_seed(root, "datagen"));
    dcfg.n = 10_000;
    let data = generate_synthetic(&dcfg).unwrap();
    println!("prevalence {:.3}  subgroupA {:.3}", data.prevalence(),
        data.subgroups.iter().filter(|&&s| s==0).count() as f64 / data.len() as f64);
    let (train, val, test) = split(&data, [0.8, 0.1, 0.1], derive_seed(root, "split")).unwrap();
    println!("split sizes {}/{}/{}  t={:?}", train.len(), val.len(), test.len(), t0.elapsed());

    let bb_hyper = BlackboxHyper { seed: derive_seed(root, "bb"), ..Default::default() };
    let t1 = Instant::now();
    let bb = train_blackbox(&train, &val, &bb_hyper).unwrap();
    println!("bb val auroc {:.4} epochs {} t={:?}", bb.best_val_auroc.unwrap(), bb.history.len(), t1.elapsed());
    let test_scores = positive_scores(&bb.model.logits(&test.x));
    let bb_test = auroc(&test_scores, &test.y).unwrap();
    println!("bb TEST auroc {:.4}", bb_test);

    let t2 = Instant::now();
    let proj = train_projection(&bb.model, &train, &val, &ProjectionHyper{ seed: derive_seed(root, "proj"), ..Default::default() }).unwrap();
    println!("proj aurocs {:?}", proj.val_auroc.iter().map(|a| (a*100.0).round()/100.0).collect::<Vec<_>>());
    println!("admitted {} of {}  mean acc {:.3}  t={:?}", proj.n_admitted(), proj.n_concepts(), proj.mean_admitted_accuracy(), t2.elapsed());

    let t3 = Instant::now();
    let pcfg = PipelineConfig { seed: derive_seed(root, "moie"), ..Default::default() };
    let model = run_moie(&bb.model, &proj, &train, &val, &pcfg).unwrap();
    println!("moie experts {} t={:?}", model.n_experts(), t3.elapsed());
    for rec in &model.ledger {
        println!("  iter {} tau {:.3} tau_m [{:.3},{:.3}] hardcov_val [{:.3},{:.3}] softcov_val [{:.3},{:.3}] cum {:.3}",
            rec.iteration, rec.tau, rec.tau_m[0], rec.tau_m[1],
            rec.val_coverage.hard[0], rec.val_coverage.hard[1],
            rec.val_coverage.soft[0], rec.val_coverage.soft[1],
            rec.cumulative_hard_coverage);
    }
    // teacher chain health: residual head logits on val
    {
        let f = bb.model.features(&val.x);
        let logits = model.residual_head.forward_host(&f);
        let s = positive_scores(&logits);
        println!("final residual head val auroc {:.4}", auroc(&s, &val.y).unwrap());
    }
    let traces = model.predict(&test.x).unwrap();
    let eval = evaluate_mixture(&traces, &test.y).unwrap();
    println!("TEST moie {:?} moie+r {:.4} covered {:.3}", eval.moie_auroc, eval.moie_plus_r_auroc, eval.covered_fraction);
    println!("coverages {:?}", eval.coverage_per_component.iter().map(|c| (c*1000.0).round()/1000.0).collect::<Vec<_>>());

    // specialization + per-expert covered quality on test
    for k in 1..=model.n_experts() {
        let idx: Vec<usize> = traces.iter().enumerate().filter(|(_, t)| t.route == Route::Expert(k)).map(|(i, _)| i).collect();
        if idx.is_empty() { println!("  expert {k}: empty"); continue; }
        let a = idx.iter().filter(|&&i| test.subgroups[i] == 0).count() as f64 / idx.len() as f64;
        let s: Vec<f64> = idx.iter().map(|&i| traces[i].positive_score).collect();
        let l: Vec<u8> = idx.iter().map(|&i| test.y[i]).collect();
        let acc = idx.iter().filter(|&&i| traces[i].predicted == test.y[i]).count() as f64 / idx.len() as f64;
        let bb_s: Vec<f64> = idx.iter().map(|&i| test_scores[i]).collect();
        println!("  expert {k}: n={} subgroupA-frac {:.3} covered-auroc {:?} acc {:.3} bb-on-subset {:?}",
            idx.len(), a, auroc(&s, &l).ok().map(|v| (v*1e3).round()/1e3), acc,
            auroc(&bb_s, &l).ok().map(|v| (v*1e3).round()/1e3));
    }
    let ht = hardness_trace(&model, &bb.model, &test).unwrap();
    println!("hardness: global {:.4} rows {:?}", ht.global_f0_auroc,
        ht.rows.iter().map(|r| (r.subset_size, r.f0_auroc_on_subset.map(|a| (a*1000.0).round()/1000.0))).collect::<Vec<_>>());
    // attention orders
    for (k, (_, e)) in model.pairs.iter().enumerate() {
        let ord = e.attention_order();
        println!("  expert {} attention order {:?}", k+1, &ord[..4.min(ord.len())]);
    }
    println!("TOTAL {:?}", t0.elapsed());
}
