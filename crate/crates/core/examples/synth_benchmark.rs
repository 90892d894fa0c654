//! Trains the ablation variants on the planted synthetic benchmark with 5-fold
//! cross-validation and prints pooled test macro-F1 per seed.
//!
//! `cargo run --release -p racr-core --example synth_benchmark -- [noise] [lr] [epochs] [patience]`
//!
//! `ONLY=<seed>:<variant>` runs one configuration; `VERBOSE=1` prints per-fold results.

use std::time::Instant;

use racr_core::attgnn::GraphMode;
use racr_core::bagio::{generate_synthetic_dataset, stratified_kfold, SplitSpec, SynthSpec};
use racr_core::evalkit::{confusion_matrix, evaluate, macro_metrics, EvalOptions};
use racr_core::trainer::{prepare_bags, train, PreparedBag};
use racr_core::TrainConfig;

fn main() -> racr_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).map_or(0.25, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(1e-4, |s| s.parse().unwrap());
    let epochs: usize = args.get(3).map_or(60, |s| s.parse().unwrap());
    let patience: usize = args.get(4).map_or(60, |s| s.parse().unwrap());
    let spec = SynthSpec { noise_scale: noise, ..SynthSpec::default() };
    let bags = generate_synthetic_dataset(&spec, 7)?;
    let labels: Vec<_> = bags.iter().map(|b| b.grade).collect();
    let folds = stratified_kfold(&labels, 4, &SplitSpec::default(), 7)?;
    let base = TrainConfig { learning_rate: lr, max_epochs: epochs, early_stop_patience: patience, ..TrainConfig::skin() };
    let prepared = prepare_bags(&bags, &base)?;
    let pick = |idx: &[usize]| -> Vec<PreparedBag> { idx.iter().map(|&i| prepared[i].clone()).collect() };
    let variants = [
        ("full", GraphMode::Dual, base.lambda1, base.lambda2),
        ("norank", GraphMode::Dual, 0.0, base.lambda2),
        ("dual", GraphMode::Dual, 0.0, 0.0),
        ("latent", GraphMode::Latent, 0.0, 0.0),
        ("none", GraphMode::None, 0.0, 0.0),
    ];
    for seed in 0..3 {
        for (name, mode, l1, l2) in variants {
            if let Ok(only) = std::env::var("ONLY") {
                if only != format!("{seed}:{name}") {
                    continue;
                }
            }
            let cfg = TrainConfig { graph_mode: mode, lambda1: l1, lambda2: l2, seed, ..base.clone() };
            let t = Instant::now();
            let (mut truth, mut pred) = (Vec::new(), Vec::new());
            let (mut att_sum, mut att_n) = (0.0, 0usize);
            for fold in &folds {
                let out = train(&pick(&fold.train), &pick(&fold.val), &cfg)?;
                let rep = evaluate(&out.best, &cfg, &pick(&fold.test), EvalOptions::default())?;
                if std::env::var_os("VERBOSE").is_some() {
                    println!(
                        "  fold test F1 {:.3} val F1 {:.3} best epoch {} of {}",
                        rep.metrics.f1, out.best_val_f1, out.best_epoch, out.log.len()
                    );
                }
                for (b, &i) in rep.bags.iter().zip(&fold.test) {
                    truth.push(b.label);
                    pred.push(b.predicted);
                    for a in &bags[i].annotations {
                        if a.region_grade == bags[i].grade {
                            for &n in &a.patch_indices {
                                att_sum += b.attention[n];
                                att_n += 1;
                            }
                        }
                    }
                }
            }
            let f1 = macro_metrics(&confusion_matrix(&truth, &pred, 4)?)?.f1;
            println!(
                "seed {seed} {name:<6} pooled test F1 {f1:.3} worst-grade a_n {:.4} {:.1}s",
                att_sum / att_n as f64,
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
