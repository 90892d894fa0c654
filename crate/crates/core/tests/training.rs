use racr_core::bagio::{generate_synthetic_dataset, stratified_kfold, SplitSpec, SynthSpec};
use racr_core::evalkit::{evaluate, EvalOptions};
use racr_core::trainer::{log_to_csv, train, train_from};
use racr_core::{prepare_bags, ModelParams, PreparedBag, TrainConfig};

fn small() -> (Vec<PreparedBag>, TrainConfig) {
    let spec = SynthSpec { class_counts: vec![8, 6, 5, 5], bag_size: [10, 16], feature_dim: 8, ..SynthSpec::default() };
    let bags = generate_synthetic_dataset(&spec, 5).unwrap();
    let cfg = TrainConfig { d_h: 8, max_epochs: 4, batch_size: 4, learning_rate: 1e-3, ..TrainConfig::skin() };
    (prepare_bags(&bags, &cfg).unwrap(), cfg)
}

#[test]
fn same_seed_same_run_regardless_of_threads() {
    let (bags, cfg) = small();
    let (tr, va) = bags.split_at(18);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(tr, va, &cfg).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
    assert_eq!(a.best, b.best);
    assert_eq!(a.last, b.last);
    let c = train(tr, va, &TrainConfig { seed: 1, ..cfg.clone() }).unwrap();
    assert_ne!(a.last, c.last);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (bags, cfg) = small();
    let cfg = TrainConfig { learning_rate: 0.0, ..cfg };
    let init = ModelParams::init(8, 4, &cfg, 3);
    let out = train_from(init.clone(), &bags[..18], &bags[18..], &cfg).unwrap();
    assert_eq!(out.last, init);
    assert_eq!(out.log.len(), cfg.max_epochs.min(cfg.early_stop_patience + 1));
}

#[test]
fn planted_dataset_is_learned_within_sixty_epochs() {
    let bags = generate_synthetic_dataset(&SynthSpec::default(), 7).unwrap();
    let labels: Vec<_> = bags.iter().map(|b| b.grade).collect();
    let fold = stratified_kfold(&labels, 4, &SplitSpec::default(), 7).unwrap().remove(0);
    let cfg = TrainConfig { early_stop_patience: 60, ..TrainConfig::skin() };
    let prepared = prepare_bags(&bags, &cfg).unwrap();
    let pick = |idx: &[usize]| -> Vec<PreparedBag> { idx.iter().map(|&i| prepared[i].clone()).collect() };
    let train_bags = pick(&fold.train);
    let out = train(&train_bags, &pick(&fold.val), &cfg).unwrap();
    assert_eq!(out.log.len(), 60);
    let f1 = evaluate(&out.last, &cfg, &train_bags, EvalOptions::default()).unwrap().metrics.f1;
    println!("final train macro-F1 {f1:.4}");
    assert!(f1 >= 0.95, "final train macro-F1 {f1}");
}
