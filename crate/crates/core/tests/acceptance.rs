//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The process exits 0 once every criterion has been measured, so known failures stay
//! visible without breaking the workspace build. Set `RACR_ACCEPTANCE_STRICT=1` to exit
//! nonzero on any FAIL. `RACR_ACCEPTANCE_ONLY=1,5,8` runs a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use racr_core::attgnn::{edge_logits, neighbor_softmax, GraphMode};
use racr_core::bagio::{generate_synthetic_dataset, stratified_kfold, SplitSpec, SynthSpec};
use racr_core::checkpoint::CheckpointMeta;
use racr_core::evalkit::{auc, mcc, quadratic_weighted_kappa, evaluate, EvalOptions};
use racr_core::graphbuild::{
    cosine_distance_matrix, knn, latent_initial_graph, ppr_closed_form, ppr_series, reciprocal_knn,
    spatial_knn, transition_matrix, DiffusionConfig, GraphKind,
};
use racr_core::milhead::attention_weights;
use racr_core::rankloss::{grade_prototypes, inter_grade_loss, intra_grade_loss, intra_pairs, prototype_attention, IntraLossMode};
use racr_core::trainer::{gradcheck, log_to_csv, prepare_bags, train, GradcheckOptions, PreparedBag};
use racr_core::attgnn::DiversityMode;
use racr_core::milhead::GradeLossMode;
use racr_core::{
    load_checkpoint, read_bag, read_dataset, save_checkpoint, write_bag, write_dataset, Checkpoint, SparseGraph,
    TrainConfig,
};

// Pinned tolerances and budgets.
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const PPR_MAX_ABS: f64 = 1e-8;
const PPR_COLUMN_SUM: f64 = 1e-9;
const PPR_BUDGET: Duration = Duration::from_secs(10);
const SOFTMAX_SUM: f64 = 1e-9;
const LN2_TOL: f64 = 1e-12;
const FAR_MARGIN_LOSS: f64 = 1e-8;
const KAPPA_TOL: f64 = 1e-12;
const AUC_TOL: f64 = 1e-12;
const LEARNABILITY_F1: f64 = 0.90;
const BENCHMARK_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * normal(r))
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity
// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let literal = TrainConfig {
        diversity_mode: DiversityMode::PaperLiteral,
        grade_loss_mode: GradeLossMode::PaperLiteral,
        intra_loss_mode: IntraLossMode::PaperLiteral,
        ..TrainConfig::skin()
    };
    let opts = GradcheckOptions { instances: 5, patches: 10, hidden_dim: 6, num_classes: 4, ..Default::default() };
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, cfg) in [("default", TrainConfig::skin()), ("literal", literal)] {
        let report = match gradcheck(&cfg, &opts) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("{name}: {e}")),
        };
        let worst = report.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
        pass &= report.pass;
        parts.push(format!("{name} worst rel {worst:.1e}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < GRADCHECK_BUDGET;
    outcome(pass, format!("{} instances, {}, {:.1}s", opts.instances, parts.join(", "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 2. Diffusion oracle
// ---------------------------------------------------------------------------

/// Gauss-Jordan inverse with partial pivoting.
fn invert(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())).unwrap();
        for k in 0..n {
            a.swap([col, k], [piv, k]);
            inv.swap([col, k], [piv, k]);
        }
        let d = a[[col, col]];
        for k in 0..n {
            a[[col, k]] /= d;
            inv[[col, k]] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = a[[i, col]];
                if f != 0.0 {
                    for k in 0..n {
                        a[[i, k]] -= f * a[[col, k]];
                        inv[[i, k]] -= f * inv[[col, k]];
                    }
                }
            }
        }
    }
    inv
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let alpha = 0.25;
    let tol = TrainConfig::skin().truncation_tol;
    let n = 50;
    let (mut worst_diff, mut worst_sum) = (0.0f64, 0.0f64);
    let mut t_mismatch = 0usize;
    for g in 0..20 {
        let mut r = rng(200 + g);
        let mut a = Array2::<f64>::zeros((n, n));
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if r.random::<f64>() < 0.1 {
                    let w = r.random_range(0.05..1.0);
                    a[[i, j]] = w;
                    a[[j, i]] = w;
                    edges.push((i, j, w));
                }
            }
        }
        // Column-stochastic with unit self-loops on isolated nodes.
        let mut t = a.clone();
        for j in 0..n {
            let s: f64 = t.column(j).sum();
            if s == 0.0 {
                t[[j, j]] = 1.0;
            } else {
                t.column_mut(j).mapv_inplace(|v| v / s);
            }
        }
        let graph = SparseGraph::from_edges(n, GraphKind::Latent, edges).unwrap();
        let lib_t = transition_matrix(&graph).unwrap();
        if (&lib_t - &t).iter().any(|v| v.abs() > 1e-15) {
            t_mismatch += 1;
        }
        let mut m = Array2::<f64>::eye(n);
        m.scaled_add(-(1.0 - alpha), &t);
        let oracle = invert(&m) * alpha;
        let series = ppr_series(&lib_t, alpha, tol);
        let closed = ppr_closed_form(&lib_t, alpha).unwrap();
        for (x, y) in [(&series, &oracle), (&closed, &oracle)] {
            worst_diff = worst_diff.max((x - y).iter().fold(0.0, |acc, v| acc.max(v.abs())));
        }
        for c in series.columns() {
            worst_sum = worst_sum.max((c.sum() - 1.0).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_diff < PPR_MAX_ABS && worst_sum < PPR_COLUMN_SUM && t_mismatch == 0 && elapsed < PPR_BUDGET;
    outcome(
        pass,
        format!(
            "20 graphs, max |series - inverse| {worst_diff:.1e}, max |colsum - 1| {worst_sum:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Graph oracles
// ---------------------------------------------------------------------------

/// `j` is among `i`'s `k` nearest iff fewer than `k` others precede it in (distance, index) order.
fn brute_knn(n: usize, k: usize, d: &dyn Fn(usize, usize) -> f64) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .filter(|&j| {
                    let ahead = (0..n)
                        .filter(|&l| l != i && l != j)
                        .filter(|&l| d(i, l) < d(i, j) || (d(i, l) == d(i, j) && l < j))
                        .count();
                    ahead < k
                })
                .collect()
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut failures = BTreeMap::<&str, usize>::new();
    let mut fail = |what: &'static str| *failures.entry(what).or_default() += 1;
    for s in 0..50 {
        let mut r = rng(300 + s);
        let n = r.random_range(12..40);
        let k = r.random_range(1..9).min(n - 1);

        // Latent: cosine distance over random features.
        let x = random_matrix(&mut r, n, 6, 1.0);
        let d = cosine_distance_matrix(&x).unwrap();
        for i in 0..n {
            for j in 0..n {
                let (xi, xj) = (x.row(i), x.row(j));
                let direct = if i == j { 0.0 } else { 1.0 - xi.dot(&xj) / (xi.dot(&xi).sqrt() * xj.dot(&xj).sqrt()) };
                if (direct - d[[i, j]]).abs() > 1e-12 {
                    fail("cosine distance");
                }
            }
        }
        let dist = |i: usize, j: usize| d[[i, j]];
        let sorted = |v: Vec<Vec<usize>>| -> Vec<Vec<usize>> {
            v.into_iter()
                .map(|mut l| {
                    l.sort_unstable();
                    l
                })
                .collect()
        };
        let got = sorted(knn(n, k, dist).unwrap());
        let want = brute_knn(n, k, &dist);
        if got != want {
            fail("knn");
        }
        let recip = reciprocal_knn(&knn(n, k, dist).unwrap());
        let want_recip: Vec<Vec<usize>> =
            (0..n).map(|i| want[i].iter().copied().filter(|&j| want[j].contains(&i)).collect()).collect();
        if recip != want_recip {
            fail("reciprocal");
        }
        if recip.iter().zip(&want).any(|(ri, ki)| ri.iter().any(|j| !ki.contains(j))) {
            fail("reciprocal not subset");
        }
        let cfg = DiffusionConfig { k_latent: k, ..TrainConfig::skin().diffusion() };
        let initial = latent_initial_graph(&x, &cfg).unwrap();
        let mut want_edges = Vec::new();
        for i in 0..n {
            for &j in &want_recip[i] {
                if i < j && 1.0 - d[[i, j]] > 0.0 {
                    want_edges.push((i, j, 1.0 - d[[i, j]]));
                }
            }
        }
        if initial.edges() != want_edges {
            fail("latent initial graph");
        }

        // Spatial: integer grid cells, so distance ties are common.
        let mut cells: Vec<(u32, u32)> = (0..8).flat_map(|a| (0..8).map(move |b| (a, b))).collect();
        let coords: Vec<(u32, u32)> = (0..n).map(|_| cells.swap_remove(r.random_range(0..cells.len()))).collect();
        let ks = r.random_range(1..10).min(n - 1);
        let sd = |i: usize, j: usize| {
            let a = coords[i].0 as f64 - coords[j].0 as f64;
            let b = coords[i].1 as f64 - coords[j].1 as f64;
            (a * a + b * b).sqrt()
        };
        let want_sp = brute_knn(n, ks, &sd);
        let mut want_sp_edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if want_sp[i].contains(&j) || want_sp[j].contains(&i) {
                    want_sp_edges.push((i, j, 1.0));
                }
            }
        }
        if spatial_knn(&coords, ks).unwrap().edges() != want_sp_edges {
            fail("spatial");
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        "50 point sets: knn, reciprocal, latent edges and spatial edges equal brute force; reciprocal within knn".into()
    } else {
        format!("mismatches: {failures:?}")
    };
    outcome(pass, detail)
}

// ---------------------------------------------------------------------------
// 4. Normalization invariants
// ---------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let (mut nb, mut patch, mut proto) = (0.0f64, 0.0f64, 0.0f64);
    let mut proto_checked = 0;
    for s in 0..100 {
        let mut r = rng(400 + s);
        let n = r.random_range(3..30);
        let d = r.random_range(2..10);
        let scale = [0.1, 1.0, 5.0][s as usize % 3];
        let h = random_matrix(&mut r, n, d, scale);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if r.random::<f64>() < 0.3 {
                    edges.push((i, j, 1.0));
                }
            }
        }
        let graph = SparseGraph::from_edges(n, GraphKind::Spatial, edges).unwrap();
        let (wk, wq, wa) = (random_matrix(&mut r, d, d, scale), random_matrix(&mut r, d, d, scale), random_matrix(&mut r, d, d, scale));
        for row in neighbor_softmax(&edge_logits(&h, &graph, &wk, &wq, &wa)) {
            if !row.is_empty() {
                nb = nb.max((row.iter().map(|&(_, b)| b).sum::<f64>() - 1.0).abs());
            }
        }
        let a = Array1::from_shape_fn(d, |_| scale * normal(&mut r));
        let u = random_matrix(&mut r, d, d, scale);
        patch = patch.max((attention_weights(&h, &a, &u).w.sum() - 1.0).abs());

        let c = 4;
        let probs = Array2::from_shape_fn((n, c), |_| r.random::<f64>());
        let probs = &probs / &probs.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        let protos = grade_prototypes(&h, &probs, 0.4, false);
        if protos.present.iter().any(|&p| p) {
            let pa = prototype_attention(&protos, &a, &u);
            proto = proto.max((pa.w.iter().sum::<f64>() - 1.0).abs());
            proto_checked += 1;
        }
    }
    let pass = nb < SOFTMAX_SUM && patch < SOFTMAX_SUM && proto < SOFTMAX_SUM && proto_checked > 0;
    outcome(
        pass,
        format!(
            "max |sum - 1|: neighbour {nb:.1e}, patch {patch:.1e}, prototype {proto:.1e} ({proto_checked} instances)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Ranking monotonicity
// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let present = [true; 4];
    let mut prev = f64::INFINITY;
    let mut inter_monotone = true;
    for step in 0..=200 {
        let gap = -10.0 + 0.1 * step as f64;
        // Vary w_2 - w_1 with the other grades fixed.
        let w = [0.2, 0.3, 0.3 + gap, 0.5 + gap];
        let (l, _) = inter_grade_loss(&w, &present);
        inter_monotone &= l < prev;
        prev = l;
    }
    let p = [0.15, 0.85];
    let pairs = intra_pairs(&[0, 1], &p, 0.1, 512, 0);
    let (equal, _) = intra_grade_loss(&[0.3, 0.3], &pairs, IntraLossMode::RankNet);
    let ln2_err = (equal - std::f64::consts::LN_2).abs();
    let mut prev = f64::INFINITY;
    let mut intra_monotone = true;
    let mut far = f64::NAN;
    for step in 0..=200 {
        let margin = 0.1 * step as f64;
        let (l, _) = intra_grade_loss(&[0.0, margin], &pairs, IntraLossMode::RankNet);
        intra_monotone &= l < prev;
        prev = l;
        far = l;
    }
    let pass = inter_monotone && pairs == vec![(0, 1)] && ln2_err < LN2_TOL && intra_monotone && far < FAR_MARGIN_LOSS;
    outcome(
        pass,
        format!(
            "inter strictly decreasing over gap [-10, 10]: {inter_monotone}; intra |L - ln 2| {ln2_err:.1e}, \
             decreasing over margin [0, 20]: {intra_monotone}, L(20) {far:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6 and 7. Synthetic benchmark
// ---------------------------------------------------------------------------

/// Macro-F1 straight from label lists; classes without support or predictions score 0.
fn oracle_macro_f1(truth: &[usize], pred: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..c {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == k && p == k).count() as f64;
        let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != k && p == k).count() as f64;
        let fn_ = truth.iter().zip(pred).filter(|&(&t, &p)| t == k && p != k).count() as f64;
        if tp > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    total / c as f64
}

struct VariantRun {
    f1: f64,
    worst_grade_attention: f64,
}

const VARIANTS: [&str; 5] = ["full", "norank", "dual", "latent", "none"];

fn variant_config(name: &str, seed: u64) -> TrainConfig {
    let base = TrainConfig::skin();
    let (mode, l1, l2) = match name {
        "full" => (GraphMode::Dual, base.lambda1, base.lambda2),
        "norank" => (GraphMode::Dual, 0.0, base.lambda2),
        "dual" => (GraphMode::Dual, 0.0, 0.0),
        "latent" => (GraphMode::Latent, 0.0, 0.0),
        "none" => (GraphMode::None, 0.0, 0.0),
        _ => unreachable!(),
    };
    TrainConfig {
        graph_mode: mode,
        lambda1: l1,
        lambda2: l2,
        seed,
        // Best-validation selection over the full 60 epochs.
        early_stop_patience: base.max_epochs,
        ..base
    }
}

struct Benchmark {
    runs: BTreeMap<(u64, &'static str), VariantRun>,
    elapsed: Duration,
}

fn run_benchmark() -> racr_core::Result<Benchmark> {
    let start = Instant::now();
    let bags = generate_synthetic_dataset(&SynthSpec::default(), 7)?;
    let labels: Vec<_> = bags.iter().map(|b| b.grade).collect();
    let folds = stratified_kfold(&labels, 4, &SplitSpec::default(), 7)?;
    let prepared = prepare_bags(&bags, &TrainConfig::skin())?;
    let pick = |idx: &[usize]| -> Vec<PreparedBag> { idx.iter().map(|&i| prepared[i].clone()).collect() };
    let mut runs = BTreeMap::new();
    for seed in 0..3u64 {
        for name in VARIANTS {
            let cfg = variant_config(name, seed);
            let (mut truth, mut pred) = (Vec::new(), Vec::new());
            let (mut att, mut count) = (0.0, 0usize);
            for fold in &folds {
                let out = train(&pick(&fold.train), &pick(&fold.val), &cfg)?;
                let report = evaluate(&out.best, &cfg, &pick(&fold.test), EvalOptions::default())?;
                for (b, &i) in report.bags.iter().zip(&fold.test) {
                    truth.push(bags[i].grade.index());
                    pred.push(b.predicted);
                    for region in bags[i].annotations.iter().filter(|a| a.region_grade == bags[i].grade) {
                        for &n in &region.patch_indices {
                            att += b.attention[n];
                            count += 1;
                        }
                    }
                }
            }
            let run = VariantRun {
                f1: oracle_macro_f1(&truth, &pred, 4),
                worst_grade_attention: att / count as f64,
            };
            eprintln!(
                "  seed {seed} {name:<6} pooled test macro-F1 {:.3}, worst-grade attention {:.4}",
                run.f1, run.worst_grade_attention
            );
            runs.insert((seed, name), run);
        }
    }
    Ok(Benchmark { runs, elapsed: start.elapsed() })
}

fn mean_over_seeds(b: &Benchmark, name: &str, f: impl Fn(&VariantRun) -> f64) -> f64 {
    let name = *VARIANTS.iter().find(|v| **v == name).unwrap();
    (0..3u64).map(|s| f(&b.runs[&(s, name)])).sum::<f64>() / 3.0
}

fn criterion_6(b: &Benchmark) -> Outcome {
    let m: Vec<f64> = ["full", "dual", "latent", "none"].iter().map(|v| mean_over_seeds(b, v, |r| r.f1)).collect();
    let gaps = [m[0] - m[1], m[1] - m[2], m[2] - m[3]];
    let pass = m[0] >= LEARNABILITY_F1 && gaps.iter().all(|&g| g >= 0.0) && b.elapsed < BENCHMARK_BUDGET;
    outcome(
        pass,
        format!(
            "mean pooled macro-F1 full {:.3} (>= {LEARNABILITY_F1}), dual {:.3}, single {:.3}, none {:.3}; \
             gaps {:+.3} {:+.3} {:+.3}; {:.0}s",
            m[0], m[1], m[2], m[3], gaps[0], gaps[1], gaps[2], b.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7(b: &Benchmark) -> Outcome {
    let diffs: Vec<f64> = (0..3)
        .map(|s| b.runs[&(s, "full")].worst_grade_attention - b.runs[&(s, "norank")].worst_grade_attention)
        .collect();
    let mean = diffs.iter().sum::<f64>() / 3.0;
    outcome(
        mean > 0.0,
        format!(
            "worst-grade attention, lambda1 > 0 minus lambda1 = 0: per seed {:+.4} {:+.4} {:+.4}, mean {mean:+.4}",
            diffs[0], diffs[1], diffs[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Metric oracles
// ---------------------------------------------------------------------------

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn criterion_8() -> Outcome {
    let mut r = rng(800);
    let (mut ident_err, mut indep_err) = (0.0f64, 0.0f64);
    for c in 2..=5 {
        let diag = Array2::from_shape_fn((c, c), |(i, j)| if i == j { r.random_range(1..20u64) } else { 0 });
        for v in [quadratic_weighted_kappa(&diag).unwrap().value, mcc(&diag).unwrap().value] {
            ident_err = ident_err.max((v - 1.0).abs());
        }
        let rows: Vec<u64> = (0..c).map(|_| r.random_range(1..8)).collect();
        let cols: Vec<u64> = (0..c).map(|_| r.random_range(1..8)).collect();
        let outer = Array2::from_shape_fn((c, c), |(i, j)| rows[i] * cols[j]);
        for v in [quadratic_weighted_kappa(&outer).unwrap().value, mcc(&outer).unwrap().value] {
            indep_err = indep_err.max(v.abs());
        }
    }
    let mut auc_err = 0.0f64;
    let mut instances = 0;
    while instances < 200 {
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..20).map(|_| (r.random::<f64>() * 8.0).round() / 8.0).collect();
        let positive: Vec<bool> = (0..20).map(|_| r.random::<bool>()).collect();
        let Some(a) = auc(&scores, &positive) else { continue };
        auc_err = auc_err.max((a - pairwise_auc(&scores, &positive)).abs());
        instances += 1;
    }
    let pass = ident_err < KAPPA_TOL && indep_err < KAPPA_TOL && auc_err < AUC_TOL;
    outcome(
        pass,
        format!(
            "identity kappa/MCC err {ident_err:.1e}, independent kappa/MCC {indep_err:.1e}, \
             AUC vs pairwise on 200 instances {auc_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Determinism and formats
// ---------------------------------------------------------------------------

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Result<Outcome, Box<dyn std::error::Error>> {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let spec = SynthSpec { class_counts: vec![6, 4, 3, 2], bag_size: [8, 14], feature_dim: 8, ..SynthSpec::default() };

    let (a, b, c) = (tempfile::tempdir()?, tempfile::tempdir()?, tempfile::tempdir()?);
    let d1 = generate_synthetic_dataset(&spec, 11)?;
    let d2 = generate_synthetic_dataset(&spec, 11)?;
    write_dataset(&d1, a.path())?;
    write_dataset(&d2, b.path())?;
    checks.push(("dataset bytes", tree(a.path()) == tree(b.path())));
    let back = read_dataset(a.path())?;
    checks.push(("dataset round trip", back == d1));
    write_dataset(&back, c.path())?;
    checks.push(("dataset rewrite bytes", tree(a.path()) == tree(c.path())));
    let single = tempfile::tempdir()?;
    let path = write_bag(&d1[0], single.path())?;
    let bag = read_bag(&path)?;
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    checks.push(("bag features bit-exact", bits(&bag.features) == bits(&d1[0].features)));

    let cfg = TrainConfig { d_h: 8, max_epochs: 3, batch_size: 4, learning_rate: 1e-3, ..TrainConfig::skin() };
    let prepared = prepare_bags(&d1, &cfg)?;
    let (tr, va) = prepared.split_at(10);
    let r1 = train(tr, va, &cfg)?;
    let r2 = train(tr, va, &cfg)?;
    checks.push(("log bytes", log_to_csv(&r1.log) == log_to_csv(&r2.log)));
    let (k1, k2, k3) = (tempfile::tempdir()?, tempfile::tempdir()?, tempfile::tempdir()?);
    let ckpt = |o: &racr_core::trainer::TrainOutcome| Checkpoint {
        params: o.best.clone(),
        config: cfg.clone(),
        meta: CheckpointMeta { best_epoch: Some(o.best_epoch), best_val_f1: Some(o.best_val_f1) },
    };
    save_checkpoint(&ckpt(&r1), k1.path())?;
    save_checkpoint(&ckpt(&r2), k2.path())?;
    checks.push(("checkpoint bytes", tree(k1.path()) == tree(k2.path())));
    save_checkpoint(&load_checkpoint(k1.path())?, k3.path())?;
    checks.push(("checkpoint round trip", tree(k1.path()) == tree(k3.path())));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok(if failed.is_empty() {
        outcome(true, format!("{} checks: {}", checks.len(), checks.iter().map(|c| c.0).collect::<Vec<_>>().join(", ")))
    } else {
        outcome(false, format!("failed: {}", failed.join(", ")))
    })
}

// ---------------------------------------------------------------------------
// 10. Defaults snapshot
// ---------------------------------------------------------------------------

const SKIN_SNAPSHOT: &str = r#"{
  "lambda1": 0.2,
  "lambda2": 0.1,
  "warmup_epochs": 10,
  "learning_rate": 0.0001,
  "weight_decay": 0.001,
  "betas": [0.9, 0.999],
  "adam_eps": 1e-8,
  "batch_size": 16,
  "max_epochs": 60,
  "early_stop_patience": 9,
  "seed": 0,
  "beta_cb": 0.999,
  "alpha": 0.25,
  "truncation_tol": 1e-10,
  "delta": 0.02,
  "top_m": 5,
  "k_latent": 8,
  "k_spatial": 8,
  "latent_weight": "similarity",
  "diffusion_mode": "auto",
  "d_h": 64,
  "dropout": 0.5,
  "layers": 1,
  "graph_mode": "dual",
  "message_combine": "sum",
  "tau": 0.1,
  "diversity_mode": "decorrelate",
  "grade_loss_mode": "softmax_ce",
  "intra_loss_mode": "rank_net",
  "prototype_mode": "learned",
  "prototype_momentum": 0.9,
  "normalize_grade_prototypes": false,
  "confidence_threshold": 0.5,
  "K": 16,
  "bin_width": 0.1,
  "pair_cap": 512
}"#;

fn criterion_10() -> Outcome {
    let want: serde_json::Value = serde_json::from_str(SKIN_SNAPSHOT).unwrap();
    let mut ok = serde_json::to_value(TrainConfig::skin()).unwrap() == want;
    ok &= serde_json::to_value(TrainConfig::default()).unwrap() == want;
    ok &= TrainConfig::from_json(SKIN_SNAPSHOT).ok() == Some(TrainConfig::skin());
    ok &= TrainConfig::from_json("{}").ok() == Some(TrainConfig::skin());
    let mut hn = want.clone();
    hn["lambda1"] = 0.1.into();
    hn["max_epochs"] = 100.into();
    ok &= serde_json::to_value(TrainConfig::head_neck()).unwrap() == hn;
    let mut lung = want;
    lung["lambda1"] = 0.3.into();
    lung["tau"] = 0.3.into();
    lung["max_epochs"] = 100.into();
    ok &= serde_json::to_value(TrainConfig::lung()).unwrap() == lung;
    outcome(ok, "skin, head_neck and lung presets match the pinned snapshot; {} loads as skin")
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("RACR_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let titles = [
        "gradient fidelity",
        "diffusion oracle",
        "graph oracles",
        "normalization invariants",
        "ranking monotonicity",
        "synthetic learnability and ablation ordering",
        "ranking localization effect",
        "metric oracles",
        "determinism and formats",
        "hyperparameter defaults",
    ];
    let benchmark = if wanted(6) || wanted(7) { Some(run_benchmark()) } else { None };
    let mut failed = 0;
    let mut ran = 0;
    for (idx, title) in titles.iter().enumerate() {
        let i = idx + 1;
        if !wanted(i) {
            continue;
        }
        let result = match i {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 | 7 => match benchmark.as_ref().unwrap() {
                Ok(b) if i == 6 => criterion_6(b),
                Ok(b) => criterion_7(b),
                Err(e) => outcome(false, format!("benchmark error: {e}")),
            },
            8 => criterion_8(),
            9 => criterion_9().unwrap_or_else(|e| outcome(false, format!("error: {e}"))),
            10 => criterion_10(),
            _ => unreachable!(),
        };
        ran += 1;
        failed += !result.pass as usize;
        println!(
            "{} criterion {i}: {title}: {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!("acceptance: {}/{ran} criteria pass", ran - failed);
    if failed > 0 && std::env::var_os("RACR_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
