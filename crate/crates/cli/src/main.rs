use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;

use racr_core::bagio::{generate_synthetic_dataset, stratified_kfold, SplitSpec, SynthSpec};
use racr_core::checkpoint::CheckpointMeta;
use racr_core::evalkit::{
    evaluate, heatmap, render_attention_heatmap, render_probability_heatmap, write_eval_outputs, EvalOptions,
};
use racr_core::graphbuild::write_graph_cache;
use racr_core::ingest::{ingest_image, load_rgb, ColorStatsProvider, CommandProvider, FeatureProvider, IngestConfig};
use racr_core::model::predict;
use racr_core::trainer::{gradcheck, log_to_csv, train, GradcheckOptions, PreparedBag};
use racr_core::{
    build_hybrid_graph, load_checkpoint, prepare_bags, read_bag, read_dataset, save_checkpoint, write_bag,
    write_dataset, Bag, Checkpoint, GradeLabel, TrainConfig,
};

/// Rank-aware dual-graph attention MIL for ordinal grading of patch bags.
#[derive(Parser)]
#[command(name = "racr", version)]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-bag work. Results do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted synthetic dataset.
    Synth {
        /// JSON synthetic spec; missing fields take the 200-bag benchmark defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tile one RGB image into a bag.
    Ingest(IngestArgs),
    /// Build and cache the latent and spatial graphs of every bag.
    Graph {
        /// Dataset directory.
        #[arg(long, visible_alias = "in")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Restart probability of the diffusion.
        #[arg(long)]
        alpha: Option<f64>,
        /// Edges at or below this diffused weight are dropped.
        #[arg(long)]
        delta: Option<f64>,
        /// Strongest diffused entries kept per node.
        #[arg(long)]
        topm: Option<usize>,
    },
    /// Train on one cross-validation fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metrics, curves and heatmaps.
    Eval(EvalArgs),
    /// Render attention and probability heatmaps for one bag.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bag directory.
        #[arg(long)]
        bag: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per tile.
        #[arg(long, default_value_t = 16)]
        cell: u32,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Use the literal loss forms for grade, intra-grade and diversity terms.
        #[arg(long)]
        literal: bool,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        /// Patches per random bag (at most 12).
        #[arg(long, default_value_t = 10)]
        patches: usize,
        /// Hidden size (at most 8).
        #[arg(long, default_value_t = 6)]
        hidden: usize,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON training config; missing fields take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: skin, head_neck or lung.
    #[arg(long, default_value = "skin")]
    preset: String,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    bag_id: String,
    /// Integer grade code, 0 = normal.
    #[arg(long)]
    grade: u8,
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
    #[arg(long)]
    out: PathBuf,
    /// JSON ingest config.
    #[arg(long)]
    ingest_config: Option<PathBuf>,
    #[arg(long)]
    tile_size: Option<u32>,
    #[arg(long)]
    coverage: Option<f64>,
    #[arg(long)]
    entropy_threshold: Option<f64>,
    /// External feature extractor, run as `PROGRAM [ARGS..] <crops_dir> <out_file>`.
    /// Defaults to built-in color statistics.
    #[arg(long)]
    provider: Option<PathBuf>,
    #[arg(long = "provider-arg", allow_hyphen_values = true)]
    provider_args: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Fold to train on.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// dual, latent, spatial or none.
    #[arg(long)]
    graph_mode: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `split.json` written by `train`; evaluates all bags when absent.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Which part of the split to evaluate: train, val or test.
    #[arg(long, default_value = "test", requires = "split")]
    subset: String,
    /// ROI gate: max_non_normal or predicted_class.
    #[arg(long)]
    roi_rule: Option<String>,
    /// Fraction of a region's patches the ROI must cover.
    #[arg(long)]
    min_overlap: Option<f64>,
    #[arg(long, default_value_t = 16)]
    cell: u32,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SplitFile {
    fold: usize,
    folds: usize,
    seed: u64,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn parse_enum<T: DeserializeOwned>(what: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .with_context(|| format!("unknown {what} {value:?}"))
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::preset(&args.preset).with_context(|| format!("unknown preset {:?}", args.preset))?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        // Fields present in the file replace the preset's.
        let mut merged = serde_json::to_value(&cfg)?;
        let file: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let Some(obj) = file.as_object() else {
            bail!("{}: expected a JSON object", path.display());
        };
        for (k, v) in obj {
            merged[k] = v.clone();
        }
        cfg = TrainConfig::from_json(&merged.to_string()).with_context(|| format!("config {}", path.display()))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ensure_classes(bags: &[Bag]) -> Result<usize> {
    let Some(first) = bags.first() else {
        bail!("no bags found");
    };
    if bags.iter().any(|b| b.num_classes != first.num_classes || b.feature_dim != first.feature_dim) {
        bail!("bags disagree on class count or feature dimension");
    }
    Ok(first.num_classes)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(spec: Option<PathBuf>, out: &Path, seed: u64) -> Result<()> {
    let spec: SynthSpec = match spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SynthSpec::default(),
    };
    let bags = generate_synthetic_dataset(&spec, seed)?;
    write_dataset(&bags, out)?;
    println!("wrote {} bags to {}", bags.len(), out.display());
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let mut cfg: IngestConfig = match &a.ingest_config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => IngestConfig::default(),
    };
    if let Some(v) = a.tile_size {
        cfg.tile_size = v;
    }
    if let Some(v) = a.coverage {
        cfg.coverage = v;
    }
    if let Some(v) = a.entropy_threshold {
        cfg.entropy_threshold = v;
    }
    if usize::from(a.grade) >= a.num_classes {
        bail!("grade {} out of range for {} classes", a.grade, a.num_classes);
    }
    let img = load_rgb(&a.image)?;
    let provider: Box<dyn FeatureProvider> = match a.provider {
        Some(program) => Box::new(CommandProvider { program, args: a.provider_args }),
        None => Box::new(ColorStatsProvider),
    };
    let bag = ingest_image(&img, &a.bag_id, GradeLabel(a.grade), a.num_classes, &cfg, provider.as_ref())?;
    let dir = write_bag(&bag, &a.out)?;
    println!("{}: {} tiles, {} features -> {}", bag.bag_id, bag.len(), bag.feature_dim, dir.display());
    Ok(())
}

fn cmd_graph(data: &Path, out: &Path, cfg: &TrainConfig) -> Result<()> {
    let bags = read_dataset(data)?;
    std::fs::create_dir_all(out)?;
    let dcfg = cfg.diffusion();
    let graphs: Vec<_> = bags.par_iter().map(|b| build_hybrid_graph(b, &dcfg)).collect::<Result<_, _>>()?;
    for (b, g) in bags.iter().zip(&graphs) {
        write_graph_cache(&out.join(format!("{}.graph", b.bag_id)), g)?;
    }
    let edges: usize = graphs.iter().map(|g| g.latent.edge_count() + g.spatial.edge_count()).sum();
    println!("wrote {} graphs ({} edges) to {}", graphs.len(), edges, out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(&a.config, seed)?;
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.patience {
        cfg.early_stop_patience = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lambda1 {
        cfg.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        cfg.lambda2 = v;
    }
    if let Some(m) = &a.graph_mode {
        cfg.graph_mode = parse_enum("graph mode", m)?;
    }
    cfg.validate()?;
    if a.fold >= a.folds {
        bail!("--fold {} out of range for {} folds", a.fold, a.folds);
    }

    let bags = read_dataset(&a.data)?;
    let c = ensure_classes(&bags)?;
    let labels: Vec<GradeLabel> = bags.iter().map(|b| b.grade).collect();
    let spec = if a.folds == 1 {
        SplitSpec { fold_count: 1, train: 0.7, val: 0.15, test: 0.15 }
    } else {
        let test = 1.0 / a.folds as f64;
        SplitSpec { fold_count: a.folds, train: (1.0 - test) * 0.8, val: (1.0 - test) * 0.2, test }
    };
    let folds = stratified_kfold(&labels, c, &spec, cfg.seed)?;
    let fold = &folds[a.fold];
    let prepared = prepare_bags(&bags, &cfg)?;
    let pick = |idx: &[usize]| -> Vec<PreparedBag> { idx.iter().map(|&i| prepared[i].clone()).collect() };
    let ids = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| bags[i].bag_id.clone()).collect() };

    let outcome = train(&pick(&fold.train), &pick(&fold.val), &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let meta = CheckpointMeta { best_epoch: Some(outcome.best_epoch), best_val_f1: Some(outcome.best_val_f1) };
    save_checkpoint(
        &Checkpoint { params: outcome.best.clone(), config: cfg.clone(), meta: meta.clone() },
        &a.out.join("checkpoint"),
    )?;
    save_checkpoint(&Checkpoint { params: outcome.last, config: cfg.clone(), meta }, &a.out.join("last"))?;
    std::fs::write(a.out.join("log.csv"), log_to_csv(&outcome.log))?;
    write_json(&a.out.join("config.json"), &cfg)?;
    write_json(
        &a.out.join("split.json"),
        &SplitFile {
            fold: a.fold,
            folds: a.folds,
            seed: cfg.seed,
            train: ids(&fold.train),
            val: ids(&fold.val),
            test: ids(&fold.test),
        },
    )?;
    println!(
        "best epoch {} val macro-F1 {:.4}{}; checkpoint in {}",
        outcome.best_epoch,
        outcome.best_val_f1,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        a.out.join("checkpoint").display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut bags = read_dataset(&a.data)?;
    if let Some(path) = &a.split {
        let split: SplitFile = serde_json::from_str(&std::fs::read_to_string(path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        let keep = match a.subset.as_str() {
            "train" => split.train,
            "val" => split.val,
            "test" => split.test,
            other => bail!("unknown subset {other:?}; expected train, val or test"),
        };
        bags.retain(|b| keep.contains(&b.bag_id));
        if bags.len() != keep.len() {
            bail!("{} of {} split bags found in {}", bags.len(), keep.len(), a.data.display());
        }
    }
    ensure_classes(&bags)?;
    let mut opts = EvalOptions::default();
    if let Some(r) = &a.roi_rule {
        opts.roi_rule = parse_enum("ROI rule", r)?;
    }
    if let Some(m) = a.min_overlap {
        opts.min_overlap = m;
    }
    let prepared = prepare_bags(&bags, &ckpt.config)?;
    let report = evaluate(&ckpt.params, &ckpt.config, &prepared, opts)?;
    write_eval_outputs(&report, &prepared, &a.out, a.cell)?;
    println!(
        "{} bags: macro-F1 {:.4}, kappa {:.4}, MCC {:.4}; outputs in {}",
        report.num_bags,
        report.metrics.f1,
        report.kappa.value,
        report.mcc.value,
        a.out.display()
    );
    Ok(())
}

fn cmd_heatmap(checkpoint: &Path, bag: &Path, out: &Path, cell: u32) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let bag = read_bag(bag)?;
    let graph = build_hybrid_graph(&bag, &ckpt.config.diffusion())?;
    let pred = predict(&ckpt.params, &ckpt.config, &bag.feature_matrix(), &graph)?;
    let att = heatmap(&pred.attention);
    if att.degenerate {
        log::warn!("{}: uniform attention, heatmap is flat", bag.bag_id);
    }
    std::fs::create_dir_all(out)?;
    let a = out.join(format!("{}_attention.png", bag.bag_id));
    let p = out.join(format!("{}_probability.png", bag.bag_id));
    render_attention_heatmap(&bag.coords, &att.value, cell).save(&a)?;
    render_probability_heatmap(&bag.coords, &pred.patch_probs, cell).save(&p)?;
    println!("{}: predicted grade {}; wrote {} and {}", bag.bag_id, pred.grade, a.display(), p.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global()?;
    }
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(spec, &out, cli.seed.unwrap_or(0))?,
        Command::Ingest(a) => cmd_ingest(a)?,
        Command::Graph { data, out, config, alpha, delta, topm } => {
            let mut cfg = load_config(&config, cli.seed)?;
            cfg.alpha = alpha.unwrap_or(cfg.alpha);
            cfg.delta = delta.unwrap_or(cfg.delta);
            cfg.top_m = topm.unwrap_or(cfg.top_m);
            cfg.validate()?;
            cmd_graph(&data, &out, &cfg)?
        }
        Command::Train(a) => cmd_train(a, cli.seed)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Heatmap { checkpoint, bag, out, cell } => cmd_heatmap(&checkpoint, &bag, &out, cell)?,
        Command::Gradcheck { config, literal, instances, patches, hidden } => {
            let mut cfg = load_config(&config, None)?;
            if literal {
                cfg.grade_loss_mode = parse_enum("mode", "paper_literal")?;
                cfg.intra_loss_mode = parse_enum("mode", "paper_literal")?;
                cfg.diversity_mode = parse_enum("mode", "paper_literal")?;
            }
            let opts = GradcheckOptions {
                instances,
                patches,
                hidden_dim: hidden,
                seed: cli.seed.unwrap_or(0),
                ..GradcheckOptions::default()
            };
            let report = gradcheck(&cfg, &opts)?;
            print!("{}", report.to_text());
            return Ok(report.pass);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
