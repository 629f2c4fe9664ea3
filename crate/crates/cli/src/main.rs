use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use srcr_core::config::Variant;
use srcr_core::dataset::{self, FeatureSet, ModalFeatures};
use srcr_core::eval::{self, RankOptions};
use srcr_core::pipeline::{self, PairReport};
use srcr_core::split::{self, open_set_split};
use srcr_core::synth::{generate_synthetic, SynthConfig};
use srcr_core::{checkpoint, report, MetricReport, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "srcr", version, about = "Self-supervised open-set cross-modal retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-modal dataset.
    Synth(SynthArgs),
    /// Split categories into seen (train) and unseen (test) index files.
    Split(SplitArgs),
    /// Train both stages on features only and write a checkpoint.
    Train(TrainArgs),
    /// Embed a dataset with a checkpoint into an OCMF file.
    Embed(EmbedArgs),
    /// Score all modality pairs of an embeddings file.
    Eval(EvalArgs),
    /// Retrain and score every ablation variant on one split.
    Ablate(AblateArgs),
    /// Empirical risk of an embeddings file.
    Risk(RiskArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u32).range(1..))]
    categories: u32,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    per_category: u32,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    modalities: u32,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    dim: u32,
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0.6)]
    jitter: f64,
    #[arg(long, default_value_t = 2022)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    unseen_fraction: f64,
    #[arg(long, default_value_t = 2022)]
    seed: u64,
    /// Receives `train.idx` and `test.idx`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set knn_k=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Restrict training to the objects listed in an index file.
    #[arg(long)]
    indices: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Allow label-consuming variants to read the label section.
    #[arg(long)]
    use_labels: bool,
    /// Receives `model.srcr`, `rce_loss.csv` and `hsl_loss.csv`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    indices: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Labelled OCMF, usually written by `embed`.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 11, value_parser = clap::value_parser!(u32).range(2..))]
    points: u32,
    /// Drop the target at the query's own object index.
    #[arg(long)]
    exclude_self: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    unseen_fraction: f64,
    #[arg(long, default_value_t = 2022)]
    split_seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
    /// Variant tags to run; defaults to every label-free variant.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Also run the label-consuming category-center variant.
    #[arg(long)]
    use_labels: bool,
    #[arg(long, default_value_t = 11, value_parser = clap::value_parser!(u32).range(2..))]
    points: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RiskArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Errors that should exit with the usage status.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split_cmd(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Risk(a) => risk(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => create_dir(dir),
        _ => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn build_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &args.variant {
        cfg.variant = v
            .parse()
            .map_err(|e: srcr_core::config::ConfigError| usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_categories: a.categories as usize,
        per_category: a.per_category as usize,
        n_modalities: a.modalities as usize,
        feature_dim: a.dim as usize,
        modality_shift: a.shift,
        noise: a.noise,
        object_jitter: a.jitter,
        seed: a.seed,
    };
    let fs = generate_synthetic(&cfg)?;
    ensure_parent(&a.out)?;
    dataset::write_ocmf(&fs, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    dataset::write_manifest(
        &a.out,
        &[
            ("dataset", "synthetic".to_string()),
            ("categories", a.categories.to_string()),
            ("per_category", a.per_category.to_string()),
            ("shift", a.shift.to_string()),
            ("noise", a.noise.to_string()),
            ("jitter", a.jitter.to_string()),
            ("seed", a.seed.to_string()),
        ],
    )?;
    println!(
        "wrote {}: N={} M={} d0={} categories={}",
        a.out.display(),
        fs.n_objects(),
        fs.n_modalities(),
        fs.feature_dim(),
        a.categories
    );
    Ok(())
}

fn split_cmd(a: SplitArgs) -> Result<()> {
    let fs = dataset::read_ocmf(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let labels = fs.labels.as_ref().context("splitting needs a labelled dataset")?;
    let s = open_set_split(labels, a.unseen_fraction, a.seed).map_err(|e| usage(e.to_string()))?;
    create_dir(&a.out_dir)?;
    let seen = format!(
        "seen categories: {:?}\nunseen_fraction={} seed={}",
        s.seen_categories, a.unseen_fraction, a.seed
    );
    let unseen = format!(
        "unseen categories: {:?}\nunseen_fraction={} seed={}",
        s.unseen_categories, a.unseen_fraction, a.seed
    );
    split::write_index_file(a.out_dir.join("train.idx"), &s.train_indices, &seen)?;
    split::write_index_file(a.out_dir.join("test.idx"), &s.test_indices, &unseen)?;
    println!(
        "train: {} objects in {} categories; test: {} objects in {} categories",
        s.train_indices.len(),
        s.seen_categories.len(),
        s.test_indices.len(),
        s.unseen_categories.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = build_config(&a.config)?;
    let model = if cfg.variant.uses_labels() {
        if !a.use_labels {
            return Err(usage(format!(
                "variant `{}` reads labels; pass --use-labels to allow it",
                cfg.variant
            )));
        }
        let fs = dataset::read_ocmf(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
        let fs = match &a.indices {
            None => fs,
            Some(p) => fs.subset(&split::read_index_file(p)?),
        };
        pipeline::train_variant(&cfg, cfg.variant, &fs)?
    } else {
        // Only the feature blocks are read; the label section is skipped.
        let file = std::fs::File::open(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
        let indices = match &a.indices {
            Some(p) => Some(split::read_index_file(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        pipeline::train_from_ocmf(&cfg, file, indices.as_deref())?
    };
    create_dir(&a.out_dir)?;
    let hash = cfg.hash();
    checkpoint::save(&model, a.out_dir.join("model.srcr"))?;
    write(
        &a.out_dir.join("rce_loss.csv"),
        &report::rce_loss_csv(&model.rce_log, &hash),
    )?;
    write(
        &a.out_dir.join("hsl_loss.csv"),
        &report::hsl_loss_csv(&model.hsl_log, &hash),
    )?;
    let last = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    println!(
        "config-hash {hash}: rce loss {} -> {}, hsl loss {} -> {}",
        last(model.rce_log.first().map(|r| r.loss.total)),
        last(model.rce_log.last().map(|r| r.loss.total)),
        last(model.hsl_log.first().copied()),
        last(model.hsl_log.last().copied())
    );
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let fs = dataset::read_ocmf(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let fs = match &a.indices {
        None => fs,
        Some(p) => {
            let idx = split::read_index_file(p).with_context(|| format!("reading {}", p.display()))?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= fs.n_objects()) {
                bail!("index {bad} out of range for {} objects", fs.n_objects());
            }
            fs.subset(&idx)
        }
    };
    let blocks = model.embed(&fs.features)?;
    let names = fs.features.modality_names().to_vec();
    let features = ModalFeatures::from_tensors(&blocks, names)?;
    let out = FeatureSet::new(features, fs.labels.clone())?;
    ensure_parent(&a.out)?;
    dataset::write_ocmf(&out, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    dataset::write_manifest(
        &a.out,
        &[
            ("config_hash", model.config.hash()),
            ("objects", out.n_objects().to_string()),
            ("variant", model.config.variant.tag().to_string()),
        ],
    )?;
    println!(
        "wrote {}: {} objects x {} modalities, dim {}",
        a.out.display(),
        out.n_objects(),
        out.n_modalities(),
        out.feature_dim()
    );
    Ok(())
}

fn config_hash_of(path: &Path) -> Result<String> {
    let manifest = dataset::read_manifest(path)?;
    Ok(manifest
        .and_then(|m| m.into_iter().find(|(k, _)| k == "config_hash").map(|(_, v)| v))
        .unwrap_or_else(|| "none".to_string()))
}

fn pair_name(names: &[String], p: &PairReport) -> String {
    format!("{}-to-{}", names[p.query_modality], names[p.target_modality])
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let fs = dataset::read_ocmf(&a.embeddings).with_context(|| format!("reading {}", a.embeddings.display()))?;
    let labels = fs
        .labels
        .as_ref()
        .context("evaluation needs a labelled embeddings file")?;
    let hash = config_hash_of(&a.embeddings)?;
    let blocks: Vec<_> = (0..fs.n_modalities()).map(|r| fs.features.tensor(r)).collect();
    let options = RankOptions {
        exclude_same_index: a.exclude_self,
    };
    let pairs = pipeline::evaluate_pairs(&blocks, labels, a.points as usize, options)?;
    create_dir(&a.out_dir)?;
    let names = fs.features.modality_names();
    println!("{:<24} {:>8} {:>8} {:>8}", "pair", "mAP", "NDCG", "ANMRR");
    for p in &pairs {
        let name = pair_name(names, p);
        write(
            &a.out_dir.join(format!("{name}.csv")),
            &report::metrics_csv(&p.report, &hash, &name),
        )?;
        write(
            &a.out_dir.join(format!("{name}_pr.csv")),
            &report::pr_csv(&p.report.pr_curve, &hash, &name),
        )?;
        let svg = report::pr_svg(&name, &[(&name, &p.report.pr_curve)], &hash);
        write(&a.out_dir.join(format!("{name}_pr.svg")), &svg)?;
        println!(
            "{name:<24} {:>8.4} {:>8.4} {:>8.4}",
            p.report.map, p.report.ndcg, p.report.anmrr
        );
    }
    let mean = pipeline::mean_report(&pairs).context("no pairs to average")?;
    write(
        &a.out_dir.join("mean.csv"),
        &report::metrics_csv(&mean, &hash, "mean over pairs"),
    )?;
    let curves: Vec<(String, &[(f64, f64)])> = pairs
        .iter()
        .map(|p| (pair_name(names, p), p.report.pr_curve.as_slice()))
        .collect();
    let series: Vec<(&str, &[(f64, f64)])> = curves.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    write(
        &a.out_dir.join("pr.svg"),
        &report::pr_svg("precision-recall", &series, &hash),
    )?;
    println!(
        "{:<24} {:>8.4} {:>8.4} {:>8.4}",
        "mean", mean.map, mean.ndcg, mean.anmrr
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = build_config(&a.config)?;
    let mut variants: Vec<Variant> = if a.variants.is_empty() {
        Variant::SELF_SUPERVISED.to_vec()
    } else {
        a.variants
            .iter()
            .map(|t| t.parse::<Variant>().map_err(|e| usage(e.to_string())))
            .collect::<Result<_>>()?
    };
    if a.use_labels && !variants.contains(&Variant::CategoryCenter) {
        variants.insert(0, Variant::CategoryCenter);
    }
    if !a.use_labels && variants.iter().any(|v| v.uses_labels()) {
        return Err(usage("category-center reads labels; pass --use-labels to run it"));
    }
    let fs = dataset::read_ocmf(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let labels = fs.labels.as_ref().context("ablation needs a labelled dataset")?;
    let s = open_set_split(labels, a.unseen_fraction, a.split_seed).map_err(|e| usage(e.to_string()))?;
    let train_set = fs.subset(&s.train_indices);
    let test_set = fs.subset(&s.test_indices);
    let test_labels = test_set.labels.clone().unwrap_or_default();
    let n = a.points as usize;
    let options = RankOptions::default();

    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    let random = pipeline::random_baseline(&test_labels, fs.n_modalities(), cfg.seed, n)?;
    rows.push(("Random".into(), pipeline::mean_report(&random).context("no pairs")?));
    let raw = pipeline::raw_feature_baseline(&test_set.features, &test_labels, n, options)?;
    rows.push(("Raw features".into(), pipeline::mean_report(&raw).context("no pairs")?));
    for v in variants {
        log::info!("training variant {v}");
        let model = pipeline::train_variant(&cfg, v, &train_set)?;
        let pairs = pipeline::evaluate_model(&model, &test_set, n, options)?;
        rows.push((
            v.label().to_string(),
            pipeline::mean_report(&pairs).context("no pairs")?,
        ));
    }
    write(&a.out, &report::ablation_csv(&rows, &cfg.hash()))?;
    println!("{:<32} {:>8} {:>8} {:>8}", "variant", "mAP", "NDCG", "ANMRR");
    for (name, r) in &rows {
        println!("{name:<32} {:>8.4} {:>8.4} {:>8.4}", r.map, r.ndcg, r.anmrr);
    }
    Ok(())
}

fn risk(a: RiskArgs) -> Result<()> {
    let fs = dataset::read_ocmf(&a.embeddings).with_context(|| format!("reading {}", a.embeddings.display()))?;
    let labels = fs.labels.as_ref().context("risk needs a labelled embeddings file")?;
    let hash = config_hash_of(&a.embeddings)?;
    let names = fs.features.modality_names().to_vec();
    let mut text = report::hash_header(&hash);
    text.push_str("metric,value\n");
    let mut total = 0.0;
    let pairs = split::modality_pairs(fs.n_modalities());
    if pairs.is_empty() {
        bail!("risk needs at least two modalities");
    }
    for &(q, t) in &pairs {
        let r = eval::empirical_risk(&fs.features.tensor(q), labels, &fs.features.tensor(t), labels)?;
        total += r;
        let name = format!("{}-to-{}", names[q], names[t]);
        println!("{name:<24} {r:.6}");
        text.push_str(&format!("risk_{name},{r}\n"));
    }
    let mean = total / pairs.len() as f64;
    println!("{:<24} {mean:.6}", "mean");
    text.push_str(&format!("risk_mean,{mean}\n"));
    if let Some(out) = &a.out {
        write(out, &text)?;
    }
    Ok(())
}
