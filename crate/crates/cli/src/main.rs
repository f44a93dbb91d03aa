//! `promptrec` command-line interface.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric divergence during training.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use promptrec::bench::scalability;
use promptrec::checkpoint;
use promptrec::corpus::{
    dataset_stats, generate_synthetic, load_dataset, split_dataset, write_dataset, Dataset, DatasetFormat, SyntheticSpec,
};
use promptrec::eval::{aggregate_runs, format_table, metric_set, write_report_csv, MetricSet, ReportEntry};
use promptrec::training::{build_language_model, prepare, Ablation, Evaluation, Model, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "promptrec", version, about = "Soft-prompted aspect extraction and aspect-based rating prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted personalized aspects.
    GenData(GenData),
    /// Pre-train and fine-tune the language model, then train jointly.
    Train(Train),
    /// Metrics of a checkpoint on the test split of a dataset.
    Eval(Eval),
    /// Top-K aspects for one review.
    Extract(Single),
    /// Extracted aspects and predicted rating for one review.
    Recommend(Single),
    /// Training time for 10 epochs over increasing corpus sizes.
    BenchScalability(Bench),
    /// Train several ablations over several seeds and aggregate.
    Sweep(Sweep),
}

#[derive(Args)]
struct SpecFlags {
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    users: u64,
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u64).range(1..))]
    items: u64,
    #[arg(long, default_value_t = 4000, value_parser = clap::value_parser!(u64).range(1..))]
    records: u64,
    /// Distinct filler words.
    #[arg(long, default_value_t = 200)]
    vocab: usize,
    #[arg(long, default_value_t = 30)]
    aspect_pool: usize,
    #[arg(long, default_value_t = 3)]
    aspects_per_review: usize,
    #[arg(long, default_value_t = 12)]
    review_length: usize,
    #[arg(long, default_value_t = 2.0)]
    filler_skew: f64,
    #[arg(long, default_value_t = 0.2)]
    rating_noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl SpecFlags {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_users: self.users as usize,
            n_items: self.items as usize,
            n_records: self.records as usize,
            vocab_size: self.vocab,
            aspect_pool_size: self.aspect_pool,
            aspects_per_review: self.aspects_per_review,
            review_length: self.review_length,
            filler_skew: self.filler_skew,
            rating_noise_std: self.rating_noise,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    spec: SpecFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// TOML config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON-lines dataset.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Test-split metrics CSV; defaults to `<out>.eval.csv`.
    #[arg(long)]
    eval_out: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reviews for pre-training the base model instead of the training split.
    #[arg(long)]
    pretrain_corpus: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Single {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    user: String,
    #[arg(long)]
    item: String,
    #[arg(long)]
    review: String,
}

#[derive(Args)]
struct Bench {
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000,8000,16000")]
    sizes: Vec<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator seed for the corpus the subsets are drawn from.
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    /// Timings CSV; the fit is printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON-lines dataset; a synthetic corpus per seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    pretrain_corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "full,no_joint,no_prompt")]
    ablations: Vec<Ablation>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Aggregate CSV with columns dataset,variant,metric,mean,std.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let cfg = match path {
        Some(p) => TrainConfig::from_toml_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    load_dataset(path, DatasetFormat::JsonLines).with_context(|| format!("loading {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// `metric,value` rows; values use the shortest round-trip formatting.
fn write_eval_csv<W: Write>(ev: &Evaluation, mut out: W) -> anyhow::Result<()> {
    writeln!(out, "metric,value")?;
    for (name, v) in metric_set(&ev.extraction, &ev.rec) {
        writeln!(out, "{name},{v}")?;
    }
    writeln!(out, "extraction_loss,{}", ev.extraction_loss)?;
    writeln!(out, "rec_loss,{}", ev.rec_loss)?;
    out.flush()?;
    Ok(())
}

/// The test split the model was evaluated on while training.
fn test_split(model: &Model, data: &Dataset) -> anyhow::Result<Dataset> {
    let (_, _, test) = split_dataset(data, model.config.split_ratios(), model.config.seed)?;
    Ok(test)
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let d = generate_synthetic(&a.spec.spec())?;
    write_dataset(&a.out, &d).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", dataset_stats(&d)?);
    Ok(())
}

fn train(a: Train) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(ab) = a.ablation {
        cfg = cfg.with_ablation(ab);
    }
    let data = load_data(&a.data)?;
    let generic = a.pretrain_corpus.as_deref().map(load_data).transpose()?;
    let prep = prepare(&cfg, &data)?;
    let lm = build_language_model(&cfg, &prep, generic.as_ref())?;
    info!("pre-training curve {:?}", lm.pretrain_curve);
    info!("fine-tuning curve {:?}", lm.finetune_curve);
    let out = Trainer::new(&cfg, &prep, lm.model)?.run()?;
    checkpoint::save(&out.model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let history = a.history.unwrap_or_else(|| sibling(&a.out, ".history.csv"));
    out.history.write_csv(create(&history)?)?;
    let ev = out.model.evaluate(&prep.test)?;
    let eval_path = a.eval_out.unwrap_or_else(|| sibling(&a.out, ".eval.csv"));
    write_eval_csv(&ev, create(&eval_path)?)?;
    println!(
        "{} epochs (best {:?}); test f1 {:.4} rmse {:.4} mae {:.4}",
        out.history.epochs.len(),
        out.history.best_epoch,
        ev.extraction.f1,
        ev.rec.rmse,
        ev.rec.mae
    );
    Ok(())
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let ev = model.evaluate(&test_split(&model, &data)?)?;
    match a.out {
        Some(p) => write_eval_csv(&ev, create(&p)?),
        None => write_eval_csv(&ev, io::stdout().lock()),
    }
}

fn extract(a: Single) -> anyhow::Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let p = model.extract(&a.user, &a.item, &a.review)?;
    for (term, prob) in p.terms(&model.aspects).iter().zip(&p.probs) {
        println!("{term}\t{prob:.6}");
    }
    Ok(())
}

fn recommend(a: Single) -> anyhow::Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let (p, r) = model.recommend(&a.user, &a.item, &a.review)?;
    println!("aspects\t{}", p.terms(&model.aspects).join(", "));
    println!("rating\t{:.6}", r.normalized);
    println!("stars\t{:.4}", r.stars());
    Ok(())
}

fn bench(a: Bench) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let spec = SyntheticSpec {
        seed: a.data_seed,
        ..Default::default()
    };
    let report = scalability(&cfg, &spec, &a.sizes)?;
    for r in &report.rows {
        println!("{}\t{:.3}s", r.records, r.seconds);
    }
    let ratios: Vec<String> = report.adjacent_ratios().iter().map(|r| format!("{r:.2}")).collect();
    println!("ratios\t{}", ratios.join(" "));
    println!(
        "fit\tslope {:.3e} s/record, intercept {:.3}s, R^2 {:.4}",
        report.fit.slope, report.fit.intercept, report.fit.r_squared
    );
    if let Some(p) = a.out {
        report.write_csv(create(&p)?)?;
    }
    Ok(())
}

fn sweep(a: Sweep) -> anyhow::Result<()> {
    if a.seeds.len() < 2 {
        bail!(promptrec::Error::Config("a sweep needs at least two seeds".into()));
    }
    let base = load_config(a.config.as_deref())?;
    let fixed = a.data.as_deref().map(load_data).transpose()?;
    let generic = a.pretrain_corpus.as_deref().map(load_data).transpose()?;
    let mut runs: Vec<Vec<MetricSet>> = vec![Vec::new(); a.ablations.len()];
    for &seed in &a.seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        let data = match &fixed {
            Some(d) => d.clone(),
            None => generate_synthetic(&SyntheticSpec {
                seed,
                ..Default::default()
            })?,
        };
        let prep = prepare(&cfg, &data)?;
        let lm = build_language_model(&cfg, &prep, generic.as_ref())?;
        for (slot, &ab) in a.ablations.iter().enumerate() {
            let start = if ab == Ablation::NoFinetune { &lm.base } else { &lm.model };
            let out = Trainer::new(&cfg.with_ablation(ab), &prep, start.clone())?.run()?;
            let ev = out.model.evaluate(&prep.test)?;
            info!("seed {seed} {ab}: f1 {:.4} rmse {:.4}", ev.extraction.f1, ev.rec.rmse);
            runs[slot].push(metric_set(&ev.extraction, &ev.rec));
        }
    }
    let dataset = match &a.data {
        Some(p) => p.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned()),
        None => "synthetic".into(),
    };
    let entries = a
        .ablations
        .iter()
        .zip(&runs)
        .map(|(ab, r)| {
            Ok(ReportEntry {
                dataset: dataset.clone(),
                variant: ab.name().into(),
                aggregate: aggregate_runs(r)?,
            })
        })
        .collect::<promptrec::Result<Vec<_>>>()?;
    let reference = a.ablations.contains(&Ablation::Full).then_some("full");
    print!("{}", format_table(&entries, reference));
    if let Some(p) = a.out {
        write_report_csv(&entries, create(&p)?)?;
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use promptrec::Error;
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. }) => 4,
        Some(Error::Config(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Extract(a) => extract(a),
        Command::Recommend(a) => recommend(a),
        Command::BenchScalability(a) => bench(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
