//! Command-line front end. Every command resolves a [`HarnessConfig`] from an
//! optional `--config` file plus flag overrides, then runs one stage.

use std::ffi::OsString;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mlcc_core::correlation::build_prototypes;
use mlcc_core::cscl::TrainConfig;
use mlcc_core::datagen::generate;
use mlcc_core::losses::{LossConfig, LossKind};
use mlcc_core::metrics::evaluate;
use mlcc_core::Seed;
use serde::Serialize;

use crate::config::{preset, HarnessConfig};
use crate::error::{usage, Result};
use crate::io::{
    read_bank, read_dataset, read_predictions, read_soft_labels, write_bank, write_correlation, write_dataset,
    write_json, write_soft_labels,
};
use crate::pipeline::{
    cscl_config, run_benchmark, run_loss, soften_stage1, split_rows, stage1, write_reliability_set, write_run,
    StageFiles, Stage1, PROTOTYPE_STREAM,
};
use crate::table::BenchmarkTable;

#[derive(Parser, Debug)]
#[command(name = "mlcc", version, about = "Multi-label confidence calibration experiments")]
pub struct Cli {
    #[command(flatten)]
    pub shared: Shared,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand; they override the config file.
#[derive(Args, Debug, Default)]
pub struct Shared {
    /// JSON experiment manifest
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (replaces the config's seed list)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Equal-width reliability bins [default: 15]
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    /// Soft-label mass moved to negatives [default: 0.05]
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Prototypes per category [default: 10]
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Retrieved positives per category [default: 4]
    #[arg(long, global = true)]
    pub t: Option<usize>,
    /// Loss kind (replaces the roster)
    #[arg(long, global = true)]
    pub loss: Option<LossKind>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset into <out>/dataset.jsonl
    Gen(GenArgs),
    /// Train the category-specific extractor and emit soft labels
    TrainCscl(TrainCsclArgs),
    /// Recompute soft labels from a saved feature bank
    Soften(SoftenArgs),
    /// Train and evaluate one stage-2 classifier
    TrainMlr(TrainMlrArgs),
    /// Evaluate a prediction log
    Eval(EvalArgs),
    /// Run the loss roster over all seeds and tabulate
    Benchmark(BenchmarkArgs),
    /// Print the tables of a benchmark directory
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Named preset: default or small
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub avg_labels: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainCsclArgs {
    /// Dataset file [default: <out>/dataset.jsonl]
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Disable the pairwise contrastive term
    #[arg(long)]
    pub no_contrastive: bool,
}

#[derive(Args, Debug)]
pub struct SoftenArgs {
    /// Feature bank written by train-cscl [default: <out>/bank.jsonl]
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainMlrArgs {
    /// Dataset file [default: <out>/dataset.jsonl]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory holding soft_ins.jsonl and soft_pro.jsonl [default: <out>]
    #[arg(long)]
    pub soft_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hidden-layer width (0 = linear)
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction log (JSON lines of {"id","p","y"})
    pub log: PathBuf,
    /// Equal-mass groups for ACE [default: 15]
    #[arg(long)]
    pub adaptive_bins: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// Comma-separated seeds (overrides --seed and the config)
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Rerun dclr entries at each of these soft-label masses
    #[arg(long, value_delimiter = ',')]
    pub alpha_sweep: Vec<f64>,
    /// Disable the contrastive term in the CSCL stage
    #[arg(long)]
    pub no_contrastive: bool,
    /// Record wall-clock seconds in run files
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Benchmark output directory [default: <out>]
    pub dir: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let label = if color_enabled() { "\x1b[1;31merror\x1b[0m" } else { "error" };
            eprintln!("{label}: {e}");
            e.exit_code()
        }
    }
}

/// ANSI color only on a terminal, and never with `MLCC_NO_COLOR=1`.
pub fn color_enabled() -> bool {
    let disabled = std::env::var("MLCC_NO_COLOR").is_ok_and(|v| !v.is_empty() && v != "0");
    !disabled && std::io::stderr().is_terminal()
}

/// The config file (or defaults) with shared flags applied.
pub fn resolve_config(shared: &Shared) -> Result<HarnessConfig> {
    let mut cfg = match &shared.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = shared.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &shared.out {
        cfg.out = o.clone();
    }
    if let Some(b) = shared.bins {
        cfg.metrics.bins = b;
    }
    if let Some(a) = shared.alpha {
        cfg.correlation.alpha = a;
        cfg.cscl.alpha = a;
    }
    if let Some(k) = shared.k {
        cfg.correlation.k = k;
        cfg.cscl.k = k;
    }
    if let Some(t) = shared.t {
        cfg.correlation.t = t;
        cfg.cscl.t = t;
    }
    if let Some(kind) = shared.loss {
        cfg.roster = vec![roster_entry(&cfg.roster, kind)];
    }
    Ok(cfg)
}

/// The roster's config for `kind` if it has one, else the defaults.
fn roster_entry(roster: &[LossConfig], kind: LossKind) -> LossConfig {
    roster
        .iter()
        .find(|l| l.kind == kind)
        .cloned()
        .unwrap_or_else(|| LossConfig::new(kind))
}

fn first_seed(cfg: &HarnessConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(0)
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.jsonl")
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.shared)?;
    match cli.command {
        Command::Gen(a) => cmd_gen(&cfg, &a),
        Command::TrainCscl(a) => {
            if let Some(e) = a.epochs {
                cfg.cscl.epochs = e;
            }
            if a.no_contrastive {
                cfg.cscl.contrastive = false;
            }
            cmd_train_cscl(&cfg, a.data)
        }
        Command::Soften(a) => cmd_soften(&cfg, a.bank),
        Command::TrainMlr(a) => {
            if let Some(e) = a.epochs {
                cfg.mlr.epochs = e;
            }
            if let Some(h) = a.hidden {
                cfg.mlr.hidden = h;
            }
            cmd_train_mlr(&cfg, &cli.shared, a.data, a.soft_dir)
        }
        Command::Eval(a) => {
            if let Some(r) = a.adaptive_bins {
                cfg.metrics.adaptive_bins = r;
            }
            cmd_eval(&cfg, &a.log)
        }
        Command::Benchmark(a) => {
            if let Some(s) = a.seeds {
                cfg.seeds = s;
            }
            if a.no_contrastive {
                cfg.cscl.contrastive = false;
            }
            cfg.timing |= a.timing;
            cmd_benchmark(&cfg, &a.alpha_sweep)
        }
        Command::Report(a) => cmd_report(&a.dir.unwrap_or_else(|| cfg.out.clone())),
    }
}

fn cmd_gen(cfg: &HarnessConfig, a: &GenArgs) -> Result<()> {
    let seed = Seed(first_seed(cfg));
    let mut g = match (&a.preset, &cfg.dataset.generator) {
        (Some(name), _) => preset(name, seed)?,
        (None, Some(g)) => mlcc_core::GenConfig { seed, ..g.clone() },
        (None, None) => preset(&cfg.dataset.preset, seed)?,
    };
    if let Some(c) = a.categories {
        g.categories = c;
        g.similarity_blocks = mlcc_core::GenConfig::nested_blocks(c);
    }
    if let Some(d) = a.dim {
        g.dim = d;
    }
    if let Some(n) = a.samples {
        g.samples = n;
    }
    if let Some(m) = a.avg_labels {
        g.avg_labels = m;
    }
    if let Some(s) = a.noise_sigma {
        g.noise_sigma = s;
    }
    g.validate()?;
    let ds = generate(&g)?;
    let path = dataset_path(&cfg.out);
    write_dataset(&path, &ds, Some(&g))?;
    println!(
        "wrote {}: N={} C={} D={} mean positives {:.3}",
        path.display(),
        ds.len(),
        ds.categories(),
        ds.dim(),
        ds.mean_positives()
    );
    Ok(())
}

#[derive(Serialize)]
struct CsclSummary<'a> {
    seed: u64,
    train_samples: usize,
    config: &'a TrainConfig,
    epoch_losses: &'a [f64],
    /// Categories whose prototype count was cut to their pool size.
    prototypes_clamped: &'a [usize],
}

fn write_stage_files(out: &Path, s1: &Stage1, cfg: &HarnessConfig, seed: u64) -> Result<()> {
    let files = StageFiles::in_dir(out);
    let (ins, pro) = soften_stage1(s1, cfg.correlation.alpha, &cfg.correlation, seed)?;
    write_soft_labels(&files.soft_instance, &ins)?;
    write_soft_labels(&files.soft_prototype, &pro)?;
    write_correlation(&files.correlation, &s1.correlation)?;
    Ok(())
}

fn cmd_train_cscl(cfg: &HarnessConfig, data: Option<PathBuf>) -> Result<()> {
    let path = existing(data.unwrap_or_else(|| dataset_path(&cfg.out)), "dataset")?;
    let seed = first_seed(cfg);
    let ds = read_dataset(&path)?;
    let hp = cfg.hparams();
    hp.validate()?;
    let (tr, _) = split_rows(&ds, &hp)?;
    let train = ds.subset(&tr);
    let tc = cscl_config(cfg, seed);
    let s1 = stage1(&train, &tc, &cfg.correlation, seed)?;
    let files = StageFiles::in_dir(&cfg.out);
    write_json(&files.extractor, &s1.model.params)?;
    write_bank(&files.bank, &s1.model.bank)?;
    write_stage_files(&cfg.out, &s1, cfg, seed)?;
    write_json(
        &cfg.out.join("cscl.json"),
        &CsclSummary {
            seed,
            train_samples: train.len(),
            config: &tc,
            epoch_losses: &s1.model.epoch_losses,
            prototypes_clamped: &s1.prototypes.clamped,
        },
    )?;
    let last = s1.model.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained extractor on {} samples, final objective {last:.4}; soft labels in {}",
        train.len(),
        cfg.out.display()
    );
    Ok(())
}

fn cmd_soften(cfg: &HarnessConfig, bank: Option<PathBuf>) -> Result<()> {
    let path = existing(bank.unwrap_or_else(|| StageFiles::in_dir(&cfg.out).bank), "feature bank")?;
    let seed = first_seed(cfg);
    let bank = read_bank(&path)?;
    let prototypes = build_prototypes(
        &bank,
        cfg.correlation.k,
        cfg.correlation.kmeans_iters,
        Seed(seed).derive(PROTOTYPE_STREAM),
    )?;
    let correlation = mlcc_core::correlation::category_correlation(&bank, &prototypes)?;
    let s1 = Stage1 {
        model: mlcc_core::cscl::CsclModel {
            params: mlcc_core::cscl::ExtractorParams::zeros(bank.categories(), 1, bank.feature_dim())?,
            bank,
            epoch_losses: Vec::new(),
        },
        prototypes,
        correlation,
    };
    write_stage_files(&cfg.out, &s1, cfg, seed)?;
    println!("soft labels for {} samples in {}", s1.model.bank.len(), cfg.out.display());
    Ok(())
}

fn cmd_train_mlr(cfg: &HarnessConfig, shared: &Shared, data: Option<PathBuf>, soft_dir: Option<PathBuf>) -> Result<()> {
    let loss = match (shared.loss, cfg.roster.as_slice()) {
        (Some(_), [only]) => only.clone(),
        (None, [only]) if shared.config.is_some() => only.clone(),
        _ => return Err(usage("train-mlr needs --loss <kind>")),
    };
    let path = existing(data.unwrap_or_else(|| dataset_path(&cfg.out)), "dataset")?;
    let seed = first_seed(cfg);
    let ds = read_dataset(&path)?;
    let hp = cfg.hparams();
    hp.validate()?;
    let soft = if loss.kind == LossKind::Dclr {
        let files = StageFiles::in_dir(&soft_dir.unwrap_or_else(|| cfg.out.clone()));
        let ins = read_soft_labels(&existing(files.soft_instance, "soft labels")?)?;
        let pro = read_soft_labels(&existing(files.soft_prototype, "soft labels")?)?;
        Some((ins, pro))
    } else {
        None
    };
    let (tr, te) = split_rows(&ds, &hp)?;
    let (train, test) = (ds.subset(&tr), ds.subset(&te));
    let (params, record, log) = run_loss(
        &train,
        &test,
        &loss,
        soft.as_ref().map(|(i, p)| (i, p)),
        &hp,
        seed,
        cfg.timing,
    )?;
    write_run(&cfg.out, &record, &log, hp.bins)?;
    write_json(
        &cfg.out.join("runs").join(format!("{}_{seed}.model.json", crate::pipeline::file_stem(&record.loss))),
        &params,
    )?;
    let r = &record.report;
    println!(
        "{} seed {seed}: mAP {:.2} ACE {:.3} ECE {:.3} MCE {:.3}",
        record.loss, r.map, r.ace, r.ece, r.mce
    );
    Ok(())
}

fn cmd_eval(cfg: &HarnessConfig, log_path: &Path) -> Result<()> {
    let log = read_predictions(log_path)?;
    let report = evaluate(&log, cfg.metrics.bins, cfg.metrics.adaptive_bins)?;
    write_json(&cfg.out.join("report.json"), &report)?;
    write_reliability_set(&cfg.out.join("reliability"), "", &log, cfg.metrics.bins)?;
    println!(
        "mAP {:.2} ACE {:.3} ECE {:.3} MCE {:.3} over {} predictions",
        report.map,
        report.ace,
        report.ece,
        report.mce,
        log.len()
    );
    Ok(())
}

fn cmd_benchmark(cfg: &HarnessConfig, alphas: &[f64]) -> Result<()> {
    let outcome = run_benchmark(cfg, alphas, &mut |msg| eprintln!("{msg}"))?;
    print!("{}", outcome.table.render());
    if let Some(s) = &outcome.sweep {
        print!("\n{}", s.render());
    }
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    let table = BenchmarkTable::read_json(&existing(dir.join("table.json"), "table")?)?;
    print!("{}", table.render());
    let sweep = dir.join("sweep.json");
    if sweep.exists() {
        print!("\n{}", BenchmarkTable::read_json(&sweep)?.render());
    }
    Ok(())
}
