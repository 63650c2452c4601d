//! End-to-end runs: dataset, CSCL stage, soft labels, stage-2 roster, and
//! the files each step leaves behind.
//!
//! For a run seed `s` the dataset generator (unless a file is given) and the
//! CSCL extractor use `s`, prototypes use `s.derive(7)`, soft-label retrieval
//! uses `s.derive(9)` and every stage-2 fit uses `s`. The split is fixed by
//! `mlr.split_seed`, so the CSCL training samples are exactly the stage-2
//! training samples.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mlcc_core::correlation::{
    build_prototypes, category_correlation, soft_label_matrices, CorrelationMatrix, PrototypeBank,
    SoftLabelMatrix,
};
use mlcc_core::cscl::{train_cscl, CsclModel, TrainConfig};
use mlcc_core::datagen::generate;
use mlcc_core::losses::{LossConfig, LossKind};
use mlcc_core::metrics::{reliability, Scope};
use mlcc_core::trainer::{fit, predict_log, split, MlrHParams, MlrParams, RunRecord};
use mlcc_core::{Dataset, GenConfig, PredictionLog, Seed};
use serde::{Deserialize, Serialize};

use crate::config::{CorrelationSection, HarnessConfig};
use crate::error::{HarnessError, Result};
use crate::io::{read_dataset, write_correlation, write_json, write_predictions, write_reliability, write_text};
use crate::svg::reliability_svg;
use crate::table::BenchmarkTable;

pub const PROTOTYPE_STREAM: u64 = 7;
pub const RETRIEVAL_STREAM: u64 = 9;

/// The dataset for run seed `seed`, with the generator that produced it.
pub fn dataset_for(cfg: &HarnessConfig, seed: u64) -> Result<(Dataset, Option<GenConfig>)> {
    match &cfg.dataset.path {
        Some(p) => Ok((read_dataset(p)?, None)),
        None => {
            let g = cfg
                .dataset
                .generator_for(Seed(seed))?
                .expect("generator exists without a path");
            Ok((generate(&g)?, Some(g)))
        }
    }
}

/// Train/test row indices under the stage-2 split.
pub fn split_rows(ds: &Dataset, hp: &MlrHParams) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok(split(ds.len(), hp.test_fraction, hp.split_seed)?)
}

/// Output of the CSCL stage for one seed.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub model: CsclModel,
    pub prototypes: PrototypeBank,
    pub correlation: CorrelationMatrix,
}

pub fn cscl_config(cfg: &HarnessConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: Seed(seed),
        ..cfg.cscl.clone()
    }
}

/// Trains the extractor on `train` and derives prototypes and the
/// dataset-level prototype correlation from its final bank.
pub fn stage1(train: &Dataset, cscl: &TrainConfig, corr: &CorrelationSection, seed: u64) -> Result<Stage1> {
    let model = train_cscl(train, cscl)?;
    let prototypes = build_prototypes(&model.bank, corr.k, corr.kmeans_iters, Seed(seed).derive(PROTOTYPE_STREAM))?;
    let correlation = category_correlation(&model.bank, &prototypes)?;
    Ok(Stage1 {
        model,
        prototypes,
        correlation,
    })
}

/// Instance- and prototype-level soft labels of the stage-1 bank.
pub fn soften_stage1(
    s1: &Stage1,
    alpha: f64,
    corr: &CorrelationSection,
    seed: u64,
) -> Result<(SoftLabelMatrix, SoftLabelMatrix)> {
    Ok(soft_label_matrices(
        &s1.model.bank,
        &s1.prototypes,
        alpha,
        corr.t,
        Seed(seed).derive(RETRIEVAL_STREAM),
    )?)
}

/// One stage-2 run: fit on `train`, predict on `test`.
pub fn run_loss(
    train: &Dataset,
    test: &Dataset,
    loss: &LossConfig,
    soft: Option<(&SoftLabelMatrix, &SoftLabelMatrix)>,
    hp: &MlrHParams,
    seed: u64,
    timing: bool,
) -> Result<(MlrParams, RunRecord, PredictionLog)> {
    let start = Instant::now();
    let (params, mut record) = fit(train, test, loss, soft, hp, Seed(seed))?;
    let log = predict_log(&params, test)?;
    if timing {
        record.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
    }
    Ok((params, record, log))
}

/// Keeps file names portable whatever the roster labels contain.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

/// Global and per-category reliability CSVs (plus a global SVG) for `log`,
/// named `<prefix>global.csv`, `<prefix>class_<c>.csv`.
pub fn write_reliability_set(dir: &Path, prefix: &str, log: &PredictionLog, bins: usize) -> Result<()> {
    let global = reliability(log, bins, Scope::Global)?;
    write_reliability(&dir.join(format!("{prefix}global.csv")), &global)?;
    write_text(
        &dir.join(format!("{prefix}global.svg")),
        &reliability_svg(&global.bins, &format!("{prefix}global")),
    )?;
    for c in 0..log.categories() {
        let scope = Scope::Category(c);
        let table = reliability(log, bins, scope)?;
        write_reliability(&dir.join(format!("{prefix}{}.csv", scope.tag())), &table)?;
    }
    Ok(())
}

/// Writes the run record, its predictions and reliability files under `out`.
pub fn write_run(out: &Path, record: &RunRecord, log: &PredictionLog, bins: usize) -> Result<()> {
    let stem = format!("{}_{}", file_stem(&record.loss), record.seed);
    write_json(&out.join("runs").join(format!("{stem}.json")), record)?;
    write_predictions(&out.join("runs").join(format!("{stem}.predictions.jsonl")), log)?;
    write_reliability_set(&out.join("reliability"), &format!("{stem}_"), log, bins)
}

/// Completed runs plus the error that stopped the benchmark.
#[derive(Debug, Serialize, Deserialize)]
pub struct PartialResults {
    pub error: String,
    pub completed: Vec<RunRecord>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub records: Vec<RunRecord>,
    pub table: BenchmarkTable,
    /// Soft-label mass sweep over the dclr entries, when requested.
    pub sweep: Option<BenchmarkTable>,
}

pub fn sweep_label(name: &str, alpha: f64) -> String {
    format!("{name}@alpha={alpha}")
}

/// Runs the roster over every seed and writes `table.csv`, `table.json`,
/// `runs/`, `reliability/` and `correlation/` under `cfg.out`. With a
/// nonempty `alphas`, every dclr entry is also rerun per soft-label mass on
/// the same stage-1 models, giving `sweep.csv` and `sweep.json`.
///
/// Any failure writes `partial.json` with the runs completed so far.
pub fn run_benchmark(cfg: &HarnessConfig, alphas: &[f64], progress: &mut dyn FnMut(&str)) -> Result<BenchmarkOutcome> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut sweep_records = Vec::new();
    let result = benchmark_inner(cfg, alphas, &mut records, &mut sweep_records, progress);
    if let Err(e) = result {
        let partial = PartialResults {
            error: e.to_string(),
            completed: records.iter().chain(&sweep_records).cloned().collect(),
        };
        write_json(&cfg.out.join("partial.json"), &partial)?;
        return Err(e);
    }
    let names: Vec<String> = cfg.roster.iter().map(LossConfig::display_name).collect();
    let table = BenchmarkTable::build(&names, &records)?;
    table.write_csv(&cfg.out.join("table.csv"))?;
    table.write_json(&cfg.out.join("table.json"))?;
    let sweep = if sweep_records.is_empty() {
        None
    } else {
        let mut names = Vec::new();
        for l in cfg.roster.iter().filter(|l| l.kind == LossKind::Dclr) {
            for &a in alphas {
                names.push(sweep_label(&l.display_name(), a));
            }
        }
        let t = BenchmarkTable::build(&names, &sweep_records)?;
        t.write_csv(&cfg.out.join("sweep.csv"))?;
        t.write_json(&cfg.out.join("sweep.json"))?;
        Some(t)
    };
    Ok(BenchmarkOutcome { records, table, sweep })
}

fn benchmark_inner(
    cfg: &HarnessConfig,
    alphas: &[f64],
    records: &mut Vec<RunRecord>,
    sweep_records: &mut Vec<RunRecord>,
    progress: &mut dyn FnMut(&str),
) -> Result<()> {
    let hp = cfg.hparams();
    let out = &cfg.out;
    let needs_stage1 = cfg.needs_soft_labels();
    for &seed in &cfg.seeds {
        let (ds, _) = dataset_for(cfg, seed)?;
        let (tr, te) = split_rows(&ds, &hp)?;
        let (train, test) = (ds.subset(&tr), ds.subset(&te));
        let stage = if needs_stage1 {
            progress(&format!("seed {seed}: cscl"));
            let s1 = stage1(&train, &cscl_config(cfg, seed), &cfg.correlation, seed)?;
            write_correlation(&out.join("correlation").join(format!("pro_{seed}.csv")), &s1.correlation)?;
            let soft = soften_stage1(&s1, cfg.correlation.alpha, &cfg.correlation, seed)?;
            Some((s1, soft))
        } else {
            None
        };
        for loss in &cfg.roster {
            let name = loss.display_name();
            progress(&format!("seed {seed}: {name}"));
            let soft = stage.as_ref().map(|(_, (i, p))| (i, p));
            let (_, record, log) = run_loss(&train, &test, loss, soft, &hp, seed, cfg.timing)
                .map_err(|e| runtime(&name, seed, e))?;
            write_run(out, &record, &log, hp.bins)?;
            records.push(record);
        }
        if let Some((s1, _)) = &stage {
            for &alpha in alphas {
                let soft = soften_stage1(s1, alpha, &cfg.correlation, seed)?;
                for loss in cfg.roster.iter().filter(|l| l.kind == LossKind::Dclr) {
                    let name = sweep_label(&loss.display_name(), alpha);
                    progress(&format!("seed {seed}: {name}"));
                    let (_, mut record, _) = run_loss(&train, &test, loss, Some((&soft.0, &soft.1)), &hp, seed, cfg.timing)
                        .map_err(|e| runtime(&name, seed, e))?;
                    record.loss = name;
                    sweep_records.push(record);
                }
            }
        }
    }
    Ok(())
}

fn runtime(name: &str, seed: u64, e: HarnessError) -> HarnessError {
    match e {
        HarnessError::Core(inner @ mlcc_core::Error::Diverged { .. }) => {
            HarnessError::Runtime(format!("{name} (seed {seed}): {inner}"))
        }
        other => other,
    }
}

/// Paths of the files `train-cscl` and `soften` leave in an output directory.
pub struct StageFiles {
    pub extractor: PathBuf,
    pub bank: PathBuf,
    pub soft_instance: PathBuf,
    pub soft_prototype: PathBuf,
    pub correlation: PathBuf,
}

impl StageFiles {
    pub fn in_dir(dir: &Path) -> Self {
        StageFiles {
            extractor: dir.join("extractor.json"),
            bank: dir.join("bank.jsonl"),
            soft_instance: dir.join("soft_ins.jsonl"),
            soft_prototype: dir.join("soft_pro.jsonl"),
            correlation: dir.join("correlation").join("pro.csv"),
        }
    }
}
