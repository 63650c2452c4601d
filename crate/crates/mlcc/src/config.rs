//! Experiment manifest: one JSON document whose sections configure each
//! pipeline stage. Command-line flags override file values.

use std::path::{Path, PathBuf};

use mlcc_core::cscl::TrainConfig;
use mlcc_core::losses::{LossConfig, LossKind};
use mlcc_core::trainer::MlrHParams;
use mlcc_core::{GenConfig, Seed};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::io::read_json;

/// Where the dataset comes from. A file path wins over a generator config,
/// which wins over a named preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub preset: String,
    pub generator: Option<GenConfig>,
    pub path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            preset: "default".into(),
            generator: None,
            path: None,
        }
    }
}

impl DatasetSection {
    /// Generator config for `seed`, or `None` when the dataset is a file.
    pub fn generator_for(&self, seed: Seed) -> Result<Option<GenConfig>> {
        if self.path.is_some() {
            return Ok(None);
        }
        let cfg = match &self.generator {
            Some(g) => GenConfig { seed, ..g.clone() },
            None => preset(&self.preset, seed)?,
        };
        Ok(Some(cfg))
    }
}

pub fn preset(name: &str, seed: Seed) -> Result<GenConfig> {
    match name {
        "default" => Ok(GenConfig::default_preset(seed)),
        "small" => Ok(GenConfig::small_preset(seed)),
        other => Err(usage(format!("unknown preset `{other}` (expected default or small)"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationSection {
    pub alpha: f64,
    pub t: usize,
    pub k: usize,
    pub kmeans_iters: usize,
}

impl Default for CorrelationSection {
    fn default() -> Self {
        CorrelationSection {
            alpha: 0.05,
            t: 4,
            k: 10,
            kmeans_iters: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub bins: usize,
    pub adaptive_bins: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            bins: 15,
            adaptive_bins: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub dataset: DatasetSection,
    pub cscl: TrainConfig,
    pub correlation: CorrelationSection,
    pub roster: Vec<LossConfig>,
    pub metrics: MetricsSection,
    /// Stage-2 training; its bin counts are taken from `metrics`.
    pub mlr: MlrHParams,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Record wall-clock seconds in run files (makes them non-reproducible).
    pub timing: bool,
}

impl Default for HarnessConfig {
    /// The benchmark preset: default synthetic data, three seeds, the
    /// {nll, ls, dclr} roster and a 256-unit hidden layer in stage 2.
    fn default() -> Self {
        HarnessConfig {
            dataset: DatasetSection::default(),
            cscl: TrainConfig::default(),
            correlation: CorrelationSection::default(),
            roster: [LossKind::Nll, LossKind::Ls, LossKind::Dclr]
                .into_iter()
                .map(LossConfig::new)
                .collect(),
            metrics: MetricsSection::default(),
            mlr: MlrHParams {
                hidden: 256,
                ..MlrHParams::default()
            },
            out: PathBuf::from("out"),
            seeds: vec![0, 1, 2],
            timing: false,
        }
    }
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: HarnessConfig = read_json(path)?;
        Ok(cfg)
    }

    pub fn hparams(&self) -> MlrHParams {
        MlrHParams {
            bins: self.metrics.bins,
            adaptive_bins: self.metrics.adaptive_bins,
            ..self.mlr.clone()
        }
    }

    pub fn needs_soft_labels(&self) -> bool {
        self.roster.iter().any(|l| l.kind == LossKind::Dclr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.roster.is_empty() {
            return Err(usage("loss roster is empty"));
        }
        if self.seeds.is_empty() {
            return Err(usage("seed list is empty"));
        }
        let mut names: Vec<String> = self.roster.iter().map(LossConfig::display_name).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(usage("roster entries need distinct labels"));
        }
        if let Some(p) = &self.dataset.path {
            if !p.exists() {
                return Err(usage(format!("dataset {} does not exist", p.display())));
            }
        } else if let Some(g) = self.dataset.generator_for(Seed(0))? {
            g.validate()?;
        }
        self.cscl.validate()?;
        let c = &self.correlation;
        if !(0.0..1.0).contains(&c.alpha) || c.t == 0 || c.k == 0 || c.kmeans_iters == 0 {
            return Err(usage("correlation section needs alpha in [0, 1) and positive t, k, kmeans_iters"));
        }
        for l in &self.roster {
            if l.kind != LossKind::Dwbl {
                l.validate()?;
            }
        }
        self.hparams().validate()?;
        Ok(())
    }
}
