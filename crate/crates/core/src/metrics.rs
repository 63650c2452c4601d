//! Calibration and ranking metrics over pooled multi-label predictions.
//!
//! Every (sample, class) output is treated as one binary decision with
//! confidence `max(p, 1−p)` and correctness `(p > 0.5) == y`. Errors and mAP
//! are reported in percent; bin statistics are accumulated in percent units.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datagen::PredictionLog;
use crate::error::{domain, Result};
use crate::losses::{confidence, correct};

/// One pooled prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pooled {
    pub confidence: f64,
    pub correct: bool,
    pub sample: u64,
    pub class: usize,
}

/// Pools every prediction of the log, optionally restricted to one class,
/// sorted by (confidence, sample id, class).
pub fn pool_scope(log: &PredictionLog, scope: Scope) -> Vec<Pooled> {
    let classes: Vec<usize> = match scope {
        Scope::Global => (0..log.categories()).collect(),
        Scope::Category(c) => vec![c],
    };
    let mut out = Vec::with_capacity(log.len() * classes.len());
    for (r, &id) in log.ids.iter().enumerate() {
        for &c in &classes {
            let p = log.probs.get(r, c);
            out.push(Pooled {
                confidence: confidence(p),
                correct: correct(p, log.labels.get(r, c)),
                sample: id,
                class: c,
            });
        }
    }
    out.sort_by(|a, b| {
        a.confidence
            .total_cmp(&b.confidence)
            .then(a.sample.cmp(&b.sample))
            .then(a.class.cmp(&b.class))
    });
    out
}

/// All N·C pooled predictions.
pub fn pool(log: &PredictionLog) -> Vec<Pooled> {
    pool_scope(log, Scope::Global)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EqualWidth,
    EqualMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Category(usize),
}

impl Scope {
    /// File-name friendly tag: `global` or `class_<c>`.
    pub fn tag(&self) -> alloc::string::String {
        match self {
            Scope::Global => "global".into(),
            Scope::Category(c) => format!("class_{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence in [0, 1]; 0 for empty bins.
    pub mean_conf: f64,
    pub mean_acc: f64,
}

impl Bin {
    /// `|mean_acc − mean_conf|` in percent.
    pub fn gap(&self) -> f64 {
        (100.0 * self.mean_acc - 100.0 * self.mean_conf).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub scheme: Scheme,
    pub scope: Scope,
    pub bins: Vec<Bin>,
}

impl ReliabilityTable {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Count-weighted mean gap, in percent.
    pub fn weighted_gap(&self) -> f64 {
        let total = self.total() as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / total * b.gap())
            .sum()
    }

    /// Largest gap over nonempty bins, in percent.
    pub fn max_gap(&self) -> f64 {
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(Bin::gap)
            .fold(0.0, f64::max)
    }

    /// Unweighted mean gap over nonempty bins, in percent.
    pub fn mean_gap(&self) -> f64 {
        let nonempty: Vec<&Bin> = self.bins.iter().filter(|b| b.count > 0).collect();
        nonempty.iter().map(|b| b.gap()).sum::<f64>() / nonempty.len() as f64
    }
}

/// Accumulates a group of pooled predictions in percent units so simple
/// decimal cases stay exact.
fn summarize(group: &[Pooled], lo: f64, hi: f64) -> Bin {
    let n = group.len();
    if n == 0 {
        return Bin {
            lo,
            hi,
            count: 0,
            mean_conf: 0.0,
            mean_acc: 0.0,
        };
    }
    let conf: f64 = group.iter().map(|p| 100.0 * p.confidence).sum();
    let acc: f64 = group.iter().map(|p| if p.correct { 100.0 } else { 0.0 }).sum();
    Bin {
        lo,
        hi,
        count: n,
        mean_conf: conf / n as f64 / 100.0,
        mean_acc: acc / n as f64 / 100.0,
    }
}

/// Equal-width bin index on [0.5, 1]; confidence 1 lands in the last bin.
fn bin_index(conf: f64, bins: usize) -> usize {
    let t = (conf - 0.5) * 2.0 * bins as f64;
    (t.max(0.0) as usize).min(bins - 1)
}

fn equal_width(pooled: &[Pooled], bins: usize, scope: Scope) -> Result<ReliabilityTable> {
    if bins == 0 {
        return Err(domain("need at least one bin"));
    }
    if pooled.is_empty() {
        return Err(domain("empty prediction log"));
    }
    let mut groups: Vec<Vec<Pooled>> = vec![Vec::new(); bins];
    for p in pooled {
        groups[bin_index(p.confidence, bins)].push(*p);
    }
    let edge = |b: usize| 0.5 + 0.5 * b as f64 / bins as f64;
    let bins = groups
        .iter()
        .enumerate()
        .map(|(b, g)| summarize(g, edge(b), edge(b + 1)))
        .collect();
    Ok(ReliabilityTable {
        scheme: Scheme::EqualWidth,
        scope,
        bins,
    })
}

fn equal_mass(pooled: &[Pooled], groups: usize, scope: Scope) -> Result<ReliabilityTable> {
    if groups == 0 {
        return Err(domain("need at least one group"));
    }
    if pooled.len() < groups {
        return Err(domain(format!(
            "{} predictions cannot fill {groups} equal-mass groups",
            pooled.len()
        )));
    }
    let base = pooled.len() / groups;
    let extra = pooled.len() % groups;
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        let group = &pooled[start..start + size];
        let lo = group[0].confidence;
        let hi = group[size - 1].confidence;
        out.push(summarize(group, lo, hi));
        start += size;
    }
    Ok(ReliabilityTable {
        scheme: Scheme::EqualMass,
        scope,
        bins: out,
    })
}

/// Equal-width reliability table for a scope.
pub fn reliability(log: &PredictionLog, bins: usize, scope: Scope) -> Result<ReliabilityTable> {
    if let Scope::Category(c) = scope {
        if c >= log.categories() {
            return Err(domain(format!("category {c} out of range")));
        }
    }
    equal_width(&pool_scope(log, scope), bins, scope)
}

/// Equal-mass reliability table for a scope. Group bounds are the smallest
/// and largest confidence in each group.
pub fn adaptive_reliability(log: &PredictionLog, groups: usize, scope: Scope) -> Result<ReliabilityTable> {
    equal_mass(&pool_scope(log, scope), groups, scope)
}

/// Expected calibration error over `bins` equal-width bins, in percent.
pub fn ece(log: &PredictionLog, bins: usize) -> Result<f64> {
    Ok(reliability(log, bins, Scope::Global)?.weighted_gap())
}

/// Maximum calibration error, in percent.
pub fn mce(log: &PredictionLog, bins: usize) -> Result<f64> {
    Ok(reliability(log, bins, Scope::Global)?.max_gap())
}

/// Adaptive calibration error over `groups` equal-mass groups, in percent.
pub fn ace(log: &PredictionLog, groups: usize) -> Result<f64> {
    Ok(adaptive_reliability(log, groups, Scope::Global)?.mean_gap())
}

/// Mean average precision in percent, with the categories that had no
/// positives (and were left out of the mean).
pub fn map_with_excluded(log: &PredictionLog) -> Result<(f64, Vec<usize>)> {
    if log.is_empty() {
        return Err(domain("empty prediction log"));
    }
    let mut aps = Vec::new();
    let mut excluded = Vec::new();
    let mut order: Vec<usize> = (0..log.len()).collect();
    for c in 0..log.categories() {
        order.sort_by(|&a, &b| {
            log.probs
                .get(b, c)
                .total_cmp(&log.probs.get(a, c))
                .then(log.ids[a].cmp(&log.ids[b]))
        });
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (rank, &r) in order.iter().enumerate() {
            if log.labels.get(r, c) == 1 {
                hits += 1;
                sum += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits == 0 {
            excluded.push(c);
        } else {
            aps.push(sum / hits as f64);
        }
    }
    if aps.is_empty() {
        return Err(domain("no category has a positive sample"));
    }
    Ok((100.0 * aps.iter().sum::<f64>() / aps.len() as f64, excluded))
}

pub fn map(log: &PredictionLog) -> Result<f64> {
    Ok(map_with_excluded(log)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub ace: f64,
    pub mce: f64,
    pub map: f64,
    pub n_bins: usize,
    pub adaptive_bins: usize,
    /// Categories without positives, left out of mAP.
    pub map_excluded: Vec<usize>,
    pub global: ReliabilityTable,
    pub per_category: Vec<ReliabilityTable>,
}

impl CalibrationReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ece", self.ece), ("ace", self.ace), ("mce", self.mce), ("map", self.map)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(domain(format!("{name} = {v} outside [0, 100]")));
            }
        }
        Ok(())
    }
}

/// Full report: ECE/MCE over `bins`, ACE over `adaptive_bins`, mAP, and the
/// global and per-category reliability tables.
pub fn evaluate(log: &PredictionLog, bins: usize, adaptive_bins: usize) -> Result<CalibrationReport> {
    let global = reliability(log, bins, Scope::Global)?;
    let per_category = (0..log.categories())
        .map(|c| reliability(log, bins, Scope::Category(c)))
        .collect::<Result<Vec<_>>>()?;
    let (map, map_excluded) = map_with_excluded(log)?;
    Ok(CalibrationReport {
        ece: global.weighted_gap(),
        ace: ace(log, adaptive_bins)?,
        mce: global.max_gap(),
        map,
        n_bins: bins,
        adaptive_bins,
        map_excluded,
        global,
        per_category,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::LabelMatrix;
    use crate::numkit::Mat;

    fn log(probs: &[Vec<f64>], labels: &[Vec<u8>]) -> PredictionLog {
        PredictionLog::new(
            (0..probs.len() as u64).collect(),
            Mat::from_rows(probs).unwrap(),
            LabelMatrix::from_rows(labels).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn pooling_rule() {
        let l = log(&[vec![0.9, 0.3, 0.5]], &[vec![1, 1, 0]]);
        let p = pool(&l);
        let find = |c: usize| p.iter().find(|q| q.class == c).unwrap();
        assert_eq!((find(0).confidence, find(0).correct), (0.9, true));
        assert!((find(1).confidence - 0.7).abs() < 1e-15 && !find(1).correct);
        assert_eq!((find(2).confidence, find(2).correct), (0.5, true));
    }

    #[test]
    fn perfect_confident_predictions_have_zero_error() {
        let l = log(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1, 0], vec![0, 1]]);
        assert_eq!(ece(&l, 15).unwrap(), 0.0);
        assert_eq!(mce(&l, 15).unwrap(), 0.0);
    }

    #[test]
    fn single_bin_hand_case_is_exactly_thirty() {
        let l = log(&[vec![0.8, 0.8, 0.2, 0.2]], &[vec![1, 0, 0, 1]]);
        assert_eq!(ece(&l, 1).unwrap(), 30.0);
        assert_eq!(mce(&l, 1).unwrap(), 30.0);
        assert_eq!(ece(&l, 15).unwrap(), 30.0);
    }

    #[test]
    fn ace_hand_case_is_exactly_ten() {
        let l = log(&[vec![0.6, 0.7, 0.9, 1.0]], &[vec![1, 0, 1, 1]]);
        assert_eq!(ace(&l, 2).unwrap(), 10.0);
        assert!(ace(&l, 5).is_err());
        // Duplicating every pair leaves the group means unchanged.
        let l2 = log(
            &[vec![0.6, 0.7, 0.9, 1.0], vec![0.6, 0.7, 0.9, 1.0]],
            &[vec![1, 0, 1, 1], vec![1, 0, 1, 1]],
        );
        assert_eq!(ace(&l2, 2).unwrap(), 10.0);
    }

    #[test]
    fn map_hand_case() {
        let l = log(&[vec![0.9], vec![0.5], vec![0.2]], &[vec![1], vec![0], vec![1]]);
        assert!((map(&l).unwrap() - 250.0 / 3.0).abs() < 1e-12);
        let l = log(&[vec![0.9, 0.1], vec![0.2, 0.3]], &[vec![1, 0], vec![0, 0]]);
        let (m, excl) = map_with_excluded(&l).unwrap();
        assert_eq!(m, 100.0);
        assert_eq!(excl, vec![1]);
    }

    #[test]
    fn map_ties_break_by_id() {
        // Equal scores: id 0 (negative) ranks ahead of id 1 (positive).
        let l = log(&[vec![0.5], vec![0.5]], &[vec![0], vec![1]]);
        assert!((map(&l).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn table_counts_and_recomputation() {
        let probs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 9.0, 1.0 - i as f64 / 13.0]).collect();
        let labels: Vec<Vec<u8>> = (0..10).map(|i| vec![(i % 2) as u8, (i % 3 == 0) as u8]).collect();
        let l = log(&probs, &labels);
        let r = evaluate(&l, 15, 4).unwrap();
        assert_eq!(r.global.total(), 20);
        assert!(r.per_category.iter().all(|t| t.total() == 10 && t.bins.len() == 15));
        assert!((r.global.weighted_gap() - ece(&l, 15).unwrap()).abs() < 1e-12);
        assert!(r.mce >= r.ece);
        r.validate().unwrap();
        for w in r.global.bins.windows(2) {
            assert_eq!(w[0].hi, w[1].lo);
        }
        assert_eq!(r.global.bins[0].lo, 0.5);
        assert_eq!(r.global.bins[14].hi, 1.0);
    }

    #[test]
    fn one_category_scope_equals_global() {
        let l = log(&[vec![0.9], vec![0.4], vec![0.7]], &[vec![1], vec![1], vec![0]]);
        let g = reliability(&l, 5, Scope::Global).unwrap();
        let c = reliability(&l, 5, Scope::Category(0)).unwrap();
        assert_eq!(g.bins, c.bins);
    }
}
