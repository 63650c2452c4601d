//! Synthetic multi-label data with a planted category-similarity structure.
//!
//! Class means are unit vectors built by mixing block-shared directions with
//! per-class private directions, so the cosine between two class means equals
//! the similarity of the innermost block containing both. Blocks form a
//! laminar family (any two are disjoint or nested), which lets the planted
//! structure be hierarchical, e.g. "vehicles" ⊃ "road vehicles".

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, config, domain, Error, Result};
use crate::numkit::{dot, norm, Mat, Seed};

/// Binary ground-truth labels, one row per sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        check_len(rows * cols, data.len())?;
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(domain(format!(
                "label value {} at row {}, column {} is not 0/1",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(LabelMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len(cols, r.len())?;
            data.extend_from_slice(r);
        }
        LabelMatrix::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_positives(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&v| v == 1).count()
    }

    /// Row indices whose label in column `c` is positive.
    pub fn positives_of(&self, c: usize) -> Vec<usize> {
        (0..self.rows).filter(|&r| self.get(r, c) == 1).collect()
    }

    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.cols];
        for r in 0..self.rows {
            for (c, &v) in self.row(r).iter().enumerate() {
                counts[c] += v as usize;
            }
        }
        counts
    }

    pub fn select_rows(&self, idx: &[usize]) -> LabelMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        LabelMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    /// Labels as `f64` targets for row `r`.
    pub fn row_f64(&self, r: usize) -> Vec<f64> {
        self.row(r).iter().map(|&v| v as f64).collect()
    }
}

/// A group of categories whose class means share a common direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityBlock {
    pub members: Vec<usize>,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub categories: usize,
    pub dim: usize,
    pub samples: usize,
    /// Target mean number of positive labels per sample.
    pub avg_labels: f64,
    pub similarity_blocks: Vec<SimilarityBlock>,
    pub noise_sigma: f64,
    pub seed: Seed,
}

impl GenConfig {
    /// C = 20, D = 64, N = 5000, three labels per sample on average, with two
    /// loose super-groups of ten categories each split into tight groups of five.
    pub fn default_preset(seed: Seed) -> Self {
        GenConfig {
            categories: 20,
            dim: 64,
            samples: 5000,
            avg_labels: 3.0,
            similarity_blocks: Self::nested_blocks(20),
            noise_sigma: 0.3,
            seed,
        }
    }

    /// Two halves at similarity 0.3, each split again into halves at 0.7.
    /// Blocks with a single member are left out.
    pub fn nested_blocks(categories: usize) -> Vec<SimilarityBlock> {
        let block = |lo: usize, hi: usize, similarity: f64| SimilarityBlock {
            members: (lo..hi).collect(),
            similarity,
        };
        let halves = [(0, categories / 2), (categories / 2, categories)];
        let mut out: Vec<SimilarityBlock> = halves
            .iter()
            .filter(|(lo, hi)| hi - lo >= 2)
            .map(|&(lo, hi)| block(lo, hi, 0.3))
            .collect();
        for (lo, hi) in halves {
            let mid = lo + (hi - lo) / 2;
            for (a, b) in [(lo, mid), (mid, hi)] {
                if b - a >= 2 {
                    out.push(block(a, b, 0.7));
                }
            }
        }
        out
    }

    /// A scaled-down preset for quick experiments and tests.
    pub fn small_preset(seed: Seed) -> Self {
        let block = |lo: usize, hi: usize, similarity: f64| SimilarityBlock {
            members: (lo..hi).collect(),
            similarity,
        };
        GenConfig {
            categories: 8,
            dim: 24,
            samples: 600,
            avg_labels: 2.0,
            similarity_blocks: vec![block(0, 4, 0.7), block(4, 8, 0.7)],
            noise_sigma: 0.3,
            seed,
        }
    }

    /// Checks the parts of the config that determine the class means.
    pub fn validate_geometry(&self) -> Result<()> {
        let c = self.categories;
        if c == 0 {
            return Err(config("at least one category is required"));
        }
        if self.dim < c + self.similarity_blocks.len() {
            return Err(config(format!(
                "dim = {} is too small for {} categories plus {} shared block directions",
                self.dim,
                c,
                self.similarity_blocks.len()
            )));
        }
        for (i, b) in self.similarity_blocks.iter().enumerate() {
            if !(0.0..1.0).contains(&b.similarity) {
                return Err(config(format!(
                    "block {i}: similarity {} outside [0, 1)",
                    b.similarity
                )));
            }
            if b.members.is_empty() {
                return Err(config(format!("block {i} is empty")));
            }
            let mut seen = vec![false; c];
            for &m in &b.members {
                if m >= c {
                    return Err(config(format!("block {i}: category {m} out of range")));
                }
                if seen[m] {
                    return Err(config(format!("block {i}: category {m} listed twice")));
                }
                seen[m] = true;
            }
        }
        block_parents(&self.similarity_blocks)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        let c = self.categories as f64;
        if !(self.avg_labels >= 1.0 && self.avg_labels < c) {
            return Err(config(format!(
                "avg_labels = {} must satisfy 1 <= avg_labels < categories ({})",
                self.avg_labels, self.categories
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(config("noise_sigma must be finite and nonnegative"));
        }
        if self.samples == 0 {
            return Err(config("samples must be positive"));
        }
        Ok(())
    }

    /// Cosine similarity the construction plants between two class means.
    pub fn planted_similarity(&self) -> Mat {
        let c = self.categories;
        let mut m = Mat::identity(c);
        for b in &self.similarity_blocks {
            for &i in &b.members {
                for &j in &b.members {
                    if i != j && b.similarity > m.get(i, j) {
                        m.set(i, j, b.similarity);
                    }
                }
            }
        }
        m
    }
}

fn contains_all(outer: &[usize], inner: &[usize]) -> bool {
    inner.iter().all(|m| outer.contains(m))
}

/// For every block, the index of the smallest block strictly containing it.
fn block_parents(blocks: &[SimilarityBlock]) -> Result<Vec<Option<usize>>> {
    let mut parents: Vec<Option<usize>> = vec![None; blocks.len()];
    for (i, a) in blocks.iter().enumerate() {
        for (j, b) in blocks.iter().enumerate() {
            if i == j {
                continue;
            }
            let overlap = a.members.iter().any(|m| b.members.contains(m));
            if !overlap {
                continue;
            }
            let a_in_b = contains_all(&b.members, &a.members);
            let b_in_a = contains_all(&a.members, &b.members);
            if a_in_b && b_in_a {
                return Err(config(format!("blocks {i} and {j} are identical")));
            }
            if !a_in_b && !b_in_a {
                return Err(config(format!(
                    "blocks {i} and {j} overlap without nesting"
                )));
            }
            if a_in_b {
                let tighter = match parents[i] {
                    None => true,
                    Some(p) => blocks[p].members.len() > b.members.len(),
                };
                if tighter {
                    parents[i] = Some(j);
                }
            }
        }
    }
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = *p {
            if blocks[i].similarity < blocks[p].similarity {
                return Err(config(format!(
                    "block {i} is nested in block {p} but has lower similarity"
                )));
            }
        }
    }
    Ok(parents)
}

/// `count` orthonormal vectors of length `dim` (modified Gram–Schmidt, two passes).
fn orthonormal_basis(count: usize, dim: usize, seed: Seed) -> Vec<Vec<f64>> {
    let mut rng = seed.rng();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        for x in &mut v {
            *x /= n;
        }
        basis.push(v);
    }
    basis
}

/// Unit-norm class means (C×D) realizing the planted similarity.
pub fn plant_means(cfg: &GenConfig) -> Result<Mat> {
    cfg.validate_geometry()?;
    let c = cfg.categories;
    let blocks = &cfg.similarity_blocks;
    let parents = block_parents(blocks)?;
    let basis = orthonormal_basis(c + blocks.len(), cfg.dim, cfg.seed.derive(0));
    let mut means = Mat::zeros(c, cfg.dim);
    let mut shared = vec![0.0; c];
    for (bi, b) in blocks.iter().enumerate() {
        let parent = parents[bi].map_or(0.0, |p| blocks[p].similarity);
        let weight = b.similarity - parent;
        let scale = libm::sqrt(weight);
        for &m in &b.members {
            shared[m] += weight;
            for (x, u) in means.row_mut(m).iter_mut().zip(&basis[c + bi]) {
                *x += scale * u;
            }
        }
    }
    for (k, &s) in shared.iter().enumerate() {
        let scale = libm::sqrt(1.0 - s);
        for (x, u) in means.row_mut(k).iter_mut().zip(&basis[k]) {
            *x += scale * u;
        }
    }
    Ok(means)
}

/// A labelled dataset. `ids` identify samples across splits and files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub ids: Vec<u64>,
    pub inputs: Mat,
    pub labels: LabelMatrix,
    pub planted_similarity: Mat,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.rows();
        check_len(n, self.labels.rows())?;
        check_len(n, self.ids.len())?;
        let c = self.labels.cols();
        check_len(c, self.planted_similarity.rows())?;
        check_len(c, self.planted_similarity.cols())?;
        for r in 0..n {
            if self.labels.row_positives(r) == 0 {
                return Err(domain(format!("sample {} has no positive label", self.ids[r])));
            }
        }
        let s = &self.planted_similarity;
        for i in 0..c {
            if s.get(i, i) != 1.0 {
                return Err(domain("planted similarity diagonal must be 1"));
            }
            for j in 0..c {
                let v = s.get(i, j);
                if v != s.get(j, i) {
                    return Err(domain("planted similarity must be symmetric"));
                }
                if i != j && !(0.0..1.0).contains(&v) {
                    return Err(domain("planted similarity off-diagonal must lie in [0, 1)"));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn categories(&self) -> usize {
        self.labels.cols()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            inputs: self.inputs.select_rows(idx),
            labels: self.labels.select_rows(idx),
            planted_similarity: self.planted_similarity.clone(),
        }
    }

    pub fn mean_positives(&self) -> f64 {
        let total: usize = (0..self.len()).map(|r| self.labels.row_positives(r)).sum();
        total as f64 / self.len() as f64
    }
}

/// Weighted draw of `count` distinct indices.
fn weighted_sample<R: Rng>(rng: &mut R, weights: &[f64], count: usize) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = w.iter().rposition(|&x| x > 0.0).unwrap_or(0);
        for (i, &x) in w.iter().enumerate() {
            if x <= 0.0 {
                continue;
            }
            if u < x {
                pick = i;
                break;
            }
            u -= x;
        }
        out.push(pick);
        w[pick] = 0.0;
    }
    out.sort_unstable();
    out
}

/// Draws a dataset: a block is chosen with probability proportional to its
/// size, a Poisson count of categories (clamped to [1, C − 1]) is sampled with 4:1
/// odds toward that block, and each input is the sum of the active class
/// means plus isotropic Gaussian noise.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let means = plant_means(cfg)?;
    let c = cfg.categories;
    let d = cfg.dim;
    let n = cfg.samples;
    let mut rng = cfg.seed.derive(1).rng();
    let poisson = Poisson::new(cfg.avg_labels).map_err(|e| config(format!("{e}")))?;
    let block_weights: Vec<f64> = cfg
        .similarity_blocks
        .iter()
        .map(|b| b.members.len() as f64)
        .collect();

    let mut inputs = Mat::zeros(n, d);
    let mut labels = vec![0u8; n * c];
    for r in 0..n {
        let mut weights = vec![1.0; c];
        if !block_weights.is_empty() {
            let b = weighted_sample(&mut rng, &block_weights, 1)[0];
            for &m in &cfg.similarity_blocks[b].members {
                weights[m] = 4.0;
            }
        }
        let draw: f64 = poisson.sample(&mut rng);
        let count = (draw as usize).clamp(1, c - 1);
        let active = weighted_sample(&mut rng, &weights, count);
        let x = inputs.row_mut(r);
        for &k in &active {
            labels[r * c + k] = 1;
            for (xi, mi) in x.iter_mut().zip(means.row(k)) {
                *xi += mi;
            }
        }
        if cfg.noise_sigma > 0.0 {
            for xi in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xi += cfg.noise_sigma * z;
            }
        }
    }
    let ds = Dataset {
        ids: (0..n as u64).collect(),
        inputs,
        labels: LabelMatrix::new(n, c, labels)?,
        planted_similarity: cfg.planted_similarity(),
    };
    Ok(ds)
}

/// A model's probability outputs with the matching ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLog {
    pub ids: Vec<u64>,
    pub probs: Mat,
    pub labels: LabelMatrix,
}

impl PredictionLog {
    pub fn new(ids: Vec<u64>, probs: Mat, labels: LabelMatrix) -> Result<Self> {
        check_len(probs.rows(), labels.rows())?;
        check_len(probs.cols(), labels.cols())?;
        check_len(probs.rows(), ids.len())?;
        if probs.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain("probabilities must lie in [0, 1]".into()));
        }
        Ok(PredictionLog { ids, probs, labels })
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn categories(&self) -> usize {
        self.probs.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_blocks_are_laminar_for_any_size() {
        for c in 2..30 {
            let cfg = GenConfig {
                categories: c,
                dim: 2 * c + 8,
                similarity_blocks: GenConfig::nested_blocks(c),
                ..GenConfig::default_preset(Seed(0))
            };
            cfg.validate_geometry().unwrap();
        }
        assert_eq!(GenConfig::nested_blocks(20).len(), 6);
    }
    use crate::numkit::cosine;

    fn flat(c: usize, d: usize, blocks: Vec<SimilarityBlock>) -> GenConfig {
        GenConfig {
            categories: c,
            dim: d,
            samples: 200,
            avg_labels: 1.5,
            similarity_blocks: blocks,
            noise_sigma: 0.1,
            seed: Seed(1),
        }
    }

    #[test]
    fn zero_similarity_block_gives_orthogonal_means() {
        let cfg = flat(
            5,
            8,
            vec![SimilarityBlock {
                members: (0..5).collect(),
                similarity: 0.0,
            }],
        );
        let m = plant_means(&cfg).unwrap();
        for i in 0..5 {
            assert!((norm(m.row(i)) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(cosine(m.row(i), m.row(j)).unwrap().abs() < 0.05);
            }
        }
    }

    #[test]
    fn block_similarity_is_realized_over_seeds() {
        for s in 0..10 {
            let mut cfg = flat(
                4,
                10,
                vec![SimilarityBlock {
                    members: vec![0, 1],
                    similarity: 0.8,
                }],
            );
            cfg.seed = Seed(s);
            let m = plant_means(&cfg).unwrap();
            let cos = cosine(m.row(0), m.row(1)).unwrap();
            assert!((0.75..=0.85).contains(&cos), "seed {s}: {cos}");
        }
    }

    #[test]
    fn nested_blocks_realize_innermost_similarity() {
        let cfg = GenConfig::default_preset(Seed(3));
        let m = plant_means(&cfg).unwrap();
        let planted = cfg.planted_similarity();
        for i in 0..20 {
            for j in 0..20 {
                let cos = cosine(m.row(i), m.row(j)).unwrap();
                assert!((cos - planted.get(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_category_is_a_unit_vector() {
        let mut cfg = flat(1, 3, vec![]);
        cfg.avg_labels = 0.5;
        let m = plant_means(&cfg).unwrap();
        assert_eq!(m.rows(), 1);
        assert!((norm(m.row(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_similarity_is_rejected() {
        let cfg = flat(
            3,
            8,
            vec![SimilarityBlock {
                members: vec![0, 1],
                similarity: 1.0,
            }],
        );
        assert!(matches!(plant_means(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn crossing_blocks_are_rejected() {
        let cfg = flat(
            4,
            8,
            vec![
                SimilarityBlock {
                    members: vec![0, 1],
                    similarity: 0.5,
                },
                SimilarityBlock {
                    members: vec![1, 2],
                    similarity: 0.5,
                },
            ],
        );
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn avg_labels_must_be_below_category_count() {
        let mut cfg = GenConfig::default_preset(Seed(0));
        cfg.avg_labels = 25.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.avg_labels = 20.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::small_preset(Seed(9));
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let mut other = cfg.clone();
        other.seed = Seed(10);
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn noiseless_single_label_input_is_the_class_mean() {
        let mut cfg = GenConfig::small_preset(Seed(4));
        cfg.noise_sigma = 0.0;
        cfg.avg_labels = 1.0;
        let ds = generate(&cfg).unwrap();
        let means = plant_means(&cfg).unwrap();
        let mut checked = 0;
        for r in 0..ds.len() {
            if ds.labels.row_positives(r) == 1 {
                let k = ds.labels.row(r).iter().position(|&v| v == 1).unwrap();
                assert_eq!(ds.inputs.row(r), means.row(k));
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn every_row_has_a_positive() {
        let ds = generate(&GenConfig::small_preset(Seed(2))).unwrap();
        ds.validate().unwrap();
    }

    #[test]
    fn label_matrix_rejects_non_binary() {
        assert!(matches!(
            LabelMatrix::new(1, 2, vec![0, 2]),
            Err(Error::Domain(_))
        ));
    }
}
