//! Instance- and prototype-level category correlation, and the soft labels
//! derived from it.
//!
//! A correlation matrix is built per query sample: entry `(c, c')` starts as a
//! sum of cosine similarities between the query's `c`-feature and `c'`-features
//! drawn from elsewhere (retrieved positive samples or K-means prototypes),
//! the diagonal is masked out and each row is softmax-normalized.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cscl::FeatureBank;
use crate::error::{check_len, domain, Error, Result};
use crate::numkit::{cosine, dot, kmeans, masked_softmax, norm, Mat, Seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    Instance,
    Prototype,
}

impl CorrelationKind {
    pub fn tag(self) -> &'static str {
        match self {
            CorrelationKind::Instance => "ins",
            CorrelationKind::Prototype => "pro",
        }
    }
}

/// Row-stochastic C×C matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    values: Mat,
    kind: CorrelationKind,
}

impl CorrelationMatrix {
    /// Masks the diagonal of a raw similarity matrix and softmax-normalizes rows.
    pub fn from_raw(raw: &Mat, kind: CorrelationKind) -> Result<Self> {
        let c = raw.rows();
        check_len(c, raw.cols())?;
        let mut values = Mat::zeros(c, c);
        for r in 0..c {
            let row = masked_softmax(raw.row(r), &[r])?;
            values.row_mut(r).copy_from_slice(&row);
        }
        Ok(CorrelationMatrix { values, kind })
    }

    /// Wraps an already-normalized matrix after checking the invariants.
    pub fn from_normalized(values: Mat, kind: CorrelationKind) -> Result<Self> {
        let c = values.rows();
        check_len(c, values.cols())?;
        for r in 0..c {
            let row = values.row(r);
            if row[r] != 0.0 {
                return Err(domain(format!("row {r}: diagonal must be 0")));
            }
            if row.iter().any(|&v| v < 0.0) {
                return Err(domain(format!("row {r}: negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(domain(format!("row {r} sums to {s}, not 1")));
            }
        }
        Ok(CorrelationMatrix { values, kind })
    }

    pub fn kind(&self) -> CorrelationKind {
        self.kind
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn categories(&self) -> usize {
        self.values.rows()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.values.row(r)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values.get(r, c)
    }
}

/// Normalized correlation row; a degenerate (zero-norm) query feature gives
/// an all-zero raw row, i.e. a uniform distribution over the other categories.
fn normalize_row(raw: &[f64], diag: usize) -> Result<Vec<f64>> {
    masked_softmax(raw, &[diag])
}

/// Draws `t` sample indices for every category from the bank's positive pools.
///
/// Sampling is uniform without replacement when the pool holds at least `t`
/// samples and with replacement otherwise.
pub fn retrieve<R: Rng>(bank: &FeatureBank, t: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if t == 0 {
        return Err(domain("T must be at least 1"));
    }
    let mut out = Vec::with_capacity(bank.categories());
    for c in 0..bank.categories() {
        let pool = bank.pool(c);
        if pool.is_empty() {
            return Err(if bank.positive_count(c) == 0 {
                Error::NoPositives(c)
            } else {
                domain(format!("category {c} has only zero-norm features in the bank"))
            });
        }
        let picks: Vec<usize> = if pool.len() >= t {
            index::sample(rng, pool.len(), t)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            (0..t).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };
        out.push(picks);
    }
    Ok(out)
}

/// Raw similarity row `c` against pre-retrieved samples.
fn instance_raw_row(query: &Mat, c: usize, bank: &FeatureBank, picks: &[Vec<usize>]) -> Result<Vec<f64>> {
    let q = query.row(c);
    let qn = norm(q);
    let cats = bank.categories();
    let mut raw = vec![0.0; cats];
    if qn == 0.0 {
        return Ok(raw);
    }
    for (c2, slot) in raw.iter_mut().enumerate() {
        if c2 == c {
            continue;
        }
        let mut s = 0.0;
        for &n in &picks[c2] {
            let f = bank.feature(n, c2);
            s += dot(q, f) / (qn * bank.feature_norm(n, c2));
        }
        *slot = s;
    }
    Ok(raw)
}

/// Normalized instance-level rows for the requested categories.
pub fn instance_rows(
    query: &Mat,
    bank: &FeatureBank,
    rows: &[usize],
    picks: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    check_len(bank.categories(), query.rows())?;
    check_len(bank.feature_dim(), query.cols())?;
    rows.iter()
        .map(|&c| normalize_row(&instance_raw_row(query, c, bank, picks)?, c))
        .collect()
}

/// Instance-level correlation matrix for one query sample.
///
/// `query` holds the sample's C category features (one per row). For every
/// category `c'`, `t` positives of `c'` are retrieved from the bank and
/// `raw[c][c'] = Σ_t cosine(f_c, f_{c'}^{n_t})`.
pub fn instance_corr(query: &Mat, bank: &FeatureBank, t: usize, seed: Seed) -> Result<CorrelationMatrix> {
    check_len(bank.categories(), query.rows())?;
    check_len(bank.feature_dim(), query.cols())?;
    let mut rng = seed.rng();
    let picks = retrieve(bank, t, &mut rng)?;
    let c = bank.categories();
    let mut raw = Mat::zeros(c, c);
    for r in 0..c {
        let row = instance_raw_row(query, r, bank, &picks)?;
        raw.row_mut(r).copy_from_slice(&row);
    }
    CorrelationMatrix::from_raw(&raw, CorrelationKind::Instance)
}

/// Per-category K-means prototypes of positive-sample features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    /// One K_c × D_f matrix per category.
    pub prototypes: Vec<Mat>,
    pub requested_k: usize,
    /// Categories whose prototype count was clamped below `requested_k`.
    pub clamped: Vec<usize>,
}

impl PrototypeBank {
    pub fn categories(&self) -> usize {
        self.prototypes.len()
    }

    /// True when every category has the same number of prototypes.
    pub fn uniform_k(&self) -> bool {
        self.clamped.is_empty()
    }
}

/// Runs K-means over each category's positive features.
pub fn build_prototypes(bank: &FeatureBank, k: usize, max_iters: usize, seed: Seed) -> Result<PrototypeBank> {
    if k == 0 {
        return Err(domain("K must be at least 1"));
    }
    let d = bank.feature_dim();
    let mut prototypes = Vec::with_capacity(bank.categories());
    let mut clamped = Vec::new();
    for c in 0..bank.categories() {
        let pool = bank.pool(c);
        if pool.is_empty() {
            return Err(if bank.positive_count(c) == 0 {
                Error::NoPositives(c)
            } else {
                domain(format!("category {c} has only zero-norm features in the bank"))
            });
        }
        let mut pts = Mat::zeros(pool.len(), d);
        for (i, &n) in pool.iter().enumerate() {
            pts.row_mut(i).copy_from_slice(bank.feature(n, c));
        }
        let kc = if pool.len() < k {
            clamped.push(c);
            pool.len()
        } else {
            k
        };
        let km = kmeans(&pts, kc, max_iters, seed.derive(c as u64))?;
        prototypes.push(km.centroids);
    }
    Ok(PrototypeBank {
        prototypes,
        requested_k: k,
        clamped,
    })
}

fn proto_raw_row(query: &Mat, c: usize, protos: &PrototypeBank) -> Result<Vec<f64>> {
    let q = query.row(c);
    let cats = protos.categories();
    let mut raw = vec![0.0; cats];
    if norm(q) == 0.0 {
        return Ok(raw);
    }
    let average = !protos.uniform_k();
    for (c2, slot) in raw.iter_mut().enumerate() {
        if c2 == c {
            continue;
        }
        let p = &protos.prototypes[c2];
        let mut s = 0.0;
        for k in 0..p.rows() {
            s += cosine(q, p.row(k))?;
        }
        if average {
            s /= p.rows() as f64;
        }
        *slot = s;
    }
    Ok(raw)
}

/// Normalized prototype-level rows for the requested categories.
pub fn proto_rows(query: &Mat, protos: &PrototypeBank, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
    check_len(protos.categories(), query.rows())?;
    rows.iter()
        .map(|&c| normalize_row(&proto_raw_row(query, c, protos)?, c))
        .collect()
}

/// Prototype-level correlation: `raw[c][c'] = Σ_k cosine(f_c, p^k_{c'})`.
///
/// When K was clamped for some category the sums become means so rows stay
/// comparable across columns.
pub fn proto_corr(query: &Mat, protos: &PrototypeBank) -> Result<CorrelationMatrix> {
    let c = protos.categories();
    check_len(c, query.rows())?;
    for p in &protos.prototypes {
        check_len(query.cols(), p.cols())?;
    }
    let mut raw = Mat::zeros(c, c);
    for r in 0..c {
        let row = proto_raw_row(query, r, protos)?;
        raw.row_mut(r).copy_from_slice(&row);
    }
    CorrelationMatrix::from_raw(&raw, CorrelationKind::Prototype)
}

/// One softened label row.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftRow {
    pub values: Vec<f64>,
    /// Mass the correlation sum would have sent to positive columns before
    /// those were overwritten with `1 − α`.
    pub overwrite_mass: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(domain(format!("alpha = {alpha} outside [0, 1)")));
    }
    Ok(())
}

/// Softens `y` using correlation rows supplied on demand for each positive.
pub(crate) fn soften_with<'a, F>(y: &[u8], alpha: f64, mut row_of: F) -> Result<SoftRow>
where
    F: FnMut(usize) -> &'a [f64],
{
    check_alpha(alpha)?;
    let c = y.len();
    if !y.iter().any(|&v| v == 1) {
        return Err(domain("label row has no positive category"));
    }
    let mut spread = vec![0.0; c];
    for (k, &yk) in y.iter().enumerate() {
        if yk == 1 {
            let r = row_of(k);
            check_len(c, r.len())?;
            for (s, &rv) in spread.iter_mut().zip(r) {
                *s += alpha * rv;
            }
        }
    }
    let mut overwrite_mass = 0.0;
    let values = y
        .iter()
        .zip(&spread)
        .map(|(&yc, &s)| {
            if yc == 1 {
                overwrite_mass += s;
                1.0 - alpha
            } else {
                s
            }
        })
        .collect();
    Ok(SoftRow {
        values,
        overwrite_mass,
    })
}

/// Correlation-aware soft labels: positives become `1 − α`, a negative `c`
/// receives `Σ_k α·R[k][c]·y_k`.
pub fn soften(y: &[u8], r: &CorrelationMatrix, alpha: f64) -> Result<SoftRow> {
    check_len(r.categories(), y.len())?;
    soften_with(y, alpha, |k| r.row(k))
}

/// Soft labels for a set of samples, keyed by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelMatrix {
    pub ids: Vec<u64>,
    pub values: Mat,
    pub alpha: f64,
    pub kind: CorrelationKind,
    pub overwrite_mass: Vec<f64>,
}

impl SoftLabelMatrix {
    pub fn validate(&self) -> Result<()> {
        check_len(self.ids.len(), self.values.rows())?;
        check_len(self.ids.len(), self.overwrite_mass.len())?;
        check_alpha(self.alpha)?;
        if self.values.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(domain("soft label outside [0, 1]"));
        }
        Ok(())
    }

    /// Row index of each id, for lookups by sample id.
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }
}

/// Instance- and prototype-level soft labels for every sample in `bank`,
/// using each sample's own features as the query. `seed` drives retrieval.
pub fn soft_label_matrices(
    bank: &FeatureBank,
    protos: &PrototypeBank,
    alpha: f64,
    t: usize,
    seed: Seed,
) -> Result<(SoftLabelMatrix, SoftLabelMatrix)> {
    check_alpha(alpha)?;
    let c = bank.categories();
    check_len(c, protos.categories())?;
    let n = bank.len();
    let mut rng = seed.rng();
    let mut ins = Mat::zeros(n, c);
    let mut pro = Mat::zeros(n, c);
    let mut ins_mass = Vec::with_capacity(n);
    let mut pro_mass = Vec::with_capacity(n);
    for s in 0..n {
        let y = bank.labels().row(s);
        let pos: Vec<usize> = (0..c).filter(|&k| y[k] == 1).collect();
        let query = bank.sample_features(s);
        let picks = retrieve(bank, t, &mut rng)?;
        let ins_rows = instance_rows(&query, bank, &pos, &picks)?;
        let pro_rows = proto_rows(&query, protos, &pos)?;
        let slot = |k: usize| pos.iter().position(|&p| p == k).unwrap_or(0);
        let a = soften_with(y, alpha, |k| ins_rows[slot(k)].as_slice())?;
        let b = soften_with(y, alpha, |k| pro_rows[slot(k)].as_slice())?;
        ins.row_mut(s).copy_from_slice(&a.values);
        pro.row_mut(s).copy_from_slice(&b.values);
        ins_mass.push(a.overwrite_mass);
        pro_mass.push(b.overwrite_mass);
    }
    let ids = bank.ids().to_vec();
    Ok((
        SoftLabelMatrix {
            ids: ids.clone(),
            values: ins,
            alpha,
            kind: CorrelationKind::Instance,
            overwrite_mass: ins_mass,
        },
        SoftLabelMatrix {
            ids,
            values: pro,
            alpha,
            kind: CorrelationKind::Prototype,
            overwrite_mass: pro_mass,
        },
    ))
}

/// Dataset-level prototype correlation: row `c` is the mean of the
/// per-sample prototype rows `c` over the pool of category `c`.
pub fn category_correlation(bank: &FeatureBank, protos: &PrototypeBank) -> Result<CorrelationMatrix> {
    let c = bank.categories();
    check_len(c, protos.categories())?;
    let mut out = Mat::zeros(c, c);
    for r in 0..c {
        let pool = bank.pool(r);
        if pool.is_empty() {
            return Err(Error::NoPositives(r));
        }
        let mut acc = vec![0.0; c];
        for &s in pool {
            let query = bank.sample_features(s);
            let row = normalize_row(&proto_raw_row(&query, r, protos)?, r)?;
            for (a, v) in acc.iter_mut().zip(&row) {
                *a += v;
            }
        }
        for (o, a) in out.row_mut(r).iter_mut().zip(&acc) {
            *o = a / pool.len() as f64;
        }
        out.set(r, r, 0.0);
    }
    CorrelationMatrix::from_normalized(out, CorrelationKind::Prototype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::LabelMatrix;

    fn corr(rows: &[Vec<f64>]) -> CorrelationMatrix {
        CorrelationMatrix::from_normalized(Mat::from_rows(rows).unwrap(), CorrelationKind::Instance)
            .unwrap()
    }

    #[test]
    fn two_categories_always_swap() {
        let raw = Mat::from_rows(&[vec![3.0, -7.0], vec![0.2, 9.0]]).unwrap();
        let r = CorrelationMatrix::from_raw(&raw, CorrelationKind::Prototype).unwrap();
        assert_eq!(r.values(), &Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
    }

    #[test]
    fn hand_softmax_of_log_two_and_zero() {
        let raw = Mat::from_rows(&[
            vec![100.0, libm::log(2.0), 0.0],
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let r = CorrelationMatrix::from_raw(&raw, CorrelationKind::Instance).unwrap();
        assert!((r.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.get(0, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.get(0, 0), 0.0);
    }

    #[test]
    fn soften_examples() {
        let r = corr(&[
            vec![0.0, 0.7, 0.2, 0.1],
            vec![0.5, 0.0, 0.25, 0.25],
            vec![0.5, 0.25, 0.0, 0.25],
            vec![0.5, 0.25, 0.25, 0.0],
        ]);
        let out = soften(&[1, 0, 0, 0], &r, 0.05).unwrap();
        let want = [0.95, 0.035, 0.010, 0.005];
        for (o, w) in out.values.iter().zip(want) {
            assert!((o - w).abs() < 1e-15);
        }
        let out = soften(&[1, 0, 0, 0], &r, 0.0).unwrap();
        assert_eq!(out.values, vec![1.0, 0.0, 0.0, 0.0]);

        let r = corr(&[vec![0.0, 0.6, 0.4], vec![0.5, 0.0, 0.5], vec![0.5, 0.5, 0.0]]);
        let out = soften(&[1, 1, 0], &r, 0.1).unwrap();
        assert!((out.values[0] - 0.9).abs() < 1e-15);
        assert!((out.values[1] - 0.9).abs() < 1e-15);
        assert!((out.values[2] - 0.09).abs() < 1e-15);
        // 0.1·0.6 would have gone to column 1 and 0.1·0.5 to column 0.
        assert!((out.overwrite_mass - 0.11).abs() < 1e-15);
    }

    #[test]
    fn soften_rejects_bad_inputs() {
        let r = corr(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(soften(&[0, 0], &r, 0.1).is_err());
        assert!(soften(&[1, 0], &r, 1.0).is_err());
        assert!(soften(&[1, 0, 0], &r, 0.1).is_err());
    }

    #[test]
    fn from_normalized_checks_invariants() {
        let bad = Mat::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        assert!(CorrelationMatrix::from_normalized(bad, CorrelationKind::Instance).is_err());
        let bad = Mat::from_rows(&[vec![0.0, 0.9], vec![1.0, 0.0]]).unwrap();
        assert!(CorrelationMatrix::from_normalized(bad, CorrelationKind::Instance).is_err());
    }

    fn bank_from(features: &[Vec<Vec<f64>>], labels: &[Vec<u8>]) -> FeatureBank {
        let n = features.len();
        let c = features[0].len();
        let d = features[0][0].len();
        let flat: Vec<f64> = features.iter().flatten().flatten().copied().collect();
        FeatureBank::new(
            (0..n as u64).collect(),
            c,
            d,
            flat,
            LabelMatrix::from_rows(labels).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identical_features_give_uniform_rows() {
        let f = vec![vec![1.0, 2.0, 0.5]; 3];
        let bank = bank_from(
            &[f.clone(), f.clone(), f.clone()],
            &[vec![1, 0, 1], vec![0, 1, 0], vec![1, 1, 1]],
        );
        let query = Mat::from_rows(&f).unwrap();
        let r = instance_corr(&query, &bank, 4, Seed(1)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert!((r.get(i, j) - want).abs() < 1e-12);
            }
        }
        let protos = build_prototypes(&bank, 2, 10, Seed(2)).unwrap();
        let r = proto_corr(&query, &protos).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert!((r.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_positives_name_the_category() {
        let f = vec![vec![1.0, 0.0]; 2];
        let bank = bank_from(&[f.clone(), f.clone()], &[vec![1, 0], vec![1, 0]]);
        let query = Mat::from_rows(&f).unwrap();
        assert_eq!(instance_corr(&query, &bank, 2, Seed(0)), Err(Error::NoPositives(1)));
        assert_eq!(build_prototypes(&bank, 1, 5, Seed(0)), Err(Error::NoPositives(1)));
    }

    #[test]
    fn prototypes_single_cluster_is_mean_and_k_is_clamped() {
        let bank = bank_from(
            &[
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![3.0, 2.0], vec![0.0, 3.0]],
                vec![vec![9.0, 9.0], vec![1.0, 1.0]],
            ],
            &[vec![1, 1], vec![1, 0], vec![0, 0]],
        );
        let protos = build_prototypes(&bank, 1, 10, Seed(0)).unwrap();
        assert_eq!(protos.prototypes[0].row(0), &[2.0, 1.0]);
        assert_eq!(protos.prototypes[1].row(0), &[0.0, 1.0]);
        let protos = build_prototypes(&bank, 2, 10, Seed(0)).unwrap();
        assert_eq!(protos.clamped, vec![1]);
        assert_eq!(protos.prototypes[1].rows(), 1);
    }

    #[test]
    fn hand_built_prototypes_softmax_one_and_zero() {
        // Query features are axis-aligned; prototypes of category 1 align with
        // the query's category-0 feature, prototypes of category 2 are orthogonal.
        let protos = PrototypeBank {
            prototypes: vec![
                Mat::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap(),
                Mat::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(),
                Mat::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap(),
            ],
            requested_k: 1,
            clamped: vec![],
        };
        let query = Mat::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])
            .unwrap();
        let r = proto_corr(&query, &protos).unwrap();
        assert!((r.get(0, 1) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((r.get(0, 2) - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn retrieval_is_deterministic() {
        let feats: Vec<Vec<Vec<f64>>> = (0..6)
            .map(|i| vec![vec![i as f64 + 1.0, 1.0], vec![1.0, i as f64]])
            .collect();
        let labels: Vec<Vec<u8>> = (0..6).map(|i| vec![1, (i % 2) as u8]).collect();
        let bank = bank_from(&feats, &labels);
        let query = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = instance_corr(&query, &bank, 3, Seed(8)).unwrap();
        let b = instance_corr(&query, &bank, 3, Seed(8)).unwrap();
        assert_eq!(a, b);
    }
}
