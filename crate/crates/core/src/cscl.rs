//! Category-specific contrastive learning.
//!
//! Each category owns a linear-plus-relu projection `f_c = relu(W_c x + b_c)`
//! and a one-unit classifier `p̂_c = sigmoid(v_c·f_c + bias_c)`. Training
//! minimizes an auxiliary classification loss against correlation-softened
//! targets plus a pairwise contrastive loss that pulls co-positive features
//! together and pushes every other pair apart.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correlation::{build_prototypes, instance_rows, proto_rows, retrieve, soften_with};
use crate::datagen::{Dataset, LabelMatrix};
use crate::error::{check_len, config, domain, Error, Result};
use crate::losses::{bce_logit, mlls_targets};
use crate::numkit::{cosine, dot, norm, sigmoid, sqrt, Mat, Seed};

/// Parameters of all per-category extractors and classifiers, stored flat.
///
/// Per category the block is `W_c` (D_f × D, row-major), `b_c` (D_f),
/// `v_c` (D_f) and the scalar classifier bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorParams {
    categories: usize,
    input_dim: usize,
    feature_dim: usize,
    data: Vec<f64>,
}

impl ExtractorParams {
    fn block_len(input_dim: usize, feature_dim: usize) -> usize {
        feature_dim * input_dim + 2 * feature_dim + 1
    }

    pub fn zeros(categories: usize, input_dim: usize, feature_dim: usize) -> Result<Self> {
        let len = categories * Self::block_len(input_dim, feature_dim);
        Self::from_flat(categories, input_dim, feature_dim, vec![0.0; len])
    }

    pub fn from_flat(categories: usize, input_dim: usize, feature_dim: usize, data: Vec<f64>) -> Result<Self> {
        if feature_dim < 2 {
            return Err(domain("feature dimension must be at least 2"));
        }
        if categories == 0 || input_dim == 0 {
            return Err(domain("extractor needs at least one category and input dimension"));
        }
        check_len(categories * Self::block_len(input_dim, feature_dim), data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("extractor parameters"));
        }
        Ok(ExtractorParams {
            categories,
            input_dim,
            feature_dim,
            data,
        })
    }

    /// Gaussian projection with variance `1/D`, shared by every category so
    /// features start out comparable across categories; classifiers start at
    /// zero.
    pub fn init(categories: usize, input_dim: usize, feature_dim: usize, seed: Seed) -> Result<Self> {
        let mut p = Self::zeros(categories, input_dim, feature_dim)?;
        let mut rng = seed.rng();
        let normal = Normal::new(0.0, 1.0 / sqrt(input_dim as f64))
            .map_err(|e| domain(format!("{e}")))?;
        let w: Vec<f64> = (0..feature_dim * input_dim).map(|_| normal.sample(&mut rng)).collect();
        for c in 0..categories {
            let off = p.offset(c);
            p.data[off..off + w.len()].copy_from_slice(&w);
        }
        Ok(p)
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, c: usize) -> usize {
        c * Self::block_len(self.input_dim, self.feature_dim)
    }

    /// `W_c`, row-major D_f × D.
    pub fn weight(&self, c: usize) -> &[f64] {
        let o = self.offset(c);
        &self.data[o..o + self.feature_dim * self.input_dim]
    }

    pub fn bias(&self, c: usize) -> &[f64] {
        let o = self.offset(c) + self.feature_dim * self.input_dim;
        &self.data[o..o + self.feature_dim]
    }

    pub fn classifier(&self, c: usize) -> &[f64] {
        let o = self.offset(c) + self.feature_dim * (self.input_dim + 1);
        &self.data[o..o + self.feature_dim]
    }

    pub fn classifier_bias(&self, c: usize) -> f64 {
        self.data[self.offset(c) + Self::block_len(self.input_dim, self.feature_dim) - 1]
    }

    /// Pre-activations `W_c x + b_c` for every category (C × D_f).
    fn preactivations(&self, x: &[f64]) -> Mat {
        let (df, d) = (self.feature_dim, self.input_dim);
        let mut h = Mat::zeros(self.categories, df);
        for c in 0..self.categories {
            let w = self.weight(c);
            let b = self.bias(c);
            let row = h.row_mut(c);
            for k in 0..df {
                row[k] = dot(&w[k * d..(k + 1) * d], x) + b[k];
            }
        }
        h
    }
}

/// Category-specific features `relu(W_c x + b_c)`, one row per category.
pub fn extract_features(params: &ExtractorParams, x: &[f64]) -> Result<Mat> {
    check_len(params.input_dim, x.len())?;
    let mut h = params.preactivations(x);
    for v in h.as_mut_slice() {
        *v = v.max(0.0);
    }
    Ok(h)
}

/// Auxiliary per-category probabilities `sigmoid(v_c·f_c + bias_c)`.
pub fn aux_classify(params: &ExtractorParams, features: &Mat) -> Result<Vec<f64>> {
    check_len(params.categories, features.rows())?;
    check_len(params.feature_dim, features.cols())?;
    Ok((0..params.categories)
        .map(|c| sigmoid(dot(params.classifier(c), features.row(c)) + params.classifier_bias(c)))
        .collect())
}

/// `1 − cos` for a co-positive pair, `1 + cos` otherwise.
pub fn contrastive_pair_loss(f_m: &[f64], f_n: &[f64], y_m: u8, y_n: u8) -> Result<f64> {
    let s = cosine(f_m, f_n)?;
    Ok(if y_m == 1 && y_n == 1 { 1.0 - s } else { 1.0 + s })
}

/// Category-specific features of a set of samples, with the positive pools
/// used for retrieval and prototype construction.
///
/// A sample enters the pool of category `c` when it is labelled positive for
/// `c` and its `c`-feature has nonzero norm (cosines are undefined otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    ids: Vec<u64>,
    categories: usize,
    feature_dim: usize,
    features: Vec<f64>,
    norms: Vec<f64>,
    labels: LabelMatrix,
    positives: Vec<Vec<usize>>,
    pools: Vec<Vec<usize>>,
}

impl FeatureBank {
    /// `features` is the N × C × D_f array flattened sample-major.
    pub fn new(
        ids: Vec<u64>,
        categories: usize,
        feature_dim: usize,
        features: Vec<f64>,
        labels: LabelMatrix,
    ) -> Result<Self> {
        let n = ids.len();
        check_len(n * categories * feature_dim, features.len())?;
        check_len(n, labels.rows())?;
        check_len(categories, labels.cols())?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature bank"));
        }
        let norms: Vec<f64> = features.chunks(feature_dim.max(1)).map(norm).collect();
        let positives: Vec<Vec<usize>> = (0..categories).map(|c| labels.positives_of(c)).collect();
        let pools = positives
            .iter()
            .enumerate()
            .map(|(c, pos)| {
                pos.iter()
                    .copied()
                    .filter(|&s| norms[s * categories + c] > 0.0)
                    .collect()
            })
            .collect();
        Ok(FeatureBank {
            ids,
            categories,
            feature_dim,
            features,
            norms,
            labels,
            positives,
            pools,
        })
    }

    /// Extracts every sample of `ds` with `params`.
    pub fn compute(params: &ExtractorParams, ds: &Dataset) -> Result<Self> {
        check_len(params.categories, ds.categories())?;
        let mut flat = Vec::with_capacity(ds.len() * params.categories * params.feature_dim);
        for r in 0..ds.len() {
            flat.extend_from_slice(extract_features(params, ds.inputs.row(r))?.as_slice());
        }
        FeatureBank::new(
            ds.ids.clone(),
            params.categories,
            params.feature_dim,
            flat,
            ds.labels.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, n: usize, c: usize) -> &[f64] {
        let o = (n * self.categories + c) * self.feature_dim;
        &self.features[o..o + self.feature_dim]
    }

    pub fn feature_norm(&self, n: usize, c: usize) -> f64 {
        self.norms[n * self.categories + c]
    }

    /// All C features of sample `n` (C × D_f).
    pub fn sample_features(&self, n: usize) -> Mat {
        let o = n * self.categories * self.feature_dim;
        let len = self.categories * self.feature_dim;
        Mat::from_vec(self.categories, self.feature_dim, self.features[o..o + len].to_vec())
            .expect("bank features are finite")
    }

    /// Samples labelled positive for `c`.
    pub fn positives(&self, c: usize) -> &[usize] {
        &self.positives[c]
    }

    pub fn positive_count(&self, c: usize) -> usize {
        self.positives[c].len()
    }

    /// Positives of `c` with a nonzero `c`-feature, in index order.
    pub fn pool(&self, c: usize) -> &[usize] {
        &self.pools[c]
    }

    /// Replaces the features of sample `n`.
    pub fn set_sample(&mut self, n: usize, features: &Mat) -> Result<()> {
        check_len(self.categories, features.rows())?;
        check_len(self.feature_dim, features.cols())?;
        if !features.is_finite() {
            return Err(Error::NonFinite("feature bank"));
        }
        let o = n * self.categories * self.feature_dim;
        self.features[o..o + features.as_slice().len()].copy_from_slice(features.as_slice());
        for c in 0..self.categories {
            let nz = norm(features.row(c));
            let was = self.norms[n * self.categories + c] > 0.0;
            self.norms[n * self.categories + c] = nz;
            if self.labels.get(n, c) != 1 || was == (nz > 0.0) {
                continue;
            }
            let pool = &mut self.pools[c];
            match pool.binary_search(&n) {
                Ok(i) if nz == 0.0 => {
                    pool.remove(i);
                }
                Err(i) if nz > 0.0 => pool.insert(i, n),
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub feature_dim: usize,
    pub alpha: f64,
    pub eta: f64,
    /// Retrieved positives per category for instance-level correlation.
    pub t: usize,
    /// Prototypes per category.
    pub k: usize,
    pub kmeans_iters: usize,
    /// Whether the pairwise contrastive term is optimized.
    pub contrastive: bool,
    pub seed: Seed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.05,
            feature_dim: 32,
            alpha: 0.05,
            eta: 0.5,
            t: 4,
            k: 10,
            kmeans_iters: 50,
            contrastive: true,
            seed: Seed(0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(config(format!("alpha = {} outside [0, 0.5)", self.alpha)));
        }
        if !(self.eta > 0.0) {
            return Err(config("eta must be positive"));
        }
        if self.t == 0 || self.k == 0 {
            return Err(config("T and K must be at least 1"));
        }
        if self.feature_dim < 2 {
            return Err(config("feature dimension must be at least 2"));
        }
        if self.batch_size == 0 || self.kmeans_iters == 0 {
            return Err(config("batch size and k-means iterations must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config("learning rate must be positive"));
        }
        Ok(())
    }
}

/// A mini-batch for the CSCL objective. All matrices are row-aligned; label,
/// instance and prototype blocks are B × C.
pub struct CsclBatch<'a> {
    pub inputs: &'a Mat,
    pub labels: &'a [u8],
    pub instance: &'a Mat,
    pub prototype: &'a Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsclLoss {
    pub acl: f64,
    pub contrastive: f64,
    pub total: f64,
    /// Gradient with respect to the flat parameters.
    pub grad: Option<Vec<f64>>,
}

/// The CSCL objective of one batch.
///
/// The auxiliary term is averaged over samples and summed over categories;
/// the contrastive term averages each category over all `B(B−1)/2` pairs and
/// sums over categories. Pairs with a zero feature contribute nothing.
pub fn cscl_loss(
    params: &ExtractorParams,
    batch: &CsclBatch<'_>,
    eta: f64,
    contrastive: bool,
    want_grad: bool,
) -> Result<CsclLoss> {
    let (c, df, d) = (params.categories, params.feature_dim, params.input_dim);
    let b = batch.inputs.rows();
    check_len(d, batch.inputs.cols())?;
    check_len(b * c, batch.labels.len())?;
    for m in [batch.instance, batch.prototype] {
        check_len(b, m.rows())?;
        check_len(c, m.cols())?;
    }
    if b == 0 {
        return Err(domain("empty batch"));
    }
    let inv_b = 1.0 / b as f64;
    let pre: Vec<Mat> = (0..b).map(|i| params.preactivations(batch.inputs.row(i))).collect();
    let feats: Vec<Mat> = pre
        .iter()
        .map(|h| {
            let mut f = h.clone();
            for v in f.as_mut_slice() {
                *v = v.max(0.0);
            }
            f
        })
        .collect();

    let mut grad = vec![0.0; params.data.len()];
    // dL/df per sample, C × D_f each.
    let mut dfeat: Vec<Mat> = (0..b).map(|_| Mat::zeros(c, df)).collect();
    let block = ExtractorParams::block_len(d, df);

    let mut acl = 0.0;
    for i in 0..b {
        for k in 0..c {
            let f = feats[i].row(k);
            let v = params.classifier(k);
            let z = dot(v, f) + params.classifier_bias(k);
            let (l1, d1) = bce_logit(z, batch.instance.get(i, k));
            let (l2, d2) = bce_logit(z, batch.prototype.get(i, k));
            acl += eta * (l1 + l2) * inv_b;
            if want_grad {
                let g = eta * (d1 + d2) * inv_b;
                let o = k * block + df * (d + 1);
                for j in 0..df {
                    grad[o + j] += g * f[j];
                }
                grad[k * block + block - 1] += g;
                let dr = dfeat[i].row_mut(k);
                for j in 0..df {
                    dr[j] += g * v[j];
                }
            }
        }
    }

    let mut con = 0.0;
    if contrastive && b >= 2 {
        let inv_pairs = 2.0 / (b * (b - 1)) as f64;
        for k in 0..c {
            let norms: Vec<f64> = feats.iter().map(|f| norm(f.row(k))).collect();
            for i in 0..b {
                if norms[i] == 0.0 {
                    continue;
                }
                for j in i + 1..b {
                    if norms[j] == 0.0 {
                        continue;
                    }
                    let (fi, fj) = (feats[i].row(k), feats[j].row(k));
                    let s = dot(fi, fj) / (norms[i] * norms[j]);
                    let both = batch.labels[i * c + k] == 1 && batch.labels[j * c + k] == 1;
                    let sign = if both { -1.0 } else { 1.0 };
                    con += (1.0 + sign * s) * inv_pairs;
                    if want_grad {
                        let g = sign * inv_pairs;
                        let nn = norms[i] * norms[j];
                        let (si, sj) = (s / (norms[i] * norms[i]), s / (norms[j] * norms[j]));
                        for t in 0..df {
                            let a = g * (fj[t] / nn - si * fi[t]);
                            let bb = g * (fi[t] / nn - sj * fj[t]);
                            let v = dfeat[i].get(k, t);
                            dfeat[i].set(k, t, v + a);
                            let v = dfeat[j].get(k, t);
                            dfeat[j].set(k, t, v + bb);
                        }
                    }
                }
            }
        }
    }

    if want_grad {
        for i in 0..b {
            let x = batch.inputs.row(i);
            for k in 0..c {
                let o = k * block;
                for t in 0..df {
                    if pre[i].get(k, t) <= 0.0 {
                        continue;
                    }
                    let g = dfeat[i].get(k, t);
                    if g == 0.0 {
                        continue;
                    }
                    let w = &mut grad[o + t * d..o + (t + 1) * d];
                    for (wi, xi) in w.iter_mut().zip(x) {
                        *wi += g * xi;
                    }
                    grad[o + df * d + t] += g;
                }
            }
        }
    }

    let total = acl + con;
    Ok(CsclLoss {
        acl,
        contrastive: con,
        total,
        grad: want_grad.then_some(grad),
    })
}

/// Result of CSCL training.
#[derive(Debug, Clone, PartialEq)]
pub struct CsclModel {
    pub params: ExtractorParams,
    /// Features of the training samples under the final parameters.
    pub bank: FeatureBank,
    /// Mean batch objective per epoch.
    pub epoch_losses: Vec<f64>,
}

fn warmup_targets(y: &[u8], alpha: f64) -> Result<Vec<f64>> {
    mlls_targets(y, alpha)
}

/// Trains the extractor on `ds` by mini-batch gradient descent.
///
/// During the first epoch both target sets are multi-label smoothed labels,
/// since untrained features carry no correlation signal. From the second
/// epoch on, every sample's instance-level targets come from positives
/// retrieved out of the running bank and its prototype-level targets from
/// K-means prototypes rebuilt at the start of the epoch. Bank entries of a
/// batch are refreshed with the features of its forward pass. Divergence is
/// reported with 1-based epoch and batch numbers.
pub fn train_cscl(ds: &Dataset, cfg: &TrainConfig) -> Result<CsclModel> {
    cfg.validate()?;
    ds.validate()?;
    let c = ds.categories();
    let mut params = ExtractorParams::init(c, ds.dim(), cfg.feature_dim, cfg.seed.derive(0))?;
    let mut bank = FeatureBank::compute(&params, ds)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut shuffle_rng = cfg.seed.derive(1).rng();
    let mut retrieve_rng = cfg.seed.derive(2).rng();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let protos = if epoch == 0 {
            None
        } else {
            Some(build_prototypes(
                &bank,
                cfg.k,
                cfg.kmeans_iters,
                cfg.seed.derive(100 + epoch as u64),
            )?)
        };
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let inputs = ds.inputs.select_rows(idx);
            let labels = ds.labels.select_rows(idx);
            let mut instance = Mat::zeros(idx.len(), c);
            let mut prototype = Mat::zeros(idx.len(), c);
            let mut queries = Vec::with_capacity(idx.len());
            for (r, &n) in idx.iter().enumerate() {
                let y = labels.row(r);
                let query = extract_features(&params, inputs.row(r))?;
                match &protos {
                    None => {
                        let t = warmup_targets(y, cfg.alpha)?;
                        instance.row_mut(r).copy_from_slice(&t);
                        prototype.row_mut(r).copy_from_slice(&t);
                    }
                    Some(protos) => {
                        let pos: Vec<usize> = (0..c).filter(|&k| y[k] == 1).collect();
                        let picks = retrieve(&bank, cfg.t, &mut retrieve_rng)?;
                        let ins_rows = instance_rows(&query, &bank, &pos, &picks)?;
                        let pro_rows = proto_rows(&query, protos, &pos)?;
                        let slot = |k: usize| pos.iter().position(|&p| p == k).unwrap_or(0);
                        let ins = soften_with(y, cfg.alpha, |k| ins_rows[slot(k)].as_slice())?;
                        let pro = soften_with(y, cfg.alpha, |k| pro_rows[slot(k)].as_slice())?;
                        instance.row_mut(r).copy_from_slice(&ins.values);
                        prototype.row_mut(r).copy_from_slice(&pro.values);
                    }
                }
                queries.push((n, query));
            }
            let batch = CsclBatch {
                inputs: &inputs,
                labels: labels.as_slice(),
                instance: &instance,
                prototype: &prototype,
            };
            let loss = cscl_loss(&params, &batch, cfg.eta, cfg.contrastive, true)?;
            let diverged = Error::Diverged {
                epoch: epoch + 1,
                batch: bi + 1,
            };
            if !loss.total.is_finite() {
                return Err(diverged);
            }
            let grad = loss.grad.expect("gradient requested");
            for (p, g) in params.data.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            if params.data.iter().any(|v| !v.is_finite()) {
                return Err(diverged);
            }
            for (n, query) in &queries {
                bank.set_sample(*n, query)?;
            }
            sum += loss.total;
            batches += 1;
        }
        epoch_losses.push(sum / batches.max(1) as f64);
    }

    let bank = FeatureBank::compute(&params, ds)?;
    Ok(CsclModel {
        params,
        bank,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check;
    use rand::Rng;

    fn random_params(c: usize, d: usize, df: usize, seed: u64) -> ExtractorParams {
        let mut rng = Seed(seed).rng();
        let len = c * ExtractorParams::block_len(d, df);
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        ExtractorParams::from_flat(c, d, df, data).unwrap()
    }

    #[test]
    fn zero_params_give_zero_features_and_half_probabilities() {
        let p = ExtractorParams::zeros(3, 4, 2).unwrap();
        let f = extract_features(&p, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(f.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(aux_classify(&p, &f).unwrap(), vec![0.5; 3]);
        assert!(extract_features(&p, &[1.0]).is_err());
    }

    #[test]
    fn identity_projection_passes_nonnegative_input() {
        let (c, d) = (2, 3);
        let mut data = vec![0.0; c * ExtractorParams::block_len(d, d)];
        let block = ExtractorParams::block_len(d, d);
        for k in 0..c {
            for i in 0..d {
                data[k * block + i * d + i] = 1.0;
            }
        }
        let p = ExtractorParams::from_flat(c, d, d, data).unwrap();
        let f = extract_features(&p, &[0.5, 0.0, 2.0]).unwrap();
        assert_eq!(f.row(0), &[0.5, 0.0, 2.0]);
        assert_eq!(f.row(1), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn classifier_hand_value_and_monotonicity() {
        let (c, d, df) = (1, 2, 2);
        let mut data = vec![0.0; ExtractorParams::block_len(d, df)];
        // v = (ln 3, 0) so v·f = ln 3 for f = (1, 0).
        data[df * (d + 1)] = libm::log(3.0);
        let p = ExtractorParams::from_flat(c, d, df, data).unwrap();
        let f = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!((aux_classify(&p, &f).unwrap()[0] - 0.75).abs() < 1e-15);
        let g = Mat::from_rows(&[vec![1.5, 0.0]]).unwrap();
        assert!(aux_classify(&p, &g).unwrap()[0] > 0.75);
    }

    #[test]
    fn pair_loss_cases() {
        let f = [1.0, 2.0, 0.5];
        assert!(contrastive_pair_loss(&f, &f, 1, 1).unwrap().abs() < 1e-15);
        assert!((contrastive_pair_loss(&f, &f, 1, 0).unwrap() - 2.0).abs() < 1e-15);
        for (a, b) in [(0, 0), (0, 1), (1, 1)] {
            assert_eq!(contrastive_pair_loss(&[1.0, 0.0], &[0.0, 3.0], a, b).unwrap(), 1.0);
        }
        assert!(contrastive_pair_loss(&[0.0, 0.0], &f[..2], 1, 1).is_err());
    }

    #[test]
    fn bank_pools_track_zero_features() {
        let labels = LabelMatrix::from_rows(&[vec![1, 0], vec![1, 1]]).unwrap();
        let flat = vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 2.0];
        let mut bank = FeatureBank::new(vec![10, 11], 2, 2, flat, labels).unwrap();
        assert_eq!(bank.pool(0), &[1]);
        assert_eq!(bank.positives(0), &[0, 1]);
        bank.set_sample(0, &Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap())
            .unwrap();
        assert_eq!(bank.pool(0), &[0, 1]);
        bank.set_sample(1, &Mat::zeros(2, 2)).unwrap();
        assert_eq!(bank.pool(0), &[0]);
        assert!(bank.pool(1).is_empty());
        assert_eq!(bank.positive_count(1), 1);
    }

    fn random_batch(b: usize, c: usize, d: usize, seed: u64) -> (Mat, Vec<u8>, Mat, Mat) {
        let mut rng = Seed(seed).rng();
        let mut x = Mat::zeros(b, d);
        for v in x.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        let labels: Vec<u8> = (0..b * c).map(|_| rng.random_range(0..2)).collect();
        let mut ins = Mat::zeros(b, c);
        let mut pro = Mat::zeros(b, c);
        for v in ins.as_mut_slice().iter_mut().chain(pro.as_mut_slice()) {
            *v = rng.random_range(0.0..1.0);
        }
        (x, labels, ins, pro)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (b, c, d, df) = (5, 3, 4, 3);
        for seed in 0..20 {
            let params = random_params(c, d, df, seed);
            let (x, labels, ins, pro) = random_batch(b, c, d, 1000 + seed);
            let batch = CsclBatch {
                inputs: &x,
                labels: &labels,
                instance: &ins,
                prototype: &pro,
            };
            for con in [false, true] {
                let an = cscl_loss(&params, &batch, 0.5, con, true).unwrap();
                let f = |theta: &[f64]| {
                    let p = ExtractorParams::from_flat(c, d, df, theta.to_vec()).unwrap();
                    cscl_loss(&p, &batch, 0.5, con, false).unwrap().total
                };
                let err = grad_check(f, params.as_flat(), an.grad.as_ref().unwrap(), 1e-6).unwrap();
                assert!(err < 1e-4, "seed {seed} contrastive {con}: {err}");
            }
        }
    }

    #[test]
    fn acl_component_matches_closed_form() {
        let params = random_params(2, 3, 2, 4);
        let (x, labels, ins, pro) = random_batch(3, 2, 3, 5);
        let batch = CsclBatch {
            inputs: &x,
            labels: &labels,
            instance: &ins,
            prototype: &pro,
        };
        let got = cscl_loss(&params, &batch, 0.5, false, false).unwrap();
        let mut want = 0.0;
        for i in 0..3 {
            let f = extract_features(&params, x.row(i)).unwrap();
            let p = aux_classify(&params, &f).unwrap();
            want += crate::losses::acl(&p, ins.row(i), pro.row(i), 0.5).unwrap() / 3.0;
        }
        assert!((got.acl - want).abs() < 1e-12);
        assert_eq!(got.contrastive, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { alpha: 0.5, ..Default::default() },
            TrainConfig { eta: 0.0, ..Default::default() },
            TrainConfig { t: 0, ..Default::default() },
            TrainConfig { k: 0, ..Default::default() },
            TrainConfig { feature_dim: 1, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
