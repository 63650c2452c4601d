//! Stage-2 multi-label classifier trained under any supervision loss.
//!
//! The model is linear by default (`p_c = sigmoid(W_c·x + b_c)`); setting
//! `hidden > 0` inserts one relu layer, which the benchmark preset uses so
//! that hard-label training is overconfident enough for calibration to matter.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correlation::SoftLabelMatrix;
use crate::datagen::{Dataset, PredictionLog};
use crate::error::{check_len, config, domain, Error, Result};
use crate::losses::{batch_loss, HardTargets, LossConfig, LossKind, Targets};
use crate::metrics::{evaluate, CalibrationReport};
use crate::numkit::{dot, sigmoid, sqrt, Mat, Seed};

/// Flat classifier parameters.
///
/// Linear layout: `W` (C × D, row-major) then `b` (C). With a hidden layer
/// of width H: `W1` (H × D), `b1` (H), `W2` (C × H), `b2` (C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrParams {
    pub input_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub data: Vec<f64>,
}

impl MlrParams {
    pub fn param_count(input_dim: usize, classes: usize, hidden: usize) -> usize {
        if hidden == 0 {
            classes * (input_dim + 1)
        } else {
            hidden * (input_dim + 1) + classes * (hidden + 1)
        }
    }

    pub fn zeros(input_dim: usize, classes: usize, hidden: usize) -> Self {
        MlrParams {
            input_dim,
            classes,
            hidden,
            data: vec![0.0; Self::param_count(input_dim, classes, hidden)],
        }
    }

    /// Zero output layer; a hidden layer starts from He-scaled Gaussians.
    pub fn init(input_dim: usize, classes: usize, hidden: usize, seed: Seed) -> Result<Self> {
        let mut p = Self::zeros(input_dim, classes, hidden);
        if hidden > 0 {
            let normal = Normal::new(0.0, sqrt(2.0 / input_dim as f64))
                .map_err(|e| domain(format!("{e}")))?;
            let mut rng = seed.rng();
            for v in &mut p.data[..hidden * input_dim] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_len(
            Self::param_count(self.input_dim, self.classes, self.hidden),
            self.data.len(),
        )?;
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier parameters"));
        }
        Ok(())
    }

    /// Width of the layer feeding the output units.
    fn top_dim(&self) -> usize {
        if self.hidden == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    fn top_offset(&self) -> usize {
        if self.hidden == 0 {
            0
        } else {
            self.hidden * (self.input_dim + 1)
        }
    }

    /// Hidden activations (relu) or the input itself for the linear model.
    fn hidden_of(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.hidden == 0 {
            out.extend_from_slice(x);
            return;
        }
        let d = self.input_dim;
        let (w, b) = self.data[..self.hidden * (d + 1)].split_at(self.hidden * d);
        for j in 0..self.hidden {
            out.push((dot(&w[j * d..(j + 1) * d], x) + b[j]).max(0.0));
        }
    }

    fn logits_from_hidden(&self, h: &[f64], out: &mut [f64]) {
        let t = self.top_dim();
        let o = self.top_offset();
        let (w, b) = self.data[o..].split_at(self.classes * t);
        for (c, z) in out.iter_mut().enumerate() {
            *z = dot(&w[c * t..(c + 1) * t], h) + b[c];
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim, x.len())?;
        let mut h = Vec::new();
        self.hidden_of(x, &mut h);
        let mut z = vec![0.0; self.classes];
        self.logits_from_hidden(&h, &mut z);
        Ok(z)
    }
}

/// Per-class probabilities for one input.
pub fn predict(params: &MlrParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(params.logits(x)?.into_iter().map(sigmoid).collect())
}

/// Predictions for every sample of `ds`.
pub fn predict_log(params: &MlrParams, ds: &Dataset) -> Result<PredictionLog> {
    check_len(params.classes, ds.categories())?;
    let mut probs = Mat::zeros(ds.len(), params.classes);
    for r in 0..ds.len() {
        let p = predict(params, ds.inputs.row(r))?;
        probs.row_mut(r).copy_from_slice(&p);
    }
    PredictionLog::new(ds.ids.clone(), probs, ds.labels.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlrHParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hidden-layer width; 0 keeps the model linear.
    pub hidden: usize,
    /// Multiply the rate by `decay_factor` every `decay_every` epochs (0 = off).
    pub decay_every: usize,
    pub decay_factor: f64,
    pub test_fraction: f64,
    /// Seed of the train/test split, shared by every run on a dataset.
    pub split_seed: Seed,
    pub bins: usize,
    pub adaptive_bins: usize,
}

impl Default for MlrHParams {
    fn default() -> Self {
        MlrHParams {
            learning_rate: 0.1,
            batch_size: 64,
            epochs: 30,
            hidden: 0,
            decay_every: 0,
            decay_factor: 0.1,
            test_fraction: 0.2,
            split_seed: Seed(0),
            bins: 15,
            adaptive_bins: 15,
        }
    }
}

impl MlrHParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config("batch size must be positive"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(config("test fraction must lie in (0, 1)"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(config("decay factor must lie in (0, 1]"));
        }
        if self.bins == 0 || self.adaptive_bins == 0 {
            return Err(config("bin counts must be positive"));
        }
        Ok(())
    }

    fn rate_at(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 {
            self.learning_rate
        } else {
            let steps = (epoch / self.decay_every) as i32;
            self.learning_rate * libm::pow(self.decay_factor, steps as f64)
        }
    }
}

/// Seeded shuffle split into sorted (train, test) index lists.
pub fn split(n: usize, test_fraction: f64, seed: Seed) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(config("test fraction must lie in (0, 1)"));
    }
    let n_test = libm::round(n as f64 * test_fraction) as usize;
    if n_test == 0 || n_test == n {
        return Err(domain(format!("cannot split {n} samples with test fraction {test_fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed.rng());
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// One stage-2 training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Display name of the loss (kind or ablation label).
    pub loss: String,
    pub kind: LossKind,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub report: CalibrationReport,
    /// Only filled on request so that run files stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

/// Frozen correlation-softened targets; deliberately holds no hard labels.
struct SoftOnly<'a> {
    instance: &'a [f64],
    prototype: &'a [f64],
    classes: usize,
}

impl Targets for SoftOnly<'_> {
    fn hard(&self, _: usize, _: usize) -> u8 {
        unreachable!("correlation-softened training never reads hard labels")
    }
    fn instance(&self, row: usize, class: usize) -> Option<f64> {
        Some(self.instance[row * self.classes + class])
    }
    fn prototype(&self, row: usize, class: usize) -> Option<f64> {
        Some(self.prototype[row * self.classes + class])
    }
}

/// Loss of `params` on a batch and, optionally, its parameter gradient.
pub fn batch_objective<T: Targets + ?Sized>(
    params: &MlrParams,
    inputs: &Mat,
    targets: &T,
    loss: &LossConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_len(params.input_dim, inputs.cols())?;
    let b = inputs.rows();
    let c = params.classes;
    let t = params.top_dim();
    let mut hidden = Mat::zeros(b, t);
    let mut logits = Mat::zeros(b, c);
    let mut h = Vec::with_capacity(t);
    for i in 0..b {
        params.hidden_of(inputs.row(i), &mut h);
        hidden.row_mut(i).copy_from_slice(&h);
        params.logits_from_hidden(&h, logits.row_mut(i));
    }
    let value = batch_loss(loss, &logits, targets, want_grad)?;
    if !want_grad {
        return Ok((value.total, None));
    }
    let dz = value.grad.expect("gradient requested");
    let mut grad = vec![0.0; params.data.len()];
    let o = params.top_offset();
    {
        let (gw, gb) = grad[o..].split_at_mut(c * t);
        for i in 0..b {
            let hi = hidden.row(i);
            for k in 0..c {
                let g = dz.get(i, k);
                if g == 0.0 {
                    continue;
                }
                gb[k] += g;
                for (w, &x) in gw[k * t..(k + 1) * t].iter_mut().zip(hi) {
                    *w += g * x;
                }
            }
        }
    }
    if params.hidden > 0 {
        let d = params.input_dim;
        let w2 = &params.data[o..o + c * t];
        let (gw1, rest) = grad.split_at_mut(t * d);
        let gb1 = &mut rest[..t];
        let mut dh = vec![0.0; t];
        for i in 0..b {
            dh.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..c {
                let g = dz.get(i, k);
                if g == 0.0 {
                    continue;
                }
                for (v, &w) in dh.iter_mut().zip(&w2[k * t..(k + 1) * t]) {
                    *v += g * w;
                }
            }
            let x = inputs.row(i);
            let hi = hidden.row(i);
            for j in 0..t {
                if hi[j] <= 0.0 || dh[j] == 0.0 {
                    continue;
                }
                gb1[j] += dh[j];
                for (w, &xv) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *w += dh[j] * xv;
                }
            }
        }
    }
    Ok((value.total, Some(grad)))
}

/// Aligned soft-label rows for the given ids.
fn soft_block(soft: &SoftLabelMatrix, ids: &[u64], classes: usize) -> Result<Vec<f64>> {
    check_len(classes, soft.values.cols())?;
    let index: BTreeMap<u64, usize> = soft.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut out = Vec::with_capacity(ids.len() * classes);
    for id in ids {
        let r = index
            .get(id)
            .ok_or_else(|| config(format!("no {} soft labels for sample {id}", soft.kind.tag())))?;
        out.extend_from_slice(soft.values.row(*r));
    }
    Ok(out)
}

/// Trains on `train` and evaluates on `test`.
///
/// `dclr` requires the (instance, prototype) soft-label pair, which must
/// cover every training id. For `dwbl` without class counts the counts of the
/// training labels are used.
pub fn fit(
    train: &Dataset,
    test: &Dataset,
    loss: &LossConfig,
    soft: Option<(&SoftLabelMatrix, &SoftLabelMatrix)>,
    hp: &MlrHParams,
    seed: Seed,
) -> Result<(MlrParams, RunRecord)> {
    hp.validate()?;
    let mut loss = loss.clone();
    if loss.kind == LossKind::Dwbl && loss.class_counts.is_empty() {
        loss.class_counts = train.labels.column_counts();
    }
    loss.validate()?;
    let c = train.categories();
    check_len(c, test.categories())?;
    check_len(train.dim(), test.dim())?;
    let soft_blocks = match (loss.kind, soft) {
        (LossKind::Dclr, None) => {
            return Err(config("dclr needs instance- and prototype-level soft labels"))
        }
        (LossKind::Dclr, Some((ins, pro))) => Some((
            soft_block(ins, &train.ids, c)?,
            soft_block(pro, &train.ids, c)?,
        )),
        _ => None,
    };

    let mut params = MlrParams::init(train.dim(), c, hp.hidden, seed.derive(0))?;
    let mut rng = seed.derive(1).rng();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    let mut labels = Vec::with_capacity(hp.batch_size * c);
    let mut ins = Vec::new();
    let mut pro = Vec::new();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let lr = hp.rate_at(epoch);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(hp.batch_size).enumerate() {
            let inputs = train.inputs.select_rows(idx);
            let result = match &soft_blocks {
                Some((ib, pb)) => {
                    ins.clear();
                    pro.clear();
                    for &r in idx {
                        ins.extend_from_slice(&ib[r * c..(r + 1) * c]);
                        pro.extend_from_slice(&pb[r * c..(r + 1) * c]);
                    }
                    let t = SoftOnly {
                        instance: &ins,
                        prototype: &pro,
                        classes: c,
                    };
                    batch_objective(&params, &inputs, &t, &loss, true)
                }
                None => {
                    labels.clear();
                    for &r in idx {
                        labels.extend_from_slice(train.labels.row(r));
                    }
                    let t = HardTargets {
                        labels: &labels,
                        classes: c,
                    };
                    batch_objective(&params, &inputs, &t, &loss, true)
                }
            };
            let diverged = Error::Diverged {
                epoch: epoch + 1,
                batch: bi + 1,
            };
            let (value, grad) = match result {
                Err(Error::NonFinite(_)) => return Err(diverged),
                other => other?,
            };
            for (p, g) in params.data.iter_mut().zip(grad.expect("gradient requested")) {
                *p -= lr * g;
            }
            if params.data.iter().any(|v| !v.is_finite()) {
                return Err(diverged);
            }
            sum += value;
            batches += 1;
        }
        epoch_losses.push(sum / batches.max(1) as f64);
    }

    let log = predict_log(&params, test)?;
    let report = evaluate(&log, hp.bins, hp.adaptive_bins)?;
    let record = RunRecord {
        loss: loss.display_name(),
        kind: loss.kind,
        seed: seed.0,
        epoch_losses,
        report,
        wall_clock_seconds: None,
    };
    Ok((params, record))
}

/// Splits `ds` with `hp.split_seed`, then trains and evaluates.
pub fn train_mlr(
    ds: &Dataset,
    loss: &LossConfig,
    soft: Option<(&SoftLabelMatrix, &SoftLabelMatrix)>,
    hp: &MlrHParams,
    seed: Seed,
) -> Result<(MlrParams, RunRecord)> {
    hp.validate()?;
    let (train, test) = split(ds.len(), hp.test_fraction, hp.split_seed)?;
    fit(&ds.subset(&train), &ds.subset(&test), loss, soft, hp, seed)
}
