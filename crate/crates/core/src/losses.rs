//! Supervision losses: binary cross-entropy with hard, smoothed or
//! correlation-softened targets, plus the calibration baselines.
//!
//! Every multi-label loss treats the batch as a pool of independent
//! (sample, class) binary predictions with `p = sigmoid(z)`. Batch values are
//! per-sample sums over classes averaged over the batch; auxiliary calibration
//! terms are computed over the pooled batch and scaled by `aux_weight`.
//! Gradients are with respect to the logits.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, config, domain, Error, Result};
use crate::numkit::{exp, ln, powf, sigmoid, sqrt, Mat};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `−[t·ln p + (1−t)·ln(1−p)]` and its derivative with respect to the logit.
#[inline]
pub(crate) fn bce_logit(z: f64, t: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let pc = clamp_prob(p);
    let loss = -(t * ln(pc) + (1.0 - t) * ln(1.0 - pc));
    let dz = if p == pc { p - t } else { 0.0 };
    (loss, dz)
}

/// Binary cross-entropy summed over classes; accepts soft targets.
pub fn bce(p: &[f64], y: &[f64]) -> Result<f64> {
    check_len(p.len(), y.len())?;
    let mut s = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = clamp_prob(pi);
        s -= yi * ln(pc) + (1.0 - yi) * ln(1.0 - pc);
    }
    Ok(s)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(domain(format!("alpha = {alpha} outside [0, 1)")));
    }
    Ok(())
}

/// Single-label smoothing: positives `1 − α`, negatives `α / (C − 1)`.
pub fn ls_targets(y: &[u8], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let c = y.len();
    if c < 2 {
        return Err(domain("label smoothing needs at least two classes"));
    }
    let neg = alpha / (c - 1) as f64;
    Ok(y.iter().map(|&v| if v == 1 { 1.0 - alpha } else { neg }).collect())
}

/// Multi-label smoothing: positives `1 − α`, negatives `α·M / (C − M)` where
/// `M` is the number of positives in the row.
pub fn mlls_targets(y: &[u8], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let c = y.len();
    let m = y.iter().filter(|&&v| v == 1).count();
    if m == c {
        return Err(domain("multi-label smoothing is undefined when every class is positive"));
    }
    let neg = alpha * m as f64 / (c - m) as f64;
    Ok(y.iter().map(|&v| if v == 1 { 1.0 - alpha } else { neg }).collect())
}

/// Probability assigned to the true outcome.
#[inline]
fn p_true(p: f64, y: u8) -> f64 {
    if y == 1 {
        p
    } else {
        1.0 - p
    }
}

/// `−(1−q)^γ ln q` and its derivative in `q`.
#[inline]
fn focal_q(q: f64, gamma: f64) -> (f64, f64) {
    let one_m = 1.0 - q;
    let m = if gamma == 0.0 { 1.0 } else { powf(one_m, gamma) };
    let loss = -m * ln(q);
    let dm = if gamma == 0.0 {
        0.0
    } else {
        -gamma * powf(one_m, gamma - 1.0)
    };
    (loss, -dm * ln(q) - m / q)
}

/// Focal loss summed over classes.
pub fn focal(p: &[f64], y: &[u8], gamma: f64) -> Result<f64> {
    check_len(p.len(), y.len())?;
    if !(gamma >= 0.0) {
        return Err(domain(format!("gamma = {gamma} must be nonnegative")));
    }
    Ok(p.iter()
        .zip(y)
        .map(|(&pi, &yi)| focal_q(clamp_prob(p_true(pi, yi)), gamma).0)
        .sum())
}

/// Sample-dependent focal schedule: `gamma_low_conf` while `p_t < threshold`,
/// `gamma_high_conf` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlsdSchedule {
    pub threshold: f64,
    pub gamma_low_conf: f64,
    pub gamma_high_conf: f64,
}

impl Default for FlsdSchedule {
    fn default() -> Self {
        FlsdSchedule {
            threshold: 0.2,
            gamma_low_conf: 5.0,
            gamma_high_conf: 3.0,
        }
    }
}

impl FlsdSchedule {
    pub fn gamma(&self, p_t: f64) -> f64 {
        if p_t < self.threshold {
            self.gamma_low_conf
        } else {
            self.gamma_high_conf
        }
    }
}

/// Focal loss with the sample-dependent gamma schedule.
pub fn flsd(p: &[f64], y: &[u8], schedule: &FlsdSchedule) -> Result<f64> {
    check_len(p.len(), y.len())?;
    Ok(p.iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let q = clamp_prob(p_true(pi, yi));
            focal_q(q, schedule.gamma(q)).0
        })
        .sum())
}

/// Confidence and correctness of a pooled binary prediction.
#[inline]
pub fn confidence(p: f64) -> f64 {
    if p > 0.5 {
        p
    } else {
        1.0 - p
    }
}

#[inline]
pub fn correct(p: f64, y: u8) -> bool {
    (p > 0.5) == (y == 1)
}

fn check_batch(p: &Mat, y: &[u8]) -> Result<()> {
    check_len(p.rows() * p.cols(), y.len())?;
    if p.rows() == 0 || p.cols() == 0 {
        return Err(domain("empty batch"));
    }
    Ok(())
}

/// `|mean confidence − mean accuracy|` over the pooled batch.
///
/// `y` is the row-major label block matching `p`.
pub fn dca_aux(p: &Mat, y: &[u8]) -> Result<f64> {
    check_batch(p, y)?;
    let m = y.len() as f64;
    let mut conf = 0.0;
    let mut acc = 0.0;
    for (&pi, &yi) in p.as_slice().iter().zip(y) {
        conf += confidence(pi);
        acc += correct(pi, yi) as u8 as f64;
    }
    Ok((conf / m - acc / m).abs())
}

/// Kernel terms over the pooled predictions for a Laplacian kernel
/// `exp(−|r − r'| / width)`: for each prediction `l`,
/// `Σ_j e_j k(r_l, r_j)` and `Σ_j e_j k(r_l, r_j)·sgn(r_l − r_j)`.
///
/// Runs in O(m log m) by sweeping sorted confidences; the running sums are
/// rescaled by factors ≤ 1 so no exponent can overflow.
fn laplace_sums(r: &[f64], e: &[f64], width: f64) -> (Vec<f64>, Vec<f64>) {
    let m = r.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
    // Groups of equal confidence.
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=m {
        if i == m || r[order[i]] != r[order[start]] {
            groups.push((start, i));
            start = i;
        }
    }
    let g = groups.len();
    let value = |gi: usize| r[order[groups[gi].0]];
    let mass: Vec<f64> = groups
        .iter()
        .map(|&(a, b)| order[a..b].iter().map(|&i| e[i]).sum())
        .collect();
    let mut lower = vec![0.0; g];
    for gi in 1..g {
        lower[gi] = (lower[gi - 1] + mass[gi - 1]) * exp(-(value(gi) - value(gi - 1)) / width);
    }
    let mut upper = vec![0.0; g];
    for gi in (0..g.saturating_sub(1)).rev() {
        upper[gi] = (upper[gi + 1] + mass[gi + 1]) * exp(-(value(gi + 1) - value(gi)) / width);
    }
    let mut total = vec![0.0; m];
    let mut signed = vec![0.0; m];
    for (gi, &(a, b)) in groups.iter().enumerate() {
        for &i in &order[a..b] {
            total[i] = lower[gi] + mass[gi] + upper[gi];
            signed[i] = lower[gi] - upper[gi];
        }
    }
    (total, signed)
}

fn mmce_parts(conf: &[f64], hits: &[f64], width: f64) -> (f64, Vec<f64>) {
    let m = conf.len() as f64;
    let e: Vec<f64> = hits.iter().zip(conf).map(|(c, r)| c - r).collect();
    let (total, signed) = laplace_sums(conf, &e, width);
    let mut s = 0.0;
    for (ei, ti) in e.iter().zip(&total) {
        s += ei * ti;
    }
    let s = (s / (m * m)).max(0.0);
    let value = sqrt(s);
    let mut grad = vec![0.0; conf.len()];
    if value > 1e-12 {
        for l in 0..conf.len() {
            let ds = 2.0 / (m * m) * (-total[l] - e[l] * signed[l] / width);
            grad[l] = ds / (2.0 * value);
        }
    }
    (value, grad)
}

/// Maximum mean calibration error with a Laplacian kernel:
/// `sqrt(Σ_ij (c_i − r_i)(c_j − r_j) k(r_i, r_j) / m²)`.
pub fn mmce_aux(p: &Mat, y: &[u8], width: f64) -> Result<f64> {
    check_batch(p, y)?;
    if !(width > 0.0) {
        return Err(domain(format!("kernel width {width} must be positive")));
    }
    if y.len() < 2 {
        return Err(domain("MMCE needs at least two predictions"));
    }
    let conf: Vec<f64> = p.as_slice().iter().map(|&v| confidence(v)).collect();
    let hits: Vec<f64> = p
        .as_slice()
        .iter()
        .zip(y)
        .map(|(&v, &t)| correct(v, t) as u8 as f64)
        .collect();
    Ok(mmce_parts(&conf, &hits, width).0)
}

/// `(1/C)·Σ_c |mean_i p_ic − mean_i y_ic|`.
pub fn mdca_aux(p: &Mat, y: &[u8]) -> Result<f64> {
    check_batch(p, y)?;
    let (b, c) = (p.rows(), p.cols());
    let mut s = 0.0;
    for k in 0..c {
        let mut dp = 0.0;
        for i in 0..b {
            dp += p.get(i, k) - y[i * c + k] as f64;
        }
        s += (dp / b as f64).abs();
    }
    Ok(s / c as f64)
}

/// `Σ_c max(0, max_k z_k − z_c − margin)`.
pub fn margin_penalty(logits: &[f64], margin: f64) -> f64 {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logits.iter().map(|&z| (top - z - margin).max(0.0)).sum()
}

/// Margin-based label smoothing on one sample.
pub fn mbls(logits: &[f64], y: &[f64], margin: f64, weight: f64) -> Result<f64> {
    if !(margin >= 0.0) {
        return Err(domain("margin must be nonnegative"));
    }
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(bce(&p, y)? + weight * margin_penalty(logits, margin))
}

/// Class-balanced weights `(1−β)/(1−β^{n_c})`, rescaled to mean 1.
pub fn dwbl_weights(class_counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(domain(format!("beta = {beta} outside (0, 1)")));
    }
    if class_counts.is_empty() {
        return Err(domain("class counts are empty"));
    }
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(domain(format!("class {c} has zero count")));
    }
    let raw: Vec<f64> = class_counts
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - powf(beta, n as f64)))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// `−w·(1−q)^q·ln q` and its derivative in `q`.
#[inline]
fn dwbl_q(q: f64, w: f64) -> (f64, f64) {
    let one_m = 1.0 - q;
    let m = powf(one_m, q);
    let dm = m * (ln(one_m) - q / one_m);
    (-w * m * ln(q), -w * (dm * ln(q) + m / q))
}

/// Dynamically weighted balanced loss summed over classes.
pub fn dwbl(p: &[f64], y: &[u8], class_counts: &[usize], beta: f64) -> Result<f64> {
    check_len(p.len(), y.len())?;
    check_len(p.len(), class_counts.len())?;
    let w = dwbl_weights(class_counts, beta)?;
    Ok(p.iter()
        .zip(y)
        .zip(&w)
        .map(|((&pi, &yi), &wi)| dwbl_q(clamp_prob(p_true(pi, yi)), wi).0)
        .sum())
}

/// `η·(bce(p, ŷ) + bce(p, ỹ))` with instance- and prototype-level targets.
pub fn dclr_cls(p: &[f64], y_ins: &[f64], y_pro: &[f64], eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(domain("eta must be positive"));
    }
    Ok(eta * (bce(p, y_ins)? + bce(p, y_pro)?))
}

/// The auxiliary classification loss has the same form as [`dclr_cls`],
/// applied to per-category classifier outputs.
pub fn acl(p_hat: &[f64], y_ins: &[f64], y_pro: &[f64], eta: f64) -> Result<f64> {
    dclr_cls(p_hat, y_ins, y_pro, eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Nll,
    Ls,
    Mlls,
    Fl,
    Flsd,
    Dca,
    Mmce,
    Mdca,
    Mbls,
    Dwbl,
    Dclr,
}

impl LossKind {
    pub const ALL: [LossKind; 11] = [
        LossKind::Nll,
        LossKind::Ls,
        LossKind::Mlls,
        LossKind::Fl,
        LossKind::Flsd,
        LossKind::Dca,
        LossKind::Mmce,
        LossKind::Mdca,
        LossKind::Mbls,
        LossKind::Dwbl,
        LossKind::Dclr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Nll => "nll",
            LossKind::Ls => "ls",
            LossKind::Mlls => "mlls",
            LossKind::Fl => "fl",
            LossKind::Flsd => "flsd",
            LossKind::Dca => "dca",
            LossKind::Mmce => "mmce",
            LossKind::Mdca => "mdca",
            LossKind::Mbls => "mbls",
            LossKind::Dwbl => "dwbl",
            LossKind::Dclr => "dclr",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| config(format!("unknown loss kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Optional display label, e.g. to tell ablation variants apart.
    pub label: Option<String>,
    pub alpha: f64,
    pub gamma: f64,
    pub flsd: FlsdSchedule,
    pub margin: f64,
    pub kernel_width: f64,
    pub aux_weight: f64,
    pub beta: f64,
    pub class_counts: Vec<usize>,
    pub eta: f64,
    pub use_instance: bool,
    pub use_prototype: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::new(LossKind::Nll)
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig {
            kind,
            label: None,
            alpha: 0.05,
            gamma: 2.0,
            flsd: FlsdSchedule::default(),
            margin: 10.0,
            kernel_width: 0.4,
            aux_weight: if kind == LossKind::Mbls { 0.1 } else { 1.0 },
            beta: 0.9999,
            class_counts: Vec::new(),
            eta: 0.5,
            use_instance: true,
            use_prototype: true,
        }
    }

    /// Name used for run files and table rows.
    pub fn display_name(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LossKind::Ls | LossKind::Mlls => check_alpha(self.alpha)?,
            LossKind::Fl if !(self.gamma >= 0.0) => {
                return Err(config("focal gamma must be nonnegative"))
            }
            LossKind::Flsd
                if !(self.flsd.gamma_low_conf >= 0.0 && self.flsd.gamma_high_conf >= 0.0) =>
            {
                return Err(config("flsd gammas must be nonnegative"))
            }
            LossKind::Mmce if !(self.kernel_width > 0.0) => {
                return Err(config("mmce kernel width must be positive"))
            }
            LossKind::Mbls if !(self.margin >= 0.0) => {
                return Err(config("mbls margin must be nonnegative"))
            }
            LossKind::Dwbl => {
                dwbl_weights(&self.class_counts, self.beta).map_err(|e| config(format!("dwbl: {e}")))?;
            }
            LossKind::Dclr => {
                if !(self.eta > 0.0) {
                    return Err(config("dclr eta must be positive"));
                }
                if !(self.use_instance || self.use_prototype) {
                    return Err(config("dclr needs at least one of the instance/prototype terms"));
                }
            }
            _ => {}
        }
        if !(self.aux_weight >= 0.0) {
            return Err(config("aux_weight must be nonnegative"));
        }
        Ok(())
    }
}

/// Supervision available to a loss for a batch.
///
/// Correlation-softened losses must only consult the soft targets; the
/// indirection makes that checkable.
pub trait Targets {
    fn hard(&self, row: usize, class: usize) -> u8;
    fn instance(&self, row: usize, class: usize) -> Option<f64>;
    fn prototype(&self, row: usize, class: usize) -> Option<f64>;
}

/// Plain hard labels (row-major block).
pub struct HardTargets<'a> {
    pub labels: &'a [u8],
    pub classes: usize,
}

impl Targets for HardTargets<'_> {
    fn hard(&self, row: usize, class: usize) -> u8 {
        self.labels[row * self.classes + class]
    }
    fn instance(&self, _: usize, _: usize) -> Option<f64> {
        None
    }
    fn prototype(&self, _: usize, _: usize) -> Option<f64> {
        None
    }
}

/// Hard labels plus soft instance/prototype target blocks (row-major).
pub struct SoftTargets<'a> {
    pub labels: &'a [u8],
    pub instance: &'a [f64],
    pub prototype: &'a [f64],
    pub classes: usize,
}

impl Targets for SoftTargets<'_> {
    fn hard(&self, row: usize, class: usize) -> u8 {
        self.labels[row * self.classes + class]
    }
    fn instance(&self, row: usize, class: usize) -> Option<f64> {
        self.instance.get(row * self.classes + class).copied()
    }
    fn prototype(&self, row: usize, class: usize) -> Option<f64> {
        self.prototype.get(row * self.classes + class).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
    /// Gradient with respect to the logits (same shape as the batch).
    pub grad: Option<Mat>,
}

fn hard_row<T: Targets + ?Sized>(t: &T, row: usize, classes: usize) -> Vec<u8> {
    (0..classes).map(|c| t.hard(row, c)).collect()
}

/// Loss of a batch of logits under `cfg`, optionally with the logit gradient.
pub fn batch_loss<T: Targets + ?Sized>(
    cfg: &LossConfig,
    logits: &Mat,
    targets: &T,
    want_grad: bool,
) -> Result<LossValue> {
    let (b, c) = (logits.rows(), logits.cols());
    if b == 0 || c == 0 {
        return Err(domain("empty batch"));
    }
    let inv_b = 1.0 / b as f64;
    let mut grad = Mat::zeros(b, c);
    let mut components: Vec<(&'static str, f64)> = Vec::new();
    let probs: Vec<f64> = logits.as_slice().iter().map(|&z| sigmoid(z)).collect();

    // Per-element target for the BCE-family kinds.
    let bce_family = |targets_of: &mut dyn FnMut(usize) -> Result<Vec<f64>>,
                      grad: &mut Mat,
                      scale: f64|
     -> Result<f64> {
        let mut s = 0.0;
        for i in 0..b {
            let t = targets_of(i)?;
            for k in 0..c {
                let (l, dz) = bce_logit(logits.get(i, k), t[k]);
                s += l;
                let g = grad.get(i, k);
                grad.set(i, k, g + scale * dz * inv_b);
            }
        }
        Ok(scale * s * inv_b)
    };

    match cfg.kind {
        LossKind::Nll | LossKind::Dca | LossKind::Mmce | LossKind::Mdca | LossKind::Mbls => {
            let v = bce_family(
                &mut |i| Ok(hard_row(targets, i, c).iter().map(|&v| v as f64).collect()),
                &mut grad,
                1.0,
            )?;
            components.push(("bce", v));
        }
        LossKind::Ls => {
            let v = bce_family(&mut |i| ls_targets(&hard_row(targets, i, c), cfg.alpha), &mut grad, 1.0)?;
            components.push(("bce_ls", v));
        }
        LossKind::Mlls => {
            let v = bce_family(&mut |i| mlls_targets(&hard_row(targets, i, c), cfg.alpha), &mut grad, 1.0)?;
            components.push(("bce_mlls", v));
        }
        LossKind::Fl | LossKind::Flsd | LossKind::Dwbl => {
            let weights = if cfg.kind == LossKind::Dwbl {
                check_len(c, cfg.class_counts.len())?;
                dwbl_weights(&cfg.class_counts, cfg.beta)?
            } else {
                Vec::new()
            };
            let mut s = 0.0;
            for i in 0..b {
                for k in 0..c {
                    let y = targets.hard(i, k);
                    let p = probs[i * c + k];
                    let q_raw = p_true(p, y);
                    let q = clamp_prob(q_raw);
                    let (l, dq) = match cfg.kind {
                        LossKind::Fl => focal_q(q, cfg.gamma),
                        LossKind::Flsd => focal_q(q, cfg.flsd.gamma(q)),
                        _ => dwbl_q(q, weights[k]),
                    };
                    s += l;
                    if q == q_raw {
                        let sign = if y == 1 { 1.0 } else { -1.0 };
                        grad.set(i, k, dq * sign * p * (1.0 - p) * inv_b);
                    }
                }
            }
            components.push((cfg.kind.name(), s * inv_b));
        }
        LossKind::Dclr => {
            if !(cfg.eta > 0.0) {
                return Err(config("dclr eta must be positive"));
            }
            let mut ins_sum = 0.0;
            let mut pro_sum = 0.0;
            for i in 0..b {
                for k in 0..c {
                    let z = logits.get(i, k);
                    let mut g = 0.0;
                    if cfg.use_instance {
                        let t = targets
                            .instance(i, k)
                            .ok_or_else(|| config("dclr requires instance-level soft labels"))?;
                        let (l, dz) = bce_logit(z, t);
                        ins_sum += l;
                        g += dz;
                    }
                    if cfg.use_prototype {
                        let t = targets
                            .prototype(i, k)
                            .ok_or_else(|| config("dclr requires prototype-level soft labels"))?;
                        let (l, dz) = bce_logit(z, t);
                        pro_sum += l;
                        g += dz;
                    }
                    grad.set(i, k, cfg.eta * g * inv_b);
                }
            }
            if cfg.use_instance {
                components.push(("ins", cfg.eta * ins_sum * inv_b));
            }
            if cfg.use_prototype {
                components.push(("pro", cfg.eta * pro_sum * inv_b));
            }
        }
    }

    // Auxiliary calibration terms over the pooled batch.
    let w = cfg.aux_weight;
    match cfg.kind {
        LossKind::Dca | LossKind::Mmce => {
            let m = (b * c) as f64;
            let conf: Vec<f64> = probs.iter().map(|&p| confidence(p)).collect();
            let hits: Vec<f64> = (0..b * c)
                .map(|j| correct(probs[j], targets.hard(j / c, j % c)) as u8 as f64)
                .collect();
            let dconf = |j: usize| {
                let p = probs[j];
                let d = p * (1.0 - p);
                if p > 0.5 {
                    d
                } else {
                    -d
                }
            };
            if cfg.kind == LossKind::Dca {
                let gap = conf.iter().sum::<f64>() / m - hits.iter().sum::<f64>() / m;
                components.push(("dca", w * gap.abs()));
                let sign = if gap > 0.0 {
                    1.0
                } else if gap < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                for j in 0..b * c {
                    let g = grad.as_slice()[j];
                    grad.as_mut_slice()[j] = g + w * sign * dconf(j) / m;
                }
            } else {
                if !(cfg.kernel_width > 0.0) {
                    return Err(config("mmce kernel width must be positive"));
                }
                let (v, dr) = mmce_parts(&conf, &hits, cfg.kernel_width);
                components.push(("mmce", w * v));
                for j in 0..b * c {
                    let g = grad.as_slice()[j];
                    grad.as_mut_slice()[j] = g + w * dr[j] * dconf(j);
                }
            }
        }
        LossKind::Mdca => {
            let mut s = 0.0;
            for k in 0..c {
                let mut dp = 0.0;
                for i in 0..b {
                    dp += probs[i * c + k] - targets.hard(i, k) as f64;
                }
                let gap = dp * inv_b;
                s += gap.abs();
                let sign = if gap > 0.0 {
                    1.0
                } else if gap < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                for i in 0..b {
                    let p = probs[i * c + k];
                    let g = grad.get(i, k);
                    grad.set(i, k, g + w * sign * p * (1.0 - p) * inv_b / c as f64);
                }
            }
            components.push(("mdca", w * s / c as f64));
        }
        LossKind::Mbls => {
            let mut s = 0.0;
            for i in 0..b {
                let row = logits.row(i);
                let mut top = 0;
                for k in 1..c {
                    if row[k] > row[top] {
                        top = k;
                    }
                }
                for k in 0..c {
                    let h = row[top] - row[k] - cfg.margin;
                    if h > 0.0 {
                        s += h;
                        let g = grad.get(i, k);
                        grad.set(i, k, g - w * inv_b);
                        let g = grad.get(i, top);
                        grad.set(i, top, g + w * inv_b);
                    }
                }
            }
            components.push(("margin", w * s * inv_b));
        }
        _ => {}
    }

    let total: f64 = components.iter().map(|(_, v)| v).sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(LossValue {
        total,
        components,
        grad: want_grad.then_some(grad),
    })
}
