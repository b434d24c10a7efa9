//! Bag aggregation, bag-level binary cross-entropy and the uncertainty
//! weighted loss, with analytic gradients.
//!
//! Shapes follow the convention `rows = instances`, `columns = classes`.
//! Every class is pooled independently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Max,
    Mean,
    Lse,
}

impl std::fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolingKind::Max => "max",
            PoolingKind::Mean => "mean",
            PoolingKind::Lse => "lse",
        })
    }
}

/// Aggregation function and its sharpness `r` (ignored by max pooling).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub kind: PoolingKind,
    pub r: f64,
}

impl PoolingConfig {
    pub fn new(kind: PoolingKind, r: f64) -> Result<Self> {
        let cfg = Self { kind, r };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn max() -> Self {
        Self {
            kind: PoolingKind::Max,
            r: 1.0,
        }
    }

    pub fn mean(r: f64) -> Self {
        Self {
            kind: PoolingKind::Mean,
            r,
        }
    }

    pub fn lse(r: f64) -> Self {
        Self {
            kind: PoolingKind::Lse,
            r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::Config(format!(
                "pooling sharpness r must be positive, got {}",
                self.r
            )));
        }
        Ok(())
    }
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self::max()
    }
}

/// How the raw uncertainty output becomes the log-variance `v = log σ²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogVarTransform {
    /// `v = softplus(raw) = log(1 + exp(raw))`, so `v >= 0`.
    Softplus,
    /// `v = raw`.
    Identity,
    /// `v = 0` regardless of the raw output (unit temperature).
    Zero,
}

impl LogVarTransform {
    pub fn apply(&self, raw: f64) -> f64 {
        match self {
            LogVarTransform::Softplus => softplus(raw),
            LogVarTransform::Identity => raw,
            LogVarTransform::Zero => 0.0,
        }
    }

    pub fn derivative(&self, raw: f64) -> f64 {
        match self {
            LogVarTransform::Softplus => sigmoid(raw),
            LogVarTransform::Identity => 1.0,
            LogVarTransform::Zero => 0.0,
        }
    }
}

/// Loss configuration shared by training and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MilConfig {
    pub pooling: PoolingConfig,
    /// Use the uncertainty-weighted loss instead of plain binary cross-entropy.
    pub uncertainty: bool,
    pub log_var: LogVarTransform,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            pooling: PoolingConfig::max(),
            uncertainty: false,
            log_var: LogVarTransform::Softplus,
        }
    }
}

/// Multi-label bag annotation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BagLabel {
    pub y: Vec<bool>,
}

impl BagLabel {
    pub fn new(y: Vec<bool>) -> Self {
        Self { y }
    }

    pub fn empty(num_classes: usize) -> Self {
        Self {
            y: vec![false; num_classes],
        }
    }

    pub fn from_classes(num_classes: usize, classes: &[usize]) -> Self {
        let mut label = Self::empty(num_classes);
        for &c in classes {
            label.y[c] = true;
        }
        label
    }

    pub fn num_classes(&self) -> usize {
        self.y.len()
    }

    pub fn is_background(&self) -> bool {
        !self.y.iter().any(|&v| v)
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.y.iter().enumerate().filter_map(|(i, &v)| v.then_some(i))
    }

    fn target(&self, class: usize) -> f64 {
        if self.y[class] {
            1.0
        } else {
            0.0
        }
    }
}

/// Per-class probabilities and log-variances for one tubelet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl InstancePrediction {
    pub fn from_raw(logits: Vec<f64>, raw_log_var: &[f64], transform: LogVarTransform) -> Self {
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        let log_var = raw_log_var.iter().map(|&u| transform.apply(u)).collect();
        Self { logits, probs, log_var }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Result of pooling a bag: one probability and one maximiser per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub bag_probs: Vec<f64>,
    /// Index of the highest-probability instance per class (lowest index on ties).
    pub argmax: Vec<usize>,
}

fn check_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<usize> {
    let first = rows.first().ok_or(Error::EmptyBag)?;
    let classes = first.as_ref().len();
    for (j, row) in rows.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != classes {
            return Err(Error::Shape(format!(
                "instance {j} has {} classes, expected {classes}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("instance {j} value {v}")));
        }
    }
    Ok(classes)
}

fn column_argmax<R: AsRef<[f64]>>(rows: &[R], class: usize) -> usize {
    let mut best = 0;
    for (j, row) in rows.iter().enumerate().skip(1) {
        if row.as_ref()[class] > rows[best].as_ref()[class] {
            best = j;
        }
    }
    best
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn pool_column<R: AsRef<[f64]>>(rows: &[R], class: usize, cfg: &PoolingConfig) -> (f64, usize) {
    let argmax = column_argmax(rows, class);
    let max = rows[argmax].as_ref()[class];
    // summing in sorted order makes the result exactly permutation invariant
    let mut col: Vec<f64> = rows.iter().map(|r| r.as_ref()[class]).collect();
    col.sort_by(f64::total_cmp);
    let min = col[0];
    let n = col.len() as f64;
    let r = cfg.r;
    let pooled = match cfg.kind {
        PoolingKind::Max => max,
        PoolingKind::Mean => {
            let lse = log_sum_exp(col.iter().map(|p| r * p.ln()));
            ((lse - n.ln()) / r).exp()
        }
        PoolingKind::Lse => (log_sum_exp(col.iter().map(|p| r * p)) - n.ln()) / r,
    };
    // both generalised means lie between the column minimum and maximum
    (pooled.clamp(min, max), argmax)
}

/// Pool raw instance probabilities per class.
pub fn pool<R: AsRef<[f64]>>(rows: &[R], cfg: &PoolingConfig) -> Result<Aggregate> {
    cfg.validate()?;
    let classes = check_rows(rows)?;
    let (bag_probs, argmax) = (0..classes).map(|c| pool_column(rows, c, cfg)).unzip();
    Ok(Aggregate { bag_probs, argmax })
}

/// Aggregate instance predictions into bag-level probabilities.
pub fn aggregate(preds: &[InstancePrediction], cfg: &PoolingConfig) -> Result<Aggregate> {
    let rows: Vec<&[f64]> = preds.iter().map(|p| p.probs.as_slice()).collect();
    pool(&rows, cfg)
}

/// `d pooled / d p_j` for every instance of one class.
fn pool_weights<R: AsRef<[f64]>>(
    rows: &[R],
    class: usize,
    pooled: f64,
    argmax: usize,
    cfg: &PoolingConfig,
) -> Vec<f64> {
    let n = rows.len() as f64;
    let r = cfg.r;
    match cfg.kind {
        PoolingKind::Max => {
            let mut w = vec![0.0; rows.len()];
            w[argmax] = 1.0;
            w
        }
        PoolingKind::Mean => {
            let log_pooled = pooled.ln();
            rows.iter()
                .map(|row| {
                    let p = row.as_ref()[class];
                    ((r - 1.0) * (p.ln() - log_pooled)).exp() / n
                })
                .collect()
        }
        PoolingKind::Lse => {
            let scaled: Vec<f64> = rows.iter().map(|row| r * row.as_ref()[class]).collect();
            let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        }
    }
}

/// Binary cross-entropy of one clamped probability.
pub fn bce_term(p: f64, target: f64) -> f64 {
    let p = clamp_prob(p);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Derivative of [`bce_term`] with respect to the unclamped probability.
fn bce_term_grad(p: f64, target: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    -target / p + (1.0 - target) / (1.0 - p)
}

fn check_label(len: usize, label: &BagLabel) -> Result<()> {
    if label.num_classes() != len {
        return Err(Error::Shape(format!(
            "label has {} classes, predictions have {len}",
            label.num_classes()
        )));
    }
    Ok(())
}

/// Bag-level binary cross-entropy, summed over classes.
pub fn bag_bce(bag_probs: &[f64], label: &BagLabel) -> Result<f64> {
    check_label(bag_probs.len(), label)?;
    Ok(bag_probs
        .iter()
        .enumerate()
        .map(|(l, &p)| bce_term(p, label.target(l)))
        .sum())
}

/// `Σ_l exp(-v_l) · bce_l + v_l` with `v_l` the selected log-variance.
pub fn uncertainty_loss(bag_probs: &[f64], selected_log_var: &[f64], label: &BagLabel) -> Result<f64> {
    check_label(bag_probs.len(), label)?;
    if selected_log_var.len() != bag_probs.len() {
        return Err(Error::Shape(format!(
            "{} log-variances for {} classes",
            selected_log_var.len(),
            bag_probs.len()
        )));
    }
    if let Some(v) = selected_log_var.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("log-variance {v}")));
    }
    Ok(bag_probs
        .iter()
        .zip(selected_log_var)
        .enumerate()
        .map(|(l, (&p, &v))| (-v).exp() * bce_term(p, label.target(l)) + v)
        .sum())
}

/// Loss value and gradients for one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct BagGradient {
    pub loss: f64,
    pub bag_probs: Vec<f64>,
    pub argmax: Vec<usize>,
    /// `d loss / d logit`, instances × classes.
    pub d_logits: Vec<Vec<f64>>,
    /// `d loss / d raw uncertainty output`, instances × classes.
    pub d_log_var_raw: Vec<Vec<f64>>,
}

/// Forward loss of one bag from raw logits and raw uncertainty outputs.
pub fn bag_loss<R: AsRef<[f64]>>(logits: &[R], log_var_raw: &[R], label: &BagLabel, cfg: &MilConfig) -> Result<f64> {
    Ok(loss_gradients(logits, log_var_raw, label, cfg)?.loss)
}

/// Exact partial derivatives of the bag loss through pooling, the sigmoid
/// and the log-variance transform.
pub fn loss_gradients<R: AsRef<[f64]>>(
    logits: &[R],
    log_var_raw: &[R],
    label: &BagLabel,
    cfg: &MilConfig,
) -> Result<BagGradient> {
    cfg.pooling.validate()?;
    let classes = check_rows(logits)?;
    check_label(classes, label)?;
    if log_var_raw.len() != logits.len() {
        return Err(Error::Shape(format!(
            "{} uncertainty rows for {} instances",
            log_var_raw.len(),
            logits.len()
        )));
    }
    check_rows(log_var_raw).and_then(|c| {
        if c == classes {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "uncertainty rows have {c} classes, expected {classes}"
            )))
        }
    })?;

    let probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|row| row.as_ref().iter().map(|&z| sigmoid(z)).collect())
        .collect();
    let Aggregate { bag_probs, argmax } = pool(&probs, &cfg.pooling)?;

    let n = logits.len();
    let mut d_logits = vec![vec![0.0; classes]; n];
    let mut d_log_var_raw = vec![vec![0.0; classes]; n];

    let selected: Vec<f64> = if cfg.uncertainty {
        (0..classes)
            .map(|l| cfg.log_var.apply(log_var_raw[argmax[l]].as_ref()[l]))
            .collect()
    } else {
        Vec::new()
    };
    let loss = if cfg.uncertainty {
        uncertainty_loss(&bag_probs, &selected, label)?
    } else {
        bag_bce(&bag_probs, label)?
    };

    for l in 0..classes {
        let target = label.target(l);
        let bag_p = bag_probs[l];
        let mut dl_dp = bce_term_grad(bag_p, target);
        if cfg.uncertainty {
            let v = selected[l];
            let temp = (-v).exp();
            let a = argmax[l];
            let raw = log_var_raw[a].as_ref()[l];
            d_log_var_raw[a][l] = (1.0 - temp * bce_term(bag_p, target)) * cfg.log_var.derivative(raw);
            dl_dp *= temp;
        }
        let weights = pool_weights(&probs, l, bag_p, argmax[l], &cfg.pooling);
        for (j, w) in weights.into_iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let p = probs[j][l];
            d_logits[j][l] = dl_dp * w * (p * (1.0 - p));
        }
    }

    Ok(BagGradient {
        loss,
        bag_probs,
        argmax,
        d_logits,
        d_log_var_raw,
    })
}
