//! Linear tubelet classifier with a per-class uncertainty head, bag sampling
//! and the momentum SGD training loop.

use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Tubelet;
use crate::mil::{self, bce_term, sigmoid, BagLabel, InstancePrediction, LogVarTransform, MilConfig, PoolingConfig};

pub const CHECKPOINT_FORMAT: &str = "tubemil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The MIL unit: tubelets from one clip or sub-clip with a clip-level label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub instances: Vec<Tubelet>,
    pub label: BagLabel,
    pub source_clip: String,
}

/// Classifier and uncertainty heads, row-major `C × D` weight blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    pub w_unc: Vec<f64>,
    pub b_unc: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            w_cls: vec![0.0; num_classes * feature_dim],
            b_cls: vec![0.0; num_classes],
            w_unc: vec![0.0; num_classes * feature_dim],
            b_unc: vec![0.0; num_classes],
        }
    }

    /// Gaussian classifier weights; the uncertainty head starts at zero.
    pub fn random(num_classes: usize, feature_dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = Self::zeros(num_classes, feature_dim);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            params.w_cls.iter_mut().for_each(|w| *w = normal.sample(rng));
        }
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d) = (self.num_classes, self.feature_dim);
        if self.w_cls.len() != c * d || self.w_unc.len() != c * d || self.b_cls.len() != c || self.b_unc.len() != c {
            return Err(Error::Shape(format!("parameter blocks do not match C={c}, D={d}")));
        }
        let all = self
            .w_cls
            .iter()
            .chain(&self.b_cls)
            .chain(&self.w_unc)
            .chain(&self.b_unc);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    fn check_feature(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.feature_dim {
            return Err(Error::Shape(format!(
                "feature has dimension {}, model expects {}",
                feature.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    fn affine(weights: &[f64], bias: &[f64], dim: usize, x: &[f64]) -> Vec<f64> {
        weights
            .chunks_exact(dim)
            .zip(bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.check_feature(feature)?;
        Ok(Self::affine(&self.w_cls, &self.b_cls, self.feature_dim, feature))
    }

    /// Raw uncertainty output, before the log-variance transform.
    pub fn raw_log_var(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.check_feature(feature)?;
        Ok(Self::affine(&self.w_unc, &self.b_unc, self.feature_dim, feature))
    }

    fn zip_mut(&mut self, other: &ModelParams, mut f: impl FnMut(&mut f64, f64)) {
        let lhs = self
            .w_cls
            .iter_mut()
            .chain(&mut self.b_cls)
            .chain(&mut self.w_unc)
            .chain(&mut self.b_unc);
        let rhs = other
            .w_cls
            .iter()
            .chain(&other.b_cls)
            .chain(&other.w_unc)
            .chain(&other.b_unc);
        lhs.zip(rhs).for_each(|(a, &b)| f(a, b));
    }

    fn scale(&mut self, s: f64) {
        self.w_cls
            .iter_mut()
            .chain(&mut self.b_cls)
            .chain(&mut self.w_unc)
            .chain(&mut self.b_unc)
            .for_each(|v| *v *= s);
    }

    /// Flat view, used by gradient checks.
    pub fn to_flat(&self) -> Vec<f64> {
        self.w_cls
            .iter()
            .chain(&self.b_cls)
            .chain(&self.w_unc)
            .chain(&self.b_unc)
            .copied()
            .collect()
    }

    pub fn from_flat(num_classes: usize, feature_dim: usize, flat: &[f64]) -> Result<Self> {
        let cd = num_classes * feature_dim;
        if flat.len() != 2 * (cd + num_classes) {
            return Err(Error::Shape(format!("flat parameter vector of length {}", flat.len())));
        }
        let (w_cls, rest) = flat.split_at(cd);
        let (b_cls, rest) = rest.split_at(num_classes);
        let (w_unc, b_unc) = rest.split_at(cd);
        Ok(Self {
            num_classes,
            feature_dim,
            w_cls: w_cls.to_vec(),
            b_cls: b_cls.to_vec(),
            w_unc: w_unc.to_vec(),
            b_unc: b_unc.to_vec(),
        })
    }
}

/// Trained parameters together with the loss configuration they were trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub params: ModelParams,
    pub mil: MilConfig,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    version: u32,
    num_classes: usize,
    feature_dim: usize,
    mil: MilConfig,
    w_cls: Vec<f64>,
    b_cls: Vec<f64>,
    w_unc: Vec<f64>,
    b_unc: Vec<f64>,
}

impl Model {
    /// Writes a single-line JSON checkpoint. Floats are written in shortest
    /// round-trip form, so reading back is bit-exact.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let p = &self.params;
        let record = CheckpointRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            num_classes: p.num_classes,
            feature_dim: p.feature_dim,
            mil: self.mil,
            w_cls: p.w_cls.clone(),
            b_cls: p.b_cls.clone(),
            w_unc: p.w_unc.clone(),
            b_unc: p.b_unc.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let record: CheckpointRecord = serde_json::from_reader(input)?;
        if record.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: {}", record.format)));
        }
        if record.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                record.version
            )));
        }
        let params = ModelParams {
            num_classes: record.num_classes,
            feature_dim: record.feature_dim,
            w_cls: record.w_cls,
            b_cls: record.b_cls,
            w_unc: record.w_unc,
            b_unc: record.b_unc,
        };
        params.validate()?;
        Ok(Self {
            params,
            mil: record.mil,
        })
    }

    pub fn predict(&self, tubelets: &[Tubelet]) -> Result<Vec<InstancePrediction>> {
        predict_tubelets(&self.params, tubelets, self.mil.log_var)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Pool instance predictions and supervise the bag.
    Mil,
    /// Supervise every sampled tubelet with the bag label, no pooling.
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub bags_per_batch: usize,
    /// Cap on the tubelets sampled from each bag per step.
    pub tubelets_per_bag: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Cosine decay of the learning rate to zero over all steps.
    pub cosine_decay: bool,
    pub mode: TrainMode,
    pub pooling: PoolingConfig,
    pub use_uncertainty: bool,
    pub log_var: LogVarTransform,
    /// Standard deviation of the initial classifier weights.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bags_per_batch: 4,
            tubelets_per_bag: 4,
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 200,
            cosine_decay: true,
            mode: TrainMode::Mil,
            pooling: PoolingConfig::max(),
            use_uncertainty: false,
            log_var: LogVarTransform::Softplus,
            init_std: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn mil_config(&self) -> MilConfig {
        MilConfig {
            pooling: self.pooling,
            uncertainty: self.use_uncertainty,
            log_var: self.log_var,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bags_per_batch == 0 || self.tubelets_per_bag == 0 {
            return Err(Error::Config("bags_per_batch and tubelets_per_bag must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        self.pooling.validate()
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_loss: Vec<f64>,
}

/// Uniformly samples `min(cap, |bag|)` distinct instances, keeping the label.
pub fn sample_bag(bag: &Bag, cap: usize, rng: &mut ChaCha8Rng) -> Result<Bag> {
    if bag.instances.is_empty() {
        return Err(Error::EmptyBag);
    }
    if cap == 0 {
        return Err(Error::Config("sampling cap must be >= 1".into()));
    }
    let n = bag.instances.len();
    let instances = if cap >= n {
        bag.instances.clone()
    } else {
        let mut picked = index::sample(rng, n, cap).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| bag.instances[i].clone()).collect()
    };
    Ok(Bag {
        instances,
        label: bag.label.clone(),
        source_clip: bag.source_clip.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub bag_probs: Vec<f64>,
    /// Log-variance of the per-class argmax instance.
    pub selected_log_var: Vec<f64>,
    pub per_instance: Vec<InstancePrediction>,
}

type Rows = Vec<Vec<f64>>;

fn raw_outputs(params: &ModelParams, tubelets: &[Tubelet]) -> Result<(Rows, Rows)> {
    tubelets
        .iter()
        .map(|t| Ok((params.logits(&t.feature)?, params.raw_log_var(&t.feature)?)))
        .collect::<Result<Vec<_>>>()
        .map(|rows| rows.into_iter().unzip())
}

/// Per-instance predictions followed by pooling and uncertainty selection.
pub fn forward(params: &ModelParams, bag: &Bag, mil: &MilConfig) -> Result<ForwardOutput> {
    let per_instance = predict_tubelets(params, &bag.instances, mil.log_var)?;
    let agg = mil::aggregate(&per_instance, &mil.pooling)?;
    let selected_log_var = agg
        .argmax
        .iter()
        .enumerate()
        .map(|(l, &j)| per_instance[j].log_var[l])
        .collect();
    Ok(ForwardOutput {
        bag_probs: agg.bag_probs,
        selected_log_var,
        per_instance,
    })
}

/// Forward pass per tubelet, no pooling.
pub fn predict_tubelets(
    params: &ModelParams,
    tubelets: &[Tubelet],
    log_var: LogVarTransform,
) -> Result<Vec<InstancePrediction>> {
    tubelets
        .iter()
        .map(|t| {
            let logits = params.logits(&t.feature)?;
            let raw = params.raw_log_var(&t.feature)?;
            Ok(InstancePrediction::from_raw(logits, &raw, log_var))
        })
        .collect()
}

/// Per-instance gradients of the loss of one bag with respect to logits and
/// raw uncertainty outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGradients {
    pub loss: f64,
    pub d_logits: Vec<Vec<f64>>,
    pub d_log_var_raw: Vec<Vec<f64>>,
}

/// No-pooling loss: every instance is scored against the bag label on its
/// own and the per-instance losses are averaged.
fn naive_instance_gradients(
    logits: &[Vec<f64>],
    raw: &[Vec<f64>],
    label: &BagLabel,
    mil: &MilConfig,
) -> Result<InstanceGradients> {
    if logits.is_empty() {
        return Err(Error::EmptyBag);
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut d_logits = Vec::with_capacity(logits.len());
    let mut d_log_var_raw = Vec::with_capacity(logits.len());
    for (z_row, u_row) in logits.iter().zip(raw) {
        if z_row.len() != label.num_classes() {
            return Err(Error::Shape("label and logits disagree on C".into()));
        }
        let mut loss = 0.0;
        let mut dz = vec![0.0; z_row.len()];
        let mut du = vec![0.0; z_row.len()];
        for (l, (&z, &u)) in z_row.iter().zip(u_row).enumerate() {
            let target = if label.y[l] { 1.0 } else { 0.0 };
            let p = sigmoid(z);
            let bce = bce_term(p, target);
            let mut dl_dp = if (mil::PROB_EPS..=1.0 - mil::PROB_EPS).contains(&p) {
                -target / p + (1.0 - target) / (1.0 - p)
            } else {
                0.0
            };
            if mil.uncertainty {
                let v = mil.log_var.apply(u);
                let temp = (-v).exp();
                loss += temp * bce + v;
                du[l] = (1.0 - temp * bce) * mil.log_var.derivative(u) / n;
                dl_dp *= temp;
            } else {
                loss += bce;
            }
            dz[l] = dl_dp * (p * (1.0 - p)) / n;
        }
        total += loss;
        d_logits.push(dz);
        d_log_var_raw.push(du);
    }
    Ok(InstanceGradients {
        loss: total / n,
        d_logits,
        d_log_var_raw,
    })
}

/// Loss of one bag and its gradient with respect to every parameter.
pub fn bag_gradient(params: &ModelParams, bag: &Bag, mil: &MilConfig, mode: TrainMode) -> Result<(f64, ModelParams)> {
    let (logits, raw) = raw_outputs(params, &bag.instances)?;
    let grads = instance_gradients(&logits, &raw, &bag.label, mil, mode)?;
    let d = params.feature_dim;
    let mut out = ModelParams::zeros(params.num_classes, d);
    for (j, tubelet) in bag.instances.iter().enumerate() {
        let x = &tubelet.feature;
        for l in 0..params.num_classes {
            let dz = grads.d_logits[j][l];
            if dz != 0.0 {
                out.b_cls[l] += dz;
                out.w_cls[l * d..(l + 1) * d]
                    .iter_mut()
                    .zip(x)
                    .for_each(|(g, xi)| *g += dz * xi);
            }
            let du = grads.d_log_var_raw[j][l];
            if du != 0.0 {
                out.b_unc[l] += du;
                out.w_unc[l * d..(l + 1) * d]
                    .iter_mut()
                    .zip(x)
                    .for_each(|(g, xi)| *g += du * xi);
            }
        }
    }
    Ok((grads.loss, out))
}

/// Gradients of one bag's loss with respect to the raw network outputs.
pub fn instance_gradients(
    logits: &[Vec<f64>],
    raw: &[Vec<f64>],
    label: &BagLabel,
    mil: &MilConfig,
    mode: TrainMode,
) -> Result<InstanceGradients> {
    match mode {
        TrainMode::Naive => naive_instance_gradients(logits, raw, label, mil),
        TrainMode::Mil => {
            let g = mil::loss_gradients(logits, raw, label, mil)?;
            Ok(InstanceGradients {
                loss: g.loss,
                d_logits: g.d_logits,
                d_log_var_raw: g.d_log_var_raw,
            })
        }
    }
}

/// Loss of one bag (forward only).
pub fn bag_loss(params: &ModelParams, bag: &Bag, mil: &MilConfig, mode: TrainMode) -> Result<f64> {
    let (logits, raw) = raw_outputs(params, &bag.instances)?;
    match mode {
        TrainMode::Naive => Ok(naive_instance_gradients(&logits, &raw, &bag.label, mil)?.loss),
        TrainMode::Mil => mil::bag_loss(&logits, &raw, &bag.label, mil),
    }
}

fn check_dataset(dataset: &[Bag]) -> Result<(usize, usize)> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let classes = first.label.num_classes();
    let dim = first.instances.first().ok_or(Error::EmptyBag)?.feature.len();
    for bag in dataset {
        if bag.instances.is_empty() {
            return Err(Error::EmptyBag);
        }
        if bag.label.num_classes() != classes {
            return Err(Error::Shape(format!(
                "bag {} has a label of another length",
                bag.source_clip
            )));
        }
        if bag.instances.iter().any(|t| t.feature.len() != dim) {
            return Err(Error::Shape(format!(
                "bag {} mixes feature dimensions",
                bag.source_clip
            )));
        }
    }
    Ok((classes, dim))
}

/// Hook called after every optimisation step with the step index and the
/// per-bag losses of that batch.
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, &[f64]);

/// Momentum SGD over shuffled mini-batches of sampled bags.
pub fn train(dataset: &[Bag], cfg: &TrainConfig) -> Result<(Model, TrainingLog)> {
    train_observed(dataset, cfg, &mut |_, _| {})
}

pub fn train_observed(dataset: &[Bag], cfg: &TrainConfig, observer: StepObserver<'_>) -> Result<(Model, TrainingLog)> {
    cfg.validate()?;
    let (classes, dim) = check_dataset(dataset)?;
    let mil = cfg.mil_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::random(classes, dim, cfg.init_std, &mut rng)?;
    let mut velocity = ModelParams::zeros(classes, dim);

    let steps_per_epoch = dataset.len().div_ceil(cfg.bags_per_batch);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.bags_per_batch) {
            let sampled = batch
                .iter()
                .map(|&i| sample_bag(&dataset[i], cfg.tubelets_per_bag, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let results = sampled
                .par_iter()
                .map(|bag| bag_gradient(&params, bag, &mil, cfg.mode))
                .collect::<Result<Vec<_>>>()?;

            // index-ordered reduction keeps the update deterministic
            let mut grad = ModelParams::zeros(classes, dim);
            let mut losses = Vec::with_capacity(results.len());
            for (loss, g) in &results {
                grad.zip_mut(g, |a, b| *a += b);
                losses.push(*loss);
            }
            grad.scale(1.0 / results.len() as f64);

            let lr = if cfg.cosine_decay {
                cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
            } else {
                cfg.learning_rate
            };
            velocity.zip_mut(&grad, |v, g| *v = cfg.momentum * *v + g);
            params.zip_mut(&velocity, |p, v| *p -= lr * v);

            observer(step, &losses);
            loss_sum += losses.iter().sum::<f64>();
            step += 1;
        }
        epoch_loss.push(loss_sum / dataset.len() as f64);
    }
    params.validate()?;
    Ok((Model { params, mil }, TrainingLog { epoch_loss }))
}
