//! Two-stage self-training with a linear-softmax pixel classifier.
//!
//! Stage I (epochs `< stage_switch`) minimizes `(1 - lambda) * L_s + lambda * L_u`
//! with `L_u` computed against precomputed calibrated pseudo-masks. Stage II
//! drops those masks, regenerates pseudo-labels from the current model's
//! argmax at the start of every epoch, and decays `lambda` exponentially.
//! Optimization is plain gradient descent under a poly learning-rate schedule.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audit::Confusion;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::synth::softmax_in_place;
use crate::tensor::{FeatureImage, LabelMap, ProbabilityMap, RawTensor, TensorFile, Variant, IGNORE};

const POLY_POWER: f64 = 0.9;

/// Per-pixel softmax over `weights * x + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    classes: usize,
    dim: usize,
    /// `classes * dim` weights (row-major) followed by `classes` biases.
    params: Vec<f64>,
}

impl ToyClassifier {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            params: vec![0.0; classes * (dim + 1)],
        }
    }

    pub fn from_parts(classes: usize, dim: usize, weights: &[f64], bias: &[f64]) -> Result<Self> {
        if weights.len() != classes * dim || bias.len() != classes {
            return Err(Error::ShapeMismatch("classifier parameter sizes".into()));
        }
        if weights.iter().chain(bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite classifier parameter".into()));
        }
        Ok(Self {
            classes,
            dim,
            params: [weights, bias].concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn weights(&self) -> &[f64] {
        &self.params[..self.classes * self.dim]
    }
    pub fn bias(&self) -> &[f64] {
        &self.params[self.classes * self.dim..]
    }
    /// All parameters, weights then biases.
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    #[inline]
    fn logits_into(&self, x: &FeatureImage, pixel: usize, out: &mut [f64]) {
        let (w, b) = self.params.split_at(self.classes * self.dim);
        for (c, z) in out.iter_mut().enumerate() {
            let row = &w[c * self.dim..(c + 1) * self.dim];
            *z = b[c] + row.iter().enumerate().map(|(d, wd)| wd * x.feature(d, pixel)).sum::<f64>();
        }
    }

    fn check_input(&self, x: &FeatureImage) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "features have {} dims, classifier expects {}",
                x.dim(),
                self.dim
            )));
        }
        Ok(())
    }
}

impl TensorFile for ToyClassifier {
    /// Stored as a `classes x (dim + 1)` matrix whose last column is the bias.
    fn to_raw(&self) -> RawTensor {
        let mut data = Vec::with_capacity(self.params.len());
        for c in 0..self.classes {
            data.extend_from_slice(&self.weights()[c * self.dim..(c + 1) * self.dim]);
            data.push(self.bias()[c]);
        }
        RawTensor::F64 {
            dims: vec![self.classes, self.dim + 1],
            data,
        }
    }

    fn from_raw(raw: RawTensor) -> Result<Self> {
        let RawTensor::F64 { dims, data } = raw else {
            return Err(Error::Validation("classifier checkpoint must be f64".into()));
        };
        if dims.len() != 2 || dims[1] < 2 {
            return Err(Error::Validation("classifier checkpoint must be classes x (dim + 1)".into()));
        }
        let (classes, dim) = (dims[0], dims[1] - 1);
        let mut weights = Vec::with_capacity(classes * dim);
        let mut bias = Vec::with_capacity(classes);
        for row in data.chunks_exact(dim + 1) {
            weights.extend_from_slice(&row[..dim]);
            bias.push(row[dim]);
        }
        Self::from_parts(classes, dim, &weights, &bias)
    }
}

pub fn predict(model: &ToyClassifier, x: &FeatureImage) -> Result<ProbabilityMap> {
    model.check_input(x)?;
    let k = model.classes;
    let plane = x.pixels();
    let mut values = vec![0.0; k * plane];
    let mut z = vec![0.0; k];
    for p in 0..plane {
        model.logits_into(x, p, &mut z);
        softmax_in_place(&mut z);
        for (j, &v) in z.iter().enumerate() {
            values[j * plane + p] = v.clamp(0.0, 1.0);
        }
    }
    ProbabilityMap::new(k, x.height(), x.width(), values)
}

pub fn predict_labels(model: &ToyClassifier, x: &FeatureImage) -> Result<LabelMap> {
    Ok(predict(model, x)?.argmax())
}

/// Mean `-ln p[target]` over non-`IGNORE` pixels; zero when every pixel is ignored.
pub fn masked_cross_entropy(pred: &ProbabilityMap, target: &LabelMap) -> Result<f64> {
    if !target.same_shape(pred.height(), pred.width()) {
        return Err(Error::ShapeMismatch("prediction and target differ in size".into()));
    }
    target.validate_classes(pred.classes())?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, &l) in target.labels().iter().enumerate() {
        if l != IGNORE {
            sum -= pred.prob(l as usize, p).max(f64::MIN_POSITIVE).ln();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Summed cross-entropy and parameter gradient over a set of images.
#[derive(Debug, Clone)]
struct CeSums {
    loss: f64,
    pixels: usize,
    grad: Vec<f64>,
}

fn ce_sums(model: &ToyClassifier, batch: &[(&FeatureImage, &LabelMap)], with_grad: bool) -> Result<CeSums> {
    let (k, dim) = (model.classes, model.dim);
    let mut out = CeSums {
        loss: 0.0,
        pixels: 0,
        grad: if with_grad { vec![0.0; model.params.len()] } else { Vec::new() },
    };
    let mut z = vec![0.0; k];
    for (x, y) in batch {
        model.check_input(x)?;
        if !y.same_shape(x.height(), x.width()) {
            return Err(Error::ShapeMismatch("features and targets differ in size".into()));
        }
        for (p, &l) in y.labels().iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let t = l as usize;
            if t >= k {
                return Err(Error::Validation(format!("target {t} >= class count {k}")));
            }
            model.logits_into(x, p, &mut z);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.loss += lse - z[t];
            out.pixels += 1;
            if with_grad {
                let (gw, gb) = out.grad.split_at_mut(k * dim);
                for c in 0..k {
                    let delta = (z[c] - lse).exp() - if c == t { 1.0 } else { 0.0 };
                    gb[c] += delta;
                    let row = &mut gw[c * dim..(c + 1) * dim];
                    for (d, g) in row.iter_mut().enumerate() {
                        *g += delta * x.feature(d, p);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Value and gradient of the weighted objective for one step.
#[derive(Debug, Clone)]
pub struct StepLoss {
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    /// Weight actually applied to the unsupervised term.
    pub lambda: f64,
    pub grad: Vec<f64>,
}

/// `(1 - lambda) * L_s + lambda * L_u`, each a per-pixel mean.
///
/// A term with no labeled pixels drops out and the other takes full weight,
/// so an all-`IGNORE` pseudo batch yields exactly the supervised objective.
pub fn combined_objective(
    model: &ToyClassifier,
    supervised: &[(&FeatureImage, &LabelMap)],
    unsupervised: &[(&FeatureImage, &LabelMap)],
    lambda: f64,
    with_grad: bool,
) -> Result<StepLoss> {
    let s = ce_sums(model, supervised, with_grad)?;
    let u = if lambda > 0.0 {
        ce_sums(model, unsupervised, with_grad)?
    } else {
        CeSums {
            loss: 0.0,
            pixels: 0,
            grad: Vec::new(),
        }
    };
    let lambda = match (s.pixels, u.pixels) {
        (_, 0) => 0.0,
        (0, _) => 1.0,
        _ => lambda,
    };
    let mean = |c: &CeSums| if c.pixels == 0 { 0.0 } else { c.loss / c.pixels as f64 };
    let (ls, lu) = (mean(&s), mean(&u));
    let mut grad = Vec::new();
    if with_grad {
        grad = vec![0.0; model.params.len()];
        if s.pixels > 0 && lambda < 1.0 {
            let ws = (1.0 - lambda) / s.pixels as f64;
            grad.iter_mut().zip(&s.grad).for_each(|(g, v)| *g += ws * v);
        }
        if u.pixels > 0 && lambda > 0.0 {
            let wu = lambda / u.pixels as f64;
            grad.iter_mut().zip(&u.grad).for_each(|(g, v)| *g += wu * v);
        }
    }
    Ok(StepLoss {
        total: (1.0 - lambda) * ls + lambda * lu,
        supervised: ls,
        unsupervised: lu,
        lambda,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub lr_init: f64,
    /// Total epochs `T`.
    pub epochs: usize,
    /// First Stage II epoch; equal to `epochs` for Stage I only.
    pub stage_switch: usize,
    pub lambda0: f64,
    /// Exponential decay rate of `lambda` per Stage II epoch.
    pub decay: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Calibration settings the pseudo-masks were produced with (recorded, not applied).
    pub alpha: f64,
    pub variant: Variant,
    pub background: Option<usize>,
    pub seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.003,
            epochs: 80,
            stage_switch: 60,
            lambda0: 0.5,
            decay: 0.2,
            labeled_batch: 2,
            unlabeled_batch: 2,
            alpha: 0.05,
            variant: Variant::Pixel,
            background: Some(0),
            seed: 0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(m.to_string()));
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return fail("lr_init must be positive");
        }
        if self.epochs == 0 || self.stage_switch == 0 || self.stage_switch > self.epochs {
            return fail("need 0 < stage_switch <= epochs");
        }
        if !(0.0..=1.0).contains(&self.lambda0) {
            return fail("lambda0 must lie in [0,1]");
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return fail("decay must be positive");
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return fail("batch sizes must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail("alpha must lie in (0,1)");
        }
        Ok(())
    }
}

/// Unsupervised weight at `epoch`: `lambda0` in Stage I, then
/// `lambda0 * exp(-decay * (epoch - stage_switch))`.
pub fn lambda_schedule(epoch: usize, cfg: &TrainRunConfig) -> f64 {
    if epoch < cfg.stage_switch {
        cfg.lambda0
    } else {
        cfg.lambda0 * (-cfg.decay * (epoch - cfg.stage_switch) as f64).exp()
    }
}

/// `lr_init * (1 - step / total)^0.9`, zero from `total` on.
pub fn poly_lr(step: usize, total_steps: usize, lr_init: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    lr_init * (1.0 - step as f64 / total_steps as f64).powf(POLY_POWER)
}

/// In-memory training inputs. Pseudo-masks pair index-wise with unlabeled features.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub classes: usize,
    pub labeled: Vec<(FeatureImage, LabelMap)>,
    pub unlabeled: Vec<(FeatureImage, LabelMap)>,
    pub test: Vec<(FeatureImage, LabelMap)>,
}

impl TrainingData {
    pub fn new(
        classes: usize,
        labeled: Vec<(FeatureImage, LabelMap)>,
        unlabeled: Vec<FeatureImage>,
        pseudo_masks: Vec<LabelMap>,
        test: Vec<(FeatureImage, LabelMap)>,
    ) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::InvalidArgument("labeled partition is empty".into()));
        }
        if pseudo_masks.len() != unlabeled.len() {
            return Err(Error::InvalidArgument(format!(
                "{} pseudo-masks for {} unlabeled images",
                pseudo_masks.len(),
                unlabeled.len()
            )));
        }
        let dim = labeled[0].0.dim();
        for (x, y) in labeled.iter().chain(&test) {
            y.validate_classes(classes)?;
            if x.dim() != dim || !y.same_shape(x.height(), x.width()) {
                return Err(Error::ShapeMismatch("inconsistent training images".into()));
            }
        }
        for (x, y) in unlabeled.iter().zip(&pseudo_masks) {
            y.validate_classes(classes)?;
            if x.dim() != dim || !y.same_shape(x.height(), x.width()) {
                return Err(Error::ShapeMismatch("pseudo-mask does not match its image".into()));
            }
        }
        Ok(Self {
            classes,
            labeled,
            unlabeled: unlabeled.into_iter().zip(pseudo_masks).collect(),
            test,
        })
    }

    pub fn dim(&self) -> usize {
        self.labeled[0].0.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub test_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyClassifier,
    pub history: Vec<EpochRecord>,
}

/// Test-set mIoU with confusion counts pooled over all images.
pub fn evaluate_miou(model: &ToyClassifier, images: &[(FeatureImage, LabelMap)]) -> Result<f64> {
    let mut conf = Confusion::new(model.classes);
    for (x, y) in images {
        conf.add(&predict_labels(model, x)?, y)?;
    }
    Ok(conf.miou()?.mean)
}

const STREAM_LABELED_ORDER: u64 = 0x10;
const STREAM_UNLABELED_ORDER: u64 = 0x11;

pub fn train(data: &TrainingData, cfg: &TrainRunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::InvalidArgument("labeled partition is empty".into()));
    }
    let (n_l, n_u) = (data.labeled.len(), data.unlabeled.len());
    let steps_per_epoch = if n_u > 0 {
        n_u.div_ceil(cfg.unlabeled_batch)
    } else {
        n_l.div_ceil(cfg.labeled_batch)
    };
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut model = ToyClassifier::zeros(data.classes, data.dim());
    let mut pseudo: Vec<LabelMap> = data.unlabeled.iter().map(|(_, m)| m.clone()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let lambda = lambda_schedule(epoch, cfg);
        if epoch >= cfg.stage_switch && lambda > 0.0 {
            for ((x, _), slot) in data.unlabeled.iter().zip(pseudo.iter_mut()) {
                *slot = predict_labels(&model, x)?;
            }
        }
        let mut order_l: Vec<usize> = (0..n_l).collect();
        order_l.shuffle(&mut stream_rng(cfg.seed, STREAM_LABELED_ORDER, epoch as u64));
        let mut order_u: Vec<usize> = (0..n_u).collect();
        order_u.shuffle(&mut stream_rng(cfg.seed, STREAM_UNLABELED_ORDER, epoch as u64));

        let epoch_lr = poly_lr(step, total_steps, cfg.lr_init);
        let (mut sum_s, mut sum_u) = (0.0, 0.0);
        for s in 0..steps_per_epoch {
            let sup: Vec<(&FeatureImage, &LabelMap)> = (0..cfg.labeled_batch)
                .map(|i| {
                    let (x, y) = &data.labeled[order_l[(s * cfg.labeled_batch + i) % n_l]];
                    (x, y)
                })
                .collect();
            let unsup: Vec<(&FeatureImage, &LabelMap)> = (s * cfg.unlabeled_batch..((s + 1) * cfg.unlabeled_batch).min(n_u))
                .map(|i| {
                    let j = order_u[i];
                    (&data.unlabeled[j].0, &pseudo[j])
                })
                .collect();
            let loss = combined_objective(&model, &sup, &unsup, lambda, true)?;
            let lr = poly_lr(step, total_steps, cfg.lr_init);
            for (p, g) in model.params.iter_mut().zip(&loss.grad) {
                *p -= lr * g;
            }
            sum_s += loss.supervised;
            sum_u += loss.unsupervised;
            step += 1;
        }
        let test_miou = if data.test.is_empty() {
            None
        } else {
            Some(evaluate_miou(&model, &data.test)?)
        };
        history.push(EpochRecord {
            epoch,
            lambda,
            lr: epoch_lr,
            loss_sup: sum_s / steps_per_epoch as f64,
            loss_unsup: sum_u / steps_per_epoch as f64,
            test_miou,
        });
    }
    if model.params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("training diverged".into()));
    }
    Ok(TrainOutcome { model, history })
}
