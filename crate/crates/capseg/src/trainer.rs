//! Mini-batch training loop, optimizers, checkpointing, prediction
//! postprocessing, and test-set evaluation.
//!
//! Determinism contract: batch order for an epoch is a pure function of
//! (seed, epoch), optimizer state is serialized exactly, and weights are
//! stored as JSON floats that round-trip bit-identically, so resuming from
//! a checkpoint reproduces a straight-through run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SegSample;
use crate::grid::{Grid, Mask};
use crate::losses::{self, LossConfig, LossError, LossKind};
use crate::metrics::{self, EvalReport, MetricError, SliceMetrics};
use crate::model::{multiscale_loss_with_grads, Model, ModelConfig, ModelError};
use crate::par;

/// Smoothing constant for the optional dice term.
pub const DICE_SMOOTH: f64 = 1.0;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error(
        "non-finite loss {value} at epoch {epoch}, batch {batch} \
         (loss {kind}, sample losses {sample_losses:?})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
        kind: LossKind,
        sample_losses: Vec<f64>,
    },
    #[error("non-finite gradient {value} at parameter index {index}")]
    NonFiniteGradient { index: usize, value: f64 },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 2] = [OptimizerKind::SgdMomentum, OptimizerKind::Adam];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                TrainError::Config(format!(
                    "unknown optimizer {s:?}, expected one of: sgd_momentum, adam"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    /// Adds `dice_weight` times the dice loss of the full-resolution head.
    pub combine_dice: bool,
    pub dice_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// When set, the step-t learning rate is lr * (1 - t/T)^power.
    pub poly_decay_power: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_kind: LossKind::AdaptiveFocal,
            combine_dice: false,
            dice_weight: 1.0,
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::SgdMomentum,
            seed: 0,
            poly_decay_power: None,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is allowed and makes every step a no-op.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        if !(self.dice_weight >= 0.0 && self.dice_weight.is_finite()) {
            return Err(TrainError::Config("dice_weight must be >= 0".into()));
        }
        if let Some(p) = self.poly_decay_power {
            if !(p > 0.0 && p.is_finite()) {
                return Err(TrainError::Config("poly_decay_power must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean of the batch losses of this epoch.
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// Optimizer slots, one value per model parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerState {
    SgdMomentum { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::SgdMomentum => OptimizerState::SgdMomentum { velocity: vec![0.0; len] },
            OptimizerKind::Adam => OptimizerState::Adam {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
        }
    }

    fn matches(&self, kind: OptimizerKind, len: usize) -> bool {
        match (self, kind) {
            (OptimizerState::SgdMomentum { velocity }, OptimizerKind::SgdMomentum) => {
                velocity.len() == len
            }
            (OptimizerState::Adam { m, v, .. }, OptimizerKind::Adam) => {
                m.len() == len && v.len() == len
            }
            _ => false,
        }
    }
}

/// One parameter update.
///
/// Momentum mode uses classical coupled weight decay:
/// v <- momentum*v + (g + weight_decay*p); p <- p - lr*v.
/// Adam uses bias-corrected moments on the same decayed gradient.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::Config(format!(
            "parameter/gradient length mismatch: {} vs {}",
            params.len(),
            grads.len()
        )));
    }
    if !state.matches(cfg.optimizer, params.len()) {
        return Err(TrainError::Config(
            "optimizer state does not match the optimizer kind or parameter count".into(),
        ));
    }
    if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index, value });
    }
    match state {
        OptimizerState::SgdMomentum { velocity } => {
            for i in 0..params.len() {
                let g = grads[i] + cfg.weight_decay * params[i];
                velocity[i] = cfg.momentum * velocity[i] + g;
                params[i] -= lr * velocity[i];
            }
        }
        OptimizerState::Adam { m, v, t } => {
            *t += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(*t as i32);
            let c2 = 1.0 - ADAM_BETA2.powi(*t as i32);
            for i in 0..params.len() {
                let g = grads[i] + cfg.weight_decay * params[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

/// Sample visit order for one epoch, a pure function of (seed, epoch) so
/// that every loss kind sees identical batches and a resumed run replays
/// the schedule of a straight-through run.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

fn effective_lr(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    match cfg.poly_decay_power {
        Some(p) if total_steps > 0 => {
            let frac = 1.0 - step as f64 / total_steps as f64;
            cfg.learning_rate * frac.max(0.0).powf(p)
        }
        _ => cfg.learning_rate,
    }
}

/// Loss and flattened parameter gradients of a single sample.
fn sample_loss_and_grads(
    model: &Model,
    sample: &SegSample,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    let (pred, trace) = model.forward_trace(&sample.image)?;
    let (mut loss, mut head_grads) = multiscale_loss_with_grads(
        &pred,
        &sample.expert_mask,
        &sample.nonexpert_mask,
        cfg.loss_kind,
        loss_cfg,
        model.cfg(),
    )?;
    if cfg.combine_dice {
        let probs = losses::sigmoid(&pred.full_logits)?;
        let (dice_value, dice_dprob) =
            losses::dice_loss_with_grad(&probs, &sample.expert_mask, DICE_SMOOTH)?;
        loss += cfg.dice_weight * dice_value;
        Zip::from(&mut head_grads.full)
            .and(&dice_dprob)
            .and(&probs)
            .for_each(|g, &dp, &p| *g += cfg.dice_weight * dp * p * (1.0 - p));
    }
    let grads = model.backward(&trace, &head_grads);
    Ok((loss, grads.data().to_vec()))
}

fn check_dataset(model: &Model, samples: &[SegSample]) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = model.cfg().input_size;
    for s in samples {
        let dims = s.image.dim();
        if dims != (n, n) {
            return Err(TrainError::Config(format!(
                "sample {}_{} is {}x{}, model expects {n}x{n}; resize first",
                s.case_id, s.slice_index, dims.0, dims.1
            )));
        }
    }
    Ok(())
}

/// Continue training from `start_epoch` completed epochs up to
/// `cfg.epochs`, reusing existing optimizer state. Returns one log row per
/// epoch actually run.
pub fn train_epochs(
    model: &mut Model,
    samples: &[SegSample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    state: &mut OptimizerState,
    start_epoch: usize,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    loss_cfg.validate()?;
    check_dataset(model, samples)?;
    if !state.matches(cfg.optimizer, model.store().total_len()) {
        return Err(TrainError::Config(
            "optimizer state does not match the model or optimizer kind".into(),
        ));
    }
    if start_epoch > cfg.epochs {
        return Err(TrainError::Config(format!(
            "start epoch {start_epoch} exceeds configured epochs {}",
            cfg.epochs
        )));
    }

    let n = samples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut logs = Vec::with_capacity(cfg.epochs - start_epoch);

    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(cfg.seed, epoch, n);
        let mut batch_losses = Vec::with_capacity(steps_per_epoch);

        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let per_sample = par::map(chunk, |&idx| {
                sample_loss_and_grads(model, &samples[idx], cfg, loss_cfg)
            });

            let mut mean_grad = vec![0.0; model.store().total_len()];
            let mut sample_losses = Vec::with_capacity(chunk.len());
            for result in per_sample {
                let (loss, grad) = result?;
                sample_losses.push(loss);
                for (acc, g) in mean_grad.iter_mut().zip(&grad) {
                    *acc += g;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut mean_grad {
                *g *= scale;
            }
            let batch_loss = sample_losses.iter().sum::<f64>() * scale;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batch_index + 1,
                    value: batch_loss,
                    kind: cfg.loss_kind,
                    sample_losses,
                });
            }

            let step = epoch * steps_per_epoch + batch_index;
            let lr = effective_lr(cfg, step, total_steps);
            optimizer_step(model.store_mut().data_mut(), &mean_grad, state, cfg, lr)?;
            batch_losses.push(batch_loss);
        }

        logs.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: batch_losses.iter().sum::<f64>() / batch_losses.len() as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(logs)
}

/// Train from scratch for `cfg.epochs` epochs.
pub fn train(
    model: &mut Model,
    samples: &[SegSample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<EpochLog>, TrainError> {
    let mut state = OptimizerState::new(cfg.optimizer, model.store().total_len());
    train_epochs(model, samples, cfg, loss_cfg, &mut state, 0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Self-contained training snapshot. JSON floats round-trip exactly, so a
/// loaded checkpoint continues bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub loss_config: LossConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub weights: Vec<WeightEntry>,
    pub optimizer: OptimizerState,
    /// Per-epoch history up to `epoch`, so a resumed run can emit the
    /// full loss log.
    pub logs: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        cfg: &TrainConfig,
        loss_cfg: &LossConfig,
        state: &OptimizerState,
        epoch: usize,
        logs: &[EpochLog],
    ) -> Self {
        let weights = model
            .store()
            .entries()
            .iter()
            .map(|e| WeightEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                values: model.store().data()[e.offset..e.offset + e.len].to_vec(),
            })
            .collect();
        Checkpoint {
            model_config: model.cfg().clone(),
            train_config: cfg.clone(),
            loss_config: loss_cfg.clone(),
            epoch,
            seed: cfg.seed,
            weights,
            optimizer: state.clone(),
            logs: logs.to_vec(),
        }
    }

    /// Rebuild the model with the stored weights and optimizer state.
    pub fn restore(&self) -> Result<(Model, OptimizerState), TrainError> {
        let mut model = Model::new(self.model_config.clone(), self.train_config.seed)?;
        let entries: Vec<_> = model.store().entries().to_vec();
        if entries.len() != self.weights.len() {
            return Err(TrainError::Config(format!(
                "checkpoint has {} weight tensors, model expects {}",
                self.weights.len(),
                entries.len()
            )));
        }
        for (entry, saved) in entries.iter().zip(&self.weights) {
            if entry.name != saved.name || entry.shape != saved.shape {
                return Err(TrainError::Config(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    saved.name, saved.shape, entry.name, entry.shape
                )));
            }
            if saved.values.len() != entry.len {
                return Err(TrainError::Config(format!(
                    "checkpoint tensor {} has {} values, expected {}",
                    saved.name,
                    saved.values.len(),
                    entry.len
                )));
            }
            model.store_mut().data_mut()[entry.offset..entry.offset + entry.len]
                .copy_from_slice(&saved.values);
        }
        if !self.optimizer.matches(self.train_config.optimizer, model.store().total_len()) {
            return Err(TrainError::Config(
                "checkpoint optimizer state does not match its own configuration".into(),
            ));
        }
        Ok((model, self.optimizer.clone()))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), TrainError> {
    let text = serde_json::to_string(checkpoint).map_err(|e| TrainError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| TrainError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| TrainError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Optional cleanup applied to thresholded predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    /// 3x3 morphological opening (erosion then dilation).
    pub opening: bool,
    /// Keep only the largest 4-connected foreground component.
    pub largest_component: bool,
}

fn erode3(m: &Mask) -> Mask {
    let (h, w) = m.dims();
    Mask::from_fn(h, w, |(r, c)| {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0 || rr >= h as i64 || cc < 0 || cc >= w as i64 {
                    return false;
                }
                if !m.get(rr as usize, cc as usize) {
                    return false;
                }
            }
        }
        true
    })
}

fn dilate3(m: &Mask) -> Mask {
    let (h, w) = m.dims();
    Mask::from_fn(h, w, |(r, c)| {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64
                    && m.get(rr as usize, cc as usize)
                {
                    return true;
                }
            }
        }
        false
    })
}

fn largest_component(m: &Mask) -> Mask {
    let (h, w) = m.dims();
    let mut label = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    for start in 0..h * w {
        if label[start] != usize::MAX || !m.get(start / w, start % w) {
            continue;
        }
        let id = sizes.len();
        let mut size = 0usize;
        let mut stack = vec![start];
        label[start] = id;
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut push = |rr: usize, cc: usize| {
                let q = rr * w + cc;
                if label[q] == usize::MAX && m.get(rr, cc) {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if r > 0 {
                push(r - 1, c);
            }
            if r + 1 < h {
                push(r + 1, c);
            }
            if c > 0 {
                push(r, c - 1);
            }
            if c + 1 < w {
                push(r, c + 1);
            }
        }
        sizes.push(size);
    }
    let Some(keep) = (0..sizes.len()).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))) else {
        return Mask::zeros(h, w);
    };
    Mask::from_fn(h, w, |(r, c)| label[r * w + c] == keep)
}

/// Threshold the full-resolution head probabilities into a mask, with
/// optional morphological cleanup.
pub fn predict_mask(
    model: &Model,
    image: &Grid,
    threshold: f64,
    post: &PostprocessConfig,
) -> Result<Mask, TrainError> {
    if !(threshold.is_finite() && (0.0..1.0).contains(&threshold)) {
        return Err(TrainError::Config(format!(
            "threshold must lie in [0, 1), got {threshold}"
        )));
    }
    let pred = model.forward(image)?;
    let probs = losses::sigmoid(&pred.full_logits)?;
    let mut mask = Mask::from_fn(probs.nrows(), probs.ncols(), |(r, c)| probs[[r, c]] > threshold);
    if post.opening {
        mask = dilate3(&erode3(&mask));
    }
    if post.largest_component {
        mask = largest_component(&mask);
    }
    Ok(mask)
}

/// Predict every slice, group by case id, and macro-average over cases.
pub fn evaluate(
    model: &Model,
    samples: &[SegSample],
    threshold: f64,
    post: &PostprocessConfig,
) -> Result<EvalReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    check_dataset(model, samples).map_err(|e| match e {
        TrainError::EmptyDataset => TrainError::EmptyTestSet,
        other => other,
    })?;
    let per_slice = par::map(samples, |s| -> Result<(String, SliceMetrics), TrainError> {
        let pred = predict_mask(model, &s.image, threshold, post)?;
        let slice = metrics::slice_metrics(&s.expert_mask, &pred, s.spacing)?;
        Ok((s.case_id.clone(), slice))
    });
    let mut by_case: std::collections::BTreeMap<String, Vec<SliceMetrics>> = Default::default();
    for item in per_slice {
        let (case_id, slice) = item?;
        by_case.entry(case_id).or_default().push(slice);
    }
    let mut cases = Vec::with_capacity(by_case.len());
    for (case_id, slices) in &by_case {
        cases.push(metrics::aggregate_case(case_id, slices)?);
    }
    Ok(EvalReport::from_cases(cases))
}

/// Writes `epoch,mean_loss,wall_seconds` rows. The loss uses the shortest
/// representation that parses back to the same float.
pub fn write_loss_log_csv<W: std::io::Write>(
    mut w: W,
    logs: &[EpochLog],
) -> std::io::Result<()> {
    writeln!(w, "epoch,mean_loss,wall_seconds")?;
    for log in logs {
        writeln!(w, "{},{},{:.3}", log.epoch, log.mean_loss, log.wall_seconds)?;
    }
    Ok(())
}
