//! Loss functions for binary segmentation from paired expert/non-expert
//! annotations.
//!
//! The centrepiece is [`adaptive_focal_loss`]: each slice is split into a
//! hard region (the dilated disagreement between the two annotators) and an
//! easy region (everything else), a per-pixel focal map is computed against
//! the expert mask, and the two regional sums are reweighted by an adaptive
//! exponent `gamma_a` that grows with prediction difficulty and annotation
//! variability. Baselines with the same calling convention: a standard focal
//! loss, an annotation-guided BCE with fixed region weights, and a Dice loss
//! for optional compounding.
//!
//! Every loss exposes an analytic gradient with respect to its logits.
//! `gamma_a` is treated as a constant in those gradients; the forced-gamma
//! entry points evaluate the loss at a pinned `gamma_a` so that finite
//! differences can be taken against exactly the function the gradient
//! differentiates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, Mask, MaskError};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("{what} contains non-finite value at ({row}, {col})")]
    NonFinite { what: &'static str, row: usize, col: usize },
    #[error("{what} value {value} at ({row}, {col}) is outside [0, 1]")]
    OutOfRange { what: &'static str, row: usize, col: usize, value: f64 },
    #[error("input grid is empty")]
    EmptyInput,
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// How annotation variability is scored for the adaptive exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariabilityMode {
    /// Foreground fraction of the non-expert mask.
    Literal,
    /// Fraction of pixels where the two annotators disagree.
    Disagreement,
}

impl std::fmt::Display for VariabilityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VariabilityMode::Literal => "literal",
            VariabilityMode::Disagreement => "disagreement",
        })
    }
}

impl std::str::FromStr for VariabilityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literal" => Ok(VariabilityMode::Literal),
            "disagreement" => Ok(VariabilityMode::Disagreement),
            other => Err(format!(
                "unknown variability mode {other:?}, expected literal or disagreement"
            )),
        }
    }
}

/// Which training loss drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    AdaptiveFocal,
    Focal,
    AgBce,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::AdaptiveFocal, LossKind::Focal, LossKind::AgBce];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::AdaptiveFocal => "adaptive_focal",
            LossKind::Focal => "focal",
            LossKind::AgBce => "ag_bce",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive_focal" => Ok(LossKind::AdaptiveFocal),
            "focal" => Ok(LossKind::Focal),
            "ag_bce" => Ok(LossKind::AgBce),
            other => Err(format!(
                "unknown loss kind {other:?}, expected adaptive_focal, focal or ag_bce"
            )),
        }
    }
}

/// Shared configuration for all region-weighted losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Scale applied to every focal term.
    pub beta: f64,
    /// Fixed focusing exponent of the per-pixel focal map.
    pub gamma_f: f64,
    /// Stability offset inside logarithms. Zero is allowed so closed-form
    /// hand computations hold exactly; keep it positive for training.
    pub epsilon: f64,
    /// Side of the square dilation kernel that grows raw disagreement into
    /// the hard region. Must be odd; 1 disables dilation.
    pub kernel_size: usize,
    /// Clamp bounds for the adaptive exponent.
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub variability_mode: VariabilityMode,
    /// Region weights for the BCE baseline.
    pub hard_weight: f64,
    pub easy_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 1.0,
            gamma_f: 2.0,
            epsilon: 1e-7,
            kernel_size: 5,
            gamma_min: 0.05,
            gamma_max: 2.0,
            variability_mode: VariabilityMode::Literal,
            hard_weight: 4.0,
            easy_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let fail = |msg: String| Err(LossError::InvalidConfig(msg));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be positive and finite, got {}", self.beta));
        }
        if !(self.gamma_f >= 0.0 && self.gamma_f.is_finite()) {
            return fail(format!("gamma_f must be nonnegative, got {}", self.gamma_f));
        }
        if !(0.0..1e-3).contains(&self.epsilon) {
            return fail(format!("epsilon must lie in [0, 1e-3), got {}", self.epsilon));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= self.gamma_max && self.gamma_max.is_finite())
        {
            return fail(format!(
                "need 0 < gamma_min <= gamma_max, got [{}, {}]",
                self.gamma_min, self.gamma_max
            ));
        }
        if !(self.hard_weight > 0.0 && self.easy_weight > 0.0) {
            return fail(format!(
                "region weights must be positive, got hard {} easy {}",
                self.hard_weight, self.easy_weight
            ));
        }
        Ok(())
    }
}

fn check_shapes(a: (usize, usize), b: (usize, usize)) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(a, b))
    }
}

fn check_probs(probs: &Grid, what: &'static str) -> Result<(), LossError> {
    for ((row, col), &value) in probs.indexed_iter() {
        if !(0.0..=1.0).contains(&value) {
            return Err(LossError::OutOfRange { what, row, col, value });
        }
    }
    Ok(())
}

fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic map from logits to probabilities in (0, 1).
pub fn sigmoid(logits: &Grid) -> Result<Grid, LossError> {
    if logits.is_empty() {
        return Err(LossError::EmptyInput);
    }
    for ((row, col), &value) in logits.indexed_iter() {
        if !value.is_finite() {
            return Err(LossError::NonFinite { what: "logits", row, col });
        }
    }
    Ok(logits.mapv(sigmoid_scalar))
}

/// Per-pixel focal value and its derivative with respect to the logit.
///
/// With p_t = s for foreground targets and 1 - s otherwise, the value is
/// -beta * (1 - p_t)^gamma_f * ln(p_t + epsilon). The derivative uses the
/// identity s(1 - s) = p_t(1 - p_t), so only nonnegative powers of
/// (1 - p_t) appear and saturated predictions stay finite. Values are
/// floored at zero: for epsilon > 0 and p_t within epsilon of 1 the raw
/// formula dips below zero by O(epsilon), and the floor keeps every loss
/// nonnegative; the gradient is zeroed where the floor binds.
fn focal_pixel(s: f64, target: bool, cfg: &LossConfig) -> (f64, f64) {
    let p_t = if target { s } else { 1.0 - s };
    let one_minus = 1.0 - p_t;
    let log_term = (p_t + cfg.epsilon).ln();
    let value = -cfg.beta * one_minus.powf(cfg.gamma_f) * log_term;
    if value <= 0.0 {
        return (0.0, 0.0);
    }
    let sign = if target { 1.0 } else { -1.0 };
    let grad = sign
        * cfg.beta
        * (cfg.gamma_f * p_t * one_minus.powf(cfg.gamma_f) * log_term
            - p_t * one_minus.powf(cfg.gamma_f + 1.0) / (p_t + cfg.epsilon));
    (value, grad)
}

/// Per-pixel binary cross-entropy value and logit derivative, with the same
/// zero floor as [`focal_pixel`].
fn bce_pixel(s: f64, target: bool, epsilon: f64) -> (f64, f64) {
    let (value, grad) = if target {
        (-(s + epsilon).ln(), -s * (1.0 - s) / (s + epsilon))
    } else {
        (-(1.0 - s + epsilon).ln(), s * (1.0 - s) / (1.0 - s + epsilon))
    };
    if value <= 0.0 {
        (0.0, 0.0)
    } else {
        (value, grad)
    }
}

/// Unreduced per-pixel focal map of `probs` against `targets`.
pub fn focal_loss_map(probs: &Grid, targets: &Mask, cfg: &LossConfig) -> Result<Grid, LossError> {
    cfg.validate()?;
    check_shapes(probs.dim(), targets.dims())?;
    if probs.is_empty() {
        return Err(LossError::EmptyInput);
    }
    check_probs(probs, "probs")?;
    let mut map = Array2::zeros(probs.dim());
    for ((idx, out), (&s, &t)) in map
        .indexed_iter_mut()
        .zip(probs.iter().zip(targets.data().iter()))
    {
        let _ = idx;
        *out = focal_pixel(s, t, cfg).0;
    }
    Ok(map)
}

/// Morphological dilation with an all-ones square kernel of odd side
/// `kernel_size`, zero padded: a pixel is set when any input pixel within
/// Chebyshev radius (kernel_size - 1) / 2 is set.
pub fn dilate_square(mask: &Mask, kernel_size: usize) -> Result<Mask, LossError> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(LossError::InvalidConfig(format!(
            "dilation kernel_size must be odd, got {kernel_size}"
        )));
    }
    let (rows, cols) = mask.dims();
    let radius = (kernel_size - 1) / 2;
    if radius == 0 {
        return Ok(mask.clone());
    }
    let out = Mask::from_fn(rows, cols, |(r, c)| {
        let r0 = r.saturating_sub(radius);
        let r1 = (r + radius).min(rows.saturating_sub(1));
        let c0 = c.saturating_sub(radius);
        let c1 = (c + radius).min(cols.saturating_sub(1));
        for rr in r0..=r1 {
            for cc in c0..=c1 {
                if mask.get(rr, cc) {
                    return true;
                }
            }
        }
        false
    });
    Ok(out)
}

/// Hard region: annotator disagreement (pixelwise xor) dilated by the
/// configured square kernel. Always a superset of the raw disagreement.
pub fn hard_region_map(
    expert: &Mask,
    nonexpert: &Mask,
    kernel_size: usize,
) -> Result<Mask, LossError> {
    let raw = expert.xor(nonexpert)?;
    dilate_square(&raw, kernel_size)
}

/// Difficulty of a slice for the current model: one minus the mean predicted
/// foreground probability. Confident foreground everywhere scores near 0,
/// all-background predictions near 1.
pub fn sample_difficulty(probs: &Grid) -> Result<f64, LossError> {
    if probs.is_empty() {
        return Err(LossError::EmptyInput);
    }
    check_probs(probs, "probs")?;
    Ok(1.0 - probs.sum() / probs.len() as f64)
}

/// Annotation variability of a slice under the configured mode.
pub fn annotation_variability(
    nonexpert: &Mask,
    expert: &Mask,
    mode: VariabilityMode,
) -> Result<f64, LossError> {
    if nonexpert.is_empty() {
        return Err(LossError::EmptyInput);
    }
    check_shapes(nonexpert.dims(), expert.dims())?;
    match mode {
        VariabilityMode::Literal => Ok(nonexpert.mean()),
        VariabilityMode::Disagreement => Ok(nonexpert.xor(expert)?.mean()),
    }
}

/// Adaptive exponent: difficulty plus variability, clamped to the configured
/// band so neither region's weight can vanish or explode.
pub fn adaptive_gamma(difficulty: f64, variability: f64, cfg: &LossConfig) -> f64 {
    (difficulty + variability).clamp(cfg.gamma_min, cfg.gamma_max)
}

/// Per-sample diagnostics of one adaptive focal evaluation.
///
/// `hard_loss` and `easy_loss` are unnormalized sums of the focal map over
/// their regions; `total` already includes the gamma weighting and the
/// division by `n_pixels`.
#[derive(Debug, Clone)]
pub struct AdaptiveLossBreakdown {
    pub hard_map: Mask,
    pub easy_map: Mask,
    pub hard_loss: f64,
    pub easy_loss: f64,
    pub sample_difficulty: f64,
    pub annotation_variability: f64,
    pub gamma_a: f64,
    pub n_pixels: usize,
    pub total: f64,
}

fn adaptive_core(
    logits: &Grid,
    expert: &Mask,
    nonexpert: &Mask,
    cfg: &LossConfig,
    forced_gamma: Option<f64>,
) -> Result<(Grid, AdaptiveLossBreakdown), LossError> {
    cfg.validate()?;
    check_shapes(logits.dim(), expert.dims())?;
    check_shapes(logits.dim(), nonexpert.dims())?;
    let probs = sigmoid(logits)?;

    let hard_map = hard_region_map(expert, nonexpert, cfg.kernel_size)?;
    let easy_map = hard_map.complement();

    let mut hard_loss = 0.0;
    let mut easy_loss = 0.0;
    let mut pixel_grads = Array2::zeros(logits.dim());
    for ((idx, grad_out), (&s, &t)) in pixel_grads
        .indexed_iter_mut()
        .zip(probs.iter().zip(expert.data().iter()))
    {
        let (value, grad) = focal_pixel(s, t, cfg);
        if hard_map.get(idx.0, idx.1) {
            hard_loss += value;
        } else {
            easy_loss += value;
        }
        *grad_out = grad;
    }

    let difficulty = sample_difficulty(&probs)?;
    let variability = annotation_variability(nonexpert, expert, cfg.variability_mode)?;
    let gamma_a = forced_gamma.unwrap_or_else(|| adaptive_gamma(difficulty, variability, cfg));

    let n_pixels = logits.len();
    let n = n_pixels as f64;
    let total = (gamma_a * hard_loss + easy_loss / gamma_a) / n;

    // gamma_a is a constant of the backward pass: each pixel's gradient is
    // its focal derivative scaled by the weight of the region it sits in.
    for (idx, grad) in pixel_grads.indexed_iter_mut() {
        let weight = if hard_map.get(idx.0, idx.1) { gamma_a } else { 1.0 / gamma_a };
        *grad *= weight / n;
    }

    let breakdown = AdaptiveLossBreakdown {
        hard_map,
        easy_map,
        hard_loss,
        easy_loss,
        sample_difficulty: difficulty,
        annotation_variability: variability,
        gamma_a,
        n_pixels,
        total,
    };
    Ok((pixel_grads, breakdown))
}

/// Adaptive focal loss of one slice. Returns the scalar loss and the full
/// breakdown used to compute it.
pub fn adaptive_focal_loss(
    logits: &Grid,
    expert: &Mask,
    nonexpert: &Mask,
    cfg: &LossConfig,
) -> Result<(f64, AdaptiveLossBreakdown), LossError> {
    let (_, breakdown) = adaptive_core(logits, expert, nonexpert, cfg, None)?;
    Ok((breakdown.total, breakdown))
}

/// Adaptive focal loss plus its gradient with respect to `logits`.
pub fn adaptive_focal_loss_with_grad(
    logits: &Grid,
    expert: &Mask,
    nonexpert: &Mask,
    cfg: &LossConfig,
) -> Result<(f64, Grid, AdaptiveLossBreakdown), LossError> {
    let (grad, breakdown) = adaptive_core(logits, expert, nonexpert, cfg, None)?;
    Ok((breakdown.total, grad, breakdown))
}

/// Adaptive focal loss with `gamma_a` pinned instead of derived from the
/// prediction. Pinning at 1 collapses the loss to the plain mean focal map;
/// pinning at the forward value makes the loss exactly the function the
/// analytic gradient differentiates, which is what finite-difference checks
/// must probe.
pub fn adaptive_focal_loss_forced_gamma(
    logits: &Grid,
    expert: &Mask,
    nonexpert: &Mask,
    cfg: &LossConfig,
    gamma_a: f64,
) -> Result<(f64, AdaptiveLossBreakdown), LossError> {
    if !(gamma_a.is_finite() && gamma_a > 0.0) {
        return Err(LossError::InvalidConfig(format!(
            "forced gamma_a must be positive and finite, got {gamma_a}"
        )));
    }
    let (_, breakdown) = adaptive_core(logits, expert, nonexpert, cfg, Some(gamma_a))?;
    Ok((breakdown.total, breakdown))
}

/// Standard focal loss: mean of the focal map against `targets`.
pub fn standard_focal_loss(
    logits: &Grid,
    targets: &Mask,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    standard_focal_loss_with_grad(logits, targets, cfg).map(|(value, _)| value)
}

/// Standard focal loss plus its gradient with respect to `logits`.
pub fn standard_focal_loss_with_grad(
    logits: &Grid,
    targets: &Mask,
    cfg: &LossConfig,
) -> Result<(f64, Grid), LossError> {
    cfg.validate()?;
    check_shapes(logits.dim(), targets.dims())?;
    let probs = sigmoid(logits)?;
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Array2::zeros(logits.dim());
    for (out, (&s, &t)) in grads.iter_mut().zip(probs.iter().zip(targets.data().iter())) {
        let (value, grad) = focal_pixel(s, t, cfg);
        total += value;
        *out = grad / n;
    }
    Ok((total / n, grads))
}

/// Annotation-guided BCE baseline: per-pixel BCE against the expert mask,
/// with the hard region (dilated disagreement) weighted by `hard_weight` and
/// the rest by `easy_weight`, normalized by pixel count.
pub fn ag_bce_loss(
    logits: &Grid,
    expert: &Mask,
    nonexpert: &Mask,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    ag_bce_loss_with_grad(logits, expert, nonexpert, cfg).map(|(value, _)| value)
}

/// Annotation-guided BCE plus its gradient with respect to `logits`.
pub fn ag_bce_loss_with_grad(
    logits: &Grid,
    expert: &Mask,
    nonexpert: &Mask,
    cfg: &LossConfig,
) -> Result<(f64, Grid), LossError> {
    cfg.validate()?;
    check_shapes(logits.dim(), expert.dims())?;
    check_shapes(logits.dim(), nonexpert.dims())?;
    let probs = sigmoid(logits)?;
    let hard_map = hard_region_map(expert, nonexpert, cfg.kernel_size)?;
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Array2::zeros(logits.dim());
    for ((idx, out), (&s, &t)) in grads
        .indexed_iter_mut()
        .zip(probs.iter().zip(expert.data().iter()))
    {
        let weight =
            if hard_map.get(idx.0, idx.1) { cfg.hard_weight } else { cfg.easy_weight };
        let (value, grad) = bce_pixel(s, t, cfg.epsilon);
        total += weight * value;
        *out = weight * grad / n;
    }
    Ok((total / n, grads))
}

/// Soft Dice loss over probabilities: 1 - (2*intersection + smooth) /
/// (sum(probs) + sum(targets) + smooth).
pub fn dice_loss(probs: &Grid, targets: &Mask, smooth: f64) -> Result<f64, LossError> {
    dice_loss_with_grad(probs, targets, smooth).map(|(value, _)| value)
}

/// Dice loss plus its gradient with respect to `probs` (not logits; chain
/// through the sigmoid derivative when compounding with a logit-space loss).
pub fn dice_loss_with_grad(
    probs: &Grid,
    targets: &Mask,
    smooth: f64,
) -> Result<(f64, Grid), LossError> {
    if !(smooth >= 0.0 && smooth.is_finite()) {
        return Err(LossError::InvalidConfig(format!(
            "dice smooth must be nonnegative, got {smooth}"
        )));
    }
    check_shapes(probs.dim(), targets.dims())?;
    if probs.is_empty() {
        return Err(LossError::EmptyInput);
    }
    check_probs(probs, "probs")?;
    let target_grid = targets.to_grid();
    let intersection: f64 = probs.iter().zip(target_grid.iter()).map(|(p, t)| p * t).sum();
    let union: f64 = probs.sum() + target_grid.sum();
    let denom = union + smooth;
    if denom == 0.0 {
        // Both sides empty and smooth = 0: perfect agreement by convention.
        return Ok((0.0, Array2::zeros(probs.dim())));
    }
    let value = 1.0 - (2.0 * intersection + smooth) / denom;
    let numer = 2.0 * intersection + smooth;
    let grads = Array2::from_shape_fn(probs.dim(), |idx| {
        let t = target_grid[idx];
        -(2.0 * t * denom - numer) / (denom * denom)
    });
    Ok((value, grads))
}

/// Dispatches a training loss by kind, always returning the scalar loss and
/// its gradient with respect to `logits`. The focal baseline trains against
/// the expert mask alone.
pub fn loss_with_grad(
    kind: LossKind,
    logits: &Grid,
    expert: &Mask,
    nonexpert: &Mask,
    cfg: &LossConfig,
) -> Result<(f64, Grid), LossError> {
    match kind {
        LossKind::AdaptiveFocal => adaptive_focal_loss_with_grad(logits, expert, nonexpert, cfg)
            .map(|(value, grad, _)| (value, grad)),
        LossKind::Focal => standard_focal_loss_with_grad(logits, expert, cfg),
        LossKind::AgBce => ag_bce_loss_with_grad(logits, expert, nonexpert, cfg),
    }
}
