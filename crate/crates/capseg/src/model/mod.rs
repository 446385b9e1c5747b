//! Deterministic encoder-decoder with deeply supervised side outputs.
//!
//! The encoder is a convolutional stem (one stride-2 stage per entry in
//! `stem_channels`) followed by non-overlapping patch embedding and a stack
//! of pre-norm transformer layers. The decoder upsamples back to input
//! resolution, concatenating the matching stem feature at every scale it has
//! one for, and emits a logit head at full resolution plus one side head per
//! configured supervision scale. All heads store raw pre-activation logits;
//! probabilities only appear inside losses and prediction thresholds.
//!
//! The whole network runs on a flat [`store::ParamStore`], and
//! [`Model::backward`] hand-propagates gradients from every head back to
//! every parameter.

pub mod layers;
pub mod store;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, Mask};
use crate::losses::{self, LossConfig, LossError, LossKind};
use layers::{
    concat_channels, relu, relu_backward, split_channels, upsample2, upsample2_backward, Conv2d,
    ConvCache, PatchEmbed, PatchEmbedCache, TransformerCache, TransformerLayer,
};
use store::{GradStore, ParamStore};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input is {got:?} but the model expects {want}x{want}")]
    InputShape { got: (usize, usize), want: usize },
    #[error("input pixel at ({row}, {col}) is {value}, expected a finite value in [0, 1]")]
    InputRange { row: usize, col: usize, value: f64 },
    #[error("prediction is missing the side output at scale 1/{0}")]
    MissingSide(usize),
    #[error("mask dims {got:?} are not divisible by downsampling factor {factor}")]
    BadDownsample { got: (usize, usize), factor: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Architecture hyperparameters. The defaults are a desk-scale preset that
/// trains in seconds; [`ModelConfig::full_scale_224`] is the full-size
/// preset with the same code path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Token patch side, measured on the input image. Must be a power of
    /// two, divisible by the stem factor 2^len(stem_channels); the effective
    /// patch on the post-stem feature map is patch_size / stem_factor.
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Number of transformer layers.
    pub depth: usize,
    pub heads: usize,
    /// Output channels of each stride-2 stem stage, shallow to deep.
    pub stem_channels: Vec<usize>,
    /// Side-output scales as denominators (2 means half resolution).
    pub supervision_scales: Vec<usize>,
    /// Loss weights: index 0 is the full-resolution head, the rest align
    /// with `supervision_scales`.
    pub scale_weights: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            patch_size: 16,
            embed_dim: 64,
            depth: 2,
            heads: 2,
            stem_channels: vec![8, 16, 32],
            supervision_scales: vec![2, 4, 8],
            scale_weights: vec![1.0, 1.0, 1.0, 1.0],
        }
    }
}

impl ModelConfig {
    /// Full-size preset: 224 input, 16-pixel patches (196 tokens), a
    /// 12-layer 768-wide transformer and a three-stage convolutional stem.
    pub fn full_scale_224() -> Self {
        ModelConfig {
            input_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            stem_channels: vec![64, 128, 256],
            supervision_scales: vec![2, 4, 8],
            scale_weights: vec![1.0, 1.0, 1.0, 1.0],
        }
    }

    /// Spatial reduction of the stem: 2 per stride-2 stage.
    pub fn stem_factor(&self) -> usize {
        1 << self.stem_channels.len()
    }

    /// Patch side on the post-stem feature map.
    pub fn effective_patch(&self) -> usize {
        self.patch_size / self.stem_factor()
    }

    /// Tokens per side of the token grid.
    pub fn token_grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Decoder stage output scales, as denominators from patch_size/2 down
    /// to 1 (full resolution).
    pub fn stage_denominators(&self) -> Vec<usize> {
        let stages = self.patch_size.trailing_zeros() as usize;
        (1..=stages).map(|k| self.patch_size >> k).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.stem_channels.is_empty() || self.stem_channels.iter().any(|&c| c == 0) {
            return fail("stem_channels must be nonempty and positive".into());
        }
        if !self.patch_size.is_power_of_two() || self.patch_size < 2 {
            return fail(format!("patch_size must be a power of two >= 2, got {}", self.patch_size));
        }
        let stem_factor = self.stem_factor();
        if self.patch_size % stem_factor != 0 {
            return fail(format!(
                "patch_size {} must be a multiple of the stem factor {stem_factor}",
                self.patch_size
            ));
        }
        if self.input_size == 0 || self.input_size % self.patch_size != 0 {
            return fail(format!(
                "input_size {} must be a positive multiple of patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        let denoms = self.stage_denominators();
        for &s in &self.supervision_scales {
            if !denoms.contains(&s) {
                return fail(format!(
                    "supervision scale 1/{s} has no decoder stage; available: {denoms:?}"
                ));
            }
            if self.input_size % s != 0 {
                return fail(format!(
                    "supervision scale 1/{s} does not evenly divide input_size {}",
                    self.input_size
                ));
            }
        }
        let mut sorted = self.supervision_scales.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.supervision_scales.len() {
            return fail("supervision_scales must be unique".into());
        }
        if self.scale_weights.len() != self.supervision_scales.len() + 1 {
            return fail(format!(
                "need {} scale_weights (full head first), got {}",
                self.supervision_scales.len() + 1,
                self.scale_weights.len()
            ));
        }
        if self.scale_weights.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return fail("scale_weights must be finite and nonnegative".into());
        }
        if self.scale_weights.iter().sum::<f64>() <= 0.0 {
            return fail("at least one scale weight must be positive".into());
        }
        Ok(())
    }

    /// Loss weight for a head, by denominator (1 = full resolution).
    fn weight_for(&self, denom: usize) -> f64 {
        if denom == 1 {
            self.scale_weights[0]
        } else {
            let idx = self
                .supervision_scales
                .iter()
                .position(|&s| s == denom)
                .expect("validated scale");
            self.scale_weights[idx + 1]
        }
    }
}

/// Logits of one forward pass: the full-resolution head plus one side head
/// per supervision scale, keyed by denominator.
#[derive(Debug, Clone)]
pub struct MultiScalePrediction {
    pub full_logits: Grid,
    pub side_logits: BTreeMap<usize, Grid>,
}

/// Gradients flowing into each head, same keying as the prediction.
#[derive(Debug, Clone)]
pub struct MultiScaleGrads {
    pub full: Grid,
    pub sides: BTreeMap<usize, Grid>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace {
    stem_pre: Vec<Array3<f64>>,
    stem_caches: Vec<ConvCache>,
    pe_cache: PatchEmbedCache,
    block_caches: Vec<TransformerCache>,
    stage_pre: Vec<Array3<f64>>,
    stage_caches: Vec<ConvCache>,
    /// Channel count of the upsampled tensor where a skip was concatenated.
    stage_split: Vec<Option<usize>>,
    head_caches: BTreeMap<usize, ConvCache>,
}

impl Trace {
    /// Attention matrices of one transformer layer, for inspection.
    pub fn attention(&self, layer: usize) -> &[Array2<f64>] {
        self.block_caches[layer].attention()
    }
}

pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    stem: Vec<Conv2d>,
    patch_embed: PatchEmbed,
    blocks: Vec<TransformerLayer>,
    up_convs: Vec<Conv2d>,
    stage_denoms: Vec<usize>,
    /// Stem stage index whose output is concatenated at each decoder stage.
    stage_skips: Vec<Option<usize>>,
    heads: BTreeMap<usize, Conv2d>,
}

impl Model {
    /// Builds and deterministically initializes the network: the same
    /// config and seed always produce bit-identical parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let mut stem = Vec::new();
        let mut c_prev = 1;
        for (i, &c_out) in cfg.stem_channels.iter().enumerate() {
            stem.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("stem{i}"),
                c_prev,
                c_out,
                3,
                2,
                1,
            ));
            c_prev = c_out;
        }

        let patch_embed = PatchEmbed::new(
            &mut store,
            &mut rng,
            "patch_embed",
            c_prev,
            cfg.effective_patch(),
            cfg.token_grid(),
            cfg.embed_dim,
        );

        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("encoder{i}"),
                    cfg.embed_dim,
                    cfg.heads,
                    4 * cfg.embed_dim,
                )
            })
            .collect::<Vec<_>>();

        let stem_factor = cfg.stem_factor();
        let mut up_convs = Vec::new();
        let mut stage_skips = Vec::new();
        let mut heads = BTreeMap::new();
        let stage_denoms = cfg.stage_denominators();
        let mut ch_prev = cfg.embed_dim;
        for (k, &denom) in stage_denoms.iter().enumerate() {
            let skip = if denom >= 2 && denom <= stem_factor {
                Some(denom.trailing_zeros() as usize - 1)
            } else {
                None
            };
            let c_in = ch_prev + skip.map_or(0, |j| cfg.stem_channels[j]);
            let c_out = match skip {
                Some(j) => cfg.stem_channels[j],
                None if denom == 1 => cfg.stem_channels[0],
                None => *cfg.stem_channels.last().expect("validated nonempty"),
            };
            up_convs.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("decoder{k}"),
                c_in,
                c_out,
                3,
                1,
                1,
            ));
            stage_skips.push(skip);
            if denom == 1 || cfg.supervision_scales.contains(&denom) {
                heads.insert(
                    denom,
                    Conv2d::new(&mut store, &mut rng, &format!("head_1_{denom}"), c_out, 1, 1, 1, 0),
                );
            }
            ch_prev = c_out;
        }

        Ok(Model {
            cfg,
            store,
            stem,
            patch_embed,
            blocks,
            up_convs,
            stage_denoms,
            stage_skips,
            heads,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, image: &Grid) -> Result<(), ModelError> {
        let want = self.cfg.input_size;
        if image.dim() != (want, want) {
            return Err(ModelError::InputShape { got: image.dim(), want });
        }
        for ((row, col), &value) in image.indexed_iter() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(ModelError::InputRange { row, col, value });
            }
        }
        Ok(())
    }

    /// Forward pass for inference.
    pub fn forward(&self, image: &Grid) -> Result<MultiScalePrediction, ModelError> {
        self.forward_trace(image).map(|(pred, _)| pred)
    }

    /// Forward pass retaining every intermediate needed by [`Model::backward`].
    pub fn forward_trace(&self, image: &Grid) -> Result<(MultiScalePrediction, Trace), ModelError> {
        self.check_input(image)?;
        let side = self.cfg.input_size;
        let mut x = Array3::zeros((1, side, side));
        x.index_axis_mut(ndarray::Axis(0), 0).assign(image);

        let mut stem_pre = Vec::new();
        let mut stem_caches = Vec::new();
        let mut skips = Vec::new();
        for conv in &self.stem {
            let (pre, cache) = conv.forward(&self.store, &x);
            x = relu(&pre);
            stem_pre.push(pre);
            stem_caches.push(cache);
            skips.push(x.clone());
        }

        let (mut tokens, pe_cache) = self.patch_embed.forward(&self.store, &x);
        let mut block_caches = Vec::new();
        for block in &self.blocks {
            let (next, cache) = block.forward(&self.store, &tokens);
            tokens = next;
            block_caches.push(cache);
        }

        let tg = self.cfg.token_grid();
        let dim = self.cfg.embed_dim;
        let mut feat = Array3::zeros((dim, tg, tg));
        for ty in 0..tg {
            for tx in 0..tg {
                for d in 0..dim {
                    feat[(d, ty, tx)] = tokens[(ty * tg + tx, d)];
                }
            }
        }

        let mut stage_pre = Vec::new();
        let mut stage_caches = Vec::new();
        let mut stage_split = Vec::new();
        let mut head_caches = BTreeMap::new();
        let mut side_logits = BTreeMap::new();
        let mut full_logits = None;
        for (k, conv) in self.up_convs.iter().enumerate() {
            let up = upsample2(&feat);
            let up_channels = up.dim().0;
            let cat = match self.stage_skips[k] {
                Some(j) => {
                    stage_split.push(Some(up_channels));
                    concat_channels(&up, &skips[j])
                }
                None => {
                    stage_split.push(None);
                    up
                }
            };
            let (pre, cache) = conv.forward(&self.store, &cat);
            feat = relu(&pre);
            stage_pre.push(pre);
            stage_caches.push(cache);

            let denom = self.stage_denoms[k];
            if let Some(head) = self.heads.get(&denom) {
                let (logits3, hcache) = head.forward(&self.store, &feat);
                let sz = logits3.dim().1;
                let logits = logits3
                    .into_shape_with_order((sz, sz))
                    .expect("single-channel head output");
                head_caches.insert(denom, hcache);
                if denom == 1 {
                    full_logits = Some(logits);
                } else {
                    side_logits.insert(denom, logits);
                }
            }
        }

        let pred = MultiScalePrediction {
            full_logits: full_logits.expect("decoder always ends with the full head"),
            side_logits,
        };
        let trace = Trace {
            stem_pre,
            stem_caches,
            pe_cache,
            block_caches,
            stage_pre,
            stage_caches,
            stage_split,
            head_caches,
        };
        Ok((pred, trace))
    }

    /// Propagates head gradients back to every parameter.
    pub fn backward(&self, trace: &Trace, head_grads: &MultiScaleGrads) -> GradStore {
        let mut grads = GradStore::zeros_like(&self.store);
        let nstages = self.up_convs.len();

        // Gradient w.r.t. each decoder stage's post-relu output.
        let mut stage_dout: Vec<Option<Array3<f64>>> = vec![None; nstages];
        let mut skip_grads: Vec<Option<Array3<f64>>> = vec![None; self.stem.len()];

        let mut apply_head = |denom: usize, dlogits: &Grid, grads: &mut GradStore| {
            let k = self
                .stage_denoms
                .iter()
                .position(|&d| d == denom)
                .expect("head denominators come from stage denominators");
            let head = &self.heads[&denom];
            let (h, w) = dlogits.dim();
            let mut d3 = Array3::zeros((1, h, w));
            d3.index_axis_mut(ndarray::Axis(0), 0).assign(dlogits);
            let dfeat = head.backward(&self.store, &trace.head_caches[&denom], &d3, grads);
            match &mut stage_dout[k] {
                Some(existing) => *existing += &dfeat,
                slot => *slot = Some(dfeat),
            }
        };

        apply_head(1, &head_grads.full, &mut grads);
        for (&denom, dlogits) in &head_grads.sides {
            apply_head(denom, dlogits, &mut grads);
        }

        let mut dfeat: Option<Array3<f64>> = None;
        for k in (0..nstages).rev() {
            let mut dout = match stage_dout[k].take() {
                Some(d) => d,
                None => Array3::zeros(trace.stage_pre[k].raw_dim()),
            };
            if let Some(d) = dfeat.take() {
                dout += &d;
            }
            let dpre = relu_backward(&dout, &trace.stage_pre[k]);
            let dcat = self.up_convs[k].backward(&self.store, &trace.stage_caches[k], &dpre, &mut grads);
            let dup = match trace.stage_split[k] {
                Some(split) => {
                    let (dup, dskip) = split_channels(&dcat, split);
                    let j = self.stage_skips[k].expect("split implies skip");
                    match &mut skip_grads[j] {
                        Some(existing) => *existing += &dskip,
                        slot => *slot = Some(dskip),
                    }
                    dup
                }
                None => dcat,
            };
            dfeat = Some(upsample2_backward(&dup));
        }

        let dtoken_feat = dfeat.expect("at least one decoder stage");
        let tg = self.cfg.token_grid();
        let dim = self.cfg.embed_dim;
        let mut dtokens = Array2::zeros((tg * tg, dim));
        for ty in 0..tg {
            for tx in 0..tg {
                for d in 0..dim {
                    dtokens[(ty * tg + tx, d)] = dtoken_feat[(d, ty, tx)];
                }
            }
        }

        for (block, cache) in self.blocks.iter().zip(trace.block_caches.iter()).rev() {
            dtokens = block.backward(&self.store, cache, &dtokens, &mut grads);
        }

        let mut dstem_out = self.patch_embed.backward(&self.store, &trace.pe_cache, &dtokens, &mut grads);
        for i in (0..self.stem.len()).rev() {
            if let Some(extra) = skip_grads[i].take() {
                dstem_out += &extra;
            }
            let dpre = relu_backward(&dstem_out, &trace.stem_pre[i]);
            let dx = self.stem[i].backward(&self.store, &trace.stem_caches[i], &dpre, &mut grads);
            if i > 0 {
                dstem_out = dx;
            }
        }

        grads
    }
}

/// Nearest-neighbour mask downsampling on the top-left lattice:
/// out[r][c] = mask[r * factor][c * factor].
pub fn downsample_mask(mask: &Mask, factor: usize) -> Result<Mask, ModelError> {
    if factor == 0 {
        return Err(ModelError::BadDownsample { got: mask.dims(), factor });
    }
    let (rows, cols) = mask.dims();
    if rows % factor != 0 || cols % factor != 0 {
        return Err(ModelError::BadDownsample { got: (rows, cols), factor });
    }
    Ok(Mask::from_fn(rows / factor, cols / factor, |(r, c)| mask.get(r * factor, c * factor)))
}

/// Deeply supervised loss: the weighted mean of the configured loss over the
/// full head and every side head, each side scored against masks
/// downsampled to its scale (hard regions are recomputed per scale).
pub fn multiscale_loss(
    pred: &MultiScalePrediction,
    expert: &Mask,
    nonexpert: &Mask,
    kind: LossKind,
    loss_cfg: &LossConfig,
    model_cfg: &ModelConfig,
) -> Result<f64, ModelError> {
    multiscale_loss_with_grads(pred, expert, nonexpert, kind, loss_cfg, model_cfg)
        .map(|(value, _)| value)
}

/// [`multiscale_loss`] plus the gradient flowing into every head.
pub fn multiscale_loss_with_grads(
    pred: &MultiScalePrediction,
    expert: &Mask,
    nonexpert: &Mask,
    kind: LossKind,
    loss_cfg: &LossConfig,
    model_cfg: &ModelConfig,
) -> Result<(f64, MultiScaleGrads), ModelError> {
    model_cfg.validate()?;
    let weight_sum: f64 = model_cfg.scale_weights.iter().sum();

    let w_full = model_cfg.weight_for(1) / weight_sum;
    let (full_value, mut full_grad) =
        losses::loss_with_grad(kind, &pred.full_logits, expert, nonexpert, loss_cfg)?;
    full_grad.mapv_inplace(|g| g * w_full);
    let mut total = w_full * full_value;

    let mut sides = BTreeMap::new();
    for &denom in &model_cfg.supervision_scales {
        let side = pred
            .side_logits
            .get(&denom)
            .ok_or(ModelError::MissingSide(denom))?;
        let expert_s = downsample_mask(expert, denom)?;
        let nonexpert_s = downsample_mask(nonexpert, denom)?;
        let w = model_cfg.weight_for(denom) / weight_sum;
        let (value, mut grad) =
            losses::loss_with_grad(kind, side, &expert_s, &nonexpert_s, loss_cfg)?;
        grad.mapv_inplace(|g| g * w);
        total += w * value;
        sides.insert(denom, grad);
    }

    Ok((total, MultiScaleGrads { full: full_grad, sides }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    /// Tiny but complete config: one stem stage, 2x2 token grid, one side
    /// head at half resolution.
    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            input_size: 8,
            patch_size: 4,
            embed_dim: 4,
            depth: 1,
            heads: 2,
            stem_channels: vec![2],
            supervision_scales: vec![2],
            scale_weights: vec![1.0, 0.7],
        }
    }

    fn random_image(seed: u64, side: usize) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((side, side), |_| rng.gen_range(0.0..1.0))
    }

    fn random_masks(seed: u64, side: usize) -> (Mask, Mask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let expert = Mask::from_fn(side, side, |_| rng.gen_bool(0.4));
        let nonexpert = Mask::from_fn(side, side, |_| rng.gen_bool(0.4));
        (expert, nonexpert)
    }

    #[test]
    fn default_config_validates_and_partitions_scales() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stem_factor(), 8);
        assert_eq!(cfg.effective_patch(), 2);
        assert_eq!(cfg.token_grid(), 4);
        assert_eq!(cfg.stage_denominators(), vec![8, 4, 2, 1]);
        ModelConfig::full_scale_224().validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_inconsistencies() {
        let bad = ModelConfig { patch_size: 12, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { patch_size: 4, ..ModelConfig::default() };
        // 4 is a power of two but smaller than the stem factor 8.
        assert!(bad.validate().is_err());
        let bad = ModelConfig { input_size: 60, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { embed_dim: 63, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { supervision_scales: vec![2, 16], ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { scale_weights: vec![1.0, 1.0], ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { scale_weights: vec![0.0; 4], ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { scale_weights: vec![1.0, -1.0, 1.0, 1.0], ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn desk_forward_produces_all_scales_with_right_shapes() {
        let model = Model::new(ModelConfig::default(), 7).unwrap();
        let image = random_image(1, 64);
        let pred = model.forward(&image).unwrap();
        assert_eq!(pred.full_logits.dim(), (64, 64));
        assert_eq!(pred.side_logits[&2].dim(), (32, 32));
        assert_eq!(pred.side_logits[&4].dim(), (16, 16));
        assert_eq!(pred.side_logits[&8].dim(), (8, 8));
        assert_eq!(pred.side_logits.len(), 3);
    }

    #[test]
    fn input_validation_rejects_wrong_shape_and_range() {
        let model = Model::new(micro_cfg(), 0).unwrap();
        let wrong = Array2::zeros((4, 4));
        assert!(matches!(model.forward(&wrong), Err(ModelError::InputShape { .. })));
        let mut out_of_range = Array2::zeros((8, 8));
        out_of_range[(2, 3)] = 1.5;
        assert!(matches!(model.forward(&out_of_range), Err(ModelError::InputRange { .. })));
        let mut nan = Array2::zeros((8, 8));
        nan[(0, 0)] = f64::NAN;
        assert!(matches!(model.forward(&nan), Err(ModelError::InputRange { .. })));
    }

    #[test]
    fn same_seed_same_weights_different_seed_different_weights() {
        let a = Model::new(ModelConfig::default(), 42).unwrap();
        let b = Model::new(ModelConfig::default(), 42).unwrap();
        let c = Model::new(ModelConfig::default(), 43).unwrap();
        assert_eq!(a.store().data(), b.store().data());
        assert_ne!(a.store().data(), c.store().data());
    }

    #[test]
    fn downsample_mask_samples_top_left_lattice() {
        // 4x4 checkerboard with true at even parity: sampled pixels are
        // (0,0),(0,2),(2,0),(2,2), all even parity, so all true.
        let board = Mask::from_fn(4, 4, |(r, c)| (r + c) % 2 == 0);
        let down = downsample_mask(&board, 2).unwrap();
        assert_eq!(down.dims(), (2, 2));
        assert_eq!(down.count(), 4);
        assert!(matches!(
            downsample_mask(&board, 3),
            Err(ModelError::BadDownsample { .. })
        ));
        assert_eq!(downsample_mask(&board, 1).unwrap(), board);
    }

    #[test]
    fn multiscale_loss_missing_side_is_a_config_error() {
        let model = Model::new(micro_cfg(), 3).unwrap();
        let image = random_image(2, 8);
        let (expert, nonexpert) = random_masks(3, 8);
        let mut pred = model.forward(&image).unwrap();
        pred.side_logits.clear();
        let err = multiscale_loss(
            &pred,
            &expert,
            &nonexpert,
            LossKind::Focal,
            &LossConfig::default(),
            model.cfg(),
        )
        .unwrap_err();
        assert_eq!(err, ModelError::MissingSide(2));
    }

    #[test]
    fn multiscale_with_full_weight_only_equals_plain_loss() {
        let cfg = ModelConfig { scale_weights: vec![2.0, 0.0], ..micro_cfg() };
        let model = Model::new(cfg, 4).unwrap();
        let image = random_image(5, 8);
        let (expert, nonexpert) = random_masks(6, 8);
        let pred = model.forward(&image).unwrap();
        let lcfg = LossConfig::default();
        let ms = multiscale_loss(&pred, &expert, &nonexpert, LossKind::AdaptiveFocal, &lcfg, model.cfg())
            .unwrap();
        let (plain, _) =
            crate::losses::adaptive_focal_loss(&pred.full_logits, &expert, &nonexpert, &lcfg)
                .unwrap();
        assert_abs_diff_eq!(ms, plain, epsilon = 1e-12);
    }

    #[test]
    fn every_head_receives_nonzero_gradient() {
        let model = Model::new(ModelConfig::default(), 9).unwrap();
        let image = random_image(10, 64);
        let (expert, nonexpert) = random_masks(11, 64);
        let (pred, trace) = model.forward_trace(&image).unwrap();
        let (_, head_grads) = multiscale_loss_with_grads(
            &pred,
            &expert,
            &nonexpert,
            LossKind::AdaptiveFocal,
            &LossConfig::default(),
            model.cfg(),
        )
        .unwrap();
        let grads = model.backward(&trace, &head_grads);
        for denom in [1usize, 2, 4, 8] {
            let name = format!("head_1_{denom}.weight");
            let entry = model
                .store()
                .entries()
                .iter()
                .find(|e| e.name == name)
                .expect("head exists");
            let slice = &grads.data()[entry.offset..entry.offset + entry.len];
            assert!(
                slice.iter().any(|&g| g != 0.0),
                "head {name} received no gradient"
            );
        }
        // And the earliest parameter of all: the first stem conv.
        let first = &model.store().entries()[0];
        let slice = &grads.data()[first.offset..first.offset + first.len];
        assert!(slice.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn attention_is_exposed_through_the_trace() {
        let model = Model::new(micro_cfg(), 5).unwrap();
        let image = random_image(12, 8);
        let (_, trace) = model.forward_trace(&image).unwrap();
        let attn = trace.attention(0);
        assert_eq!(attn.len(), 2);
        for a in attn {
            assert_eq!(a.dim(), (4, 4));
            for row in a.outer_iter() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn model_gradients_match_finite_differences_end_to_end() {
        // Full pipeline check on the micro model: multiscale focal loss
        // through every head, gradients for every parameter in the store.
        let mut model = Model::new(micro_cfg(), 6).unwrap();
        // Zero-initialized conv biases leave some decoder pre-activations
        // exactly on the relu kink (dead upstream patches produce all-zero
        // receptive fields), where the derivative is undefined and central
        // differences disagree with any subgradient choice. Jitter every
        // parameter off the kink before probing.
        let mut jitter = ChaCha8Rng::seed_from_u64(99);
        for v in model.store_mut().data_mut() {
            *v += jitter.gen_range(-0.05..0.05);
        }
        let image = random_image(13, 8);
        let (expert, nonexpert) = random_masks(14, 8);
        let lcfg = LossConfig { epsilon: 0.0, ..LossConfig::default() };

        let (pred, trace) = model.forward_trace(&image).unwrap();
        let (_, head_grads) = multiscale_loss_with_grads(
            &pred,
            &expert,
            &nonexpert,
            LossKind::Focal,
            &lcfg,
            &micro_cfg(),
        )
        .unwrap();
        let analytic = model.backward(&trace, &head_grads);

        let h = 1e-5;
        let mut max_diff = 0.0f64;
        let mut max_mag = 0.0f64;
        for i in 0..model.store().total_len() {
            let orig = model.store().data()[i];
            model.store_mut().data_mut()[i] = orig + h;
            let fp = {
                let pred = model.forward(&image).unwrap();
                multiscale_loss(&pred, &expert, &nonexpert, LossKind::Focal, &lcfg, &micro_cfg())
                    .unwrap()
            };
            model.store_mut().data_mut()[i] = orig - h;
            let fm = {
                let pred = model.forward(&image).unwrap();
                multiscale_loss(&pred, &expert, &nonexpert, LossKind::Focal, &lcfg, &micro_cfg())
                    .unwrap()
            };
            model.store_mut().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            max_mag = max_mag.max(numeric.abs()).max(a.abs());
        }
        let rel = max_diff / max_mag.max(1e-8);
        assert!(rel < 1e-5, "end-to-end gradient relative error {rel}");
    }

    #[test]
    fn side_heads_store_preactivation_logits() {
        // Logits must be unbounded, not squashed: drive the model with a
        // constant bright image and check some logit lies outside (0, 1),
        // or at minimum that values are not all inside the sigmoid range
        // by construction. A freshly initialized model emits small logits,
        // so instead verify no activation was applied by comparing the
        // head's raw linear output with the stored prediction.
        let model = Model::new(micro_cfg(), 8).unwrap();
        let image = random_image(15, 8);
        let (pred, trace) = model.forward_trace(&image).unwrap();
        // Recompute the full head by hand from the last stage output.
        let plus = {
            let (pre_last, _) = (&trace.stage_pre.last().unwrap(), ());
            relu(pre_last)
        };
        let head = &model.heads[&1];
        let (manual3, _) = head.forward(model.store(), &plus);
        let manual = manual3.index_axis(ndarray::Axis(0), 0);
        for (a, b) in manual.iter().zip(pred.full_logits.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
