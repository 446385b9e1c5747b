//! Sample ingestion, preprocessing, augmentation, and a synthetic
//! fuzzy-boundary generator for desk-scale experiments.
//!
//! Disk layout: `root/<split>/images`, `root/<split>/masks_expert`,
//! `root/<split>/masks_nonexpert`, with `caseID_sliceIndex` file stems and
//! 8-bit grayscale PNG content. Images are scaled to [0,1] on load; masks
//! are thresholded at 128. An optional `meta.json` next to the three
//! directories carries pixel spacing; without it spacing defaults to
//! 1.0 per pixel.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, Mask};
use crate::par;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("image has non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("sample {case_id}_{slice_index}: grid shapes disagree")]
    ShapeMismatch { case_id: String, slice_index: u32 },
    #[error("expert mask missing for image {0}")]
    MissingExpertMask(PathBuf),
    #[error("expert mask {0} has no matching image")]
    UnmatchedExpertMask(PathBuf),
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
}

/// Dataset partition. Maps to the on-disk split directory name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::Config(format!(
                "unknown split {other:?}, expected train or test"
            ))),
        }
    }
}

/// One 2D slice: the image plus its expert and non-expert annotations.
///
/// All three grids share a shape, image values live in [0,1], and
/// `spacing` is the physical (dy, dx) size of one pixel.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub case_id: String,
    pub slice_index: u32,
    pub image: Grid,
    pub expert_mask: Mask,
    pub nonexpert_mask: Mask,
    pub spacing: (f64, f64),
}

impl SegSample {
    pub fn validate(&self) -> Result<(), DataError> {
        let dims = self.image.dim();
        if self.expert_mask.dims() != dims || self.nonexpert_mask.dims() != dims {
            return Err(DataError::ShapeMismatch {
                case_id: self.case_id.clone(),
                slice_index: self.slice_index,
            });
        }
        for ((row, col), &v) in self.image.indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::NonFinite { row, col, value: v });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Config(format!(
                    "sample {}_{}: image value {v} at ({row}, {col}) outside [0,1]",
                    self.case_id, self.slice_index
                )));
            }
        }
        if self.spacing.0 <= 0.0 || self.spacing.1 <= 0.0 {
            return Err(DataError::Config(format!(
                "sample {}_{}: spacing must be positive",
                self.case_id, self.slice_index
            )));
        }
        Ok(())
    }

    /// File stem used for all three PNG files of this sample.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.case_id, self.slice_index)
    }
}

/// Min-max rescale to [0,1]. A constant image maps to all zeros.
pub fn normalize(image: &Grid) -> Result<Grid, DataError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ((row, col), &v) in image.indexed_iter() {
        if !v.is_finite() {
            return Err(DataError::NonFinite { row, col, value: v });
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let range = hi - lo;
        Ok(image.mapv(|v| (v - lo) / range))
    } else {
        Ok(Grid::zeros(image.dim()))
    }
}

fn bilinear_at(g: &Grid, fy: f64, fx: f64) -> f64 {
    let (h, w) = g.dim();
    let y0 = fy.floor();
    let x0 = fx.floor();
    let dy = fy - y0;
    let dx = fx - x0;
    let mut acc = 0.0;
    for (yy, wy) in [(y0, 1.0 - dy), (y0 + 1.0, dy)] {
        if wy == 0.0 || yy < 0.0 || yy >= h as f64 {
            continue;
        }
        for (xx, wx) in [(x0, 1.0 - dx), (x0 + 1.0, dx)] {
            if wx == 0.0 || xx < 0.0 || xx >= w as f64 {
                continue;
            }
            acc += wy * wx * g[[yy as usize, xx as usize]];
        }
    }
    acc
}

fn resize_bilinear(g: &Grid, th: usize, tw: usize) -> Grid {
    let (h, w) = g.dim();
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(r, c)| {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        bilinear_at(g, fy, fx)
    })
}

fn resize_nearest(m: &Mask, th: usize, tw: usize) -> Mask {
    let (h, w) = m.dims();
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    Mask::from_fn(th, tw, |(r, c)| {
        let src_r = (((r as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let src_c = (((c as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        m.get(src_r, src_c)
    })
}

/// Resize a sample to `target` x `target`: bilinear for the image,
/// nearest-neighbour for the masks so they stay binary. Spacing rescales
/// so that extent (pixel count times spacing) is preserved per axis.
pub fn resize(sample: &SegSample, target: usize) -> Result<SegSample, DataError> {
    if target == 0 {
        return Err(DataError::Config("resize target must be positive".into()));
    }
    let (h, w) = sample.image.dim();
    if (h, w) == (target, target) {
        return Ok(sample.clone());
    }
    let image = resize_bilinear(&sample.image, target, target)
        .mapv(|v| v.clamp(0.0, 1.0));
    Ok(SegSample {
        case_id: sample.case_id.clone(),
        slice_index: sample.slice_index,
        image,
        expert_mask: resize_nearest(&sample.expert_mask, target, target),
        nonexpert_mask: resize_nearest(&sample.nonexpert_mask, target, target),
        spacing: (
            sample.spacing.0 * h as f64 / target as f64,
            sample.spacing.1 * w as f64 / target as f64,
        ),
    })
}

/// Random geometric and intensity perturbations for training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation_degrees: f64,
    pub horizontal_flip: bool,
    pub intensity_scale_range: (f64, f64),
    pub intensity_shift_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_degrees: 15.0,
            horizontal_flip: true,
            intensity_scale_range: (0.9, 1.1),
            intensity_shift_range: (-0.1, 0.1),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.max_rotation_degrees >= 0.0) {
            return Err(DataError::Config("max_rotation_degrees must be >= 0".into()));
        }
        for (name, (lo, hi)) in [
            ("intensity_scale_range", self.intensity_scale_range),
            ("intensity_shift_range", self.intensity_shift_range),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(DataError::Config(format!("{name} must be an ordered finite pair")));
            }
        }
        Ok(())
    }
}

fn rotate_grid_bilinear(g: &Grid, degrees: f64) -> Grid {
    let (h, w) = g.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((h, w), |(r, c)| {
        let y = r as f64 - cy;
        let x = c as f64 - cx;
        bilinear_at(g, cos * y + sin * x + cy, -sin * y + cos * x + cx)
    })
}

fn rotate_mask_nearest(m: &Mask, degrees: f64) -> Mask {
    let (h, w) = m.dims();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    Mask::from_fn(h, w, |(r, c)| {
        let y = r as f64 - cy;
        let x = c as f64 - cx;
        let sr = (cos * y + sin * x + cy).round();
        let sc = (-sin * y + cos * x + cx).round();
        sr >= 0.0 && sr < h as f64 && sc >= 0.0 && sc < w as f64
            && m.get(sr as usize, sc as usize)
    })
}

fn flip_grid(g: &Grid) -> Grid {
    let (h, w) = g.dim();
    Array2::from_shape_fn((h, w), |(r, c)| g[[r, w - 1 - c]])
}

fn flip_mask(m: &Mask) -> Mask {
    let (h, w) = m.dims();
    Mask::from_fn(h, w, |(r, c)| m.get(r, w - 1 - c))
}

/// Mirror a sample left-right. Applying it twice restores the original.
pub fn flip_horizontal(sample: &SegSample) -> SegSample {
    SegSample {
        case_id: sample.case_id.clone(),
        slice_index: sample.slice_index,
        image: flip_grid(&sample.image),
        expert_mask: flip_mask(&sample.expert_mask),
        nonexpert_mask: flip_mask(&sample.nonexpert_mask),
        spacing: sample.spacing,
    }
}

/// Apply one random augmentation draw. The same spatial transform hits the
/// image and both masks (nearest-neighbour for masks); intensity changes
/// touch the image only and clip to [0,1]. Draw order is fixed: angle,
/// flip, scale, shift.
pub fn augment(sample: &SegSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SegSample {
    let theta = if cfg.max_rotation_degrees > 0.0 {
        rng.gen_range(-cfg.max_rotation_degrees..=cfg.max_rotation_degrees)
    } else {
        0.0
    };
    let flip = cfg.horizontal_flip && rng.gen_bool(0.5);
    let scale = rng.gen_range(cfg.intensity_scale_range.0..=cfg.intensity_scale_range.1);
    let shift = rng.gen_range(cfg.intensity_shift_range.0..=cfg.intensity_shift_range.1);

    let (mut image, mut expert, mut nonexpert) = if theta != 0.0 {
        (
            rotate_grid_bilinear(&sample.image, theta),
            rotate_mask_nearest(&sample.expert_mask, theta),
            rotate_mask_nearest(&sample.nonexpert_mask, theta),
        )
    } else {
        (
            sample.image.clone(),
            sample.expert_mask.clone(),
            sample.nonexpert_mask.clone(),
        )
    };
    if flip {
        image = flip_grid(&image);
        expert = flip_mask(&expert);
        nonexpert = flip_mask(&nonexpert);
    }
    image.mapv_inplace(|v| (scale * v + shift).clamp(0.0, 1.0));

    SegSample {
        case_id: sample.case_id.clone(),
        slice_index: sample.slice_index,
        image,
        expert_mask: expert,
        nonexpert_mask: nonexpert,
        spacing: sample.spacing,
    }
}

/// Knobs for the synthetic generator.
///
/// Each sample is a smooth star-shaped blob: the expert mask is the blob
/// interior, the image is a blurred two-level rendering with multiplicative
/// speckle, and the non-expert mask is the same blob with its radius
/// modulated by a smooth angular wobble of amplitude `perturb`, so the two
/// annotations disagree only near the boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    /// Relative amplitude of the non-expert boundary wobble.
    pub perturb: f64,
    /// Amplitude of the multiplicative speckle noise.
    pub speckle: f64,
    /// Interior intensity before noise.
    pub fg_level: f64,
    /// Background intensity before noise.
    pub bg_level: f64,
    /// Boundary blur width in pixels.
    pub blur_px: f64,
    /// Consecutive samples sharing one case id.
    pub slices_per_case: usize,
    pub spacing: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            perturb: 0.15,
            speckle: 0.15,
            fg_level: 0.7,
            bg_level: 0.3,
            blur_px: 1.5,
            slices_per_case: 4,
            spacing: (1.0, 1.0),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.perturb >= 0.0 && self.perturb.is_finite()) {
            return Err(DataError::Config("perturb must be >= 0".into()));
        }
        if !(self.speckle >= 0.0 && self.speckle.is_finite()) {
            return Err(DataError::Config("speckle must be >= 0".into()));
        }
        if !(0.0 <= self.bg_level && self.bg_level < self.fg_level && self.fg_level <= 1.0) {
            return Err(DataError::Config("need 0 <= bg_level < fg_level <= 1".into()));
        }
        if !(self.blur_px > 0.0) {
            return Err(DataError::Config("blur_px must be positive".into()));
        }
        if self.slices_per_case == 0 {
            return Err(DataError::Config("slices_per_case must be >= 1".into()));
        }
        if self.spacing.0 <= 0.0 || self.spacing.1 <= 0.0 {
            return Err(DataError::Config("spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Smooth periodic wobble from a short random Fourier series, normalized
/// to unit root-mean-square amplitude.
struct Wobble {
    coeffs: Vec<(f64, f64)>,
    norm: f64,
}

impl Wobble {
    fn draw(rng: &mut impl Rng, k_lo: usize, k_hi: usize) -> Self {
        let coeffs: Vec<(f64, f64)> = (k_lo..=k_hi)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let power: f64 = coeffs.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / 2.0;
        Wobble { coeffs, norm: power.sqrt().max(1e-12) }
    }

    fn at(&self, theta: f64, k_lo: usize) -> f64 {
        let mut v = 0.0;
        for (i, (a, b)) in self.coeffs.iter().enumerate() {
            let k = (k_lo + i) as f64;
            v += a * (k * theta).cos() + b * (k * theta).sin();
        }
        v / self.norm
    }
}

fn synth_sample(index: usize, size: usize, params: &SynthParams, seed: u64) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);

    let n = size as f64;
    let cy = n / 2.0 + rng.gen_range(-n / 8.0..n / 8.0);
    let cx = n / 2.0 + rng.gen_range(-n / 8.0..n / 8.0);
    let r0 = n * rng.gen_range(0.22..0.32);
    let shape = Wobble::draw(&mut rng, 1, 4);
    let wobble = Wobble::draw(&mut rng, 2, 6);

    // Base radius varies mildly with angle so blobs are not circles.
    let radius = |theta: f64| r0 * (1.0 + 0.10 * shape.at(theta, 1));

    let mut image = Grid::zeros((size, size));
    let mut expert = Mask::zeros(size, size);
    let mut nonexpert = Mask::zeros(size, size);
    let span = params.fg_level - params.bg_level;
    for r in 0..size {
        for c in 0..size {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let dist = (dy * dy + dx * dx).sqrt();
            let theta = dy.atan2(dx);
            let re = radius(theta);
            let rn = re * (1.0 + params.perturb * wobble.at(theta, 2));
            expert.set(r, c, dist < re);
            nonexpert.set(r, c, dist < rn);
            let edge = 1.0 / (1.0 + (-(re - dist) / params.blur_px).exp());
            let noise = 1.0 + params.speckle * rng.gen_range(-1.0..1.0);
            image[[r, c]] = ((params.bg_level + span * edge) * noise).clamp(0.0, 1.0);
        }
    }

    SegSample {
        case_id: format!("case{:03}", index / params.slices_per_case),
        slice_index: (index % params.slices_per_case) as u32,
        image,
        expert_mask: expert,
        nonexpert_mask: nonexpert,
        spacing: params.spacing,
    }
}

/// Generate `count` synthetic samples of `size` x `size` pixels.
///
/// Each sample draws from its own random stream derived from
/// (`seed`, index), so output is deterministic and order-independent
/// under parallel generation. `perturb = 0` makes the two masks identical.
pub fn synth_generate(
    count: usize,
    size: usize,
    params: &SynthParams,
    seed: u64,
) -> Result<Vec<SegSample>, DataError> {
    if count == 0 {
        return Err(DataError::Config("count must be >= 1".into()));
    }
    if size < 16 {
        return Err(DataError::Config("size must be >= 16".into()));
    }
    params.validate()?;
    Ok(par::map_range(count, |i| synth_sample(i, size, params, seed)))
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitMeta {
    spacing: (f64, f64),
}

/// Counters for degraded-but-loadable conditions seen by the loader.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    /// Samples whose non-expert mask was absent; the expert mask was
    /// substituted, which makes the hard region of such samples empty.
    pub missing_nonexpert: usize,
    /// File stems that did not parse as `caseID_sliceIndex`.
    pub malformed_stems: usize,
}

fn grid_to_png_bytes(g: &Grid) -> Vec<u8> {
    g.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

fn mask_to_png_bytes(m: &Mask) -> Vec<u8> {
    m.data().iter().map(|&b| if b { 255u8 } else { 0u8 }).collect()
}

fn save_gray(path: &Path, bytes: Vec<u8>, w: usize, h: usize) -> Result<(), DataError> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| DataError::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_gray(path: &Path) -> Result<image::GrayImage, DataError> {
    image::open(path)
        .map(|i| i.into_luma8())
        .map_err(|e| DataError::Read { path: path.to_path_buf(), reason: e.to_string() })
}

/// Write samples in the standard layout under `root/<split>/`.
pub fn save_dataset(root: &Path, split: Split, samples: &[SegSample]) -> Result<(), DataError> {
    let base = root.join(split.dir_name());
    let dirs = [
        base.join("images"),
        base.join("masks_expert"),
        base.join("masks_nonexpert"),
    ];
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| DataError::Write {
            path: d.clone(),
            reason: e.to_string(),
        })?;
    }
    for s in samples {
        s.validate()?;
        let (h, w) = s.image.dim();
        let name = format!("{}.png", s.stem());
        save_gray(&dirs[0].join(&name), grid_to_png_bytes(&s.image), w, h)?;
        save_gray(&dirs[1].join(&name), mask_to_png_bytes(&s.expert_mask), w, h)?;
        save_gray(&dirs[2].join(&name), mask_to_png_bytes(&s.nonexpert_mask), w, h)?;
    }
    if let Some(first) = samples.first() {
        let meta = SplitMeta { spacing: first.spacing };
        let path = base.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&path, text).map_err(|e| DataError::Write {
            path,
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

fn parse_stem(stem: &str) -> Option<(String, u32)> {
    let (case, slice) = stem.rsplit_once('_')?;
    let slice: u32 = slice.parse().ok()?;
    if case.is_empty() {
        return None;
    }
    Some((case.to_string(), slice))
}

fn mask_from_gray(img: &image::GrayImage) -> Mask {
    let (w, h) = img.dimensions();
    Mask::from_fn(h as usize, w as usize, |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] >= 128
    })
}

/// Load one split from the standard layout.
///
/// Every image must have an expert mask and every expert mask an image;
/// a missing non-expert mask falls back to the expert mask and is counted
/// in the returned stats. Stems are processed in sorted order so the
/// result is deterministic.
pub fn load_dataset(root: &Path, split: Split) -> Result<(Vec<SegSample>, LoadStats), DataError> {
    let base = root.join(split.dir_name());
    let images_dir = base.join("images");
    let expert_dir = base.join("masks_expert");
    let nonexpert_dir = base.join("masks_nonexpert");

    let list_stems = |dir: &Path, required: bool| -> Result<Vec<String>, DataError> {
        if !dir.exists() {
            if required {
                return Err(DataError::Read {
                    path: dir.to_path_buf(),
                    reason: "directory does not exist".into(),
                });
            }
            return Ok(Vec::new());
        }
        let entries = fs::read_dir(dir).map_err(|e| DataError::Read {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut stems = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| DataError::Read {
                path: dir.to_path_buf(),
                reason: e.to_string(),
            })?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    stems.push(stem.to_string());
                }
            }
        }
        stems.sort();
        Ok(stems)
    };

    let image_stems = list_stems(&images_dir, true)?;
    for stem in list_stems(&expert_dir, false)? {
        if image_stems.binary_search(&stem).is_err() {
            return Err(DataError::UnmatchedExpertMask(
                expert_dir.join(format!("{stem}.png")),
            ));
        }
    }
    if image_stems.is_empty() {
        warn!("no samples found under {}", images_dir.display());
        return Ok((Vec::new(), LoadStats::default()));
    }

    let spacing = {
        let meta_path = base.join("meta.json");
        if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| DataError::Read {
                path: meta_path.clone(),
                reason: e.to_string(),
            })?;
            let meta: SplitMeta = serde_json::from_str(&text).map_err(|e| DataError::Read {
                path: meta_path,
                reason: e.to_string(),
            })?;
            meta.spacing
        } else {
            (1.0, 1.0)
        }
    };

    let loaded = par::map(&image_stems, |stem| -> Result<_, DataError> {
        let name = format!("{stem}.png");
        let image_path = images_dir.join(&name);
        let expert_path = expert_dir.join(&name);
        if !expert_path.exists() {
            return Err(DataError::MissingExpertMask(image_path));
        }
        let img = load_gray(&image_path)?;
        let (w, h) = img.dimensions();
        let image = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
            img.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
        });
        let expert = mask_from_gray(&load_gray(&expert_path)?);
        let nonexpert_path = nonexpert_dir.join(&name);
        let nonexpert = if nonexpert_path.exists() {
            Some(mask_from_gray(&load_gray(&nonexpert_path)?))
        } else {
            None
        };
        Ok((stem.clone(), image, expert, nonexpert))
    });

    let mut stats = LoadStats::default();
    let mut samples = Vec::with_capacity(loaded.len());
    for item in loaded {
        let (stem, image, expert, nonexpert) = item?;
        let (case_id, slice_index) = match parse_stem(&stem) {
            Some(parsed) => parsed,
            None => {
                warn!("stem {stem:?} does not parse as caseID_sliceIndex");
                stats.malformed_stems += 1;
                (stem.clone(), 0)
            }
        };
        let nonexpert = match nonexpert {
            Some(m) => m,
            None => {
                warn!("non-expert mask missing for {stem}; using the expert mask");
                stats.missing_nonexpert += 1;
                expert.clone()
            }
        };
        let sample = SegSample {
            case_id,
            slice_index,
            image,
            expert_mask: expert,
            nonexpert_mask: nonexpert,
            spacing,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok((samples, stats))
}
