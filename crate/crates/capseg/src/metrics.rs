//! Overlap and boundary-distance metrics for binary masks.
//!
//! Dice measures region overlap; the 95th-percentile Hausdorff distance
//! measures boundary agreement in millimetres, robust to single outlier
//! pixels. Boundary distances are undefined for empty masks and are reported
//! as missing rather than zero: a model that predicts nothing must not score
//! a perfect boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Mask;
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("{which} mask is empty: boundary distance is undefined")]
    EmptyMask { which: &'static str },
    #[error("pixel spacing must be positive and finite, got ({0}, {1})")]
    InvalidSpacing(f64, f64),
    #[error("case {0:?} has no slices")]
    NoSlices(String),
}

fn check_shapes(a: &Mask, b: &Mask) -> Result<(), MetricError> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(MetricError::ShapeMismatch(a.dims(), b.dims()))
    }
}

fn check_spacing(spacing: (f64, f64)) -> Result<(), MetricError> {
    let (dy, dx) = spacing;
    if dy > 0.0 && dx > 0.0 && dy.is_finite() && dx.is_finite() {
        Ok(())
    } else {
        Err(MetricError::InvalidSpacing(dy, dx))
    }
}

/// Dice similarity coefficient in [0, 1]. Two empty masks agree perfectly
/// and score 1; one empty side scores 0.
pub fn dice_coefficient(ground_truth: &Mask, prediction: &Mask) -> Result<f64, MetricError> {
    check_shapes(ground_truth, prediction)?;
    let mut intersection = 0usize;
    for (&g, &p) in ground_truth.data().iter().zip(prediction.data().iter()) {
        if g && p {
            intersection += 1;
        }
    }
    let total = ground_truth.count() + prediction.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * intersection as f64 / total as f64)
}

/// Physical coordinates (row * dy, col * dx) of every foreground pixel with
/// at least one 4-neighbour that is background or outside the grid.
pub fn boundary_points(mask: &Mask, spacing: (f64, f64)) -> Vec<(f64, f64)> {
    let (rows, cols) = mask.dims();
    let (dy, dx) = spacing;
    let mut points = Vec::new();
    for ((r, c), &v) in mask.data().indexed_iter() {
        if !v {
            continue;
        }
        let exposed = r == 0
            || c == 0
            || r + 1 == rows
            || c + 1 == cols
            || !mask.get(r - 1, c)
            || !mask.get(r + 1, c)
            || !mask.get(r, c - 1)
            || !mask.get(r, c + 1);
        if exposed {
            points.push((r as f64 * dy, c as f64 * dx));
        }
    }
    points
}

/// For each point in `from`, its Euclidean distance to the nearest point in
/// `to`. The per-point minimization parallelizes over `from`.
fn directed_distances(from: &[(f64, f64)], to: &[(f64, f64)]) -> Vec<f64> {
    par::map(from, |&(y, x)| {
        let mut best = f64::INFINITY;
        for &(ty, tx) in to {
            let d2 = (y - ty) * (y - ty) + (x - tx) * (x - tx);
            if d2 < best {
                best = d2;
            }
        }
        best.sqrt()
    })
}

fn pooled_boundary_distances(
    ground_truth: &Mask,
    prediction: &Mask,
    spacing: (f64, f64),
) -> Result<Vec<f64>, MetricError> {
    check_shapes(ground_truth, prediction)?;
    check_spacing(spacing)?;
    if ground_truth.count() == 0 {
        return Err(MetricError::EmptyMask { which: "ground truth" });
    }
    if prediction.count() == 0 {
        return Err(MetricError::EmptyMask { which: "prediction" });
    }
    let gt = boundary_points(ground_truth, spacing);
    let pred = boundary_points(prediction, spacing);
    let mut pooled = directed_distances(&gt, &pred);
    pooled.extend(directed_distances(&pred, &gt));
    Ok(pooled)
}

/// Classic symmetric Hausdorff distance: the largest of all nearest-boundary
/// distances in either direction.
pub fn hausdorff_distance(
    ground_truth: &Mask,
    prediction: &Mask,
    spacing: (f64, f64),
) -> Result<f64, MetricError> {
    let pooled = pooled_boundary_distances(ground_truth, prediction, spacing)?;
    Ok(pooled.iter().fold(0.0f64, |acc, &d| acc.max(d)))
}

/// 95th percentile of the pooled bidirectional boundary distances, with
/// linear interpolation between order statistics (rank = q/100 * (n - 1)).
pub fn hd95(
    ground_truth: &Mask,
    prediction: &Mask,
    spacing: (f64, f64),
) -> Result<f64, MetricError> {
    let mut pooled = pooled_boundary_distances(ground_truth, prediction, spacing)?;
    Ok(percentile(&mut pooled, 95.0))
}

/// Linear-interpolation percentile over an unsorted nonempty sample.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are never NaN"));
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Metrics of a single slice. `hd95` is missing when either mask is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMetrics {
    pub dice: f64,
    pub hd95: Option<f64>,
}

/// Dice and HD95 of one ground-truth/prediction pair, mapping the undefined
/// boundary case to a missing HD95 instead of an error.
pub fn slice_metrics(
    ground_truth: &Mask,
    prediction: &Mask,
    spacing: (f64, f64),
) -> Result<SliceMetrics, MetricError> {
    let dice = dice_coefficient(ground_truth, prediction)?;
    let hd = match hd95(ground_truth, prediction, spacing) {
        Ok(d) => Some(d),
        Err(MetricError::EmptyMask { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(SliceMetrics { dice, hd95: hd })
}

/// Per-case aggregation over slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub mean_dice: f64,
    /// Mean over slices where HD95 was defined; missing when no slice had a
    /// defined boundary distance.
    pub mean_hd95: Option<f64>,
    pub slice_count: usize,
    /// Slices dropped from the HD95 mean because a mask was empty.
    pub hd95_excluded: usize,
}

/// Averages slice metrics into one row per case. Dice averages over every
/// slice; HD95 averages only over slices where it is defined.
pub fn aggregate_case(case_id: &str, slices: &[SliceMetrics]) -> Result<CaseMetrics, MetricError> {
    if slices.is_empty() {
        return Err(MetricError::NoSlices(case_id.to_string()));
    }
    let n = slices.len() as f64;
    let mean_dice = slices.iter().map(|s| s.dice).sum::<f64>() / n;
    let defined: Vec<f64> = slices.iter().filter_map(|s| s.hd95).collect();
    let mean_hd95 = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        mean_dice,
        mean_hd95,
        slice_count: slices.len(),
        hd95_excluded: slices.len() - defined.len(),
    })
}

/// Evaluation summary: one row per case plus macro means over cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
}

impl EvalReport {
    /// Macro-averages case rows: every case counts once regardless of its
    /// slice count, and the HD95 mean skips cases where it is undefined.
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        let n = cases.len().max(1) as f64;
        let mean_dice = cases.iter().map(|c| c.mean_dice).sum::<f64>() / n;
        let defined: Vec<f64> = cases.iter().filter_map(|c| c.mean_hd95).collect();
        let mean_hd95 = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        EvalReport { cases, mean_dice, mean_hd95 }
    }
}

/// Writes the per-case table with a trailing macro-mean row. Missing HD95
/// serializes as an empty cell.
pub fn write_metrics_csv<W: std::io::Write>(
    report: &EvalReport,
    writer: W,
) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["case_id", "mean_dice", "mean_hd95", "slice_count"])?;
    let fmt_hd = |hd: Option<f64>| hd.map(|d| format!("{d:.6}")).unwrap_or_default();
    let total_slices: usize = report.cases.iter().map(|c| c.slice_count).sum();
    for case in &report.cases {
        out.write_record([
            case.case_id.clone(),
            format!("{:.6}", case.mean_dice),
            fmt_hd(case.mean_hd95),
            case.slice_count.to_string(),
        ])?;
    }
    out.write_record([
        "Mean".to_string(),
        format!("{:.6}", report.mean_dice),
        fmt_hd(report.mean_hd95),
        total_slices.to_string(),
    ])?;
    out.flush()?;
    Ok(())
}
