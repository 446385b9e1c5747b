//! Raster outputs: contour overlays and loss-curve plots.
//!
//! Everything is drawn pixel by pixel into an `image` buffer, so there is no
//! font or plotting dependency. The loss plot therefore carries no axis
//! labels; series are identified by the color swatches in the top-right
//! corner (top to bottom, in the order the series were passed).

use std::path::Path;

use anyhow::{Context, Result};
use capseg::{Grid, Mask};
use image::{Rgb, RgbImage};

pub const OVERLAY_TRUTH: Rgb<u8> = Rgb([0, 255, 0]);
pub const OVERLAY_PREDICTION: Rgb<u8> = Rgb([255, 0, 0]);
pub const OVERLAY_BOTH: Rgb<u8> = Rgb([255, 255, 0]);

/// Foreground pixels with at least one 4-neighbour outside the mask.
/// Pixels on the image border count as boundary when set.
fn boundary(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = mask.dims();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Grayscale image with the ground-truth contour in green and the predicted
/// contour in red; pixels on both contours are yellow.
pub fn overlay(image: &Grid, truth: &Mask, prediction: &Mask) -> RgbImage {
    let (h, w) = (image.nrows(), image.ncols());
    let mut canvas = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let v = (image[[r, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            canvas.put_pixel(c as u32, r as u32, Rgb([v, v, v]));
        }
    }
    for &(r, c) in &boundary(truth) {
        canvas.put_pixel(c as u32, r as u32, OVERLAY_TRUTH);
    }
    for &(r, c) in &boundary(prediction) {
        let px = if canvas.get_pixel(c as u32, r as u32) == &OVERLAY_TRUTH {
            OVERLAY_BOTH
        } else {
            OVERLAY_PREDICTION
        };
        canvas.put_pixel(c as u32, r as u32, px);
    }
    canvas
}

pub fn save_overlay(
    path: &Path,
    image: &Grid,
    truth: &Mask,
    prediction: &Mask,
) -> Result<()> {
    overlay(image, truth, prediction)
        .save(path)
        .with_context(|| format!("write overlay {}", path.display()))
}

/// One curve on the loss plot.
pub struct Series {
    pub color: Rgb<u8>,
    pub values: Vec<f64>,
}

/// Stable color per loss name, shared by plot and legend documentation.
pub fn series_color(loss_name: &str) -> Rgb<u8> {
    match loss_name {
        "adaptive_focal" => Rgb([31, 119, 180]),
        "focal" => Rgb([255, 127, 14]),
        "ag_bce" => Rgb([44, 160, 44]),
        _ => Rgb([120, 120, 120]),
    }
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 440;
const MARGIN_LEFT: u32 = 50;
const MARGIN_RIGHT: u32 = 30;
const MARGIN_TOP: u32 = 20;
const MARGIN_BOTTOM: u32 = 35;

/// Loss-per-epoch line plot. X spans epoch 1..=n left to right, Y spans
/// [0, max] bottom to top with light horizontal gridlines at quarters.
pub fn loss_curves(series: &[Series]) -> RgbImage {
    let mut canvas = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let x0 = MARGIN_LEFT;
    let x1 = PLOT_W - MARGIN_RIGHT;
    let y0 = MARGIN_TOP;
    let y1 = PLOT_H - MARGIN_BOTTOM;

    let max = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let epochs = series.iter().map(|s| s.values.len()).max().unwrap_or(0);

    for k in 1..4 {
        let y = y0 + (y1 - y0) * k / 4;
        draw_hline(&mut canvas, x0, x1, y, Rgb([225, 225, 225]));
    }
    let axis = Rgb([60, 60, 60]);
    draw_hline(&mut canvas, x0, x1, y1, axis);
    draw_vline(&mut canvas, y0, y1, x0, axis);

    let to_px = |epoch_idx: usize, value: f64| -> (i64, i64) {
        let fx = if epochs <= 1 {
            0.5
        } else {
            epoch_idx as f64 / (epochs - 1) as f64
        };
        let fy = (value / max).clamp(0.0, 1.0);
        let x = x0 as f64 + fx * (x1 - x0) as f64;
        let y = y1 as f64 - fy * (y1 - y0) as f64;
        (x.round() as i64, y.round() as i64)
    };

    for s in series {
        let pts: Vec<(i64, i64)> = s
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| to_px(i, v))
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut canvas, pair[0], pair[1], s.color);
        }
        for &(x, y) in &pts {
            draw_dot(&mut canvas, x, y, s.color);
        }
    }

    // Legend swatches, top to bottom in series order.
    for (i, s) in series.iter().enumerate() {
        let sx = x1 - 18;
        let sy = y0 + 6 + i as u32 * 18;
        for dy in 0..12 {
            for dx in 0..12 {
                put(&mut canvas, (sx + dx) as i64, (sy + dy) as i64, s.color);
            }
        }
    }
    canvas
}

pub fn save_loss_curves(path: &Path, series: &[Series]) -> Result<()> {
    loss_curves(series)
        .save(path)
        .with_context(|| format!("write plot {}", path.display()))
}

fn put(canvas: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < canvas.width() && (y as u32) < canvas.height() {
        canvas.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_hline(canvas: &mut RgbImage, x0: u32, x1: u32, y: u32, color: Rgb<u8>) {
    for x in x0..=x1 {
        put(canvas, x as i64, y as i64, color);
    }
}

fn draw_vline(canvas: &mut RgbImage, y0: u32, y1: u32, x: u32, color: Rgb<u8>) {
    for y in y0..=y1 {
        put(canvas, x as i64, y as i64, color);
    }
}

fn draw_dot(canvas: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(canvas, x + dx, y + dy, color);
        }
    }
}

/// Bresenham segment.
fn draw_line(canvas: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let (mut x, mut y) = a;
    let (x1, y1) = b;
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(canvas, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}
