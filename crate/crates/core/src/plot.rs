//! Minimal raster plots: frame strips, histograms and line charts as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const GAP: u32 = 2;
const MARK: u32 = 3;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
pub const SERIES_COLORS: [[u8; 3]; 6] =
    [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// One row of a strip: frames and an optional marker per frame.
pub struct StripRow<'a> {
    pub frames: Vec<&'a [u8]>,
    /// Drawn as a red bar above the frame when true.
    pub markers: Vec<bool>,
}

/// Tiles rows of `side x side` RGB frames into one image.
pub fn frame_strip(rows: &[StripRow], side: usize, path: &Path) -> Result<()> {
    let cols = rows.iter().map(|r| r.frames.len()).max().unwrap_or(0) as u32;
    let s = side as u32;
    let cell_h = s + MARK + GAP;
    let width = (cols * (s + GAP) + GAP).max(1);
    let height = (rows.len() as u32 * cell_h + GAP).max(1);
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    for (r, row) in rows.iter().enumerate() {
        let y0 = GAP + r as u32 * cell_h;
        for (c, frame) in row.frames.iter().enumerate() {
            if frame.len() != side * side * 3 {
                return Err(Error::InvalidArgument("strip frame has the wrong size".into()));
            }
            let x0 = GAP + c as u32 * (s + GAP);
            if row.markers.get(c).copied().unwrap_or(false) {
                for y in y0..y0 + MARK - 1 {
                    for x in x0..x0 + s {
                        img.put_pixel(x, y, Rgb([220, 0, 0]));
                    }
                }
            }
            for y in 0..s {
                for x in 0..s {
                    let o = ((y * s + x) * 3) as usize;
                    img.put_pixel(x0 + x, y0 + MARK + y, Rgb([frame[o], frame[o + 1], frame[o + 2]]));
                }
            }
        }
    }
    save(&img, path)
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn frame_axes(img: &mut RgbImage, margin: u32) {
    let (w, h) = (img.width(), img.height());
    let axis = Rgb([0, 0, 0]);
    draw_line(img, (margin as f64, (h - margin) as f64), ((w - margin) as f64, (h - margin) as f64), axis);
    draw_line(img, (margin as f64, margin as f64), (margin as f64, (h - margin) as f64), axis);
}

/// Overlaid histograms of several series over a shared range; each series
/// is drawn as an outline in its own colour.
pub fn histogram(series: &[Vec<f64>], bins: usize, range: (f64, f64), path: &Path) -> Result<()> {
    let (w, h, margin) = (480u32, 320u32, 20u32);
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    frame_axes(&mut img, margin);
    let counts: Vec<Vec<f64>> = series
        .iter()
        .map(|s| {
            let mut c = vec![0.0; bins];
            for &v in s {
                let k = (((v - range.0) / (range.1 - range.0)) * bins as f64).floor();
                c[(k.max(0.0) as usize).min(bins - 1)] += 1.0 / s.len().max(1) as f64;
            }
            c
        })
        .collect();
    let peak = counts.iter().flatten().copied().fold(1e-12, f64::max);
    let plot_w = (w - 2 * margin) as f64;
    let plot_h = (h - 2 * margin) as f64;
    for (k, c) in counts.iter().enumerate() {
        let color = Rgb(SERIES_COLORS[k % SERIES_COLORS.len()]);
        let mut prev = (margin as f64, (h - margin) as f64);
        for (b, &v) in c.iter().enumerate() {
            let y = (h - margin) as f64 - v / peak * plot_h;
            let xa = margin as f64 + b as f64 / bins as f64 * plot_w;
            let xb = margin as f64 + (b + 1) as f64 / bins as f64 * plot_w;
            draw_line(&mut img, prev, (xa, y), color);
            draw_line(&mut img, (xa, y), (xb, y), color);
            prev = (xb, y);
        }
        draw_line(&mut img, prev, ((w - margin) as f64, (h - margin) as f64), color);
    }
    save(&img, path)
}

/// Line chart of several `(x, y)` series on shared axes.
pub fn line_chart(series: &[Vec<(f64, f64)>], path: &Path) -> Result<()> {
    let (w, h, margin) = (480u32, 320u32, 20u32);
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    frame_axes(&mut img, margin);
    let points = series.iter().flatten().filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if !x_lo.is_finite() {
        return save(&img, path);
    }
    let (xs, ys) = ((x_hi - x_lo).max(1e-12), (y_hi - y_lo).max(1e-12));
    let to_px = |(x, y): (f64, f64)| {
        (
            margin as f64 + (x - x_lo) / xs * (w - 2 * margin) as f64,
            (h - margin) as f64 - (y - y_lo) / ys * (h - 2 * margin) as f64,
        )
    };
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(SERIES_COLORS[k % SERIES_COLORS.len()]);
        for pair in s.windows(2) {
            draw_line(&mut img, to_px(pair[0]), to_px(pair[1]), color);
        }
    }
    save(&img, path)
}
