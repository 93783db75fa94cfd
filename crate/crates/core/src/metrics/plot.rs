//! Bar charts (mean with a ±std whisker per bar) rendered straight to PNG.

use super::MetricError;
use crate::dataset::io::{write_png, Raster};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub label: String,
    pub mean: f64,
    pub std: f64,
}

const BAR_W: usize = 24;
const GAP: usize = 12;
const PLOT_H: usize = 200;
const MARGIN: usize = 16;
const PALETTE: [[u8; 3]; 6] = [[66, 110, 180], [221, 132, 82], [85, 168, 104], [196, 78, 82], [129, 114, 178], [147, 120, 96]];

/// Bars share a zero-based axis scaled to the largest mean + std. Non-finite bars are drawn empty.
pub fn bar_chart(bars: &[Bar], path: &Path) -> Result<(), MetricError> {
    let width = 2 * MARGIN + bars.len().max(1) * (BAR_W + GAP);
    let height = PLOT_H + 2 * MARGIN;
    let mut px = vec![255u8; width * height * 3];
    let mut put = |x: usize, y: usize, c: [u8; 3]| {
        if x < width && y < height {
            px[(y * width + x) * 3..][..3].copy_from_slice(&c);
        }
    };
    let top = bars
        .iter()
        .map(|b| b.mean + if b.std.is_finite() { b.std } else { 0.0 })
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let scale = if top > 0.0 { PLOT_H as f64 / (top * 1.05) } else { 0.0 };
    let base = MARGIN + PLOT_H;
    let to_y = |v: f64| base.saturating_sub((v.max(0.0) * scale).round() as usize);
    for (i, bar) in bars.iter().enumerate() {
        let x0 = MARGIN + GAP / 2 + i * (BAR_W + GAP);
        let colour = PALETTE[i % PALETTE.len()];
        if bar.mean.is_finite() {
            for y in to_y(bar.mean)..base {
                for x in x0..x0 + BAR_W {
                    put(x, y, colour);
                }
            }
            if bar.std.is_finite() && bar.std > 0.0 {
                let (hi, lo) = (to_y(bar.mean + bar.std), to_y(bar.mean - bar.std));
                let cx = x0 + BAR_W / 2;
                for y in hi..=lo {
                    put(cx, y, [0, 0, 0]);
                }
                for x in x0 + BAR_W / 4..x0 + 3 * BAR_W / 4 {
                    put(x, hi, [0, 0, 0]);
                    put(x, lo, [0, 0, 0]);
                }
            }
        }
    }
    for x in MARGIN / 2..width - MARGIN / 2 {
        put(x, base, [0, 0, 0]);
    }
    for y in MARGIN..=base {
        put(MARGIN / 2, y, [0, 0, 0]);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| MetricError::Io { path: parent.display().to_string(), source })?;
    }
    let raster = Raster { width, height, channels: 3, pixels: px };
    write_png(path, &raster).map_err(|e| MetricError::Png(e.to_string()))
}
