//! Confusion matrix heat map.

use std::path::Path;

use image::{Rgb, RgbImage};
use ragc::train::Metrics;

const CELL: u32 = 40;
const GAP: u32 = 2;

/// One square per cell, shaded by the row-normalized count (rows are the
/// true classes). Diagonal cells are green, off-diagonal ones red.
pub fn confusion_image(m: &Metrics) -> RgbImage {
    let c = m.classes as u32;
    let side = c * (CELL + GAP) + GAP;
    let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    for (t, row) in m.confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (p, &count) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { count as f64 / total as f64 };
            let fade = (255.0 * (1.0 - frac)).round() as u8;
            let color = if t == p { Rgb([fade, 255, fade]) } else { Rgb([255, fade, fade]) };
            let (x0, y0) = (GAP + p as u32 * (CELL + GAP), GAP + t as u32 * (CELL + GAP));
            for y in y0..y0 + CELL {
                for x in x0..x0 + CELL {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}

pub fn write_confusion_png(m: &Metrics, path: &Path) -> Result<(), image::ImageError> {
    confusion_image(m).save_with_format(path, image::ImageFormat::Png)
}
