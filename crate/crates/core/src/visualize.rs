//! Color-coded label overlays.

use std::path::Path;

use crate::error::{io_err, Error, Result};

/// HSV to RGB with all components in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue of class `index` among `n`.
pub fn palette_hue(index: usize, n: usize) -> f64 {
    index as f64 / n as f64
}

/// Fully saturated, full-value color for class `index` among `n`.
pub fn palette_color(index: usize, n: usize) -> [u8; 4] {
    let [r, g, b] = hsv_to_rgb(palette_hue(index, n), 1.0, 1.0);
    let q = |x: f64| (x * 255.0).round() as u8;
    [q(r), q(g), q(b), 255]
}

/// RGBA overlay; labels `>= n` (including the ignore index) are transparent.
pub fn overlay(labels: &[u8], n: usize) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| if (l as usize) < n { palette_color(l as usize, n) } else { [0, 0, 0, 0] })
        .collect()
}

pub fn save_overlay(path: &Path, h: usize, w: usize, labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != h * w {
        return Err(Error::Shape(format!("{} labels for a {h}x{w} image", labels.len())));
    }
    let img = image::RgbaImage::from_raw(w as u32, h as u32, overlay(labels, n)).expect("overlay buffer size");
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(e) => io_err(path)(e),
        source => Error::Image { path: path.to_path_buf(), source },
    })
}
