//! Static landmark overlays: one fixed colour per landmark index.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::warp::Point;

/// Colour of landmark `i`; the palette repeats after ten entries.
pub fn landmark_color(i: usize) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 10] = [
        [0.90, 0.10, 0.10],
        [0.10, 0.45, 0.95],
        [0.10, 0.80, 0.20],
        [1.00, 0.85, 0.00],
        [0.85, 0.20, 0.85],
        [0.00, 0.85, 0.85],
        [1.00, 0.50, 0.00],
        [0.55, 0.30, 0.10],
        [1.00, 1.00, 1.00],
        [0.50, 0.50, 0.50],
    ];
    PALETTE[i % PALETTE.len()]
}

/// Copy of `image` with a filled dot of `radius` pixels at each point, ringed in black.
pub fn overlay(image: &Image, points: &[Point], radius: f64) -> Image {
    let mut out = image.clone();
    let gray = out.channels() == 1;
    for (i, p) in points.iter().enumerate() {
        let color = landmark_color(i);
        let reach = (radius + 1.0).ceil() as isize;
        let (cx, cy) = (p[0].round() as isize, p[1].round() as isize);
        for r in cy - reach..=cy + reach {
            for c in cx - reach..=cx + reach {
                if r < 0 || c < 0 || r as usize >= out.height() || c as usize >= out.width() {
                    continue;
                }
                let d = (c as f64 - p[0]).hypot(r as f64 - p[1]);
                let value = if d <= radius {
                    color
                } else if d <= radius + 1.0 {
                    [0.0; 3]
                } else {
                    continue;
                };
                if gray {
                    out.set(r as usize, c as usize, 0, value.iter().sum::<f32>() / 3.0);
                } else {
                    for (k, v) in value.iter().enumerate() {
                        out.set(r as usize, c as usize, k, *v);
                    }
                }
            }
        }
    }
    out
}

/// Default dot radius for an image: about 1.5% of its larger side, at least 1.
pub fn default_radius(image: &Image) -> f64 {
    (image.height().max(image.width()) as f64 * 0.015).max(1.0)
}

/// Writes one overlay PNG per `(id, image, points)` into `out_dir`, naming each
/// after the id with path separators flattened. Returns the files written.
pub fn write_overlays<'a>(
    out_dir: &Path,
    items: impl IntoIterator<Item = (&'a str, &'a Image, &'a [Point])>,
    radius: Option<f64>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (id, image, points) in items {
        let stem = Path::new(id)
            .with_extension("")
            .to_string_lossy()
            .replace(['/', '\\'], "_");
        let path = out_dir.join(format!("{stem}_landmarks.png"));
        overlay(image, points, radius.unwrap_or_else(|| default_radius(image))).save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dots_use_per_index_colors() {
        let img = Image::zeros(20, 20, 3);
        let out = overlay(&img, &[[5.0, 5.0], [14.0, 12.0]], 2.0);
        for k in 0..3 {
            assert_eq!(out.get(5, 5, k), landmark_color(0)[k]);
            assert_eq!(out.get(12, 14, k), landmark_color(1)[k]);
        }
        assert_eq!(out.get(0, 19, 0), 0.0);
        // points outside the frame are clipped, not an error
        overlay(&img, &[[-10.0, 50.0]], 2.0);
    }
}
