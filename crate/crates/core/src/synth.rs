//! Procedural images for the desk-scale training recipe and tests: smooth,
//! piecewise-shaded "scenes" for content and a busy, high-texture pattern
//! for the style image. Everything is a pure function of the seed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{save_image, Image};

/// A scene of a vertical sky-like gradient with a few flat-shaded discs
/// and rectangles on top.
pub fn content_image(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.9));
    let bottom: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.8));
    let mut img = Image::from_fn(height, width, 3, |c, y, _| {
        let t = y as f64 / (height.max(2) - 1) as f64;
        top[c] * (1.0 - t) + bottom[c] * t
    })?;
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let size = rng.random_range(0.1..0.35) * height.min(width) as f64;
        let disc = rng.random_bool(0.5);
        let shade = rng.random_range(-0.3..0.3);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= size * size
                } else {
                    dy.abs() <= size && dx.abs() <= 0.7 * size
                };
                if inside {
                    let s = 1.0 + shade * dy / size;
                    for (c, base) in color.iter().enumerate() {
                        img.set(c, y, x, (base * s).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Dense multi-scale stripes and dots mapped through a saturated palette.
pub fn style_image(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64)> = (0..5)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.25..0.9);
            (
                angle.cos() * freq,
                angle.sin() * freq,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let palette = [
        [0.95, 0.75, 0.1],
        [0.1, 0.25, 0.7],
        [0.85, 0.2, 0.15],
        [0.1, 0.6, 0.35],
    ];
    Image::from_fn(height, width, 3, |c, y, x| {
        let (fy, fx) = (y as f64, x as f64);
        let v: f64 = waves
            .iter()
            .map(|(a, b, p)| (a * fx + b * fy + p).sin())
            .sum::<f64>();
        let dots = ((fx * 0.8).sin() * (fy * 0.8).sin()).powi(8);
        let t = (v / 5.0 * 0.5 + 0.5).clamp(0.0, 1.0);
        let k = t * (palette.len() - 1) as f64;
        let (i, f) = ((k.floor() as usize).min(palette.len() - 2), k - k.floor());
        let base = palette[i][c] * (1.0 - f) + palette[i + 1][c] * f;
        (base * (1.0 - dots) + dots).clamp(0.0, 1.0)
    })
}

pub struct DemoData {
    pub content_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub style_image: PathBuf,
}

/// Writes `train` content images, `eval` held-out images and one style
/// image under `root`.
pub fn write_demo_data(
    root: &Path,
    train: usize,
    eval: usize,
    side: usize,
    seed: u64,
) -> Result<DemoData> {
    let content_dir = root.join("content");
    let eval_dir = root.join("eval");
    for dir in [&content_dir, &eval_dir] {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    }
    for i in 0..train {
        let img = content_image(side, side, seed.wrapping_add(i as u64))?;
        save_image(&img, content_dir.join(format!("content_{i:03}.png")))?;
    }
    for i in 0..eval {
        let img = content_image(side, side, seed.wrapping_add(1_000_000 + i as u64))?;
        save_image(&img, eval_dir.join(format!("eval_{i:03}.png")))?;
    }
    let style_image = root.join("style.png");
    save_image(
        &self::style_image(2 * side, 2 * side, seed ^ 0x57A1E)?,
        &style_image,
    )?;
    Ok(DemoData {
        content_dir,
        eval_dir,
        style_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::total_variation;

    #[test]
    fn deterministic_and_storable() {
        let a = content_image(32, 40, 3).unwrap();
        assert_eq!(a, content_image(32, 40, 3).unwrap());
        assert!(a.is_storable());
        let s = style_image(32, 32, 1).unwrap();
        assert!(s.is_storable());
    }

    #[test]
    fn style_is_busier_than_content() {
        let c = content_image(64, 64, 1).unwrap();
        let s = style_image(64, 64, 1).unwrap();
        assert!(total_variation(&s).unwrap() > 3.0 * total_variation(&c).unwrap());
    }
}
