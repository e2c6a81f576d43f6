//! Self-guided edge-preserving smoothing.
//!
//! Every window of the guide `I` fits a local linear model `q = a·I + b` to
//! the input `p`. The per-pixel coefficients are averaged over all windows
//! covering the pixel:
//!
//! ```text
//! a = cov(I, p) / (var(I) + eps)
//! b = mean(p) - a * mean(I)
//! q = box(a) * I + box(b)
//! ```
//!
//! Windows are clipped at the image border and averaged over the in-bounds
//! pixels only, so constant images pass through unchanged everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_EPS: f64 = 1e-2;
const MIN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedFilterParams {
    pub radius: usize,
    pub eps: f64,
}

impl GuidedFilterParams {
    pub fn new(radius: usize, eps: f64) -> Result<Self> {
        let params = GuidedFilterParams { radius, eps };
        params.validate()?;
        Ok(params)
    }

    /// Default for an image of the given size: radius `ceil(min_side / 64)`
    /// with a floor of 2, eps `1e-2`.
    pub fn for_size(height: usize, width: usize) -> Self {
        let min_side = height.min(width);
        GuidedFilterParams {
            radius: min_side.div_ceil(64).max(2),
            eps: DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::Argument("guided filter radius must be >= 1".into()));
        }
        if !(self.eps.is_finite() && self.eps >= MIN_EPS) {
            return Err(Error::Argument(format!(
                "guided filter eps must be >= {MIN_EPS:e}, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Mean over the clipped `(2r+1)x(2r+1)` window of one plane, via a
/// summed-area table.
fn box_plane(src: &[f64], h: usize, w: usize, r: usize, out: &mut [f64]) {
    if r == 0 {
        out.copy_from_slice(src);
        return;
    }
    let sw = w + 1;
    let mut sat = vec![0.0; (h + 1) * sw];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += src[y * w + x];
            sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + row;
        }
    }
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let sum = sat[y1 * sw + x1] - sat[y0 * sw + x1] - sat[y1 * sw + x0] + sat[y0 * sw + x0];
            out[y * w + x] = sum / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
}

/// Border-aware box mean of every channel.
pub fn box_filter(img: &Image, radius: i64) -> Result<Image> {
    if radius < 0 {
        return Err(Error::Argument(format!(
            "box filter radius must be >= 0, got {radius}"
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0; img.data().len()];
    for (src, dst) in img.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        box_plane(src, h, w, radius as usize, dst);
    }
    Ok(img.with_data(out))
}

fn guided_plane(
    guide: &[f64],
    input: &[f64],
    h: usize,
    w: usize,
    params: &GuidedFilterParams,
) -> Vec<f64> {
    let n = h * w;
    let r = params.radius;
    let mut mean_i = vec![0.0; n];
    let mut mean_p = vec![0.0; n];
    let mut corr_ii = vec![0.0; n];
    let mut corr_ip = vec![0.0; n];
    box_plane(guide, h, w, r, &mut mean_i);
    box_plane(input, h, w, r, &mut mean_p);
    let ii: Vec<f64> = guide.iter().map(|v| v * v).collect();
    let ip: Vec<f64> = guide.iter().zip(input).map(|(g, p)| g * p).collect();
    box_plane(&ii, h, w, r, &mut corr_ii);
    box_plane(&ip, h, w, r, &mut corr_ip);

    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for k in 0..n {
        let var_i = corr_ii[k] - mean_i[k] * mean_i[k];
        let cov_ip = corr_ip[k] - mean_i[k] * mean_p[k];
        a[k] = cov_ip / (var_i + params.eps);
        b[k] = mean_p[k] - a[k] * mean_i[k];
    }
    let mut mean_a = vec![0.0; n];
    let mut mean_b = vec![0.0; n];
    box_plane(&a, h, w, r, &mut mean_a);
    box_plane(&b, h, w, r, &mut mean_b);
    (0..n).map(|k| mean_a[k] * guide[k] + mean_b[k]).collect()
}

/// Guided filter of `input` under `guide`. A single-channel guide steers
/// every input channel; otherwise channels are paired one-to-one.
pub fn guided_filter(guide: &Image, input: &Image, params: &GuidedFilterParams) -> Result<Image> {
    params.validate()?;
    if guide.height() != input.height() || guide.width() != input.width() {
        return Err(Error::Shape(format!(
            "guide is {}x{} but input is {}x{}",
            guide.height(),
            guide.width(),
            input.height(),
            input.width()
        )));
    }
    if guide.channels() != 1 && guide.channels() != input.channels() {
        return Err(Error::Shape(format!(
            "{}-channel guide cannot steer a {}-channel input",
            guide.channels(),
            input.channels()
        )));
    }
    let (h, w) = (input.height(), input.width());
    let mut out = Vec::with_capacity(input.data().len());
    for c in 0..input.channels() {
        let g = if guide.channels() == 1 {
            guide.plane(0)
        } else {
            guide.plane(c)
        };
        out.extend(guided_plane(g, input.plane(c), h, w, params));
    }
    Ok(input.with_data(out))
}

/// Self-guided smoothing of each channel, clamped to `[0, 1]`.
pub fn smooth(img: &Image, params: &GuidedFilterParams) -> Result<Image> {
    Ok(guided_filter(img, img, params)?.clamped())
}
