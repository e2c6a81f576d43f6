//! Training losses and their analytic gradients.
//!
//! * content loss: mean squared error at the content tap;
//! * branch style loss: mean squared Gram difference summed over a branch's
//!   taps (the color branch only sees the shallowest [`COLOR_TAPS`] taps);
//! * masked total variation (Mtv): absolute forward differences weighted by
//!   the mean mask value of each pixel pair, normalized by the total weight.
//!
//! The subgradient of `|d|` at `d = 0` is taken as 0.

use serde::{Deserialize, Serialize};

use crate::distributions::TrainStepKind;
use crate::error::{Error, Result};
use crate::features::{FeatureMaps, COLOR_TAPS};
use crate::image::Image;
use crate::model::Branch;
use crate::nn::Tensor;

/// Channel correlation matrix, `c × c` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Gram {
    pub c: usize,
    pub data: Vec<f64>,
}

impl Gram {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.c + j]
    }
}

/// `G[i][j] = Σ_hw F[i]·F[j] / (C·H·W)`.
pub fn gram(f: &Tensor) -> Gram {
    let hw = f.h * f.w;
    let norm = (f.c * hw) as f64;
    let mut data = vec![0.0; f.c * f.c];
    for i in 0..f.c {
        let a = f.plane(i);
        for j in i..f.c {
            let b = f.plane(j);
            let v = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / norm;
            data[i * f.c + j] = v;
            data[j * f.c + i] = v;
        }
    }
    Gram { c: f.c, data }
}

/// Gradient w.r.t. the features of `Σ dG ⊙ G(F)` for symmetric `dG`.
fn gram_backward(f: &Tensor, d_gram: &[f64]) -> Tensor {
    let hw = f.h * f.w;
    let scale = 2.0 / (f.c * hw) as f64;
    let mut out = Tensor::zeros(f.c, f.h, f.w);
    for i in 0..f.c {
        let dst = &mut out.data[i * hw..(i + 1) * hw];
        for j in 0..f.c {
            let g = d_gram[i * f.c + j] * scale;
            if g != 0.0 {
                for (d, v) in dst.iter_mut().zip(f.plane(j)) {
                    *d += g * v;
                }
            }
        }
    }
    out
}

/// Cached Gram targets of the style image, one per tap.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTargets {
    pub grams: Vec<Gram>,
}

impl StyleTargets {
    pub fn from_features(style: &FeatureMaps) -> Self {
        StyleTargets {
            grams: style.maps.iter().map(gram).collect(),
        }
    }
}

fn branch_taps(branch: Branch, available: usize) -> usize {
    match branch {
        Branch::Color => COLOR_TAPS.min(available),
        Branch::Texture => available,
    }
}

/// Branch style loss and its gradient w.r.t. every tap (taps outside the
/// branch get `None`).
pub fn branch_style_loss_grad(
    out: &FeatureMaps,
    style: &StyleTargets,
    branch: Branch,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    if out.maps.len() != style.grams.len() {
        return Err(Error::Shape(format!(
            "{} output taps but {} style taps",
            out.maps.len(),
            style.grams.len()
        )));
    }
    let used = branch_taps(branch, out.maps.len());
    let mut loss = 0.0;
    let mut grads = vec![None; out.maps.len()];
    for (i, (f, target)) in out.maps.iter().zip(&style.grams).enumerate().take(used) {
        if f.c != target.c {
            return Err(Error::Shape(format!(
                "tap {i}: {} channels vs style {}",
                f.c, target.c
            )));
        }
        let g = gram(f);
        let n = (f.c * f.c) as f64;
        let diff: Vec<f64> = g
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| a - b)
            .collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>() / n;
        let d_gram: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
        grads[i] = Some(gram_backward(f, &d_gram));
    }
    Ok((loss, grads))
}

pub fn branch_style_loss(out: &FeatureMaps, style: &StyleTargets, branch: Branch) -> Result<f64> {
    Ok(branch_style_loss_grad(out, style, branch)?.0)
}

pub fn content_loss_grad(out: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if !out.same_shape(target) {
        return Err(Error::Shape(format!(
            "content features {} vs target {}",
            out.shape_str(),
            target.shape_str()
        )));
    }
    let n = out.data.len() as f64;
    let diff: Vec<f64> = out
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| a - b)
        .collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = out.with_data(diff.iter().map(|d| 2.0 * d / n).collect());
    Ok((loss, grad))
}

pub fn content_loss(out: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(content_loss_grad(out, target)?.0)
}

/// Masked total variation and its (sub)gradient.
pub fn masked_total_variation_grad(img: &Tensor, mask: Option<&Image>) -> Result<(f64, Tensor)> {
    let (h, w) = (img.h, img.w);
    if h < 2 || w < 2 {
        return Err(Error::Argument(format!(
            "total variation needs at least 2x2, got {h}x{w}"
        )));
    }
    if let Some(m) = mask {
        if m.height() != h || m.width() != w || m.channels() != 1 {
            return Err(Error::Shape(format!(
                "mask is {}x{}x{}, image is {h}x{w}",
                m.height(),
                m.width(),
                m.channels()
            )));
        }
    }
    let weight =
        |a: usize, b: usize| -> f64 { mask.map_or(1.0, |m| 0.5 * (m.data()[a] + m.data()[b])) };
    let mut weighted = 0.0;
    let mut total_weight = 0.0;
    let mut grad = Tensor::zeros(img.c, h, w);
    for c in 0..img.c {
        let p = img.plane(c);
        let g = &mut grad.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut pair = |j: usize| {
                    let wt = weight(i, j);
                    let d = p[j] - p[i];
                    weighted += wt * d.abs();
                    total_weight += wt;
                    let s = wt
                        * if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    g[j] += s;
                    g[i] -= s;
                };
                if x + 1 < w {
                    pair(i + 1);
                }
                if y + 1 < h {
                    pair(i + w);
                }
            }
        }
    }
    if total_weight == 0.0 {
        return Ok((0.0, grad));
    }
    grad.data.iter_mut().for_each(|v| *v /= total_weight);
    Ok((weighted / total_weight, grad))
}

pub fn masked_total_variation(img: &Tensor, mask: Option<&Image>) -> Result<f64> {
    Ok(masked_total_variation_grad(img, mask)?.0)
}

/// Mask that exempts content edges from smoothing pressure:
/// `1 - |∇ luminance| / max |∇ luminance|` (all ones for a flat image).
pub fn content_edge_mask(content: &Image) -> Result<Image> {
    let (h, w) = (content.height(), content.width());
    let lum = |y: usize, x: usize| -> f64 {
        (0..content.channels())
            .map(|c| content.get(c, y, x))
            .sum::<f64>()
            / content.channels() as f64
    };
    let mut mag = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = if x + 1 < w {
                lum(y, x + 1) - lum(y, x)
            } else {
                0.0
            };
            let gy = if y + 1 < h {
                lum(y + 1, x) - lum(y, x)
            } else {
                0.0
            };
            mag[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    let data = mag
        .iter()
        .map(|m| if max > 0.0 { 1.0 - m / max } else { 1.0 })
        .collect();
    Image::new(h, w, 1, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub content: f64,
    pub style_color: f64,
    pub style_texture: f64,
    pub mtv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            content: 1.0,
            style_color: 1e5,
            style_texture: 1e5,
            mtv: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.content, self.style_color, self.style_texture, self.mtv];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )))
        }
    }
}

/// Raw (unweighted) loss terms for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub content: f64,
    pub style_color: f64,
    pub style_texture: f64,
    pub mtv: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub content: f64,
    pub style_color: f64,
    pub style_texture: f64,
    pub mtv: f64,
    /// `None` outside the alternating policy, where every step uses the
    /// full objective.
    pub step_kind: Option<TrainStepKind>,
}

/// Combines terms under the rule of the step kind. Texture-removal steps
/// keep only Mtv; every other step uses all four terms. Inactive terms are
/// reported as exactly zero.
pub fn assemble_loss(
    kind: Option<TrainStepKind>,
    weights: &LossWeights,
    terms: &LossTerms,
) -> Result<LossReport> {
    let removal = kind == Some(TrainStepKind::TextureRemoval);
    let active = |v: f64| if removal { 0.0 } else { v };
    let report = LossReport {
        content: active(terms.content),
        style_color: active(terms.style_color),
        style_texture: active(terms.style_texture),
        mtv: terms.mtv,
        total: 0.0,
        step_kind: kind,
    };
    let total = weights.content * report.content
        + weights.style_color * report.style_color
        + weights.style_texture * report.style_texture
        + weights.mtv * report.mtv;
    let values = [
        report.content,
        report.style_color,
        report.style_texture,
        report.mtv,
        total,
    ];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite loss term in {report:?}"
        )));
    }
    Ok(LossReport { total, ..report })
}
