//! Dense CHW tensors and the handful of differentiable layers the generator
//! and the feature extractor are built from. Every layer exposes an explicit
//! forward and backward; callers keep whatever activations the backward
//! pass needs.

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_image(img: &Image) -> Self {
        Tensor {
            c: img.channels(),
            h: img.height(),
            w: img.width(),
            data: img.data().to_vec(),
        }
    }

    pub fn to_image(&self) -> Result<Image> {
        Image::new(self.h, self.w, self.c, self.data.clone())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.c, self.h, self.w)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn with_data(&self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, optionally transposing
/// either operand through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index implied by the
    // dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Column matrix of reflection-padded 3x3 neighbourhoods:
/// row `ci*9 + ky*3 + kx`, column `y*w + x`.
fn im2col(input: &Tensor) -> Vec<f64> {
    let (h, w) = (input.h, input.w);
    let hw = h * w;
    let mut cols = vec![0.0; input.c * 9 * hw];
    for ci in 0..input.c {
        let plane = input.plane(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    let src = &plane[sy * w..(sy + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    // interior columns are a shifted copy; patch the two edges
                    match kx {
                        0 => {
                            dst[1..].copy_from_slice(&src[..w - 1]);
                            dst[0] = src[1];
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = src[w - 2];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] += src[x];
                            }
                            dst[1] += src[0];
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] += src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] += src[x];
                            }
                            dst[w - 2] += src[w - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Shape of a 3x3 stride-1 convolution with reflection padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.cout
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.c != self.cin {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.cin, input.c
            )));
        }
        if input.h < 2 || input.w < 2 {
            return Err(Error::Shape(format!(
                "reflection padding needs at least 2x2 pixels, got {}x{}",
                input.h, input.w
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor, weight: &[f64], bias: &[f64]) -> Result<Tensor> {
        self.check_input(input)?;
        let hw = input.h * input.w;
        let cols = im2col(input);
        let mut out = Tensor::zeros(self.cout, input.h, input.w);
        for (co, b) in bias.iter().enumerate() {
            out.data[co * hw..(co + 1) * hw].fill(*b);
        }
        gemm(
            self.cout,
            self.cin * 9,
            hw,
            weight,
            false,
            &cols,
            false,
            &mut out.data,
            true,
        );
        Ok(out)
    }

    pub fn backward(
        &self,
        input: &Tensor,
        weight: &[f64],
        dout: &Tensor,
        need_input: bool,
    ) -> ConvGrads {
        let hw = input.h * input.w;
        let k = self.cin * 9;
        let cols = im2col(input);
        let mut dw = vec![0.0; self.cout * k];
        gemm(
            self.cout, hw, k, &dout.data, false, &cols, true, &mut dw, false,
        );
        let db = dout.data.chunks(hw).map(|p| p.iter().sum()).collect();
        let din = need_input.then(|| {
            let mut dcols = vec![0.0; k * hw];
            gemm(
                k, self.cout, hw, weight, true, &dout.data, false, &mut dcols, false,
            );
            col2im(&dcols, self.cin, input.h, input.w)
        });
        ConvGrads {
            input: din,
            weight: dw,
            bias: db,
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.with_data(x.data.iter().map(|v| v.max(0.0)).collect())
}

/// Gradient through a ReLU given its *output*.
pub fn relu_backward(out: &Tensor, dout: &Tensor) -> Tensor {
    out.with_data(
        out.data
            .iter()
            .zip(&dout.data)
            .map(|(o, d)| if *o > 0.0 { *d } else { 0.0 })
            .collect(),
    )
}

#[inline]
fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.with_data(x.data.iter().map(|v| sigmoid_scalar(*v)).collect())
}

/// Gradient through a sigmoid given its *output*.
pub fn sigmoid_backward(out: &Tensor, dout: &Tensor) -> Tensor {
    out.with_data(
        out.data
            .iter()
            .zip(&dout.data)
            .map(|(s, d)| d * s * (1.0 - s))
            .collect(),
    )
}

/// 2x2 average pooling; a trailing odd row or column is dropped.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (h, w) = (x.h / 2, x.w / 2);
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("cannot pool a {}x{} map", x.h, x.w)));
    }
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.plane(c);
        for y in 0..h {
            for xx in 0..w {
                let i = 2 * y * x.w + 2 * xx;
                out.data[(c * h + y) * w + xx] =
                    0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(input_shape: (usize, usize, usize), dout: &Tensor) -> Tensor {
    let (c, ih, iw) = input_shape;
    let mut din = Tensor::zeros(c, ih, iw);
    for ch in 0..c {
        for y in 0..dout.h {
            for x in 0..dout.w {
                let g = 0.25 * dout.data[(ch * dout.h + y) * dout.w + x];
                let i = (ch * ih + 2 * y) * iw + 2 * x;
                din.data[i] += g;
                din.data[i + 1] += g;
                din.data[i + iw] += g;
                din.data[i + iw + 1] += g;
            }
        }
    }
    din
}

const NORM_EPS: f64 = 1e-5;

/// Per-channel spatial standardization without affine parameters. Returns
/// the normalized tensor and the per-channel inverse standard deviations.
pub fn instance_norm(x: &Tensor) -> (Tensor, Vec<f64>) {
    let hw = (x.h * x.w) as f64;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.c);
    for plane in out.data.chunks_mut(x.h * x.w) {
        let mean = plane.iter().sum::<f64>() / hw;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn instance_norm_backward(normed: &Tensor, inv_std: &[f64], dout: &Tensor) -> Tensor {
    let n = normed.h * normed.w;
    let mut din = dout.clone();
    for (c, inv) in inv_std.iter().enumerate() {
        let y = &normed.data[c * n..(c + 1) * n];
        let d = &mut din.data[c * n..(c + 1) * n];
        let mean_d = d.iter().sum::<f64>() / n as f64;
        let mean_dy = d.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for (dv, yv) in d.iter_mut().zip(y) {
            *dv = inv * (*dv - mean_d - yv * mean_dy);
        }
    }
    din
}
