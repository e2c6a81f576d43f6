//! Planar real-valued images, PNG/JPEG I/O, bilinear resizing and the
//! total-variation texture metric.
//!
//! Pixel data is stored channel-planar: all of channel 0 in row-major order,
//! then channel 1, and so on. Stored and decoded images live in `[0, 1]`;
//! intermediate images (for example after noise injection) may hold any
//! finite value and are rejected by [`save_image`] until clamped.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Builds an image by evaluating `f(channel, y, x)` at every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when every value is finite and inside `[0, 1]`.
    pub fn is_storable(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Crops a `height`x`width` window with its top-left corner at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Argument(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{} image",
                self.height, self.width
            )));
        }
        Image::from_fn(height, width, self.channels, |c, y, x| {
            self.get(c, top + y, left + x)
        })
    }

    /// Replicates a single-channel image into three identical channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// Elementwise sum; dimensions must agree.
    pub fn add(&self, other: &Image) -> Result<Image> {
        if !self.same_dims(other) {
            return Err(Error::Shape(format!(
                "cannot add {}x{}x{} and {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_dims(other), "dimension mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Same dimensions, new pixel buffer.
    pub fn with_data(&self, data: Vec<f64>) -> Image {
        debug_assert_eq!(data.len(), self.data.len());
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }
}

fn decode_error(path: &Path, e: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Decodes a PNG or JPEG file into a 3-channel image with values in `[0, 1]`.
/// Grayscale files are promoted by channel replication.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| decode_error(path, e))?;
    Ok(from_dynamic(&decoded))
}

pub(crate) fn from_dynamic(decoded: &DynamicImage) -> Image {
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Image {
        height: h,
        width: w,
        channels: 3,
        data,
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

/// Writes a PNG. Values must already be inside `[0, 1]`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(bad) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range(format!(
            "pixel value {bad} outside [0, 1]; clamp before saving"
        )));
    }
    let (w, h) = (img.width as u32, img.height as u32);
    let result = if img.channels == 1 {
        let buf: GrayImage = ImageBuffer::from_fn(w, h, |x, y| {
            Luma([quantize(img.get(0, y as usize, x as usize))])
        });
        buf.save_with_format(path, image::ImageFormat::Png)
    } else {
        let buf: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                quantize(img.get(0, y, x)),
                quantize(img.get(1, y, x)),
                quantize(img.get(2, y, x)),
            ])
        });
        buf.save_with_format(path, image::ImageFormat::Png)
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(other.to_string()),
        },
    })
}

/// Source coordinate of output index `i` under corner-aligned sampling.
#[inline]
fn corner_aligned(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling: output corners coincide
/// with input corners.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let s = corner_aligned(i, n_in, n_out);
                let lo = (s.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = taps(img.height, out_h);
    let xs = taps(img.width, out_w);
    Image::from_fn(out_h, out_w, img.channels, |c, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
        let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Anisotropic total variation: the mean absolute forward difference over
/// all vertical and horizontal neighbour pairs in every channel.
pub fn total_variation(img: &Image) -> Result<f64> {
    if img.height < 2 || img.width < 2 {
        return Err(Error::Argument(format!(
            "total variation needs at least 2x2 pixels, got {}x{}",
            img.height, img.width
        )));
    }
    let (h, w) = (img.height, img.width);
    let mut sum = 0.0;
    for c in 0..img.channels {
        let p = img.plane(c);
        for y in 0..h {
            let row = &p[y * w..(y + 1) * w];
            for x in 0..w - 1 {
                sum += (row[x + 1] - row[x]).abs();
            }
            if y + 1 < h {
                let next = &p[(y + 1) * w..(y + 2) * w];
                for x in 0..w {
                    sum += (next[x] - row[x]).abs();
                }
            }
        }
    }
    let terms = img.channels * ((h - 1) * w + h * (w - 1));
    Ok(sum / terms as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureMetricReport {
    pub tv_energy: f64,
    pub per_image: Vec<(String, f64)>,
}

impl TextureMetricReport {
    pub fn from_images<'a>(images: impl IntoIterator<Item = (String, &'a Image)>) -> Result<Self> {
        let per_image = images
            .into_iter()
            .map(|(id, img)| total_variation(img).map(|tv| (id, tv)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_values(per_image))
    }

    pub fn from_values(per_image: Vec<(String, f64)>) -> Self {
        let tv_energy = if per_image.is_empty() {
            0.0
        } else {
            per_image.iter().map(|(_, v)| v).sum::<f64>() / per_image.len() as f64
        };
        TextureMetricReport {
            tv_energy,
            per_image,
        }
    }
}
