//! Dual-pipeline generator.
//!
//! A shared stem feeds two fully-convolutional branches:
//!
//! * the **color** branch, a few 3x3 convolutions at the stem width, which
//!   keeps its receptive field small so it cannot synthesize texture at
//!   scale;
//! * the **texture** branch, a deeper stack at `channel_width` with one
//!   residual connection (from the output of its first layer into the
//!   pre-activation of its third) once it has at least four layers.
//!
//! All convolutions are 3x3, stride 1, reflection padded. Hidden layers use
//! ReLU, both heads end in a sigmoid so outputs lie in `[0, 1]` whatever
//! the input range.
//!
//! Parameter count: a convolution from `cin` to `cout` channels holds
//! `9·cin·cout + cout` values. With stem width `S`, texture width `W`,
//! `nc` color layers and `nt` texture layers:
//!
//! ```text
//! stem     9·3·S + S
//! color    (nc-1)·(9·S·S + S) + 9·S·3 + 3
//! texture  (9·S·W + W) + (nt-2)·(9·W·W + W) + 9·W·3 + 3
//! ```
//!
//! (single-layer branches map straight from `S` to 3 channels).
//! The defaults are 36 454 parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{save_image, total_variation, Image};
use crate::nn::{
    instance_norm, instance_norm_backward, relu, relu_backward, sigmoid, sigmoid_backward, Conv3x3,
    Tensor,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Relu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of the stem, which is also the color branch width.
    pub stem_channels: usize,
    pub color_branch_convs: usize,
    pub texture_branch_convs: usize,
    /// Width of the texture branch.
    pub channel_width: usize,
    /// Instance normalization on hidden texture layers.
    pub texture_norm: bool,
    pub nonlinearity: Nonlinearity,
    pub output_activation: OutputActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stem_channels: 16,
            color_branch_convs: 2,
            texture_branch_convs: 5,
            channel_width: 32,
            texture_norm: false,
            nonlinearity: Nonlinearity::Relu,
            output_activation: OutputActivation::Sigmoid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Color,
    Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerPath {
    Stem,
    Color,
    Texture,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub path: LayerPath,
    pub conv: Conv3x3,
    /// Final layer of a branch (sigmoid head).
    pub head: bool,
}

impl LayerSpec {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

/// Receptive field of a chain of `convs` 3x3 stride-1 convolutions.
pub fn path_receptive_field(convs: usize) -> usize {
    1 + 2 * convs
}

pub fn receptive_field(config: &ModelConfig, branch: Branch) -> usize {
    let convs = match branch {
        Branch::Color => config.color_branch_convs,
        Branch::Texture => config.texture_branch_convs,
    };
    path_receptive_field(1 + convs)
}

/// Index of the texture layer that receives the residual, if any.
const RESIDUAL_TARGET: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0
            || self.channel_width == 0
            || self.color_branch_convs == 0
            || self.texture_branch_convs == 0
        {
            return Err(Error::Config(
                "all layer counts and widths must be >= 1".into(),
            ));
        }
        if self.color_branch_convs >= self.texture_branch_convs {
            return Err(Error::Config(format!(
                "color branch ({} convs) must be shallower than texture branch ({} convs)",
                self.color_branch_convs, self.texture_branch_convs
            )));
        }
        Ok(())
    }

    fn has_residual(&self) -> bool {
        self.texture_branch_convs > RESIDUAL_TARGET + 1
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let s = self.stem_channels;
        let w = self.channel_width;
        let mut out = vec![LayerSpec {
            name: "stem".into(),
            path: LayerPath::Stem,
            conv: Conv3x3 { cin: 3, cout: s },
            head: false,
        }];
        let nc = self.color_branch_convs;
        for i in 0..nc {
            let head = i + 1 == nc;
            out.push(LayerSpec {
                name: format!("color.{i}"),
                path: LayerPath::Color,
                conv: Conv3x3 {
                    cin: s,
                    cout: if head { 3 } else { s },
                },
                head,
            });
        }
        let nt = self.texture_branch_convs;
        for i in 0..nt {
            let head = i + 1 == nt;
            out.push(LayerSpec {
                name: format!("texture.{i}"),
                path: LayerPath::Texture,
                conv: Conv3x3 {
                    cin: if i == 0 { s } else { w },
                    cout: if head { 3 } else { w },
                },
                head,
            });
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.conv.param_count()).sum()
    }

    /// Smallest input side the forward pass accepts.
    pub fn min_input_side(&self) -> usize {
        receptive_field(self, Branch::Texture)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter tensors keyed by layer path, e.g. `texture.3.weight`.
pub type Parameters = BTreeMap<String, ParamTensor>;

/// Gradients keyed like [`Parameters`].
pub type Gradients = BTreeMap<String, Vec<f64>>;

/// Fan-in scaled uniform initialization with zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::new();
    for layer in config.layers() {
        let fan_in = (layer.conv.cin * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..layer.conv.weight_len())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        params.insert(
            layer.weight_name(),
            ParamTensor {
                shape: vec![layer.conv.cout, layer.conv.cin, 3, 3],
                data: weight,
            },
        );
        params.insert(
            layer.bias_name(),
            ParamTensor {
                shape: vec![layer.conv.cout],
                data: vec![0.0; layer.conv.cout],
            },
        );
    }
    Ok(params)
}

pub fn validate_params(config: &ModelConfig, params: &Parameters) -> Result<()> {
    config.validate()?;
    let layers = config.layers();
    if params.len() != 2 * layers.len() {
        return Err(Error::Shape(format!(
            "expected {} parameter tensors, found {}",
            2 * layers.len(),
            params.len()
        )));
    }
    for layer in &layers {
        let expect = [
            (
                layer.weight_name(),
                vec![layer.conv.cout, layer.conv.cin, 3, 3],
            ),
            (layer.bias_name(), vec![layer.conv.cout]),
        ];
        for (name, shape) in expect {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "parameter {name} has wrong shape {:?}",
                    t.shape
                )));
            }
            if !t.data.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("parameter {name} is not finite")));
            }
        }
    }
    Ok(())
}

/// Activations kept from one layer for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    input: Tensor,
    norm: Option<(Tensor, Vec<f64>)>,
    /// Post-activation output.
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct DualTrace {
    stem: LayerTrace,
    color: Vec<LayerTrace>,
    texture: Vec<LayerTrace>,
}

impl DualTrace {
    pub fn color_output(&self) -> &Tensor {
        &self.color.last().expect("color branch has layers").output
    }

    pub fn texture_output(&self) -> Option<&Tensor> {
        self.texture.last().map(|t| &t.output)
    }
}

/// A validated configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: ModelConfig,
    params: Parameters,
    layers: Vec<LayerSpec>,
}

impl Generator {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        validate_params(&config, &params)?;
        let layers = config.layers();
        Ok(Generator {
            config,
            params,
            layers,
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn into_params(self) -> Parameters {
        self.params
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn run_layer(
        &self,
        layer: &LayerSpec,
        input: &Tensor,
        skip: Option<&Tensor>,
    ) -> Result<LayerTrace> {
        let w = &self.params[&layer.weight_name()].data;
        let b = &self.params[&layer.bias_name()].data;
        let mut pre = layer.conv.forward(input, w, b)?;
        let mut norm = None;
        if self.config.texture_norm && layer.path == LayerPath::Texture && !layer.head {
            let (normed, inv_std) = instance_norm(&pre);
            pre = normed.clone();
            norm = Some((normed, inv_std));
        }
        if let Some(skip) = skip {
            pre.add_assign(skip);
        }
        let output = if layer.head {
            sigmoid(&pre)
        } else {
            relu(&pre)
        };
        Ok(LayerTrace {
            input: input.clone(),
            norm,
            output,
        })
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.c != 3 {
            return Err(Error::Shape(format!(
                "generator input needs 3 channels, got {}",
                input.c
            )));
        }
        let min = self.config.min_input_side();
        if input.h < min || input.w < min {
            return Err(Error::Shape(format!(
                "input {}x{} is smaller than the texture receptive field {min}",
                input.h, input.w
            )));
        }
        if !input.is_finite() {
            return Err(Error::numeric("generator input contains non-finite values"));
        }
        Ok(())
    }

    /// Forward pass keeping activations. With `with_texture = false` only
    /// the stem and color branch run.
    pub fn forward_trace(&self, input: &Tensor, with_texture: bool) -> Result<DualTrace> {
        self.check_input(input)?;
        let mut specs = self.layers.iter();
        let stem = self.run_layer(specs.next().expect("stem"), input, None)?;
        let mut color: Vec<LayerTrace> = Vec::with_capacity(self.config.color_branch_convs);
        let mut texture: Vec<LayerTrace> = Vec::new();
        for layer in specs {
            match layer.path {
                LayerPath::Color => {
                    let x = color.last().map_or(&stem.output, |t| &t.output);
                    let trace = self.run_layer(layer, x, None)?;
                    color.push(trace);
                }
                LayerPath::Texture if with_texture => {
                    let x = texture.last().map_or(&stem.output, |t| &t.output);
                    let skip = (self.config.has_residual() && texture.len() == RESIDUAL_TARGET)
                        .then(|| &texture[0].output);
                    let trace = self.run_layer(layer, x, skip)?;
                    texture.push(trace);
                }
                _ => {}
            }
        }
        Ok(DualTrace {
            stem,
            color,
            texture,
        })
    }

    /// Color and texture outputs for an unconstrained 3-channel input.
    pub fn forward_dual(&self, input: &Image) -> Result<(Image, Image)> {
        let trace = self.forward_trace(&Tensor::from_image(input), true)?;
        let color = trace.color_output().to_image()?;
        let texture = trace.texture_output().expect("texture ran").to_image()?;
        Ok((color, texture))
    }

    pub fn forward_color(&self, input: &Image) -> Result<Image> {
        self.forward_trace(&Tensor::from_image(input), false)?
            .color_output()
            .to_image()
    }

    pub fn forward_branch(&self, input: &Image, branch: Branch) -> Result<Image> {
        match branch {
            Branch::Color => self.forward_color(input),
            Branch::Texture => Ok(self.forward_dual(input)?.1),
        }
    }

    /// Backward through one layer; returns the gradient w.r.t. its input
    /// and, for the residual target, the gradient flowing into the skip.
    fn layer_backward(
        &self,
        layer: &LayerSpec,
        trace: &LayerTrace,
        dout: &Tensor,
        grads: &mut Gradients,
        need_input: bool,
    ) -> (Option<Tensor>, Tensor) {
        let mut dpre = if layer.head {
            sigmoid_backward(&trace.output, dout)
        } else {
            relu_backward(&trace.output, dout)
        };
        let dskip = dpre.clone();
        if let Some((normed, inv_std)) = &trace.norm {
            dpre = instance_norm_backward(normed, inv_std, &dpre);
        }
        let w = &self.params[&layer.weight_name()].data;
        let g = layer.conv.backward(&trace.input, w, &dpre, need_input);
        accumulate(grads, layer.weight_name(), g.weight);
        accumulate(grads, layer.bias_name(), g.bias);
        (g.input, dskip)
    }

    /// Parameter gradients given loss gradients w.r.t. either output.
    /// Layers on a branch without an output gradient receive no entries.
    pub fn backward(
        &self,
        trace: &DualTrace,
        d_color: Option<&Tensor>,
        d_texture: Option<&Tensor>,
    ) -> Gradients {
        let mut grads = Gradients::new();
        let mut d_stem = Tensor::zeros(
            trace.stem.output.c,
            trace.stem.output.h,
            trace.stem.output.w,
        );
        let color_layers: Vec<&LayerSpec> = self
            .layers
            .iter()
            .filter(|l| l.path == LayerPath::Color)
            .collect();
        let texture_layers: Vec<&LayerSpec> = self
            .layers
            .iter()
            .filter(|l| l.path == LayerPath::Texture)
            .collect();

        if let Some(d) = d_color {
            let mut dout = d.clone();
            for (layer, t) in color_layers.iter().zip(&trace.color).rev() {
                let (din, _) = self.layer_backward(layer, t, &dout, &mut grads, true);
                dout = din.expect("requested");
            }
            d_stem.add_assign(&dout);
        }
        if let (Some(d), false) = (d_texture, trace.texture.is_empty()) {
            let mut dout = d.clone();
            let mut d_skip: Option<Tensor> = None;
            for (i, (layer, t)) in texture_layers.iter().zip(&trace.texture).enumerate().rev() {
                let (din, dskip) = self.layer_backward(layer, t, &dout, &mut grads, true);
                dout = din.expect("requested");
                if self.config.has_residual() && i == RESIDUAL_TARGET {
                    d_skip = Some(dskip);
                }
                if i == 1 {
                    // the output of layer 0 feeds both layer 1 and the skip
                    if let Some(s) = d_skip.take() {
                        dout.add_assign(&s);
                    }
                }
            }
            d_stem.add_assign(&dout);
        }
        let stem = &self.layers[0];
        self.layer_backward(stem, &trace.stem, &d_stem, &mut grads, false);
        grads
    }

    /// Post-activation output of every convolution, in layer order.
    pub fn layer_features(&self, input: &Image) -> Result<Vec<(String, Tensor)>> {
        let trace = self.forward_trace(&Tensor::from_image(input), true)?;
        let mut out = vec![("stem".to_string(), trace.stem.output)];
        let names = self.layers.iter().skip(1).map(|l| l.name.clone());
        let outputs = trace
            .color
            .into_iter()
            .chain(trace.texture)
            .map(|t| t.output);
        out.extend(names.zip(outputs));
        Ok(out)
    }

    /// Writes one grayscale PNG grid per layer. Each channel is rescaled to
    /// `[0, 1]` on its own; constant channels render as 0.
    pub fn dump_feature_maps(&self, input: &Image, out_dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut paths = Vec::new();
        for (i, (name, t)) in self.layer_features(input)?.iter().enumerate() {
            let path = out_dir.join(format!("{i:02}_{}.png", name.replace('.', "_")));
            save_image(&feature_grid(t)?, &path)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

fn accumulate(grads: &mut Gradients, name: String, g: Vec<f64>) {
    match grads.get_mut(&name) {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => {
            grads.insert(name, g);
        }
    }
}

/// Tiles the channels of a feature map into a near-square grayscale grid.
pub fn feature_grid(t: &Tensor) -> Result<Image> {
    let cols = (t.c as f64).sqrt().ceil() as usize;
    let rows = t.c.div_ceil(cols);
    let mut grid = Image::filled(rows * t.h, cols * t.w, 1, 0.0)?;
    for c in 0..t.c {
        let plane = t.plane(c);
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let (gy, gx) = ((c / cols) * t.h, (c % cols) * t.w);
        for y in 0..t.h {
            for x in 0..t.w {
                let v = if span > 0.0 {
                    (plane[y * t.w + x] - lo) / span
                } else {
                    0.0
                };
                grid.set(0, gy + y, gx + x, v);
            }
        }
    }
    Ok(grid)
}

/// Mean total variation over the channels of a feature map.
pub fn feature_tv(t: &Tensor) -> f64 {
    let mut sum = 0.0;
    for c in 0..t.c {
        let plane = Image::new(t.h, t.w, 1, t.plane(c).to_vec()).expect("valid plane");
        sum += total_variation(&plane).unwrap_or(0.0);
    }
    sum / t.c as f64
}
