//! The differentiated input distributions fed to the generator during
//! training: raw content, guided-filter smoothed content, and smoothed
//! content plus i.i.d. Gaussian noise, together with the alternating
//! texture-modeling / texture-removal step schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guided_filter::{smooth, GuidedFilterParams};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub mean: f64,
    pub sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            mean: 0.0,
            sigma: 0.1,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) || !self.mean.is_finite() {
            return Err(Error::Argument(format!(
                "noise needs finite mean and sigma >= 0, got ({}, {})",
                self.mean, self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// No transform.
    Raw,
    /// Every input smoothed.
    SmoothAll,
    /// Raw content plus noise.
    NoiseAll,
    /// Alternating smooth+noise and smooth-only steps.
    Idd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStepKind {
    TextureModeling,
    TextureRemoval,
}

impl TrainStepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainStepKind::TextureModeling => "texture_modeling",
            TrainStepKind::TextureRemoval => "texture_removal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IddRatio {
    pub modeling: u32,
    pub removal: u32,
}

impl Default for IddRatio {
    fn default() -> Self {
        IddRatio {
            modeling: 1,
            removal: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputPolicy {
    pub variant: PolicyKind,
    /// `None` picks [`GuidedFilterParams::for_size`] per image.
    pub filter: Option<GuidedFilterParams>,
    pub noise: NoiseSpec,
    pub idd_ratio: IddRatio,
}

impl Default for InputPolicy {
    fn default() -> Self {
        InputPolicy {
            variant: PolicyKind::Idd,
            filter: None,
            noise: NoiseSpec::default(),
            idd_ratio: IddRatio::default(),
        }
    }
}

impl InputPolicy {
    pub fn with_variant(variant: PolicyKind) -> Self {
        InputPolicy {
            variant,
            ..Default::default()
        }
    }

    pub fn filter_for(&self, img: &Image) -> GuidedFilterParams {
        self.filter
            .unwrap_or_else(|| GuidedFilterParams::for_size(img.height(), img.width()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = &self.filter {
            f.validate()?;
        }
        self.noise.validate()?;
        if self.idd_ratio.modeling == 0 || self.idd_ratio.removal == 0 {
            return Err(Error::Argument(
                "idd ratio components must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mixes a global seed with a step index and an image index. Parallel batch
/// construction derives every per-image stream from this, so results do not
/// depend on scheduling.
pub fn derive_seed(global: u64, step: u64, image: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(global) ^ step) ^ image.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// I.i.d. Gaussian field in planar order, deterministic for a given seed.
pub fn sample_noise(
    height: usize,
    width: usize,
    channels: usize,
    spec: &NoiseSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Argument(
            "noise field dimensions must be positive".into(),
        ));
    }
    let n = height * width * channels;
    if spec.sigma == 0.0 {
        return Ok(vec![spec.mean; n]);
    }
    let normal = Normal::new(spec.mean, spec.sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| normal.sample(&mut rng)).collect())
}

pub fn add_noise(img: &Image, spec: &NoiseSpec, seed: u64) -> Result<Image> {
    let noise = sample_noise(img.height(), img.width(), img.channels(), spec, seed)?;
    Ok(img.with_data(img.data().iter().zip(noise).map(|(v, n)| v + n).collect()))
}

/// Transforms a content image into the generator input for one step.
/// Noised outputs are not clamped.
pub fn make_input(
    content: &Image,
    policy: &InputPolicy,
    step_kind: Option<TrainStepKind>,
    seed: u64,
) -> Result<Image> {
    match (policy.variant, step_kind) {
        (PolicyKind::Idd, None) => Err(Error::Argument(
            "the idd policy needs a step kind for every input".into(),
        )),
        (PolicyKind::Raw, _) => Ok(content.clone()),
        (PolicyKind::SmoothAll, _) => smooth(content, &policy.filter_for(content)),
        (PolicyKind::NoiseAll, _) => add_noise(content, &policy.noise, seed),
        (PolicyKind::Idd, Some(TrainStepKind::TextureRemoval)) => {
            smooth(content, &policy.filter_for(content))
        }
        (PolicyKind::Idd, Some(TrainStepKind::TextureModeling)) => {
            let smoothed = smooth(content, &policy.filter_for(content))?;
            add_noise(&smoothed, &policy.noise, seed)
        }
    }
}

/// Cyclic schedule: `modeling` texture-modeling steps followed by `removal`
/// texture-removal steps, repeated.
pub fn step_kind_schedule(step_index: u64, ratio: IddRatio) -> Result<TrainStepKind> {
    if ratio.modeling == 0 || ratio.removal == 0 {
        return Err(Error::Argument(
            "idd ratio components must be positive".into(),
        ));
    }
    let period = u64::from(ratio.modeling) + u64::from(ratio.removal);
    Ok(if step_index % period < u64::from(ratio.modeling) {
        TrainStepKind::TextureModeling
    } else {
        TrainStepKind::TextureRemoval
    })
}
