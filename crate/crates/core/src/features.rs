//! Frozen convolutional feature extractor used by the perceptual losses.
//!
//! The architecture is a small VGG-style stack:
//!
//! ```text
//! conv1 3->16  relu   tap "relu1"
//! conv2 16->16 relu   tap "relu2"
//! avg-pool 2x2
//! conv3 16->32 relu   tap "relu3"   (content tap)
//! avg-pool 2x2
//! conv4 32->32 relu   tap "relu4"
//! ```
//!
//! Weights come either from a deterministic seeded initialization
//! (`fixed_random`) or from a pretrained tensor file in the checkpoint
//! container format holding `conv{1..4}.weight` / `conv{1..4}.bias`.

use std::env;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::read_tensor_file;
use crate::error::{Error, Result};
use crate::nn::{avg_pool2, avg_pool2_backward, relu, relu_backward, Conv3x3, Tensor};

/// Environment variable naming a pretrained feature weight file.
pub const WEIGHTS_ENV: &str = "IDD_FEATURE_WEIGHTS";

pub const TAPS: [&str; 4] = ["relu1", "relu2", "relu3", "relu4"];
pub const CONTENT_TAP: &str = "relu3";
/// Number of shallowest taps the color branch style loss sees.
pub const COLOR_TAPS: usize = 2;

const CONVS: [Conv3x3; 4] = [
    Conv3x3 { cin: 3, cout: 16 },
    Conv3x3 { cin: 16, cout: 16 },
    Conv3x3 { cin: 16, cout: 32 },
    Conv3x3 { cin: 32, cout: 32 },
];
/// Pool before these conv indices.
const POOL_BEFORE: [bool; 4] = [false, false, true, true];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum FeatureBackend {
    PretrainedPerceptual { path: PathBuf },
    FixedRandom { seed: u64 },
}

impl Default for FeatureBackend {
    fn default() -> Self {
        FeatureBackend::FixedRandom { seed: 0x5EED }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    backend: FeatureBackend,
    weights: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Tap outputs in [`TAPS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    pub maps: Vec<Tensor>,
}

impl FeatureMaps {
    pub fn get(&self, tap: &str) -> Option<&Tensor> {
        TAPS.iter()
            .position(|t| *t == tap)
            .and_then(|i| self.maps.get(i))
    }

    pub fn content(&self) -> &Tensor {
        self.get(CONTENT_TAP).expect("content tap present")
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FeatureTrace {
    inputs: Vec<Tensor>,
    pooled_from: Vec<Option<(usize, usize, usize)>>,
    pub features: FeatureMaps,
}

impl FeatureExtractor {
    pub fn fixed_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = CONVS
            .iter()
            .map(|conv| {
                let bound = (6.0 / (conv.cin * 9) as f64).sqrt();
                let w = (0..conv.weight_len())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                (w, vec![0.0; conv.cout])
            })
            .collect();
        FeatureExtractor {
            backend: FeatureBackend::FixedRandom { seed },
            weights,
        }
    }

    pub fn pretrained(path: &Path) -> Result<Self> {
        let (_, tensors) = read_tensor_file(path)?;
        let mut weights = Vec::with_capacity(CONVS.len());
        for (i, conv) in CONVS.iter().enumerate() {
            let fetch = |suffix: &str, len: usize| -> Result<Vec<f64>> {
                let name = format!("conv{}.{suffix}", i + 1);
                let t = tensors
                    .get(&name)
                    .ok_or_else(|| Error::Shape(format!("feature weights lack {name}")))?;
                if t.data.len() != len {
                    return Err(Error::Shape(format!(
                        "{name} holds {} values, expected {len}",
                        t.data.len()
                    )));
                }
                Ok(t.data.clone())
            };
            weights.push((
                fetch("weight", conv.weight_len())?,
                fetch("bias", conv.cout)?,
            ));
        }
        Ok(FeatureExtractor {
            backend: FeatureBackend::PretrainedPerceptual {
                path: path.to_path_buf(),
            },
            weights,
        })
    }

    /// Builds the requested backend. A pretrained backend whose file is
    /// absent falls back to `fixed_random` with a warning; the
    /// [`WEIGHTS_ENV`] variable overrides a configured path.
    pub fn from_backend(backend: &FeatureBackend) -> Result<Self> {
        let env_path = env::var_os(WEIGHTS_ENV).map(PathBuf::from);
        let requested = match (backend, env_path) {
            (_, Some(p)) => Some(p),
            (FeatureBackend::PretrainedPerceptual { path }, None) => Some(path.clone()),
            (FeatureBackend::FixedRandom { .. }, None) => None,
        };
        match requested {
            Some(path) if path.exists() => Self::pretrained(&path),
            Some(path) => {
                warn!(
                    "pretrained feature weights {} not found; using fixed random features",
                    path.display()
                );
                Ok(Self::fixed_random(FeatureBackend::default().seed()))
            }
            None => Ok(Self::fixed_random(backend.seed())),
        }
    }

    pub fn backend(&self) -> &FeatureBackend {
        &self.backend
    }

    pub fn taps(&self) -> &'static [&'static str] {
        &TAPS
    }

    /// Smallest input side: two pooling stages must leave at least 2x2.
    pub fn min_input_side(&self) -> usize {
        8
    }

    pub fn extract(&self, img: &Tensor) -> Result<FeatureMaps> {
        Ok(self.trace(img)?.features)
    }

    pub fn trace(&self, img: &Tensor) -> Result<FeatureTrace> {
        let min = self.min_input_side();
        if img.h < min || img.w < min {
            return Err(Error::Shape(format!(
                "feature extractor needs at least {min}x{min}, got {}x{}",
                img.h, img.w
            )));
        }
        let mut inputs = Vec::with_capacity(CONVS.len());
        let mut pooled_from = Vec::with_capacity(CONVS.len());
        let mut maps: Vec<Tensor> = Vec::with_capacity(CONVS.len());
        let mut x = img.clone();
        for (i, conv) in CONVS.iter().enumerate() {
            if POOL_BEFORE[i] {
                pooled_from.push(Some((x.c, x.h, x.w)));
                x = avg_pool2(&x)?;
            } else {
                pooled_from.push(None);
            }
            let (w, b) = &self.weights[i];
            let out = relu(&conv.forward(&x, w, b)?);
            inputs.push(x);
            maps.push(out.clone());
            x = out;
        }
        Ok(FeatureTrace {
            inputs,
            pooled_from,
            features: FeatureMaps { maps },
        })
    }

    /// Gradient w.r.t. the extractor input given gradients w.r.t. any
    /// subset of the taps (`None` entries contribute nothing).
    pub fn backward(&self, trace: &FeatureTrace, d_taps: &[Option<Tensor>]) -> Tensor {
        let deepest = d_taps.iter().rposition(|d| d.is_some());
        let Some(deepest) = deepest else {
            let first = &trace.inputs[0];
            return Tensor::zeros(first.c, first.h, first.w);
        };
        let mut d: Option<Tensor> = None;
        for i in (0..=deepest).rev() {
            let mut dout = match (d.take(), &d_taps[i]) {
                (Some(mut acc), Some(extra)) => {
                    acc.add_assign(extra);
                    acc
                }
                (Some(acc), None) => acc,
                (None, Some(extra)) => extra.clone(),
                (None, None) => unreachable!("deepest tap carries a gradient"),
            };
            dout = relu_backward(&trace.features.maps[i], &dout);
            let (w, _) = &self.weights[i];
            let mut din = CONVS[i]
                .backward(&trace.inputs[i], w, &dout, true)
                .input
                .expect("requested");
            if let Some(shape) = trace.pooled_from[i] {
                din = avg_pool2_backward(shape, &din);
            }
            d = Some(din);
        }
        d.expect("at least one layer")
    }
}

impl FeatureBackend {
    fn seed(&self) -> u64 {
        match self {
            FeatureBackend::FixedRandom { seed } => *seed,
            FeatureBackend::PretrainedPerceptual { .. } => 0x5EED,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{write_tensor_file, Manifest};
    use crate::model::ParamTensor;
    use std::collections::BTreeMap;

    fn random_tensor(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor {
            c: 3,
            h,
            w,
            data: (0..3 * h * w).map(|_| rng.random::<f64>()).collect(),
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let x = random_tensor(16, 16, 1);
        let a = FeatureExtractor::fixed_random(3).extract(&x).unwrap();
        let b = FeatureExtractor::fixed_random(3).extract(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.maps.len(), TAPS.len());
        assert_eq!((a.maps[3].c, a.maps[3].h), (32, 4));
    }

    #[test]
    fn constant_input_gives_spatially_constant_features() {
        let fx = FeatureExtractor::fixed_random(1);
        let x = Tensor {
            c: 3,
            h: 12,
            w: 12,
            data: vec![0.4; 3 * 144],
        };
        for map in fx.extract(&x).unwrap().maps {
            for c in 0..map.c {
                let p = map.plane(c);
                assert!(p.iter().all(|v| (v - p[0]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn undersized_input_rejected() {
        let fx = FeatureExtractor::fixed_random(1);
        assert!(matches!(
            fx.extract(&random_tensor(7, 16, 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let fx = FeatureExtractor::fixed_random(2);
        let x = random_tensor(9, 10, 3);
        let trace = fx.trace(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probes: Vec<Tensor> = trace
            .features
            .maps
            .iter()
            .map(|m| {
                m.with_data(
                    (0..m.data.len())
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect(),
                )
            })
            .collect();
        let d_taps: Vec<Option<Tensor>> = probes.iter().cloned().map(Some).collect();
        let loss = |x: &Tensor| -> f64 {
            let f = fx.extract(x).unwrap();
            f.maps
                .iter()
                .zip(&probes)
                .map(|(m, p)| m.data.iter().zip(&p.data).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let din = fx.backward(&trace, &d_taps);
        let h = 1e-6;
        for i in (0..x.data.len()).step_by(5) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!(
                (fd - din.data[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                din.data[i]
            );
        }
    }

    #[test]
    fn backward_without_gradients_is_zero() {
        let fx = FeatureExtractor::fixed_random(2);
        let trace = fx.trace(&random_tensor(8, 8, 3)).unwrap();
        let din = fx.backward(&trace, &[None, None, None, None]);
        assert!(din.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn loads_pretrained_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        let source = FeatureExtractor::fixed_random(77);
        let mut tensors = BTreeMap::new();
        for (i, (w, b)) in source.weights.iter().enumerate() {
            let conv = CONVS[i];
            tensors.insert(
                format!("conv{}.weight", i + 1),
                ParamTensor {
                    shape: vec![conv.cout, conv.cin, 3, 3],
                    data: w.clone(),
                },
            );
            tensors.insert(
                format!("conv{}.bias", i + 1),
                ParamTensor {
                    shape: vec![conv.cout],
                    data: b.clone(),
                },
            );
        }
        write_tensor_file(&path, &Manifest::default(), &tensors).unwrap();
        let loaded = FeatureExtractor::pretrained(&path).unwrap();
        let x = random_tensor(8, 8, 5);
        assert_eq!(loaded.extract(&x).unwrap(), source.extract(&x).unwrap());

        let missing = FeatureBackend::PretrainedPerceptual {
            path: dir.path().join("nope.bin"),
        };
        if env::var_os(WEIGHTS_ENV).is_none() {
            let fx = FeatureExtractor::from_backend(&missing).unwrap();
            assert!(matches!(fx.backend(), FeatureBackend::FixedRandom { .. }));
        }
    }
}
