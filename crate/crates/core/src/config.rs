//! Training configuration read from TOML, with dotted-key overrides.
//!
//! Relative paths in a config file are resolved against the directory that
//! holds the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distributions::InputPolicy;
use crate::error::{Error, Result};
use crate::features::FeatureBackend;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::OptimizerKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtvMask {
    /// Plain total variation on the color output.
    #[default]
    None,
    /// Down-weight content edges, see [`crate::losses::content_edge_mask`].
    ContentEdges,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub style_image: PathBuf,
    pub content_dir: PathBuf,
    pub output_dir: PathBuf,
    pub image_size: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss_weights: LossWeights,
    pub input_policy: InputPolicy,
    pub model: ModelConfig,
    pub features: FeatureBackend,
    pub mtv_mask: MtvMask,
    pub seed: u64,
    /// Steps between training checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Worker threads for per-image work inside a step.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            style_image: PathBuf::new(),
            content_dir: PathBuf::new(),
            output_dir: PathBuf::from("runs/default"),
            image_size: 256,
            batch_size: 4,
            total_steps: 2000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            loss_weights: LossWeights::default(),
            input_policy: InputPolicy::default(),
            model: ModelConfig::default(),
            features: FeatureBackend::default(),
            mtv_mask: MtvMask::None,
            seed: 0,
            checkpoint_every: 500,
            log_every: 10,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 1 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.log_every < 1 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if self.threads < 1 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.image_size < self.model.min_input_side().max(8) {
            return Err(Error::Config(format!(
                "image_size {} is below the model receptive field",
                self.image_size
            )));
        }
        if self.style_image.as_os_str().is_empty() || self.content_dir.as_os_str().is_empty() {
            return Err(Error::Config(
                "style_image and content_dir are required".into(),
            ));
        }
        self.model.validate()?;
        self.loss_weights.validate()?;
        self.input_policy
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Parses TOML text, applies `key.path=value` overrides, and resolves
    /// relative paths against `base_dir`.
    pub fn from_toml_str(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for p in [
            &mut config.style_image,
            &mut config.content_dir,
            &mut config.output_dir,
        ] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base_dir.join(&*p);
            }
        }
        if let FeatureBackend::PretrainedPerceptual { path } = &mut config.features {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, overrides, base)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `a.b.c = value` inside a TOML table. The value is parsed as a TOML
/// literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut cursor = table;
    for p in parents {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::PolicyKind;

    const SAMPLE: &str = r#"
style_image = "style.png"
content_dir = "content"
output_dir = "/tmp/out"
image_size = 96
total_steps = 10

[input_policy]
variant = "idd"
idd_ratio = { modeling = 2, removal = 1 }

[input_policy.noise]
sigma = 0.1

[loss_weights]
mtv = 2.0
"#;

    #[test]
    fn parses_and_resolves_paths() {
        let c = TrainConfig::from_toml_str(SAMPLE, &[], Path::new("/data")).unwrap();
        assert_eq!(c.style_image, PathBuf::from("/data/style.png"));
        assert_eq!(c.output_dir, PathBuf::from("/tmp/out"));
        assert_eq!(c.input_policy.idd_ratio.modeling, 2);
        assert_eq!(c.loss_weights.mtv, 2.0);
        assert_eq!(c.loss_weights.content, LossWeights::default().content);
        c.validate().unwrap();
    }

    #[test]
    fn overrides_apply() {
        let overrides = vec![
            "total_steps=3".to_string(),
            "input_policy.variant=smooth_all".to_string(),
            "model.texture_norm=true".to_string(),
            "features.backend=fixed_random".to_string(),
            "features.seed=9".to_string(),
        ];
        let c = TrainConfig::from_toml_str(SAMPLE, &overrides, Path::new("/d")).unwrap();
        assert_eq!(c.total_steps, 3);
        assert_eq!(c.input_policy.variant, PolicyKind::SmoothAll);
        assert!(c.model.texture_norm);
        assert_eq!(c.features, FeatureBackend::FixedRandom { seed: 9 });
    }

    #[test]
    fn rejects_bad_configs() {
        let zero =
            TrainConfig::from_toml_str(SAMPLE, &["total_steps=0".into()], Path::new("/")).unwrap();
        assert!(matches!(zero.validate(), Err(Error::Config(_))));
        let lr = TrainConfig::from_toml_str(SAMPLE, &["learning_rate=0.0".into()], Path::new("/"))
            .unwrap();
        assert!(matches!(lr.validate(), Err(Error::Config(_))));
        assert!(
            TrainConfig::from_toml_str(SAMPLE, &["bogus_key=1".into()], Path::new("/")).is_err()
        );
        assert!(TrainConfig::from_toml_str(SAMPLE, &["no_equals".into()], Path::new("/")).is_err());
        assert!(TrainConfig::from_toml_str("image_size = [", &[], Path::new("/")).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::from_toml_str(SAMPLE, &[], Path::new("/data")).unwrap();
        let back =
            TrainConfig::from_toml_str(&c.to_toml_string(), &[], Path::new("/elsewhere")).unwrap();
        assert_eq!(back, c);
    }
}
