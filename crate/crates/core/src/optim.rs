//! Adaptive-moment first-order optimizer with per-tensor step counts, so
//! tensors skipped on some steps keep correct bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ParamTensor, Parameters};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub steps: BTreeMap<String, u64>,
}

impl AdamState {
    /// Applies one update to every parameter that has a gradient. Parameters
    /// without a gradient, including their moments, are left untouched.
    pub fn update(&mut self, params: &mut Parameters, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
            if p.data.len() != g.len() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has wrong length"
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - BETA1.powf(*t as f64);
            let bc2 = 1.0 - BETA2.powf(*t as f64);
            for i in 0..g.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let step = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS);
                p.data[i] -= step;
            }
        }
        Ok(())
    }

    /// Moments as named tensors (`adam.m.<name>`, `adam.v.<name>`).
    pub fn to_tensors(&self, prefix: &str) -> BTreeMap<String, ParamTensor> {
        let mut out = BTreeMap::new();
        for (kind, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, data) in map {
                out.insert(
                    format!("{prefix}{kind}.{name}"),
                    ParamTensor {
                        shape: vec![data.len()],
                        data: data.clone(),
                    },
                );
            }
        }
        out
    }

    pub fn from_tensors(
        prefix: &str,
        tensors: &BTreeMap<String, ParamTensor>,
        steps: BTreeMap<String, u64>,
    ) -> Self {
        let mut state = AdamState {
            steps,
            ..Default::default()
        };
        for (name, t) in tensors {
            let Some(rest) = name.strip_prefix(prefix) else {
                continue;
            };
            if let Some(p) = rest.strip_prefix("m.") {
                state.m.insert(p.to_string(), t.data.clone());
            } else if let Some(p) = rest.strip_prefix("v.") {
                state.v.insert(p.to_string(), t.data.clone());
            }
        }
        state
    }
}
