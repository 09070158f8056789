//! Run configuration: one JSON document covering data, model, training and evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StcrError};
use crate::eval::FeatureKind;
use crate::model::BackboneConfig;
use crate::synthetic::SyntheticSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Fraction of each class used to fit the probe; the rest is the test split.
    pub train_fraction: f64,
    pub retrieval_k: usize,
    pub feature: FeatureKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            probe_epochs: 300,
            probe_lr: 0.5,
            train_fraction: 0.7,
            retrieval_k: 1,
            feature: FeatureKind::Descriptor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| StcrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| StcrError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            StcrError::Config(msg) => StcrError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.feature_shape()?;
        self.train.validate()?;
        let [c, t, h, w] = self.backbone.input_shape;
        if [t, h, w] != self.train.crop {
            return Err(StcrError::Config(format!(
                "train.crop {:?} must equal the backbone input (T, H, W) = {:?}",
                self.train.crop,
                [t, h, w]
            )));
        }
        let [dc, dt, dh, dw] = self.data.shape;
        if dc != c || dt < t || dh < h || dw < w {
            return Err(StcrError::Config(format!(
                "data shape {:?} cannot be cropped to backbone input {:?}",
                self.data.shape, self.backbone.input_shape
            )));
        }
        if !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(StcrError::Config("eval.train_fraction must lie in (0, 1)".into()));
        }
        if self.eval.retrieval_k == 0 {
            return Err(StcrError::Config("eval.retrieval_k must be positive".into()));
        }
        Ok(())
    }
}
