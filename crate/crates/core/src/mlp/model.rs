use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Network;
use crate::domain::{FeatureMode, FeatureVector, MaterialClass};
use crate::error::{read_file, write_file, Error, Result};
use crate::features::{PhaseStats, StandardizationParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A trained network with everything needed to classify raw features.
///
/// Persisted as JSON; floats are written in shortest round-trip form, so
/// save followed by load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format_version: u32,
    pub feature_mode: FeatureMode,
    pub phase_stats: PhaseStats,
    /// Output position → class.
    pub classes: Vec<MaterialClass>,
    pub standardization: StandardizationParams,
    pub network: Network,
}

impl Model {
    pub fn new(
        network: Network,
        classes: Vec<MaterialClass>,
        standardization: StandardizationParams,
        phase_stats: PhaseStats,
    ) -> Result<Self> {
        let model = Model {
            format_version: MODEL_FORMAT_VERSION,
            feature_mode: standardization.mode,
            phase_stats,
            classes,
            standardization,
            network,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::domain(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        Network::from_parts(self.network.spec.clone(), self.network.layers.clone())?;
        let dim = self.feature_mode.dim();
        if self.network.input_dim() != dim
            || self.standardization.mean.len() != dim
            || self.standardization.std.len() != dim
            || self.standardization.mode != self.feature_mode
        {
            return Err(Error::domain("model feature dimensions are inconsistent"));
        }
        if self.classes.len() != self.network.output_dim() {
            return Err(Error::domain(format!(
                "model lists {} classes for {} outputs",
                self.classes.len(),
                self.network.output_dim()
            )));
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return Err(Error::domain("model class list has duplicates"));
        }
        Ok(())
    }

    pub fn class_position(&self, class: MaterialClass) -> Option<usize> {
        self.classes.iter().position(|c| *c == class)
    }

    /// Standardizes raw features, then returns the predicted class, its
    /// probability, and the full probability vector.
    pub fn classify(&self, features: &FeatureVector) -> Result<(MaterialClass, f64, Vec<f64>)> {
        let z = self.standardization.apply(features)?;
        let (k, p) = self.network.predict(z.values())?;
        Ok((self.classes[k], p[k], p))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Model = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_file(path)?)
    }
}
