//! TOML run configuration. Every section is optional; absent keys take the
//! library defaults, and command-line flags are applied on top.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gzsl::dataset::{Dataset, SyntheticSpec};
use gzsl::encoder::Readout;
use gzsl::eval::FIXED_THRESHOLDS;
use gzsl::model::ModelConfig;
use gzsl::trainer::TrainConfig;
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub paths: Paths,
    pub data: SyntheticSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            checkpoint: "model.json".into(),
            out_dir: "out".into(),
        }
    }
}

/// Architecture choices; widths and class counts come from the dataset.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub layers: usize,
    pub readout: Readout,
    pub prototype_dim: usize,
    pub prototypes_per_class: usize,
    pub sae_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            hidden: d.hidden,
            layers: d.layers,
            readout: d.readout,
            prototype_dim: d.prototype_dim,
            prototypes_per_class: d.prototypes_per_class,
            sae_hidden: d.sae_hidden,
        }
    }
}

impl ModelSection {
    pub fn for_dataset(&self, ds: &Dataset) -> ModelConfig {
        ModelConfig {
            input_width: ds.manifest.frame_width,
            sequence_length: ds.manifest.sequence_length,
            hidden: self.hidden,
            layers: self.layers,
            readout: self.readout,
            prototype_dim: self.prototype_dim,
            seen_classes: ds.table.seen_count(),
            prototypes_per_class: self.prototypes_per_class,
            sae_hidden: self.sae_hidden,
            attributes: ds.table.width(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Global radii tried by the fixed-threshold ablation row.
    pub fixed_thresholds: Vec<f64>,
    pub betas: Vec<f64>,
    /// Whether `ablate` trains the separately optimized model.
    pub two_stage: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            fixed_thresholds: FIXED_THRESHOLDS.to_vec(),
            betas: vec![0.5, 0.2, 0.05, 0.02, 0.01, 0.005],
            two_stage: true,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: Config = toml::from_str("[train]\nepochs = 3\n[data]\nnoise = 0.1\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.data.noise, 0.1);
        assert_eq!(c.data.seen_classes, 16);
        assert_eq!(c.paths.out_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[train]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<Config>("[nope]\n").is_err());
    }
}
