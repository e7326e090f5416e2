//! Experiment configuration: one strict JSON document with `model`, `heads`,
//! `data`, and `train` sections. Unknown keys are errors. Resolving a
//! document fills every default so a run can echo back the exact
//! configuration it used.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic, load_cifar10_binary, load_idx, DataSplit, Normalization, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::model::{ActivationOrdering, ModelConfig};
use crate::tensor::Element;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub stage_channels: Vec<usize>,
    #[serde(default)]
    pub stage_blocks: Option<Vec<usize>>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub activation_ordering: ActivationOrdering,
    #[serde(default)]
    pub identity_activation: bool,
    #[serde(default = "default_min_head_position")]
    pub min_head_position: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_in_channels() -> usize {
    1
}
fn default_min_head_position() -> usize {
    10
}
fn default_nu() -> f64 {
    2.0
}
fn default_noise() -> f64 {
    0.05
}
fn default_grid() -> usize {
    8
}
fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsSection {
    /// Layer indices bearing outputs, strictly increasing, last equals depth.
    pub positions: Vec<usize>,
    #[serde(default = "default_nu")]
    pub nu: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", deny_unknown_fields)]
pub enum DataSection {
    /// Synthetic generator (spiral or gaussians); the default test data.
    #[serde(rename = "synthetic")]
    Synthetic {
        #[serde(default)]
        generator: crate::data::Generator,
        samples: usize,
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_grid")]
        grid: usize,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
    /// IDX image/label file pairs.
    #[serde(rename = "idx")]
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        normalization: Normalization,
        num_classes: usize,
    },
    /// CIFAR-10 binary batch files (3073-byte records).
    #[serde(rename = "cifar10-binary")]
    Cifar10Binary {
        train_paths: Vec<PathBuf>,
        test_path: PathBuf,
        #[serde(default)]
        normalization: Normalization,
    },
}

/// The whole experiment document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub heads: HeadsSection,
    pub data: DataSection,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Strict parse: unknown keys anywhere are errors.
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(json)?;
        cfg.model_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    /// The merged model topology (model section + heads section).
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.model.depth,
            stage_channels: self.model.stage_channels.clone(),
            stage_blocks: self.model.stage_blocks.clone(),
            lambda: self.model.lambda,
            head_positions: self.heads.positions.clone(),
            nu: self.heads.nu,
            num_classes: self.model.num_classes,
            in_channels: self.model.in_channels,
            activation_ordering: self.model.activation_ordering,
            identity_activation: self.model.identity_activation,
            min_head_position: self.model.min_head_position,
            seed: self.model.seed,
        }
    }

    /// The synthetic generator spec, when the data section is synthetic.
    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match &self.data {
            DataSection::Synthetic {
                generator,
                samples,
                classes,
                noise,
                seed,
                grid,
                train_fraction,
            } => Some(SyntheticSpec {
                generator: *generator,
                samples: *samples,
                classes: *classes,
                noise: *noise,
                seed: *seed,
                grid: *grid,
                train_fraction: *train_fraction,
            }),
            _ => None,
        }
    }

    /// Loads or generates the dataset this document names.
    pub fn load_data<T: Element>(&self) -> Result<DataSplit<T>> {
        match &self.data {
            DataSection::Synthetic { .. } => {
                let spec = self.synthetic_spec().expect("synthetic section");
                if spec.classes != self.model.num_classes {
                    return Err(Error::InvalidConfig(format!(
                        "synthetic classes {} != model num_classes {}",
                        spec.classes, self.model.num_classes
                    )));
                }
                gen_synthetic(&spec)
            }
            DataSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                normalization,
                num_classes,
            } => {
                if *num_classes != self.model.num_classes {
                    return Err(Error::InvalidConfig(format!(
                        "data num_classes {} != model num_classes {}",
                        num_classes, self.model.num_classes
                    )));
                }
                let train = load_idx(train_images, train_labels, *normalization)?;
                let test = load_idx(test_images, test_labels, *normalization)?;
                check_labels(&train.labels, *num_classes)?;
                check_labels(&test.labels, *num_classes)?;
                Ok(DataSplit {
                    train,
                    test,
                    num_classes: *num_classes,
                })
            }
            DataSection::Cifar10Binary {
                train_paths,
                test_path,
                normalization,
            } => {
                if self.model.num_classes != 10 {
                    return Err(Error::InvalidConfig(
                        "cifar10-binary data requires num_classes = 10".into(),
                    ));
                }
                if train_paths.is_empty() {
                    return Err(Error::InvalidConfig(
                        "cifar10-binary: no train files".into(),
                    ));
                }
                let mut parts = train_paths.iter();
                let mut train = load_cifar10_binary::<T>(parts.next().unwrap(), *normalization)?;
                for path in parts {
                    let more = load_cifar10_binary::<T>(path, *normalization)?;
                    let mut data = train.images.into_data();
                    data.extend_from_slice(more.images.data());
                    let mut shape = more.images.shape().to_vec();
                    shape[0] += train.labels.len();
                    let mut labels = train.labels;
                    labels.extend_from_slice(&more.labels);
                    train = crate::data::LabeledData::new(
                        crate::tensor::Tensor::from_vec(shape, data)?,
                        labels,
                    )?;
                }
                let test = load_cifar10_binary(test_path, *normalization)?;
                Ok(DataSplit {
                    train,
                    test,
                    num_classes: 10,
                })
            }
        }
    }

    /// Serializes the fully resolved document (every default filled in).
    pub fn echo_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Strategy;

    const MINIMAL: &str = r#"{
        "model": {"depth": 12, "stage_channels": [4, 8], "num_classes": 2},
        "heads": {"positions": [10, 12]},
        "data": {"source": "synthetic", "samples": 100, "classes": 2},
        "train": {"strategy": "multipath", "epochs": 2}
    }"#;

    #[test]
    fn minimal_document_fills_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.model.lambda, 1.0);
        assert_eq!(cfg.heads.nu, 2.0);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.train.optimizer.base_lr, 0.1);
        assert_eq!(cfg.train.strategy, Strategy::Multipath);
        let mc = cfg.model_config();
        assert_eq!(mc.head_positions, vec![10, 12]);
        assert_eq!(mc.nu, 2.0);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let bad = MINIMAL.replace("\"epochs\": 2", "\"epochs\": 2, \"unknown_knob\": 1");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = MINIMAL.replace("\"depth\": 12", "\"depht\": 12");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn echo_contains_resolved_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let echo = cfg.echo_json().unwrap();
        assert!(echo.contains("\"lambda\": 1.0"));
        assert!(echo.contains("\"nu\": 2.0"));
        assert!(echo.contains("\"momentum\": 0.9"));
        // the echo itself parses strictly
        assert!(ExperimentConfig::from_json(&echo).is_ok());
    }
}
