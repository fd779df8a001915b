//! Experiment configuration files (JSON).
//!
//! A config holds the model description, dataset locations, both training
//! phases and output settings. Layer input sizes are inferred from the
//! preceding layer, so only output-side hyperparameters are written out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx_pair, split, Dataset};
use crate::engine::{HebbianPlan, SupervisedPlan, TrainPlan};
use crate::error::{HebbError, Result};
use crate::layers::{LayerKind, LayerNode, Model, BN_EPS, BN_MOMENTUM};
use crate::tensor::RngState;

/// Environment variable consulted when a relative data path does not exist
/// under the working directory.
pub const DATA_DIR_ENV: &str = "HEBB_DATA_DIR";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSpec,
    pub data: DataSpec,
    pub hebbian: HebbianPlan,
    pub supervised: SupervisedPlan,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Per-sample `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        name: String,
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        name: String,
        filters: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
    },
    Batchnorm2d {
        name: String,
        #[serde(default = "bn_eps")]
        eps: f64,
        #[serde(default = "bn_momentum")]
        momentum: f64,
    },
    Repu {
        name: String,
        #[serde(default = "one_u32")]
        power: u32,
    },
    Maxpool2d {
        name: String,
        kernel: usize,
        stride: usize,
    },
    Flatten {
        name: String,
    },
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn one_u32() -> u32 {
    1
}
fn bn_eps() -> f64 {
    BN_EPS
}
fn bn_momentum() -> f64 {
    BN_MOMENTUM
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Linear { name, .. }
            | LayerSpec::Conv2d { name, .. }
            | LayerSpec::Batchnorm2d { name, .. }
            | LayerSpec::Repu { name, .. }
            | LayerSpec::Maxpool2d { name, .. }
            | LayerSpec::Flatten { name } => name,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Keep only the first `n` training samples.
    #[serde(default)]
    pub train_subset: Option<usize>,
    /// When > 0, this fraction of the training set is held out and the
    /// supervised phase monitors it instead of the test set.
    #[serde(default)]
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Weight images every this many Hebbian epochs; 0 writes only the final ones.
    #[serde(default)]
    pub image_every: usize,
    /// Units sampled into each weight image.
    #[serde(default = "grid_units")]
    pub grid_units: usize,
    /// Run the Hebbian evaluator every this many Hebbian epochs; 0 disables it.
    #[serde(default)]
    pub hebbian_eval_every: usize,
}

fn grid_units() -> usize {
    25
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            image_every: 0,
            grid_units: grid_units(),
            hebbian_eval_every: 0,
        }
    }
}

/// Training and evaluation sets, ready to use.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    /// Monitored by the supervised phase.
    pub eval: Dataset,
    pub test: Dataset,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config> {
        serde_json::from_str(text).map_err(|e| HebbError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| HebbError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HebbError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            hebbian: self.hebbian.clone(),
            supervised: self.supervised.clone(),
            seed: self.seed,
        }
    }

    /// Builds the model (all parameters at their neutral initial values) and
    /// checks the plan against it.
    pub fn build_model(&self) -> Result<Model> {
        let model = self.model.build()?;
        self.plan().validate(&model)?;
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(HebbError::Config("data.holdout_fraction must be in [0, 1)".into()));
        }
        if self.data.train_subset == Some(0) {
            return Err(HebbError::Config("data.train_subset must be >= 1".into()));
        }
        Ok(model)
    }

    /// Resolves every dataset path, failing if any is missing.
    pub fn resolve_data(&self) -> Result<[PathBuf; 4]> {
        let d = &self.data;
        Ok([
            resolve_data_path(&d.train_images)?,
            resolve_data_path(&d.train_labels)?,
            resolve_data_path(&d.test_images)?,
            resolve_data_path(&d.test_labels)?,
        ])
    }

    pub fn load_data(&self) -> Result<Datasets> {
        let [tri, trl, tei, tel] = self.resolve_data()?;
        let mut train = load_idx_pair(&tri, &trl)?;
        let test = load_idx_pair(&tei, &tel)?;
        for (what, ds) in [("train", &train), ("test", &test)] {
            if ds.sample_shape() != self.model.input_shape.as_slice() {
                return Err(HebbError::Config(format!(
                    "{what} samples have shape {:?}, model expects {:?}",
                    ds.sample_shape(),
                    self.model.input_shape
                )));
            }
            if ds.class_count() > self.model.classes {
                return Err(HebbError::Config(format!(
                    "{what} labels reach class {}, model has {} classes",
                    ds.class_count() - 1,
                    self.model.classes
                )));
            }
        }
        if let Some(n) = self.data.train_subset {
            train = train.head(n)?;
        }
        let eval = if self.data.holdout_fraction > 0.0 {
            let mut rng = RngState::new(self.seed).fork(4);
            let (t, h) = split(&train, self.data.holdout_fraction, &mut rng)?;
            train = t;
            h
        } else {
            test.clone()
        };
        Ok(Datasets { train, eval, test })
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<Model> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(HebbError::Config(format!("model.input_shape {:?} is invalid", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let chw = |what: &str| -> Result<usize> {
                match shape.as_slice() {
                    [c, _, _] => Ok(*c),
                    s => Err(HebbError::Config(format!(
                        "layer {}: {what} needs a [c, h, w] input, got {s:?}",
                        spec.name()
                    ))),
                }
            };
            let kind = match spec {
                LayerSpec::Linear { out_features, bias, .. } => LayerKind::Linear {
                    in_features: shape.iter().product(),
                    out_features: *out_features,
                    bias: *bias,
                },
                LayerSpec::Conv2d {
                    filters, kernel, stride, ..
                } => LayerKind::Conv2d {
                    in_channels: chw("conv2d")?,
                    filters: *filters,
                    kernel: (kernel[0], kernel[1]),
                    stride: *stride,
                },
                LayerSpec::Batchnorm2d { eps, momentum, .. } => LayerKind::BatchNorm2d {
                    channels: chw("batchnorm2d")?,
                    eps: *eps,
                    momentum: *momentum,
                },
                LayerSpec::Repu { power, .. } => LayerKind::Repu { power: *power },
                LayerSpec::Maxpool2d { kernel, stride, .. } => LayerKind::MaxPool2d {
                    kernel: *kernel,
                    stride: *stride,
                },
                LayerSpec::Flatten { .. } => LayerKind::Flatten,
            };
            let node = LayerNode::new(spec.name(), kind)?;
            shape = crate::layers::output_shape(&node, &shape)
                .map_err(|e| HebbError::Config(format!("layer {}: {e}", spec.name())))?;
            layers.push(node);
        }
        Model::new(layers, self.input_shape.clone(), self.classes)
    }
}

/// Absolute paths are used as given. A relative path is tried under the
/// working directory, then under `$HEBB_DATA_DIR`.
pub fn resolve_data_path(path: &Path) -> Result<PathBuf> {
    let mut tried = vec![path.to_path_buf()];
    if path.exists() {
        return Ok(path.to_path_buf());
    }
    if path.is_relative() {
        if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
            let p = Path::new(&root).join(path);
            if p.exists() {
                return Ok(p);
            }
            tried.push(p);
        }
    }
    let tried: Vec<String> = tried.iter().map(|p| p.display().to_string()).collect();
    Err(HebbError::Config(format!("dataset file not found (tried {})", tried.join(", "))))
}
