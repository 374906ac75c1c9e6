//! Dataset, network and training descriptions shared by the scenarios.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use specshape::data::{gaussian_mixture, MixtureSpec};
use specshape::net::{Activation, LabeledDataset, Layer, Schedule, TinyNet, TrainConfig};
use specshape::rng::{gaussian_vec, seeded};
use specshape::{Operator, Padding};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Explicit centroids and standard deviations.
    Mixture {
        centroids: Vec<Vec<f64>>,
        std: Vec<f64>,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// Centroids drawn from `N(0, scale²)` once per seed.
    RandomMixture {
        classes: usize,
        dim: usize,
        scale: f64,
        std: f64,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// 1-D signals whose class-`c` centroid is a sum of cosines at the
    /// frequencies `freqs[c]` (cycles per signal length).
    Tones {
        freqs: Vec<Vec<usize>>,
        length: usize,
        amplitude: f64,
        std: f64,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// Rows of `features..., label, partition`.
    Csv { path: PathBuf, num_classes: usize },
}

impl DatasetSpec {
    pub fn mixture(&self, seed: u64) -> Option<MixtureSpec> {
        match self {
            DatasetSpec::Mixture {
                centroids,
                std,
                train_per_class,
                test_per_class,
            } => Some(MixtureSpec {
                centroids: centroids.clone(),
                std: std.clone(),
                train_per_class: *train_per_class,
                test_per_class: *test_per_class,
            }),
            DatasetSpec::RandomMixture {
                classes,
                dim,
                scale,
                std,
                train_per_class,
                test_per_class,
            } => {
                let mut rng = seeded(seed);
                let centroids = (0..*classes)
                    .map(|_| gaussian_vec(&mut rng, *dim).into_iter().map(|v| v * scale).collect())
                    .collect();
                Some(MixtureSpec {
                    centroids,
                    std: vec![*std],
                    train_per_class: *train_per_class,
                    test_per_class: *test_per_class,
                })
            }
            DatasetSpec::Tones {
                freqs,
                length,
                amplitude,
                std,
                train_per_class,
                test_per_class,
            } => {
                let n = *length as f64;
                let centroids = freqs
                    .iter()
                    .map(|fs| {
                        (0..*length)
                            .map(|t| {
                                fs.iter()
                                    .map(|&f| amplitude * (2.0 * std::f64::consts::PI * f as f64 * t as f64 / n).cos())
                                    .sum()
                            })
                            .collect()
                    })
                    .collect();
                Some(MixtureSpec {
                    centroids,
                    std: vec![*std],
                    train_per_class: *train_per_class,
                    test_per_class: *test_per_class,
                })
            }
            DatasetSpec::Csv { .. } => None,
        }
    }

    pub fn build(&self, seed: u64) -> Result<LabeledDataset> {
        match self {
            DatasetSpec::Csv { path, num_classes } => Ok(LabeledDataset::read_csv(path, *num_classes)?),
            _ => {
                let spec = self.mixture(seed).expect("synthetic dataset");
                Ok(gaussian_mixture(&spec, seed)?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetSpec {
    /// Dense ReLU layers `fc1, fc2, …` and a linear `head`.
    Mlp { hidden: Vec<usize> },
    /// Single-channel input signal, stride-1 ReLU convolutions `conv1, conv2, …`,
    /// optional dense ReLU layers, and a linear `head`.
    Conv1d {
        channels: Vec<usize>,
        kernel: usize,
        #[serde(default = "circular")]
        padding: Padding,
        #[serde(default)]
        hidden: Vec<usize>,
    },
    /// A saved model.
    Checkpoint { path: PathBuf },
}

fn circular() -> Padding {
    Padding::Circular
}

fn dense_layer(name: String, rows: usize, cols: usize, gain: f64, act: Activation, rng: &mut specshape::rng::SeededRng) -> Result<Layer> {
    let scale = (gain / cols as f64).sqrt();
    let w = gaussian_vec(rng, rows * cols).into_iter().map(|v| v * scale).collect();
    let op = Operator::affine(Operator::dense(rows, cols, w)?, vec![0.0; rows])?;
    Ok(Layer::new(name, op, act))
}

impl NetSpec {
    /// He-initialized weights, zero biases.
    pub fn build(&self, input_dim: usize, classes: usize, seed: u64) -> Result<TinyNet> {
        let mut rng = seeded(seed);
        let mut layers = Vec::new();
        let mut width = input_dim;
        let hidden = match self {
            NetSpec::Checkpoint { path } => {
                let net = TinyNet::from_json(&std::fs::read_to_string(path)?)?;
                if net.input_dim() != input_dim || net.num_classes() != classes {
                    return Err(CliError::config(
                        "params.net.path",
                        format!(
                            "checkpoint maps {} -> {}, data needs {input_dim} -> {classes}",
                            net.input_dim(),
                            net.num_classes()
                        ),
                    ));
                }
                return Ok(net);
            }
            NetSpec::Mlp { hidden } => hidden,
            NetSpec::Conv1d {
                channels,
                kernel,
                padding,
                hidden,
            } => {
                let mut cin = 1;
                for (i, &cout) in channels.iter().enumerate() {
                    let scale = (2.0 / (cin * kernel) as f64).sqrt();
                    let w = gaussian_vec(&mut rng, cout * cin * kernel).into_iter().map(|v| v * scale).collect();
                    let conv = Operator::conv1d(cin, cout, width / cin, *kernel, 1, *padding, w)?;
                    let out = conv.out_dim();
                    layers.push(Layer::new(
                        format!("conv{}", i + 1),
                        Operator::affine(conv, vec![0.0; out])?,
                        Activation::Relu,
                    ));
                    width = out;
                    cin = cout;
                }
                hidden
            }
        };
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(dense_layer(format!("fc{}", i + 1), h, width, 2.0, Activation::Relu, &mut rng)?);
            width = h;
        }
        layers.push(dense_layer("head".into(), classes, width, 1.0, Activation::Identity, &mut rng)?);
        Ok(TinyNet::new(layers)?)
    }
}

/// [`TrainConfig`] without the seed, which comes from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    #[serde(default = "constant")]
    pub schedule: Schedule,
    #[serde(default)]
    pub weight_decay: f64,
}

fn constant() -> Schedule {
    Schedule::Constant
}

impl TrainSpec {
    pub fn new(lr: f64, steps: usize, batch: usize) -> Self {
        TrainSpec {
            lr,
            steps,
            batch,
            schedule: Schedule::Constant,
            weight_decay: 0.0,
        }
    }

    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            steps: self.steps,
            batch: self.batch,
            seed,
            schedule: self.schedule.clone(),
            weight_decay: self.weight_decay,
        }
    }
}
