//! Class unlearning by tilted reweighting, compared with plain reweighting
//! (`β = 0`) by agreement with a retrained model on forget-class inputs.

use serde::{Deserialize, Serialize};
use serde_json::json;
use specshape::classunlearn::{
    centroid_scores, class_similarity_scores, split_accuracy, trw_finetune, ScoreConfig, TrwConfig, DEFAULT_BETA,
};
use specshape::data::{class_centroids, class_forget_split};
use specshape::net::{sgd_train, LabeledDataset, Partition, TinyNet};
use specshape::rng::sub_seed;

use super::{ensure, Outcome};
use crate::build::{DatasetSpec, NetSpec, TrainSpec};
use crate::config::Scenario;
use crate::error::Result;
use crate::report::{PassRule, Section};

pub const COLUMNS: &[&str] = &[
    "acc_retain",
    "acc_forget",
    "gap",
    "agree_trw",
    "agree_reweight",
    "acc_retain_reweight",
    "acc_forget_reweight",
    "acc_retain_retrain",
    "acc_forget_retrain",
];

/// Where the inter-class similarity scores come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreSource {
    /// Final-layer weight rows of the original model.
    Weights {
        #[serde(default)]
        pca_dim: Option<usize>,
        temperature: f64,
    },
    /// Inverse distances between training-class centroids.
    Centroids { temperature: f64 },
    Explicit { scores: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrwParams {
    pub dataset: DatasetSpec,
    pub net: NetSpec,
    pub forget_class: usize,
    pub beta: f64,
    pub scores: ScoreSource,
    pub train: TrainSpec,
    pub finetune: TrainSpec,
    pub min_pass_fraction: f64,
}

impl Default for TrwParams {
    fn default() -> Self {
        TrwParams {
            // The forget class sits between a tight nearby class and a wider,
            // farther one: the original model's runner-up on forget inputs leans
            // toward the far class, while a retrained model leans toward the near one.
            dataset: DatasetSpec::Mixture {
                centroids: vec![vec![0.0, 0.0], vec![1.8, 0.0], vec![-3.0, 0.0]],
                std: vec![1.0, 0.3, 1.0],
                train_per_class: 100,
                test_per_class: 300,
            },
            net: NetSpec::Mlp { hidden: vec![32] },
            forget_class: 0,
            beta: DEFAULT_BETA,
            scores: ScoreSource::Centroids { temperature: 1.0 },
            train: TrainSpec::new(0.1, 2000, 32),
            finetune: TrainSpec::new(0.05, 300, 32),
            min_pass_fraction: 0.8,
        }
    }
}

impl TrwParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.beta >= 0.0, "params.beta", "beta must be nonnegative")?;
        ensure(
            (0.0..=1.0).contains(&self.min_pass_fraction),
            "params.min_pass_fraction",
            "min_pass_fraction must lie in [0, 1]",
        )?;
        match &self.scores {
            ScoreSource::Weights { temperature, .. } | ScoreSource::Centroids { temperature } => {
                ensure(*temperature > 0.0, "params.scores.temperature", "temperature must be positive")
            }
            ScoreSource::Explicit { scores } => {
                ensure(!scores.is_empty(), "params.scores.scores", "explicit scores must be nonempty")
            }
        }
    }
}

/// Fraction of forget-class test inputs on which `a` and `b` predict the same class.
pub fn forget_agreement(a: &TinyNet, b: &TinyNet, test: &LabeledDataset, y_f: usize) -> Result<f64> {
    let (mut same, mut total) = (0usize, 0usize);
    for (x, &y) in test.inputs.iter().zip(&test.labels) {
        if y == y_f {
            total += 1;
            same += usize::from(a.predict(x)? == b.predict(x)?);
        }
    }
    Ok(same as f64 / total.max(1) as f64)
}

/// Predicted-class counts over forget-class test inputs.
fn forget_predictions(net: &TinyNet, test: &LabeledDataset, y_f: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; test.num_classes];
    for (x, &y) in test.inputs.iter().zip(&test.labels) {
        if y == y_f {
            counts[net.predict(x)?] += 1;
        }
    }
    Ok(counts)
}

pub fn run(p: &TrwParams, seed: u64) -> Result<Outcome> {
    let full = p.dataset.build(sub_seed(seed, 1))?;
    let data = class_forget_split(&full, p.forget_class);
    let dim = data.inputs[0].len();
    let init = p.net.build(dim, data.num_classes, sub_seed(seed, 2))?;
    let original = sgd_train(&init, &data, &p.train.config(sub_seed(seed, 3)))?.net;
    let retain_only = data.select(|part| part != Partition::Forget);
    let retrained = sgd_train(&init, &retain_only, &p.train.config(sub_seed(seed, 3)))?.net;

    let scores = match &p.scores {
        ScoreSource::Weights { pca_dim, temperature } => class_similarity_scores(
            &original,
            p.forget_class,
            &ScoreConfig {
                pca_dim: *pca_dim,
                temperature: *temperature,
            },
        )?,
        ScoreSource::Centroids { temperature } => {
            centroid_scores(&class_centroids(&data.training()), p.forget_class, *temperature)
        }
        ScoreSource::Explicit { scores } => scores.clone(),
    };
    let cfg = |beta| TrwConfig {
        forget_class: p.forget_class,
        beta,
        scores: Some(scores.clone()),
        score: ScoreConfig::default(),
    };
    let ft = p.finetune.config(sub_seed(seed, 4));
    let tilted = trw_finetune(&original, &data, &cfg(p.beta), &ft)?;
    let reweighted = trw_finetune(&original, &data, &cfg(0.0), &ft)?;

    let test = data.partition(Partition::Test);
    let agree_trw = forget_agreement(&tilted, &retrained, &test, p.forget_class)?;
    let agree_rw = forget_agreement(&reweighted, &retrained, &test, p.forget_class)?;
    let (r_t, f_t) = split_accuracy(&tilted, &data, p.forget_class)?;
    let (r_w, f_w) = split_accuracy(&reweighted, &data, p.forget_class)?;
    let (r_r, f_r) = split_accuracy(&retrained, &data, p.forget_class)?;
    let gap = 0.5 * ((r_t - r_r).abs() + (f_t - f_r).abs());
    Ok(Outcome::new(agree_trw > agree_rw)
        .metric("acc_retain", r_t)
        .metric("acc_forget", f_t)
        .metric("gap", gap)
        .metric("agree_trw", agree_trw)
        .metric("agree_reweight", agree_rw)
        .metric("acc_retain_reweight", r_w)
        .metric("acc_forget_reweight", f_w)
        .metric("acc_retain_retrain", r_r)
        .metric("acc_forget_retrain", f_r)
        .detail(json!({
            "scores": scores,
            "forget_predictions": {
                "original": forget_predictions(&original, &test, p.forget_class)?,
                "retrained": forget_predictions(&retrained, &test, p.forget_class)?,
                "tilted": forget_predictions(&tilted, &test, p.forget_class)?,
                "reweighted": forget_predictions(&reweighted, &test, p.forget_class)?,
            },
        })))
}

pub fn section(p: &TrwParams, seeds: &[u64]) -> Section {
    let rule = PassRule::Fraction { min: p.min_pass_fraction };
    super::section(Scenario::Trw, COLUMNS, rule, seeds, |s| run(p, s))
}
