//! Nearest-class membership attack against several retrained models and one
//! candidate unlearned model.

use serde::{Deserialize, Serialize};
use serde_json::json;
use specshape::classunlearn::{mia_nn, trw_finetune, ScoreConfig, TrwConfig};
use specshape::data::class_forget_split;
use specshape::net::{sgd_train, Partition, TinyNet};
use specshape::rng::sub_seed;

use super::{ensure, Outcome};
use crate::build::{DatasetSpec, NetSpec, TrainSpec};
use crate::config::Scenario;
use crate::error::Result;
use crate::report::{PassRule, Section};

pub const COLUMNS: &[&str] = &[
    "nearest_class",
    "mean_acc_retrain",
    "std_retrain",
    "acc_unlearned",
    "gap",
    "gap_over_std",
];

/// The model evaluated as "unlearned".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UnlearnedModel {
    /// One more retrained model, held out from the reference set.
    Holdout,
    /// Tilted-reweighting fine-tune of a model trained on all classes, with
    /// scores from its final-layer weights.
    Trw { beta: f64, finetune: TrainSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiaNnParams {
    pub dataset: DatasetSpec,
    pub net: NetSpec,
    pub forget_class: usize,
    /// Reference retrained models.
    pub retrained_models: usize,
    pub train: TrainSpec,
    pub unlearned: UnlearnedModel,
    /// A seed passes when `gap ≤ gap_factor · std_retrain`.
    pub gap_factor: f64,
    pub min_pass_fraction: f64,
}

impl Default for MiaNnParams {
    fn default() -> Self {
        MiaNnParams {
            dataset: DatasetSpec::Mixture {
                centroids: vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![-1.0, 2.0], vec![-1.0, -2.0]],
                std: vec![1.0],
                train_per_class: 100,
                test_per_class: 100,
            },
            net: NetSpec::Mlp { hidden: vec![32] },
            forget_class: 0,
            retrained_models: 3,
            train: TrainSpec::new(0.1, 1000, 32),
            unlearned: UnlearnedModel::Holdout,
            gap_factor: 2.0,
            min_pass_fraction: 1.0,
        }
    }
}

impl MiaNnParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.retrained_models >= 2, "params.retrained_models", "need at least two retrained models")?;
        ensure(self.gap_factor >= 0.0, "params.gap_factor", "gap_factor must be nonnegative")?;
        ensure(
            (0.0..=1.0).contains(&self.min_pass_fraction),
            "params.min_pass_fraction",
            "min_pass_fraction must lie in [0, 1]",
        )
    }
}

pub fn run(p: &MiaNnParams, seed: u64) -> Result<Outcome> {
    let data = class_forget_split(&p.dataset.build(sub_seed(seed, 1))?, p.forget_class);
    let dim = data.inputs[0].len();
    let retain_only = data.select(|part| part != Partition::Forget);
    let retrain = |i: u64| -> Result<TinyNet> {
        let init = p.net.build(dim, data.num_classes, sub_seed(seed, 100 + i))?;
        Ok(sgd_train(&init, &retain_only, &p.train.config(sub_seed(seed, 200 + i)))?.net)
    };
    let models: Vec<TinyNet> = (0..p.retrained_models as u64).map(retrain).collect::<Result<_>>()?;
    let unlearned = match &p.unlearned {
        UnlearnedModel::Holdout => retrain(p.retrained_models as u64)?,
        UnlearnedModel::Trw { beta, finetune } => {
            let init = p.net.build(dim, data.num_classes, sub_seed(seed, 300))?;
            let original = sgd_train(&init, &data, &p.train.config(sub_seed(seed, 301)))?.net;
            let cfg = TrwConfig {
                forget_class: p.forget_class,
                beta: *beta,
                scores: None,
                score: ScoreConfig::default(),
            };
            trw_finetune(&original, &data, &cfg, &finetune.config(sub_seed(seed, 302)))?
        }
    };
    let test = data.partition(Partition::Test);
    let r = mia_nn(&models, &unlearned, &test, p.forget_class)?;
    let ratio = if r.std_retrain > 0.0 { r.gap / r.std_retrain } else if r.gap == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(Outcome::new(r.gap <= p.gap_factor * r.std_retrain)
        .metric("nearest_class", r.nearest_class as f64)
        .metric("mean_acc_retrain", r.mean_acc_retrain)
        .metric("std_retrain", r.std_retrain)
        .metric("acc_unlearned", r.acc_unlearned)
        .metric("gap", r.gap)
        .metric("gap_over_std", ratio)
        .detail(json!({ "report": r })))
}

pub fn section(p: &MiaNnParams, seeds: &[u64]) -> Section {
    let rule = PassRule::Fraction { min: p.min_pass_fraction };
    super::section(Scenario::Miann, COLUMNS, rule, seeds, |s| run(p, s))
}
