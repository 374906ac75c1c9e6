//! Adversarial-set unlearning on a toy task, and the one-step bound on a
//! convex logistic instance.

use serde::{Deserialize, Serialize};
use serde_json::json;
use specshape::data::random_forget_split;
use specshape::net::{sgd_train, AttackConfig, Partition};
use specshape::rng::{derive, gaussian_vec, sub_seed};
use specshape::unlearn::{
    amun_finetune, build_adversarial_set, membership_auc, verify_amun_bound, AmunMode, LogisticInstance,
    DEFAULT_EPS_INIT,
};

use super::{ensure, Outcome};
use crate::build::{DatasetSpec, NetSpec, TrainSpec};
use crate::config::Scenario;
use crate::error::Result;
use crate::report::{PassRule, Section};

pub const COLUMNS: &[&str] = &[
    "auc_before",
    "auc_after",
    "test_acc_before",
    "test_acc_after",
    "adv_count",
    "mean_eps",
    "bound_lhs",
    "bound_rhs",
    "bound_holds",
    "bound_inconclusive",
];

/// Logistic instance for the one-step bound: two Gaussian blobs at `±separation`
/// on the first axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundParams {
    pub samples: usize,
    pub dim: usize,
    pub separation: f64,
    pub std: f64,
    pub lr: f64,
    pub max_steps: usize,
}

impl Default for BoundParams {
    fn default() -> Self {
        BoundParams {
            samples: 20,
            dim: 2,
            separation: 3.0,
            std: 0.5,
            lr: 1.0,
            max_steps: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmunParams {
    pub dataset: DatasetSpec,
    pub forget_fraction: f64,
    pub net: NetSpec,
    pub train: TrainSpec,
    pub mode: AmunMode,
    pub finetune: TrainSpec,
    pub attack: AttackConfig,
    pub eps_init: f64,
    pub max_doublings: usize,
    /// Largest tolerated test-accuracy drop.
    pub max_accuracy_drop: f64,
    pub bound: Option<BoundParams>,
    pub min_pass_fraction: f64,
}

impl Default for AmunParams {
    fn default() -> Self {
        AmunParams {
            dataset: DatasetSpec::Mixture {
                centroids: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
                std: vec![1.0],
                train_per_class: 50,
                test_per_class: 200,
            },
            forget_fraction: 0.1,
            net: NetSpec::Mlp { hidden: vec![64, 64] },
            train: TrainSpec::new(0.1, 4000, 16),
            mode: AmunMode::Adv,
            finetune: TrainSpec::new(0.005, 50, 10),
            attack: AttackConfig::default(),
            eps_init: DEFAULT_EPS_INIT,
            max_doublings: 12,
            max_accuracy_drop: 0.10,
            bound: Some(BoundParams::default()),
            min_pass_fraction: 0.8,
        }
    }
}

impl AmunParams {
    pub fn validate(&self) -> Result<()> {
        ensure(
            self.forget_fraction > 0.0 && self.forget_fraction < 1.0,
            "params.forget_fraction",
            "forget_fraction must lie in (0, 1)",
        )?;
        ensure(self.eps_init > 0.0, "params.eps_init", "eps_init must be positive")?;
        ensure(
            (0.0..=1.0).contains(&self.min_pass_fraction),
            "params.min_pass_fraction",
            "min_pass_fraction must lie in [0, 1]",
        )?;
        if let Some(b) = &self.bound {
            ensure(b.samples >= 2, "params.bound.samples", "the bound needs at least two samples")?;
            ensure(b.dim >= 1, "params.bound.dim", "dim must be positive")?;
        }
        Ok(())
    }
}

pub fn bound_instance(b: &BoundParams, seed: u64) -> Result<LogisticInstance> {
    let mut rng = derive(seed, 7);
    let mut xs = Vec::with_capacity(b.samples);
    let mut ys = Vec::with_capacity(b.samples);
    for i in 0..b.samples {
        let y = i % 2;
        let mut x: Vec<f64> = gaussian_vec(&mut rng, b.dim).into_iter().map(|v| v * b.std).collect();
        x[0] += if y == 0 { -b.separation } else { b.separation };
        xs.push(x);
        ys.push(y);
    }
    Ok(LogisticInstance::fit(xs, ys, 2, 0, b.lr, b.max_steps)?)
}

pub fn run(p: &AmunParams, seed: u64) -> Result<Outcome> {
    let data = random_forget_split(&p.dataset.build(sub_seed(seed, 1))?, p.forget_fraction, sub_seed(seed, 2))?;
    let dim = data.inputs[0].len();
    let init = p.net.build(dim, data.num_classes, sub_seed(seed, 3))?;
    let original = sgd_train(&init, &data, &p.train.config(sub_seed(seed, 4)))?.net;
    let forget = data.partition(Partition::Forget);
    let test = data.partition(Partition::Test);
    let attack = AttackConfig {
        seed: sub_seed(seed, 5),
        ..p.attack.clone()
    };
    let adv = build_adversarial_set(&original, &forget, p.eps_init, &attack, p.max_doublings)?;
    let unlearned = amun_finetune(&original, &data, &adv, p.mode, &p.finetune.config(sub_seed(seed, 6)))?;

    let auc_before = membership_auc(&original, &forget, &test)?;
    let auc_after = membership_auc(&unlearned, &forget, &test)?;
    let acc_before = original.accuracy(&test.inputs, &test.labels)?;
    let acc_after = unlearned.accuracy(&test.inputs, &test.labels)?;
    let mean_eps = adv.records.iter().map(|r| r.eps_found).sum::<f64>() / adv.len().max(1) as f64;
    let mut passed = (auc_after - 0.5).abs() < (auc_before - 0.5).abs() && acc_before - acc_after < p.max_accuracy_drop;

    let mut outcome = Outcome::default();
    let mut bound_detail = serde_json::Value::Null;
    if let Some(b) = &p.bound {
        let inst = bound_instance(b, sub_seed(seed, 8))?;
        let forget_x = inst.inputs[..1].to_vec();
        let forget_set = specshape::net::LabeledDataset::new(forget_x, vec![inst.labels[0]], vec![Partition::Forget], 2)?;
        let a = build_adversarial_set(&inst.original, &forget_set, p.eps_init, &attack, p.max_doublings)?;
        let rec = &a.records[0];
        let beta = inst.smoothness(&rec.x_adv);
        let r = verify_amun_bound(&inst, &rec.x_adv, rec.y_adv, beta)?;
        passed &= r.inconclusive || r.holds;
        outcome = outcome
            .metric("bound_lhs", r.lhs)
            .metric("bound_rhs", r.rhs)
            .metric("bound_holds", f64::from(u8::from(r.holds)))
            .metric("bound_inconclusive", f64::from(u8::from(r.inconclusive)));
        bound_detail = serde_json::to_value(&r)?;
    }
    let mut o = Outcome::new(passed)
        .metric("auc_before", auc_before)
        .metric("auc_after", auc_after)
        .metric("test_acc_before", acc_before)
        .metric("test_acc_after", acc_after)
        .metric("adv_count", adv.len() as f64)
        .metric("mean_eps", mean_eps)
        .detail(json!({ "bound": bound_detail }));
    o.metrics.extend(outcome.metrics);
    Ok(o)
}

pub fn section(p: &AmunParams, seeds: &[u64]) -> Section {
    let rule = PassRule::Fraction { min: p.min_pass_fraction };
    super::section(Scenario::Amun, COLUMNS, rule, seeds, |s| run(p, s))
}
