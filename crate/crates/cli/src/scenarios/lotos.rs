//! Two ensembles under the same clipping: one trained with the orthogonalization
//! penalty, one without. Compares cross-layer responses and transferability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;
use specshape::clipper::FastClipConfig;
use specshape::lotos::{cross_response, train_ensemble, transfer_rate, EnsembleClip, LotosConfig};
use specshape::net::{AttackConfig, LabeledDataset, Partition, TinyNet};
use specshape::rng::sub_seed;

use super::{ensure, Outcome};
use crate::build::{DatasetSpec, NetSpec, TrainSpec};
use crate::config::Scenario;
use crate::error::{CliError, Result};
use crate::report::{PassRule, Section};

pub const COLUMNS: &[&str] = &[
    "cross_norm_lotos",
    "cross_norm_clipped",
    "transfer_lotos",
    "transfer_clipped",
    "conditioned_lotos",
    "conditioned_clipped",
    "accuracy_lotos",
    "accuracy_clipped",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LotosParams {
    pub dataset: DatasetSpec,
    pub net: NetSpec,
    pub models: usize,
    pub lotos: LotosConfig,
    /// Both ensembles clip these layers (empty: every layer) to `clip_target`.
    pub clip_layers: Vec<String>,
    pub clip_target: f64,
    pub fastclip: FastClipConfig,
    pub train: TrainSpec,
    pub attack: AttackConfig,
    pub eps: f64,
    /// Targeted transfer toward this class instead of untargeted.
    pub target_class: Option<usize>,
    /// A seed passes when every cross response is at most `mal + cross_slack`
    /// and the orthogonalized ensemble transfers strictly less.
    pub cross_slack: f64,
    pub min_pass_fraction: f64,
}

impl Default for LotosParams {
    fn default() -> Self {
        LotosParams {
            dataset: DatasetSpec::Tones {
                freqs: vec![vec![1, 7], vec![2, 6], vec![3, 5]],
                length: 16,
                amplitude: 1.0,
                std: 0.5,
                train_per_class: 60,
                test_per_class: 60,
            },
            net: NetSpec::Conv1d {
                channels: vec![1],
                kernel: 3,
                padding: specshape::Padding::Circular,
                hidden: Vec::new(),
            },
            models: 2,
            // Clipping flattens the top of a circulant spectrum to the target, so
            // several near-tied directions are penalized rather than one.
            lotos: LotosConfig {
                k: 3,
                weights: vec![1.0; 3],
                mal: 0.2,
                lambda: 1.0,
                layers: vec!["conv1".into()],
            },
            clip_layers: Vec::new(),
            clip_target: 1.0,
            fastclip: FastClipConfig::default(),
            train: TrainSpec::new(0.05, 2000, 32),
            attack: AttackConfig::default(),
            eps: 3.0,
            target_class: None,
            cross_slack: 0.05,
            min_pass_fraction: 0.7,
        }
    }
}

impl LotosParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.models >= 2, "params.models", "an ensemble needs at least two models")?;
        ensure(self.clip_target > 0.0, "params.clip_target", "clip_target must be positive")?;
        ensure(self.eps > 0.0, "params.eps", "eps must be positive")?;
        ensure(
            (0.0..=1.0).contains(&self.min_pass_fraction),
            "params.min_pass_fraction",
            "min_pass_fraction must lie in [0, 1]",
        )?;
        self.lotos.validate().map_err(|e| CliError::config("params.lotos", e.to_string()))?;
        self.fastclip.validate().map_err(|e| CliError::config("params.fastclip", e.to_string()))
    }
}

/// Largest `‖A v₁′‖` over ordered model pairs and the penalized layers.
pub fn max_cross_norm(models: &[TinyNet], cfg: &LotosConfig, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (i, a) in models.iter().enumerate() {
        for (j, b) in models.iter().enumerate() {
            if i == j {
                continue;
            }
            for (l, (&la, &lb)) in cfg.layer_indices(a)?.iter().zip(&cfg.layer_indices(b)?).enumerate() {
                let s = sub_seed(seed, (i * 64 + j) as u64 * 64 + l as u64);
                worst = worst.max(cross_response(&a.layers[la].op, &b.layers[lb].op, s)?);
            }
        }
    }
    Ok(worst)
}

/// Pooled transfer rate over ordered model pairs: `(rate, conditioned)`.
pub fn pooled_transfer(models: &[TinyNet], eval: &LabeledDataset, p: &LotosParams, seed: u64) -> Result<(Option<f64>, usize)> {
    let (mut cond, mut hit) = (0, 0);
    for (i, src) in models.iter().enumerate() {
        for (j, dst) in models.iter().enumerate() {
            if i == j {
                continue;
            }
            let attack = AttackConfig {
                seed: sub_seed(seed, (i * 64 + j) as u64),
                ..p.attack.clone()
            };
            let t = transfer_rate(src, dst, eval, p.eps, &attack, p.target_class)?;
            cond += t.conditioned;
            hit += t.transferred;
        }
    }
    Ok(((cond > 0).then(|| hit as f64 / cond as f64), cond))
}

fn mean_accuracy(models: &[TinyNet], eval: &LabeledDataset) -> Result<f64> {
    let mut s = 0.0;
    for m in models {
        s += m.accuracy(&eval.inputs, &eval.labels)?;
    }
    Ok(s / models.len() as f64)
}

pub fn run(p: &LotosParams, seed: u64) -> Result<Outcome> {
    let data = p.dataset.build(sub_seed(seed, 1))?;
    let dim = data.inputs[0].len();
    let init: Vec<TinyNet> = (0..p.models)
        .map(|i| p.net.build(dim, data.num_classes, sub_seed(seed, 10 + i as u64)))
        .collect::<Result<_>>()?;
    let names: Vec<String> = if p.clip_layers.is_empty() {
        init[0].layers.iter().map(|l| l.name.clone()).collect()
    } else {
        p.clip_layers.clone()
    };
    let clip = EnsembleClip {
        targets: names.into_iter().map(|n| (n, p.clip_target)).collect::<BTreeMap<_, _>>(),
        fastclip: p.fastclip.clone(),
    };
    let cfg = p.train.config(sub_seed(seed, 2));
    let lotos = train_ensemble(&init, &data, Some(&p.lotos), Some(&clip), &cfg, sub_seed(seed, 3))?;
    let plain = train_ensemble(&init, &data, None, Some(&clip), &cfg, sub_seed(seed, 3))?;

    let test = data.partition(Partition::Test);
    let cross_lotos = max_cross_norm(&lotos.models, &p.lotos, sub_seed(seed, 4))?;
    let cross_plain = max_cross_norm(&plain.models, &p.lotos, sub_seed(seed, 4))?;
    let (t_lotos, c_lotos) = pooled_transfer(&lotos.models, &test, p, sub_seed(seed, 5))?;
    let (t_plain, c_plain) = pooled_transfer(&plain.models, &test, p, sub_seed(seed, 5))?;
    let passed = cross_lotos <= p.lotos.mal + p.cross_slack
        && matches!((t_lotos, t_plain), (Some(a), Some(b)) if a < b);
    let filters = |models: &[TinyNet]| -> Vec<Vec<f64>> {
        models
            .iter()
            .map(|m| p.lotos.layer_indices(m).map(|ix| m.layers[ix[0]].op.params()).unwrap_or_default())
            .collect()
    };
    Ok(Outcome::new(passed)
        .metric("cross_norm_lotos", cross_lotos)
        .metric("cross_norm_clipped", cross_plain)
        .maybe("transfer_lotos", t_lotos)
        .maybe("transfer_clipped", t_plain)
        .metric("conditioned_lotos", c_lotos as f64)
        .metric("conditioned_clipped", c_plain as f64)
        .metric("accuracy_lotos", mean_accuracy(&lotos.models, &test)?)
        .metric("accuracy_clipped", mean_accuracy(&plain.models, &test)?)
        .detail(json!({
            "first_layer_lotos": filters(&lotos.models),
            "first_layer_clipped": filters(&plain.models),
        })))
}

pub fn section(p: &LotosParams, seeds: &[u64]) -> Section {
    let rule = PassRule::Fraction { min: p.min_pass_fraction };
    super::section(Scenario::Lotos, COLUMNS, rule, seeds, |s| run(p, s))
}
