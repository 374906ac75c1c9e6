//! Unlearning by fine-tuning on adversarial examples of the forget set.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::{norm, Operator};
use crate::net::{
    batch_gradient, log_softmax, one_hot, pgd_attack, train_samples, Activation, AttackConfig, Layer, LabeledDataset,
    Partition, Sample, TinyNet, TrainConfig,
};
use crate::rng::sub_seed;
use crate::spectral::oracle_norm;

pub const DEFAULT_EPS_INIT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvRecord {
    /// Index of the source sample within the forget set.
    pub index: usize,
    pub x: Vec<f64>,
    pub y: usize,
    pub x_adv: Vec<f64>,
    pub y_adv: usize,
    pub eps_found: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvSet {
    pub records: Vec<AdvRecord>,
}

impl AdvSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.records.iter().map(|r| Sample::hard(r.x_adv.clone(), r.y_adv)).collect()
    }
}

/// For every forget sample, attacks at radius `eps_init`, doubling the radius
/// until the prediction leaves the true label.
pub fn build_adversarial_set(
    net: &TinyNet,
    forget: &LabeledDataset,
    eps_init: f64,
    attack: &AttackConfig,
    max_doublings: usize,
) -> Result<AdvSet> {
    if !(eps_init > 0.0) {
        return Err(Error::InvalidConfig("eps_init must be positive".into()));
    }
    let mut records = Vec::with_capacity(forget.len());
    for (index, (x, &y)) in forget.inputs.iter().zip(&forget.labels).enumerate() {
        let cfg = AttackConfig {
            seed: sub_seed(attack.seed, index as u64),
            ..attack.clone()
        };
        let mut eps = eps_init;
        let mut found = None;
        for _ in 0..=max_doublings {
            let adv = pgd_attack(net, x, y, eps, &cfg)?;
            let pred = net.predict(&adv)?;
            if pred != y {
                found = Some((adv, pred));
                break;
            }
            eps *= 2.0;
        }
        let Some((x_adv, y_adv)) = found else {
            return Err(Error::AttackExhausted { index, eps: eps / 2.0 });
        };
        records.push(AdvRecord {
            index,
            x: x.clone(),
            y,
            x_adv,
            y_adv,
            eps_found: eps,
        });
    }
    Ok(AdvSet { records })
}

/// Which sets the fine-tuning sees: retain (R), forget (F), adversarial (A).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AmunMode {
    #[serde(rename = "R+F+A")]
    RetainForgetAdv,
    #[serde(rename = "F+A")]
    ForgetAdv,
    #[serde(rename = "R+A")]
    RetainAdv,
    #[serde(rename = "A")]
    Adv,
}

/// Fine-tuning set for `mode`. With R and F both present the training samples
/// keep their dataset order, so an empty adversarial set reproduces plain
/// training on `data`.
pub fn amun_samples(data: &LabeledDataset, advset: &AdvSet, mode: AmunMode) -> Result<Vec<Sample>> {
    let take = |p: Partition| {
        let s = data.partition(p);
        if s.is_empty() {
            Err(Error::InvalidConfig(format!("mode {mode:?} needs a nonempty {p:?} set")))
        } else {
            Ok(s.samples())
        }
    };
    let mut out = match mode {
        AmunMode::RetainForgetAdv => data.train_samples(),
        AmunMode::ForgetAdv => take(Partition::Forget)?,
        AmunMode::RetainAdv => take(Partition::Retain)?,
        AmunMode::Adv => Vec::new(),
    };
    if mode == AmunMode::Adv && advset.is_empty() {
        return Err(Error::InvalidConfig("mode A needs a nonempty adversarial set".into()));
    }
    out.extend(advset.samples());
    if out.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning set is empty".into()));
    }
    Ok(out)
}

pub fn amun_finetune(net: &TinyNet, data: &LabeledDataset, advset: &AdvSet, mode: AmunMode, cfg: &TrainConfig) -> Result<TinyNet> {
    let samples = amun_samples(data, advset, mode)?;
    Ok(train_samples(net, &samples, cfg, &mut |_, _| Ok(()))?.net)
}

/// `log(p_y / (1 − p_y))` of the true class, computed from logits.
pub fn scaled_confidence(net: &TinyNet, x: &[f64], y: usize) -> Result<f64> {
    let z = net.logits(x)?;
    let rest = z
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != y)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = rest + z.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| (v - rest).exp()).sum::<f64>().ln();
    Ok(z[y] - lse)
}

/// Mann–Whitney AUC: probability that a score from `a` exceeds one from `b`, ties counting half.
pub fn auc(a: &[f64], b: &[f64]) -> f64 {
    let mut twice = 0u64;
    for x in a {
        for y in b {
            twice += if x > y { 2 } else if x == y { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * a.len() * b.len()) as f64
}

/// Threshold-AUC membership proxy: how well scaled true-class confidence
/// separates `set_a` (e.g. forget samples) from `set_b` (e.g. unseen test samples).
pub fn membership_auc(net: &TinyNet, set_a: &LabeledDataset, set_b: &LabeledDataset) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::InvalidConfig("membership_auc needs two nonempty sets".into()));
    }
    let score = |d: &LabeledDataset| -> Result<Vec<f64>> {
        d.inputs.iter().zip(&d.labels).map(|(x, &y)| scaled_confidence(net, x, y)).collect()
    };
    Ok(auc(&score(set_a)?, &score(set_b)?))
}

// ---------------------------------------------------------------------------
// One-step bound on a convex (single affine + softmax) model.

/// Largest per-sample loss allowed for the near-zero-loss assumption.
pub const NEAR_ZERO_LOSS: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticInstance {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub forget_index: usize,
    /// Trained on all samples.
    pub original: TinyNet,
    /// Trained without the forget sample.
    pub retrained: TinyNet,
}

/// Single affine layer followed by softmax, all parameters zero.
pub fn logistic_model(dim: usize, classes: usize) -> Result<TinyNet> {
    let op = Operator::affine(Operator::dense(classes, dim, vec![0.0; classes * dim])?, vec![0.0; classes])?;
    TinyNet::new(vec![Layer::new("linear", op, Activation::Identity)])
}

fn max_loss(net: &TinyNet, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
    let k = net.num_classes();
    let mut m: f64 = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        m = m.max(net.loss(x, &one_hot(k, y))?);
    }
    Ok(m)
}

/// Full-batch gradient descent until every sample's loss is below `NEAR_ZERO_LOSS`.
pub fn fit_logistic(xs: &[Vec<f64>], ys: &[usize], classes: usize, lr: f64, max_steps: usize) -> Result<TinyNet> {
    let mut net = logistic_model(xs[0].len(), classes)?;
    let samples: Vec<Sample> = xs.iter().zip(ys).map(|(x, &y)| Sample::hard(x.clone(), y)).collect();
    let idx: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..max_steps {
        if max_loss(&net, xs, ys)? <= NEAR_ZERO_LOSS {
            break;
        }
        let g = batch_gradient(&net, &samples, &idx)?;
        net.step(&g.layers, lr)?;
    }
    Ok(net)
}

impl LogisticInstance {
    pub fn fit(inputs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize, forget_index: usize, lr: f64, max_steps: usize) -> Result<Self> {
        if forget_index >= inputs.len() || inputs.len() < 2 {
            return Err(Error::InvalidConfig("forget index out of range".into()));
        }
        let original = fit_logistic(&inputs, &labels, classes, lr, max_steps)?;
        let (rx, ry): (Vec<_>, Vec<_>) = inputs
            .iter()
            .zip(&labels)
            .enumerate()
            .filter(|(i, _)| *i != forget_index)
            .map(|(_, (x, &y))| (x.clone(), y))
            .unzip();
        let retrained = fit_logistic(&rx, &ry, classes, lr, max_steps)?;
        Ok(LogisticInstance {
            inputs,
            labels,
            num_classes: classes,
            forget_index,
            original,
            retrained,
        })
    }

    /// Smoothness of the unnormalized loss over `self` plus `extra`:
    /// `½ Σ (‖x‖² + 1)`, since softmax cross-entropy has logit curvature at most ½.
    pub fn smoothness(&self, extra: &[f64]) -> f64 {
        let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() + 1.0;
        0.5 * (self.inputs.iter().map(|x| sq(x)).sum::<f64>() + sq(extra))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmunBoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub delta: f64,
    pub lipschitz: f64,
    pub c: f64,
    /// The near-zero-loss assumption failed; `holds` says nothing about the bound.
    pub inconclusive: bool,
    pub warnings: Vec<String>,
}

fn flat(net: &TinyNet) -> Vec<f64> {
    net.params().into_iter().flatten().collect()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn ce(net: &TinyNet, x: &[f64], y: usize) -> Result<f64> {
    Ok(-log_softmax(&net.logits(x)?)[y])
}

/// One gradient step of size `1/beta` from the original model on the data
/// plus the adversarial example, compared against the retrained model.
pub fn verify_amun_bound(inst: &LogisticInstance, adv_x: &[f64], adv_y: usize, beta: f64) -> Result<AmunBoundReport> {
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig("beta must be positive".into()));
    }
    let mut warnings = Vec::new();
    let needed = inst.smoothness(adv_x);
    if beta < needed {
        warnings.push(format!("beta {beta} is below the smoothness bound {needed}; the step is too large"));
    }
    let (x, y) = (&inst.inputs[inst.forget_index], inst.labels[inst.forget_index]);
    let retained: (Vec<Vec<f64>>, Vec<usize>) = inst
        .inputs
        .iter()
        .zip(&inst.labels)
        .enumerate()
        .filter(|(i, _)| *i != inst.forget_index)
        .map(|(_, (x, &y))| (x.clone(), y))
        .unzip();
    let inconclusive = max_loss(&inst.original, &inst.inputs, &inst.labels)? > NEAR_ZERO_LOSS
        || max_loss(&inst.retrained, &retained.0, &retained.1)? > NEAR_ZERO_LOSS;
    if inconclusive {
        warnings.push("training losses exceed the near-zero threshold".into());
    }
    if ce(&inst.original, adv_x, adv_y)? > NEAR_ZERO_LOSS {
        warnings.push("the original model does not fit the adversarial example".into());
    }

    let mut samples: Vec<Sample> = inst.inputs.iter().zip(&inst.labels).map(|(x, &y)| Sample::hard(x.clone(), y)).collect();
    samples.push(Sample::hard(adv_x.to_vec(), adv_y));
    let idx: Vec<usize> = (0..samples.len()).collect();
    let g = batch_gradient(&inst.original, &samples, &idx)?;
    let mut updated = inst.original.clone();
    // batch_gradient averages; the bound is stated for the summed loss
    updated.step(&g.layers, samples.len() as f64 / beta)?;

    let w = match &inst.original.layers[0].op {
        Operator::Affine { inner, .. } => inner.as_ref().clone(),
        other => other.clone(),
    };
    let lipschitz = std::f64::consts::SQRT_2 * oracle_norm(&w)?;
    let delta = norm(&x.iter().zip(adv_x).map(|(a, b)| a - b).collect::<Vec<_>>());
    let c = ce(&inst.original, adv_x, y)? + ce(&updated, adv_x, adv_y)? - ce(&inst.retrained, x, y)? - ce(&inst.retrained, adv_x, adv_y)?;
    let (po, pu, pn) = (flat(&inst.original), flat(&inst.retrained), flat(&updated));
    let lhs = dist_sq(&pn, &pu);
    let rhs = dist_sq(&po, &pu) + 2.0 / beta * (lipschitz * delta - c);
    for w in &warnings {
        warn!("{w}");
    }
    Ok(AmunBoundReport {
        lhs,
        rhs,
        holds: lhs <= rhs,
        delta,
        lipschitz,
        c,
        inconclusive,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_mixture, random_forget_split, MixtureSpec};
    use crate::net::sgd_train;

    fn toy() -> (TinyNet, LabeledDataset) {
        let spec = MixtureSpec {
            centroids: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            std: vec![0.6],
            train_per_class: 40,
            test_per_class: 20,
        };
        let data = random_forget_split(&gaussian_mixture(&spec, 1).unwrap(), 0.1, 2).unwrap();
        let net = logistic_model(2, 2).unwrap();
        let net = sgd_train(&net, &data, &TrainConfig::new(0.5, 300, 16, 3)).unwrap().net;
        (net, data)
    }

    #[test]
    fn auc_edge_cases() {
        let a = [0.3, 0.1, 0.7, 0.7];
        assert_eq!(auc(&a, &a), 0.5);
        assert_eq!(auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(auc(&[0.0], &[1.0]), 0.0);
    }

    #[test]
    fn scaled_confidence_matches_probability_form() {
        let (net, data) = toy();
        let x = &data.inputs[0];
        let p = crate::net::softmax(&net.logits(x).unwrap())[data.labels[0]];
        let s = scaled_confidence(&net, x, data.labels[0]).unwrap();
        assert!((s - (p / (1.0 - p)).ln()).abs() < 1e-9);
    }

    #[test]
    fn adversarial_records_flip_labels() {
        let (net, data) = toy();
        let forget = data.partition(Partition::Forget);
        let adv = build_adversarial_set(&net, &forget, DEFAULT_EPS_INIT, &AttackConfig::default(), 10).unwrap();
        assert_eq!(adv.len(), forget.len());
        for r in &adv.records {
            assert_ne!(net.predict(&r.x_adv).unwrap(), r.y);
            assert_eq!(net.predict(&r.x_adv).unwrap(), r.y_adv);
            let d: Vec<f64> = r.x_adv.iter().zip(&r.x).map(|(a, b)| a - b).collect();
            assert!(norm(&d) <= r.eps_found * (1.0 + 1e-12));
        }
    }

    #[test]
    fn misclassified_sample_succeeds_at_first_radius() {
        let net = logistic_model(1, 2).unwrap();
        let mut net = net;
        net.set_params(&[vec![1.0, -1.0, 0.0, 0.0]]).unwrap();
        // x = 1 is predicted as class 0, labeled 1
        let forget = LabeledDataset::new(vec![vec![1.0]], vec![1], vec![Partition::Forget], 2).unwrap();
        let adv = build_adversarial_set(&net, &forget, 0.05, &AttackConfig::default(), 10).unwrap();
        assert_eq!(adv.records[0].eps_found, 0.05);
    }

    #[test]
    fn one_dimensional_margin_needs_one_radius() {
        // Decision boundary at x = 0; the point at x = 0.3 needs eps > 0.3.
        let mut net = logistic_model(1, 2).unwrap();
        net.set_params(&[vec![-1.0, 1.0, 0.0, 0.0]]).unwrap();
        let forget = LabeledDataset::new(vec![vec![0.3]], vec![1], vec![Partition::Forget], 2).unwrap();
        let adv = build_adversarial_set(&net, &forget, 0.5, &AttackConfig::default(), 10).unwrap();
        assert_eq!(adv.records[0].eps_found, 0.5);
        let adv = build_adversarial_set(&net, &forget, 0.1, &AttackConfig::default(), 10).unwrap();
        assert_eq!(adv.records[0].eps_found, 0.4);
    }

    #[test]
    fn exhausted_doublings_name_the_sample() {
        let mut net = logistic_model(1, 2).unwrap();
        net.set_params(&[vec![-1.0, 1.0, 0.0, 0.0]]).unwrap();
        let forget = LabeledDataset::new(vec![vec![-0.01], vec![100.0]], vec![0, 1], vec![Partition::Forget; 2], 2).unwrap();
        match build_adversarial_set(&net, &forget, 0.05, &AttackConfig::default(), 3) {
            Err(Error::AttackExhausted { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_advset_full_mode_is_plain_training() {
        let (net, data) = toy();
        let cfg = TrainConfig::new(0.1, 20, 8, 9);
        let a = amun_finetune(&net, &data, &AdvSet::default(), AmunMode::RetainForgetAdv, &cfg).unwrap();
        let b = sgd_train(&net, &data, &cfg).unwrap().net;
        assert_eq!(a, b);
    }

    #[test]
    fn adv_only_mode_requires_records() {
        let (net, data) = toy();
        assert!(amun_finetune(&net, &data, &AdvSet::default(), AmunMode::Adv, &TrainConfig::new(0.1, 5, 4, 0)).is_err());
    }

    #[test]
    fn bound_with_zero_distance() {
        let xs = vec![vec![-2.0, 0.0], vec![-2.5, 0.5], vec![2.0, 0.0], vec![2.5, -0.5]];
        let ys = vec![0, 0, 1, 1];
        let inst = LogisticInstance::fit(xs, ys, 2, 0, 1.0, 20000).unwrap();
        let x = inst.inputs[0].clone();
        let beta = inst.smoothness(&x);
        let r = verify_amun_bound(&inst, &x, 1, beta).unwrap();
        assert_eq!(r.delta, 0.0);
        assert!(r.lhs.is_finite() && r.rhs.is_finite());
        let low = verify_amun_bound(&inst, &x, 1, 0.1 * beta).unwrap();
        assert!(!low.warnings.is_empty());
    }
}
