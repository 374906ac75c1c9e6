//! Class unlearning with tilted targets, and the nearest-neighbour MIA.
//!
//! A forget-class sample's predicted distribution is renormalized with the
//! forget class removed, then exponentially tilted towards classes whose
//! classifier weights resemble the forget class. The tilt is the
//! KL-projection of the renormalized distribution onto a first-moment
//! constraint on the scores, so `solve_beta` can hit a requested moment.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::Operator;
use crate::net::{batch_gradient, softmax, Gradients, LabeledDataset, Partition, Sample, Target, TinyNet, TrainConfig};

pub const DEFAULT_BETA: f64 = 10.0;
pub const DEFAULT_TEMPERATURE: f64 = 0.01;
pub const MOMENT_TOL: f64 = 1e-10;

/// `p` with the forget class removed and the rest rescaled to sum to one.
pub fn reweight_distribution(p: &[f64], y_f: usize) -> Result<Vec<f64>> {
    if y_f >= p.len() {
        return Err(Error::InvalidConfig(format!("forget class {y_f} out of range")));
    }
    if p[y_f] >= 1.0 - 1e-12 {
        return Err(Error::Degenerate("all probability mass is on the forget class".into()));
    }
    let rest: f64 = p.iter().enumerate().filter(|(i, _)| *i != y_f).map(|(_, v)| v).sum();
    Ok(p.iter().enumerate().map(|(i, v)| if i == y_f { 0.0 } else { v / rest }).collect())
}

/// [`reweight_distribution`] of `softmax(logits)`, computed without forming the
/// forget-class probability, so it stays defined when that probability rounds to 1.
pub fn reweight_logits(logits: &[f64], y_f: usize) -> Result<Vec<f64>> {
    if y_f >= logits.len() || logits.len() < 2 {
        return Err(Error::InvalidConfig(format!("forget class {y_f} out of range")));
    }
    let max = remaining(logits.len(), y_f).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let mut q: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    q[y_f] = 0.0;
    let total: f64 = q.iter().sum();
    Ok(q.into_iter().map(|v| v / total).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltedTarget {
    pub probs: Vec<f64>,
    pub beta: f64,
    /// `Σ q(y) s_y` over the remaining classes.
    pub moment: f64,
    /// Scores over the remaining classes, in class order.
    pub scores: Vec<f64>,
}

fn remaining(k: usize, y_f: usize) -> impl Iterator<Item = usize> {
    (0..k).filter(move |&i| i != y_f)
}

fn check_scores(p: &[f64], y_f: usize, scores: &[f64]) -> Result<()> {
    if scores.len() + 1 != p.len() {
        return Err(Error::ShapeMismatch {
            context: "tilt scores",
            expected: p.len() - 1,
            got: scores.len(),
        });
    }
    if y_f >= p.len() {
        return Err(Error::InvalidConfig(format!("forget class {y_f} out of range")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("tilt scores"));
    }
    Ok(())
}

fn tilt_log_space(reweighted: &[f64], y_f: usize, scores: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let k = reweighted.len();
    let logits: Vec<(usize, f64)> = remaining(k, y_f)
        .zip(scores)
        .filter(|(i, _)| reweighted[*i] > 0.0)
        .map(|(i, s)| (i, reweighted[i].ln() + beta * s))
        .collect();
    let max = logits.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|(_, v)| (v - max).exp()).sum::<f64>().ln();
    let mut q = vec![0.0; k];
    for (i, v) in logits {
        q[i] = (v - lse).exp();
    }
    let moment = remaining(k, y_f).zip(scores).map(|(i, s)| q[i] * s).sum();
    (q, moment)
}

/// `q(y) ∝ p̃(y) exp(β s_y)` over the remaining classes; `q(y_f) = 0`.
pub fn tilt_distribution(p: &[f64], y_f: usize, scores: &[f64], beta: f64) -> Result<TiltedTarget> {
    check_scores(p, y_f, scores)?;
    if !beta.is_finite() {
        return Err(Error::NonFinite("tilt beta"));
    }
    let reweighted = reweight_distribution(p, y_f)?;
    let (probs, moment) = tilt_log_space(&reweighted, y_f, scores, beta);
    Ok(TiltedTarget {
        probs,
        beta,
        moment,
        scores: scores.to_vec(),
    })
}

/// First moment of the tilted distribution as a function of β.
pub fn tilted_moment(p: &[f64], y_f: usize, scores: &[f64], beta: f64) -> Result<f64> {
    Ok(tilt_distribution(p, y_f, scores, beta)?.moment)
}

/// The β whose tilt has first moment `target_c`. The moment is nondecreasing
/// in β with limits at the smallest and largest supported score, so a
/// bracket-and-bisect search always converges for interior targets.
pub fn solve_beta(p: &[f64], y_f: usize, scores: &[f64], target_c: f64) -> Result<(f64, f64)> {
    check_scores(p, y_f, scores)?;
    let reweighted = reweight_distribution(p, y_f)?;
    let support: Vec<f64> = remaining(p.len(), y_f)
        .zip(scores)
        .filter(|(i, _)| reweighted[*i] > 0.0)
        .map(|(_, s)| *s)
        .collect();
    let lo_lim = support.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_lim = support.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(target_c > lo_lim && target_c < hi_lim) {
        return Err(Error::Infeasible {
            target: target_c,
            min: lo_lim,
            max: hi_lim,
        });
    }
    let m = |b: f64| tilt_log_space(&reweighted, y_f, scores, b).1;
    let m0 = m(0.0);
    if (m0 - target_c).abs() <= MOMENT_TOL {
        return Ok((0.0, m0));
    }
    let (mut lo, mut hi) = if m0 < target_c { (0.0, 1.0) } else { (-1.0, 0.0) };
    while m(hi) < target_c {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Degenerate("moment bracket diverged".into()));
        }
    }
    while m(lo) > target_c {
        hi = lo;
        lo *= 2.0;
        if !lo.is_finite() {
            return Err(Error::Degenerate("moment bracket diverged".into()));
        }
    }
    let mut best = (lo, m(lo));
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let mm = m(mid);
        if (mm - target_c).abs() < (best.1 - target_c).abs() {
            best = (mid, mm);
        }
        if (mm - target_c).abs() <= MOMENT_TOL || mid == lo || mid == hi {
            break;
        }
        if mm < target_c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Projection dimension; `None` means `min(K − 1, 8)`.
    #[serde(default)]
    pub pca_dim: Option<usize>,
    pub temperature: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            pca_dim: None,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Per-class weight vectors of the final layer (rows of its matrix).
pub fn class_weight_vectors(net: &TinyNet) -> Result<Vec<Vec<f64>>> {
    let last = &net.layers[net.layers.len() - 1].op;
    let inner = match last {
        Operator::Affine { inner, .. } => inner.as_ref(),
        other => other,
    };
    match inner {
        Operator::Dense { rows, cols, weight } => Ok((0..*rows).map(|r| weight[r * cols..(r + 1) * cols].to_vec()).collect()),
        _ => Err(Error::Precondition("the final layer must be dense".into())),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Raw cosine similarities of each remaining class's projected weight vector
/// with the forget class's, before the temperature softmax.
pub fn class_cosines(weights: &[Vec<f64>], y_f: usize, pca_dim: Option<usize>) -> Result<Vec<f64>> {
    let k = weights.len();
    if y_f >= k {
        return Err(Error::InvalidConfig(format!("forget class {y_f} out of range")));
    }
    let d = weights[0].len();
    let w = DMatrix::from_fn(k, d, |i, j| weights[i][j]);
    // Second-moment PCA: centering would destroy orthogonality between classes.
    let eig = SymmetricEigen::new(w.transpose() * &w);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-12 * top.max(f64::MIN_POSITIVE)).count();
    let mut dim = pca_dim.unwrap_or((k - 1).min(8));
    if dim > rank {
        warn!("pca dimension {dim} exceeds the weight rank {rank}; using {rank}");
        dim = rank;
    }
    let basis = DMatrix::from_fn(d, dim, |i, j| eig.eigenvectors[(i, order[j])]);
    let proj = &w * basis;
    let row = |i: usize| proj.row(i).iter().copied().collect::<Vec<f64>>();
    let f = row(y_f);
    Ok(remaining(k, y_f).map(|y| cosine(&row(y), &f)).collect())
}

/// Temperature softmax of the projected cosine similarities.
pub fn class_similarity_scores(net: &TinyNet, y_f: usize, cfg: &ScoreConfig) -> Result<Vec<f64>> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let cos = class_cosines(&class_weight_vectors(net)?, y_f, cfg.pca_dim)?;
    Ok(softmax(&cos.iter().map(|c| c / cfg.temperature).collect::<Vec<_>>()))
}

/// Scores from class centroids: softmax of inverse distances to the forget class.
pub fn centroid_scores(centroids: &[Vec<f64>], y_f: usize, temperature: f64) -> Vec<f64> {
    let inv: Vec<f64> = remaining(centroids.len(), y_f)
        .map(|y| {
            let d: f64 = centroids[y].iter().zip(&centroids[y_f]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            1.0 / d.max(1e-12)
        })
        .collect();
    softmax(&inv.iter().map(|v| v / temperature).collect::<Vec<_>>())
}

/// Training set for class unlearning: retained samples keep hard labels,
/// forget samples get the tilt of `reference`'s prediction.
pub fn trw_samples(reference: &TinyNet, data: &LabeledDataset, y_f: usize, scores: &[f64], beta: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for ((x, &y), part) in data.inputs.iter().zip(&data.labels).zip(&data.partitions) {
        match part {
            Partition::Retain | Partition::Train => out.push(Sample::hard(x.clone(), y)),
            Partition::Forget => {
                let p = reweight_logits(&reference.logits(x)?, y_f)?;
                let q = tilt_distribution(&p, y_f, scores, beta)?;
                out.push(Sample {
                    x: x.clone(),
                    target: Target::Soft(q.probs),
                });
            }
            Partition::Test => {}
        }
    }
    Ok(out)
}

/// Mean of hard-label cross-entropy on retained samples and soft cross-entropy
/// against the tilted targets on forget samples.
pub fn trw_loss_and_grad(net: &TinyNet, batch: &[Sample], y_f: usize) -> Result<Gradients> {
    for s in batch {
        if let Target::Soft(q) = &s.target {
            let sum: f64 = q.iter().sum();
            if q.get(y_f).copied() != Some(0.0) || (sum - 1.0).abs() > 1e-12 || q.iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidConfig("tilted target must be a distribution with zero forget mass".into()));
            }
        }
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    batch_gradient(net, batch, &idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrwConfig {
    pub forget_class: usize,
    pub beta: f64,
    /// Explicit scores over the remaining classes; `None` derives them from the weights.
    #[serde(default)]
    pub scores: Option<Vec<f64>>,
    #[serde(default)]
    pub score: ScoreConfig,
}

pub fn trw_finetune(net: &TinyNet, data: &LabeledDataset, cfg: &TrwConfig, train: &TrainConfig) -> Result<TinyNet> {
    let scores = match &cfg.scores {
        Some(s) => s.clone(),
        None => class_similarity_scores(net, cfg.forget_class, &cfg.score)?,
    };
    let samples = trw_samples(net, data, cfg.forget_class, &scores, cfg.beta)?;
    Ok(crate::net::train_samples(net, &samples, train, &mut |_, _| Ok(()))?.net)
}

// ---------------------------------------------------------------------------
// Nearest-neighbour membership inference.

/// A 1-D classifier predicting the positive class when `above == (v > threshold)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub threshold: f64,
    pub above: bool,
    /// Training accuracy.
    pub accuracy: f64,
}

impl Threshold {
    pub fn predict(&self, v: f64) -> bool {
        (v > self.threshold) == self.above
    }
}

/// Accuracy-optimal threshold with orientation. Candidates are midpoints of
/// consecutive distinct values plus one cut below everything; ties prefer the
/// earlier candidate and "above" orientation.
pub fn fit_threshold(positive: &[f64], negative: &[f64]) -> Result<Threshold> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::InvalidConfig("threshold fitting needs both classes".into()));
    }
    let mut all: Vec<(f64, bool)> = positive.iter().map(|&v| (v, true)).chain(negative.iter().map(|&v| (v, false))).collect();
    if all.iter().any(|(v, _)| !v.is_finite()) {
        return Err(Error::NonFinite("threshold inputs"));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len() as f64;
    let np = positive.len();
    // Cut below all values: "above" predicts everything positive.
    let mut pos_below = 0usize;
    let mut neg_below = 0usize;
    let score = |pb: usize, nb: usize| -> (usize, usize) {
        let above = (np - pb) + nb;
        (above, all.len() - above)
    };
    let (a0, b0) = score(0, 0);
    let mut best = if a0 >= b0 {
        Threshold { threshold: all[0].0 - 1.0, above: true, accuracy: a0 as f64 / n }
    } else {
        Threshold { threshold: all[0].0 - 1.0, above: false, accuracy: b0 as f64 / n }
    };
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        if i == all.len() {
            break;
        }
        let t = 0.5 * (v + all[i].0);
        let (a, b) = score(pos_below, neg_below);
        if a as f64 / n > best.accuracy {
            best = Threshold { threshold: t, above: true, accuracy: a as f64 / n };
        }
        if b as f64 / n > best.accuracy {
            best = Threshold { threshold: t, above: false, accuracy: b as f64 / n };
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    /// Fraction of forget-class samples predicted as this class, per retrained model.
    pub per_model: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaNnReport {
    pub per_class: Vec<ClassAccuracy>,
    pub nearest_class: usize,
    pub mean_acc_retrain: f64,
    /// Across-model sample standard deviation at the nearest class.
    pub std_retrain: f64,
    pub acc_unlearned: f64,
    pub gap: f64,
}

fn class_logit_split(net: &TinyNet, test: &LabeledDataset, class: usize, y_f: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (mut pos, mut neg, mut forget) = (Vec::new(), Vec::new(), Vec::new());
    for (x, &y) in test.inputs.iter().zip(&test.labels) {
        let z = net.logits(x)?[class];
        if y == y_f {
            forget.push(z);
        } else if y == class {
            pos.push(z);
        } else {
            neg.push(z);
        }
    }
    Ok((pos, neg, forget))
}

/// Accuracy on forget samples of a threshold on logit `class`, fitted to separate
/// that class's test samples from the other retained classes.
pub fn class_attack_accuracy(net: &TinyNet, test: &LabeledDataset, class: usize, y_f: usize) -> Result<f64> {
    let (pos, neg, forget) = class_logit_split(net, test, class, y_f)?;
    let t = fit_threshold(&pos, &neg)?;
    Ok(forget.iter().filter(|&&v| t.predict(v)).count() as f64 / forget.len() as f64)
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn mia_nn(retrained: &[TinyNet], unlearned: &TinyNet, test: &LabeledDataset, y_f: usize) -> Result<MiaNnReport> {
    if retrained.is_empty() {
        return Err(Error::InvalidConfig("mia_nn needs at least one retrained model".into()));
    }
    let k = test.num_classes;
    for c in 0..k {
        if !test.labels.contains(&c) {
            return Err(Error::EmptyClass(c));
        }
    }
    let mut per_class = Vec::with_capacity(k - 1);
    for class in remaining(k, y_f) {
        let per_model = retrained
            .iter()
            .map(|m| class_attack_accuracy(m, test, class, y_f))
            .collect::<Result<Vec<_>>>()?;
        let mean = per_model.iter().sum::<f64>() / per_model.len() as f64;
        per_class.push(ClassAccuracy {
            class,
            std: sample_std(&per_model),
            per_model,
            mean,
        });
    }
    let mut best = 0;
    for (i, c) in per_class.iter().enumerate() {
        if c.mean > per_class[best].mean {
            best = i;
        }
    }
    let nearest = &per_class[best];
    let acc_unlearned = class_attack_accuracy(unlearned, test, nearest.class, y_f)?;
    Ok(MiaNnReport {
        nearest_class: nearest.class,
        mean_acc_retrain: nearest.mean,
        std_retrain: nearest.std,
        acc_unlearned,
        gap: (nearest.mean - acc_unlearned).abs(),
        per_class,
    })
}

/// Test-partition accuracy on the forget class and on the remaining classes.
pub fn split_accuracy(net: &TinyNet, data: &LabeledDataset, y_f: usize) -> Result<(f64, f64)> {
    let test = data.partition(Partition::Test);
    let (mut fc, mut fn_, mut rc, mut rn) = (0usize, 0usize, 0usize, 0usize);
    for (x, &y) in test.inputs.iter().zip(&test.labels) {
        let ok = net.predict(x)? == y;
        if y == y_f {
            fn_ += 1;
            fc += ok as usize;
        } else {
            rn += 1;
            rc += ok as usize;
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    Ok((frac(rc, rn), frac(fc, fn_)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Layer};

    #[test]
    fn reweight_example() {
        let q = reweight_distribution(&[0.5, 0.3, 0.2], 0).unwrap();
        assert!((q[1] - 0.6).abs() < 1e-15 && (q[2] - 0.4).abs() < 1e-15 && q[0] == 0.0);
        assert_eq!(reweight_distribution(&[0.0, 0.3, 0.7], 0).unwrap(), vec![0.0, 0.3, 0.7]);
        assert!(reweight_distribution(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn reweight_logits_matches_and_survives_saturation() {
        let logits = [0.4, -1.0, 2.0];
        let a = reweight_logits(&logits, 0).unwrap();
        let b = reweight_distribution(&crate::net::softmax(&logits), 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let q = reweight_logits(&[900.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(q, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn tilt_concentrates_on_max_score() {
        let q = tilt_distribution(&[0.0, 0.6, 0.4], 0, &[1.0, 0.0], 200.0).unwrap();
        assert!(q.probs[1] > 1.0 - 1e-12 && q.probs[0] == 0.0);
    }

    #[test]
    fn zero_beta_is_reweight() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let q = tilt_distribution(&p, 2, &[0.3, -1.0, 2.0], 0.0).unwrap();
        let r = reweight_distribution(&p, 2).unwrap();
        for (a, b) in q.probs.iter().zip(&r) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn solve_beta_hits_target() {
        let p = [0.25, 0.25, 0.3, 0.2];
        let s = [0.1, 0.5, 0.9];
        let (b, m) = solve_beta(&p, 0, &s, 0.8).unwrap();
        assert!((m - 0.8).abs() <= MOMENT_TOL && b > 0.0);
        let (b, _) = solve_beta(&p, 0, &s, tilted_moment(&p, 0, &s, 0.0).unwrap()).unwrap();
        assert_eq!(b, 0.0);
        let (b, m) = solve_beta(&p, 0, &s, 0.9 - 1e-9).unwrap();
        assert!(b > 10.0 && (m - (0.9 - 1e-9)).abs() <= MOMENT_TOL);
        assert!(matches!(solve_beta(&p, 0, &s, 0.95), Err(Error::Infeasible { .. })));
    }

    fn head(weights: Vec<Vec<f64>>) -> TinyNet {
        let rows = weights.len();
        let cols = weights[0].len();
        let op = Operator::affine(Operator::dense(rows, cols, weights.concat()).unwrap(), vec![0.0; rows]).unwrap();
        TinyNet::new(vec![Layer::new("head", op, Activation::Identity)]).unwrap()
    }

    #[test]
    fn identical_weight_vectors_score_highest() {
        let net = head(vec![vec![1.0, 2.0, 0.0], vec![0.5, -1.0, 3.0], vec![1.0, 2.0, 0.0], vec![-1.0, 0.0, 1.0]]);
        let cos = class_cosines(&class_weight_vectors(&net).unwrap(), 0, Some(3)).unwrap();
        assert!((cos[1] - 1.0).abs() < 1e-12);
        let s = class_similarity_scores(&net, 0, &ScoreConfig { pca_dim: Some(3), ..ScoreConfig::default() }).unwrap();
        assert_eq!(crate::net::argmax(&s), 1);
    }

    #[test]
    fn orthogonal_weight_vectors_give_uniform_scores() {
        let net = head(vec![vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 3.0]]);
        let s = class_similarity_scores(&net, 1, &ScoreConfig { pca_dim: Some(3), ..ScoreConfig::default() }).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_hot_soft_target_is_hard_label() {
        let net = head(vec![vec![1.0, -0.5], vec![0.2, 0.3], vec![-0.7, 0.9]]);
        let x = vec![0.4, -1.2];
        let soft = [Sample { x: x.clone(), target: Target::Soft(vec![0.0, 0.0, 1.0]) }];
        let hard = [Sample::hard(x, 2)];
        let a = trw_loss_and_grad(&net, &soft, 0).unwrap();
        let b = trw_loss_and_grad(&net, &hard, 0).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.layers, b.layers);
        let bad = [Sample { x: vec![0.0, 0.0], target: Target::Soft(vec![0.5, 0.5, 0.0]) }];
        assert!(trw_loss_and_grad(&net, &bad, 0).is_err());
    }

    #[test]
    fn threshold_separates_clean_split() {
        let t = fit_threshold(&[3.0, 4.0, 5.0], &[0.0, 1.0]).unwrap();
        assert_eq!(t.accuracy, 1.0);
        assert!(t.above && t.threshold == 2.0);
        let t = fit_threshold(&[0.0, 1.0], &[3.0, 4.0, 5.0]).unwrap();
        assert!(!t.above && t.accuracy == 1.0);
    }
}
