//! Layer-wise orthogonalization of ensembles.
//!
//! For corresponding layers `f`, `g` of two models with top right singular
//! vectors `v_i` (of `f`) and `v_i′` (of `g`), the similarity
//!
//! ```text
//! S_k(f, g) = Σ_i w_i (ReLU(‖f(v_i′)‖ − mal) + ReLU(‖g(v_i)‖ − mal))
//! ```
//!
//! is added to the ensemble's mean cross-entropy with weight
//! `λ / (M N (N−1))`. The singular vectors are tracked by warm-started
//! PowerQR and held fixed within each step, so gradients only reach the
//! layer parameters through the `‖f(v′)‖` terms.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::clipper::{fastclip_hook, resolve_targets, FastClipConfig, Tracker};
use crate::error::{Error, Result};
use crate::linop::{norm, Operator};
use crate::net::{
    batch_gradient, pgd_attack, targeted_attack, AttackConfig, BatchSampler, LabeledDataset, Sample, TinyNet,
    TrainConfig,
};
use crate::rng::sub_seed;
use crate::spectral::{power_qr, PowerQrConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LotosConfig {
    pub k: usize,
    /// Non-increasing weights; empty means uniform `1/k`.
    #[serde(default)]
    pub weights: Vec<f64>,
    pub mal: f64,
    pub lambda: f64,
    /// Participating layers by name; empty means the first layer only.
    #[serde(default)]
    pub layers: Vec<String>,
}

impl Default for LotosConfig {
    fn default() -> Self {
        LotosConfig {
            k: 1,
            weights: Vec::new(),
            mal: 0.8,
            lambda: 1.0,
            layers: Vec::new(),
        }
    }
}

impl LotosConfig {
    pub fn weights(&self) -> Vec<f64> {
        if self.weights.is_empty() {
            vec![1.0 / self.k as f64; self.k]
        } else {
            self.weights.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("lotos k must be positive".into()));
        }
        let w = self.weights();
        if w.len() != self.k {
            return Err(Error::InvalidConfig(format!("lotos needs {} weights, got {}", self.k, w.len())));
        }
        if w.windows(2).any(|p| p[1] > p[0]) || w.iter().any(|x| *x < 0.0) {
            return Err(Error::InvalidConfig("lotos weights must be nonnegative and non-increasing".into()));
        }
        if !(self.mal >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lotos mal and lambda must be nonnegative".into()));
        }
        Ok(())
    }

    /// Indices of the participating layers in `net`.
    pub fn layer_indices(&self, net: &TinyNet) -> Result<Vec<usize>> {
        if self.layers.is_empty() {
            return Ok(vec![0]);
        }
        self.layers
            .iter()
            .map(|name| {
                net.layer_index(name)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown layer {name}")))
            })
            .collect()
    }
}

fn cross_norm(op: &Operator, v: &[f64]) -> Result<f64> {
    Ok(norm(&op.apply_linear(v)?))
}

/// `S_k(f, g)` given each layer's top right singular vectors.
pub fn subspace_similarity(
    f: &Operator,
    g: &Operator,
    f_vectors: &[Vec<f64>],
    g_vectors: &[Vec<f64>],
    cfg: &LotosConfig,
) -> Result<f64> {
    cfg.validate()?;
    if f.in_dim() != g.in_dim() {
        return Err(Error::ShapeMismatch {
            context: "subspace_similarity input dims",
            expected: f.in_dim(),
            got: g.in_dim(),
        });
    }
    if f_vectors.len() < cfg.k || g_vectors.len() < cfg.k {
        return Err(Error::InvalidConfig(format!("need {} singular vectors per layer", cfg.k)));
    }
    let mut s = 0.0;
    for (i, w) in cfg.weights().iter().enumerate() {
        s += w * ((cross_norm(f, &g_vectors[i])? - cfg.mal).max(0.0) + (cross_norm(g, &f_vectors[i])? - cfg.mal).max(0.0));
    }
    Ok(s)
}

/// Top-`k` right singular vectors by a converged PowerQR run.
pub fn top_vectors(op: &Operator, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let pq = PowerQrConfig::new(k, 5000).with_tol(1e-13);
    Ok(power_qr(op, &pq, seed)?.vectors)
}

/// Tracked singular vectors: `vectors[model][selected layer][i]`.
pub type EnsembleVectors = Vec<Vec<Vec<Vec<f64>>>>;

#[derive(Clone, Debug)]
pub struct LotosLoss {
    pub loss: f64,
    pub cross_entropy: f64,
    pub similarity: f64,
    /// `grads[model][layer]`.
    pub grads: Vec<Vec<Vec<f64>>>,
}

/// Mean cross-entropy over models plus the normalized pairwise similarity.
pub fn lotos_loss(ensemble: &[TinyNet], batch: &[Sample], cfg: &LotosConfig, vectors: &EnsembleVectors) -> Result<LotosLoss> {
    cfg.validate()?;
    let n = ensemble.len();
    if n < 2 {
        return Err(Error::InvalidConfig("an ensemble needs at least two models".into()));
    }
    let selected: Vec<Vec<usize>> = ensemble.iter().map(|m| cfg.layer_indices(m)).collect::<Result<_>>()?;
    let m_layers = selected[0].len();
    if selected.iter().any(|s| s.len() != m_layers) || vectors.len() != n || vectors.iter().any(|v| v.len() != m_layers) {
        return Err(Error::InvalidConfig("every model needs the same number of selected layers and vectors".into()));
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut grads = Vec::with_capacity(n);
    let mut ce = 0.0;
    for model in ensemble {
        let g = batch_gradient(model, batch, &idx)?;
        ce += g.loss / n as f64;
        grads.push(g.layers.into_iter().map(|l| l.into_iter().map(|v| v / n as f64).collect::<Vec<f64>>()).collect::<Vec<_>>());
    }
    let scale = cfg.lambda / (m_layers * n * (n - 1)) as f64;
    let weights = cfg.weights();
    let mut similarity = 0.0;
    for z in 0..n {
        for j in z + 1..n {
            for l in 0..m_layers {
                let (lz, lj) = (selected[z][l], selected[j][l]);
                let f = &ensemble[z].layers[lz].op;
                let g = &ensemble[j].layers[lj].op;
                if f.in_dim() != g.in_dim() {
                    warn!("skipping layer pair ({lz}, {lj}) of models ({z}, {j}): input dims differ");
                    continue;
                }
                for (i, w) in weights.iter().enumerate() {
                    // f applied to g's vector, and g applied to f's vector
                    for (owner, layer, op, v) in [(z, lz, f, &vectors[j][l][i]), (j, lj, g, &vectors[z][l][i])] {
                        let y = op.apply_linear(v)?;
                        let len = norm(&y);
                        if len > cfg.mal {
                            similarity += w * (len - cfg.mal);
                            if scale != 0.0 {
                                let unit: Vec<f64> = y.iter().map(|t| t / len).collect();
                                let d = op.linear_param_grad(v, &unit)?;
                                for (acc, di) in grads[owner][layer].iter_mut().zip(d) {
                                    *acc += scale * w * di;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(LotosLoss {
        loss: ce + scale * similarity,
        cross_entropy: ce,
        similarity,
        grads,
    })
}

/// Per-model clipping targets used during ensemble training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleClip {
    pub targets: BTreeMap<String, f64>,
    pub fastclip: FastClipConfig,
}

#[derive(Clone, Debug)]
pub struct EnsembleReport {
    pub models: Vec<TinyNet>,
    pub losses: Vec<f64>,
    /// Unnormalized pairwise similarity at every step.
    pub similarity: Vec<f64>,
}

/// Trains an ensemble jointly on shared minibatches. With `lotos = None` the
/// models are trained independently (still sharing the batch order), which is
/// the clipped-only baseline when `clip` is set.
pub fn train_ensemble(
    init: &[TinyNet],
    data: &LabeledDataset,
    lotos: Option<&LotosConfig>,
    clip: Option<&EnsembleClip>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EnsembleReport> {
    cfg.validate()?;
    let samples = data.train_samples();
    if samples.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut models = init.to_vec();
    let mut hooks = Vec::new();
    if let Some(c) = clip {
        for (i, m) in models.iter().enumerate() {
            let targets = resolve_targets(m, &c.targets)?;
            hooks.push(fastclip_hook(m, &targets, &c.fastclip, sub_seed(seed, 100 + i as u64))?);
        }
    }
    let mut trackers: Vec<Vec<Tracker>> = Vec::new();
    if let Some(l) = lotos {
        for (i, m) in models.iter().enumerate() {
            let mut per = Vec::new();
            for (j, layer) in l.layer_indices(m)?.into_iter().enumerate() {
                let pq = PowerQrConfig::new(l.k, 100);
                let spectrum = power_qr(&m.layers[layer].op, &pq, sub_seed(seed, (i * 64 + j) as u64))?;
                per.push(Tracker { layer, target: f64::INFINITY, spectrum });
            }
            trackers.push(per);
        }
    }
    let mut sampler = BatchSampler::new(samples.len(), cfg.batch, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut similarity = Vec::new();
    for step in 1..=cfg.steps {
        let idx = sampler.next_batch();
        let rate = cfg.rate(step);
        match lotos {
            Some(l) => {
                let batch: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
                let vectors: EnsembleVectors = trackers
                    .iter()
                    .map(|per| per.iter().map(|t| t.spectrum.vectors.clone()).collect())
                    .collect();
                let out = lotos_loss(&models, &batch, l, &vectors)?;
                if !out.loss.is_finite() {
                    return Err(Error::Diverged { step });
                }
                losses.push(out.loss);
                similarity.push(out.similarity);
                for (m, g) in models.iter_mut().zip(&out.grads) {
                    m.step(g, rate)?;
                }
                for (m, per) in models.iter().zip(trackers.iter_mut()) {
                    for t in per.iter_mut() {
                        t.refresh(m, 1)?;
                    }
                }
            }
            None => {
                let mut total = 0.0;
                for m in models.iter_mut() {
                    let g = batch_gradient(m, &samples, &idx)?;
                    if !g.loss.is_finite() {
                        return Err(Error::Diverged { step });
                    }
                    total += g.loss / init.len() as f64;
                    m.step(&g.layers, rate)?;
                }
                losses.push(total);
            }
        }
        for (m, hook) in models.iter_mut().zip(hooks.iter_mut()) {
            hook(m, step)?;
        }
    }
    Ok(EnsembleReport {
        models,
        losses,
        similarity,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRate {
    /// `None` when the conditioning set is empty.
    pub rate: Option<f64>,
    pub conditioned: usize,
    pub transferred: usize,
}

/// Conditional probability that an attack crafted on `source` also fools
/// `target`, among samples both classify correctly and the attack fools
/// `source`. With `target_class` set, success means landing on that class.
pub fn transfer_rate(
    source: &TinyNet,
    target: &TinyNet,
    eval: &LabeledDataset,
    eps: f64,
    attack: &AttackConfig,
    target_class: Option<usize>,
) -> Result<TransferRate> {
    if eval.is_empty() {
        return Err(Error::InvalidConfig("transfer_rate needs a nonempty evaluation set".into()));
    }
    let mut conditioned = 0;
    let mut transferred = 0;
    for (i, (x, &y)) in eval.inputs.iter().zip(&eval.labels).enumerate() {
        if source.predict(x)? != y || target.predict(x)? != y {
            continue;
        }
        let cfg = AttackConfig {
            seed: sub_seed(attack.seed, i as u64),
            ..attack.clone()
        };
        let (adv, fooled): (Vec<f64>, Box<dyn Fn(usize) -> bool>) = match target_class {
            None => (pgd_attack(source, x, y, eps, &cfg)?, Box::new(move |p| p != y)),
            Some(t) => {
                if t == y {
                    continue;
                }
                (targeted_attack(source, x, t, eps, &cfg)?, Box::new(move |p| p == t))
            }
        };
        if !fooled(source.predict(&adv)?) {
            continue;
        }
        conditioned += 1;
        if fooled(target.predict(&adv)?) {
            transferred += 1;
        }
    }
    Ok(TransferRate {
        rate: (conditioned > 0).then(|| transferred as f64 / conditioned as f64),
        conditioned,
        transferred,
    })
}

/// `‖A v₁′‖` for the given layers: `A` from `f`, `v₁′` the top right singular vector of `g`.
pub fn cross_response(f: &Operator, g: &Operator, seed: u64) -> Result<f64> {
    let v = top_vectors(g, 1, seed)?;
    cross_norm(f, &v[0])
}
