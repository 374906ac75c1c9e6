//! Spectral-norm clipping.
//!
//! The stand-alone [`clip_spectral_norm`] shrinks the top singular value one
//! rank-one direction at a time: with `(σ₁, v₁)` from PowerQR it runs a few
//! gradient steps, in parameter space, on `½‖M′v₁ − (c/σ₁) M v₁‖²`. For a
//! dense matrix the gradient is exactly `u₁(σ₁ − c)v₁ᵀ`. For structured
//! operators (convolutions, diagonals, compositions) the same gradient is the
//! projection of that rank-one update onto the reachable parameters.
//!
//! [`fastclip_train`] interleaves this with SGD, tracking `(σ₁, v₁)` of each
//! clipped layer with one warm-started PowerQR iteration per step.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::{compose, dot, Diagonal, Operator};
use crate::net::{train_samples, LabeledDataset, TinyNet, TrainConfig, TrainReport};
use crate::rng::sub_seed;
use crate::spectral::{matrix_spectrum, power_qr, ritz_top, PowerQrConfig, Spectrum};

/// `σ₁ > c` is tested with this absolute slack.
pub const CLIP_SLACK: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub target: f64,
    pub inner_iters: usize,
    pub learning_rate: f64,
    /// Iteration cap for each PowerQR re-estimate from a fresh random vector.
    pub restart_iters: usize,
    /// Relative-change stopping rule for those re-estimates.
    #[serde(default = "default_restart_tol")]
    pub restart_tol: f64,
    /// Block width of each re-estimate. With 1 it is plain PowerQR; wider
    /// blocks add a Rayleigh–Ritz extraction that resolves top values lying
    /// just above a cluster of already-clipped ones.
    #[serde(default = "one")]
    pub restart_block: usize,
    pub max_while_iters: usize,
}

fn one() -> usize {
    1
}

fn default_restart_tol() -> f64 {
    1e-14
}

impl ClipConfig {
    /// Single exact step per while-iteration; suited to dense operators.
    pub fn dense(target: f64) -> Self {
        ClipConfig {
            target,
            inner_iters: 1,
            learning_rate: 1.0,
            restart_iters: 2000,
            restart_tol: default_restart_tol(),
            restart_block: 8,
            max_while_iters: 100,
        }
    }

    /// Slightly damped steps for convolutions and other structured operators.
    /// The inner loop runs until `M′v₁` reaches its target: stopping early
    /// leaves `‖M′v₁‖` short of `c`, which can undershoot the final norm.
    pub fn conv(target: f64) -> Self {
        ClipConfig {
            inner_iters: 50,
            learning_rate: 0.9,
            ..Self::dense(target)
        }
    }

    /// Picks [`ClipConfig::dense`] or [`ClipConfig::conv`] from the operator kind.
    pub fn for_operator(op: &Operator, target: f64) -> Self {
        match op.linear_core() {
            Operator::Dense { .. } => Self::dense(target),
            _ => Self::conv(target),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0) {
            return Err(Error::InvalidConfig("clip target must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidConfig("clip learning rate must lie in (0, 1]".into()));
        }
        if self.inner_iters == 0 || self.restart_iters == 0 || self.restart_block == 0 {
            return Err(Error::InvalidConfig("clip iteration counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipOutcome {
    pub operator: Operator,
    /// Final top singular pair as estimated by PowerQR.
    pub spectrum: Spectrum,
    pub sigma_before: f64,
    /// Outer while-loop iterations performed.
    pub iterations: usize,
}

fn top_pair(op: &Operator, cfg: &ClipConfig, seed: u64) -> Result<Spectrum> {
    if cfg.restart_block > 1 {
        let pq = PowerQrConfig::new(cfg.restart_block, cfg.restart_iters).with_tol(cfg.restart_tol);
        return ritz_top(op, &pq, seed);
    }
    let pq = PowerQrConfig::new(1, cfg.restart_iters).with_tol(cfg.restart_tol);
    power_qr(op, &pq, seed)
}

/// Inner loop: gradient steps on `½‖M′v − target‖²` over the linear parameters.
///
/// Each step is scaled by the exact minimizer along the gradient direction,
/// `‖g‖² / ‖J g‖²` (for a dense operator this factor is 1, so `λ = 1` lands
/// exactly on the target).
fn shrink_direction(op: &mut Operator, v: &[f64], target: &[f64], cfg: &ClipConfig) -> Result<()> {
    for _ in 0..cfg.inner_iters {
        let out = op.apply_linear(v)?;
        let resid: Vec<f64> = out.iter().zip(target).map(|(a, b)| a - b).collect();
        if dot(&resid, &resid).sqrt() <= 1e-14 * (1.0 + dot(target, target).sqrt()) {
            break;
        }
        let g = op.linear_param_grad(v, &resid)?;
        let gg = dot(&g, &g);
        if gg == 0.0 {
            break;
        }
        let jg = op.linear_param_jvp(v, &g)?;
        let jj = dot(&jg, &jg);
        if jj == 0.0 {
            break;
        }
        let step = cfg.learning_rate * gg / jj;
        let params: Vec<f64> = op.params().iter().zip(&g).map(|(p, d)| p - step * d).collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("clip parameters"));
        }
        op.set_params(&params)?;
    }
    Ok(())
}

/// Clips the spectral norm of `op` to `cfg.target`.
pub fn clip_spectral_norm(op: &Operator, cfg: &ClipConfig, seed: u64) -> Result<ClipOutcome> {
    clip_from(op, cfg, None, seed)
}

/// As [`clip_spectral_norm`], optionally starting from a tracked `(σ₁, v₁)`.
pub fn clip_from(op: &Operator, cfg: &ClipConfig, start: Option<Spectrum>, seed: u64) -> Result<ClipOutcome> {
    cfg.validate()?;
    if op.num_params() == 0 {
        return Err(Error::InvalidOperator("operator has no trainable parameters".into()));
    }
    let mut restart = 0u64;
    let mut spectrum = match start {
        Some(s) => s,
        None => top_pair(op, cfg, sub_seed(seed, restart))?,
    };
    let sigma_before = spectrum.top();
    let mut current = op.clone();
    let mut iterations = 0;
    while spectrum.top() > cfg.target + CLIP_SLACK {
        if iterations == cfg.max_while_iters {
            return Err(Error::ClipNotConverged {
                iterations,
                sigma: spectrum.top(),
                target: cfg.target,
            });
        }
        let sigma = spectrum.top();
        let v = &spectrum.vectors[0];
        let scale = cfg.target / sigma;
        let target: Vec<f64> = current.apply_linear(v)?.iter().map(|y| y * scale).collect();
        shrink_direction(&mut current, v, &target, cfg)?;
        iterations += 1;
        restart += 1;
        spectrum = top_pair(&current, cfg, sub_seed(seed, restart))?;
    }
    Ok(ClipOutcome {
        operator: current,
        spectrum,
        sigma_before,
        iterations,
    })
}

/// Uniformly rescales the gains of a diagonal operator so that its largest
/// `|γ_i| / sqrt(var_i + eps)` is at most `c`.
pub fn clip_diagonal_norm(d: &Diagonal, c: f64) -> Diagonal {
    let top = d.gains().iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut out = d.clone();
    if top > c {
        let s = c / top;
        out.gamma.iter_mut().for_each(|g| *g *= s);
    }
    out
}

/// Clips the composition `children[0] ∘ … ∘ children[last]` as one operator,
/// distributing the parameter updates across all children.
pub fn clip_composition(children: &[Operator], cfg: &ClipConfig, seed: u64) -> Result<(Vec<Operator>, ClipOutcome)> {
    let composed = compose(children.to_vec())?;
    let outcome = clip_spectral_norm(&composed, cfg, seed)?;
    let Operator::Composition(parts) = &outcome.operator else {
        unreachable!("clipping preserves the operator kind")
    };
    Ok((parts.clone(), outcome))
}

/// Replaces the singular values of `op` with `new_values` (matched to the
/// oracle's descending order) by fitting `f_{W′}(x) ≈ f_W(V S⁻¹ S′ Vᵀ x)`
/// over standard-basis probes.
///
/// Dense operators are rebuilt exactly. Structured operators are fitted by
/// conjugate-gradient least squares over their parameters; the remaining
/// Frobenius residual is returned and may be positive when no operator of
/// that structure has the requested spectrum.
pub fn graft_spectrum(op: &Operator, new_values: &[f64], max_iters: usize) -> Result<(Operator, f64)> {
    if matches!(op.linear_core(), Operator::Composition(_)) {
        return Err(Error::InvalidOperator(
            "graft_spectrum supports dense, conv and diagonal operators".into(),
        ));
    }
    let m = op.materialize()?;
    let spec = matrix_spectrum(&m)?;
    if new_values.len() != spec.values.len() {
        return Err(Error::ShapeMismatch {
            context: "graft_spectrum values",
            expected: spec.values.len(),
            got: new_values.len(),
        });
    }
    if new_values.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidConfig("grafted singular values must be nonnegative".into()));
    }
    let scale = spec.top().max(f64::MIN_POSITIVE);
    let mut ratios = Vec::with_capacity(new_values.len());
    for (i, (&s, &t)) in spec.values.iter().zip(new_values).enumerate() {
        if s <= 1e-12 * scale {
            if (t - s).abs() > 1e-12 * scale {
                return Err(Error::IllPosedGraft { index: i, target: t });
            }
            ratios.push(1.0);
        } else {
            ratios.push(t / s);
        }
    }
    // target = M V diag(S'/S) Vᵀ
    let v = spec.vector_matrix();
    let d = DMatrix::from_diagonal(&DVector::from_vec(ratios));
    let target = &m * &v * d * v.transpose();

    if let Operator::Dense { rows, cols, .. } = op.linear_core() {
        let mut out = op.clone();
        let mut params = op.params();
        for r in 0..*rows {
            for c in 0..*cols {
                params[r * cols + c] = target[(r, c)];
            }
        }
        out.set_params(&params)?;
        let residual = (out.materialize()? - &target).norm();
        return Ok((out, residual));
    }

    let mut out = op.clone();
    let cols = op.in_dim();
    let probes: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();
    let residuals = |o: &Operator| -> Result<Vec<Vec<f64>>> {
        probes
            .iter()
            .enumerate()
            .map(|(j, e)| {
                let y = o.apply_linear(e)?;
                Ok(y.iter().enumerate().map(|(i, a)| a - target[(i, j)]).collect())
            })
            .collect()
    };
    let gradient = |o: &Operator, res: &[Vec<f64>]| -> Result<Vec<f64>> {
        let mut g = vec![0.0; o.num_params()];
        for (e, r) in probes.iter().zip(res) {
            for (gi, d) in g.iter_mut().zip(o.linear_param_grad(e, r)?) {
                *gi += d;
            }
        }
        Ok(g)
    };
    let jvp = |o: &Operator, dir: &[f64]| -> Result<Vec<Vec<f64>>> {
        probes.iter().map(|e| o.linear_param_jvp(e, dir)).collect()
    };

    // CGLS on the linear least-squares problem in the parameters.
    let mut res = residuals(&out)?;
    let mut g = gradient(&out, &res)?;
    let mut dir: Vec<f64> = g.iter().map(|x| -x).collect();
    let mut gg = dot(&g, &g);
    let tol = 1e-28 * (1.0 + target.norm_squared());
    for _ in 0..max_iters {
        if gg <= tol {
            break;
        }
        let jd = jvp(&out, &dir)?;
        let jj: f64 = jd.iter().map(|c| dot(c, c)).sum();
        if jj == 0.0 {
            break;
        }
        let alpha = gg / jj;
        let params: Vec<f64> = out.params().iter().zip(&dir).map(|(p, d)| p + alpha * d).collect();
        out.set_params(&params)?;
        for (r, c) in res.iter_mut().zip(&jd) {
            for (ri, ci) in r.iter_mut().zip(c) {
                *ri += alpha * ci;
            }
        }
        let g_new = gradient(&out, &res)?;
        let gg_new = dot(&g_new, &g_new);
        let beta = gg_new / gg;
        dir = dir.iter().zip(&g_new).map(|(d, gn)| -gn + beta * d).collect();
        g = g_new;
        gg = gg_new;
    }
    let _ = g;
    let residual = residuals(&out)?.iter().map(|r| dot(r, r)).sum::<f64>().sqrt();
    Ok((out, residual))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastClipConfig {
    pub clip_every: usize,
    pub per_step_powerqr_iters: usize,
    pub clip_inner: usize,
    pub clip_restart: usize,
    /// While-loop iterations per periodic clip.
    pub clip_while: usize,
    pub learning_rate: f64,
    /// PowerQR iterations used to initialize the tracked vectors.
    pub warmup_iters: usize,
}

impl Default for FastClipConfig {
    fn default() -> Self {
        FastClipConfig {
            clip_every: 100,
            per_step_powerqr_iters: 1,
            clip_inner: 1,
            clip_restart: 10,
            clip_while: 1,
            learning_rate: 1.0,
            warmup_iters: 100,
        }
    }
}

impl FastClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_every == 0 || self.clip_inner == 0 || self.clip_restart == 0 || self.clip_while == 0 {
            return Err(Error::InvalidConfig(
                "fastclip intervals and iteration counts must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidConfig("fastclip learning rate must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-layer `(σ₁, v₁)` tracker driven by warm-started PowerQR.
#[derive(Clone, Debug)]
pub struct Tracker {
    pub layer: usize,
    pub target: f64,
    pub spectrum: Spectrum,
}

impl Tracker {
    pub fn start(net: &TinyNet, layer: usize, target: f64, iters: usize, seed: u64) -> Result<Self> {
        let pq = PowerQrConfig::new(1, iters.max(1));
        let spectrum = power_qr(&net.layers[layer].op, &pq, seed)?;
        Ok(Tracker { layer, target, spectrum })
    }

    /// Runs `iters` warm-started PowerQR iterations on the layer's current weights.
    pub fn refresh(&mut self, net: &TinyNet, iters: usize) -> Result<()> {
        if iters == 0 {
            return Ok(());
        }
        let pq = PowerQrConfig::new(self.spectrum.vectors.len().max(1), iters)
            .with_tol(0.0)
            .warm(self.spectrum.vectors.clone());
        self.spectrum = power_qr(&net.layers[self.layer].op, &pq, 0)?;
        Ok(())
    }
}

/// Resolves `layer name → target` into tracked layer indices, rejecting unknown names.
pub fn resolve_targets(net: &TinyNet, targets: &BTreeMap<String, f64>) -> Result<Vec<(usize, f64)>> {
    targets
        .iter()
        .map(|(name, &c)| {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("clip target for layer {name} must be positive")));
            }
            net.layer_index(name)
                .map(|i| (i, c))
                .ok_or_else(|| Error::InvalidConfig(format!("unknown layer {name}")))
        })
        .collect()
}

/// Creates a training hook that tracks and periodically clips the given layers.
pub fn fastclip_hook(
    net: &TinyNet,
    targets: &[(usize, f64)],
    fc: &FastClipConfig,
    seed: u64,
) -> Result<impl FnMut(&mut TinyNet, usize) -> Result<()>> {
    fc.validate()?;
    let mut trackers: Vec<Tracker> = targets
        .iter()
        .enumerate()
        .map(|(i, &(layer, c))| Tracker::start(net, layer, c, fc.warmup_iters, sub_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    let fc = fc.clone();
    let mut clip_calls = 0u64;
    Ok(move |net: &mut TinyNet, step: usize| -> Result<()> {
        for t in trackers.iter_mut() {
            t.refresh(net, fc.per_step_powerqr_iters)?;
        }
        if step % fc.clip_every != 0 {
            return Ok(());
        }
        for (i, t) in trackers.iter_mut().enumerate() {
            let cfg = ClipConfig {
                target: t.target,
                inner_iters: fc.clip_inner,
                learning_rate: fc.learning_rate,
                restart_iters: fc.clip_restart,
                restart_tol: 0.0,
                restart_block: 1,
                max_while_iters: fc.clip_while,
            };
            clip_calls += 1;
            let call_seed = sub_seed(seed, 1 << 32 | (clip_calls << 8) | i as u64);
            for round in 0..fc.clip_while {
                let out = clip_once(&net.layers[t.layer].op, &cfg, t.spectrum.clone(), call_seed ^ round as u64)?;
                let done = out.iterations == 0;
                net.layers[t.layer].op = out.operator;
                t.spectrum = out.spectrum;
                if done {
                    break;
                }
            }
        }
        Ok(())
    })
}

/// Exactly one while-iteration of [`clip_from`], returning the partially clipped operator.
fn clip_once(op: &Operator, cfg: &ClipConfig, start: Spectrum, seed: u64) -> Result<ClipOutcome> {
    let sigma_before = start.top();
    if sigma_before <= cfg.target + CLIP_SLACK {
        return Ok(ClipOutcome {
            operator: op.clone(),
            spectrum: start,
            sigma_before,
            iterations: 0,
        });
    }
    let mut current = op.clone();
    let v = &start.vectors[0];
    let scale = cfg.target / sigma_before;
    let target: Vec<f64> = current.apply_linear(v)?.iter().map(|y| y * scale).collect();
    shrink_direction(&mut current, v, &target, cfg)?;
    let spectrum = top_pair(&current, cfg, sub_seed(seed, 1))?;
    Ok(ClipOutcome {
        operator: current,
        spectrum,
        sigma_before,
        iterations: 1,
    })
}

/// SGD training with periodic spectral-norm clipping of the named layers.
pub fn fastclip_train(
    net: &TinyNet,
    data: &LabeledDataset,
    layer_targets: &BTreeMap<String, f64>,
    train_cfg: &TrainConfig,
    fc: &FastClipConfig,
    seed: u64,
) -> Result<TrainReport> {
    let targets = resolve_targets(net, layer_targets)?;
    for &(i, _) in &targets {
        if net.layers[i].op.num_params() == 0 {
            warn!("layer {} has no trainable parameters", net.layers[i].name);
        }
    }
    let samples = data.train_samples();
    if targets.is_empty() {
        return train_samples(net, &samples, train_cfg, &mut |_, _| Ok(()));
    }
    let mut hook = fastclip_hook(net, &targets, fc, seed)?;
    train_samples(net, &samples, train_cfg, &mut hook)
}

/// Product of the layers' oracle spectral norms: an upper bound on the
/// network's input-Lipschitz constant (activations and softmax are 1-Lipschitz).
pub fn lipschitz_upper_bound(net: &TinyNet) -> Result<f64> {
    net.layers
        .iter()
        .map(|l| crate::spectral::oracle_norm(&l.op))
        .try_fold(1.0, |acc, s| s.map(|s| acc * s))
}
