//! PowerQR against the dense oracle on random operators, plus adjoint probes.

use serde::{Deserialize, Serialize};
use serde_json::json;
use specshape::linop::{dot, norm};
use specshape::rng::{derive, gaussian_vec, sub_seed};
use specshape::spectral::{power_qr, ritz_top, svd_oracle, PowerQrConfig, Spectrum};
use specshape::Operator;

use super::random_ops::{random_operator, OpKind};
use super::{ensure, Outcome};
use crate::config::Scenario;
use crate::error::Result;
use crate::report::{PassRule, Section};

pub const COLUMNS: &[&str] = &[
    "instances",
    "max_rel_err",
    "unconverged",
    "mean_iterations",
    "adjoint_max_err",
    "op_sigma1",
    "op_rel_err",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumParams {
    /// Random operators per seed, cycling through `kinds`.
    pub instances: usize,
    pub kinds: Vec<OpKind>,
    pub max_dim: usize,
    pub k: usize,
    /// Extra block columns carried along to separate clustered values. When
    /// positive, values are read by Rayleigh–Ritz over the whole block rather
    /// than off the QR diagonal (whose leading columns ignore the extras).
    pub oversample: usize,
    pub iterations: usize,
    pub tol: f64,
    pub shift: f64,
    pub rel_tol: f64,
    /// Adjoint probes per kind.
    pub probes: usize,
    pub adjoint_tol: f64,
    /// Optional extra operator analyzed with the same settings.
    pub operator: Option<Operator>,
}

impl Default for SpectrumParams {
    fn default() -> Self {
        SpectrumParams {
            instances: 10,
            kinds: vec![OpKind::Dense, OpKind::Conv1d, OpKind::Conv2d],
            max_dim: 400,
            k: 5,
            oversample: 10,
            iterations: 20_000,
            tol: 1e-13,
            shift: 1.0,
            rel_tol: 1e-6,
            probes: 100,
            adjoint_tol: 1e-10,
            operator: None,
        }
    }
}

impl SpectrumParams {
    pub fn validate(&self) -> Result<()> {
        ensure(!self.kinds.is_empty(), "params.kinds", "at least one operator kind is required")?;
        ensure(self.k >= 1, "params.k", "k must be positive")?;
        ensure(self.max_dim >= self.k, "params.max_dim", "max_dim must be at least k")?;
        ensure(self.iterations >= 1, "params.iterations", "iterations must be positive")?;
        ensure(self.shift >= 0.0, "params.shift", "shift must be nonnegative")?;
        if let Some(op) = &self.operator {
            op.validate()?;
        }
        Ok(())
    }

    /// Block of `k + oversample` columns, capped by the operator's rank bound.
    fn config(&self, op: &Operator) -> (usize, PowerQrConfig) {
        let cap = op.in_dim().min(op.out_dim());
        let k = self.k.min(cap);
        let block = (self.k + self.oversample).min(cap);
        let cfg = PowerQrConfig::new(block, self.iterations)
            .with_tol(self.tol)
            .with_shift(self.shift)
            .watching(k);
        (k, cfg)
    }

    fn solve(&self, op: &Operator, seed: u64) -> Result<(usize, Spectrum)> {
        let (k, cfg) = self.config(op);
        let s = if self.oversample > 0 { ritz_top(op, &cfg, seed)? } else { power_qr(op, &cfg, seed)? };
        Ok((k, s))
    }
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// `|⟨Ax, y⟩ − ⟨x, Aᵀy⟩| / (‖Ax‖‖y‖)` for random `x`, `y`.
pub fn adjoint_error(op: &Operator, seed: u64) -> Result<f64> {
    let mut rng = derive(seed, 0xad);
    let x = gaussian_vec(&mut rng, op.in_dim());
    let y = gaussian_vec(&mut rng, op.out_dim());
    let ax = op.apply_linear(&x)?;
    let aty = op.adjoint_apply(&y)?;
    let scale = norm(&ax) * norm(&y);
    let diff = (dot(&ax, &y) - dot(&x, &aty)).abs();
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

pub fn run(p: &SpectrumParams, seed: u64) -> Result<Outcome> {
    let mut rng = derive(seed, 1);
    let mut worst: f64 = 0.0;
    let mut unconverged = 0;
    let mut iterations = 0;
    let mut instances = Vec::new();
    for i in 0..p.instances {
        let kind = p.kinds[i % p.kinds.len()];
        let op = random_operator(kind, p.k, p.max_dim, &mut rng)?;
        let (k, s) = p.solve(&op, sub_seed(seed, i as u64))?;
        let oracle = svd_oracle(&op)?;
        let err = rel_err(&s.values[..k], &oracle.values[..k]);
        worst = worst.max(err);
        unconverged += usize::from(!s.converged);
        iterations += s.iterations;
        instances.push(json!({
            "kind": kind,
            "in_dim": op.in_dim(),
            "out_dim": op.out_dim(),
            "values": s.values[..k],
            "oracle": oracle.values[..k],
            "iterations": s.iterations,
            "converged": s.converged,
        }));
    }
    let mut adjoint: f64 = 0.0;
    for (j, &kind) in p.kinds.iter().enumerate() {
        let mut prng = derive(seed, 100 + j as u64);
        for q in 0..p.probes {
            let op = random_operator(kind, 1, p.max_dim, &mut prng)?;
            adjoint = adjoint.max(adjoint_error(&op, sub_seed(seed, (j * p.probes + q) as u64))?);
        }
    }
    let (mut op_sigma, mut op_err) = (None, None);
    if let Some(op) = &p.operator {
        let (k, s) = p.solve(op, seed)?;
        op_sigma = Some(s.top());
        if let Ok(oracle) = svd_oracle(op) {
            op_err = Some(rel_err(&s.values[..k], &oracle.values[..k]));
        }
    }
    let passed = worst <= p.rel_tol && adjoint <= p.adjoint_tol && op_err.is_none_or(|e| e <= p.rel_tol);
    Ok(Outcome::new(passed)
        .metric("instances", p.instances as f64)
        .metric("max_rel_err", worst)
        .metric("unconverged", unconverged as f64)
        .metric("mean_iterations", iterations as f64 / p.instances.max(1) as f64)
        .metric("adjoint_max_err", adjoint)
        .maybe("op_sigma1", op_sigma)
        .maybe("op_rel_err", op_err)
        .detail(json!({ "instances": instances })))
}

pub fn section(p: &SpectrumParams, seeds: &[u64]) -> Section {
    super::section(Scenario::Spectrum, COLUMNS, PassRule::AllSeeds, seeds, |s| run(p, s))
}
