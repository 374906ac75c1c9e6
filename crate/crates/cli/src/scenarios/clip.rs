//! Clipping in isolation: the dense projection law, idempotence, and conv
//! landing accuracy across every padding/stride combination.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use specshape::clipper::{clip_spectral_norm, ClipConfig};
use specshape::rng::{derive, gaussian_vec, sub_seed};
use specshape::spectral::{oracle_norm, svd_oracle};
use specshape::Operator;

use super::random_ops::PADDINGS;
use super::{ensure, Outcome};
use crate::config::Scenario;
use crate::error::Result;
use crate::report::{PassRule, Section};

pub const COLUMNS: &[&str] = &[
    "dense_cases",
    "law_max_err",
    "idempotence_max_change",
    "conv_cases",
    "conv_max_dev",
    "conv_trailing_raised",
    "job_sigma_before",
    "job_sigma_after",
    "job_iterations",
];

/// A single explicit clip request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipJob {
    pub operator: Operator,
    pub target: f64,
    /// Defaults to the dense or conv preset for the operator kind.
    #[serde(default)]
    pub config: Option<ClipConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipParams {
    /// Random dense operators per seed.
    pub dense_instances: usize,
    pub dense_max_dim: usize,
    /// Random convolutions per (dimension, padding, stride) combination and seed.
    pub conv_instances: usize,
    pub conv_strides: Vec<usize>,
    /// Targets are drawn as `fraction · σ₁` with `fraction` uniform in this range.
    pub target_fraction: (f64, f64),
    pub law_tol: f64,
    pub idempotence_tol: f64,
    pub conv_tol: f64,
    pub job: Option<ClipJob>,
}

impl Default for ClipParams {
    fn default() -> Self {
        ClipParams {
            dense_instances: 10,
            dense_max_dim: 12,
            conv_instances: 1,
            conv_strides: vec![1, 2],
            target_fraction: (0.3, 0.9),
            law_tol: 1e-6,
            idempotence_tol: 1e-8,
            conv_tol: 1e-3,
            job: None,
        }
    }
}

impl ClipParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.dense_max_dim >= 1, "params.dense_max_dim", "dense_max_dim must be positive")?;
        ensure(self.conv_strides.iter().all(|&s| s >= 1), "params.conv_strides", "strides must be positive")?;
        let (lo, hi) = self.target_fraction;
        ensure(
            lo > 0.0 && lo <= hi && hi < 1.0,
            "params.target_fraction",
            "target fractions must satisfy 0 < lo <= hi < 1",
        )?;
        if let Some(job) = &self.job {
            job.operator.validate()?;
            ensure(job.target > 0.0, "params.job.target", "target must be positive")?;
            if let Some(c) = &job.config {
                c.validate()?;
            }
        }
        Ok(())
    }
}

struct Tally {
    worst: f64,
    cases: usize,
}

impl Tally {
    fn new() -> Self {
        Tally { worst: 0.0, cases: 0 }
    }

    fn add(&mut self, v: f64) {
        self.worst = self.worst.max(v);
        self.cases += 1;
    }
}

pub fn run(p: &ClipParams, seed: u64) -> Result<Outcome> {
    let mut rng = derive(seed, 2);
    let (lo, hi) = p.target_fraction;
    let mut law = Tally::new();
    let mut idem: f64 = 0.0;
    for i in 0..p.dense_instances {
        let r = rng.random_range(1..=p.dense_max_dim);
        let c = rng.random_range(1..=p.dense_max_dim);
        let op = Operator::dense(r, c, gaussian_vec(&mut rng, r * c))?;
        let before = svd_oracle(&op)?.values;
        let target = rng.random_range(lo..=hi) * before[0];
        let out = clip_spectral_norm(&op, &ClipConfig::dense(target), sub_seed(seed, i as u64))?;
        let after = svd_oracle(&out.operator)?.values;
        let err = after.iter().zip(&before).map(|(a, b)| (a - b.min(target)).abs()).fold(0.0, f64::max);
        law.add(err);
        let again = clip_spectral_norm(&out.operator, &ClipConfig::dense(target), sub_seed(seed, 1 << 20 | i as u64))?;
        let change = out
            .operator
            .params()
            .iter()
            .zip(again.operator.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        idem = idem.max(change);
    }

    let mut conv = Tally::new();
    let mut raised = 0;
    let mut conv_detail = Vec::new();
    for two_d in [false, true] {
        for &pad in &PADDINGS {
            for &stride in &p.conv_strides {
                for _ in 0..p.conv_instances {
                    let cin = rng.random_range(1..=2);
                    let cout = rng.random_range(1..=3);
                    let op = if two_d {
                        let side = rng.random_range(4..=6);
                        Operator::conv2d(cin, cout, (side, side), (3, 3), (stride, stride), pad, gaussian_vec(&mut rng, cout * cin * 9))?
                    } else {
                        let len = rng.random_range(6..=12);
                        Operator::conv1d(cin, cout, len, 3, stride, pad, gaussian_vec(&mut rng, cout * cin * 3))?
                    };
                    let before = svd_oracle(&op)?.values;
                    let target = rng.random_range(lo..=hi) * before[0];
                    let out = clip_spectral_norm(&op, &ClipConfig::conv(target), sub_seed(seed, 1 << 30 | conv.cases as u64))?;
                    let after = svd_oracle(&out.operator)?.values;
                    let dev = (after[0] - target).abs();
                    conv.add(dev);
                    if after.iter().zip(&before).skip(1).any(|(a, b)| *a > b + 1e-6) {
                        raised += 1;
                    }
                    conv_detail.push(json!({
                        "dims": if two_d { 2 } else { 1 },
                        "padding": pad,
                        "stride": stride,
                        "target": target,
                        "sigma_before": before[0],
                        "sigma_after": after[0],
                        "iterations": out.iterations,
                    }));
                }
            }
        }
    }

    let mut outcome_job = (None, None, None, true, serde_json::Value::Null);
    if let Some(job) = &p.job {
        let cfg = job
            .config
            .clone()
            .map(|c| ClipConfig { target: job.target, ..c })
            .unwrap_or_else(|| ClipConfig::for_operator(&job.operator, job.target));
        let out = clip_spectral_norm(&job.operator, &cfg, seed)?;
        let after = oracle_norm(&out.operator).unwrap_or_else(|_| out.spectrum.top());
        outcome_job = (
            Some(out.sigma_before),
            Some(after),
            Some(out.iterations as f64),
            after <= job.target + p.conv_tol,
            json!({ "operator": out.operator }),
        );
    }

    let passed = law.worst <= p.law_tol && idem <= p.idempotence_tol && conv.worst <= p.conv_tol && outcome_job.3;
    Ok(Outcome::new(passed)
        .metric("dense_cases", law.cases as f64)
        .metric("law_max_err", law.worst)
        .metric("idempotence_max_change", idem)
        .metric("conv_cases", conv.cases as f64)
        .metric("conv_max_dev", conv.worst)
        .metric("conv_trailing_raised", raised as f64)
        .maybe("job_sigma_before", outcome_job.0)
        .maybe("job_sigma_after", outcome_job.1)
        .maybe("job_iterations", outcome_job.2)
        .detail(json!({ "conv": conv_detail, "job": outcome_job.4 })))
}

pub fn section(p: &ClipParams, seeds: &[u64]) -> Section {
    super::section(Scenario::Clip, COLUMNS, PassRule::AllSeeds, seeds, |s| run(p, s))
}
