//! Closed-form circular-convolution spectra against the oracle, the duplicate
//! structure, the norm bounds, and the cross-filter orthogonality bound.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use specshape::circulant::{
    circulant_spectrum_sorted, duplicate_structure, ortho_bound_check, orthogonalize_step, spectral_norm_bounds,
    ChannelLayout, FilterBank,
};
use specshape::rng::{derive, gaussian_vec};
use specshape::spectral::svd_oracle;
use specshape::{Operator, Padding};

use super::{ensure, Outcome};
use crate::config::Scenario;
use crate::error::Result;
use crate::report::{PassRule, Section};

pub const COLUMNS: &[&str] = &[
    "instances",
    "max_abs_err",
    "duplicate_failures",
    "bound_failures",
    "equality_failures",
    "ortho_instances",
    "ortho_failures",
    "ortho_min_slack",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CirculantParams {
    /// Random filter banks per seed.
    pub instances: usize,
    pub max_n: usize,
    pub max_kernel: usize,
    pub max_filters: usize,
    /// Fraction of banks drawn with all-nonnegative taps (where the bounds are tight).
    pub nonneg_fraction: f64,
    pub tol: f64,
    /// Single-filter pairs for the orthogonality bound.
    pub ortho_instances: usize,
}

impl Default for CirculantParams {
    fn default() -> Self {
        CirculantParams {
            instances: 50,
            max_n: 64,
            max_kernel: 7,
            max_filters: 4,
            nonneg_fraction: 0.25,
            tol: 1e-8,
            ortho_instances: 10,
        }
    }
}

impl CirculantParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.max_n >= 2, "params.max_n", "max_n must be at least 2")?;
        ensure(self.max_kernel >= 1, "params.max_kernel", "max_kernel must be positive")?;
        ensure(self.max_filters >= 1, "params.max_filters", "max_filters must be positive")?;
        ensure(
            (0.0..=1.0).contains(&self.nonneg_fraction),
            "params.nonneg_fraction",
            "nonneg_fraction must lie in [0, 1]",
        )
    }
}

pub fn run(p: &CirculantParams, seed: u64) -> Result<Outcome> {
    let mut rng = derive(seed, 3);
    let mut worst: f64 = 0.0;
    let (mut dup_fail, mut bound_fail, mut eq_fail) = (0, 0, 0);
    let mut failures = Vec::new();
    for i in 0..p.instances {
        let n = rng.random_range(2..=p.max_n);
        let k = rng.random_range(1..=p.max_kernel.min(n));
        let m = rng.random_range(1..=p.max_filters);
        let nonneg = rng.random_bool(p.nonneg_fraction);
        let filters: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                gaussian_vec(&mut rng, k)
                    .into_iter()
                    .map(|v| if nonneg { v.abs() } else { v })
                    .collect()
            })
            .collect();
        let fb = FilterBank::new(filters, n)?;
        let closed = circulant_spectrum_sorted(&fb);
        let oracle = svd_oracle(&fb.to_operator(ChannelLayout::FanOut)?)?.values;
        let err = closed.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        let dup = duplicate_structure(&fb);
        let dup_ok = dup.singletons <= 2 && dup.conjugates_match;
        let (lo, hi) = spectral_norm_bounds(&fb);
        let scale = 1e-9 * (1.0 + hi);
        let bound_ok = lo <= closed[0] + scale && closed[0] <= hi + scale;
        let eq_ok = !nonneg || ((closed[0] - hi).abs() <= scale && (closed[0] - lo).abs() <= scale);
        dup_fail += usize::from(!dup_ok);
        bound_fail += usize::from(!bound_ok);
        eq_fail += usize::from(!eq_ok);
        if err > p.tol || !dup_ok || !bound_ok || !eq_ok {
            failures.push(json!({ "instance": i, "filters": fb.filters, "n": n, "err": err }));
        }
    }

    let mut ortho_fail = 0;
    let mut min_slack = f64::INFINITY;
    for _ in 0..p.ortho_instances {
        let n = rng.random_range(8..=32);
        let k = rng.random_range(2..=5);
        let fa = gaussian_vec(&mut rng, k);
        let fb = gaussian_vec(&mut rng, k);
        let b = Operator::conv1d(1, 1, n, k, 1, Padding::Circular, fb)?;
        let v1 = svd_oracle(&b)?.vectors[0].clone();
        let fa = orthogonalize_step(&fa, &v1)?;
        let a = Operator::conv1d(1, 1, n, k, 1, Padding::Circular, fa)?;
        let eps = specshape::linop::norm(&a.apply_linear(&v1)?);
        let report = ortho_bound_check(&a, &b, eps)?;
        ortho_fail += usize::from(!report.all_hold);
        min_slack = min_slack.min(report.min_slack);
    }

    let passed = worst <= p.tol && dup_fail + bound_fail + eq_fail + ortho_fail == 0;
    Ok(Outcome::new(passed)
        .metric("instances", p.instances as f64)
        .metric("max_abs_err", worst)
        .metric("duplicate_failures", dup_fail as f64)
        .metric("bound_failures", bound_fail as f64)
        .metric("equality_failures", eq_fail as f64)
        .metric("ortho_instances", p.ortho_instances as f64)
        .metric("ortho_failures", ortho_fail as f64)
        .maybe("ortho_min_slack", (p.ortho_instances > 0).then_some(min_slack))
        .detail(json!({ "failures": failures })))
}

pub fn section(p: &CirculantParams, seeds: &[u64]) -> Section {
    super::section(Scenario::CirculantVerify, COLUMNS, PassRule::AllSeeds, seeds, |s| run(p, s))
}
