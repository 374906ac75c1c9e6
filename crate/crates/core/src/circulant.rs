//! Closed-form spectra of circular-padding convolutions.
//!
//! A single-channel circular convolution of length `n` is a circulant matrix;
//! its Gram matrix is circulant with first row built from the filter's
//! autocorrelations `c_i = Σ_t f_t f_{t+i}`, so every eigenvalue is a real
//! cosine sum `c_0 + 2 Σ_i c_i cos(2π j i / n)`. Stacking channels (one input
//! and many outputs, or the transpose) adds the Gram matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::{Operator, Padding};
use crate::spectral::svd_oracle;

/// Values closer than this are treated as equal when counting duplicates.
pub const GROUP_TOL: f64 = 1e-9;

/// Per-channel filters of a circular convolution on inputs of length `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub filters: Vec<Vec<f64>>,
    pub n: usize,
}

/// Which side of the convolution carries the channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelLayout {
    /// One input channel fanned out to `m` outputs.
    FanOut,
    /// `m` input channels summed into one output.
    FanIn,
}

impl FilterBank {
    pub fn new(filters: Vec<Vec<f64>>, n: usize) -> Result<Self> {
        let fb = FilterBank { filters, n };
        fb.validate()?;
        Ok(fb)
    }

    pub fn single(filter: Vec<f64>, n: usize) -> Result<Self> {
        Self::new(vec![filter], n)
    }

    pub fn kernel(&self) -> usize {
        self.filters[0].len()
    }

    pub fn channels(&self) -> usize {
        self.filters.len()
    }

    fn validate(&self) -> Result<()> {
        let Some(first) = self.filters.first() else {
            return Err(Error::InvalidConfig("filter bank needs at least one channel".into()));
        };
        let k = first.len();
        if k == 0 || k > self.n {
            return Err(Error::InvalidConfig(format!(
                "kernel length {k} must lie in 1..={}",
                self.n
            )));
        }
        if self.filters.iter().any(|f| f.len() != k) {
            return Err(Error::InvalidConfig("all channel filters must share one length".into()));
        }
        if self.filters.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("filter bank"));
        }
        Ok(())
    }

    /// The convolution this bank describes, for oracle comparisons.
    pub fn to_operator(&self, layout: ChannelLayout) -> Result<Operator> {
        let m = self.channels();
        let weight: Vec<f64> = self.filters.iter().flatten().copied().collect();
        let (cin, cout) = match layout {
            ChannelLayout::FanOut => (1, m),
            ChannelLayout::FanIn => (m, 1),
        };
        Operator::conv1d(cin, cout, self.n, self.kernel(), 1, Padding::Circular, weight)
    }
}

/// `c_i = Σ_t f_t f_{t+i}` for `i = 0..k`.
pub fn autocorrelation(f: &[f64]) -> Vec<f64> {
    (0..f.len())
        .map(|i| f.iter().zip(&f[i..]).map(|(a, b)| a * b).sum())
        .collect()
}

/// Squared singular values indexed by the root of unity `ω^j`, `j = 0..n`.
pub fn squared_values_by_root(fb: &FilterBank) -> Vec<f64> {
    let n = fb.n;
    let k = fb.kernel();
    let mut c = vec![0.0; k];
    for f in &fb.filters {
        for (acc, v) in c.iter_mut().zip(autocorrelation(f)) {
            *acc += v;
        }
    }
    // cos(2π r / n) for r = (j·i) mod n
    let cos_table: Vec<f64> = (0..n)
        .map(|r| (2.0 * std::f64::consts::PI * r as f64 / n as f64).cos())
        .collect();
    (0..n)
        .map(|j| {
            let tail: f64 = (1..k).map(|i| c[i] * cos_table[(j * i) % n]).sum();
            (c[0] + 2.0 * tail).max(0.0)
        })
        .collect()
}

/// All `n` singular values, in root-index order `j = 0..n` (not sorted).
pub fn circulant_spectrum(fb: &FilterBank) -> Vec<f64> {
    squared_values_by_root(fb).into_iter().map(f64::sqrt).collect()
}

/// [`circulant_spectrum`] sorted descending.
pub fn circulant_spectrum_sorted(fb: &FilterBank) -> Vec<f64> {
    let mut s = circulant_spectrum(fb);
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// `(√Σ_l (Σ_i f_i)², √Σ_l (Σ_i |f_i|)²)`, which sandwich the spectral norm.
pub fn spectral_norm_bounds(fb: &FilterBank) -> (f64, f64) {
    let lower = fb.filters.iter().map(|f| f.iter().sum::<f64>().powi(2)).sum::<f64>();
    let upper = fb
        .filters
        .iter()
        .map(|f| f.iter().map(|v| v.abs()).sum::<f64>().powi(2))
        .sum::<f64>();
    (lower.sqrt(), upper.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuplicateReport {
    /// Values with no other value within [`GROUP_TOL`].
    pub singletons: usize,
    /// Every value from a non-real root matches its conjugate root's value.
    pub conjugates_match: bool,
}

pub fn duplicate_structure(fb: &FilterBank) -> DuplicateReport {
    let n = fb.n;
    let values = circulant_spectrum(fb);
    let conjugates_match = (1..n).all(|j| (values[j] - values[n - j]).abs() <= GROUP_TOL);
    let mut sorted = values;
    sorted.sort_by(f64::total_cmp);
    let mut singletons = 0;
    let mut start = 0;
    for i in 1..=sorted.len() {
        if i == sorted.len() || sorted[i] - sorted[i - 1] > GROUP_TOL {
            if i - start == 1 {
                singletons += 1;
            }
            start = i;
        }
    }
    DuplicateReport {
        singletons,
        conjugates_match,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoRow {
    pub p: usize,
    pub norm: f64,
    pub bound: f64,
    pub slack: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoReport {
    pub first_norm: f64,
    pub rows: Vec<OrthoRow>,
    pub min_slack: f64,
    pub max_slack: f64,
    pub all_hold: bool,
}

fn single_channel_filter(op: &Operator, which: &str) -> Result<(Vec<f64>, usize)> {
    match op {
        Operator::Conv(c)
            if c.spatial.len() == 1
                && c.in_channels == 1
                && c.out_channels == 1
                && c.stride == [1]
                && c.padding == Padding::Circular =>
        {
            Ok((c.weight.clone(), c.spatial[0]))
        }
        _ => Err(Error::InvalidOperator(format!(
            "{which} must be a single-channel, stride-1 circular conv1d"
        ))),
    }
}

/// Checks `‖A v_p'‖ ≤ sqrt(eps² + π‖f‖² T² p / n)` for every right singular
/// vector `v_p'` of `B`, given that `‖A v_1'‖ ≤ eps`.
pub fn ortho_bound_check(a: &Operator, b: &Operator, eps: f64) -> Result<OrthoReport> {
    let (f, n) = single_channel_filter(a, "A")?;
    let (_, nb) = single_channel_filter(b, "B")?;
    if n != nb {
        return Err(Error::InvalidOperator(format!(
            "A and B act on different lengths ({n} vs {nb})"
        )));
    }
    let t = f.len() as f64;
    let f_sq: f64 = f.iter().map(|v| v * v).sum();
    let vs = svd_oracle(b)?.vectors;
    let norms: Vec<f64> = vs
        .iter()
        .map(|v| a.apply_linear(v).map(|y| crate::linop::norm(&y)))
        .collect::<Result<_>>()?;
    let first_norm = norms[0];
    if first_norm > eps {
        return Err(Error::Precondition(format!(
            "‖A v_1'‖ = {first_norm:e} exceeds eps = {eps:e}"
        )));
    }
    let rows: Vec<OrthoRow> = norms
        .iter()
        .enumerate()
        .map(|(i, &norm)| {
            let p = i + 1;
            let bound = (eps * eps + std::f64::consts::PI * f_sq * t * t * p as f64 / n as f64).sqrt();
            OrthoRow {
                p,
                norm,
                bound,
                slack: bound - norm,
                holds: norm <= bound,
            }
        })
        .collect();
    let min_slack = rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
    let max_slack = rows.iter().map(|r| r.slack).fold(f64::NEG_INFINITY, f64::max);
    Ok(OrthoReport {
        first_norm,
        all_hold: rows.iter().all(|r| r.holds),
        rows,
        min_slack,
        max_slack,
    })
}

/// One projected-gradient step of `½‖A v‖²` in filter space, with step
/// `1/‖L‖²` where `L` maps the filter to `A v`. Returns the new filter.
///
/// Used as the orthogonalization harness for [`ortho_bound_check`].
pub fn orthogonalize_step(filter: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let n = v.len();
    let k = filter.len();
    let a = Operator::conv1d(1, 1, n, k, 1, Padding::Circular, filter.to_vec())?;
    let y = a.apply_linear(v)?;
    let grad = a.linear_param_grad(v, &y)?;
    // L has columns `∂(A v)/∂f_t`; its spectral norm sets the step.
    let columns: Vec<Vec<f64>> = (0..k)
        .map(|t| {
            let mut e = vec![0.0; k];
            e[t] = 1.0;
            a.linear_param_jvp(v, &e)
        })
        .collect::<Result<_>>()?;
    let l = nalgebra::DMatrix::from_fn(n, k, |i, j| columns[j][i]);
    let l_norm = crate::spectral::matrix_singular_values(&l)?[0];
    if l_norm == 0.0 {
        return Ok(filter.to_vec());
    }
    Ok(filter
        .iter()
        .zip(&grad)
        .map(|(f, g)| f - g / (l_norm * l_norm))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, seeded};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn unit_filter_is_identity() {
        let fb = FilterBank::single(vec![1.0], 4).unwrap();
        assert!(close(&circulant_spectrum(&fb), &[1.0; 4], 1e-15));
    }

    #[test]
    fn nonnegative_filter_peaks_at_its_sum() {
        let fb = FilterBank::single(vec![1.0, 2.0, 1.0], 8).unwrap();
        let s = circulant_spectrum_sorted(&fb);
        assert!((s[0] - 4.0).abs() < 1e-12);
        let (lo, hi) = spectral_norm_bounds(&fb);
        assert!((lo - 4.0).abs() < 1e-12 && (hi - 4.0).abs() < 1e-12);
    }

    #[test]
    fn two_channel_matches_oracle() {
        let mut rng = seeded(21);
        let fb = FilterBank::new(vec![gaussian_vec(&mut rng, 3), gaussian_vec(&mut rng, 3)], 16).unwrap();
        let closed = circulant_spectrum_sorted(&fb);
        for layout in [ChannelLayout::FanOut, ChannelLayout::FanIn] {
            let oracle = svd_oracle(&fb.to_operator(layout).unwrap()).unwrap().values;
            assert!(close(&closed, &oracle, 1e-8), "{layout:?}");
        }
    }

    #[test]
    fn difference_filter_bounds() {
        // For even n the root -1 reaches the upper bound; for odd n it is strictly inside.
        let fb = FilterBank::single(vec![1.0, -1.0], 8).unwrap();
        let (lo, hi) = spectral_norm_bounds(&fb);
        assert_eq!((lo, hi), (0.0, 2.0));
        assert!((circulant_spectrum_sorted(&fb)[0] - 2.0).abs() < 1e-12);

        let fb = FilterBank::single(vec![1.0, -1.0], 7).unwrap();
        let s1 = circulant_spectrum_sorted(&fb)[0];
        assert!(s1 > 0.0 && s1 < 2.0 - 1e-3);
    }

    #[test]
    fn duplicate_counts() {
        let mut rng = seeded(4);
        for n in [7, 8] {
            let fb = FilterBank::single(gaussian_vec(&mut rng, 3), n).unwrap();
            let d = duplicate_structure(&fb);
            assert!(d.conjugates_match);
            assert!(d.singletons <= 2, "n={n}: {d:?}");
        }
        let fb = FilterBank::single(vec![2.5], 6).unwrap();
        assert_eq!(duplicate_structure(&fb).singletons, 0);
    }

    #[test]
    fn ortho_zero_filter_has_full_slack() {
        let mut rng = seeded(8);
        let a = Operator::conv1d(1, 1, 16, 3, 1, Padding::Circular, vec![0.0; 3]).unwrap();
        let b = Operator::conv1d(1, 1, 16, 3, 1, Padding::Circular, gaussian_vec(&mut rng, 3)).unwrap();
        let r = ortho_bound_check(&a, &b, 0.1).unwrap();
        assert!(r.all_hold);
        assert!(r.rows.iter().all(|row| row.norm == 0.0));
    }

    #[test]
    fn ortho_self_pairing_fails_precondition() {
        let mut rng = seeded(9);
        let a = Operator::conv1d(1, 1, 16, 3, 1, Padding::Circular, gaussian_vec(&mut rng, 3)).unwrap();
        let err = ortho_bound_check(&a, &a, 0.01).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn rejects_oversized_kernel() {
        assert!(FilterBank::single(vec![1.0; 5], 4).is_err());
        assert!(FilterBank::new(vec![], 4).is_err());
    }
}
