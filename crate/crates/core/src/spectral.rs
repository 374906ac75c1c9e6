//! Shifted subspace iteration on `MᵀM + μI` and a dense SVD oracle.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::Operator;
use crate::rng::{gaussian_vec, seeded};

/// Relative pivot threshold for rank detection in [`qr_decompose`].
pub const PIVOT_TOL: f64 = 1e-14;

/// Singular values (descending) paired with right singular vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default = "yes")]
    pub converged: bool,
}

fn yes() -> bool {
    true
}

impl Spectrum {
    pub fn top(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    /// Right singular vectors as matrix columns.
    pub fn vector_matrix(&self) -> DMatrix<f64> {
        let n = self.vectors.first().map_or(0, Vec::len);
        DMatrix::from_fn(n, self.vectors.len(), |i, j| self.vectors[j][i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerQrConfig {
    pub k: usize,
    pub iterations: usize,
    pub shift: f64,
    #[serde(default)]
    pub warm_start: Option<Vec<Vec<f64>>>,
    pub tol: f64,
    /// The stopping rule looks only at this many leading values (default: all),
    /// so extra block columns can speed up convergence without being waited on.
    #[serde(default)]
    pub watch: Option<usize>,
}

impl Default for PowerQrConfig {
    fn default() -> Self {
        PowerQrConfig {
            k: 1,
            iterations: 100,
            shift: 1.0,
            warm_start: None,
            tol: 1e-9,
            watch: None,
        }
    }
}

impl PowerQrConfig {
    pub fn new(k: usize, iterations: usize) -> Self {
        PowerQrConfig {
            k,
            iterations,
            ..Self::default()
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    pub fn watching(mut self, leading: usize) -> Self {
        self.watch = Some(leading);
        self
    }

    pub fn warm(mut self, vectors: Vec<Vec<f64>>) -> Self {
        self.warm_start = Some(vectors);
        self
    }
}

/// Thin Householder QR of an `n x k` matrix (`k ≤ n`) with `diag(R) ≥ 0`.
pub fn qr_decompose(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, k) = x.shape();
    if k > n {
        return Err(Error::InvalidConfig(format!(
            "thin QR needs at least as many rows as columns, got {n}x{k}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("QR input"));
    }
    let scale = (0..k).map(|j| x.column(j).norm()).fold(0.0, f64::max);
    let mut a = x.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<f64> = (j..n).map(|i| a[(i, j)]).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if scale == 0.0 || norm <= PIVOT_TOL * scale {
            return Err(Error::RankDeficient {
                column: j,
                pivot: norm,
            });
        }
        let alpha = if col[0] >= 0.0 { -norm } else { norm };
        let mut v = col;
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            v.iter_mut().for_each(|t| *t /= vnorm);
            for c in j..k {
                let d: f64 = (j..n).map(|i| v[i - j] * a[(i, c)]).sum();
                for i in j..n {
                    a[(i, c)] -= 2.0 * d * v[i - j];
                }
            }
        }
        reflectors.push(v);
    }
    let mut r = DMatrix::zeros(k, k);
    for i in 0..k {
        for c in i..k {
            r[(i, c)] = a[(i, c)];
        }
    }
    let mut q = DMatrix::zeros(n, k);
    for j in 0..k {
        q[(j, j)] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        for c in 0..k {
            let d: f64 = (j..n).map(|i| v[i - j] * q[(i, c)]).sum();
            if d != 0.0 {
                for i in j..n {
                    q[(i, c)] -= 2.0 * d * v[i - j];
                }
            }
        }
    }
    for i in 0..k {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }
    Ok((q, r))
}

/// Applies `MᵀM` to every column of `x`.
fn gram_apply(op: &Operator, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for j in 0..x.ncols() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let z = op.adjoint_apply(&op.apply_linear(&col)?)?;
        out.column_mut(j).copy_from_slice(&z);
    }
    Ok(out)
}

/// Top-`k` singular values and right singular vectors of the linear part of
/// `op` by shifted subspace iteration.
pub fn power_qr(op: &Operator, cfg: &PowerQrConfig, seed: u64) -> Result<Spectrum> {
    let n = op.in_dim();
    let k = cfg.k;
    if k == 0 || k > n.min(op.out_dim()) {
        return Err(Error::InvalidConfig(format!(
            "subspace width k={k} must lie in 1..={}",
            n.min(op.out_dim())
        )));
    }
    if cfg.iterations == 0 || !(cfg.shift >= 0.0) {
        return Err(Error::InvalidConfig(
            "power_qr needs iterations >= 1 and shift >= 0".into(),
        ));
    }
    let start = match &cfg.warm_start {
        Some(vs) => {
            if vs.len() != k || vs.iter().any(|v| v.len() != n) {
                return Err(Error::InvalidConfig(format!(
                    "warm start must hold {k} vectors of length {n}"
                )));
            }
            DMatrix::from_fn(n, k, |i, j| vs[j][i])
        }
        None => {
            let mut rng = seeded(seed);
            DMatrix::from_column_slice(n, k, &gaussian_vec(&mut rng, n * k))
        }
    };
    let (mut x, _) = qr_decompose(&start)?;

    // Rayleigh quotients of the starting block serve as the previous estimate.
    let mut prev: Vec<f64> = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let y = op.apply_linear(&col)?;
        prev.push(y.iter().map(|v| v * v).sum::<f64>() + cfg.shift);
    }

    let mut diag = prev.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.iterations {
        let z = gram_apply(op, &x)? + &x * cfg.shift;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("power_qr iterate"));
        }
        let (q, r) = qr_decompose(&z)?;
        x = q;
        diag = (0..k).map(|i| r[(i, i)]).collect();
        iterations += 1;
        let change = diag
            .iter()
            .zip(&prev)
            .take(cfg.watch.unwrap_or(k))
            .map(|(d, p)| (d - p).abs() / p.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        prev.clone_from(&diag);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..k)
        .map(|j| {
            let s = (diag[j] - cfg.shift).max(0.0).sqrt();
            (s, x.column(j).iter().copied().collect())
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (values, vectors) = pairs.into_iter().unzip();
    Ok(Spectrum {
        values,
        vectors,
        iterations,
        converged,
    })
}

/// Leading singular pairs by block subspace iteration with a Rayleigh–Ritz
/// extraction at every step. A block wider than a cluster of near-equal top
/// values separates them, which reading the QR diagonal does only at the rate
/// of their ratio. `cfg.k` is the block width (capped at the rank bound);
/// `cfg.watch` (default 1) is how many leading pairs are returned and tracked
/// by the relative-change stopping rule.
pub fn ritz_top(op: &Operator, cfg: &PowerQrConfig, seed: u64) -> Result<Spectrum> {
    let n = op.in_dim();
    let b = cfg.k.min(n).min(op.out_dim());
    let w = cfg.watch.unwrap_or(1);
    if b == 0 || w == 0 || w > b || cfg.iterations == 0 || !(cfg.shift >= 0.0) {
        return Err(Error::InvalidConfig(
            "ritz_top needs 1 <= watch <= block, iterations >= 1 and shift >= 0".into(),
        ));
    }
    let mut rng = seeded(seed);
    let (mut x, _) = qr_decompose(&DMatrix::from_column_slice(n, b, &gaussian_vec(&mut rng, n * b)))?;
    let mut prev: Vec<f64> = vec![f64::INFINITY; w];
    let mut theta: Vec<f64> = vec![0.0; w];
    let mut vs: Vec<DVector<f64>> = vec![DVector::zeros(n); w];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.iterations {
        let z = gram_apply(op, &x)? + &x * cfg.shift;
        if z.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("ritz_top iterate"));
        }
        let h = x.transpose() * &z;
        let eig = SymmetricEigen::new((&h + h.transpose()) * 0.5);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        for (slot, &i) in order.iter().take(w).enumerate() {
            theta[slot] = eig.eigenvalues[i];
            vs[slot] = &x * eig.eigenvectors.column(i);
        }
        iterations += 1;
        let change = theta
            .iter()
            .zip(&prev)
            .map(|(t, p)| ((t - p) / p).abs())
            .fold(0.0, f64::max);
        if iterations > 1 && change < cfg.tol {
            converged = true;
            break;
        }
        prev.clone_from(&theta);
        x = qr_decompose(&z)?.0;
    }
    Ok(Spectrum {
        values: theta.iter().map(|t| (t - cfg.shift).max(0.0).sqrt()).collect(),
        vectors: vs
            .iter()
            .map(|v| {
                let norm = v.norm();
                v.iter().map(|t| t / norm).collect()
            })
            .collect(),
        iterations,
        converged,
    })
}

/// Full singular value decomposition of the materialized linear part.
///
/// Returns `min(out_dim, in_dim)` values in descending order.
pub fn svd_oracle(op: &Operator) -> Result<Spectrum> {
    let m = op.materialize()?;
    matrix_spectrum(&m)
}

/// `[[0, M], [Mᵀ, 0]]`, whose eigenvalues are `±σ_i` padded with zeros.
fn augmented(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut a = DMatrix::zeros(r + c, r + c);
    a.view_mut((0, r), (r, c)).copy_from(m);
    a.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
    a
}

/// Singular values of an explicit matrix, descending.
///
/// Taken from the symmetric eigenproblem of the augmented matrix, which keeps
/// the absolute error near machine precision even for tiny values (squaring
/// through `MᵀM` would not).
pub fn matrix_singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd_oracle input"));
    }
    let r = m.nrows().min(m.ncols());
    let mut ev: Vec<f64> = augmented(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev.into_iter().take(r).map(|v| v.max(0.0)).collect())
}

/// Singular values and right singular vectors of an explicit matrix.
/// Vectors are eigenvectors of `MᵀM` in the same order as the values.
pub fn matrix_spectrum(m: &DMatrix<f64>) -> Result<Spectrum> {
    let values = matrix_singular_values(m)?;
    let eig = SymmetricEigen::new(m.transpose() * m);
    let mut order: Vec<usize> = (0..m.ncols()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vectors = order
        .into_iter()
        .take(values.len())
        .map(|i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    Ok(Spectrum {
        values,
        vectors,
        iterations: 0,
        converged: true,
    })
}

/// Spectral norm of the linear part, from the oracle.
pub fn oracle_norm(op: &Operator) -> Result<f64> {
    Ok(matrix_singular_values(&op.materialize()?)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::Padding;

    fn diag3() -> Operator {
        Operator::dense_from_rows(&[
            vec![3.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn ritz_separates_a_tight_cluster() {
        // σ = 2.0002 sits just above a cluster at 2: one-vector iteration
        // would need tens of thousands of steps, a block of four needs few.
        let d = [2.0002, 2.0, 2.0, 2.0, 0.5, 0.1];
        let mut m = vec![0.0; 36];
        for (i, v) in d.iter().enumerate() {
            m[i * 6 + i] = *v;
        }
        let op = Operator::dense(6, 6, m).unwrap();
        let s = ritz_top(&op, &PowerQrConfig::new(4, 200).with_tol(1e-15), 3).unwrap();
        assert!(s.converged && s.iterations < 200);
        assert!((s.values[0] - 2.0002).abs() < 1e-12);
        assert!((s.vectors[0][0].abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ritz_returns_leading_pairs_in_order() {
        let d = [3.0, 1.00001, 1.0, 0.99999, 0.5, 0.1, 0.05, 0.01];
        let mut m = vec![0.0; 64];
        for (i, v) in d.iter().enumerate() {
            m[i * 8 + i] = *v;
        }
        let op = Operator::dense(8, 8, m).unwrap();
        let cfg = PowerQrConfig::new(6, 500).with_tol(1e-15).watching(3);
        let s = ritz_top(&op, &cfg, 11).unwrap();
        assert_eq!(s.values.len(), 3);
        for (got, want) in s.values.iter().zip(&d) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        for (j, v) in s.vectors.iter().enumerate() {
            assert!((v[j].abs() - 1.0).abs() < 1e-8);
        }
        assert!(ritz_top(&op, &PowerQrConfig::new(2, 10).watching(3), 0).is_err());
    }

    #[test]
    fn diagonal_top_two() {
        let s = power_qr(&diag3(), &PowerQrConfig::new(2, 200), 0).unwrap();
        assert!((s.values[0] - 3.0).abs() < 1e-9);
        assert!((s.values[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn identity_converges_immediately() {
        for k in 1..=4 {
            let s = power_qr(&Operator::identity(6), &PowerQrConfig::new(k, 50), 7).unwrap();
            assert_eq!(s.iterations, 1);
            assert!(s.converged);
            assert!(s.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn random_dense_matches_oracle() {
        let mut rng = seeded(11);
        let op = Operator::dense(20, 12, gaussian_vec(&mut rng, 240)).unwrap();
        let truth = svd_oracle(&op).unwrap();
        let s = power_qr(&op, &PowerQrConfig::new(5, 5000).with_tol(1e-14), 1).unwrap();
        for i in 0..5 {
            assert!((s.values[i] - truth.values[i]).abs() <= 1e-6 * truth.values[i]);
        }
    }

    #[test]
    fn k_too_large_is_rejected() {
        let op = Operator::dense(2, 3, vec![1.0; 6]).unwrap();
        assert!(power_qr(&op, &PowerQrConfig::new(3, 10), 0).is_err());
    }

    #[test]
    fn qr_of_identity() {
        let (q, r) = qr_decompose(&DMatrix::identity(4, 4)).unwrap();
        assert!((q - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-15);
        assert!((r - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-15);
    }

    #[test]
    fn qr_of_orthonormal_columns() {
        let mut rng = seeded(2);
        let (x, _) = qr_decompose(&DMatrix::from_vec(7, 3, gaussian_vec(&mut rng, 21))).unwrap();
        let (q, r) = qr_decompose(&x).unwrap();
        assert!((&q - &x).abs().max() < 1e-12);
        assert!((r - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-12);
    }

    #[test]
    fn qr_reconstructs() {
        let mut rng = seeded(3);
        let x = DMatrix::from_vec(6, 3, gaussian_vec(&mut rng, 18));
        let (q, r) = qr_decompose(&x).unwrap();
        assert!((&x - &q * &r).norm() < 1e-12);
        assert!((q.transpose() * &q - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-12);
        for i in 0..3 {
            assert!(r[(i, i)] >= 0.0);
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn qr_detects_rank_deficiency() {
        let x = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(matches!(qr_decompose(&x), Err(Error::RankDeficient { column: 1, .. })));
    }

    #[test]
    fn oracle_on_diagonal() {
        let s = svd_oracle(&diag3()).unwrap();
        assert!(s.values.iter().zip([3.0, 2.0, 1.0]).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn oracle_on_pointwise_conv() {
        let op = Operator::conv1d(1, 1, 4, 1, 1, Padding::Circular, vec![3.0]).unwrap();
        let s = svd_oracle(&op).unwrap();
        assert_eq!(s.values.len(), 4);
        assert!(s.values.iter().all(|v| (v - 3.0).abs() < 1e-14));
    }

    #[test]
    fn spectrum_json_has_values_and_vectors() {
        let s = svd_oracle(&diag3()).unwrap();
        let json = serde_json::to_value(&s).unwrap();
        assert!(json.get("values").is_some() && json.get("vectors").is_some());
        let back: Spectrum = serde_json::from_value(json).unwrap();
        assert_eq!(back, s);
    }
}
