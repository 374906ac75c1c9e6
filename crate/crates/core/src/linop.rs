//! Implicitly linear operators.
//!
//! Every layer the toolkit touches is an affine map `f(x) = M x + b` whose
//! matrix `M` is usually not stored explicitly (a convolution kernel, a batch
//! norm gain vector, a chain of layers). An [`Operator`] exposes the exact
//! forward map, the exact adjoint `Mᵀ y`, parameter gradients, and a dense
//! materialization used by the oracle checks.
//!
//! Vectors are flat `f64` slices laid out row-major over the operator's
//! shape: `[channels, length]` for 1-D convolutions, `[channels, h, w]` for
//! 2-D convolutions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on `rows * cols` for [`Operator::materialize`].
pub const MATERIALIZE_CAP: usize = 1 << 22;

/// Boundary handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Circular,
    Zeros,
    Reflect,
    Replicate,
}

impl Padding {
    pub const ALL: [Padding; 4] = [
        Padding::Circular,
        Padding::Zeros,
        Padding::Reflect,
        Padding::Replicate,
    ];

    /// Maps a logical index (possibly outside `0..n`) to the input index it reads.
    fn source(self, i: isize, n: usize) -> Option<usize> {
        let n_i = n as isize;
        if (0..n_i).contains(&i) {
            return Some(i as usize);
        }
        match self {
            Padding::Zeros => None,
            Padding::Circular => Some(i.rem_euclid(n_i) as usize),
            Padding::Replicate => Some(i.clamp(0, n_i - 1) as usize),
            Padding::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                let period = 2 * (n_i - 1);
                let m = i.rem_euclid(period);
                Some(if m >= n_i { period - m } else { m } as usize)
            }
        }
    }
}

/// Multi-channel cross-correlation over one or two spatial axes with "same"
/// padding (`kernel / 2` cells on the leading side) and per-axis stride.
///
/// Weight layout is `[out_channels][in_channels][kernel...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial: Vec<usize>,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Padding,
    pub weight: Vec<f64>,
}

/// Batch-norm style diagonal map `y_i = γ_i (x_i − mean_i) / sqrt(var_i + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagonal {
    pub gamma: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl Diagonal {
    pub fn new(gamma: Vec<f64>, mean: Vec<f64>, var: Vec<f64>, eps: f64) -> Result<Self> {
        let d = Diagonal {
            gamma,
            mean,
            var,
            eps,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if n == 0 || self.mean.len() != n || self.var.len() != n {
            return Err(Error::InvalidOperator(
                "diagonal gamma/mean/var must be nonempty and of equal length".into(),
            ));
        }
        if self.var.iter().any(|&v| !(v + self.eps > 0.0)) {
            return Err(Error::InvalidOperator(
                "diagonal requires var + eps > 0".into(),
            ));
        }
        Ok(())
    }

    fn scale(&self, i: usize) -> f64 {
        (self.var[i] + self.eps).sqrt()
    }

    /// Diagonal entries of the linear part, `γ_i / sqrt(var_i + eps)`.
    pub fn gains(&self) -> Vec<f64> {
        (0..self.gamma.len())
            .map(|i| self.gamma[i] / self.scale(i))
            .collect()
    }
}

/// An implicitly linear (affine) map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "OperatorDesc", try_from = "OperatorDesc")]
pub enum Operator {
    /// Explicit `rows x cols` matrix, row-major.
    Dense {
        rows: usize,
        cols: usize,
        weight: Vec<f64>,
    },
    Conv(Conv),
    Diagonal(Diagonal),
    /// `ops[0] ∘ ops[1] ∘ … ∘ ops[last]`: the last operator is applied first.
    Composition(Vec<Operator>),
    /// `inner(x) + bias`.
    Affine { inner: Box<Operator>, bias: Vec<f64> },
}

/// Whether a pass includes the affine offsets or only the linear part `M`.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Affine,
    Linear,
}

impl Conv {
    fn out_len(&self, axis: usize) -> usize {
        (self.spatial[axis] - 1) / self.stride[axis] + 1
    }

    fn out_spatial(&self) -> Vec<usize> {
        (0..self.spatial.len()).map(|a| self.out_len(a)).collect()
    }

    fn in_size(&self) -> usize {
        self.spatial.iter().product()
    }

    fn out_size(&self) -> usize {
        self.out_spatial().iter().product()
    }

    fn kernel_size(&self) -> usize {
        self.kernel.iter().product()
    }

    fn validate(&self) -> Result<()> {
        let dims = self.spatial.len();
        if !(dims == 1 || dims == 2) || self.kernel.len() != dims || self.stride.len() != dims {
            return Err(Error::InvalidOperator(
                "convolution needs 1 or 2 spatial axes with matching kernel and stride".into(),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidOperator("convolution channels must be positive".into()));
        }
        for a in 0..dims {
            if self.spatial[a] == 0 || self.kernel[a] == 0 || self.stride[a] == 0 {
                return Err(Error::InvalidOperator(
                    "convolution extents, kernel and stride must be positive".into(),
                ));
            }
            if self.kernel[a] > self.spatial[a] {
                return Err(Error::InvalidOperator(format!(
                    "kernel {} exceeds input extent {} on axis {a}",
                    self.kernel[a], self.spatial[a]
                )));
            }
        }
        let expected = self.out_channels * self.in_channels * self.kernel_size();
        if self.weight.len() != expected {
            return Err(Error::InvalidOperator(format!(
                "convolution weight has {} entries, expected {expected}",
                self.weight.len()
            )));
        }
        Ok(())
    }

    /// `table[o * k + t]` is the input index read by output `o` at tap `t`
    /// along `axis`, or `None` for a zero pad.
    fn tap_table(&self, axis: usize) -> Vec<Option<usize>> {
        let n = self.spatial[axis];
        let k = self.kernel[axis];
        let s = self.stride[axis];
        let lead = (k / 2) as isize;
        let out = self.out_len(axis);
        let mut table = Vec::with_capacity(out * k);
        for o in 0..out {
            for t in 0..k {
                let i = (o * s + t) as isize - lead;
                table.push(self.padding.source(i, n));
            }
        }
        table
    }

    /// Expands the spatial geometry to two axes (a 1-D conv is a 1 x n image).
    fn geometry(&self) -> ConvGeometry {
        let (rows, cols) = if self.spatial.len() == 1 {
            let unit = vec![Some(0)];
            (unit, self.tap_table(0))
        } else {
            (self.tap_table(0), self.tap_table(1))
        };
        let (kh, kw, oh, ow, h, w) = if self.spatial.len() == 1 {
            (1, self.kernel[0], 1, self.out_len(0), 1, self.spatial[0])
        } else {
            (
                self.kernel[0],
                self.kernel[1],
                self.out_len(0),
                self.out_len(1),
                self.spatial[0],
                self.spatial[1],
            )
        };
        ConvGeometry {
            rows,
            cols,
            kh,
            kw,
            oh,
            ow,
            h,
            w,
        }
    }

    /// Correlates `x` with an arbitrary weight of this layout.
    fn correlate(&self, weight: &[f64], x: &[f64]) -> Vec<f64> {
        let g = self.geometry();
        let (cin, cout) = (self.in_channels, self.out_channels);
        let mut y = vec![0.0; cout * g.oh * g.ow];
        for co in 0..cout {
            for ci in 0..cin {
                let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for th in 0..g.kh {
                    for tw in 0..g.kw {
                        let wv = weight[((co * cin + ci) * g.kh + th) * g.kw + tw];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let Some(sy) = g.rows[oy * g.kh + th] else { continue };
                            let yrow = &mut y[(co * g.oh + oy) * g.ow..(co * g.oh + oy + 1) * g.ow];
                            for (ox, yv) in yrow.iter_mut().enumerate() {
                                if let Some(sx) = g.cols[ox * g.kw + tw] {
                                    *yv += wv * xin[sy * g.w + sx];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Exact transpose of [`Conv::correlate`]: each output cell scatters its
    /// value back through the tap table onto the input cells it read from.
    fn correlate_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let g = self.geometry();
        let (cin, cout) = (self.in_channels, self.out_channels);
        let mut x = vec![0.0; cin * g.h * g.w];
        for co in 0..cout {
            for ci in 0..cin {
                for th in 0..g.kh {
                    for tw in 0..g.kw {
                        let wv = self.weight[((co * cin + ci) * g.kh + th) * g.kw + tw];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let Some(sy) = g.rows[oy * g.kh + th] else { continue };
                            for ox in 0..g.ow {
                                if let Some(sx) = g.cols[ox * g.kw + tw] {
                                    x[ci * g.h * g.w + sy * g.w + sx] +=
                                        wv * y[(co * g.oh + oy) * g.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Gradient of `⟨gy, correlate(W, x)⟩` with respect to `W`.
    fn weight_grad(&self, x: &[f64], gy: &[f64]) -> Vec<f64> {
        let g = self.geometry();
        let (cin, cout) = (self.in_channels, self.out_channels);
        let mut grad = vec![0.0; self.weight.len()];
        for co in 0..cout {
            for ci in 0..cin {
                for th in 0..g.kh {
                    for tw in 0..g.kw {
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let Some(sy) = g.rows[oy * g.kh + th] else { continue };
                            for ox in 0..g.ow {
                                if let Some(sx) = g.cols[ox * g.kw + tw] {
                                    acc += gy[(co * g.oh + oy) * g.ow + ox]
                                        * x[ci * g.h * g.w + sy * g.w + sx];
                                }
                            }
                        }
                        grad[((co * cin + ci) * g.kh + th) * g.kw + tw] = acc;
                    }
                }
            }
        }
        grad
    }
}

struct ConvGeometry {
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
}

fn check_len(context: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::ShapeMismatch {
            context,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

impl Operator {
    /// Dense operator from a row-major weight.
    pub fn dense(rows: usize, cols: usize, weight: Vec<f64>) -> Result<Self> {
        let op = Operator::Dense { rows, cols, weight };
        op.validate()?;
        Ok(op)
    }

    pub fn dense_from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        Self::dense(r, c, rows.iter().flatten().copied().collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut weight = vec![0.0; n * n];
        for i in 0..n {
            weight[i * n + i] = 1.0;
        }
        Operator::Dense {
            rows: n,
            cols: n,
            weight,
        }
    }

    pub fn conv1d(
        in_channels: usize,
        out_channels: usize,
        length: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        weight: Vec<f64>,
    ) -> Result<Self> {
        let op = Operator::Conv(Conv {
            in_channels,
            out_channels,
            spatial: vec![length],
            kernel: vec![kernel],
            stride: vec![stride],
            padding,
            weight,
        });
        op.validate()?;
        Ok(op)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        padding: Padding,
        weight: Vec<f64>,
    ) -> Result<Self> {
        let op = Operator::Conv(Conv {
            in_channels,
            out_channels,
            spatial: vec![h, w],
            kernel: vec![kh, kw],
            stride: vec![sh, sw],
            padding,
            weight,
        });
        op.validate()?;
        Ok(op)
    }

    pub fn diagonal(gamma: Vec<f64>, mean: Vec<f64>, var: Vec<f64>, eps: f64) -> Result<Self> {
        Ok(Operator::Diagonal(Diagonal::new(gamma, mean, var, eps)?))
    }

    pub fn affine(inner: Operator, bias: Vec<f64>) -> Result<Self> {
        let op = Operator::Affine {
            inner: Box::new(inner),
            bias,
        };
        op.validate()?;
        Ok(op)
    }

    /// Short name of the operator kind as used in JSON descriptions.
    pub fn kind(&self) -> &'static str {
        match self {
            Operator::Dense { .. } => "dense",
            Operator::Conv(c) if c.spatial.len() == 1 => "conv1d",
            Operator::Conv(_) => "conv2d",
            Operator::Diagonal(_) => "diagonal",
            Operator::Composition(_) => "composition",
            Operator::Affine { .. } => "affine",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Operator::Dense { rows, cols, weight } => {
                if *rows == 0 || *cols == 0 || weight.len() != rows * cols {
                    return Err(Error::InvalidOperator(format!(
                        "dense {rows}x{cols} needs {} weights, got {}",
                        rows * cols,
                        weight.len()
                    )));
                }
                Ok(())
            }
            Operator::Conv(c) => c.validate(),
            Operator::Diagonal(d) => d.validate(),
            Operator::Composition(ops) => {
                if ops.is_empty() {
                    return Err(Error::InvalidOperator("empty composition".into()));
                }
                for op in ops {
                    op.validate()?;
                }
                for pair in ops.windows(2) {
                    if pair[0].in_dim() != pair[1].out_dim() {
                        return Err(Error::InvalidOperator(format!(
                            "composition chain broken: {} expects {} inputs but the next operator yields {}",
                            pair[0].kind(),
                            pair[0].in_dim(),
                            pair[1].out_dim()
                        )));
                    }
                }
                Ok(())
            }
            Operator::Affine { inner, bias } => {
                inner.validate()?;
                if bias.len() != inner.out_dim() {
                    return Err(Error::InvalidOperator(format!(
                        "bias has {} entries, operator yields {}",
                        bias.len(),
                        inner.out_dim()
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Operator::Dense { cols, .. } => vec![*cols],
            Operator::Conv(c) => {
                let mut s = vec![c.in_channels];
                s.extend(&c.spatial);
                s
            }
            Operator::Diagonal(d) => vec![d.gamma.len()],
            Operator::Composition(ops) => ops.last().map_or_else(Vec::new, Operator::input_shape),
            Operator::Affine { inner, .. } => inner.input_shape(),
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match self {
            Operator::Dense { rows, .. } => vec![*rows],
            Operator::Conv(c) => {
                let mut s = vec![c.out_channels];
                s.extend(c.out_spatial());
                s
            }
            Operator::Diagonal(d) => vec![d.gamma.len()],
            Operator::Composition(ops) => ops.first().map_or_else(Vec::new, Operator::output_shape),
            Operator::Affine { inner, .. } => inner.output_shape(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Operator::Dense { cols, .. } => *cols,
            Operator::Conv(c) => c.in_channels * c.in_size(),
            Operator::Diagonal(d) => d.gamma.len(),
            Operator::Composition(ops) => ops.last().map_or(0, Operator::in_dim),
            Operator::Affine { inner, .. } => inner.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Operator::Dense { rows, .. } => *rows,
            Operator::Conv(c) => c.out_channels * c.out_size(),
            Operator::Diagonal(d) => d.gamma.len(),
            Operator::Composition(ops) => ops.first().map_or(0, Operator::out_dim),
            Operator::Affine { inner, .. } => inner.out_dim(),
        }
    }

    /// `f(x) = M x + b`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("apply", self.in_dim(), x)?;
        Ok(self.forward(x, Part::Affine))
    }

    /// `M x`, the map with every affine offset removed.
    pub fn apply_linear(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("apply_linear", self.in_dim(), x)?;
        Ok(self.forward(x, Part::Linear))
    }

    /// `Mᵀ y`; biases do not enter.
    pub fn adjoint_apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("adjoint_apply", self.out_dim(), y)?;
        Ok(self.adjoint(y))
    }

    fn forward(&self, x: &[f64], part: Part) -> Vec<f64> {
        match self {
            Operator::Dense { rows, cols, weight } => (0..*rows)
                .map(|r| {
                    weight[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum()
                })
                .collect(),
            Operator::Conv(c) => c.correlate(&c.weight, x),
            Operator::Diagonal(d) => (0..d.gamma.len())
                .map(|i| {
                    let centered = match part {
                        Part::Affine => x[i] - d.mean[i],
                        Part::Linear => x[i],
                    };
                    d.gamma[i] * centered / d.scale(i)
                })
                .collect(),
            Operator::Composition(ops) => {
                let mut v = x.to_vec();
                for op in ops.iter().rev() {
                    v = op.forward(&v, part);
                }
                v
            }
            Operator::Affine { inner, bias } => {
                let mut y = inner.forward(x, part);
                if part == Part::Affine {
                    for (yi, b) in y.iter_mut().zip(bias) {
                        *yi += b;
                    }
                }
                y
            }
        }
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Operator::Dense { rows, cols, weight } => {
                let mut x = vec![0.0; *cols];
                for r in 0..*rows {
                    let yr = y[r];
                    if yr == 0.0 {
                        continue;
                    }
                    for (xc, w) in x.iter_mut().zip(&weight[r * cols..(r + 1) * cols]) {
                        *xc += w * yr;
                    }
                }
                x
            }
            Operator::Conv(c) => c.correlate_adjoint(y),
            Operator::Diagonal(d) => d.gains().iter().zip(y).map(|(g, v)| g * v).collect(),
            Operator::Composition(ops) => {
                let mut v = y.to_vec();
                for op in ops {
                    v = op.adjoint(&v);
                }
                v
            }
            Operator::Affine { inner, .. } => inner.adjoint(y),
        }
    }

    /// Dense `out_dim x in_dim` matrix of the linear part, under the default cap.
    pub fn materialize(&self) -> Result<DMatrix<f64>> {
        self.materialize_with_cap(MATERIALIZE_CAP)
    }

    /// Column `j` is `apply(e_j) − apply(0)`.
    pub fn materialize_with_cap(&self, cap: usize) -> Result<DMatrix<f64>> {
        let (rows, cols) = (self.out_dim(), self.in_dim());
        if rows.saturating_mul(cols) > cap {
            return Err(Error::MaterializeCap { rows, cols, cap });
        }
        let mut m = DMatrix::zeros(rows, cols);
        let mut e = vec![0.0; cols];
        for j in 0..cols {
            e[j] = 1.0;
            let col = self.forward(&e, Part::Linear);
            e[j] = 0.0;
            m.column_mut(j).copy_from_slice(&col);
        }
        Ok(m)
    }

    /// Number of trainable parameters (weights, diagonal gains, biases).
    pub fn num_params(&self) -> usize {
        match self {
            Operator::Dense { weight, .. } => weight.len(),
            Operator::Conv(c) => c.weight.len(),
            Operator::Diagonal(d) => d.gamma.len(),
            Operator::Composition(ops) => ops.iter().map(Operator::num_params).sum(),
            Operator::Affine { inner, bias } => inner.num_params() + bias.len(),
        }
    }

    /// Flat parameter vector; composition children are concatenated in list order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.collect_params(&mut out);
        out
    }

    fn collect_params(&self, out: &mut Vec<f64>) {
        match self {
            Operator::Dense { weight, .. } => out.extend(weight),
            Operator::Conv(c) => out.extend(&c.weight),
            Operator::Diagonal(d) => out.extend(&d.gamma),
            Operator::Composition(ops) => ops.iter().for_each(|op| op.collect_params(out)),
            Operator::Affine { inner, bias } => {
                inner.collect_params(out);
                out.extend(bias);
            }
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len("set_params", self.num_params(), params)?;
        self.assign_params(params);
        Ok(())
    }

    fn assign_params(&mut self, p: &[f64]) -> usize {
        match self {
            Operator::Dense { weight, .. } => {
                let n = weight.len();
                weight.copy_from_slice(&p[..n]);
                n
            }
            Operator::Conv(c) => {
                let n = c.weight.len();
                c.weight.copy_from_slice(&p[..n]);
                n
            }
            Operator::Diagonal(d) => {
                let n = d.gamma.len();
                d.gamma.copy_from_slice(&p[..n]);
                n
            }
            Operator::Composition(ops) => {
                let mut used = 0;
                for op in ops.iter_mut() {
                    used += op.assign_params(&p[used..]);
                }
                used
            }
            Operator::Affine { inner, bias } => {
                let used = inner.assign_params(p);
                let n = bias.len();
                bias.copy_from_slice(&p[used..used + n]);
                used + n
            }
        }
    }

    /// Gradient of `⟨gy, f(x)⟩` with respect to [`Operator::params`].
    pub fn param_grad(&self, x: &[f64], gy: &[f64]) -> Result<Vec<f64>> {
        check_len("param_grad input", self.in_dim(), x)?;
        check_len("param_grad output", self.out_dim(), gy)?;
        let mut out = Vec::with_capacity(self.num_params());
        self.grad(x, gy, Part::Affine, &mut out);
        Ok(out)
    }

    /// Gradient of `⟨gy, M x⟩` with respect to [`Operator::params`]; bias entries are zero.
    pub fn linear_param_grad(&self, x: &[f64], gy: &[f64]) -> Result<Vec<f64>> {
        check_len("linear_param_grad input", self.in_dim(), x)?;
        check_len("linear_param_grad output", self.out_dim(), gy)?;
        let mut out = Vec::with_capacity(self.num_params());
        self.grad(x, gy, Part::Linear, &mut out);
        Ok(out)
    }

    fn grad(&self, x: &[f64], gy: &[f64], part: Part, out: &mut Vec<f64>) {
        match self {
            Operator::Dense { rows, cols, .. } => {
                for r in 0..*rows {
                    out.extend((0..*cols).map(|c| gy[r] * x[c]));
                }
            }
            Operator::Conv(c) => out.extend(c.weight_grad(x, gy)),
            Operator::Diagonal(d) => {
                out.extend((0..d.gamma.len()).map(|i| {
                    let centered = match part {
                        Part::Affine => x[i] - d.mean[i],
                        Part::Linear => x[i],
                    };
                    gy[i] * centered / d.scale(i)
                }));
            }
            Operator::Composition(ops) => {
                // inputs[i] is the input seen by ops[i]
                let mut inputs = vec![Vec::new(); ops.len()];
                let mut v = x.to_vec();
                for (i, op) in ops.iter().enumerate().rev() {
                    let next = op.forward(&v, part);
                    inputs[i] = std::mem::replace(&mut v, next);
                }
                let mut upstream = gy.to_vec();
                let mut chunks = vec![Vec::new(); ops.len()];
                for (i, op) in ops.iter().enumerate() {
                    let mut g = Vec::with_capacity(op.num_params());
                    op.grad(&inputs[i], &upstream, part, &mut g);
                    chunks[i] = g;
                    upstream = op.adjoint(&upstream);
                }
                for c in chunks {
                    out.extend(c);
                }
            }
            Operator::Affine { inner, bias } => {
                inner.grad(x, gy, part, out);
                match part {
                    Part::Affine => out.extend_from_slice(&gy[..bias.len()]),
                    Part::Linear => out.extend(std::iter::repeat_n(0.0, bias.len())),
                }
            }
        }
    }

    /// Directional derivative of `M x` along a parameter direction `dp`.
    pub fn linear_param_jvp(&self, x: &[f64], dp: &[f64]) -> Result<Vec<f64>> {
        check_len("linear_param_jvp input", self.in_dim(), x)?;
        check_len("linear_param_jvp direction", self.num_params(), dp)?;
        Ok(self.jvp(x, dp).1)
    }

    /// Returns `(M x, d(M x)[dp])` for the linear part.
    fn jvp(&self, x: &[f64], dp: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            Operator::Dense { rows, cols, .. } => {
                let y = self.forward(x, Part::Linear);
                let dy = (0..*rows)
                    .map(|r| dp[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
                    .collect();
                (y, dy)
            }
            Operator::Conv(c) => (c.correlate(&c.weight, x), c.correlate(&dp[..c.weight.len()], x)),
            Operator::Diagonal(d) => {
                let y = self.forward(x, Part::Linear);
                let dy = (0..d.gamma.len()).map(|i| dp[i] * x[i] / d.scale(i)).collect();
                (y, dy)
            }
            Operator::Composition(ops) => {
                let offsets = param_offsets(ops);
                let mut v = x.to_vec();
                let mut dv = vec![0.0; x.len()];
                for (i, op) in ops.iter().enumerate().rev() {
                    let (y, dy_param) = op.jvp(&v, &dp[offsets[i]..offsets[i + 1]]);
                    let dy_input = op.forward(&dv, Part::Linear);
                    dv = dy_param.iter().zip(&dy_input).map(|(a, b)| a + b).collect();
                    v = y;
                }
                (v, dv)
            }
            Operator::Affine { inner, .. } => inner.jvp(x, &dp[..inner.num_params()]),
        }
    }

    /// Serializes to the JSON operator description.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Strips an outer [`Operator::Affine`] wrapper.
    pub fn linear_core(&self) -> &Operator {
        match self {
            Operator::Affine { inner, .. } => inner.linear_core(),
            other => other,
        }
    }
}

fn param_offsets(ops: &[Operator]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(ops.len() + 1);
    offsets.push(0);
    for op in ops {
        offsets.push(offsets.last().unwrap() + op.num_params());
    }
    offsets
}

/// `compose([A, B, C])` acts as `A(B(C(x)))`.
pub fn compose(ops: Vec<Operator>) -> Result<Operator> {
    let op = Operator::Composition(ops);
    op.validate()?;
    Ok(op)
}

/// Euclidean inner product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// JSON description

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Dense,
    Conv1d,
    Conv2d,
    Diagonal,
    Composition,
    Affine,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Parameters {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    var: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OperatorDesc {
    kind: Kind,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    kernel: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    stride: Vec<usize>,
    #[serde(default)]
    parameters: Parameters,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    children: Vec<OperatorDesc>,
}

impl From<Operator> for OperatorDesc {
    fn from(op: Operator) -> Self {
        let kind = match op.kind() {
            "dense" => Kind::Dense,
            "conv1d" => Kind::Conv1d,
            "conv2d" => Kind::Conv2d,
            "diagonal" => Kind::Diagonal,
            "composition" => Kind::Composition,
            _ => Kind::Affine,
        };
        let mut desc = OperatorDesc {
            kind,
            input_shape: op.input_shape(),
            output_shape: op.output_shape(),
            padding: None,
            kernel: Vec::new(),
            stride: Vec::new(),
            parameters: Parameters::default(),
            children: Vec::new(),
        };
        match op {
            Operator::Dense { weight, .. } => desc.parameters.weight = Some(weight),
            Operator::Conv(c) => {
                desc.padding = Some(c.padding);
                desc.kernel = c.kernel;
                desc.stride = c.stride;
                desc.parameters.weight = Some(c.weight);
            }
            Operator::Diagonal(d) => {
                desc.parameters.gamma = Some(d.gamma);
                desc.parameters.mean = Some(d.mean);
                desc.parameters.var = Some(d.var);
                desc.parameters.eps = Some(d.eps);
            }
            Operator::Composition(ops) => {
                desc.children = ops.into_iter().map(OperatorDesc::from).collect();
            }
            Operator::Affine { inner, bias } => {
                desc.parameters.bias = Some(bias);
                desc.children = vec![OperatorDesc::from(*inner)];
            }
        }
        desc
    }
}

impl TryFrom<OperatorDesc> for Operator {
    type Error = Error;

    fn try_from(desc: OperatorDesc) -> Result<Self> {
        let missing = |what: &str| Error::InvalidOperator(format!("{:?} operator is missing {what}", desc.kind));
        let p = desc.parameters.clone();
        let op = match desc.kind {
            Kind::Dense => {
                let [cols] = desc.input_shape[..] else {
                    return Err(Error::InvalidOperator("dense input_shape must be [cols]".into()));
                };
                let [rows] = desc.output_shape[..] else {
                    return Err(Error::InvalidOperator("dense output_shape must be [rows]".into()));
                };
                Operator::dense(rows, cols, p.weight.ok_or_else(|| missing("weight"))?)?
            }
            Kind::Conv1d | Kind::Conv2d => {
                let dims = if desc.kind == Kind::Conv1d { 1 } else { 2 };
                if desc.input_shape.len() != dims + 1 || desc.output_shape.is_empty() {
                    return Err(Error::InvalidOperator(format!(
                        "conv input_shape must be [channels, {} spatial extents]",
                        dims
                    )));
                }
                let stride = if desc.stride.is_empty() {
                    vec![1; dims]
                } else {
                    desc.stride.clone()
                };
                Operator::Conv(Conv {
                    in_channels: desc.input_shape[0],
                    out_channels: desc.output_shape[0],
                    spatial: desc.input_shape[1..].to_vec(),
                    kernel: desc.kernel.clone(),
                    stride,
                    padding: desc.padding.ok_or_else(|| missing("padding"))?,
                    weight: p.weight.ok_or_else(|| missing("weight"))?,
                })
            }
            Kind::Diagonal => Operator::diagonal(
                p.gamma.ok_or_else(|| missing("gamma"))?,
                p.mean.ok_or_else(|| missing("mean"))?,
                p.var.ok_or_else(|| missing("var"))?,
                p.eps.ok_or_else(|| missing("eps"))?,
            )?,
            Kind::Composition => Operator::Composition(
                desc.children
                    .iter()
                    .cloned()
                    .map(Operator::try_from)
                    .collect::<Result<_>>()?,
            ),
            Kind::Affine => {
                let [inner] = &desc.children[..] else {
                    return Err(Error::InvalidOperator("affine needs exactly one child".into()));
                };
                Operator::Affine {
                    inner: Box::new(Operator::try_from(inner.clone())?),
                    bias: p.bias.ok_or_else(|| missing("bias"))?,
                }
            }
        };
        op.validate()?;
        if op.input_shape() != desc.input_shape || op.output_shape() != desc.output_shape {
            return Err(Error::InvalidOperator(format!(
                "declared shapes {:?} -> {:?} disagree with the operator's {:?} -> {:?}",
                desc.input_shape,
                desc.output_shape,
                op.input_shape(),
                op.output_shape()
            )));
        }
        Ok(op)
    }
}
