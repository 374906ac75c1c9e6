use rand::Rng;
use serde::{Deserialize, Serialize};
use specshape::linop::compose;
use specshape::rng::{gaussian_vec, SeededRng};
use specshape::{Operator, Padding, Result};

pub const PADDINGS: [Padding; 4] = [Padding::Circular, Padding::Zeros, Padding::Reflect, Padding::Replicate];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Dense,
    Conv1d,
    Conv2d,
    /// A 1-D convolution followed by a dense map.
    Composition,
}

/// Random operator of `kind` whose input and output dimensions lie in `[min_dim, max_dim]`.
pub fn random_operator(kind: OpKind, min_dim: usize, max_dim: usize, rng: &mut SeededRng) -> Result<Operator> {
    loop {
        let op = match kind {
            OpKind::Dense => {
                let r = rng.random_range(min_dim..=max_dim);
                let c = rng.random_range(min_dim..=max_dim);
                Operator::dense(r, c, gaussian_vec(rng, r * c))?
            }
            OpKind::Conv1d => {
                let cin = rng.random_range(1..=3);
                let cout = rng.random_range(1..=4);
                let kernel = [1, 3, 5][rng.random_range(0..3)];
                let stride = rng.random_range(1..=2);
                let pad = PADDINGS[rng.random_range(0..4)];
                let hi = (max_dim / cin.max(cout)).max(kernel + 1);
                let len = rng.random_range(kernel.max(3)..=hi);
                Operator::conv1d(cin, cout, len, kernel, stride, pad, gaussian_vec(rng, cout * cin * kernel))?
            }
            OpKind::Conv2d => {
                let cin = rng.random_range(1..=2);
                let cout = rng.random_range(1..=3);
                let kh = [1, 3][rng.random_range(0..2)];
                let kw = [2, 3][rng.random_range(0..2)];
                let stride = (rng.random_range(1..=2), rng.random_range(1..=2));
                let pad = PADDINGS[rng.random_range(0..4)];
                let side = ((max_dim / cin.max(cout)) as f64).sqrt().floor().max(3.0) as usize;
                let h = rng.random_range(3..=side);
                let w = rng.random_range(3..=side);
                Operator::conv2d(cin, cout, (h, w), (kh, kw), stride, pad, gaussian_vec(rng, cout * cin * kh * kw))?
            }
            OpKind::Composition => {
                let len = rng.random_range(min_dim.max(3)..=max_dim.max(3));
                let conv = Operator::conv1d(1, 1, len, 3, 1, PADDINGS[rng.random_range(0..4)], gaussian_vec(rng, 3))?;
                let r = rng.random_range(min_dim..=max_dim);
                let dense = Operator::dense(r, conv.out_dim(), gaussian_vec(rng, r * conv.out_dim()))?;
                compose(vec![dense, conv])?
            }
        };
        if (min_dim..=max_dim).contains(&op.in_dim()) && (min_dim..=max_dim).contains(&op.out_dim()) {
            return Ok(op);
        }
    }
}
