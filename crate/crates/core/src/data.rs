//! Synthetic Gaussian-mixture datasets.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LabeledDataset, Partition};
use crate::rng::seeded;

/// Isotropic Gaussian clusters, one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub centroids: Vec<Vec<f64>>,
    /// Per-class standard deviation; a single entry applies to all classes.
    pub std: Vec<f64>,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.centroids.len();
        if k < 2 {
            return Err(Error::InvalidConfig("a mixture needs at least two classes".into()));
        }
        let d = self.centroids[0].len();
        if d == 0 || self.centroids.iter().any(|c| c.len() != d) {
            return Err(Error::InvalidConfig("centroids must share a positive dimension".into()));
        }
        if !(self.std.len() == 1 || self.std.len() == k) || self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("std must hold one positive value or one per class".into()));
        }
        Ok(())
    }

    fn std_of(&self, class: usize) -> f64 {
        if self.std.len() == 1 {
            self.std[0]
        } else {
            self.std[class]
        }
    }
}

/// Samples a mixture with `Train` and `Test` partitions, classes interleaved.
pub fn gaussian_mixture(spec: &MixtureSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let k = spec.centroids.len();
    let (mut inputs, mut labels, mut partitions) = (Vec::new(), Vec::new(), Vec::new());
    for (part, count) in [(Partition::Train, spec.train_per_class), (Partition::Test, spec.test_per_class)] {
        for _ in 0..count {
            for class in 0..k {
                let s = spec.std_of(class);
                let x: Vec<f64> = spec.centroids[class]
                    .iter()
                    .map(|c| c + s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                inputs.push(x);
                labels.push(class);
                partitions.push(part);
            }
        }
    }
    LabeledDataset::new(inputs, labels, partitions, k)
}

/// Picks a uniformly random `fraction` of the training samples as the forget set.
pub fn random_forget_split(data: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig("forget fraction must lie in (0, 1)".into()));
    }
    let mut train: Vec<usize> = (0..data.len()).filter(|&i| data.partitions[i].is_training()).collect();
    let count = ((train.len() as f64) * fraction).round().max(1.0) as usize;
    train.shuffle(&mut seeded(seed));
    let mut forget = train[..count].to_vec();
    forget.sort_unstable();
    Ok(data.with_forget(&forget))
}

/// Marks every training sample of `class` as forget and the rest as retain.
pub fn class_forget_split(data: &LabeledDataset, class: usize) -> LabeledDataset {
    let forget: Vec<usize> = (0..data.len())
        .filter(|&i| data.partitions[i].is_training() && data.labels[i] == class)
        .collect();
    data.with_forget(&forget)
}

/// Per-class centroids of the given samples (NaN rows for absent classes).
pub fn class_centroids(data: &LabeledDataset) -> Vec<Vec<f64>> {
    let d = data.inputs.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; data.num_classes];
    let mut counts = vec![0usize; data.num_classes];
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(x) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MixtureSpec {
        MixtureSpec {
            centroids: vec![vec![-3.0, 0.0], vec![3.0, 0.0]],
            std: vec![1.0],
            train_per_class: 50,
            test_per_class: 20,
        }
    }

    #[test]
    fn sizes_and_partitions() {
        let d = gaussian_mixture(&spec(), 1).unwrap();
        assert_eq!(d.len(), 140);
        assert_eq!(d.partition(Partition::Test).len(), 40);
        assert_eq!(gaussian_mixture(&spec(), 1).unwrap(), d);
    }

    #[test]
    fn forget_split_fraction() {
        let d = gaussian_mixture(&spec(), 2).unwrap();
        let s = random_forget_split(&d, 0.1, 3).unwrap();
        assert_eq!(s.partition(Partition::Forget).len(), 10);
        assert_eq!(s.partition(Partition::Retain).len(), 90);
        assert_eq!(s.partition(Partition::Test).len(), 40);
    }

    #[test]
    fn centroids_near_means() {
        let d = gaussian_mixture(&spec(), 4).unwrap();
        let c = class_centroids(&d);
        assert!((c[0][0] + 3.0).abs() < 0.5 && (c[1][0] - 3.0).abs() < 0.5);
    }

    #[test]
    fn class_split_marks_whole_class() {
        let d = class_forget_split(&gaussian_mixture(&spec(), 5).unwrap(), 1);
        let f = d.partition(Partition::Forget);
        assert_eq!(f.len(), 50);
        assert!(f.labels.iter().all(|&y| y == 1));
    }
}
