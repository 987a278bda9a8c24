//! Datasets, mini-batches, and the deterministic batch plan shared by every
//! training mode.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Labelled feature matrix, `n × d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    d: usize,
    k: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, d: usize, k: usize) -> Result<Self> {
        let n = labels.len();
        if n == 0 || d == 0 || k == 0 {
            return Err(Error::config("dataset needs n, d, k >= 1"));
        }
        if features.len() != n * d {
            return Err(Error::Shape(format!(
                "{} features for {n} rows of width {d}",
                features.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::config(format!("label {bad} out of range for k={k}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset features must be finite".into()));
        }
        Ok(Dataset {
            features,
            labels,
            d,
            k,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Splits off the rows from `at` onwards into a second dataset.
    pub fn split_at(&self, at: usize) -> Result<(Dataset, Dataset)> {
        if at == 0 || at >= self.n() {
            return Err(Error::config(format!(
                "split point {at} must lie strictly inside 0..{}",
                self.n()
            )));
        }
        let head = Dataset::new(
            self.features[..at * self.d].to_vec(),
            self.labels[..at].to_vec(),
            self.d,
            self.k,
        )?;
        let tail = Dataset::new(
            self.features[at * self.d..].to_vec(),
            self.labels[at..].to_vec(),
            self.d,
            self.k,
        )?;
        Ok((head, tail))
    }
}

/// Ordered, duplicate-free subset of dataset rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    indices: Vec<usize>,
}

impl Batch {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::config("batch must not be empty"));
        }
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n {
                return Err(Error::config(format!(
                    "batch index {i} out of range 0..{n}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::config(format!("batch index {i} repeated")));
            }
        }
        Ok(Batch { indices })
    }

    /// Every row of `data`, in order.
    pub fn full(data: &Dataset) -> Self {
        Batch {
            indices: (0..data.n()).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Splits into `parts` equal contiguous sub-batches.
    pub fn split(&self, parts: usize) -> Result<Vec<Batch>> {
        if parts == 0 || !self.len().is_multiple_of(parts) {
            return Err(Error::config(format!(
                "batch of {} cannot be split into {parts} equal parts",
                self.len()
            )));
        }
        Ok(self
            .indices
            .chunks(self.len() / parts)
            .map(|c| Batch {
                indices: c.to_vec(),
            })
            .collect())
    }
}

/// `k` Gaussian clusters with unit noise. Class means sit `separation` apart
/// (exactly, on orthogonal axes, when `k <= d`; approximately, on random unit
/// directions, otherwise). Labels are balanced to within one.
pub fn gen_synthetic(seed: u64, n: usize, d: usize, k: usize, separation: f64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::config_field("k", "need at least two classes"));
    }
    if n < k {
        return Err(Error::config_field(
            "n",
            format!("n={n} is smaller than k={k}"),
        ));
    }
    if d == 0 {
        return Err(Error::config_field(
            "d",
            "feature dimension must be positive",
        ));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::config_field("separation", "must be finite and >= 0"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = separation / std::f64::consts::SQRT_2;
    let mut means = vec![0.0; k * d];
    for c in 0..k {
        let mu = &mut means[c * d..(c + 1) * d];
        if k <= d {
            mu[c] = radius;
        } else {
            let mut norm = 0.0;
            for v in mu.iter_mut() {
                *v = rng.sample(StandardNormal);
                norm += *v * *v;
            }
            let scale = radius / norm.sqrt().max(f64::MIN_POSITIVE);
            mu.iter_mut().for_each(|v| *v *= scale);
        }
    }

    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * d);
    for &y in &labels {
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(means[y * d + j] + noise);
        }
    }
    Dataset::new(features, labels, d, k)
}

/// Assigns mini-batches to workers. Each epoch draws a fresh seeded
/// permutation of the training rows; global iteration `j` of the epoch takes
/// the slice `[j·M·b, (j+1)·M·b)` and worker `m` gets the `m`-th sub-slice of
/// width `b`. A single worker with batch `M·b` therefore sees exactly the
/// union of what the `M` workers see.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    n: usize,
    workers: usize,
    batch: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(n: usize, workers: usize, batch: usize, seed: u64) -> Result<Self> {
        if workers == 0 {
            return Err(Error::config_field("cluster.workers", "must be >= 1"));
        }
        if batch == 0 {
            return Err(Error::config_field("train.batch", "must be >= 1"));
        }
        if workers * batch > n {
            return Err(Error::config_field(
                "train.batch",
                format!("{workers} workers x batch {batch} exceeds {n} training rows"),
            ));
        }
        Ok(BatchPlan {
            n,
            workers,
            batch,
            seed,
        })
    }

    pub fn iters_per_epoch(&self) -> u64 {
        (self.n / (self.workers * self.batch)) as u64
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(epoch),
        );
        order.shuffle(&mut rng);
        order
    }

    /// Batch for `worker` at global iteration `iter` (counted from zero
    /// across epochs), given that epoch's permutation.
    pub fn worker_batch(&self, order: &[usize], iter: u64, worker: usize) -> Batch {
        let j = (iter % self.iters_per_epoch()) as usize;
        let start = j * self.workers * self.batch + worker * self.batch;
        Batch {
            indices: order[start..start + self.batch].to_vec(),
        }
    }

    /// The union of all workers' batches at `iter`.
    pub fn global_batch(&self, order: &[usize], iter: u64) -> Batch {
        let j = (iter % self.iters_per_epoch()) as usize;
        let width = self.workers * self.batch;
        Batch {
            indices: order[j * width..(j + 1) * width].to_vec(),
        }
    }

    pub fn epoch_of(&self, iter: u64) -> u64 {
        iter / self.iters_per_epoch()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_seed_sensitive() {
        let a = gen_synthetic(7, 100, 2, 2, 4.0).unwrap();
        let b = gen_synthetic(7, 100, 2, 2, 4.0).unwrap();
        let c = gen_synthetic(8, 100, 2, 2, 4.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.row(0), c.row(0));
    }

    #[test]
    fn synthetic_labels_balanced() {
        let ds = gen_synthetic(1, 103, 3, 4, 2.0).unwrap();
        let mut counts = [0usize; 4];
        ds.labels().iter().for_each(|&y| counts[y] += 1);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn synthetic_rejects_bad_dims() {
        assert!(matches!(
            gen_synthetic(0, 10, 2, 1, 1.0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            gen_synthetic(0, 2, 2, 3, 1.0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            gen_synthetic(0, 10, 0, 2, 1.0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            gen_synthetic(0, 10, 2, 2, f64::NAN),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn synthetic_means_follow_separation() {
        // Empirical class means should sit ~separation apart.
        let ds = gen_synthetic(3, 4000, 2, 2, 6.0).unwrap();
        let mut mean = [[0.0; 2]; 2];
        let mut cnt = [0.0; 2];
        for i in 0..ds.n() {
            let y = ds.label(i);
            cnt[y] += 1.0;
            for (m, x) in mean[y].iter_mut().zip(ds.row(i)) {
                *m += x;
            }
        }
        let dist = ((mean[0][0] / cnt[0] - mean[1][0] / cnt[1]).powi(2)
            + (mean[0][1] / cnt[0] - mean[1][1] / cnt[1]).powi(2))
        .sqrt();
        assert!((dist - 6.0).abs() < 0.2, "{dist}");
    }

    #[test]
    fn batch_validation() {
        assert!(Batch::new(vec![0, 1, 1], 5).is_err());
        assert!(Batch::new(vec![5], 5).is_err());
        assert!(Batch::new(vec![], 5).is_err());
        let b = Batch::new(vec![3, 1, 4, 0], 5).unwrap();
        let parts = b.split(2).unwrap();
        assert_eq!(parts[0].indices(), &[3, 1]);
        assert_eq!(parts[1].indices(), &[4, 0]);
        assert!(b.split(3).is_err());
    }

    #[test]
    fn batch_plan_worker_slices_tile_global_batch() {
        let plan = BatchPlan::new(100, 4, 5, 11).unwrap();
        assert_eq!(plan.iters_per_epoch(), 5);
        let order = plan.epoch_order(2);
        for it in 10..15 {
            let global = plan.global_batch(&order, it);
            let joined: Vec<usize> = (0..4)
                .flat_map(|m| plan.worker_batch(&order, it, m).indices().to_vec())
                .collect();
            assert_eq!(global.indices(), &joined[..]);
        }
        assert_ne!(plan.epoch_order(0), plan.epoch_order(1));
        assert!(BatchPlan::new(10, 4, 3, 0).is_err());
    }
}
