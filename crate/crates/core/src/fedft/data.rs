//! Synthetic Gaussian class-conditional data, sharded i.i.d. across devices.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

/// Samples with integer labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// One device's local shard plus its minibatch size.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDataset {
    pub data: Dataset,
    pub batch_size: usize,
}

impl DeviceDataset {
    pub fn new(data: Dataset, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > data.len() {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be in 1..={}",
                data.len()
            )));
        }
        Ok(Self { data, batch_size })
    }

    /// Minibatch drawn without replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Dataset {
        let idx = sample(rng, self.data.len(), self.batch_size).into_vec();
        self.data.select(&idx)
    }
}

/// A mixture of isotropic Gaussians, one mean per class.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub means: Array2<f64>,
    pub noise_std: f64,
}

impl GaussianMixture {
    /// Class means with entries `N(0, separation^2 / input_dim)`, so the
    /// expected distance between two means is about `separation * sqrt(2)`.
    pub fn new<R: Rng + ?Sized>(
        num_classes: usize,
        input_dim: usize,
        separation: f64,
        noise_std: f64,
        rng: &mut R,
    ) -> Self {
        let scale = separation / (input_dim as f64).sqrt();
        let means = Array2::from_shape_fn((num_classes, input_dim), |_| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Self { means, noise_std }
    }

    pub fn num_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let dim = self.means.ncols();
        let noise = Normal::new(0.0, self.noise_std).expect("noise std is finite and >= 0");
        let labels: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..self.num_classes()))
            .collect();
        let mut features = Array2::zeros((n, dim));
        for (mut row, &y) in features.outer_iter_mut().zip(&labels) {
            let mean: Array1<f64> = self.means.row(y).to_owned();
            for (v, m) in row.iter_mut().zip(mean.iter()) {
                *v = m + noise.sample(rng);
            }
        }
        Dataset { features, labels }
    }
}

/// Splits a pool into `num_devices` disjoint shards of `shard_size` samples.
pub fn shard(pool: &Dataset, num_devices: usize, shard_size: usize) -> Result<Vec<Dataset>> {
    if shard_size == 0 || num_devices * shard_size > pool.len() {
        return Err(Error::Config(format!(
            "cannot cut {num_devices} shards of {shard_size} from a pool of {}",
            pool.len()
        )));
    }
    Ok((0..num_devices)
        .map(|k| {
            let idx: Vec<usize> = (k * shard_size..(k + 1) * shard_size).collect();
            pool.select(&idx)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shards_are_disjoint_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mix = GaussianMixture::new(3, 4, 2.0, 1.0, &mut rng);
        let pool = mix.sample(100, &mut rng);
        let shards = shard(&pool, 20, 5).unwrap();
        assert_eq!(shards.len(), 20);
        assert!(shards.iter().all(|s| s.len() == 5));
        assert_eq!(shards[3].features.row(0), pool.features.row(15));
        assert!(shard(&pool, 21, 5).is_err());
    }

    #[test]
    fn batches_respect_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mix = GaussianMixture::new(2, 3, 1.0, 1.0, &mut rng);
        let dev = DeviceDataset::new(mix.sample(10, &mut rng), 4).unwrap();
        let b = dev.sample_batch(&mut rng);
        assert_eq!(b.features.nrows(), 4);
        assert!(DeviceDataset::new(mix.sample(3, &mut rng), 4).is_err());
    }

    #[test]
    fn class_means_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mix = GaussianMixture::new(2, 2, 5.0, 0.5, &mut rng);
        let data = mix.sample(20_000, &mut rng);
        for c in 0..2 {
            let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
            let mean = data.select(&idx).features.mean_axis(Axis(0)).unwrap();
            for (a, b) in mean.iter().zip(mix.means.row(c)) {
                assert!((a - b).abs() < 0.03);
            }
        }
    }
}
