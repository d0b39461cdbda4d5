//! Frozen feature map standing in for a pre-trained base network: a seeded
//! random projection followed by a rectifier. Only the softmax head on top
//! of it is ever trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::LabeledBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    raw_dim: usize,
    feature_dim: usize,
    /// Row-major `raw_dim x feature_dim`.
    projection: Vec<f64>,
    seed: u64,
}

impl FeatureExtractor {
    /// Projection entries are standard normal scaled by `1/sqrt(raw_dim)`.
    pub fn new(raw_dim: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if raw_dim == 0 || feature_dim == 0 {
            return Err(Error::Config("extractor dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (raw_dim as f64).sqrt();
        let projection = (0..raw_dim * feature_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            raw_dim,
            feature_dim,
            projection,
            seed,
        })
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn extract(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.raw_dim {
            return Err(Error::Contract(format!(
                "raw vector has length {}, extractor expects {}",
                raw.len(),
                self.raw_dim
            )));
        }
        let mut out = vec![0.0; self.feature_dim];
        for (r, row) in raw.iter().zip(self.projection.chunks_exact(self.feature_dim)) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += r * p;
            }
        }
        for o in &mut out {
            *o = o.max(0.0);
        }
        Ok(out)
    }

    /// Features for every row of `raw`, paired with `labels`.
    pub fn extract_batch(&self, raw: &[Vec<f64>], labels: &[usize]) -> Result<LabeledBatch> {
        let mut flat = Vec::with_capacity(raw.len() * self.feature_dim);
        for r in raw {
            flat.extend(self.extract(r)?);
        }
        LabeledBatch::from_flat(self.feature_dim, flat, labels.to_vec())
    }
}
