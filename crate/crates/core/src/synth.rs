//! Synthetic clustered feature sets.
//!
//! Gaussian clusters stand in for image classes: every cluster gets a random
//! center of roughly unit norm, items scatter around it, and training views
//! are produced with [`FeatureAugmentation`]. Optionally a fraction of the
//! training set is duplicated with a tiny jitter; a duplicate and its source
//! drawn into the same batch are a guaranteed false negative.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::evaluation::LabelSet;
use crate::store::{write_features, FeatureSet, Manifest};
use crate::trainer::FeatureAugmentation;

/// Query ids start here so they never collide with training ids.
pub const QUERY_ID_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub clusters: usize,
    pub dim: usize,
    pub train_per_cluster: usize,
    pub query_per_cluster: usize,
    /// Norm scale of the within-cluster scatter relative to the unit-scale
    /// centers.
    pub spread: f64,
    /// Fraction of training items that get a near-duplicate.
    pub duplicate_fraction: f64,
    /// Augmented view pairs materialized per training item.
    pub view_pairs: usize,
    pub augmentation: FeatureAugmentation,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            clusters: 10,
            dim: 64,
            train_per_cluster: 200,
            query_per_cluster: 20,
            spread: 1.2,
            duplicate_fraction: 0.0,
            view_pairs: 1,
            augmentation: FeatureAugmentation::default(),
            seed: 0,
        }
    }
}

/// Train (augmented views), database (clean view of every original training
/// item) and query splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: FeatureSet,
    pub database: FeatureSet,
    pub query: FeatureSet,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

pub fn clustered(spec: &ClusterSpec) -> Result<SyntheticData> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;
    let unit = 1.0 / (dim as f64).sqrt();
    let centers: Vec<Vec<f64>> = (0..spec.clusters).map(|_| gaussian(&mut rng, dim, unit)).collect();
    let sample = |rng: &mut ChaCha8Rng, c: usize| -> Vec<f32> {
        let noise = gaussian(rng, dim, spec.spread * unit);
        centers[c].iter().zip(noise).map(|(a, b)| (a + b) as f32).collect()
    };

    let mut clean = Vec::new();
    for c in 0..spec.clusters {
        for _ in 0..spec.train_per_cluster {
            clean.push((c, sample(&mut rng, c)));
        }
    }
    let mut queries = Vec::new();
    for c in 0..spec.clusters {
        for _ in 0..spec.query_per_cluster {
            queries.push((c, sample(&mut rng, c)));
        }
    }
    let duplicates = (spec.duplicate_fraction * clean.len() as f64).round() as usize;
    let mut train_items = clean.clone();
    for _ in 0..duplicates {
        let (c, source) = &clean[rng.random_range(0..clean.len())];
        let jitter = gaussian(&mut rng, dim, 0.01 * unit);
        let copy = source.iter().zip(jitter).map(|(&a, b)| (a as f64 + b) as f32).collect();
        train_items.push((*c, copy));
    }

    let labels = |c: usize| LabelSet::from_labels(spec.clusters, &[c]);
    let views = 2 * spec.view_pairs;
    let mut train = FeatureSet::new(views, dim, spec.clusters)?;
    let mut database = FeatureSet::new(1, dim, spec.clusters)?;
    let mut query = FeatureSet::new(1, dim, spec.clusters)?;
    for (i, (c, x)) in train_items.iter().enumerate() {
        let mut values = Vec::with_capacity(views * dim);
        for _ in 0..views {
            values.extend(spec.augmentation.apply(x, &mut rng));
        }
        train.push(i as u64, labels(*c)?, &values)?;
    }
    for (i, (c, x)) in clean.iter().enumerate() {
        database.push(i as u64, labels(*c)?, x)?;
    }
    for (i, (c, x)) in queries.iter().enumerate() {
        query.push(QUERY_ID_OFFSET + i as u64, labels(*c)?, x)?;
    }
    Ok(SyntheticData { train, database, query })
}

/// Writes the three splits and a manifest into `dir`; returns the manifest
/// path.
pub fn write_dataset(dir: &Path, name: &str, data: &SyntheticData, map_at: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    write_features(&dir.join("train.fpq"), &data.train)?;
    write_features(&dir.join("query.fpq"), &data.query)?;
    write_features(&dir.join("database.fpq"), &data.database)?;
    let manifest = Manifest {
        name: name.to_string(),
        train: "train.fpq".into(),
        query: "query.fpq".into(),
        database: "database.fpq".into(),
        map_at,
        exclude_query_from_database: false,
        vocabulary: (0..data.train.vocab()).map(|c| format!("cluster{c}")).collect(),
    };
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let spec = ClusterSpec {
            clusters: 3,
            dim: 8,
            train_per_cluster: 10,
            query_per_cluster: 2,
            duplicate_fraction: 0.2,
            ..ClusterSpec::default()
        };
        let data = clustered(&spec).unwrap();
        assert_eq!(data.train.len(), 36);
        assert_eq!(data.train.views(), 2);
        assert_eq!(data.database.len(), 30);
        assert_eq!(data.query.len(), 6);
        assert_eq!(data.query.item_id(0), QUERY_ID_OFFSET);
        assert_eq!(clustered(&spec).unwrap(), data);
        assert_ne!(data.train.view(0, 0), data.train.view(0, 1));
    }
}
