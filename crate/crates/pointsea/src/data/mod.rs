//! Synthetic point clouds: shape generators, exact neighborhood geometry,
//! augmentation, and a binary on-disk format.

mod augment;
mod io;
mod neighbors;
mod shapes;

pub use augment::{apply_affine, augment};
pub use io::{load_dataset, save_dataset};
pub use neighbors::{all_pairs, fps, knn, pair_index, Neighborhood, PairIndex};
pub use shapes::Shape;

use crate::rng::{stream_rng, Stream};
use crate::tensor::Array;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset at byte {offset}: {what}")]
    Parse { offset: u64, what: String },
    #[error("unsupported dataset version {found} (expected {expect})")]
    Version { found: u32, expect: u32 },
    #[error("{op}: {what}")]
    Geometry { op: &'static str, what: String },
}

/// One cloud: `points` is an `[n, 3]` row-major coordinate table.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudSample {
    pub points: Array,
    pub label: u32,
    pub id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PointCloudSample>,
    /// Points per cloud, constant across the dataset.
    pub points: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label as usize + 1).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub shapes: Vec<Shape>,
    /// Points per cloud.
    pub points: usize,
    pub per_class: usize,
    /// Std dev of isotropic Gaussian jitter applied before normalization.
    pub noise: f64,
    pub seed: u64,
    /// Train / val / test fractions; must sum to 1.
    pub fractions: (f64, f64, f64),
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.shapes.is_empty() {
            return Err(DataError::Config("no shape classes configured".into()));
        }
        let mut seen = Vec::new();
        for s in &self.shapes {
            if seen.contains(s) {
                return Err(DataError::Config(format!("duplicate shape class {s}")));
            }
            seen.push(*s);
        }
        if self.points < 3 {
            return Err(DataError::Config(format!("points per cloud {} < 3", self.points)));
        }
        if self.per_class == 0 {
            return Err(DataError::Config("samples per class is zero".into()));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(DataError::Config(format!("noise {} out of range", self.noise)));
        }
        let (tr, va, te) = self.fractions;
        let sum = tr + va + te;
        if !(tr >= 0.0 && va >= 0.0 && te >= 0.0 && (sum - 1.0).abs() <= 1e-9) {
            return Err(DataError::Config(format!(
                "fractions ({tr}, {va}, {te}) must be nonnegative and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Deterministic generation: class-major, sample-minor, one rng stream.
pub fn generate(config: &DatasetConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let rng = &mut stream_rng(config.seed, Stream::Dataset);
    let mut samples = Vec::with_capacity(config.shapes.len() * config.per_class);
    let mut id = 0u32;
    for (class, &shape) in config.shapes.iter().enumerate() {
        for _ in 0..config.per_class {
            let mut pts = shapes::sample_shape(shape, rng, config.points);
            for p in pts.iter_mut() {
                for c in p.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *c += config.noise * z;
                }
            }
            shapes::normalize(&mut pts);
            let flat: Vec<f64> = pts.iter().flat_map(|p| p.to_vec()).collect();
            samples.push(PointCloudSample {
                points: Array::new(vec![config.points, 3], flat).expect("n*3 coordinates"),
                label: class as u32,
                id,
            });
            id += 1;
        }
    }
    Ok(Dataset { samples, points: config.points })
}

/// Index sets into `Dataset::samples`, disjoint and exhaustive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// Stratified split: each class is shuffled and cut by the fractions, so
/// class balance carries into every split.
pub fn split(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> SplitIndices {
    let rng = &mut stream_rng(seed, Stream::Split);
    let classes = ds.num_classes();
    let mut out = SplitIndices { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for class in 0..classes {
        let mut idx: Vec<u32> = ds
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label as usize == class)
            .map(|(i, _)| i as u32)
            .collect();
        idx.shuffle(rng);
        let c = idx.len();
        let n_train = ((fractions.0 * c as f64).round() as usize).min(c);
        let n_val = ((fractions.1 * c as f64).round() as usize).min(c - n_train);
        out.train.extend(&idx[..n_train]);
        out.val.extend(&idx[n_train..n_train + n_val]);
        out.test.extend(&idx[n_train + n_val..]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> DatasetConfig {
        DatasetConfig {
            shapes: vec![Shape::Sphere, Shape::Cube, Shape::Torus, Shape::Cone],
            points: 64,
            per_class: 10,
            noise: 0.02,
            seed: 42,
            fractions: (0.5, 0.25, 0.25),
        }
    }

    #[test]
    fn generate_counts_labels_and_ids() {
        let ds = generate(&config()).unwrap();
        assert_eq!(ds.samples.len(), 40);
        assert_eq!(ds.points, 64);
        assert_eq!(ds.num_classes(), 4);
        let mut hist = [0usize; 4];
        for (i, s) in ds.samples.iter().enumerate() {
            assert_eq!(s.id, i as u32);
            hist[s.label as usize] += 1;
            assert_eq!(s.points.shape(), &[64, 3]);
        }
        assert_eq!(hist, [10, 10, 10, 10]);
    }

    #[test]
    fn generate_is_bitwise_deterministic() {
        let a = generate(&config()).unwrap();
        let b = generate(&config()).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            let xb: Vec<u64> = x.points.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.points.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let mut other = config();
        other.seed = 43;
        let c = generate(&other).unwrap();
        assert_ne!(a.samples[0].points.data(), c.samples[0].points.data());
    }

    #[test]
    fn generated_clouds_are_centered_and_bounded() {
        let ds = generate(&config()).unwrap();
        for s in &ds.samples {
            let d = s.points.data();
            let n = ds.points as f64;
            for axis in 0..3 {
                let c: f64 = (0..ds.points).map(|i| d[i * 3 + axis]).sum::<f64>() / n;
                assert!(c.abs() <= 1e-9, "centroid axis {axis} = {c}");
            }
            for i in 0..ds.points {
                let r = (d[i * 3].powi(2) + d[i * 3 + 1].powi(2) + d[i * 3 + 2].powi(2)).sqrt();
                assert!(r <= 1.0 + 1e-9, "radius {r}");
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let mut c = config();
        c.shapes.clear();
        assert!(generate(&c).is_err());
        let mut c = config();
        c.shapes = vec![Shape::Sphere, Shape::Sphere];
        assert!(c.validate().is_err());
        let mut c = config();
        c.fractions = (0.5, 0.5, 0.5);
        assert!(c.validate().is_err());
        let mut c = config();
        c.noise = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_is_stratified_disjoint_and_deterministic() {
        let ds = generate(&config()).unwrap();
        let s = split(&ds, (0.5, 0.25, 0.25), 7);
        // Per class of 10: round(5.0)=5 train, round(2.5)=3 val, rest test.
        assert_eq!(s.train.len(), 20);
        assert_eq!(s.val.len(), 12);
        assert_eq!(s.test.len(), 8);
        for class in 0..4u32 {
            let per = |v: &[u32]| v.iter().filter(|&&i| ds.samples[i as usize].label == class).count();
            assert_eq!(per(&s.train), 5);
            assert_eq!(per(&s.val), 3);
            assert_eq!(per(&s.test), 2);
        }
        let mut all: Vec<u32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<u32>>());
        assert_eq!(split(&ds, (0.5, 0.25, 0.25), 7), s);
        assert_ne!(split(&ds, (0.5, 0.25, 0.25), 8), s);
    }
}
