//! Train-time augmentation: anisotropic scaling and translation, keyed per
//! (seed, sample, epoch) so epochs reshuffle geometry deterministically.

use rand::Rng;

use super::PointCloudSample;
use crate::rng::augment_rng;
use crate::tensor::Array;

pub const SCALE_LO: f64 = 2.0 / 3.0;
pub const SCALE_HI: f64 = 1.5;
pub const SHIFT_MAX: f64 = 0.2;

/// p' = p ⊙ scale + shift, label and id untouched.
pub fn apply_affine(sample: &PointCloudSample, scale: [f64; 3], shift: [f64; 3]) -> PointCloudSample {
    let n = sample.points.shape()[0];
    let src = sample.points.data();
    let mut data = Vec::with_capacity(src.len());
    for i in 0..n {
        for a in 0..3 {
            data.push(src[i * 3 + a] * scale[a] + shift[a]);
        }
    }
    PointCloudSample {
        points: Array::new(vec![n, 3], data).expect("same element count"),
        label: sample.label,
        id: sample.id,
    }
}

/// Random affine jitter with per-axis scale in [2/3, 3/2] and translation
/// in [-0.2, 0.2]³.
pub fn augment(sample: &PointCloudSample, seed: u64, epoch: u64) -> PointCloudSample {
    let rng = &mut augment_rng(seed, sample.id as u64, epoch);
    let mut scale = [0.0; 3];
    for s in scale.iter_mut() {
        *s = rng.gen_range(SCALE_LO..SCALE_HI);
    }
    let mut shift = [0.0; 3];
    for t in shift.iter_mut() {
        *t = rng.gen_range(-SHIFT_MAX..SHIFT_MAX);
    }
    apply_affine(sample, scale, shift)
}
