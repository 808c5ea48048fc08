//! Dense `f64` arrays and a Wengert-tape autodiff engine.
//!
//! [`Array`] is the detached container used for parameters, datasets and
//! results; it never receives gradients.  [`Tape`] records primitive ops as
//! they execute on [`Tensor`] handles and replays them in reverse for
//! gradients.  All arithmetic is double precision with fixed accumulation
//! order, so identical inputs give bitwise-identical outputs and gradients.

mod array;
mod fmt;
pub mod gradcheck;
mod kernels;
mod tape;

pub use array::Array;
pub use fmt::fmt_g17;
pub use tape::{Tape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: bad shape {shape:?}: {why}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        why: &'static str,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    Length {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

/// Reduction flavor shared by axis reductions and neighborhood aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Agg {
    Max,
    Sum,
    Mean,
}

/// Accumulation order for segmented row ops.
///
/// Rows of a `[seg*k, c]` tensor are grouped into `seg` contiguous blocks of
/// `k`; `rows[s*k..(s+1)*k]` lists block `s`'s row ids in the order they are
/// summed or compared.  Callers choose an order that is stable under
/// within-block permutations (e.g. sorted by neighbor point index) so that
/// segmented results are bitwise permutation-invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentOrder {
    pub seg: usize,
    pub k: usize,
    pub rows: Vec<u32>,
}

impl SegmentOrder {
    /// Blocks visited in natural row order.
    pub fn identity(seg: usize, k: usize) -> Self {
        SegmentOrder {
            seg,
            k,
            rows: (0..seg * k).map(|r| r as u32).collect(),
        }
    }

    /// Validated construction from an explicit row order.
    pub fn new(seg: usize, k: usize, rows: Vec<u32>) -> Result<Self, TensorError> {
        let order = SegmentOrder { seg, k, rows };
        order.validate()?;
        Ok(order)
    }

    /// Each block must hold a permutation of its own row range.
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.rows.len() != self.seg * self.k {
            return Err(TensorError::Length {
                op: "segment_order",
                shape: vec![self.seg, self.k],
                len: self.rows.len(),
            });
        }
        for s in 0..self.seg {
            let block = &self.rows[s * self.k..(s + 1) * self.k];
            let mut seen = vec![false; self.k];
            for &r in block {
                let r = r as usize;
                if r < s * self.k || r >= (s + 1) * self.k || seen[r - s * self.k] {
                    return Err(TensorError::Index {
                        op: "segment_order",
                        index: r,
                        bound: (s + 1) * self.k,
                    });
                }
                seen[r - s * self.k] = true;
            }
        }
        Ok(())
    }
}
