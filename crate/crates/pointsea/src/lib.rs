//! Searchable geometric convolutions on point clouds, desk scale.
//!
//! Everything is plain `f64` on the CPU: a small Wengert-tape autodiff core
//! (`tensor`), synthetic shape data with exact neighborhood ops (`data`),
//! the five essential-association primitives and their mixtures (`ea`),
//! the searchable convolution DAG (`conv`), the cell-based supernet (`net`),
//! bilevel search and retraining (`search`), and the on-disk formats
//! (`format`).  Every run is deterministic given its seed.

pub mod conv;
pub mod data;
pub mod ea;
pub mod format;
pub mod gradcheck;
pub mod net;
pub mod rng;
pub mod search;
pub mod tensor;
