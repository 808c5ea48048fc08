use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{fmt_g17, TensorError};

/// Detached dense array: shape plus row-major `f64` storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::Length {
                op: "array_new",
                shape,
                len: data.len(),
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| rng.gen_range(lo..hi)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }

    /// Row-major text dump, one matrix row per line, `%.17g` per value.
    /// Rank 0 and 1 print on a single line; higher ranks flatten all but the
    /// last axis into rows.
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# shape:");
        if self.shape.is_empty() {
            out.push_str(" scalar");
        }
        for d in &self.shape {
            out.push(' ');
            out.push_str(&d.to_string());
        }
        out.push('\n');
        let cols = *self.shape.last().unwrap_or(&1).max(&1);
        let cols = if self.shape.len() <= 1 {
            self.data.len().max(1)
        } else {
            cols
        };
        for row in self.data.chunks(cols.max(1)) {
            let line: Vec<String> = row.iter().map(|&v| fmt_g17(v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}
