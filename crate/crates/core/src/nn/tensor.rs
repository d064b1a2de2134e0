//! Dense f32 tensors with explicit shapes.
//!
//! The batch dimension is always dim 0 of a [`Tensor`]; [`TensorShape`]
//! describes a single example (channels, height, width, or a flat length).

use serde::{Deserialize, Serialize};

use super::NnError;

/// Shape of one example, without the batch dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub dims: Vec<usize>,
}

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Self {
        assert!(!dims.is_empty() && dims.iter().all(|&d| d >= 1), "dims must be >= 1");
        Self { dims }
    }

    pub fn chw(c: usize, h: usize, w: usize) -> Self {
        Self::new(vec![c, h, w])
    }

    pub fn flat(n: usize) -> Self {
        Self::new(vec![n])
    }

    /// Element count of one example.
    pub fn elems(&self) -> usize {
        self.dims.iter().product()
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// A batch of examples stored contiguously, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub batch: usize,
    pub shape: TensorShape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(batch: usize, shape: TensorShape) -> Self {
        let n = batch * shape.elems();
        Self { batch, shape, data: vec![0.0; n] }
    }

    pub fn from_data(batch: usize, shape: TensorShape, data: Vec<f32>) -> Result<Self, NnError> {
        if data.len() != batch * shape.elems() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} x {}", batch, shape),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Self { batch, shape, data })
    }

    /// Elements of one example.
    pub fn example_elems(&self) -> usize {
        self.shape.elems()
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let n = self.example_elems();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn example_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.example_elems();
        &mut self.data[i * n..(i + 1) * n]
    }
}
