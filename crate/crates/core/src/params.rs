//! Learnable parameter tensors and initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Value};

/// A persistent parameter matrix. Registered on a fresh tape each step; the
/// optimizer writes updates back into `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Register this parameter as a tracked leaf on `tape`.
    pub fn tracked(&self, tape: &Tape) -> Value {
        tape.leaf(self.rows, self.cols, self.data.clone())
    }
}

/// Xavier/Glorot uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> ParamTensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    ParamTensor {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
    }
}
