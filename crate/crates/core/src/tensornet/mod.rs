//! Small reverse-mode autodiff engine over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output and
//! whatever the backward pass needs. Trainable weights live in a
//! [`ParamStore`]; a graph copies them in with [`Graph::param`] and hands the
//! gradients back with [`Graph::accumulate_into`]. Most ops work on 2-D
//! `[rows, cols]` tensors.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{BatchStats, Graph, Var, BATCHNORM_EPS, COSINE_EPS};
pub use params::{kaiming_uniform, AdamConfig, AdamState, ParamId, ParamStore};

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                reason: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_2d(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }
}

/// Sum that does not depend on the order of `vals`, bit for bit. Pooling and
/// batch statistics use it so record permutations give identical outputs.
///
/// Every value is truncated onto a common fixed-point grid 70 bits below the
/// leading bit of the largest magnitude, and the integers are added exactly in
/// `i128`. The truncation error is far below that of plain `f64` summation.
pub(crate) fn order_free_sum(vals: &[f64]) -> f64 {
    let mut max = 0.0f64;
    for &v in vals {
        if !v.is_finite() {
            return vals.iter().sum();
        }
        max = max.max(v.abs());
    }
    if max == 0.0 {
        return 0.0;
    }
    let exp_of = |bits: u64| (((bits >> 52) & 0x7ff) as i32).max(1) - 1075;
    // grid spacing 2^grid, 70 bits below the leading bit of the largest value
    let grid = exp_of(max.to_bits()) + 52 - 70;
    let acc: i128 = vals
        .iter()
        .map(|&v| {
            let bits = v.to_bits();
            let frac = bits & ((1u64 << 52) - 1);
            let m = if (bits >> 52) & 0x7ff == 0 { frac } else { frac | (1u64 << 52) };
            let k = exp_of(bits) - grid;
            let mag = if k >= 0 {
                (m as i128) << k
            } else if k > -64 {
                (m >> -k) as i128
            } else {
                0
            };
            if v.is_sign_negative() {
                -mag
            } else {
                mag
            }
        })
        .sum();
    // scale back in two steps so neither factor overflows
    let half = grid / 2;
    acc as f64 * 2f64.powi(half) * 2f64.powi(grid - half)
}

const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m,n] = a[m,k] · b[k,n]`. Each output row is accumulated in a fixed
/// order, so results do not depend on the thread count.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |(i, out): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &x) in ar.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &y) in out.iter_mut().zip(br) {
                *o += x * y;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n.max(1)).enumerate().for_each(row);
    } else {
        c.chunks_mut(n.max(1)).enumerate().for_each(row);
    }
    c
}

/// `c[k,n] = a[m,k]ᵀ · b[m,n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    let row = |(p, out): (usize, &mut [f64])| {
        for i in 0..m {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            for (o, &y) in out.iter_mut().zip(br) {
                *o += x * y;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        c.par_chunks_mut(n.max(1)).enumerate().for_each(row);
    } else {
        c.chunks_mut(n.max(1)).enumerate().for_each(row);
    }
    c
}

/// `c[m,k] = a[m,n] · b[k,n]ᵀ`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    let row = |(i, out): (usize, &mut [f64])| {
        let ar = &a[i * n..(i + 1) * n];
        for (p, o) in out.iter_mut().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            *o = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(k.max(1)).enumerate().for_each(row);
    } else {
        c.chunks_mut(k.max(1)).enumerate().for_each(row);
    }
    c
}
