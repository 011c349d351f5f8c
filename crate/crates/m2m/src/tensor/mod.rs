//! Dense row-major `f64` tensors plus the reverse-mode graph that consumes them.
//!
//! The engine is deliberately small: a [`Tensor`] is a shape and a flat buffer,
//! a [`Graph`] is a tape of operations built fresh for every forward pass, and
//! [`Graph::backward`] walks that tape once in reverse, accumulating gradients
//! into a [`GradStore`] that mirrors the persistent [`ParamStore`].
//!
//! Everything is `f64` and single-threaded; determinism falls out of the fixed
//! evaluation order.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod store;

pub use adam::{clip_gradients, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use store::{uniform_init, xavier_uniform, GradStore, ParamGroup, ParamId, ParamStore};

use thiserror::Error;

/// Errors produced by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range ({limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

/// Dense row-major tensor. The buffer length always equals the shape product.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("needs {expect} elements, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar extraction; errors unless the tensor holds exactly one element.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                op: "item",
                shape: self.shape.clone(),
            })
        }
    }

    pub fn is_finite_all(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// `out += a @ b` for row-major `a: [m,k]`, `b: [k,n]`, `out: [m,n]`.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a @ b^T` for `a: [m,n]`, `b: [k,n]`, `out: [m,k]`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (o, p) in orow.iter_mut().zip(0..k) {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a^T @ b` for `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidShape { .. }));
    }

    #[test]
    fn scalar_item_round_trip() {
        assert_eq!(Tensor::scalar(4.5).item().unwrap(), 4.5);
        assert!(Tensor::zeros(&[2]).item().is_err());
    }

    #[test]
    fn mm_nn_hand_case() {
        // [[1,2],[3,4]] @ [[1],[1]] == [[3],[7]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut out = [0.0; 2];
        mm_nn(&a, &b, 2, 2, 1, &mut out);
        assert_eq!(out, [3.0, 7.0]);
    }

    #[test]
    fn mm_variants_agree_with_explicit_transpose() {
        // a: [2,3], b: [4,3]; a @ b^T via mm_nt must equal mm_nn against
        // a manually transposed b.
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let mut bt = vec![0.0; 12];
        for r in 0..4 {
            for c in 0..3 {
                bt[c * 4 + r] = b[r * 3 + c];
            }
        }
        let mut out1 = vec![0.0; 8];
        let mut out2 = vec![0.0; 8];
        mm_nt(&a, &b, 2, 3, 4, &mut out1);
        mm_nn(&a, &bt, 2, 3, 4, &mut out2);
        for (x, y) in out1.iter().zip(out2.iter()) {
            assert!((x - y).abs() < 1e-14);
        }

        // a^T @ b2 via mm_tn against explicit transpose of a.
        let b2: Vec<f64> = (0..8).map(|v| (v as f64).cos()).collect();
        let mut at = vec![0.0; 6];
        for r in 0..2 {
            for c in 0..3 {
                at[c * 2 + r] = a[r * 3 + c];
            }
        }
        let mut out3 = vec![0.0; 12];
        let mut out4 = vec![0.0; 12];
        mm_tn(&a, &b2, 2, 3, 4, &mut out3);
        mm_nn(&at, &b2, 3, 2, 4, &mut out4);
        for (x, y) in out3.iter().zip(out4.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
