//! Dense 64-bit float tensors and a reverse-mode autodiff graph.
//!
//! Tensors are row-major `Vec<f64>` buffers with an explicit shape. A
//! [`Graph`] records every operation applied to its nodes and replays the
//! chain rule backwards on demand. Graphs are cheap, thread-confined, and
//! built per sequence; parameters live outside the graph and are borrowed
//! into it, so no weight data is copied per forward pass.
//!
//! All reductions run in a fixed left-to-right order, so results are
//! bitwise reproducible for identical inputs regardless of how callers
//! schedule independent graphs across threads.

mod graph;

pub use graph::{Graph, NodeId};

use crate::error::{Error, Result};

/// Dense row-major tensor. `grad` holds the accumulated gradient for
/// parameter tensors; it is `None` until gradients are first requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::InvalidArgument {
                op: "Tensor::new",
                what: format!("shape {:?} does not match buffer length {}", shape, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x], requires_grad: false, grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Marks the tensor as a differentiation target.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `scale * delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64], scale: f64) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += scale * di;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Applies `data[i] -= step[i]` (used by optimizers).
    pub fn apply_update(&mut self, step: &[f64]) -> Result<()> {
        if step.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "apply_update",
                lhs: self.shape.clone(),
                rhs: vec![step.len()],
            });
        }
        for (x, s) in self.data.iter_mut().zip(step) {
            *x -= s;
        }
        Ok(())
    }
}

/// Rescales a set of gradient buffers so their joint L2 norm is at most
/// `max_norm`, leaving direction unchanged. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument {
            op: "clip_global_norm",
            what: format!("max_norm must be positive, got {max_norm}"),
        });
    }
    let mut sq = 0.0;
    for buf in grads.iter() {
        for &g in buf.iter() {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for buf in grads.iter_mut() {
            for g in buf.iter_mut() {
                *g *= scale;
            }
        }
    }
    Ok(norm)
}
