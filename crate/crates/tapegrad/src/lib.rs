//! Tape-based reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! The design is a flat tape: every operation appends a node holding its
//! output value plus a backward closure. Calling [`Graph::backward`] on a
//! scalar node walks the tape in reverse and accumulates gradients into the
//! leaves that were registered with `requires_grad = true`.
//!
//! Everything is generic over [`Scalar`] so the same model code can run in
//! `f32` for training and `f64` for finite-difference gradient checks.

pub mod conv;
pub mod fd;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;

pub use graph::{Gradients, Graph, Var};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type usable on the tape (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
