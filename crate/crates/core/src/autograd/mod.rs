//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a write-once tape ([`Graph`]) of typed
//! operations, dense row-major [`Tensor`] values, and one reverse sweep that
//! produces exact gradients for parameters and watched intermediates alike.
//! Everything runs in 64-bit floats, every forward value is checked finite,
//! and all randomness (dropout masks) is drawn from explicit seeds, so
//! replaying a computation is bit-for-bit reproducible.

mod graph;
mod ops;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, Value};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape {shape:?} does not match {len} data elements")]
    ShapeData { shape: Vec<usize>, len: usize },

    #[error("{op}: operand shapes {lhs:?} and {rhs:?} do not conform")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("slice [{start}, {start}+{len}) outside axis of length {axis_len}")]
    BadSlice {
        start: usize,
        len: usize,
        axis_len: usize,
    },

    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("values belong to different graphs (op `{op}`)")]
    GraphMismatch { op: &'static str },

    #[error("dropout probability {p} outside [0, 1)")]
    BadDropout { p: f64 },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("pooling row {row} has no positive weights")]
    EmptyPool { row: usize },
}
