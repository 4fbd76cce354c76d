//! Desk-scale laboratory for studying *where* fine-tuning changes a
//! transformer's representations.
//!
//! The crate is organized in layers, bottom to top:
//!
//! * [`autograd`] — reverse-mode automatic differentiation over dense `f64`
//!   tensors (tape/graph based, deterministic, NaN-guarded).
//! * [`models`] — tiny trainable transformers (sequential or parallel blocks,
//!   causal or bidirectional attention), LoRA adapters, activation capture at
//!   named relative depths, binary checkpoints.
//! * [`objectives`] — a zoo of self-supervised training objectives (masked and
//!   span denoising, next-token prediction, sentence-pair classification, and
//!   two contrastive objectives) sharing one batch currency.
//! * [`trainer`] — AdamW with decoupled weight decay, global gradient
//!   clipping, layer-wise learning-rate decay, parameter freezing, gradient
//!   accumulation, and an equal-step trust-ratio control that pins every layer
//!   group's relative update size to a constant.
//! * [`metrics`] — representation-drift metrics between activation matrices
//!   (orthogonal Procrustes distance, linear CKA, RSA), depth profiles, and
//!   least-squares depth-slope fits.
//! * [`capture`] — probe-set activation capture at relative depths and
//!   before/after drift profiles built from it.
//! * [`distances`] — training-free objective-distance estimates from stacked
//!   loss gradients at the final hidden layer.
//! * [`stats`] — small exact statistics: Spearman rank correlation, the
//!   two-sided sign test, and mean/std summaries.

pub mod autograd;
pub mod capture;
pub mod distances;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod stats;
pub mod trainer;
