//! The computation graph: a write-once tape of nodes in topological order.
//!
//! A [`Graph`] is built afresh for every training step (define-by-run).
//! Leaves are inserted for differentiable inputs, constants for everything
//! else; each operation appends one node holding its forward value. Because
//! tape order *is* topological order, [`Graph::backward`] is a single reverse
//! sweep. Graphs are single-threaded (`Rc`-based) and cheap to drop.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, Op};
use super::tensor::Tensor;
use super::GradError;

pub type NodeId = usize;

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
    /// Leaves registered as differentiable.
    trainable: Vec<NodeId>,
    /// Intermediate nodes whose gradient was explicitly requested.
    watched: Vec<NodeId>,
}

/// A shared, append-only computation tape.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// A tensor bound to a node of a specific graph.
#[derive(Clone)]
pub struct Value {
    graph: Graph,
    id: NodeId,
}

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Value")
            .field("node", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<Value, GradError> {
        if !value.all_finite() {
            return Err(GradError::NonFinite {
                op: op.name(),
                node: self.len(),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if let Op::Leaf = op {
            inner.trainable.push(id);
        }
        inner.nodes.push(Node { op, inputs, value });
        Ok(Value {
            graph: self.clone(),
            id,
        })
    }

    /// Inserts a differentiable input (a model parameter or any tensor whose
    /// gradient should be produced by [`Graph::backward`]).
    pub fn leaf(&self, value: Tensor) -> Result<Value, GradError> {
        self.push(Op::Leaf, vec![], value)
    }

    /// Inserts a non-differentiable input (data, masks, frozen parameters).
    pub fn constant(&self, value: Tensor) -> Result<Value, GradError> {
        self.push(Op::Constant, vec![], value)
    }

    fn apply(&self, op: Op, args: &[&Value]) -> Result<Value, GradError> {
        let inner = self.inner.borrow();
        let mut ids = Vec::with_capacity(args.len());
        for a in args {
            if !self.same_graph(&a.graph) {
                return Err(GradError::GraphMismatch { op: op.name() });
            }
            ids.push(a.id);
        }
        let tensors: Vec<&Tensor> = ids.iter().map(|&i| &inner.nodes[i].value).collect();
        let value = ops::forward(&op, &tensors)?;
        drop(inner);
        self.push(op, ids, value)
    }

    /// Concatenates same-rank values along `axis`.
    pub fn concat(&self, parts: &[&Value], axis: usize) -> Result<Value, GradError> {
        if parts.is_empty() {
            return Err(GradError::EmptyInput { op: "concat" });
        }
        self.apply(Op::Concat { axis }, parts)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    ///
    /// Gradients are produced for every trainable leaf and every watched node
    /// on a differentiable path to the loss; everything else is pruned.
    pub fn backward(&self, loss: &Value) -> Result<Gradients, GradError> {
        if !self.same_graph(&loss.graph) {
            return Err(GradError::GraphMismatch { op: "backward" });
        }
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(GradError::NotScalar {
                shape: inner.nodes[loss.id].value.shape().to_vec(),
            });
        }

        // A node "needs" a gradient if it is itself interesting (trainable
        // leaf or watched) or any of its inputs does; computed in tape order.
        let mut needs = vec![false; n];
        for &id in inner.trainable.iter().chain(inner.watched.iter()) {
            needs[id] = true;
        }
        for id in 0..n {
            if !needs[id] {
                needs[id] = inner.nodes[id].inputs.iter().any(|&i| needs[i]);
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            let keep = needs[id] && matches!(node.op, Op::Leaf | Op::Constant)
                || inner.watched.contains(&id);
            if !node.inputs.is_empty() {
                let tensors: Vec<&Tensor> =
                    node.inputs.iter().map(|&i| &inner.nodes[i].value).collect();
                let wants: Vec<bool> = node.inputs.iter().map(|&i| needs[i]).collect();
                if wants.iter().any(|&w| w) {
                    let contribs = ops::vjp(&node.op, &tensors, &node.value, &gout, &wants)?;
                    for (slot, contrib) in contribs.into_iter().enumerate() {
                        if let Some(c) = contrib {
                            let dst = &mut grads[node.inputs[slot]];
                            match dst {
                                Some(acc) => {
                                    for (a, &v) in acc.iter_mut().zip(c.data()) {
                                        *a += v;
                                    }
                                }
                                None => *dst = Some(c.into_data()),
                            }
                        }
                    }
                }
            }
            if keep {
                grads[id] = Some(gout);
            }
        }

        Ok(Gradients {
            graph: self.clone(),
            grads,
        })
    }
}

/// Per-node gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    graph: Graph,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// The gradient of the loss with respect to `value`.
    ///
    /// Returns zeros when `value` lies off every differentiable path to the
    /// loss (e.g. a watched node the loss never consumed).
    pub fn get(&self, value: &Value) -> Result<Tensor, GradError> {
        if !self.graph.same_graph(&value.graph) {
            return Err(GradError::GraphMismatch { op: "gradients" });
        }
        let shape = value.shape();
        match &self.grads[value.id] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(&shape)),
        }
    }
}

impl Value {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// Copies the node's forward value out of the graph.
    pub fn tensor(&self) -> Tensor {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    /// The scalar value of a single-element node.
    pub fn item(&self) -> Result<f64, GradError> {
        self.graph.inner.borrow().nodes[self.id].value.item()
    }

    /// Marks this node so [`Graph::backward`] materializes its gradient
    /// (a capture hook). Watch a node before or after building consumers;
    /// both work, since reachability is resolved at backward time.
    pub fn watch(&self) -> &Self {
        let mut inner = self.graph.inner.borrow_mut();
        if !inner.watched.contains(&self.id) {
            inner.watched.push(self.id);
        }
        self
    }

    fn unary(&self, op: Op) -> Result<Value, GradError> {
        self.graph.apply(op, &[self])
    }

    fn binary(&self, other: &Value, op: Op) -> Result<Value, GradError> {
        self.graph.apply(op, &[self, other])
    }

    pub fn add(&self, other: &Value) -> Result<Value, GradError> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: &Value) -> Result<Value, GradError> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: &Value) -> Result<Value, GradError> {
        self.binary(other, Op::Mul)
    }

    /// Adds a `[d]` bias to the last axis.
    pub fn add_bias(&self, bias: &Value) -> Result<Value, GradError> {
        self.binary(bias, Op::AddBias)
    }

    pub fn scale(&self, c: f64) -> Result<Value, GradError> {
        self.unary(Op::Scale(c))
    }

    /// Batched matrix product; `other` may be a shared 2-D right operand.
    pub fn matmul(&self, other: &Value) -> Result<Value, GradError> {
        self.binary(other, Op::Matmul)
    }

    pub fn transpose(&self, ax0: usize, ax1: usize) -> Result<Value, GradError> {
        self.unary(Op::Transpose(ax0, ax1))
    }

    /// Same data under a new shape. Implemented as a node so that gradients
    /// flow, but with a copy-free kernel.
    pub fn reshape(&self, shape: &[usize]) -> Result<Value, GradError> {
        let value = self.tensor().reshaped(shape.to_vec())?;
        // Bypass ops::forward: reshape is pure metadata.
        self.graph.push(Op::Reshape, vec![self.id], value)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Value, GradError> {
        self.unary(Op::Slice { axis, start, len })
    }

    /// Looks up rows of this `[rows, d]` table; `ids` are row indices with
    /// logical shape `id_shape`.
    pub fn embedding(&self, ids: &[usize], id_shape: &[usize]) -> Result<Value, GradError> {
        let expect: usize = id_shape.iter().product();
        if expect != ids.len() {
            return Err(GradError::ShapeData {
                shape: id_shape.to_vec(),
                len: ids.len(),
            });
        }
        self.unary(Op::Embedding {
            ids: Rc::new(ids.to_vec()),
            id_shape: id_shape.to_vec(),
        })
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Value, beta: &Value, eps: f64) -> Result<Value, GradError> {
        self.graph.apply(Op::LayerNorm { eps }, &[self, gamma, beta])
    }

    /// Standardizes each column of a `[n, d]` matrix over the batch axis.
    pub fn batch_norm_cols(&self, eps: f64) -> Result<Value, GradError> {
        self.unary(Op::BatchNormCols { eps })
    }

    pub fn softmax(&self) -> Result<Value, GradError> {
        self.unary(Op::Softmax)
    }

    pub fn gelu(&self) -> Result<Value, GradError> {
        self.unary(Op::Gelu)
    }

    /// Inverted-scaling dropout with keep mask drawn from `seed`; the mask is
    /// fixed at construction, so rebuilding a graph with the same seed yields
    /// bit-identical results. `p = 0` is an exact identity.
    pub fn dropout(&self, p: f64, seed: u64) -> Result<Value, GradError> {
        if !(0.0..1.0).contains(&p) {
            return Err(GradError::BadDropout { p });
        }
        let n = self.tensor().len();
        let mask = if p == 0.0 {
            vec![1.0; n]
        } else {
            let keep = 1.0 - p;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        };
        self.unary(Op::Dropout { mask: Rc::new(mask) })
    }

    pub fn sum_all(&self) -> Result<Value, GradError> {
        self.unary(Op::SumAll)
    }

    pub fn mean_all(&self) -> Result<Value, GradError> {
        self.unary(Op::MeanAll)
    }

    /// Pools `[n, t, d]` to `[n, d]` as a weighted mean over the middle axis;
    /// each row's weights must have a positive sum.
    pub fn masked_mean_pool(&self, weights: &[f64]) -> Result<Value, GradError> {
        self.unary(Op::MaskedMeanPool {
            weights: Rc::new(weights.to_vec()),
        })
    }

    /// Σᵢ weightᵢ · cross_entropy(logitsᵢ, targetᵢ) over the rows of a
    /// `[rows, classes]` logit matrix. Callers divide by their own unit count,
    /// which keeps gradient accumulation exact.
    pub fn cross_entropy_logits(
        &self,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Value, GradError> {
        self.unary(Op::CrossEntropyLogits {
            targets: Rc::new(targets.to_vec()),
            weights: Rc::new(weights.to_vec()),
        })
    }

    /// Rescales each row (last axis) to unit Euclidean norm with an `eps`
    /// guard inside the square root.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Value, GradError> {
        self.unary(Op::L2NormalizeRows { eps })
    }
}
