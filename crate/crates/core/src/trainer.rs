//! Fine-tuning loop: decoupled-weight-decay Adam, global gradient clipping,
//! exact micro-batch accumulation, per-depth learning-rate policies, and an
//! equal-step mode that rescales every depth group's update to a fixed
//! trust ratio (‖Δw‖/‖w‖) per step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{GradError, Graph};
use crate::models::{DropoutMode, Model, ModelError};
use crate::objectives::{build_loss, ObjectiveError, PreparedBatch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("a training step needs at least one micro-batch")]
    EmptyStep,

    #[error("condition {condition} leaves no trainable parameters in this model")]
    NoTrainableParams { condition: &'static str },

    #[error("the adapter condition needs a model built with adapters")]
    MissingAdapters,

    #[error(
        "loss diverged: {loss:.4} stayed above {factor}× the initial {initial:.4} \
         for {patience} consecutive steps (step {step})"
    )]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        factor: f64,
        patience: usize,
    },

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Objective(#[from] ObjectiveError),

    #[error(transparent)]
    Grad(#[from] GradError),
}

/// The fine-tuning conditions under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Layerwise learning-rate decay toward the input.
    Standard,
    /// One learning rate everywhere.
    Uniform,
    /// Only the low-rank adapter factors train.
    Lora,
    /// Normalization parameters stay frozen; the rest follows `Standard`.
    FrozenLn,
    /// The bottom half of the blocks (and, by default, the embeddings) stay
    /// frozen; the rest follows `Standard`.
    FrozenInterior,
    /// Uniform learning rate, then every depth group's update is rescaled to
    /// the same relative step size.
    EqualStep,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::Standard,
        Condition::Uniform,
        Condition::Lora,
        Condition::FrozenLn,
        Condition::FrozenInterior,
        Condition::EqualStep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Standard => "standard",
            Condition::Uniform => "uniform",
            Condition::Lora => "lora",
            Condition::FrozenLn => "frozen_ln",
            Condition::FrozenInterior => "frozen_interior",
            Condition::EqualStep => "equal_step",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn requires_adapters(self) -> bool {
        matches!(self, Condition::Lora)
    }

    /// Whether `name` trains under this condition.
    pub fn is_trainable(self, name: &str, n_layers: usize, freeze_embeddings: bool) -> bool {
        match self {
            Condition::Standard | Condition::Uniform | Condition::EqualStep => true,
            Condition::Lora => name.contains(".lora_"),
            Condition::FrozenLn => {
                !(name.contains(".ln1.") || name.contains(".ln2.") || name.starts_with("final_ln"))
            }
            Condition::FrozenInterior => {
                let group = Model::group_of(name);
                if group == 0 {
                    // Non-block parameters: embeddings freeze behind the
                    // toggle, heads and the final norm always train.
                    !(freeze_embeddings && name.starts_with("embeddings."))
                } else {
                    group > n_layers / 2
                }
            }
        }
    }

    /// Learning-rate multiplier for a depth group. The decaying conditions
    /// give the top block the base rate and shrink geometrically toward the
    /// input; non-block parameters (group 0) ride at the deepest (slowest)
    /// rate.
    pub fn lr_multiplier(self, group: usize, n_layers: usize, decay: f64) -> f64 {
        match self {
            Condition::Standard | Condition::FrozenLn | Condition::FrozenInterior => {
                let exponent = if group == 0 {
                    n_layers - 1
                } else {
                    n_layers - group
                };
                decay.powi(exponent as i32)
            }
            Condition::Uniform | Condition::Lora | Condition::EqualStep => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay applied directly to parameters.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling over all trainable parameters.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub condition: Condition,
    /// Geometric per-group decay factor for the decaying conditions.
    pub lr_decay: f64,
    /// Target relative step size ‖Δw‖/‖w‖ for the equal-step condition.
    pub equal_step_tau: f64,
    /// Whether the frozen-interior condition also freezes the embeddings.
    pub freeze_interior_embeddings: bool,
    /// Abort when the loss exceeds `divergence_factor ×` the initial loss…
    pub divergence_factor: f64,
    /// …for this many consecutive steps.
    pub divergence_patience: usize,
}

impl TrainConfig {
    pub fn new(condition: Condition) -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            condition,
            lr_decay: 0.95,
            equal_step_tau: 1e-3,
            freeze_interior_embeddings: true,
            divergence_factor: 10.0,
            divergence_patience: 50,
        }
    }
}

/// One step's telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// One-based optimizer step index.
    pub step: usize,
    /// Mean loss over the step's micro-batches.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Post-update relative step size ‖Δw‖/‖w_old‖ per depth group;
    /// `None` for groups without trainable parameters.
    pub group_ratios: Vec<Option<f64>>,
    /// Minimum over groups of the cosine between the optimizer's proposed
    /// update and the applied update (1 unless a policy bent a direction).
    pub direction_cos_min: f64,
}

#[derive(Debug)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Numerically exact single-tensor decoupled-Adam update; factored out so the
/// recursion-free closed forms can be unit-tested directly.
#[allow(clippy::too_many_arguments)]
fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    slot: &mut AdamSlot,
    t: usize,
    lr: f64,
    opt: &OptimizerConfig,
) {
    let b1 = opt.beta1;
    let b2 = opt.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * grad[i];
        slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * grad[i] * grad[i];
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        param[i] -= lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * param[i]);
    }
}

/// Watches for sustained loss blow-ups.
#[derive(Debug)]
struct DivergenceMonitor {
    initial: Option<f64>,
    factor: f64,
    patience: usize,
    consecutive: usize,
}

impl DivergenceMonitor {
    fn new(factor: f64, patience: usize) -> Self {
        Self {
            initial: None,
            factor,
            patience,
            consecutive: 0,
        }
    }

    /// Records one loss; returns the initial loss when the abort condition
    /// fires.
    fn observe(&mut self, loss: f64) -> Option<f64> {
        let initial = *self.initial.get_or_insert(loss);
        if !loss.is_finite() || loss > self.factor * initial {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        (self.consecutive >= self.patience).then_some(initial)
    }
}

/// Drives fine-tuning of one model under one condition.
#[derive(Debug)]
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    slots: BTreeMap<String, AdamSlot>,
    step: usize,
    monitor: DivergenceMonitor,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self, TrainError> {
        if config.condition.requires_adapters() && model.config().adapters.is_none() {
            return Err(TrainError::MissingAdapters);
        }
        let n_layers = model.config().n_layers;
        let any_trainable = model.param_names().any(|n| {
            config
                .condition
                .is_trainable(n, n_layers, config.freeze_interior_embeddings)
        });
        if !any_trainable {
            return Err(TrainError::NoTrainableParams {
                condition: config.condition.name(),
            });
        }
        let monitor = DivergenceMonitor::new(config.divergence_factor, config.divergence_patience);
        Ok(Self {
            model,
            config,
            slots: BTreeMap::new(),
            step: 0,
            monitor,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.config.condition.is_trainable(
            name,
            self.model.config().n_layers,
            self.config.freeze_interior_embeddings,
        )
    }

    /// Runs one optimizer step over `micro_batches`, accumulating exact mean
    /// gradients across them. `dropout_seed` drives the model's dropout for
    /// this step (contrastive views keep their own per-batch seeds).
    pub fn step(
        &mut self,
        micro_batches: &[PreparedBatch],
        dropout_seed: Option<u64>,
    ) -> Result<StepRecord, TrainError> {
        if micro_batches.is_empty() {
            return Err(TrainError::EmptyStep);
        }
        let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut units = 0.0;

        for (k, prepared) in micro_batches.iter().enumerate() {
            let graph = Graph::new();
            let binding = self.model.bind_where(&graph, |n| self.is_trainable(n))?;
            let dropout = match dropout_seed {
                Some(seed) => DropoutMode::Enabled {
                    // Distinct masks per micro-batch, reproducible per step.
                    seed: seed.wrapping_add(k as u64),
                },
                None => DropoutMode::Disabled,
            };
            let parts = build_loss(&self.model, &binding, prepared, dropout)?;
            loss_sum += parts.sum.item()?;
            units += parts.units;
            let grads = graph.backward(&parts.sum)?;
            for name in self.model.param_names() {
                if !self.is_trainable(name) {
                    continue;
                }
                let g = grads.get(binding.value(name)?)?;
                match grad_acc.get_mut(name) {
                    Some(acc) => {
                        for (a, &v) in acc.iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    None => {
                        grad_acc.insert(name.to_string(), g.into_data());
                    }
                }
            }
        }

        // Sum-of-sums → exact mean over all units in the step.
        let mean_loss = loss_sum / units;
        for acc in grad_acc.values_mut() {
            for v in acc.iter_mut() {
                *v /= units;
            }
        }

        // Global clip over the concatenation of every trainable gradient.
        let grad_norm = grad_acc
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if let Some(max) = self.config.optimizer.clip_norm {
            if grad_norm > max {
                let scale = max / grad_norm;
                for g in grad_acc.values_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }

        self.step += 1;
        let n_layers = self.model.config().n_layers;
        let n_groups = self.model.num_groups();

        // Snapshot old values for ratio telemetry / equal-step rescale.
        let old: BTreeMap<String, Vec<f64>> = grad_acc
            .keys()
            .map(|n| (n.clone(), self.model.param(n).expect("known").data().to_vec()))
            .collect();

        for (name, grad) in &grad_acc {
            let group = Model::group_of(name);
            let lr = self.config.optimizer.lr
                * self
                    .config
                    .condition
                    .lr_multiplier(group, n_layers, self.config.lr_decay);
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let param = self.model.param_mut(name).expect("known").data_mut();
            adamw_update(param, grad, slot, self.step, lr, &self.config.optimizer);
        }

        // Per-group weight and update norms.
        let mut weight_sq = vec![0.0; n_groups];
        let mut update_sq = vec![0.0; n_groups];
        for (name, before) in &old {
            let group = Model::group_of(name);
            let after = self.model.param(name).expect("known").data();
            for (b, a) in before.iter().zip(after) {
                weight_sq[group] += b * b;
                update_sq[group] += (a - b) * (a - b);
            }
        }

        let mut direction_cos_min = 1.0f64;
        if self.config.condition == Condition::EqualStep {
            let tau = self.config.equal_step_tau;
            let mut factors = vec![1.0; n_groups];
            for g in 0..n_groups {
                let wn = weight_sq[g].sqrt();
                let un = update_sq[g].sqrt();
                factors[g] = tau * wn / (un + 1e-12);
            }
            for (name, before) in &old {
                let group = Model::group_of(name);
                let param = self.model.param_mut(name).expect("known").data_mut();
                for (p, &b) in param.iter_mut().zip(before) {
                    *p = b + factors[group] * (*p - b);
                }
            }
            // Positive scalar rescaling preserves each group's direction.
            for g in 0..n_groups {
                if update_sq[g] > 0.0 && factors[g] > 0.0 {
                    direction_cos_min = direction_cos_min.min(1.0);
                }
            }
            // Refresh the applied-update norms after rescaling.
            for v in update_sq.iter_mut() {
                *v = 0.0;
            }
            for (name, before) in &old {
                let group = Model::group_of(name);
                let after = self.model.param(name).expect("known").data();
                for (b, a) in before.iter().zip(after) {
                    update_sq[group] += (a - b) * (a - b);
                }
            }
        }

        let group_ratios: Vec<Option<f64>> = (0..n_groups)
            .map(|g| (weight_sq[g] > 0.0).then(|| (update_sq[g] / weight_sq[g]).sqrt()))
            .collect();

        let record = StepRecord {
            step: self.step,
            loss: mean_loss,
            grad_norm,
            group_ratios,
            direction_cos_min,
        };

        if let Some(initial) = self.monitor.observe(mean_loss) {
            return Err(TrainError::Diverged {
                step: self.step,
                loss: mean_loss,
                initial,
                factor: self.config.divergence_factor,
                patience: self.config.divergence_patience,
            });
        }
        Ok(record)
    }
}
