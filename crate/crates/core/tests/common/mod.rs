//! Shared test utilities: a finite-difference gradient oracle.
//!
//! The oracle never touches the reverse-mode path: it re-runs the *forward*
//! computation with perturbed inputs and compares central differences against
//! whatever `Graph::backward` produced.

use plab_core::autograd::{Graph, Tensor, Value};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum allowed relative error between analytic and numeric gradients.
pub const FD_TOL: f64 = 1e-6;

/// Relative error with an absolute floor: central differences with step
/// `1e-5` carry an absolute noise floor around `1e-10·|f|`, so coordinates
/// whose true gradient is far below 1e-3 are compared absolutely (to 1e-9)
/// instead of amplifying that noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// One differentiable scenario: a set of leaf inputs and a builder that maps
/// them to a scalar loss. The builder must be deterministic (fixed seeds for
/// any dropout) so it can be replayed under perturbation.
pub struct FdCase<'a> {
    pub inputs: Vec<Tensor>,
    pub build: Box<dyn Fn(&Graph, &[Value]) -> Value + 'a>,
}

impl<'a> FdCase<'a> {
    pub fn new<F>(inputs: Vec<Tensor>, build: F) -> Self
    where
        F: Fn(&Graph, &[Value]) -> Value + 'a,
    {
        Self {
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(&self, inputs: &[Tensor]) -> f64 {
        let g = Graph::new();
        let leaves: Vec<Value> = inputs
            .iter()
            .map(|t| g.leaf(t.clone()).expect("leaf"))
            .collect();
        (self.build)(&g, &leaves).item().expect("scalar loss")
    }

    /// Runs the check. `coords_per_input` limits how many coordinates of each
    /// input are probed (`None` probes all of them); probed coordinates are
    /// chosen with `rng`. Returns the worst relative error observed.
    pub fn check(&self, coords_per_input: Option<usize>, rng: &mut ChaCha8Rng) -> f64 {
        let g = Graph::new();
        let leaves: Vec<Value> = self
            .inputs
            .iter()
            .map(|t| g.leaf(t.clone()).expect("leaf"))
            .collect();
        let loss = (self.build)(&g, &leaves);
        let grads = g.backward(&loss).expect("backward");

        let mut worst = 0.0f64;
        for (slot, input) in self.inputs.iter().enumerate() {
            let analytic = grads.get(&leaves[slot]).expect("gradient");
            let n = input.len();
            let coords: Vec<usize> = match coords_per_input {
                Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
                _ => (0..n).collect(),
            };
            for c in coords {
                let mut plus = self.inputs.clone();
                plus[slot].data_mut()[c] += FD_STEP;
                let mut minus = self.inputs.clone();
                minus[slot].data_mut()[c] -= FD_STEP;
                let numeric = (self.eval(&plus) - self.eval(&minus)) / (2.0 * FD_STEP);
                let err = rel_err(analytic.data()[c], numeric);
                assert!(
                    err <= FD_TOL,
                    "input {slot} coord {c}: analytic {} vs numeric {} (rel err {err:.3e})",
                    analytic.data()[c],
                    numeric
                );
                worst = worst.max(err);
            }
        }
        worst
    }
}

/// Standard-normal tensor from a seeded stream.
pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            // Box–Muller keeps the dev-dependencies minimal here.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("randn shape")
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
