//! Particle world models on a desk-scale CPU budget.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`sim`] — a deterministic toy multi-material particle simulator that
//!   doubles as ground-truth oracle and dataset generator,
//! * [`metrics`] — exact and differentiable set-to-set distances
//!   (Chamfer, Hausdorff, smooth Hausdorff) and the hybrid training loss,
//! * [`autodiff`] — reverse-mode automatic differentiation over a
//!   per-forward-pass tape, 64-bit throughout,
//! * [`model`] — a set-transformer dynamics model over particles with a
//!   shared displacement decoder and autoregressive rollout,
//! * [`training`] — the k-step rollout training loop and the evaluation
//!   harness (MSE / CD / CD+HD over horizons),
//! * [`planner`] — MPPI model-predictive control with a normalized
//!   CD+HD goal cost and closed-loop execution in the simulator.

pub mod autodiff;
pub mod config;
pub mod metrics;
pub mod model;
pub mod sim;
pub mod tensor;

pub(crate) mod vec3;

pub use metrics::{LossConfig, PointSet};
pub use model::{Material, ModelConfig, ModelParams, ParticleSet};
pub use sim::{TaskId, TaskSpec};
pub use tensor::Tensor;
