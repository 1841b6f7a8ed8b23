//! Multi-agent group-relative RL training at desk scale.
//!
//! A group of trajectories is sampled per task by a multi-agent orchestration,
//! rewards are normalized into advantages (globally or per agent), and each
//! agent's softmax-linear policy is updated with a clipped surrogate objective.
//! The [`diagnostics`] module verifies the gradient-norm-inflation identity
//! that motivates agent-wise normalization; [`trainer`] runs the full loop and
//! the four-way normalization ablation; [`telemetry`] and [`cli`] provide CSV
//! output, run manifests, a token-cost estimator, and the command-line surface.

pub mod advantage;
pub mod cli;
pub mod config_file;
pub mod core;
pub mod diagnostics;
pub mod orchestration;
pub mod policy;
pub mod rng;
pub mod scheduler;
pub mod telemetry;
pub mod trainer;
