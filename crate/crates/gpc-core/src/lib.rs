//! Core engine for generalized predictive coding: a stack of layers that
//! learns the hierarchical and dynamical structure of sequential data by
//! gradient descent on precision-weighted prediction errors, plus a planner
//! that scores action policies by expected free energy.

pub mod autodiff;
pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod network;
pub mod planner;
pub mod signal;

pub use error::{GpcError, Result};
pub use network::{Model, ModelConfig, Rollout, StepReport, Trace};
pub use planner::{Action, EfeScore, Policy, Preference};
