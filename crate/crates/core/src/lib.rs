//! Differentiable predictive control for linear plants.
//!
//! The crate identifies dynamics with recurrent cells (including a state space
//! model whose dominant eigenvalue is constrained by construction), trains
//! explicit neural control policies by backpropagating a constrained MPC-style
//! loss through those models, and compares them with LQR, LQI and QP-based MPC
//! on a building thermal plant.

pub mod autodiff;
pub mod baselines;
pub mod bench;
pub mod config;
pub mod data;
pub mod dpc;
pub mod error;
pub mod joint;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod plant;
pub mod report;
pub mod rng;
pub mod sim;
pub mod sysid;

pub use error::{Error, Result};
pub use linalg::Matrix;
