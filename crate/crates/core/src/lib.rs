//! Distributed proximal limited-memory quasi-Newton solver for
//! `F(w) = f(Xᵀw) + g(w)` with instances spread over `K` workers.

// NaN must fail the positivity checks, hence `!(x > 0.0)` over `x <= 0.0`.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baseline;
pub mod comm;
pub mod data;
pub mod dd;
pub mod error;
pub mod harness;
pub mod lbfgs;
pub mod objective;
pub mod solver;
pub mod sparsa;
pub mod synth;

pub use comm::{Communicator, CostLedger, CostModel, Reduction, SimWorld};
pub use data::{LabeledDataset, LabeledShard};
pub use dd::Dd;
pub use error::{CommError, DataError, Error, Result};
pub use lbfgs::{GammaRule, LbfgsMemory};
pub use objective::{Logistic, Regularizer, SmoothLoss, Zero, L1};
pub use solver::{solve, SolverConfig, SubproblemMode, Target, Trace, TraceRow};
