//! Fair entropic optimal transport.
//!
//! Matches two labelled populations under group-level fairness targets:
//!
//! * [`sinkhorn::fair_sinkhorn`] enforces a target coupling between groups exactly,
//! * [`penalized::penalized_gcg`] trades transport cost against a quadratic fairness
//!   penalty with a generalized conditional gradient method,
//! * [`costlearn`] learns a ground cost whose plain entropic plan is fair.
//!
//! [`oracle`] holds slow, independent reference solvers used for verification and
//! [`harness`] drives the experiment sweeps behind the `fairot` CLI.

// `!(x > 0.0)` is used on purpose so that NaN fails validation; index loops
// over group pairs read better than zipped iterators.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod costlearn;
pub mod domain;
pub mod error;
pub mod fairness;
pub mod harness;
pub mod io;
pub mod oracle;
pub mod penalized;
pub mod sinkhorn;
pub mod synthdata;

pub use domain::{
    entropy_term, group_coupling, marginal_residual, transport_cost, CostMatrix, GroupLabels,
    GroupPair, LabeledDataset, TransportPlan,
};
pub use error::{Error, Result};
pub use fairness::{
    fairness_loss, fairness_loss_grad, product_fair_plan, target_from_quota, validate_target,
    FairnessTarget,
};
pub use penalized::{penalized_gcg, penalized_objective, GcgConfig};
pub use sinkhorn::{
    fair_sinkhorn, sample_matching, sinkhorn, DualPotentials, SinkhornConfig, SolverReport,
};
