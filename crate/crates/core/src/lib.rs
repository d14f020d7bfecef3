// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dynamics;
pub mod world;
pub mod global_planner;
pub mod estimator;
pub mod qp;
pub mod local_planner;
pub mod robust_control;
pub mod validation;
pub mod executive;
pub mod telemetry;
