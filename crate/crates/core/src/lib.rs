//! Simulation of shared affordance-aware human-robot collaboration in a
//! voxelized cleaning task.

// Validation is written as `!(x > 0.0)` so that NaN fails it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affordance;
pub mod agents;
pub mod geometry;
pub mod ids;
pub mod kinematics;
pub mod perception;
pub mod planner;
pub mod world;
pub mod collaboration;
pub mod metrics;
pub mod simloop;
pub mod wire;
