//! Dynamics, simulation and parameter identification for a three-link
//! wheeled snake robot.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod engines;
pub mod fmt;
pub mod gait;
pub mod metrics;
pub mod model;
pub mod ode;
pub mod sweep;
