#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Offset-free MPC for periodic intracranial-pressure waveform modulation.

pub mod bo;
pub mod gp;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod mpc;
pub mod observer;
pub mod qpsolver;
pub mod refgen;
pub mod simbench;
