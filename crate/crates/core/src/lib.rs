//! Self-supervised augmentation of a single demonstration for behavioral
//! cloning in a planar compliant-manipulation simulator.
//!
//! The pipeline records one scripted demonstration ([`demo`]), collects
//! augmentation trajectories that return to each demonstration waypoint
//! ([`collector`]), validates them for reachability and scene disturbance
//! ([`disturbance`]), fuses them with the demonstration suffix ([`fusion`]),
//! trains a recurrent visuomotor policy ([`policy`]) and deploys it with a
//! closed-loop-then-replay controller ([`deploy`]). [`harness`] runs the
//! evaluation, ablation and baseline grids.

pub mod error;
pub mod fusion;
pub mod collector;
pub mod demo;
pub mod deploy;
pub mod disturbance;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod pipeline;
pub mod policy;
pub mod sim;

pub use error::{Error, Result};
pub use geometry::{Pose, PoseTolerance};
