//! Switching nonlinear model predictive control for an underwater
//! vehicle-manipulator system (UVMS).
//!
//! The controller runs in three modes:
//!
//! * Mode I — nominal task tracking with whole-body obstacle avoidance,
//! * Mode II — deliberate contact initiation with a variable prediction
//!   horizon once avoidance has become infeasible,
//! * Mode III — manipulator push-off to deflect the vehicle away from
//!   the obstacle while the end-effector stays in contact.
//!
//! The crate ships the plant model ([`model`]), superellipsoid collision
//! geometry ([`geometry`]), the per-mode optimal control transcriptions
//! ([`ocp`]), an in-tree SQP solver with explicit infeasibility
//! certification ([`solver`]), the mode-switching supervisor
//! ([`supervisor`]) and a penalty-contact simulator ([`sim`]).

pub mod config;
pub mod geometry;
pub mod model;
pub mod ocp;
pub mod sim;
pub mod solver;
pub mod supervisor;
#[cfg(test)]
mod probe {
    include!("/tmp/probe.rs");
}
