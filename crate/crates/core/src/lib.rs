//! Collision detection and avoidance trials with virtual pedestrians.
//!
//! The crate is split along the life of a session:
//!
//! - [`scenario`] solves collision-course geometry and builds trial schedules.
//! - [`engine`] runs one trial at a fixed time step and logs events and poses.
//! - [`agents`] provides synthetic subjects that close the loop in batch runs.
//! - [`analysis`] turns logs into per-trial outcomes and runs the statistics.
//! - [`store`] reads and writes session directories.
//! - [`config`] parses and validates scenario description files.

pub mod agents;
pub mod analysis;
pub mod config;
pub mod engine;
pub mod geometry;
pub mod scenario;
pub mod session;
pub mod store;

pub use geometry::Vec2;
