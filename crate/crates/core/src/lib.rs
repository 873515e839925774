//! Multi-level scheduling compiler and simulator for compute-in-memory
//! accelerators.
//!
//! The pipeline runs coarse to fine: computation-graph scheduling (operator
//! duplication, pipeline balancing, segmentation), crossbar-level duplication
//! and staggered activation, then wordline-level row remapping. Each level is
//! enabled by the hardware's computing mode. The emitted meta-operator flow is
//! checked by a functional simulator against a reference oracle and timed by
//! an event-driven performance model.

pub mod arch;
pub mod codegen;
pub mod driver;
pub mod error;
pub mod graph;
pub mod lowering;
pub mod sched;
pub mod sim;

pub use error::{Error, Result};
