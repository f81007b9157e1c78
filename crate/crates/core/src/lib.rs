//! fusionsim: a deterministic simulator and reconfiguration planner for
//! distributed dataflow fusion systems.
//!
//! A fusion process (a discrete dataflow graph of fusion nodes) is placed
//! onto a dynamic topology of execution frameworks by a constraint solver,
//! executed under queue semantics in virtual time, monitored through
//! software sensors, and reconfigured on errors or when a significantly
//! cheaper configuration becomes available. Equal scenarios and seeds
//! always produce byte-identical event logs.

pub mod controller;
pub mod engine;
pub mod events;
pub mod functions;
pub mod placement;
pub mod process;
pub mod runner;
pub mod scenario;
pub mod topology;
pub mod value;

pub use process::{FusionNodeSpec, FusionProcess, ImplId, Link, NodeId, PortRef};
pub use topology::{Channel, ChannelId, EfId, ExecutionFramework, PathTable, Topology};
pub use value::Value;

/// Virtual time, in abstract ticks.
pub type Time = u64;
