//! Discrete-event simulation of a federated, decentralized cluster
//! scheduler, with a probe-sampling baseline and a single-master
//! (centralized) configuration for comparison.
//!
//! Global Masters (GMs) place tasks from an eventually consistent view of
//! every Local Master's (LM's) cluster; LMs own the authoritative state,
//! validate every placement and report back.

pub mod bitmap;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod fairness;
pub mod global_master;
pub mod local_master;
pub mod messages;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod sim;
pub mod sparrow;
pub mod worker;
pub mod workload;

pub use config::{ConfigError, ExperimentConfig};
pub use engine::{CostModel, DelayModel, SimError};
pub use experiment::{run_experiment, write_report, ExperimentError, RecordFormat, Summary, SweepAxis};
pub use metrics::{AllocationRecord, AllocationSummary, Counters, SchedulerKind};
pub use model::{ConstraintSet, ResourceVector, TaskRequest};
pub use sim::{run_federated, ClusterSpec, FederatedSetup, SimReport, UserSpec};
pub use sparrow::{run_sparrow, SparrowSetup};
