//! Adaptive application-level checkpoint management.
//!
//! Applications stage coordinated checkpoints into the memory of dedicated
//! agent processes, which flush them to a file-backed tier and redistribute
//! them when the application changes its process count. A controller owns
//! the global view, per-node managers launch agents and predict node usage,
//! and a resource-manager stub grants and reclaims nodes.

pub mod error;
pub mod ewma;
pub mod agent;
pub mod client;
pub mod cluster;
pub mod controller;
pub mod harness;
pub mod layout;
pub mod manager;
pub mod model;
pub mod net;
pub mod pfs;
pub mod protocol;
pub mod rm;

pub use error::{Error, Result};
pub use layout::{apply_plan, block_partition, cyclic_owner, redistribution_plan, Layout, RedistributionPlan, Transfer};
pub use model::{
    AgentAssignment, AgentId, AppId, ApplicationRecord, CheckpointVersion, DistributionScheme,
    NodeStats, ProcessType, RegionDescriptor, StorageLevel,
};
