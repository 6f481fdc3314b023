//! Domain types shared by the controller, managers, agents and the client
//! library.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::Layout;

/// Number of COMPLETE versions retained per (application, adapt epoch).
pub const RETAINED_VERSIONS: usize = 2;

pub type Rank = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AppId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u64);

impl fmt::Display for AppId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Checkpoint versions carry the adapt epoch in the upper 32 bits and a
/// per-epoch sequence number in the lower 32 bits. Every rank can derive the
/// next version locally, including ranks that joined during an adaptation.
pub fn make_version(epoch: u32, seq: u32) -> u64 {
    (u64::from(epoch) << 32) | u64::from(seq)
}

pub fn version_epoch(version: u64) -> u32 {
    (version >> 32) as u32
}

pub fn version_seq(version: u64) -> u32 {
    version as u32
}

/// CRC-32/ISO-HDLC, the checksum recorded for every staged (rank, region).
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Issues strictly increasing ids starting at 1.
#[derive(Debug)]
pub struct IdGen {
    next: AtomicU64,
}

impl Default for IdGen {
    fn default() -> Self {
        Self::new()
    }
}

impl IdGen {
    pub const fn new() -> Self {
        Self {
            next: AtomicU64::new(1),
        }
    }

    pub fn next_id(&self) -> u64 {
        self.next.fetch_add(1, Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DistributionScheme {
    Block,
    Cyclic,
}

impl fmt::Display for DistributionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributionScheme::Block => f.write_str("BLOCK"),
            DistributionScheme::Cyclic => f.write_str("CYCLIC"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProcessType {
    Initial,
    Joining,
}

/// One checkpointable data region as declared by the application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionDescriptor {
    pub region_id: String,
    pub elem_size: u32,
    pub count_per_rank: Vec<u64>,
    pub scheme: DistributionScheme,
}

impl RegionDescriptor {
    /// Descriptor whose per-rank counts follow `scheme` over `total_n` elements.
    pub fn from_layout(region_id: impl Into<String>, elem_size: u32, layout: &Layout) -> Self {
        Self {
            region_id: region_id.into(),
            elem_size,
            count_per_rank: layout.counts(),
            scheme: layout.scheme,
        }
    }

    pub fn total_count(&self) -> u64 {
        self.count_per_rank.iter().sum()
    }

    pub fn world_size(&self) -> u32 {
        self.count_per_rank.len() as u32
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.total_count(), self.world_size(), self.scheme)
    }

    pub fn bytes_for_rank(&self, rank: Rank) -> u64 {
        self.count_per_rank
            .get(rank as usize)
            .map_or(0, |c| c * u64::from(self.elem_size))
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_count() * u64::from(self.elem_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.elem_size == 0 {
            return Err(Error::invalid(format!(
                "region {}: elem_size must be at least 1",
                self.region_id
            )));
        }
        if self.count_per_rank.is_empty() {
            return Err(Error::invalid(format!(
                "region {}: no ranks",
                self.region_id
            )));
        }
        if self.layout().counts() != self.count_per_rank {
            return Err(Error::invalid(format!(
                "region {}: per-rank counts {:?} are not a {} distribution",
                self.region_id, self.count_per_rank, self.scheme
            )));
        }
        Ok(())
    }
}

/// Ranks of one application served by one agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentAssignment {
    pub agent_id: AgentId,
    pub node_id: String,
    pub endpoint: String,
    pub ranks: Vec<Rank>,
}

/// Finds the assignment serving `rank`.
pub fn assignment_for(assignments: &[AgentAssignment], rank: Rank) -> Option<&AgentAssignment> {
    assignments.iter().find(|a| a.ranks.contains(&rank))
}

/// Checks that every rank in `0..world_size` is served by exactly one agent.
pub fn validate_assignments(assignments: &[AgentAssignment], world_size: u32) -> Result<()> {
    let mut seen = vec![0u32; world_size as usize];
    let mut ids = std::collections::HashSet::new();
    for a in assignments {
        if a.ranks.is_empty() {
            return Err(Error::invalid(format!("agent {} serves no ranks", a.agent_id)));
        }
        if !ids.insert(a.agent_id) {
            return Err(Error::invalid(format!("agent {} assigned twice", a.agent_id)));
        }
        for &r in &a.ranks {
            match seen.get_mut(r as usize) {
                Some(c) => *c += 1,
                None => {
                    return Err(Error::invalid(format!(
                        "rank {r} outside world of {world_size}"
                    )))
                }
            }
        }
    }
    if let Some(r) = seen.iter().position(|&c| c != 1) {
        return Err(Error::invalid(format!(
            "rank {r} is served by {} agents",
            seen[r]
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommitStatus {
    Pending,
    Committed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StorageLevel {
    Memory,
    Pfs,
    Both,
}

impl StorageLevel {
    pub fn in_memory(self) -> bool {
        matches!(self, StorageLevel::Memory | StorageLevel::Both)
    }

    pub fn on_pfs(self) -> bool {
        matches!(self, StorageLevel::Pfs | StorageLevel::Both)
    }
}

/// Length and checksum of one (rank, region) of a version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntrySum {
    pub len: u64,
    pub crc: u32,
}

/// A coordinated checkpoint version. Only COMPLETE versions are ever served.
#[derive(Debug, Clone)]
pub struct CheckpointVersion {
    pub version: u64,
    pub adapt_epoch: u32,
    pub rank_status: Vec<CommitStatus>,
    pub storage_level: Vec<StorageLevel>,
    pub checksums: BTreeMap<(Rank, String), EntrySum>,
    /// Agent holding each rank's memory copy, if any.
    pub placement: Vec<Option<AgentId>>,
    pub timestamp: Instant,
    pub completed_at: Option<Instant>,
}

impl CheckpointVersion {
    pub fn new(version: u64, adapt_epoch: u32, world_size: u32, now: Instant) -> Self {
        let n = world_size as usize;
        Self {
            version,
            adapt_epoch,
            rank_status: vec![CommitStatus::Pending; n],
            storage_level: vec![StorageLevel::Memory; n],
            checksums: BTreeMap::new(),
            placement: vec![None; n],
            timestamp: now,
            completed_at: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.rank_status.iter().all(|s| *s == CommitStatus::Committed)
    }

    pub fn world_size(&self) -> u32 {
        self.rank_status.len() as u32
    }

    pub fn fully_on_pfs(&self) -> bool {
        self.storage_level.iter().all(|l| l.on_pfs())
    }

    pub fn references(&self, agent: AgentId) -> bool {
        self.placement.iter().any(|p| *p == Some(agent))
    }
}

/// Picks versions to garbage-collect: everything older than the last
/// `keep` COMPLETE versions of `epoch`, including superseded partial ones.
pub fn versions_to_collect(versions: &[CheckpointVersion], epoch: u32, keep: usize) -> Vec<u64> {
    let mut complete: Vec<u64> = versions
        .iter()
        .filter(|v| v.adapt_epoch == epoch && v.is_complete())
        .map(|v| v.version)
        .collect();
    complete.sort_unstable();
    if complete.is_empty() {
        return Vec::new();
    }
    let newest_complete = *complete.last().unwrap();
    let cutoff = if complete.len() > keep {
        Some(complete[complete.len() - keep])
    } else {
        None
    };
    versions
        .iter()
        .filter(|v| v.adapt_epoch == epoch)
        .filter(|v| {
            if v.is_complete() {
                cutoff.is_some_and(|c| v.version < c)
            } else {
                v.version < newest_complete
            }
        })
        .map(|v| v.version)
        .collect()
}

/// Controller-side registry entry for one application.
#[derive(Debug, Clone)]
pub struct ApplicationRecord {
    pub app_id: AppId,
    pub name: String,
    pub world_size: u32,
    pub regions: Vec<RegionDescriptor>,
    pub assignments: Vec<AgentAssignment>,
    pub versions: Vec<CheckpointVersion>,
    pub adapt_epoch: u32,
}

impl ApplicationRecord {
    pub fn new(app_id: AppId, name: impl Into<String>, world_size: u32) -> Self {
        Self {
            app_id,
            name: name.into(),
            world_size,
            regions: Vec::new(),
            assignments: Vec::new(),
            versions: Vec::new(),
            adapt_epoch: 0,
        }
    }

    pub fn checkpoint_bytes(&self) -> u64 {
        self.regions.iter().map(RegionDescriptor::total_bytes).sum()
    }

    pub fn version(&self, version: u64) -> Option<&CheckpointVersion> {
        self.versions.iter().find(|v| v.version == version)
    }

    pub fn version_mut(&mut self, version: u64) -> Option<&mut CheckpointVersion> {
        self.versions.iter_mut().find(|v| v.version == version)
    }

    pub fn latest_complete(&self) -> Option<&CheckpointVersion> {
        self.versions
            .iter()
            .filter(|v| v.is_complete())
            .max_by_key(|v| v.version)
    }

    pub fn set_adapt_epoch(&mut self, epoch: u32) -> Result<()> {
        if epoch < self.adapt_epoch {
            return Err(Error::CorruptState(format!(
                "adapt epoch would move backwards from {} to {epoch}",
                self.adapt_epoch
            )));
        }
        self.adapt_epoch = epoch;
        Ok(())
    }
}

/// Memory and bandwidth sample for one iCheck node plus its EWMA prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node_id: String,
    pub mem_capacity: u64,
    pub mem_used: u64,
    pub bw_used: f64,
    pub mem_predicted: f64,
    pub bw_predicted: f64,
    /// Milliseconds since the UNIX epoch.
    pub sample_time: u64,
}

impl NodeStats {
    pub fn idle(node_id: impl Into<String>, mem_capacity: u64) -> Self {
        Self {
            node_id: node_id.into(),
            mem_capacity,
            mem_used: 0,
            bw_used: 0.0,
            mem_predicted: 0.0,
            bw_predicted: 0.0,
            sample_time: 0,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.mem_used <= self.mem_capacity
            && self.mem_predicted.is_finite()
            && self.mem_predicted >= 0.0
            && self.bw_predicted.is_finite()
            && self.bw_predicted >= 0.0
    }
}
