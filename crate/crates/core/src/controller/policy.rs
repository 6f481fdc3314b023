//! Agent count, node placement and probe decisions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIB: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Checkpoint bytes one agent is expected to absorb.
    pub per_agent_capacity: u64,
    pub max_agents_per_app: u32,
    /// Fraction of node memory kept free.
    pub mem_headroom: f64,
    /// Bytes per second a commit should reach; drives probe decisions.
    pub target_rate: f64,
    /// Seconds after completion before a version is flushed.
    pub flush_age: f64,
    /// Node memory fraction above which versions are flushed early.
    pub flush_pressure: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            per_agent_capacity: 256 * MIB,
            max_agents_per_app: 8,
            mem_headroom: 0.15,
            target_rate: 1024.0 * MIB as f64,
            flush_age: 30.0,
            flush_pressure: 0.75,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.per_agent_capacity == 0 {
            return bad("per_agent_capacity must be positive");
        }
        if self.max_agents_per_app == 0 {
            return bad("max_agents_per_app must be positive");
        }
        if !(self.mem_headroom > 0.0 && self.mem_headroom < 1.0) {
            return bad("mem_headroom must be in (0, 1)");
        }
        if !(self.target_rate > 0.0 && self.target_rate.is_finite()) {
            return bad("target_rate must be positive");
        }
        if !(self.flush_age > 0.0 && self.flush_age.is_finite()) {
            return bad("flush_age must be positive");
        }
        if !(self.flush_pressure > 0.0 && self.flush_pressure < 1.0) {
            return bad("flush_pressure must be in (0, 1)");
        }
        Ok(())
    }
}

/// What placement knows about one owned node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeView {
    pub node_id: String,
    pub capacity: u64,
    /// Larger of the reported and predicted memory use.
    pub used: u64,
    /// Shares already promised to agents on the node.
    pub reserved: u64,
}

impl NodeView {
    /// Memory still available under the headroom rule.
    pub fn free(&self, headroom: f64) -> f64 {
        (1.0 - headroom) * self.capacity as f64 - self.used.max(self.reserved) as f64
    }
}

pub trait PlacementPolicy: Send + Sync {
    fn agent_count(&self, cfg: &PolicyConfig, total_bytes: u64, world_size: u32) -> u32;

    /// Chooses a node (index into `nodes`) for each share, or `None` when
    /// some share fits nowhere.
    fn place(&self, cfg: &PolicyConfig, nodes: &[NodeView], shares: &[u64]) -> Option<Vec<usize>>;

    /// New agent count after observing `rate` bytes/sec, or `None` to keep
    /// the current one.
    fn probe(&self, cfg: &PolicyConfig, rate: Option<f64>, agents: u32, world_size: u32) -> Option<u32>;
}

/// Capacity-driven agent count, most-free-memory placement and a 0.5x..2x
/// dead band around the target rate.
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultPolicy;

impl DefaultPolicy {
    fn max_agents(cfg: &PolicyConfig, world_size: u32) -> u32 {
        cfg.max_agents_per_app.min(world_size).max(1)
    }
}

impl PlacementPolicy for DefaultPolicy {
    fn agent_count(&self, cfg: &PolicyConfig, total_bytes: u64, world_size: u32) -> u32 {
        let want = total_bytes.div_ceil(cfg.per_agent_capacity);
        want.clamp(1, u64::from(Self::max_agents(cfg, world_size))) as u32
    }

    fn place(&self, cfg: &PolicyConfig, nodes: &[NodeView], shares: &[u64]) -> Option<Vec<usize>> {
        let mut reserved: Vec<u64> = nodes.iter().map(|n| n.reserved).collect();
        let mut out = Vec::with_capacity(shares.len());
        for &share in shares {
            let mut best: Option<(usize, f64)> = None;
            for (i, n) in nodes.iter().enumerate() {
                let view = NodeView {
                    reserved: reserved[i],
                    ..n.clone()
                };
                let free = view.free(cfg.mem_headroom);
                if free >= share as f64 && best.is_none_or(|(_, f)| free > f) {
                    best = Some((i, free));
                }
            }
            let (i, _) = best?;
            reserved[i] = reserved[i].max(nodes[i].used) + share;
            out.push(i);
        }
        Some(out)
    }

    fn probe(&self, cfg: &PolicyConfig, rate: Option<f64>, agents: u32, world_size: u32) -> Option<u32> {
        let rate = rate?;
        if rate < 0.5 * cfg.target_rate && agents < Self::max_agents(cfg, world_size) {
            Some(agents + 1)
        } else if rate > 2.0 * cfg.target_rate && agents > 1 {
            Some(agents - 1)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::block_partition;

    const GIB: u64 = 1 << 30;

    fn node(id: &str, capacity: u64, used: u64) -> NodeView {
        NodeView {
            node_id: id.into(),
            capacity,
            used,
            reserved: 0,
        }
    }

    #[test]
    fn small_checkpoint_gets_one_agent() {
        let cfg = PolicyConfig::default();
        assert_eq!(DefaultPolicy.agent_count(&cfg, 8 * MIB, 16), 1);
        assert_eq!(DefaultPolicy.agent_count(&cfg, 0, 16), 1);
    }

    #[test]
    fn one_gib_over_48_ranks() {
        let cfg = PolicyConfig::default();
        let a = DefaultPolicy.agent_count(&cfg, GIB, 48);
        assert_eq!(a, 4);
        let groups: Vec<u64> = block_partition(48, a).unwrap().iter().map(|g| g.1).collect();
        assert_eq!(groups, vec![12; 4]);
    }

    #[test]
    fn count_clamped_by_world_and_max() {
        let cfg = PolicyConfig::default();
        assert_eq!(DefaultPolicy.agent_count(&cfg, 100 * GIB, 3), 3);
        assert_eq!(DefaultPolicy.agent_count(&cfg, 100 * GIB, 64), 8);
    }

    #[test]
    fn placement_prefers_freer_node() {
        let cfg = PolicyConfig::default();
        let nodes = [node("n0", GIB, GIB * 7 / 10), node("n1", GIB, 0)];
        assert_eq!(DefaultPolicy.place(&cfg, &nodes, &[MIB]), Some(vec![1]));
    }

    #[test]
    fn placement_respects_headroom() {
        let cfg = PolicyConfig::default();
        let nodes = [node("n0", 100 * MIB, 0)];
        // 85 MiB usable
        assert!(DefaultPolicy.place(&cfg, &nodes, &[85 * MIB]).is_some());
        assert!(DefaultPolicy.place(&cfg, &nodes, &[86 * MIB]).is_none());
        assert!(DefaultPolicy.place(&cfg, &nodes, &[50 * MIB, 50 * MIB]).is_none());
    }

    #[test]
    fn placement_spreads_equal_shares() {
        let cfg = PolicyConfig::default();
        let nodes = [node("n0", GIB, 0), node("n1", GIB, 0)];
        assert_eq!(
            DefaultPolicy.place(&cfg, &nodes, &[MIB, MIB, MIB]),
            Some(vec![0, 1, 0])
        );
    }

    #[test]
    fn probe_dead_band() {
        let cfg = PolicyConfig {
            target_rate: 100.0,
            ..PolicyConfig::default()
        };
        let p = DefaultPolicy;
        assert_eq!(p.probe(&cfg, Some(100.0), 2, 16), None);
        assert_eq!(p.probe(&cfg, Some(10.0), 1, 16), Some(2));
        assert_eq!(p.probe(&cfg, Some(10.0), 8, 16), None);
        assert_eq!(p.probe(&cfg, Some(300.0), 3, 16), Some(2));
        assert_eq!(p.probe(&cfg, Some(300.0), 1, 16), None);
        assert_eq!(p.probe(&cfg, None, 1, 16), None);
    }

    #[test]
    fn config_checks() {
        assert!(PolicyConfig::default().validate().is_ok());
        let bad = PolicyConfig {
            mem_headroom: 1.0,
            ..PolicyConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PolicyConfig {
            per_agent_capacity: 0,
            ..PolicyConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
