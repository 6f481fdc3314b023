//! Whole service on loopback in one process: controller, one manager per
//! node running agents as threads, and optionally the resource manager.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::agent::{AgentCounters, AgentFaults};
use crate::controller::{Controller, ControllerConfig, PolicyConfig};
use crate::error::{Error, Result};
use crate::manager::{Manager, ManagerConfig, ThreadLauncher};
use crate::model::AgentId;
use crate::net::request;
use crate::protocol::Message;
use crate::rm::{ResourceManager, RmConfig, RmHooks, RmScript};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    /// Memory available to agents, in bytes.
    pub capacity: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSpec {
    /// Nodes the checkpoint service owns from the start.
    pub icheck_nodes: Vec<NodeSpec>,
    /// Nodes the resource manager may grant later.
    pub spare_nodes: Vec<NodeSpec>,
    pub policy: PolicyConfig,
    /// Per-agent commit ingest limit in bytes per second (0 = unlimited).
    pub agent_ingest_rate: u64,
    pub tick_ms: u64,
    pub report_ms: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            icheck_nodes: vec![NodeSpec {
                id: "n0".into(),
                capacity: 4 << 30,
            }],
            spare_nodes: Vec::new(),
            policy: PolicyConfig::default(),
            agent_ingest_rate: 0,
            tick_ms: 50,
            report_ms: 200,
        }
    }
}

impl ClusterSpec {
    pub fn with_nodes(icheck: &[(&str, u64)], spare: &[(&str, u64)]) -> Self {
        let specs = |v: &[(&str, u64)]| {
            v.iter()
                .map(|(id, capacity)| NodeSpec {
                    id: id.to_string(),
                    capacity: *capacity,
                })
                .collect()
        };
        Self {
            icheck_nodes: specs(icheck),
            spare_nodes: specs(spare),
            ..Self::default()
        }
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.icheck_nodes
            .iter()
            .chain(&self.spare_nodes)
            .map(|n| n.id.clone())
            .collect()
    }
}

pub struct LocalCluster {
    spec: ClusterSpec,
    controller: Controller,
    managers: BTreeMap<String, Manager>,
    launchers: BTreeMap<String, Arc<ThreadLauncher>>,
    rm: Option<ResourceManager>,
}

impl LocalCluster {
    pub fn start(spec: ClusterSpec, pfs_root: &Path) -> Result<Self> {
        if spec.icheck_nodes.is_empty() && spec.spare_nodes.is_empty() {
            return Err(Error::Config("cluster without nodes".into()));
        }
        let controller = Controller::start(ControllerConfig {
            pfs_root: pfs_root.to_path_buf(),
            nodes: spec.icheck_nodes.iter().map(|n| n.id.clone()).collect(),
            tick_ms: spec.tick_ms,
            policy: spec.policy.clone(),
            ..ControllerConfig::default()
        })?;
        let mut managers = BTreeMap::new();
        let mut launchers = BTreeMap::new();
        for n in spec.icheck_nodes.iter().chain(&spec.spare_nodes) {
            let launcher = Arc::new(ThreadLauncher::new(n.capacity).with_ingest_rate(spec.agent_ingest_rate));
            let mut cfg = ManagerConfig::new(n.id.clone(), controller.endpoint(), n.capacity);
            cfg.report_period = Duration::from_millis(spec.report_ms.max(10));
            managers.insert(n.id.clone(), Manager::start(cfg, launcher.clone())?);
            launchers.insert(n.id.clone(), launcher);
        }
        let c = Self {
            spec,
            controller,
            managers,
            launchers,
            rm: None,
        };
        c.wait_managers(Duration::from_secs(10))?;
        Ok(c)
    }

    fn wait_managers(&self, timeout: Duration) -> Result<()> {
        let want = self.spec.node_ids();
        let deadline = Instant::now() + timeout;
        loop {
            let ready = self.controller.inspect(|s| {
                want.iter()
                    .all(|n| s.nodes.get(n).is_some_and(|e| e.manager.is_some()))
            });
            if ready {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(Error::Timeout("managers never said hello".into()));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    /// Starts the resource manager over this cluster's inventory.
    pub fn start_rm(&mut self, script: RmScript, apps: &[String], hooks: Arc<dyn RmHooks>) -> Result<()> {
        let rm = ResourceManager::start(
            RmConfig {
                bind: "127.0.0.1:0".into(),
                controller: self.controller.endpoint(),
                icheck_nodes: self.spec.icheck_nodes.iter().map(|n| n.id.clone()).collect(),
                spare_nodes: self.spec.spare_nodes.iter().map(|n| n.id.clone()).collect(),
            },
            script,
            apps,
            hooks,
        )?;
        self.controller.set_rm(&rm.endpoint());
        self.rm = Some(rm);
        Ok(())
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn controller_endpoint(&self) -> String {
        self.controller.endpoint()
    }

    pub fn pfs_root(&self) -> PathBuf {
        self.controller.pfs_root().to_path_buf()
    }

    pub fn rm(&self) -> Option<&ResourceManager> {
        self.rm.as_ref()
    }

    pub fn rm_mut(&mut self) -> Option<&mut ResourceManager> {
        self.rm.as_mut()
    }

    pub fn manager(&self, node: &str) -> Option<&Manager> {
        self.managers.get(node)
    }

    /// Node an agent runs on, with its endpoint.
    pub fn find_agent(&self, agent: AgentId) -> Option<(String, String)> {
        self.managers.iter().find_map(|(node, m)| {
            m.agents()
                .into_iter()
                .find(|(a, _)| *a == agent)
                .map(|(_, ep)| (node.clone(), ep))
        })
    }

    /// Every running agent with its node and endpoint.
    pub fn agents(&self) -> Vec<(AgentId, String, String)> {
        let mut out: Vec<_> = self
            .managers
            .iter()
            .flat_map(|(node, m)| m.agents().into_iter().map(move |(a, ep)| (a, node.clone(), ep)))
            .collect();
        out.sort();
        out
    }

    pub fn kill_agent(&self, agent: AgentId) -> bool {
        self.managers.values().any(|m| m.kill_agent(agent))
    }

    pub fn agent_faults(&self, agent: AgentId) -> Option<Arc<AgentFaults>> {
        self.launchers.values().find_map(|l| l.faults(agent))
    }

    /// Counters of a running agent, fetched over its endpoint.
    pub fn agent_counters(&self, agent: AgentId) -> Result<AgentCounters> {
        let (_, ep) = self
            .find_agent(agent)
            .ok_or_else(|| Error::invalid(format!("agent {agent} is not running")))?;
        match request(&ep, &Message::AgentStatsQuery {})? {
            Message::AgentStatsReply {
                bytes_staged,
                bytes_moved,
                entries,
                plans_computed,
                plans_pushed,
                ..
            } => Ok(AgentCounters {
                bytes_staged,
                bytes_moved,
                entries,
                plans_computed,
                plans_pushed,
            }),
            other => Err(crate::net::unexpected(&other)),
        }
    }

    pub fn stop(&mut self) {
        if let Some(mut rm) = self.rm.take() {
            rm.stop();
        }
        for m in self.managers.values_mut() {
            m.stop();
        }
        self.controller.stop();
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        self.stop();
    }
}
