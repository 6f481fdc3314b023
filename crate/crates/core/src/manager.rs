//! Per-node daemon: launches agents on controller order, samples and
//! predicts node memory and bandwidth use, and relays flush and migrate
//! orders to its agents.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};

use crate::agent::{Agent, AgentConfig, AgentFaults, NodeBudget, DEFAULT_CHUNK};
use crate::error::{Error, Result};
use crate::ewma::Ewma;
use crate::model::{AgentId, AppId, NodeStats, Rank};
use crate::net::{Connection, Server, Throttle};
use crate::protocol::{AgentReadyEntry, ErrorCode, Message};

const STATS_WINDOW: usize = 32;

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Turns per-agent counters into node samples and EWMA predictions.
#[derive(Debug)]
pub struct NodeMonitor {
    node_id: String,
    capacity: u64,
    mem: Ewma,
    bw: Ewma,
    last_time: Option<u64>,
    last_moved: HashMap<AgentId, u64>,
    window: VecDeque<NodeStats>,
}

/// Counters of one agent at sampling time.
#[derive(Debug, Clone, Copy)]
pub struct AgentSample {
    pub agent_id: AgentId,
    pub bytes_staged: u64,
    /// Cumulative bytes moved since the agent started.
    pub bytes_moved: u64,
}

impl NodeMonitor {
    pub fn new(node_id: impl Into<String>, capacity: u64, alpha: f64) -> Result<Self> {
        Ok(Self {
            node_id: node_id.into(),
            capacity,
            mem: Ewma::new(alpha)?,
            bw: Ewma::new(alpha)?,
            last_time: None,
            last_moved: HashMap::new(),
            window: VecDeque::new(),
        })
    }

    /// Takes a sample at `now_ms`. Memory is the sum of staged bytes;
    /// bandwidth is the bytes moved since the previous sample over the
    /// elapsed time (zero for the first sample).
    pub fn sample(&mut self, now_ms: u64, agents: &[AgentSample]) -> NodeStats {
        let mem_used: u64 = agents.iter().map(|a| a.bytes_staged).sum();
        let moved: u64 = agents
            .iter()
            .map(|a| {
                let prev = self.last_moved.get(&a.agent_id).copied().unwrap_or(0);
                a.bytes_moved.saturating_sub(prev)
            })
            .sum();
        let bw_used = match self.last_time {
            Some(t) if now_ms > t => moved as f64 / ((now_ms - t) as f64 / 1000.0),
            _ => 0.0,
        };
        self.last_time = Some(now_ms);
        self.last_moved = agents.iter().map(|a| (a.agent_id, a.bytes_moved)).collect();
        let stats = NodeStats {
            node_id: self.node_id.clone(),
            mem_capacity: self.capacity,
            mem_used,
            bw_used,
            mem_predicted: self.mem.update(mem_used as f64),
            bw_predicted: self.bw.update(bw_used),
            sample_time: now_ms,
        };
        if self.window.len() == STATS_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(stats.clone());
        stats
    }

    pub fn window(&self) -> impl Iterator<Item = &NodeStats> {
        self.window.iter()
    }
}

/// What a manager needs to start one agent.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub agent_id: AgentId,
    pub app_id: AppId,
    pub node_id: String,
    pub ranks: Vec<Rank>,
    pub controller: String,
    pub pfs_root: PathBuf,
}

pub trait AgentHandle: Send {
    fn endpoint(&self) -> String;
    fn is_alive(&mut self) -> bool;
    /// Stops the agent abruptly.
    fn kill(&mut self);
}

pub trait AgentLauncher: Send + Sync {
    fn launch(&self, spec: &AgentSpec) -> Result<Box<dyn AgentHandle>>;
}

/// Runs agents as in-process servers sharing one node budget.
pub struct ThreadLauncher {
    budget: Arc<NodeBudget>,
    ingest_rate: u64,
    chunk_size: usize,
    snapshot_wait: Duration,
    faults: Mutex<HashMap<AgentId, Arc<AgentFaults>>>,
}

impl ThreadLauncher {
    pub fn new(mem_capacity: u64) -> Self {
        Self {
            budget: NodeBudget::new(mem_capacity),
            ingest_rate: 0,
            chunk_size: DEFAULT_CHUNK,
            snapshot_wait: Duration::from_secs(20),
            faults: Mutex::default(),
        }
    }

    /// Per-agent ingest limit in bytes per second (0 = unlimited).
    pub fn with_ingest_rate(mut self, rate: u64) -> Self {
        self.ingest_rate = rate;
        self
    }

    pub fn with_chunk_size(mut self, chunk: usize) -> Self {
        self.chunk_size = chunk;
        self
    }

    pub fn with_snapshot_wait(mut self, wait: Duration) -> Self {
        self.snapshot_wait = wait;
        self
    }

    pub fn budget(&self) -> Arc<NodeBudget> {
        self.budget.clone()
    }

    pub fn faults(&self, agent: AgentId) -> Option<Arc<AgentFaults>> {
        self.faults.lock().unwrap().get(&agent).cloned()
    }
}

struct ThreadAgent {
    agent: Option<Agent>,
    endpoint: String,
}

impl AgentHandle for ThreadAgent {
    fn endpoint(&self) -> String {
        self.endpoint.clone()
    }

    fn is_alive(&mut self) -> bool {
        self.agent.is_some()
    }

    fn kill(&mut self) {
        if let Some(mut a) = self.agent.take() {
            a.stop();
        }
    }
}

impl AgentLauncher for ThreadLauncher {
    fn launch(&self, spec: &AgentSpec) -> Result<Box<dyn AgentHandle>> {
        let mut cfg = AgentConfig::new(
            spec.agent_id,
            spec.app_id,
            spec.node_id.clone(),
            spec.controller.clone(),
            spec.pfs_root.clone(),
        );
        cfg.ranks = spec.ranks.clone();
        cfg.chunk_size = self.chunk_size;
        cfg.snapshot_wait = self.snapshot_wait;
        cfg.ingest = Throttle::with_rate(self.ingest_rate);
        let agent = Agent::start(cfg, self.budget.clone())?;
        self.faults.lock().unwrap().insert(spec.agent_id, agent.faults());
        Ok(Box::new(ThreadAgent {
            endpoint: agent.endpoint(),
            agent: Some(agent),
        }))
    }
}

/// Runs every agent as a child process of `exe agent ...`.
pub struct ProcessLauncher {
    exe: PathBuf,
    mem_budget: u64,
}

impl ProcessLauncher {
    pub fn new(exe: impl Into<PathBuf>, mem_budget: u64) -> Self {
        Self {
            exe: exe.into(),
            mem_budget,
        }
    }
}

struct ProcessAgent {
    child: Child,
    endpoint: String,
}

impl AgentHandle for ProcessAgent {
    fn endpoint(&self) -> String {
        self.endpoint.clone()
    }

    fn is_alive(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(None))
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for ProcessAgent {
    fn drop(&mut self) {
        if self.is_alive() {
            self.kill();
        }
    }
}

impl AgentLauncher for ProcessLauncher {
    fn launch(&self, spec: &AgentSpec) -> Result<Box<dyn AgentHandle>> {
        let ranks: Vec<String> = spec.ranks.iter().map(u32::to_string).collect();
        let mut child = Command::new(&self.exe)
            .arg("agent")
            .args(["--agent-id", &spec.agent_id.0.to_string()])
            .args(["--app-id", &spec.app_id.0.to_string()])
            .args(["--node-id", &spec.node_id])
            .args(["--controller", &spec.controller])
            .arg("--pfs-root")
            .arg(&spec.pfs_root)
            .args(["--mem-budget", &self.mem_budget.to_string()])
            .args(["--ranks", &ranks.join(",")])
            .stdout(Stdio::piped())
            .spawn()?;
        let stdout = child.stdout.take().expect("piped stdout");
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line)?;
        match line.trim().strip_prefix("READY ") {
            Some(ep) => Ok(Box::new(ProcessAgent {
                endpoint: ep.to_string(),
                child,
            })),
            None => {
                let _ = child.kill();
                Err(Error::Config(format!(
                    "agent process did not report an endpoint: {line:?}"
                )))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub node_id: String,
    pub controller: String,
    pub mem_capacity: u64,
    pub bind: String,
    pub ewma_alpha: f64,
    pub report_period: Duration,
}

impl ManagerConfig {
    pub fn new(node_id: impl Into<String>, controller: impl Into<String>, mem_capacity: u64) -> Self {
        Self {
            node_id: node_id.into(),
            controller: controller.into(),
            mem_capacity,
            bind: "127.0.0.1:0".into(),
            ewma_alpha: 0.5,
            report_period: Duration::from_secs(1),
        }
    }
}

struct Slot {
    app: AppId,
    handle: Box<dyn AgentHandle>,
}

struct MShared {
    cfg: ManagerConfig,
    endpoint: Mutex<String>,
    launcher: Arc<dyn AgentLauncher>,
    agents: Mutex<BTreeMap<AgentId, Slot>>,
    monitor: Mutex<NodeMonitor>,
    stopped: AtomicBool,
}

pub struct Manager {
    shared: Arc<MShared>,
    server: Server,
    reporter: Option<JoinHandle<()>>,
}

impl Manager {
    pub fn start(cfg: ManagerConfig, launcher: Arc<dyn AgentLauncher>) -> Result<Manager> {
        let monitor = NodeMonitor::new(cfg.node_id.clone(), cfg.mem_capacity, cfg.ewma_alpha)?;
        let shared = Arc::new(MShared {
            endpoint: Mutex::default(),
            launcher,
            agents: Mutex::default(),
            monitor: Mutex::new(monitor),
            stopped: AtomicBool::new(false),
            cfg,
        });
        let h = shared.clone();
        let server = Server::spawn(&shared.cfg.bind, &format!("mgr-{}", shared.cfg.node_id), move |conn| {
            serve(&h, conn)
        })?;
        *shared.endpoint.lock().unwrap() = server.endpoint();
        let r = shared.clone();
        let reporter = thread::Builder::new()
            .name(format!("mgr-{}-stats", shared.cfg.node_id))
            .spawn(move || report_loop(&r))?;
        info!(
            "event=manager_started node={} endpoint={} capacity={}",
            shared.cfg.node_id,
            server.endpoint(),
            shared.cfg.mem_capacity
        );
        Ok(Manager {
            shared,
            server,
            reporter: Some(reporter),
        })
    }

    pub fn endpoint(&self) -> String {
        self.server.endpoint()
    }

    pub fn node_id(&self) -> &str {
        &self.shared.cfg.node_id
    }

    /// Endpoints of the agents this manager runs.
    pub fn agents(&self) -> Vec<(AgentId, String)> {
        self.shared
            .agents
            .lock()
            .unwrap()
            .iter()
            .map(|(id, s)| (*id, s.handle.endpoint()))
            .collect()
    }

    /// Kills an agent without telling the controller (fault injection).
    pub fn kill_agent(&self, agent: AgentId) -> bool {
        match self.shared.agents.lock().unwrap().get_mut(&agent) {
            Some(slot) => {
                slot.handle.kill();
                warn!("event=agent_killed node={} agent={agent}", self.shared.cfg.node_id);
                true
            }
            None => false,
        }
    }

    /// Samples the node now and returns the stats without reporting them.
    pub fn sample_now(&self) -> NodeStats {
        sample(&self.shared).0
    }

    pub fn stop(&mut self) {
        self.shared.stopped.store(true, Ordering::SeqCst);
        self.server.stop();
        if let Some(h) = self.reporter.take() {
            let _ = h.join();
        }
        for (_, mut slot) in std::mem::take(&mut *self.shared.agents.lock().unwrap()) {
            slot.handle.kill();
        }
    }
}

impl Drop for Manager {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve(shared: &Arc<MShared>, mut conn: Connection) {
    while let Ok(msg) = conn.recv() {
        let reply = match handle(shared, msg) {
            Ok(r) => r,
            Err(e) => e.to_wire(),
        };
        if conn.send(&reply).is_err() {
            break;
        }
    }
}

fn agent_endpoint(shared: &MShared, agent: AgentId) -> Option<String> {
    shared
        .agents
        .lock()
        .unwrap()
        .get(&agent)
        .map(|s| s.handle.endpoint())
}

fn handle(shared: &Arc<MShared>, msg: Message) -> Result<Message> {
    match msg {
        Message::LaunchAgents {
            app_id,
            pfs_root,
            agents,
        } => {
            let mut ready = Vec::with_capacity(agents.len());
            for a in agents {
                let dup = shared.agents.lock().unwrap().contains_key(&a.agent_id);
                if dup {
                    warn!("event=launch_rejected node={} agent={} reason=duplicate", shared.cfg.node_id, a.agent_id);
                    ready.push(AgentReadyEntry {
                        agent_id: a.agent_id,
                        endpoint: String::new(),
                        ok: false,
                    });
                    continue;
                }
                let spec = AgentSpec {
                    agent_id: a.agent_id,
                    app_id,
                    node_id: shared.cfg.node_id.clone(),
                    ranks: a.ranks,
                    controller: shared.cfg.controller.clone(),
                    pfs_root: PathBuf::from(&pfs_root),
                };
                match shared.launcher.launch(&spec) {
                    Ok(handle) => {
                        let endpoint = handle.endpoint();
                        info!(
                            "event=agent_launched node={} agent={} app={app_id} endpoint={endpoint}",
                            shared.cfg.node_id, a.agent_id
                        );
                        shared
                            .agents
                            .lock()
                            .unwrap()
                            .insert(a.agent_id, Slot { app: app_id, handle });
                        ready.push(AgentReadyEntry {
                            agent_id: a.agent_id,
                            endpoint,
                            ok: true,
                        });
                    }
                    Err(e) => {
                        warn!("event=launch_failed node={} agent={} error={e}", shared.cfg.node_id, a.agent_id);
                        ready.push(AgentReadyEntry {
                            agent_id: a.agent_id,
                            endpoint: String::new(),
                            ok: false,
                        });
                    }
                }
            }
            Ok(Message::AgentReady { agents: ready })
        }
        Message::FlushOrder { agent_id, .. } | Message::MigrateOrder { agent_id, .. } => {
            let Some(ep) = agent_endpoint(shared, agent_id) else {
                return Err(Error::remote(
                    ErrorCode::Missing,
                    format!("agent {agent_id} is not on node {}", shared.cfg.node_id),
                ));
            };
            crate::net::request(&ep, &msg)
        }
        Message::Shutdown { agent_id } => {
            let slot = shared.agents.lock().unwrap().remove(&agent_id);
            if let Some(mut slot) = slot {
                if let Err(e) = crate::net::request(&slot.handle.endpoint(), &msg) {
                    debug!("event=agent_shutdown_unacked agent={agent_id} error={e}");
                }
                slot.handle.kill();
                info!(
                    "event=agent_retired node={} agent={agent_id} app={}",
                    shared.cfg.node_id, slot.app
                );
            }
            Ok(Message::Ok {})
        }
        Message::AgentStatsQuery {} => {
            let stats = sample(shared).0;
            Ok(Message::StatsReport {
                live_agents: Vec::new(),
                dead_agents: Vec::new(),
                stats,
            })
        }
        other => Err(Error::remote(
            ErrorCode::Protocol,
            format!("manager does not handle {}", other.name()),
        )),
    }
}

/// Polls every agent and folds the result into the node monitor. Agents
/// that are gone or do not answer are reported dead.
fn sample(shared: &MShared) -> (NodeStats, Vec<AgentId>, Vec<AgentId>) {
    let probes: Vec<(AgentId, String, bool)> = shared
        .agents
        .lock()
        .unwrap()
        .iter_mut()
        .map(|(id, s)| (*id, s.handle.endpoint(), s.handle.is_alive()))
        .collect();
    let mut samples = Vec::new();
    let (mut live, mut dead) = (Vec::new(), Vec::new());
    for (id, ep, alive) in probes {
        let reply = if alive {
            Connection::connect_timeout(&ep, Duration::from_secs(2))
                .and_then(|mut c| {
                    c.set_read_timeout(Some(Duration::from_secs(5)))?;
                    c.call(&Message::AgentStatsQuery {})
                })
                .ok()
        } else {
            None
        };
        match reply {
            Some(Message::AgentStatsReply {
                bytes_staged,
                bytes_moved,
                ..
            }) => {
                samples.push(AgentSample {
                    agent_id: id,
                    bytes_staged,
                    bytes_moved,
                });
                live.push(id);
            }
            _ => dead.push(id),
        }
    }
    let stats = shared.monitor.lock().unwrap().sample(now_ms(), &samples);
    (stats, live, dead)
}

fn report_loop(shared: &Arc<MShared>) {
    let mut controller: Option<Connection> = None;
    let mut greeted = false;
    let mut announced_dead: Vec<AgentId> = Vec::new();
    while !shared.stopped.load(Ordering::SeqCst) {
        let msg = if greeted {
            let (stats, live_agents, dead_agents) = sample(shared);
            for d in &dead_agents {
                if !announced_dead.contains(d) {
                    warn!("event=agent_dead node={} agent={d}", shared.cfg.node_id);
                    announced_dead.push(*d);
                }
            }
            Message::StatsReport {
                stats,
                live_agents,
                dead_agents,
            }
        } else {
            Message::ManagerHello {
                node_id: shared.cfg.node_id.clone(),
                endpoint: shared.endpoint.lock().unwrap().clone(),
                mem_capacity: shared.cfg.mem_capacity,
            }
        };
        let res = match controller.as_mut() {
            Some(c) => c.call(&msg),
            None => Connection::connect(&shared.cfg.controller).and_then(|mut c| {
                let r = c.call(&msg);
                controller = Some(c);
                r
            }),
        };
        match res {
            Ok(_) if !greeted => {
                greeted = true;
                info!("event=manager_registered node={}", shared.cfg.node_id);
                continue;
            }
            Ok(_) => {}
            Err(e) if e.code().is_some() => greeted = false,
            Err(e) => {
                debug!("event=controller_unreachable node={} error={e}", shared.cfg.node_id);
                controller = None;
                greeted = false;
            }
        }
        let step = Duration::from_millis(20);
        let mut waited = Duration::ZERO;
        while waited < shared.cfg.report_period && !shared.stopped.load(Ordering::SeqCst) {
            thread::sleep(step);
            waited += step;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(id: u64, staged: u64, moved: u64) -> AgentSample {
        AgentSample {
            agent_id: AgentId(id),
            bytes_staged: staged,
            bytes_moved: moved,
        }
    }

    #[test]
    fn first_sample_has_zero_bandwidth() {
        let mut m = NodeMonitor::new("n0", 1000, 0.5).unwrap();
        let st = m.sample(1000, &[s(1, 100, 5000)]);
        assert_eq!(st.bw_used, 0.0);
        assert_eq!(st.mem_used, 100);
        assert_eq!(st.mem_predicted, 100.0);
    }

    #[test]
    fn bandwidth_is_delta_over_elapsed() {
        let mut m = NodeMonitor::new("n0", 1000, 0.5).unwrap();
        m.sample(1000, &[s(1, 100, 0), s(2, 0, 0)]);
        let st = m.sample(1500, &[s(1, 300, 1000), s(2, 0, 500)]);
        assert_eq!(st.bw_used, 3000.0);
        assert_eq!(st.mem_used, 300);
        assert_eq!(st.mem_predicted, 200.0);
        assert_eq!(st.bw_predicted, 1500.0);
    }

    #[test]
    fn new_agent_counts_from_zero() {
        let mut m = NodeMonitor::new("n0", 1000, 1.0).unwrap();
        m.sample(0, &[s(1, 0, 100)]);
        let st = m.sample(1000, &[s(1, 0, 100), s(2, 0, 400)]);
        assert_eq!(st.bw_used, 400.0);
    }

    #[test]
    fn window_is_bounded() {
        let mut m = NodeMonitor::new("n0", 1000, 0.5).unwrap();
        for t in 0..100 {
            m.sample(t * 10, &[]);
        }
        assert_eq!(m.window().count(), STATS_WINDOW);
        assert!(m.window().all(NodeStats::is_consistent));
    }
}
