//! Global view: application registry, agent placement, commit tracking,
//! PFS flush orchestration and the resource-manager interactions.

pub mod policy;
pub mod state;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

pub use policy::{DefaultPolicy, NodeView, PlacementPolicy, PolicyConfig};
pub use state::{Action, AssignmentPlan, ClusterState, FlushJob};

use crate::error::{Error, Result};
use crate::layout::{redistribution_plan, Layout};
use crate::model::{AgentAssignment, AgentId, AppId, ProcessType};
use crate::net::{request, Connection, Server};
use crate::pfs::PfsTier;
use crate::protocol::{AgentLaunch, ErrorCode, Message};
use state::AgentRec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub listen: String,
    pub pfs_root: PathBuf,
    /// Resource manager endpoint for node requests.
    pub rm: Option<String>,
    /// Nodes owned from the start.
    pub nodes: Vec<String>,
    pub tick_ms: u64,
    pub policy: PolicyConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            pfs_root: PathBuf::from("pfs"),
            rm: None,
            nodes: Vec::new(),
            tick_ms: 50,
            policy: PolicyConfig::default(),
        }
    }
}

impl ControllerConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.policy.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Fault switches for crash-consistency tests.
#[derive(Debug, Default)]
pub struct ControllerFaults {
    /// Stop every flush after the region files are written and before the
    /// manifest is renamed into place.
    pub crash_before_manifest: AtomicBool,
}

#[derive(Debug, Default)]
struct Counters {
    source_map_queries: AtomicU64,
    plan_pushes: AtomicU64,
    flushes: AtomicU64,
    migrations: AtomicU64,
    node_requests: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ControllerCounters {
    pub source_map_queries: u64,
    pub plan_pushes: u64,
    pub flushes: u64,
    pub migrations: u64,
    pub node_requests: u64,
}

struct Inner {
    cfg: ControllerConfig,
    pfs: PfsTier,
    state: Mutex<ClusterState>,
    /// Serializes every assignment change, which spans launches over the network.
    placement: Mutex<()>,
    outstanding: Mutex<BTreeSet<String>>,
    rm: Mutex<Option<String>>,
    faults: Arc<ControllerFaults>,
    counters: Counters,
    actions: Mutex<Sender<Action>>,
    stopped: AtomicBool,
}

pub struct Controller {
    inner: Arc<Inner>,
    server: Server,
    workers: Vec<JoinHandle<()>>,
}

impl Controller {
    pub fn start(cfg: ControllerConfig) -> Result<Controller> {
        Self::with_policy(cfg, Box::new(DefaultPolicy))
    }

    pub fn with_policy(cfg: ControllerConfig, policy: Box<dyn PlacementPolicy>) -> Result<Controller> {
        cfg.policy.validate()?;
        std::fs::create_dir_all(&cfg.pfs_root)?;
        let mut st = ClusterState::new(cfg.policy.clone(), policy);
        for n in &cfg.nodes {
            st.own_node(n, 0);
        }
        let (tx, rx) = mpsc::channel::<Action>();
        let inner = Arc::new(Inner {
            pfs: PfsTier::new(cfg.pfs_root.clone()),
            state: Mutex::new(st),
            placement: Mutex::new(()),
            outstanding: Mutex::default(),
            rm: Mutex::new(cfg.rm.clone()),
            faults: Arc::default(),
            counters: Counters::default(),
            actions: Mutex::new(tx),
            stopped: AtomicBool::new(false),
            cfg,
        });
        let h = inner.clone();
        let server = Server::spawn(&inner.cfg.listen, "controller", move |conn| serve(&h, conn))?;
        let d = inner.clone();
        let dispatcher = thread::Builder::new()
            .name("controller-actions".into())
            .spawn(move || {
                for a in rx {
                    d.perform(a);
                }
            })?;
        let t = inner.clone();
        let ticker = thread::Builder::new()
            .name("controller-tick".into())
            .spawn(move || tick_loop(&t))?;
        info!("event=controller_started endpoint={}", server.endpoint());
        Ok(Controller {
            inner,
            server,
            workers: vec![ticker, dispatcher],
        })
    }

    pub fn endpoint(&self) -> String {
        self.server.endpoint()
    }

    pub fn pfs_root(&self) -> &Path {
        &self.inner.cfg.pfs_root
    }

    pub fn faults(&self) -> Arc<ControllerFaults> {
        self.inner.faults.clone()
    }

    pub fn counters(&self) -> ControllerCounters {
        let c = &self.inner.counters;
        ControllerCounters {
            source_map_queries: c.source_map_queries.load(Ordering::SeqCst),
            plan_pushes: c.plan_pushes.load(Ordering::SeqCst),
            flushes: c.flushes.load(Ordering::SeqCst),
            migrations: c.migrations.load(Ordering::SeqCst),
            node_requests: c.node_requests.load(Ordering::SeqCst),
        }
    }

    /// Points node requests at a resource manager started later.
    pub fn set_rm(&self, endpoint: &str) {
        *self.inner.rm.lock().unwrap() = Some(endpoint.to_string());
    }

    pub fn set_target_rate(&self, bytes_per_sec: f64) {
        self.inner.state().cfg.target_rate = bytes_per_sec;
    }

    /// Runs `f` over the current state.
    pub fn inspect<R>(&self, f: impl FnOnce(&ClusterState) -> R) -> R {
        f(&self.inner.state())
    }

    /// Flushes one version now, optionally purging the memory copies.
    pub fn flush_now(&self, app: AppId, version: u64, purge: bool) -> Result<()> {
        self.inner.flush_version(app, version, purge, Duration::from_secs(30))
    }

    pub fn stop(&mut self) {
        if self.inner.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        self.server.stop();
        // Closing the channel ends the dispatcher.
        let (tx, _) = mpsc::channel();
        *self.inner.actions.lock().unwrap() = tx;
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for Controller {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve(inner: &Arc<Inner>, mut conn: Connection) {
    while let Ok(msg) = conn.recv() {
        let name = msg.name();
        let reply = inner.handle(msg).unwrap_or_else(|e| {
            debug!("event=request_failed msg={name} error={e}");
            e.to_wire()
        });
        if conn.send(&reply).is_err() {
            break;
        }
    }
}

fn tick_loop(inner: &Arc<Inner>) {
    let period = Duration::from_millis(inner.cfg.tick_ms.max(1));
    while !inner.stopped.load(Ordering::SeqCst) {
        thread::sleep(period);
        let jobs = inner.state().schedule_flush(Instant::now());
        for job in jobs {
            let i = inner.clone();
            let spawned = thread::Builder::new()
                .name("controller-flush".into())
                .spawn(move || i.run_flush(job));
            if let Err(e) = spawned {
                warn!("event=flush_spawn_failed error={e}");
            }
        }
        inner.repair();
    }
}

impl Inner {
    fn state(&self) -> MutexGuard<'_, ClusterState> {
        self.state.lock().unwrap()
    }

    fn dispatch(&self, actions: Vec<Action>) {
        let tx = self.actions.lock().unwrap();
        for a in actions {
            let _ = tx.send(a);
        }
    }

    fn perform(&self, action: Action) {
        match action {
            Action::ToAgent { endpoint, msg } => {
                if let Err(e) = request(&endpoint, &msg) {
                    debug!("event=agent_request_failed endpoint={endpoint} msg={} error={e}", msg.name());
                }
            }
            Action::Retire { agent, node } => {
                let manager = self.state().nodes.get(&node).and_then(|n| n.manager.clone());
                if let Some(m) = manager {
                    if let Err(e) = request(&m, &Message::Shutdown { agent_id: agent }) {
                        debug!("event=retire_failed agent={agent} error={e}");
                    }
                }
            }
            Action::RemovePfs { app, epoch, version } => {
                if let Err(e) = self.pfs.remove_version(app, epoch, version) {
                    debug!("event=pfs_remove_failed app={app} version={version} error={e}");
                }
            }
        }
    }

    fn pfs_root(&self) -> String {
        self.cfg.pfs_root.to_string_lossy().into_owned()
    }

    fn handle(self: &Arc<Self>, msg: Message) -> Result<Message> {
        match msg {
            Message::Register {
                name,
                world_size,
                rank,
                process_type,
                regions,
            } => {
                if process_type == ProcessType::Joining {
                    let id = self.state().app_by_name(&name).ok_or_else(|| {
                        Error::remote(ErrorCode::UnknownApp, format!("joining rank for unknown app {name}"))
                    })?;
                    let epoch = {
                        let st = self.state();
                        let app = st.app(id)?;
                        match &app.pending_adapt {
                            Some(p) if p.world_size == world_size => p.epoch,
                            _ if app.record.world_size == world_size => app.record.adapt_epoch,
                            _ => app.record.adapt_epoch + 1,
                        }
                    };
                    self.adapt(id, epoch, world_size)?;
                }
                let ack = self.state().register(&name, world_size, rank, process_type)?;
                if regions.is_empty() {
                    return Ok(ack);
                }
                let Message::RegisterAck { app_id, .. } = ack else {
                    unreachable!("register returns RegisterAck");
                };
                self.declare(app_id, regions)?;
                self.state().register_ack(app_id)
            }
            Message::DeclareRegions { app_id, regions } => {
                let changed = self.declare(app_id, regions)?;
                self.state().assignment_ack(app_id, changed)
            }
            Message::AssignmentQuery { app_id } => self.state().assignment_ack(app_id, false),
            Message::ProbeAgents { app_id } => self.probe(app_id),
            Message::RestartQuery { app_id, name } => {
                let st = self.state();
                let id = if app_id.0 != 0 {
                    Some(app_id)
                } else {
                    st.app_by_name(&name)
                };
                let info = match id {
                    Some(id) => st.restart_point(id, &self.pfs_root())?,
                    None => None,
                };
                Ok(Message::RestartInfo { info })
            }
            Message::Deregister { app_id } => {
                let actions = self.state().deregister(app_id)?;
                self.dispatch(actions);
                Ok(Message::Ok {})
            }
            Message::AdaptBegin {
                app_id,
                new_world_size,
                epoch,
            } => {
                self.adapt(app_id, epoch, new_world_size)?;
                self.state().adapt_ack(app_id)
            }
            Message::SourceMapQuery { app_id, epoch } => {
                self.counters.source_map_queries.fetch_add(1, Ordering::SeqCst);
                let assignments = self.state().source_map(app_id, epoch)?;
                Ok(Message::SourceMap { assignments })
            }
            Message::CommitReport {
                app_id,
                epoch,
                version,
                rank,
                agent_id,
                bytes,
                transfer_us,
                regions,
            } => {
                let actions = self.state().record_commit(
                    app_id,
                    epoch,
                    version,
                    rank,
                    agent_id,
                    bytes,
                    transfer_us,
                    &regions,
                    Instant::now(),
                )?;
                self.dispatch(actions);
                Ok(Message::Ok {})
            }
            Message::CapacityNotice {
                app_id,
                agent_id,
                needed,
            } => {
                info!("event=capacity_exhausted app={app_id} agent={agent_id} needed={needed}");
                self.state().capacity_pressure(agent_id);
                let me = self.clone();
                thread::spawn(move || {
                    me.request_nodes(1, "memory");
                });
                Ok(Message::Ok {})
            }
            Message::ManagerHello {
                node_id,
                endpoint,
                mem_capacity,
            } => {
                self.state().manager_hello(&node_id, &endpoint, mem_capacity);
                info!("event=manager_hello node={node_id} endpoint={endpoint} capacity={mem_capacity}");
                Ok(Message::Ok {})
            }
            Message::StatsReport {
                stats, dead_agents, ..
            } => {
                let mut st = self.state();
                let newly = st.stats_report(stats, &dead_agents)?;
                let mut actions = Vec::new();
                for d in newly {
                    if let Some(app) = st.agents.get(&d).map(|a| a.app) {
                        actions.extend(st.retire_unreferenced(app));
                    }
                }
                drop(st);
                self.dispatch(actions);
                Ok(Message::Ok {})
            }
            Message::NodeGrant { nodes, partial } => {
                self.grant(&nodes, partial);
                Ok(Message::Ok {})
            }
            Message::NodeReclaim { nodes, deadline_ms } => self.reclaim(&nodes, deadline_ms),
            Message::MigrateHint { from, to } => self.migrate_hint(&from, &to),
            Message::AppAdaptNotice {
                app_id,
                new_world_size,
                epoch,
            } => {
                self.prestage(app_id, new_world_size, epoch)?;
                Ok(Message::Ok {})
            }
            other => Err(Error::remote(
                ErrorCode::Protocol,
                format!("controller does not handle {}", other.name()),
            )),
        }
    }

    // ---- placement --------------------------------------------------------

    /// Starts the agents a plan needs and records them.
    fn launch(&self, plan: &mut AssignmentPlan) -> Result<()> {
        let mut by_manager: HashMap<String, Vec<AgentLaunch>> = HashMap::new();
        for l in &plan.launches {
            by_manager.entry(l.manager.clone()).or_default().push(AgentLaunch {
                agent_id: l.agent_id,
                ranks: l.ranks.clone(),
            });
        }
        let mut ready = HashMap::new();
        for (manager, agents) in by_manager {
            let reply = request(
                &manager,
                &Message::LaunchAgents {
                    app_id: plan.app,
                    pfs_root: self.pfs_root(),
                    agents,
                },
            )?;
            match reply {
                Message::AgentReady { agents } => {
                    for a in agents.into_iter().filter(|a| a.ok) {
                        ready.insert(a.agent_id, a.endpoint);
                    }
                }
                other => return Err(crate::net::unexpected(&other)),
            }
        }
        self.state().install_launched(plan, &ready)
    }

    /// Plans with one node request and retry when capacity is short.
    fn plan_with_growth(
        &self,
        mut plan: impl FnMut(&ClusterState) -> Result<Option<AssignmentPlan>>,
    ) -> Result<Option<AssignmentPlan>> {
        match plan(&self.state()) {
            Err(e) if e.code() == Some(ErrorCode::InsufficientCapacity) => {
                if self.request_nodes(1, "memory") {
                    plan(&self.state())
                } else {
                    Err(e)
                }
            }
            other => other,
        }
    }

    /// Records regions and places agents for any rank without one.
    fn declare(&self, app: AppId, regions: Vec<crate::model::RegionDescriptor>) -> Result<bool> {
        let needs = self.state().declare_regions(app, regions)?;
        if !needs {
            return Ok(false);
        }
        self.ensure_placed(app)
    }

    fn ensure_placed(&self, app: AppId) -> Result<bool> {
        let _g = self.placement.lock().unwrap();
        let Some(mut plan) = self.plan_with_growth(|st| st.plan_initial(app))? else {
            return Ok(false);
        };
        self.launch(&mut plan)?;
        let actions = self.state().apply_assignment(plan)?;
        self.dispatch(actions);
        Ok(true)
    }

    /// Gives agents to ranks that lost theirs.
    fn repair(&self) {
        let needy: Vec<AppId> = self
            .state()
            .apps
            .values()
            .filter(|a| !a.record.regions.is_empty() && !a.covers_all_ranks())
            .map(|a| a.record.app_id)
            .collect();
        for app in needy {
            let Ok(_g) = self.placement.try_lock() else {
                return;
            };
            let plan = self.state().plan_repair(app);
            match plan {
                Ok(Some(mut plan)) => {
                    let res = self
                        .launch(&mut plan)
                        .and_then(|()| self.state().apply_assignment(plan));
                    match res {
                        Ok(actions) => {
                            info!("event=agents_repaired app={app}");
                            self.dispatch(actions)
                        }
                        Err(e) => debug!("event=repair_failed app={app} error={e}"),
                    }
                }
                Ok(None) => {}
                Err(e) => debug!("event=repair_deferred app={app} error={e}"),
            }
        }
    }

    fn probe(&self, app: AppId) -> Result<Message> {
        let _g = self.placement.lock().unwrap();
        let decision = {
            let st = self.state();
            let rec = &st.app(app)?.record;
            let rate = st.observed_rate(app)?;
            let agents = rec.assignments.len() as u32;
            let next = st.policy.probe(&st.cfg, rate, agents, rec.world_size);
            debug!("event=probe app={app} rate={rate:?} agents={agents} decision={next:?}");
            next.map(|n| (n, rec.world_size))
        };
        let Some((count, world)) = decision else {
            return self.state().assignment_ack(app, false);
        };
        let planned = self.state().plan_assignment(app, world, count);
        let mut plan = match planned {
            Ok(p) => p,
            Err(e) => {
                info!("event=probe_change_skipped app={app} error={e}");
                return self.state().assignment_ack(app, false);
            }
        };
        self.launch(&mut plan)?;
        let mut st = self.state();
        let actions = st.apply_assignment(plan)?;
        info!("event=probe_changed app={app} agents={count}");
        let ack = st.assignment_ack(app, true);
        drop(st);
        self.dispatch(actions);
        ack
    }

    // ---- adaptation ---------------------------------------------------------

    fn adapt(&self, app: AppId, epoch: u32, world: u32) -> Result<()> {
        let _g = self.placement.lock().unwrap();
        if self.state().adapt_done(app, epoch, world)? {
            return Ok(());
        }
        let pending = self.state().take_pending(app, epoch, world)?;
        let assignments = match pending {
            Some(a) => a,
            None => {
                let count = self.state().adapt_agent_count(app, world)?;
                let mut plan = self.plan_with_growth(|st| st.plan_assignment(app, world, count).map(Some))?
                    .expect("assignment plan");
                self.launch(&mut plan)?;
                plan.assignments
            }
        };
        let actions = self.state().promote(app, epoch, world, assignments)?;
        self.dispatch(actions);
        Ok(())
    }

    /// Prepares an announced adaptation: agents for the new world and
    /// redistribution plans pushed to them.
    fn prestage(&self, app: AppId, world: u32, epoch: u32) -> Result<()> {
        let _g = self.placement.lock().unwrap();
        let (regions, sources) = {
            let st = self.state();
            let a = st.app(app)?;
            if world == a.record.world_size {
                info!("event=adapt_notice_noop app={app} world={world}");
                return Ok(());
            }
            if epoch != a.record.adapt_epoch + 1 {
                return Err(Error::invalid(format!(
                    "adapt notice for epoch {epoch}, app {app} is at epoch {}",
                    a.record.adapt_epoch
                )));
            }
            (a.record.regions.clone(), a.record.assignments.clone())
        };
        let count = self.state().adapt_agent_count(app, world)?;
        let mut plan = self
            .plan_with_growth(|st| st.plan_assignment(app, world, count).map(Some))?
            .expect("assignment plan");
        self.launch(&mut plan)?;
        let targets: Vec<AgentAssignment> = plan.assignments.clone();
        self.state().set_pending_adapt(plan, epoch)?;
        for r in &regions {
            let old = r.layout();
            let new = Layout::new(r.total_count(), world, r.scheme);
            let rp = redistribution_plan(old, new)?;
            let msg = Message::PlanPush {
                app_id: app,
                epoch,
                region_id: r.region_id.clone(),
                elem_size: r.elem_size,
                old,
                new,
                transfers: rp.transfers,
                sources: sources.clone(),
            };
            for t in &targets {
                crate::net::expect_ok(request(&t.endpoint, &msg)?)?;
                self.counters.plan_pushes.fetch_add(1, Ordering::SeqCst);
            }
        }
        info!(
            "event=adapt_prestaged app={app} epoch={epoch} world={world} agents={} regions={}",
            targets.len(),
            regions.len()
        );
        Ok(())
    }

    // ---- resource manager ---------------------------------------------------

    fn grant(&self, nodes: &[String], partial: bool) {
        let mut st = self.state();
        for n in nodes {
            st.own_node(n, 0);
            info!("event=node_granted node={n} partial={partial}");
        }
    }

    /// Asks the resource manager for nodes; at most one request per reason
    /// is outstanding. Returns whether any node was granted.
    fn request_nodes(&self, count: u32, reason: &str) -> bool {
        let Some(rm) = self.rm.lock().unwrap().clone() else {
            return false;
        };
        if !self.outstanding.lock().unwrap().insert(reason.to_string()) {
            debug!("event=node_request_suppressed reason={reason}");
            return false;
        }
        self.counters.node_requests.fetch_add(1, Ordering::SeqCst);
        info!("event=node_request count={count} reason={reason}");
        let reply = request(
            &rm,
            &Message::NodeRequest {
                count,
                reason: reason.to_string(),
            },
        );
        self.outstanding.lock().unwrap().remove(reason);
        match reply {
            Ok(Message::NodeGrant { nodes, partial }) if !nodes.is_empty() => {
                self.grant(&nodes, partial);
                true
            }
            Ok(_) => false,
            Err(e) => {
                info!("event=node_request_denied reason={reason} error={e}");
                false
            }
        }
    }

    fn reclaim(&self, nodes: &[String], deadline_ms: u64) -> Result<Message> {
        let deadline = Instant::now() + Duration::from_millis(deadline_ms);
        {
            let mut st = self.state();
            for n in nodes {
                if !st.nodes.get(n).is_some_and(|e| e.owned) {
                    return Err(Error::remote(ErrorCode::NotOwned, format!("node {n} not owned")));
                }
            }
            for n in nodes {
                st.nodes.get_mut(n).expect("checked").draining = true;
            }
        }
        let mut degraded = false;
        for n in nodes {
            info!("event=node_reclaim node={n} deadline_ms={deadline_ms}");
            let agents = self.state().agents_on(n);
            for a in agents {
                match self.move_agent(a, None, deadline) {
                    Ok(true) => {}
                    Ok(false) => degraded = true,
                    Err(e) => {
                        warn!("event=reclaim_agent_failed agent={a} error={e}");
                        degraded = true;
                    }
                }
            }
            let mut st = self.state();
            if let Some(e) = st.nodes.get_mut(n) {
                e.owned = false;
                e.draining = false;
            }
            info!("event=node_released node={n} degraded={degraded}");
        }
        if degraded {
            Err(Error::remote(ErrorCode::Storage, "degraded to PFS"))
        } else {
            Ok(Message::Ok {})
        }
    }

    fn migrate_hint(&self, from: &str, to: &str) -> Result<Message> {
        {
            let st = self.state();
            if !st.nodes.contains_key(from) {
                return Err(Error::invalid(format!("unknown node {from}")));
            }
            if !st.nodes.get(to).is_some_and(|n| n.owned) {
                return Err(Error::remote(ErrorCode::NotOwned, format!("node {to} not owned")));
            }
        }
        let agents = self.state().agents_on(from);
        let far = Instant::now() + Duration::from_secs(3600);
        for a in agents {
            let target = self.state().migration_target(a, Some(to))?;
            if target.is_none() {
                return Err(Error::remote(
                    ErrorCode::InsufficientCapacity,
                    format!("node {to} lacks headroom for agent {a}"),
                ));
            }
            if !self.move_agent(a, Some(to), far)? {
                return Err(Error::remote(ErrorCode::Storage, format!("agent {a} degraded to PFS")));
            }
        }
        Ok(Message::Ok {})
    }

    /// Migrates an agent to another node, or flushes its versions to the PFS
    /// tier when no node can take it. Returns whether it migrated.
    fn move_agent(&self, agent: AgentId, target: Option<&str>, deadline: Instant) -> Result<bool> {
        let _g = self.placement.lock().unwrap();
        let picked = self.state().migration_target(agent, target)?;
        if let Some((node, manager)) = picked.filter(|_| Instant::now() < deadline) {
            match self.migrate(agent, &node, &manager) {
                Ok(()) => return Ok(true),
                Err(e) => warn!("event=migration_failed agent={agent} error={e}"),
            }
        }
        if target.is_some() {
            return Err(Error::remote(ErrorCode::Rejected, format!("agent {agent} could not migrate")));
        }
        let versions = self.state().versions_on(agent);
        for (app, v) in versions {
            self.flush_version(app, v, false, Duration::from_secs(60))?;
        }
        // Retired before returning so a reclaimed node is free once acknowledged.
        let actions = self.state().evacuate_to_pfs(agent);
        for a in actions {
            self.perform(a);
        }
        Ok(false)
    }

    fn migrate(&self, old: AgentId, node: &str, manager: &str) -> Result<()> {
        let (rec, ranks, old_manager) = {
            let st = self.state();
            let rec = st
                .agents
                .get(&old)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("unknown agent {old}")))?;
            let ranks = st
                .app(rec.app)?
                .record
                .assignments
                .iter()
                .find(|a| a.agent_id == old)
                .map(|a| a.ranks.clone())
                .unwrap_or_default();
            let m = st.nodes.get(&rec.node).and_then(|n| n.manager.clone()).unwrap_or_default();
            (rec, ranks, m)
        };
        let new = self.state().new_agent_id();
        let reply = request(
            manager,
            &Message::LaunchAgents {
                app_id: rec.app,
                pfs_root: self.pfs_root(),
                agents: vec![AgentLaunch { agent_id: new, ranks }],
            },
        )?;
        let endpoint = match reply {
            Message::AgentReady { agents } => agents
                .into_iter()
                .find(|a| a.agent_id == new && a.ok)
                .map(|a| a.endpoint)
                .ok_or_else(|| Error::remote(ErrorCode::Internal, "migration target did not start"))?,
            other => return Err(crate::net::unexpected(&other)),
        };
        self.state().add_agent(AgentRec {
            id: new,
            app: rec.app,
            node: node.to_string(),
            endpoint: endpoint.clone(),
            share: rec.share,
            alive: true,
        });
        let ack = request(
            &old_manager,
            &Message::MigrateOrder {
                app_id: rec.app,
                agent_id: old,
                target_node: node.to_string(),
                target_endpoint: endpoint,
            },
        );
        match ack {
            Ok(Message::MigrateAck { ok: true, entries, .. }) => {
                let actions = self.state().complete_migration(old, new);
                self.counters.migrations.fetch_add(1, Ordering::SeqCst);
                info!("event=migration_done agent={old} successor={new} entries={entries}");
                for a in actions {
                    self.perform(a);
                }
                Ok(())
            }
            other => {
                let reason = match other {
                    Ok(Message::MigrateAck { reason, .. }) => reason,
                    Ok(m) => format!("unexpected {}", m.name()),
                    Err(e) => e.to_string(),
                };
                self.state().agents.remove(&new);
                self.dispatch(vec![Action::Retire {
                    agent: new,
                    node: node.to_string(),
                }]);
                Err(Error::remote(ErrorCode::Internal, reason))
            }
        }
    }

    // ---- flushing -------------------------------------------------------------

    fn flush_version(&self, app: AppId, version: u64, purge: bool, wait: Duration) -> Result<()> {
        let deadline = Instant::now() + wait;
        loop {
            let claimed = self.state().claim_flush(app, version, purge)?;
            if let Some(job) = claimed {
                return self.run_flush(job);
            }
            if Instant::now() >= deadline {
                return Err(Error::Timeout(format!("flush of v{version} never got its nodes")));
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    /// Orders every holder to write its ranks, then publishes the manifest.
    fn run_flush(&self, job: FlushJob) -> Result<()> {
        let res = self.flush_steps(&job);
        let (ok, purged) = match &res {
            Ok(p) => (true, *p),
            Err(e) => {
                warn!("event=flush_error app={} version={} error={e}", job.app, job.version);
                (false, false)
            }
        };
        self.state().finish_flush(&job, ok, purged, Instant::now());
        self.counters.flushes.fetch_add(u64::from(ok), Ordering::SeqCst);
        res.map(|_| ())
    }

    fn flush_steps(&self, job: &FlushJob) -> Result<bool> {
        for o in &job.orders {
            let reply = request(
                &o.manager,
                &Message::FlushOrder {
                    app_id: job.app,
                    epoch: job.epoch,
                    version: job.version,
                    agent_id: o.agent,
                    ranks: o.ranks.clone(),
                },
            )?;
            match reply {
                Message::FlushAck { ok: true, .. } => {}
                Message::FlushAck { reason, .. } => return Err(Error::remote(ErrorCode::Storage, reason)),
                other => return Err(crate::net::unexpected(&other)),
            }
        }
        let manifest = self.state().manifest_for(job)?;
        let staged = self.pfs.stage_manifest(&manifest)?;
        if self.faults.crash_before_manifest.load(Ordering::SeqCst) {
            warn!("event=flush_crashed app={} version={}", job.app, job.version);
            return Err(Error::remote(ErrorCode::Storage, "crash injected before manifest rename"));
        }
        self.pfs.publish_manifest(&manifest, &staged)?;
        if !job.purge {
            return Ok(false);
        }
        for o in &job.orders {
            let msg = Message::PurgeMemory {
                app_id: job.app,
                epoch: job.epoch,
                version: job.version,
            };
            if let Err(e) = request(&o.endpoint, &msg).and_then(crate::net::expect_ok) {
                warn!("event=purge_failed agent={} error={e}", o.agent);
                return Ok(false);
            }
        }
        Ok(true)
    }
}
