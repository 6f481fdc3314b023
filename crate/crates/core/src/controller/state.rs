//! Controller bookkeeping with no I/O. Handlers mutate a [`ClusterState`]
//! and return the messages to send once the state lock is released.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Duration, Instant};

use log::info;

use super::policy::{NodeView, PlacementPolicy, PolicyConfig};
use crate::error::{Error, Result};
use crate::layout::{block_partition, Layout};
use crate::model::{
    make_version, version_epoch, AgentAssignment, AgentId, AppId, ApplicationRecord, CheckpointVersion,
    CommitStatus, EntrySum, IdGen, NodeStats, ProcessType, Rank, RegionDescriptor, StorageLevel,
    versions_to_collect, RETAINED_VERSIONS,
};
use crate::pfs::{crc_hex, Manifest, ManifestEntry};
use crate::protocol::{EntryChecksum, ErrorCode, Message, RegionChecksum, RestartPoint, VersionKey};

/// Work to do after the state lock is released.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Fire-and-forget request to an agent.
    ToAgent { endpoint: String, msg: Message },
    /// Stop an agent through its node manager.
    Retire { agent: AgentId, node: String },
    RemovePfs { app: AppId, epoch: u32, version: u64 },
}

#[derive(Debug, Clone)]
pub struct AgentRec {
    pub id: AgentId,
    pub app: AppId,
    pub node: String,
    pub endpoint: String,
    /// Memory promised to the agent at placement time.
    pub share: u64,
    pub alive: bool,
}

#[derive(Debug, Clone)]
pub struct NodeEntry {
    pub stats: NodeStats,
    pub owned: bool,
    pub manager: Option<String>,
    /// Set while the node is being reclaimed; excluded from placement.
    pub draining: bool,
}

impl NodeEntry {
    fn placeable(&self) -> bool {
        self.owned && self.manager.is_some() && !self.draining
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Report {
    pub rank: Rank,
    pub bytes: u64,
    pub transfer_us: u64,
    pub arrived: Instant,
    pub generation: u64,
}

#[derive(Debug, Clone)]
pub struct PendingAdapt {
    pub epoch: u32,
    pub world_size: u32,
    pub assignments: Vec<AgentAssignment>,
}

#[derive(Debug, Clone)]
pub struct AppState {
    pub record: ApplicationRecord,
    /// Bumped whenever the assignment changes; clients compare it.
    pub generation: u64,
    attached: BTreeSet<Rank>,
    detached: u32,
    pub next_version: u64,
    max_version: u64,
    reports: BTreeMap<u64, Vec<Report>>,
    pub pending_adapt: Option<PendingAdapt>,
    /// Assignment that held the snapshots each epoch redistributes from.
    pub source_maps: BTreeMap<u32, Vec<AgentAssignment>>,
    flushing: BTreeSet<u64>,
    flush_retry_at: HashMap<u64, Instant>,
    /// Versions to flush regardless of age, and whether to purge after.
    forced_flush: BTreeMap<u64, bool>,
    /// Agents replaced by a migration, mapped to their successor.
    moved: HashMap<AgentId, AgentId>,
}

impl AppState {
    fn new(record: ApplicationRecord) -> Self {
        Self {
            record,
            generation: 1,
            attached: BTreeSet::new(),
            detached: 0,
            next_version: make_version(0, 1),
            max_version: 0,
            reports: BTreeMap::new(),
            pending_adapt: None,
            source_maps: BTreeMap::new(),
            flushing: BTreeSet::new(),
            flush_retry_at: HashMap::new(),
            forced_flush: BTreeMap::new(),
            moved: HashMap::new(),
        }
    }

    fn resolve(&self, mut agent: AgentId) -> AgentId {
        while let Some(next) = self.moved.get(&agent) {
            agent = *next;
        }
        agent
    }

    pub fn covers_all_ranks(&self) -> bool {
        let mut seen = vec![false; self.record.world_size as usize];
        for a in &self.record.assignments {
            for &r in &a.ranks {
                if let Some(s) = seen.get_mut(r as usize) {
                    *s = true;
                }
            }
        }
        seen.iter().all(|s| *s)
    }

    fn uncovered_ranks(&self) -> Vec<Rank> {
        (0..self.record.world_size)
            .filter(|r| !self.record.assignments.iter().any(|a| a.ranks.contains(r)))
            .collect()
    }
}

/// A planned (re)assignment: agents to reuse plus agents to launch.
#[derive(Debug, Clone)]
pub struct AssignmentPlan {
    pub app: AppId,
    pub world_size: u32,
    /// Complete assignment; endpoints of agents still to launch are empty.
    pub assignments: Vec<AgentAssignment>,
    pub launches: Vec<Launch>,
}

#[derive(Debug, Clone)]
pub struct Launch {
    pub agent_id: AgentId,
    pub node: String,
    pub manager: String,
    pub ranks: Vec<Rank>,
    pub share: u64,
}

#[derive(Debug, Clone)]
pub struct FlushOrder {
    pub node: String,
    pub manager: String,
    pub agent: AgentId,
    pub endpoint: String,
    pub ranks: Vec<Rank>,
}

#[derive(Debug, Clone)]
pub struct FlushJob {
    pub app: AppId,
    pub epoch: u32,
    pub version: u64,
    pub orders: Vec<FlushOrder>,
    pub purge: bool,
    pub nodes: Vec<String>,
}

/// Regions relaid over `world` ranks, keeping totals and schemes.
pub fn relayout(regions: &[RegionDescriptor], world: u32) -> Vec<RegionDescriptor> {
    regions
        .iter()
        .map(|r| {
            let layout = Layout::new(r.total_count(), world, r.scheme);
            RegionDescriptor::from_layout(r.region_id.clone(), r.elem_size, &layout)
        })
        .collect()
}

fn rank_bytes(regions: &[RegionDescriptor], rank: Rank) -> u64 {
    regions.iter().map(|r| r.bytes_for_rank(rank)).sum()
}

pub struct ClusterState {
    pub cfg: PolicyConfig,
    pub policy: Box<dyn PlacementPolicy>,
    pub nodes: BTreeMap<String, NodeEntry>,
    pub apps: BTreeMap<AppId, AppState>,
    pub agents: BTreeMap<AgentId, AgentRec>,
    app_ids: IdGen,
    agent_ids: IdGen,
}

impl ClusterState {
    pub fn new(cfg: PolicyConfig, policy: Box<dyn PlacementPolicy>) -> Self {
        Self {
            cfg,
            policy,
            nodes: BTreeMap::new(),
            apps: BTreeMap::new(),
            agents: BTreeMap::new(),
            app_ids: IdGen::new(),
            agent_ids: IdGen::new(),
        }
    }

    pub fn app(&self, id: AppId) -> Result<&AppState> {
        self.apps
            .get(&id)
            .ok_or_else(|| Error::remote(ErrorCode::UnknownApp, format!("unknown app {id}")))
    }

    pub fn app_mut(&mut self, id: AppId) -> Result<&mut AppState> {
        self.apps
            .get_mut(&id)
            .ok_or_else(|| Error::remote(ErrorCode::UnknownApp, format!("unknown app {id}")))
    }

    pub fn app_by_name(&self, name: &str) -> Option<AppId> {
        self.apps
            .values()
            .filter(|a| a.record.name == name)
            .map(|a| a.record.app_id)
            .max()
    }

    // ---- nodes ------------------------------------------------------------

    pub fn own_node(&mut self, node: &str, capacity: u64) {
        let e = self.nodes.entry(node.to_string()).or_insert_with(|| NodeEntry {
            stats: NodeStats::idle(node, capacity),
            owned: false,
            manager: None,
            draining: false,
        });
        e.owned = true;
        e.draining = false;
    }

    pub fn manager_hello(&mut self, node: &str, endpoint: &str, capacity: u64) {
        let e = self.nodes.entry(node.to_string()).or_insert_with(|| NodeEntry {
            stats: NodeStats::idle(node, capacity),
            owned: false,
            manager: None,
            draining: false,
        });
        e.manager = Some(endpoint.to_string());
        e.stats.mem_capacity = capacity;
    }

    /// Records a manager's report. Returns the agents newly found dead.
    pub fn stats_report(&mut self, stats: NodeStats, dead: &[AgentId]) -> Result<Vec<AgentId>> {
        let Some(e) = self.nodes.get_mut(&stats.node_id) else {
            return Err(Error::remote(
                ErrorCode::Rejected,
                format!("node {} has not said hello", stats.node_id),
            ));
        };
        e.stats = stats;
        let mut newly = Vec::new();
        for d in dead {
            if self.agents.get(d).is_some_and(|a| a.alive) {
                self.mark_dead(*d);
                newly.push(*d);
            }
        }
        Ok(newly)
    }

    /// Forgets the memory copies an agent held and drops it from its
    /// application's assignment so the ranks get a fresh agent.
    pub fn mark_dead(&mut self, agent: AgentId) {
        let Some(rec) = self.agents.get_mut(&agent) else {
            return;
        };
        rec.alive = false;
        let app_id = rec.app;
        if let Some(app) = self.apps.get_mut(&app_id) {
            for v in &mut app.record.versions {
                for p in &mut v.placement {
                    if *p == Some(agent) {
                        *p = None;
                    }
                }
            }
            let before = app.record.assignments.len();
            app.record.assignments.retain(|a| a.agent_id != agent);
            if app.record.assignments.len() != before {
                app.generation += 1;
            }
        }
        info!("event=agent_dead app={app_id} agent={agent}");
    }

    fn node_views(&self, exclude: &[String]) -> Vec<NodeView> {
        self.nodes
            .iter()
            .filter(|(id, n)| n.placeable() && !exclude.contains(id))
            .map(|(id, n)| NodeView {
                node_id: id.clone(),
                capacity: n.stats.mem_capacity,
                used: n.stats.mem_used.max(n.stats.mem_predicted.max(0.0) as u64),
                reserved: self
                    .agents
                    .values()
                    .filter(|a| a.alive && a.node == *id)
                    .map(|a| a.share)
                    .sum(),
            })
            .collect()
    }

    /// Places agents for the given shares; `None` when capacity is short.
    fn place(&self, shares: &[u64], exclude: &[String]) -> Option<Vec<(String, String)>> {
        let views = self.node_views(exclude);
        let picks = self.policy.place(&self.cfg, &views, shares)?;
        Some(
            picks
                .into_iter()
                .map(|i| {
                    let id = views[i].node_id.clone();
                    let mgr = self.nodes[&id].manager.clone().expect("placeable node has a manager");
                    (id, mgr)
                })
                .collect(),
        )
    }

    // ---- registration -----------------------------------------------------

    /// Attaches a rank. Initial ranks join the open incarnation of the named
    /// application or start a new one; a rank attaching twice means the
    /// application restarted.
    pub fn register(&mut self, name: &str, world: u32, rank: Rank, ptype: ProcessType) -> Result<Message> {
        if world == 0 || rank >= world {
            return Err(Error::invalid(format!("rank {rank} outside world of {world}")));
        }
        let id = match (self.app_by_name(name), ptype) {
            (Some(id), _) => id,
            (None, ProcessType::Joining) => {
                return Err(Error::remote(
                    ErrorCode::UnknownApp,
                    format!("joining rank for unknown app {name}"),
                ))
            }
            (None, ProcessType::Initial) => {
                let id = AppId(self.app_ids.next_id());
                self.apps
                    .insert(id, AppState::new(ApplicationRecord::new(id, name, world)));
                info!("event=app_registered app={id} name={name} world={world}");
                id
            }
        };
        let app = self.app_mut(id)?;
        if ptype == ProcessType::Initial {
            if world != app.record.world_size {
                return Err(Error::invalid(format!(
                    "app {name} has {} ranks, rank {rank} claims {world}",
                    app.record.world_size
                )));
            }
            if app.attached.contains(&rank) {
                app.attached.clear();
                app.detached = 0;
                let epoch = app.record.adapt_epoch;
                app.next_version = if version_epoch(app.max_version) == epoch && app.max_version > 0 {
                    app.max_version + 1
                } else {
                    make_version(epoch, 1)
                };
                info!(
                    "event=app_incarnation app={id} next_version={}",
                    app.next_version
                );
            }
            app.attached.insert(rank);
        }
        self.register_ack(id)
    }

    pub fn register_ack(&self, id: AppId) -> Result<Message> {
        let app = self.app(id)?;
        Ok(Message::RegisterAck {
            app_id: id,
            world_size: app.record.world_size,
            adapt_epoch: app.record.adapt_epoch,
            next_version: app.next_version,
            generation: app.generation,
            assignments: app.record.assignments.clone(),
        })
    }

    /// Adds or replaces region descriptors. Returns whether the
    /// application still needs agents for some ranks.
    pub fn declare_regions(&mut self, id: AppId, regions: Vec<RegionDescriptor>) -> Result<bool> {
        let app = self.app_mut(id)?;
        for r in &regions {
            r.validate()?;
            if r.world_size() != app.record.world_size {
                return Err(Error::invalid(format!(
                    "region {} spans {} ranks, app has {}",
                    r.region_id,
                    r.world_size(),
                    app.record.world_size
                )));
            }
        }
        for r in regions {
            match app.record.regions.iter_mut().find(|x| x.region_id == r.region_id) {
                Some(slot) => *slot = r,
                None => app.record.regions.push(r),
            }
        }
        Ok(!app.covers_all_ranks())
    }

    pub fn assignment_ack(&self, id: AppId, changed: bool) -> Result<Message> {
        let app = self.app(id)?;
        Ok(Message::ProbeAgentsAck {
            change: if changed {
                crate::protocol::ProbeChange::NewAssignments
            } else {
                crate::protocol::ProbeChange::NoChange
            },
            generation: app.generation,
            assignments: app.record.assignments.clone(),
        })
    }

    /// Counts a detaching rank; once every rank left, the application is
    /// removed and its agents retired.
    pub fn deregister(&mut self, id: AppId) -> Result<Vec<Action>> {
        let app = self.app_mut(id)?;
        app.detached += 1;
        if app.detached < app.record.world_size {
            return Ok(Vec::new());
        }
        self.apps.remove(&id);
        info!("event=app_deregistered app={id}");
        let doomed: Vec<AgentId> = self.agents.values().filter(|a| a.app == id).map(|a| a.id).collect();
        Ok(doomed.into_iter().filter_map(|a| self.retire(a)).collect())
    }

    // ---- assignment planning ------------------------------------------------

    fn allocate_agent(&self) -> AgentId {
        AgentId(self.agent_ids.next_id())
    }

    /// Plans `count` agents over `world` ranks, reusing the current agents
    /// in order and placing the rest.
    pub fn plan_assignment(&self, id: AppId, world: u32, count: u32) -> Result<AssignmentPlan> {
        let app = self.app(id)?;
        let regions = relayout(&app.record.regions, world);
        let groups = block_partition(u64::from(world), count)?;
        let reusable: Vec<&AgentAssignment> = app
            .record
            .assignments
            .iter()
            .filter(|a| {
                self.agents.get(&a.agent_id).is_some_and(|r| {
                    r.alive && self.nodes.get(&r.node).is_some_and(NodeEntry::placeable)
                })
            })
            .collect();
        let mut assignments = Vec::new();
        let mut fresh = Vec::new();
        for (i, (start, len)) in groups.into_iter().enumerate() {
            let ranks: Vec<Rank> = (start as Rank..(start + len) as Rank).collect();
            let share = ranks.iter().map(|&r| rank_bytes(&regions, r)).sum::<u64>() * RETAINED_VERSIONS as u64;
            match reusable.get(i) {
                Some(a) => assignments.push(AgentAssignment {
                    ranks,
                    ..(*a).clone()
                }),
                None => {
                    fresh.push((assignments.len(), ranks.clone(), share));
                    assignments.push(AgentAssignment {
                        agent_id: AgentId(0),
                        node_id: String::new(),
                        endpoint: String::new(),
                        ranks,
                    });
                }
            }
        }
        let launches = self.place_fresh(&mut assignments, fresh, &[])?;
        Ok(AssignmentPlan {
            app: id,
            world_size: world,
            assignments,
            launches,
        })
    }

    /// Plans one new agent for the ranks no live agent serves.
    pub fn plan_repair(&self, id: AppId) -> Result<Option<AssignmentPlan>> {
        let app = self.app(id)?;
        if app.record.regions.is_empty() {
            return Ok(None);
        }
        let missing = app.uncovered_ranks();
        if missing.is_empty() {
            return Ok(None);
        }
        let share = missing.iter().map(|&r| rank_bytes(&app.record.regions, r)).sum::<u64>()
            * RETAINED_VERSIONS as u64;
        let mut assignments = app.record.assignments.clone();
        let slot = assignments.len();
        assignments.push(AgentAssignment {
            agent_id: AgentId(0),
            node_id: String::new(),
            endpoint: String::new(),
            ranks: missing.clone(),
        });
        let launches = self.place_fresh(&mut assignments, vec![(slot, missing, share)], &[])?;
        Ok(Some(AssignmentPlan {
            app: id,
            world_size: app.record.world_size,
            assignments,
            launches,
        }))
    }

    /// First placement of an application: agent count from its declared bytes.
    pub fn plan_initial(&self, id: AppId) -> Result<Option<AssignmentPlan>> {
        let app = self.app(id)?;
        if !app.record.assignments.is_empty() {
            return self.plan_repair(id);
        }
        if app.record.regions.is_empty() {
            return Ok(None);
        }
        let world = app.record.world_size;
        let count = self
            .policy
            .agent_count(&self.cfg, app.record.checkpoint_bytes(), world);
        self.plan_assignment(id, world, count).map(Some)
    }

    fn place_fresh(
        &self,
        assignments: &mut [AgentAssignment],
        fresh: Vec<(usize, Vec<Rank>, u64)>,
        exclude: &[String],
    ) -> Result<Vec<Launch>> {
        if fresh.is_empty() {
            return Ok(Vec::new());
        }
        let shares: Vec<u64> = fresh.iter().map(|f| f.2).collect();
        let Some(nodes) = self.place(&shares, exclude) else {
            return Err(Error::remote(
                ErrorCode::InsufficientCapacity,
                format!(
                    "insufficient checkpoint capacity for {} more agent(s) needing {} bytes",
                    shares.len(),
                    shares.iter().sum::<u64>()
                ),
            ));
        };
        let mut launches = Vec::new();
        for ((slot, ranks, share), (node, manager)) in fresh.into_iter().zip(nodes) {
            let agent_id = self.allocate_agent();
            assignments[slot].agent_id = agent_id;
            assignments[slot].node_id = node.clone();
            launches.push(Launch {
                agent_id,
                node,
                manager,
                ranks,
                share,
            });
        }
        Ok(launches)
    }

    /// Records launched agents and fills their endpoints into the plan.
    pub fn install_launched(&mut self, plan: &mut AssignmentPlan, ready: &HashMap<AgentId, String>) -> Result<()> {
        for l in &plan.launches {
            let Some(ep) = ready.get(&l.agent_id) else {
                return Err(Error::remote(
                    ErrorCode::Internal,
                    format!("agent {} did not start on {}", l.agent_id, l.node),
                ));
            };
            self.agents.insert(
                l.agent_id,
                AgentRec {
                    id: l.agent_id,
                    app: plan.app,
                    node: l.node.clone(),
                    endpoint: ep.clone(),
                    share: l.share,
                    alive: true,
                },
            );
            if let Some(a) = plan.assignments.iter_mut().find(|a| a.agent_id == l.agent_id) {
                a.endpoint = ep.clone();
            }
        }
        Ok(())
    }

    /// Makes `plan` the current assignment of its application.
    pub fn apply_assignment(&mut self, plan: AssignmentPlan) -> Result<Vec<Action>> {
        self.refresh_shares(&plan);
        let app = self.app_mut(plan.app)?;
        app.record.assignments = plan.assignments;
        app.generation += 1;
        info!(
            "event=assignment_changed app={} agents={} generation={}",
            plan.app,
            app.record.assignments.len(),
            app.generation
        );
        Ok(self.retire_unreferenced(plan.app))
    }

    fn refresh_shares(&mut self, plan: &AssignmentPlan) {
        let Ok(app) = self.app(plan.app) else {
            return;
        };
        let regions = relayout(&app.record.regions, plan.world_size);
        for a in &plan.assignments {
            let share = a.ranks.iter().map(|&r| rank_bytes(&regions, r)).sum::<u64>()
                * RETAINED_VERSIONS as u64;
            if let Some(rec) = self.agents.get_mut(&a.agent_id) {
                rec.share = rec.share.max(share);
            }
        }
    }

    // ---- adaptation ---------------------------------------------------------

    pub fn adapt_agent_count(&self, id: AppId, new_world: u32) -> Result<u32> {
        let app = self.app(id)?;
        let need = self
            .policy
            .agent_count(&self.cfg, app.record.checkpoint_bytes(), new_world);
        let current = app.record.assignments.len() as u32;
        let cap = self.cfg.max_agents_per_app.min(new_world).max(1);
        Ok(need.max(current).clamp(1, cap))
    }

    pub fn set_pending_adapt(&mut self, plan: AssignmentPlan, epoch: u32) -> Result<()> {
        self.refresh_shares(&plan);
        let app = self.app_mut(plan.app)?;
        app.pending_adapt = Some(PendingAdapt {
            epoch,
            world_size: plan.world_size,
            assignments: plan.assignments,
        });
        Ok(())
    }

    /// Is the application already at (`epoch`, `world`)? Errors when the
    /// requested epoch is neither current nor the next one.
    pub fn adapt_done(&self, id: AppId, epoch: u32, world: u32) -> Result<bool> {
        let app = self.app(id)?;
        let cur = app.record.adapt_epoch;
        if epoch == cur && world == app.record.world_size && cur > 0 {
            return Ok(true);
        }
        if epoch != cur + 1 {
            return Err(Error::invalid(format!(
                "adapt to epoch {epoch} requested while app {id} is at epoch {cur}"
            )));
        }
        Ok(false)
    }

    /// Prestaged assignment for (`epoch`, `world`), if a notice prepared one.
    pub fn take_pending(&mut self, id: AppId, epoch: u32, world: u32) -> Result<Option<Vec<AgentAssignment>>> {
        let app = self.app_mut(id)?;
        match app.pending_adapt.take() {
            Some(p) if p.epoch == epoch && p.world_size == world => Ok(Some(p.assignments)),
            other => {
                app.pending_adapt = other;
                Ok(None)
            }
        }
    }

    /// Moves the application to a new epoch and world size.
    pub fn promote(&mut self, id: AppId, epoch: u32, world: u32, assignments: Vec<AgentAssignment>) -> Result<Vec<Action>> {
        let app = self.app_mut(id)?;
        let old = std::mem::replace(&mut app.record.assignments, assignments);
        app.source_maps.insert(epoch, old);
        app.record.set_adapt_epoch(epoch)?;
        app.record.world_size = world;
        app.record.regions = relayout(&app.record.regions, world);
        app.attached = (0..world).collect();
        app.detached = 0;
        app.next_version = make_version(epoch, 1);
        app.max_version = app.next_version - 1;
        app.generation += 1;
        app.pending_adapt = None;
        info!(
            "event=adapt_promoted app={id} epoch={epoch} world={world} agents={}",
            app.record.assignments.len()
        );
        Ok(self.retire_unreferenced(id))
    }

    pub fn adapt_ack(&self, id: AppId) -> Result<Message> {
        let app = self.app(id)?;
        Ok(Message::AdaptAck {
            epoch: app.record.adapt_epoch,
            world_size: app.record.world_size,
            generation: app.generation,
            assignments: app.record.assignments.clone(),
        })
    }

    pub fn source_map(&self, id: AppId, epoch: u32) -> Result<Vec<AgentAssignment>> {
        let app = self.app(id)?;
        app.source_maps.get(&epoch).cloned().ok_or_else(|| {
            Error::remote(
                ErrorCode::NoSource,
                format!("app {id} has no sources for epoch {epoch}"),
            )
        })
    }

    // ---- commits --------------------------------------------------------------

    #[allow(clippy::too_many_arguments)]
    pub fn record_commit(
        &mut self,
        id: AppId,
        epoch: u32,
        version: u64,
        rank: Rank,
        agent: AgentId,
        bytes: u64,
        transfer_us: u64,
        regions: &[RegionChecksum],
        now: Instant,
    ) -> Result<Vec<Action>> {
        let app = self.app_mut(id)?;
        if epoch != app.record.adapt_epoch || version_epoch(version) != epoch {
            return Err(Error::remote(
                ErrorCode::Rejected,
                format!(
                    "commit of v{version} at epoch {epoch}, app {id} is at epoch {}",
                    app.record.adapt_epoch
                ),
            ));
        }
        let world = app.record.world_size;
        if rank >= world {
            return Err(Error::invalid(format!("rank {rank} outside world of {world}")));
        }
        let agent = app.resolve(agent);
        let generation = app.generation;
        if app.record.version(version).is_none() {
            let collected = app
                .record
                .versions
                .iter()
                .filter(|v| v.adapt_epoch == epoch && v.is_complete())
                .map(|v| v.version)
                .min()
                .is_some_and(|oldest| version < oldest);
            if collected {
                return Err(Error::remote(
                    ErrorCode::Rejected,
                    format!("v{version} is older than every retained version"),
                ));
            }
            app.record
                .versions
                .push(CheckpointVersion::new(version, epoch, world, now));
            app.record.versions.sort_by_key(|v| v.version);
        }
        app.max_version = app.max_version.max(version);
        let v = app.record.version_mut(version).expect("version just ensured");
        let was_complete = v.is_complete();
        let r = rank as usize;
        if v.rank_status[r] == CommitStatus::Committed && v.placement[r] == Some(agent) {
            return Ok(Vec::new());
        }
        v.rank_status[r] = CommitStatus::Committed;
        v.placement[r] = Some(agent);
        v.storage_level[r] = StorageLevel::Memory;
        for c in regions {
            v.checksums.insert(
                (rank, c.region_id.clone()),
                EntrySum {
                    len: c.len,
                    crc: c.crc,
                },
            );
        }
        let complete = !was_complete && v.is_complete();
        if complete {
            v.completed_at = Some(now);
        }
        app.reports.entry(version).or_default().push(Report {
            rank,
            bytes,
            transfer_us,
            arrived: now,
            generation,
        });
        if !complete {
            return Ok(Vec::new());
        }
        info!("event=version_complete app={id} version={version} epoch={epoch}");
        Ok(self.on_complete(id, version))
    }

    fn on_complete(&mut self, id: AppId, version: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        let Some(app) = self.apps.get_mut(&id) else {
            return actions;
        };
        let epoch = version_epoch(version);
        let mut doomed = versions_to_collect(&app.record.versions, epoch, RETAINED_VERSIONS);
        doomed.extend(
            app.record
                .versions
                .iter()
                .filter(|v| v.adapt_epoch < epoch)
                .map(|v| v.version),
        );
        let snapshot_holders: Vec<AgentId> = app
            .source_maps
            .range(..=epoch)
            .flat_map(|(_, m)| m.iter().map(|a| a.agent_id))
            .collect();
        let through = if app.source_maps.range(..=epoch).next().is_some() {
            epoch - 1
        } else {
            u32::MAX
        };
        app.source_maps.retain(|e, _| *e > epoch);
        let mut per_agent: BTreeMap<AgentId, Vec<VersionKey>> = BTreeMap::new();
        for &d in &doomed {
            let Some(v) = app.record.version(d) else { continue };
            for a in v.placement.iter().flatten() {
                per_agent.entry(*a).or_default().push(VersionKey {
                    epoch: v.adapt_epoch,
                    version: d,
                });
            }
            actions.push(Action::RemovePfs {
                app: id,
                epoch: v.adapt_epoch,
                version: d,
            });
            info!("event=version_collected app={id} version={d}");
        }
        for a in snapshot_holders {
            per_agent.entry(a).or_default();
        }
        app.record.versions.retain(|v| !doomed.contains(&v.version));
        app.reports.retain(|v, _| *v >= version);
        app.flush_retry_at.retain(|v, _| !doomed.contains(v));
        app.forced_flush.retain(|v, _| !doomed.contains(v));
        for (agent, versions) in per_agent {
            if versions.is_empty() && through == u32::MAX {
                continue;
            }
            if let Some(rec) = self.agents.get(&agent).filter(|r| r.alive) {
                actions.push(Action::ToAgent {
                    endpoint: rec.endpoint.clone(),
                    msg: Message::DropVersions {
                        app_id: id,
                        versions,
                        snapshots_through_epoch: through,
                    },
                });
            }
        }
        actions.extend(self.retire_unreferenced(id));
        actions
    }

    fn referenced(&self, app: &AppState, agent: AgentId) -> bool {
        app.record.assignments.iter().any(|a| a.agent_id == agent)
            || app
                .pending_adapt
                .as_ref()
                .is_some_and(|p| p.assignments.iter().any(|a| a.agent_id == agent))
            || app.record.versions.iter().any(|v| v.references(agent))
            || app
                .source_maps
                .values()
                .any(|m| m.iter().any(|a| a.agent_id == agent))
    }

    fn retire(&mut self, agent: AgentId) -> Option<Action> {
        let rec = self.agents.remove(&agent)?;
        info!("event=agent_retired app={} agent={agent} node={}", rec.app, rec.node);
        Some(Action::Retire {
            agent,
            node: rec.node,
        })
    }

    /// Retires agents of `id` that nothing refers to any more.
    pub fn retire_unreferenced(&mut self, id: AppId) -> Vec<Action> {
        let Some(app) = self.apps.get(&id) else {
            return Vec::new();
        };
        let doomed: Vec<AgentId> = self
            .agents
            .values()
            .filter(|a| a.app == id && !self.referenced(app, a.id))
            .map(|a| a.id)
            .collect();
        doomed.into_iter().filter_map(|a| self.retire(a)).collect()
    }

    /// Observed commit throughput of the latest COMPLETE version whose
    /// commits all arrived under the current assignment.
    pub fn observed_rate(&self, id: AppId) -> Result<Option<f64>> {
        let app = self.app(id)?;
        let world = app.record.world_size as usize;
        for v in app.record.versions.iter().rev().filter(|v| v.is_complete()) {
            let Some(reports) = app.reports.get(&v.version) else {
                continue;
            };
            if reports.len() < world || reports.iter().any(|r| r.generation != app.generation) {
                continue;
            }
            let bytes: u64 = reports.iter().map(|r| r.bytes).sum();
            let start = reports
                .iter()
                .map(|r| r.arrived.checked_sub(Duration::from_micros(r.transfer_us)).unwrap_or(r.arrived))
                .min()
                .expect("nonempty");
            let end = reports.iter().map(|r| r.arrived).max().expect("nonempty");
            let secs = end.duration_since(start).as_secs_f64().max(1e-6);
            return Ok(Some(bytes as f64 / secs));
        }
        Ok(None)
    }

    // ---- restart --------------------------------------------------------------

    fn retrievable(&self, v: &CheckpointVersion) -> bool {
        v.is_complete()
            && (0..v.world_size() as usize).all(|r| {
                v.storage_level[r].on_pfs()
                    || v.placement[r].is_some_and(|a| self.agents.get(&a).is_some_and(|x| x.alive))
            })
    }

    pub fn restart_point(&self, id: AppId, pfs_root: &str) -> Result<Option<RestartPoint>> {
        let app = self.app(id)?;
        let Some(v) = app
            .record
            .versions
            .iter()
            .rev()
            .find(|v| self.retrievable(v))
        else {
            return Ok(None);
        };
        let mut holders: BTreeMap<AgentId, Vec<Rank>> = BTreeMap::new();
        for (r, p) in v.placement.iter().enumerate() {
            if let Some(a) = p {
                if self.agents.get(a).is_some_and(|x| x.alive) {
                    holders.entry(*a).or_default().push(r as Rank);
                }
            }
        }
        let placement = holders
            .into_iter()
            .map(|(a, ranks)| {
                let rec = &self.agents[&a];
                AgentAssignment {
                    agent_id: a,
                    node_id: rec.node.clone(),
                    endpoint: rec.endpoint.clone(),
                    ranks,
                }
            })
            .collect();
        let regions = if v.adapt_epoch == app.record.adapt_epoch {
            app.record.regions.clone()
        } else {
            relayout(&app.record.regions, v.world_size())
        };
        Ok(Some(RestartPoint {
            app_id: id,
            version: v.version,
            adapt_epoch: v.adapt_epoch,
            world_size: v.world_size(),
            regions,
            placement,
            assignments: app.record.assignments.clone(),
            levels: v.storage_level.clone(),
            checksums: v
                .checksums
                .iter()
                .map(|((rank, region), s)| EntryChecksum {
                    rank: *rank,
                    region_id: region.clone(),
                    len: s.len,
                    crc: s.crc,
                })
                .collect(),
            pfs_root: pfs_root.to_string(),
        }))
    }

    // ---- flushing -------------------------------------------------------------

    /// Asks for every retained version held by `agent` to be flushed.
    pub fn force_flush_agent(&mut self, agent: AgentId, purge: bool) {
        let Some(rec) = self.agents.get(&agent) else {
            return;
        };
        let Some(app) = self.apps.get_mut(&rec.app) else {
            return;
        };
        for v in &app.record.versions {
            if v.is_complete() && v.references(agent) && !v.fully_on_pfs() {
                let e = app.forced_flush.entry(v.version).or_insert(false);
                *e |= purge;
            }
        }
    }

    /// Versions of an agent's node to flush early after a capacity refusal.
    pub fn capacity_pressure(&mut self, agent: AgentId) {
        let Some(node) = self.agents.get(&agent).map(|a| a.node.clone()) else {
            return;
        };
        let on_node: Vec<AgentId> = self
            .agents
            .values()
            .filter(|a| a.node == node)
            .map(|a| a.id)
            .collect();
        for a in on_node {
            self.force_flush_agent(a, true);
        }
    }

    pub fn force_flush_version(&mut self, id: AppId, version: u64, purge: bool) -> Result<()> {
        let app = self.app_mut(id)?;
        if app.record.version(version).is_none_or(|v| !v.is_complete()) {
            return Err(Error::remote(
                ErrorCode::Missing,
                format!("v{version} of app {id} is not a retained COMPLETE version"),
            ));
        }
        let e = app.forced_flush.entry(version).or_insert(false);
        *e |= purge;
        Ok(())
    }

    pub fn flush_pending(&self, id: AppId, version: u64) -> bool {
        self.apps.get(&id).is_some_and(|a| {
            a.flushing.contains(&version)
                || a.forced_flush.contains_key(&version)
        })
    }

    fn busy_nodes(&self) -> BTreeSet<String> {
        let mut busy = BTreeSet::new();
        for app in self.apps.values() {
            for &v in &app.flushing {
                if let Some(ver) = app.record.version(v) {
                    for a in ver.placement.iter().flatten() {
                        if let Some(rec) = self.agents.get(a) {
                            busy.insert(rec.node.clone());
                        }
                    }
                }
            }
        }
        busy
    }

    fn under_pressure(&self, node: &str) -> bool {
        self.nodes.get(node).is_some_and(|n| {
            n.stats.mem_used as f64 > self.cfg.flush_pressure * n.stats.mem_capacity as f64
        })
    }

    /// Orders for flushing `v`, or `None` while some rank's only copy is
    /// unreachable.
    fn build_job(&self, id: AppId, v: &CheckpointVersion) -> Option<FlushJob> {
        let mut holders: BTreeMap<AgentId, Vec<Rank>> = BTreeMap::new();
        for (r, p) in v.placement.iter().enumerate() {
            match p {
                Some(a) if self.agents.get(a).is_some_and(|x| x.alive) => {
                    holders.entry(*a).or_default().push(r as Rank)
                }
                _ if v.storage_level[r].on_pfs() => {}
                _ => return None,
            }
        }
        if holders.is_empty() {
            return None;
        }
        let mut orders = Vec::new();
        for (a, ranks) in holders {
            let rec = &self.agents[&a];
            let manager = self.nodes.get(&rec.node).and_then(|n| n.manager.clone())?;
            orders.push(FlushOrder {
                node: rec.node.clone(),
                manager,
                agent: a,
                endpoint: rec.endpoint.clone(),
                ranks,
            });
        }
        let nodes: Vec<String> = orders
            .iter()
            .map(|o| o.node.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Some(FlushJob {
            app: id,
            epoch: v.adapt_epoch,
            version: v.version,
            orders,
            purge: false,
            nodes,
        })
    }

    /// Flush jobs to start now, at most one per node. Started jobs are
    /// marked in flight until [`ClusterState::finish_flush`].
    pub fn schedule_flush(&mut self, now: Instant) -> Vec<FlushJob> {
        let mut busy = self.busy_nodes();
        let mut jobs = Vec::new();
        let age = Duration::from_secs_f64(self.cfg.flush_age);
        let app_ids: Vec<AppId> = self.apps.keys().copied().collect();
        for id in app_ids {
            let app = &self.apps[&id];
            let mut started = Vec::new();
            for v in app.record.versions.iter().filter(|v| v.is_complete()) {
                if app.flushing.contains(&v.version)
                    || v.fully_on_pfs()
                    || app.flush_retry_at.get(&v.version).is_some_and(|t| *t > now)
                {
                    continue;
                }
                let Some(mut job) = self.build_job(id, v) else {
                    continue;
                };
                let forced = app.forced_flush.get(&v.version).copied();
                let old = v.completed_at.is_some_and(|t| now.duration_since(t) > age);
                let pressure = job.nodes.iter().any(|n| self.under_pressure(n));
                if forced.is_none() && !old && !pressure {
                    continue;
                }
                if job.nodes.iter().any(|n| busy.contains(n)) {
                    continue;
                }
                busy.extend(job.nodes.iter().cloned());
                job.purge = forced.unwrap_or(false) || pressure;
                started.push(job);
            }
            let app = self.apps.get_mut(&id).expect("app listed above");
            for j in &started {
                app.flushing.insert(j.version);
                info!("event=flush_started app={id} version={} nodes={}", j.version, j.nodes.join(","));
            }
            jobs.extend(started);
        }
        jobs
    }

    /// Claims a flush of one version now. `Ok(None)` while one of its nodes
    /// is busy with another flush.
    pub fn claim_flush(&mut self, id: AppId, version: u64, purge: bool) -> Result<Option<FlushJob>> {
        let app = self.app(id)?;
        let v = app
            .record
            .version(version)
            .filter(|v| v.is_complete())
            .ok_or_else(|| {
                Error::remote(
                    ErrorCode::Missing,
                    format!("v{version} of app {id} is not a retained COMPLETE version"),
                )
            })?;
        if app.flushing.contains(&version) {
            return Ok(None);
        }
        let Some(mut job) = self.build_job(id, v) else {
            return Err(Error::remote(
                ErrorCode::Missing,
                format!("v{version} of app {id} has ranks with no reachable copy"),
            ));
        };
        let busy = self.busy_nodes();
        if job.nodes.iter().any(|n| busy.contains(n)) {
            return Ok(None);
        }
        job.purge = purge;
        self.app_mut(id)?.flushing.insert(version);
        info!("event=flush_started app={id} version={version} nodes={}", job.nodes.join(","));
        Ok(Some(job))
    }

    /// Retained COMPLETE versions holding memory copies on `agent`.
    pub fn versions_on(&self, agent: AgentId) -> Vec<(AppId, u64)> {
        let Some(rec) = self.agents.get(&agent) else {
            return Vec::new();
        };
        self.apps.get(&rec.app).map_or_else(Vec::new, |app| {
            app.record
                .versions
                .iter()
                .filter(|v| v.is_complete() && v.references(agent) && !v.fully_on_pfs())
                .map(|v| (rec.app, v.version))
                .collect()
        })
    }

    pub fn manifest_for(&self, job: &FlushJob) -> Result<Manifest> {
        let app = self.app(job.app)?;
        let v = app.record.version(job.version).ok_or_else(|| {
            Error::remote(ErrorCode::Missing, format!("v{} was collected", job.version))
        })?;
        let regions = if v.adapt_epoch == app.record.adapt_epoch {
            app.record.regions.clone()
        } else {
            relayout(&app.record.regions, v.world_size())
        };
        Ok(Manifest {
            app_id: job.app.0,
            app_name: app.record.name.clone(),
            world_size: v.world_size(),
            epoch: v.adapt_epoch,
            version: v.version,
            regions,
            entries: v
                .checksums
                .iter()
                .map(|((rank, region), s)| ManifestEntry {
                    rank: *rank,
                    region_id: region.clone(),
                    len: s.len,
                    crc32: crc_hex(s.crc),
                })
                .collect(),
        })
    }

    /// Concludes a flush job. On success the version is on both tiers,
    /// or only on the PFS tier once `purged`.
    pub fn finish_flush(&mut self, job: &FlushJob, ok: bool, purged: bool, now: Instant) {
        let Some(app) = self.apps.get_mut(&job.app) else {
            return;
        };
        app.flushing.remove(&job.version);
        if !ok {
            app.flush_retry_at.insert(job.version, now + Duration::from_millis(500));
            info!("event=flush_failed app={} version={}", job.app, job.version);
            return;
        }
        app.forced_flush.remove(&job.version);
        app.flush_retry_at.remove(&job.version);
        if let Some(v) = app.record.version_mut(job.version) {
            let level = if purged {
                StorageLevel::Pfs
            } else {
                StorageLevel::Both
            };
            for l in &mut v.storage_level {
                *l = level;
            }
        }
        info!(
            "event=flush_done app={} version={} purged={purged}",
            job.app, job.version
        );
    }

    // ---- migration ------------------------------------------------------------

    /// Node to move `agent` to: `target` if given and it has room, else the
    /// policy's choice among placeable nodes other than the agent's own.
    pub fn migration_target(&self, agent: AgentId, target: Option<&str>) -> Result<Option<(String, String)>> {
        let rec = self
            .agents
            .get(&agent)
            .ok_or_else(|| Error::invalid(format!("unknown agent {agent}")))?;
        let exclude = vec![rec.node.clone()];
        let picked = match target {
            Some(t) => {
                let views: Vec<NodeView> = self
                    .node_views(&exclude)
                    .into_iter()
                    .filter(|v| v.node_id == t)
                    .collect();
                self.policy
                    .place(&self.cfg, &views, &[rec.share])
                    .map(|_| vec![(t.to_string(), self.nodes[t].manager.clone().unwrap_or_default())])
            }
            None => self.place(&[rec.share], &exclude),
        };
        Ok(picked.and_then(|mut v| v.pop()))
    }

    pub fn new_agent_id(&self) -> AgentId {
        self.allocate_agent()
    }

    pub fn agents_on(&self, node: &str) -> Vec<AgentId> {
        self.agents
            .values()
            .filter(|a| a.node == node && a.alive)
            .map(|a| a.id)
            .collect()
    }

    pub fn add_agent(&mut self, rec: AgentRec) {
        self.agents.insert(rec.id, rec);
    }

    /// Switches every reference from `old` to its successor `new`.
    pub fn complete_migration(&mut self, old: AgentId, new: AgentId) -> Vec<Action> {
        let Some(rec) = self.agents.get(&old).cloned() else {
            return Vec::new();
        };
        let Some(succ) = self.agents.get(&new).cloned() else {
            return Vec::new();
        };
        let Some(app) = self.apps.get_mut(&rec.app) else {
            return Vec::new();
        };
        for v in &mut app.record.versions {
            for p in &mut v.placement {
                if *p == Some(old) {
                    *p = Some(new);
                }
            }
        }
        let swap = |list: &mut Vec<AgentAssignment>| {
            for a in list.iter_mut().filter(|a| a.agent_id == old) {
                a.agent_id = new;
                a.node_id = succ.node.clone();
                a.endpoint = succ.endpoint.clone();
            }
        };
        swap(&mut app.record.assignments);
        if let Some(p) = app.pending_adapt.as_mut() {
            swap(&mut p.assignments);
        }
        app.moved.insert(old, new);
        app.generation += 1;
        info!(
            "event=agent_migrated app={} from={old} to={new} node={}",
            rec.app, succ.node
        );
        self.retire(old).into_iter().collect()
    }

    /// After an agent's data went to the PFS tier with nowhere to migrate:
    /// drop its memory copies and its assignment.
    pub fn evacuate_to_pfs(&mut self, agent: AgentId) -> Vec<Action> {
        let Some(rec) = self.agents.get(&agent).cloned() else {
            return Vec::new();
        };
        if let Some(app) = self.apps.get_mut(&rec.app) {
            for v in &mut app.record.versions {
                for (r, p) in v.placement.iter_mut().enumerate() {
                    if *p == Some(agent) {
                        *p = None;
                        if v.storage_level[r].on_pfs() {
                            v.storage_level[r] = StorageLevel::Pfs;
                        }
                    }
                }
            }
            let before = app.record.assignments.len();
            app.record.assignments.retain(|a| a.agent_id != agent);
            if before != app.record.assignments.len() {
                app.generation += 1;
            }
        }
        info!("event=agent_evacuated app={} agent={agent} node={}", rec.app, rec.node);
        self.retire(agent).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::policy::DefaultPolicy;
    use crate::model::DistributionScheme;

    const MIB: u64 = 1 << 20;

    fn state() -> ClusterState {
        let mut s = ClusterState::new(PolicyConfig::default(), Box::new(DefaultPolicy));
        for n in ["n0", "n1"] {
            s.own_node(n, 4096 * MIB);
            s.manager_hello(n, &format!("mgr-{n}"), 4096 * MIB);
        }
        s
    }

    fn region(world: u32, per_rank_elems: u64) -> RegionDescriptor {
        RegionDescriptor::from_layout("data", 1, &Layout::block(per_rank_elems * u64::from(world), world))
    }

    fn app(s: &mut ClusterState, world: u32) -> AppId {
        let mut id = AppId(0);
        for r in 0..world {
            match s.register("app", world, r, ProcessType::Initial).unwrap() {
                Message::RegisterAck { app_id, .. } => id = app_id,
                other => panic!("{other:?}"),
            }
        }
        s.declare_regions(id, vec![region(world, 1024)]).unwrap();
        let mut plan = s.plan_initial(id).unwrap().unwrap();
        let ready: HashMap<AgentId, String> = plan
            .launches
            .iter()
            .map(|l| (l.agent_id, format!("ep{}", l.agent_id)))
            .collect();
        s.install_launched(&mut plan, &ready).unwrap();
        s.apply_assignment(plan).unwrap();
        id
    }

    fn commit(s: &mut ClusterState, id: AppId, version: u64, rank: Rank) -> Vec<Action> {
        let agent = crate::model::assignment_for(&s.apps[&id].record.assignments, rank)
            .unwrap()
            .agent_id;
        let sums = [RegionChecksum {
            region_id: "data".into(),
            len: 1024,
            crc: 7,
        }];
        s.record_commit(id, 0, version, rank, agent, 1024, 100, &sums, Instant::now())
            .unwrap()
    }

    #[test]
    fn version_completes_after_last_rank() {
        let mut s = state();
        let id = app(&mut s, 4);
        for r in 0..3 {
            commit(&mut s, id, 1, r);
            assert!(!s.apps[&id].record.version(1).unwrap().is_complete());
        }
        commit(&mut s, id, 1, 3);
        assert!(s.apps[&id].record.version(1).unwrap().is_complete());
    }

    #[test]
    fn duplicate_commit_is_noop() {
        let mut s = state();
        let id = app(&mut s, 2);
        commit(&mut s, id, 1, 0);
        let before = s.apps[&id].record.version(1).unwrap().rank_status.clone();
        assert!(commit(&mut s, id, 1, 0).is_empty());
        assert_eq!(s.apps[&id].record.version(1).unwrap().rank_status, before);
    }

    #[test]
    fn restart_point_skips_partial_versions() {
        let mut s = state();
        let id = app(&mut s, 4);
        assert!(s.restart_point(id, "/pfs").unwrap().is_none());
        for r in 0..4 {
            commit(&mut s, id, 1, r);
        }
        for r in 0..3 {
            commit(&mut s, id, 2, r);
        }
        let rp = s.restart_point(id, "/pfs").unwrap().unwrap();
        assert_eq!(rp.version, 1);
        assert_eq!(rp.placement.iter().map(|p| p.ranks.len()).sum::<usize>(), 4);
    }

    #[test]
    fn keeps_two_complete_versions() {
        let mut s = state();
        let id = app(&mut s, 2);
        for v in 1..=4 {
            for r in 0..2 {
                commit(&mut s, id, v, r);
            }
        }
        let kept: Vec<u64> = s.apps[&id].record.versions.iter().map(|v| v.version).collect();
        assert_eq!(kept, vec![3, 4]);
    }

    #[test]
    fn restart_skips_version_on_dead_agent() {
        let mut s = state();
        let id = app(&mut s, 2);
        for r in 0..2 {
            commit(&mut s, id, 1, r);
        }
        let a = s.apps[&id].record.assignments[0].agent_id;
        s.mark_dead(a);
        assert!(s.restart_point(id, "/pfs").unwrap().is_none());
        assert!(!s.apps[&id].covers_all_ranks());
    }

    #[test]
    fn restart_reincarnation_continues_versions() {
        let mut s = state();
        let id = app(&mut s, 2);
        commit(&mut s, id, 5, 0);
        match s.register("app", 2, 0, ProcessType::Initial).unwrap() {
            Message::RegisterAck { next_version, .. } => assert_eq!(next_version, 6),
            other => panic!("{other:?}"),
        }
        match s.register("app", 2, 1, ProcessType::Initial).unwrap() {
            Message::RegisterAck { next_version, .. } => assert_eq!(next_version, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flush_age_and_one_job_per_node() {
        let mut s = state();
        s.cfg.flush_age = 30.0;
        let id = app(&mut s, 1);
        let t0 = Instant::now();
        for v in 1..=2 {
            let sums = [RegionChecksum {
                region_id: "data".into(),
                len: 1024,
                crc: 1,
            }];
            let agent = s.apps[&id].record.assignments[0].agent_id;
            s.record_commit(id, 0, v, 0, agent, 1024, 10, &sums, t0).unwrap();
        }
        assert!(s.schedule_flush(t0 + Duration::from_secs(29)).is_empty());
        let later = t0 + Duration::from_secs(31);
        let jobs = s.schedule_flush(later);
        assert_eq!(jobs.len(), 1, "second version waits for the node");
        assert!(!jobs[0].purge);
        assert!(s.schedule_flush(later).is_empty());
        s.finish_flush(&jobs[0], true, false, later);
        let next = s.schedule_flush(later);
        assert_eq!(next.len(), 1);
        assert_ne!(next[0].version, jobs[0].version);
        let v = s.apps[&id].record.version(jobs[0].version).unwrap();
        assert_eq!(v.storage_level, vec![StorageLevel::Both]);
    }

    #[test]
    fn pressure_flushes_young_versions() {
        let mut s = state();
        let id = app(&mut s, 1);
        commit(&mut s, id, 1, 0);
        let node = s.apps[&id].record.assignments[0].node_id.clone();
        let mut st = s.nodes[&node].stats.clone();
        st.mem_used = st.mem_capacity * 8 / 10;
        s.stats_report(st, &[]).unwrap();
        let jobs = s.schedule_flush(Instant::now());
        assert_eq!(jobs.len(), 1);
        assert!(jobs[0].purge);
    }

    #[test]
    fn probe_rate_uses_current_generation() {
        let mut s = state();
        let id = app(&mut s, 2);
        assert_eq!(s.observed_rate(id).unwrap(), None);
        let t = Instant::now();
        let agent = s.apps[&id].record.assignments[0].agent_id;
        let sums = [RegionChecksum {
            region_id: "data".into(),
            len: 1024,
            crc: 1,
        }];
        s.record_commit(id, 0, 1, 0, agent, 1_000_000, 500_000, &sums, t).unwrap();
        s.record_commit(id, 0, 1, 1, agent, 1_000_000, 500_000, &sums, t + Duration::from_millis(500))
            .unwrap();
        let rate = s.observed_rate(id).unwrap().unwrap();
        assert!((rate - 2_000_000.0).abs() < 1.0, "{rate}");
        s.apps.get_mut(&id).unwrap().generation += 1;
        assert_eq!(s.observed_rate(id).unwrap(), None);
    }

    #[test]
    fn reassignment_reuses_agents_in_order() {
        let mut s = state();
        s.cfg.per_agent_capacity = 1024;
        let id = app(&mut s, 4);
        assert_eq!(s.apps[&id].record.assignments.len(), 4);
        for r in 0..4 {
            commit(&mut s, id, 1, r);
        }
        let before: Vec<AgentId> = s.apps[&id].record.assignments.iter().map(|a| a.agent_id).collect();
        let plan = s.plan_assignment(id, 4, 2).unwrap();
        assert!(plan.launches.is_empty());
        let ids: Vec<AgentId> = plan.assignments.iter().map(|a| a.agent_id).collect();
        assert_eq!(ids, before[..2]);
        let actions = s.apply_assignment(plan).unwrap();
        assert!(actions.is_empty(), "old agents keep their versions alive: {actions:?}");
    }

    #[test]
    fn promotion_and_first_complete_drop_old_epoch() {
        let mut s = state();
        let id = app(&mut s, 2);
        for r in 0..2 {
            commit(&mut s, id, 1, r);
        }
        let plan = s.plan_assignment(id, 4, 1).unwrap();
        s.promote(id, 1, 4, plan.assignments).unwrap();
        assert_eq!(s.apps[&id].record.regions[0].world_size(), 4);
        assert!(s.source_map(id, 1).is_ok());
        let agent = s.apps[&id].record.assignments[0].agent_id;
        let sums = [RegionChecksum {
            region_id: "data".into(),
            len: 512,
            crc: 1,
        }];
        let mut actions = Vec::new();
        for r in 0..4 {
            actions = s
                .record_commit(id, 1, make_version(1, 1), r, agent, 512, 1, &sums, Instant::now())
                .unwrap();
        }
        assert!(actions.iter().any(|a| matches!(
            a,
            Action::ToAgent { msg: Message::DropVersions { snapshots_through_epoch: 0, .. }, .. }
        )));
        assert!(s.source_map(id, 1).is_err());
        assert_eq!(s.apps[&id].record.versions.len(), 1);
    }

    #[test]
    fn stale_epoch_commit_rejected() {
        let mut s = state();
        let id = app(&mut s, 1);
        let plan = s.plan_assignment(id, 2, 1).unwrap();
        s.promote(id, 1, 2, plan.assignments).unwrap();
        let agent = s.apps[&id].record.assignments[0].agent_id;
        let err = s
            .record_commit(id, 0, 3, 0, agent, 1, 1, &[], Instant::now())
            .unwrap_err();
        assert_eq!(err.code(), Some(ErrorCode::Rejected));
    }

    #[test]
    fn relayout_keeps_totals() {
        let r = RegionDescriptor::from_layout("x", 8, &Layout::new(10, 4, DistributionScheme::Cyclic));
        let n = relayout(&[r], 3);
        assert_eq!(n[0].count_per_rank, vec![4, 3, 3]);
        assert_eq!(n[0].scheme, DistributionScheme::Cyclic);
    }

    #[test]
    fn insufficient_capacity_is_reported() {
        let mut s = ClusterState::new(PolicyConfig::default(), Box::new(DefaultPolicy));
        s.own_node("n0", MIB);
        s.manager_hello("n0", "m", MIB);
        let id = match s.register("big", 1, 0, ProcessType::Initial).unwrap() {
            Message::RegisterAck { app_id, .. } => app_id,
            other => panic!("{other:?}"),
        };
        s.declare_regions(id, vec![region(1, 4 * MIB)]).unwrap();
        let err = s.plan_initial(id).unwrap_err();
        assert_eq!(err.code(), Some(ErrorCode::InsufficientCapacity));
    }
}
