//! Checkpoint data plane. An agent stages commits from the ranks it serves,
//! answers restores, executes redistribution plans by pulling runs from
//! peer agents, flushes entries to the PFS tier and migrates its entries to
//! another agent on request.

pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

pub use store::{Entry, EntryKey, NodeBudget, SnapshotKey, SnapshotStore, StagingStore};

use crate::error::{Error, Result};
use crate::layout::{destination_runs, Layout, Transfer};
use crate::model::{
    assignment_for, crc32, AgentAssignment, AgentId, AppId, Rank, RegionDescriptor,
};
use crate::net::{send_chunks, Connection, Server, Throttle};
use crate::pfs::PfsTier;
use crate::protocol::{Blob, ByteRange, ErrorCode, Message, RegionChecksum, VersionKey};

pub const DEFAULT_CHUNK: usize = 4 << 20;

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub agent_id: AgentId,
    pub app_id: AppId,
    pub node_id: String,
    pub ranks: Vec<Rank>,
    pub controller: String,
    pub pfs_root: PathBuf,
    pub bind: String,
    pub chunk_size: usize,
    /// How long a redistribution waits for a source snapshot to arrive.
    pub snapshot_wait: Duration,
    /// Limit on commit ingest, shared by every connection of this agent.
    pub ingest: Throttle,
}

impl AgentConfig {
    pub fn new(
        agent_id: AgentId,
        app_id: AppId,
        node_id: impl Into<String>,
        controller: impl Into<String>,
        pfs_root: impl Into<PathBuf>,
    ) -> Self {
        Self {
            agent_id,
            app_id,
            node_id: node_id.into(),
            ranks: Vec::new(),
            controller: controller.into(),
            pfs_root: pfs_root.into(),
            bind: "127.0.0.1:0".into(),
            chunk_size: DEFAULT_CHUNK,
            snapshot_wait: Duration::from_secs(20),
            ingest: Throttle::unlimited(),
        }
    }
}

/// Switches for fault-injection tests.
#[derive(Debug, Default)]
pub struct AgentFaults {
    /// Flip one byte of the next migrated entry in transit.
    pub corrupt_next_migration: AtomicBool,
    pub fail_flush: AtomicBool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentCounters {
    pub bytes_staged: u64,
    pub bytes_moved: u64,
    pub entries: u64,
    pub plans_computed: u64,
    pub plans_pushed: u64,
}

#[derive(Debug)]
struct PushedPlan {
    elem_size: u32,
    old: Layout,
    new: Layout,
    transfers: Vec<Transfer>,
    sources: Vec<AgentAssignment>,
}

type RegKey = (AppId, u32, Rank);

struct Shared {
    cfg: AgentConfig,
    budget: Arc<NodeBudget>,
    pfs: PfsTier,
    store: Mutex<StagingStore>,
    snapshots: Mutex<SnapshotStore>,
    snapshot_cv: Condvar,
    registered: Mutex<HashMap<RegKey, BTreeMap<String, RegionDescriptor>>>,
    plans: Mutex<HashMap<(AppId, u32, String), Arc<PushedPlan>>>,
    source_maps: Mutex<HashMap<(AppId, u32), Vec<AgentAssignment>>>,
    migrating: AtomicBool,
    bytes_moved: AtomicU64,
    plans_computed: AtomicU64,
    plans_pushed: AtomicU64,
    faults: Arc<AgentFaults>,
    shutdown: Mutex<bool>,
    shutdown_cv: Condvar,
}

impl Drop for Shared {
    fn drop(&mut self) {
        let held = self.store.get_mut().map(|s| s.bytes_staged()).unwrap_or(0)
            + self.snapshots.get_mut().map(|s| s.bytes()).unwrap_or(0);
        self.budget.release(held);
    }
}

impl Shared {
    fn counters(&self) -> AgentCounters {
        let store = self.store.lock().unwrap();
        let snaps = self.snapshots.lock().unwrap();
        AgentCounters {
            bytes_staged: store.bytes_staged() + snaps.bytes(),
            bytes_moved: self.bytes_moved.load(Ordering::Relaxed),
            entries: store.len() as u64,
            plans_computed: self.plans_computed.load(Ordering::Relaxed),
            plans_pushed: self.plans_pushed.load(Ordering::Relaxed),
        }
    }

    fn release(&self, n: u64) {
        if n > 0 {
            self.budget.release(n);
        }
    }
}

/// A running agent. Dropping it stops the server and frees its memory.
pub struct Agent {
    shared: Arc<Shared>,
    server: Server,
}

impl Agent {
    pub fn start(cfg: AgentConfig, budget: Arc<NodeBudget>) -> Result<Agent> {
        let shared = Arc::new(Shared {
            pfs: PfsTier::new(cfg.pfs_root.clone()),
            budget,
            store: Mutex::default(),
            snapshots: Mutex::default(),
            snapshot_cv: Condvar::new(),
            registered: Mutex::default(),
            plans: Mutex::default(),
            source_maps: Mutex::default(),
            migrating: AtomicBool::new(false),
            bytes_moved: AtomicU64::new(0),
            plans_computed: AtomicU64::new(0),
            plans_pushed: AtomicU64::new(0),
            faults: Arc::default(),
            shutdown: Mutex::new(false),
            shutdown_cv: Condvar::new(),
            cfg,
        });
        let handler_shared = shared.clone();
        let name = format!("agent{}", shared.cfg.agent_id);
        let server = Server::spawn(&shared.cfg.bind, &name, move |conn| {
            serve(&handler_shared, conn)
        })?;
        info!(
            "event=agent_started agent={} app={} node={} endpoint={}",
            shared.cfg.agent_id,
            shared.cfg.app_id,
            shared.cfg.node_id,
            server.endpoint()
        );
        Ok(Agent { shared, server })
    }

    pub fn id(&self) -> AgentId {
        self.shared.cfg.agent_id
    }

    pub fn endpoint(&self) -> String {
        self.server.endpoint()
    }

    pub fn counters(&self) -> AgentCounters {
        self.shared.counters()
    }

    pub fn faults(&self) -> Arc<AgentFaults> {
        self.shared.faults.clone()
    }

    /// Entries currently staged, for inspection in tests.
    pub fn entry_keys(&self) -> Vec<EntryKey> {
        self.shared.store.lock().unwrap().keys()
    }

    pub fn check_accounting(&self) -> Result<()> {
        self.shared.store.lock().unwrap().check_accounting()
    }

    /// Blocks until a `Shutdown` message arrives.
    pub fn wait_shutdown(&self) {
        let mut done = self.shared.shutdown.lock().unwrap();
        while !*done {
            done = self.shared.shutdown_cv.wait(done).unwrap();
        }
    }

    pub fn stop(&mut self) {
        self.server.stop();
    }
}

/// Runs an agent until it is told to shut down, printing its endpoint on
/// stdout first. Used when agents are separate processes.
pub fn run_standalone(cfg: AgentConfig, mem_budget: u64) -> Result<()> {
    use std::io::Write;
    let mut agent = Agent::start(cfg, NodeBudget::new(mem_budget))?;
    let mut out = std::io::stdout();
    writeln!(out, "READY {}", agent.endpoint())?;
    out.flush()?;
    agent.wait_shutdown();
    agent.stop();
    Ok(())
}

enum PendingKind {
    Commit,
    Snapshot,
}

struct Pending {
    kind: PendingKind,
    app: AppId,
    epoch: u32,
    version: u64,
    rank: Rank,
    regions: Vec<RegionChecksum>,
    bufs: Vec<Vec<u8>>,
    reserved: u64,
    started: Instant,
    failure: Option<(ErrorCode, String)>,
}

/// Per-connection state.
struct Session {
    pending: Option<Pending>,
    controller: Option<Connection>,
}

impl Session {
    fn controller_call(&mut self, shared: &Shared, msg: &Message) -> Result<Message> {
        let mut last = Error::Disconnected;
        for _ in 0..2 {
            if self.controller.is_none() {
                self.controller = Some(Connection::connect(&shared.cfg.controller)?);
            }
            match self.controller.as_mut().unwrap().call(msg) {
                Ok(reply) => return Ok(reply),
                Err(e) if e.is_transport() => {
                    self.controller = None;
                    last = e;
                }
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }
}

fn serve(shared: &Arc<Shared>, mut conn: Connection) {
    let mut session = Session {
        pending: None,
        controller: None,
    };
    loop {
        let msg = match conn.recv() {
            Ok(m) => m,
            Err(Error::Disconnected) => break,
            Err(e) => {
                debug!("event=agent_conn_closed agent={} error={e}", shared.cfg.agent_id);
                break;
            }
        };
        if let Err(e) = handle(shared, &mut session, &mut conn, msg) {
            let reply = e.to_wire();
            if conn.send(&reply).is_err() {
                break;
            }
        }
    }
    if let Some(p) = session.pending.take() {
        // A client vanished mid-commit: nothing of it is stored.
        shared.release(p.reserved);
        debug!(
            "event=commit_abandoned agent={} app={} version={} rank={}",
            shared.cfg.agent_id, p.app, p.version, p.rank
        );
    }
}

fn handle(shared: &Arc<Shared>, s: &mut Session, conn: &mut Connection, msg: Message) -> Result<()> {
    match msg {
        Message::Connect { app_id, .. } => {
            check_app(shared, app_id)?;
            if shared.migrating.load(Ordering::SeqCst) {
                return Err(Error::remote(ErrorCode::Moved, "agent is migrating"));
            }
            conn.send(&Message::Ok {})
        }
        Message::MemRegister {
            app_id,
            rank,
            epoch,
            regions,
        } => {
            check_app(shared, app_id)?;
            for r in &regions {
                r.validate()?;
                if rank >= r.world_size() {
                    return Err(Error::invalid(format!(
                        "rank {rank} outside region {} of {} ranks",
                        r.region_id,
                        r.world_size()
                    )));
                }
            }
            let mut reg = shared.registered.lock().unwrap();
            let set = reg.entry((app_id, epoch, rank)).or_default();
            for r in regions {
                set.insert(r.region_id.clone(), r);
            }
            drop(reg);
            conn.send(&Message::Ok {})
        }
        Message::CommitBegin {
            app_id,
            epoch,
            version,
            rank,
            regions,
        } => {
            begin(shared, s, PendingKind::Commit, app_id, epoch, version, rank, regions);
            Ok(())
        }
        Message::SnapshotPush {
            app_id,
            epoch,
            rank,
            regions,
        } => {
            begin(shared, s, PendingKind::Snapshot, app_id, epoch, 0, rank, regions);
            Ok(())
        }
        Message::CommitData {
            region_id,
            offset,
            data,
        } => {
            shared.cfg.ingest.pace(data.len());
            shared.bytes_moved.fetch_add(data.len() as u64, Ordering::Relaxed);
            let Some(p) = s.pending.as_mut() else {
                return Err(Error::remote(ErrorCode::Protocol, "CommitData without CommitBegin"));
            };
            if p.failure.is_some() {
                return Ok(());
            }
            let Some(i) = p.regions.iter().position(|r| r.region_id == region_id) else {
                p.failure = Some((ErrorCode::Unregistered, format!("region {region_id} not in commit")));
                return Ok(());
            };
            let buf = &mut p.bufs[i];
            let start = offset as usize;
            match start.checked_add(data.len()) {
                Some(end) if end <= buf.len() => buf[start..end].copy_from_slice(&data),
                _ => {
                    p.failure = Some((
                        ErrorCode::Integrity,
                        format!("chunk at {offset} overruns region {region_id}"),
                    ))
                }
            }
            Ok(())
        }
        Message::CommitEnd {
            app_id,
            version,
            rank,
        } => {
            let Some(p) = s.pending.take() else {
                return Err(Error::remote(ErrorCode::Protocol, "CommitEnd without CommitBegin"));
            };
            let (code, reason) = finish(shared, s, p, app_id, version, rank);
            conn.send(&Message::CommitAck {
                version,
                code,
                reason,
            })
        }
        Message::RestoreReq {
            app_id,
            epoch,
            version,
            rank,
            region_id,
        } => restore(shared, conn, app_id, epoch, version, rank, region_id),
        Message::RedistReq {
            app_id,
            epoch,
            region_id,
            elem_size,
            old,
            new,
            dst_rank,
        } => {
            let data = redistribute(shared, s, app_id, epoch, &region_id, elem_size, old, new, dst_rank)?;
            shared.bytes_moved.fetch_add(data.len() as u64, Ordering::Relaxed);
            let total = data.len() as u64;
            send_chunks(conn, &data, shared.cfg.chunk_size, |offset, data| Message::RedistData {
                region_id: region_id.clone(),
                offset,
                total,
                data,
            })
        }
        Message::PeerFetch {
            app_id,
            epoch,
            src_rank,
            region_id,
            ranges,
        } => {
            let data = read_snapshot_ranges(shared, app_id, epoch, src_rank, &region_id, &ranges)?;
            shared.bytes_moved.fetch_add(data.len() as u64, Ordering::Relaxed);
            let crc = crc32(&data);
            conn.send(&Message::PeerData {
                crc,
                data: Blob(data),
            })
        }
        Message::MigrateStream {
            app_id,
            epoch,
            version,
            rank,
            region_id,
            crc,
            data,
        } => {
            migrate_in(shared, app_id, epoch, version, rank, region_id, crc, data.0)?;
            conn.send(&Message::Ok {})
        }
        Message::FlushOrder {
            app_id,
            epoch,
            version,
            agent_id,
            ranks,
        } => {
            let res = flush(shared, app_id, epoch, version, &ranks);
            let (ok, reason) = match res {
                Ok(n) => {
                    info!(
                        "event=flushed agent={} app={app_id} version={version} entries={n}",
                        shared.cfg.agent_id
                    );
                    (true, String::new())
                }
                Err(e) => {
                    warn!("event=flush_failed agent={} app={app_id} version={version} error={e}", shared.cfg.agent_id);
                    (false, e.to_string())
                }
            };
            conn.send(&Message::FlushAck {
                app_id,
                version,
                agent_id,
                ok,
                reason,
            })
        }
        Message::MigrateOrder {
            app_id,
            agent_id,
            target_endpoint,
            ..
        } => {
            let res = migrate_out(shared, &target_endpoint);
            let (entries, ok, reason) = match res {
                Ok(n) => (n, true, String::new()),
                Err(e) => {
                    shared.migrating.store(false, Ordering::SeqCst);
                    (0, false, e.to_string())
                }
            };
            conn.send(&Message::MigrateAck {
                app_id,
                agent_id,
                entries,
                ok,
                reason,
            })
        }
        Message::PlanPush {
            app_id,
            epoch,
            region_id,
            elem_size,
            old,
            new,
            transfers,
            sources,
        } => {
            shared.plans.lock().unwrap().insert(
                (app_id, epoch, region_id),
                Arc::new(PushedPlan {
                    elem_size,
                    old,
                    new,
                    transfers,
                    sources,
                }),
            );
            shared.plans_pushed.fetch_add(1, Ordering::Relaxed);
            conn.send(&Message::Ok {})
        }
        Message::DropVersions {
            app_id,
            versions,
            snapshots_through_epoch,
        } => {
            drop_versions(shared, app_id, &versions, snapshots_through_epoch);
            conn.send(&Message::Ok {})
        }
        Message::PurgeMemory {
            app_id, version, ..
        } => {
            let mut store = shared.store.lock().unwrap();
            let mut freed = 0;
            for key in store.version_keys(app_id, version) {
                freed += store.purge(&key)?;
            }
            drop(store);
            shared.release(freed);
            conn.send(&Message::Ok {})
        }
        Message::AgentStatsQuery {} => {
            let c = shared.counters();
            conn.send(&Message::AgentStatsReply {
                agent_id: shared.cfg.agent_id,
                bytes_staged: c.bytes_staged,
                bytes_moved: c.bytes_moved,
                entries: c.entries,
                plans_computed: c.plans_computed,
                plans_pushed: c.plans_pushed,
            })
        }
        Message::Shutdown { .. } => {
            conn.send(&Message::Ok {})?;
            *shared.shutdown.lock().unwrap() = true;
            shared.shutdown_cv.notify_all();
            Ok(())
        }
        other => Err(Error::remote(
            ErrorCode::Protocol,
            format!("agent does not handle {}", other.name()),
        )),
    }
}

fn check_app(shared: &Shared, app: AppId) -> Result<()> {
    if app != shared.cfg.app_id {
        return Err(Error::remote(
            ErrorCode::UnknownApp,
            format!("agent {} serves app {}, not {app}", shared.cfg.agent_id, shared.cfg.app_id),
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn begin(
    shared: &Shared,
    s: &mut Session,
    kind: PendingKind,
    app: AppId,
    epoch: u32,
    version: u64,
    rank: Rank,
    regions: Vec<RegionChecksum>,
) {
    if let Some(old) = s.pending.take() {
        shared.release(old.reserved);
    }
    let mut p = Pending {
        kind,
        app,
        epoch,
        version,
        rank,
        bufs: Vec::new(),
        regions,
        reserved: 0,
        started: Instant::now(),
        failure: None,
    };
    p.failure = admit(shared, s, &p).err();
    if p.failure.is_none() {
        p.reserved = p.regions.iter().map(|r| r.len).sum();
        p.bufs = p.regions.iter().map(|r| vec![0u8; r.len as usize]).collect();
    }
    s.pending = Some(p);
}

/// Registration, size and budget checks for an incoming commit.
fn admit(shared: &Shared, s: &mut Session, p: &Pending) -> std::result::Result<(), (ErrorCode, String)> {
    if p.app != shared.cfg.app_id {
        return Err((ErrorCode::UnknownApp, format!("app {} is not served here", p.app)));
    }
    {
        let reg = shared.registered.lock().unwrap();
        let set = reg.get(&(p.app, p.epoch, p.rank));
        for r in &p.regions {
            let Some(desc) = set.and_then(|m| m.get(&r.region_id)) else {
                return Err((
                    ErrorCode::Unregistered,
                    format!("region {} of rank {} is not registered", r.region_id, p.rank),
                ));
            };
            let want = desc.bytes_for_rank(p.rank);
            if r.len != want {
                return Err((
                    ErrorCode::Unregistered,
                    format!(
                        "region {} declares {} bytes, registered size is {want}",
                        r.region_id, r.len
                    ),
                ));
            }
        }
    }
    let total: u64 = p.regions.iter().map(|r| r.len).sum();
    if !shared.budget.try_reserve(total) {
        let notice = Message::CapacityNotice {
            app_id: p.app,
            agent_id: shared.cfg.agent_id,
            needed: total,
        };
        if let Err(e) = s.controller_call(shared, &notice) {
            warn!("event=capacity_notice_failed agent={} error={e}", shared.cfg.agent_id);
        }
        return Err((
            ErrorCode::Capacity,
            format!(
                "node budget of {} bytes cannot take {total} more",
                shared.budget.capacity()
            ),
        ));
    }
    Ok(())
}

fn finish(
    shared: &Shared,
    s: &mut Session,
    p: Pending,
    app: AppId,
    version: u64,
    rank: Rank,
) -> (ErrorCode, String) {
    let nack = |code: ErrorCode, reason: String| {
        shared.release(p.reserved);
        (code, reason)
    };
    if let Some((code, reason)) = p.failure.clone() {
        return nack(code, reason);
    }
    let is_commit = matches!(p.kind, PendingKind::Commit);
    if app != p.app || rank != p.rank || (is_commit && version != p.version) {
        return nack(ErrorCode::Protocol, "CommitEnd does not match CommitBegin".into());
    }
    let mut staged = Vec::with_capacity(p.regions.len());
    for (r, buf) in p.regions.iter().zip(p.bufs) {
        if crc32(&buf) != r.crc {
            return nack(
                ErrorCode::Integrity,
                format!("region {} fails its checksum", r.region_id),
            );
        }
        staged.push((r.region_id.clone(), Arc::new(buf), r.crc));
    }
    let transfer_us = p.started.elapsed().as_micros() as u64;
    match p.kind {
        PendingKind::Snapshot => {
            let mut snaps = shared.snapshots.lock().unwrap();
            let mut replaced = 0;
            for (region, data, crc) in staged {
                let key = SnapshotKey {
                    app,
                    epoch: p.epoch,
                    rank,
                    region,
                };
                replaced += snaps.insert(key, data, crc);
            }
            drop(snaps);
            shared.release(replaced);
            shared.snapshot_cv.notify_all();
            debug!("event=snapshot_stored agent={} app={app} epoch={} rank={rank}", shared.cfg.agent_id, p.epoch);
            (ErrorCode::Ok, String::new())
        }
        PendingKind::Commit => {
            let mut replaced = 0;
            {
                // Checked under the store lock so a migration either sees
                // this entry or this commit sees the migration.
                let mut store = shared.store.lock().unwrap();
                if shared.migrating.load(Ordering::SeqCst) {
                    drop(store);
                    return nack(ErrorCode::Moved, "agent is migrating".into());
                }
                for (region, data, crc) in staged {
                    let key = EntryKey {
                        app,
                        version,
                        rank,
                        region,
                    };
                    match store.insert(key, p.epoch, data, crc) {
                        Ok(n) => replaced += n,
                        Err(e) => {
                            drop(store);
                            return nack(ErrorCode::Integrity, e.to_string());
                        }
                    }
                }
            }
            shared.release(replaced);
            let report = Message::CommitReport {
                app_id: app,
                epoch: p.epoch,
                version,
                rank,
                agent_id: shared.cfg.agent_id,
                bytes: p.reserved,
                transfer_us,
                regions: p.regions,
            };
            match s.controller_call(shared, &report) {
                Ok(_) => (ErrorCode::Ok, String::new()),
                Err(e) => (ErrorCode::Internal, format!("commit not recorded: {e}")),
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn restore(
    shared: &Shared,
    conn: &mut Connection,
    app: AppId,
    epoch: u32,
    version: u64,
    rank: Rank,
    region: String,
) -> Result<()> {
    let key = EntryKey {
        app,
        version,
        rank,
        region,
    };
    let staged = shared
        .store
        .lock()
        .unwrap()
        .read(&key)
        .map_err(|e| Error::remote(ErrorCode::Integrity, e.to_string()))?;
    let (data, crc) = match staged {
        Some(found) => found,
        None => match shared.pfs.read_region(app, epoch, version, rank, &key.region) {
            Ok(Some((bytes, crc))) => (Arc::new(bytes), crc),
            Ok(None) => {
                return Err(Error::remote(
                    ErrorCode::Missing,
                    format!("no entry for app {app} v{version} rank {rank} region {}", key.region),
                ))
            }
            Err(e) => return Err(Error::remote(ErrorCode::Storage, e.to_string())),
        },
    };
    shared.bytes_moved.fetch_add(data.len() as u64, Ordering::Relaxed);
    let total = data.len() as u64;
    send_chunks(conn, &data, shared.cfg.chunk_size, |offset, data| Message::RestoreData {
        region_id: key.region.clone(),
        offset,
        total,
        crc,
        data,
    })
}

fn wait_snapshot(shared: &Shared, key: &SnapshotKey) -> Result<(Arc<Vec<u8>>, u32)> {
    let deadline = Instant::now() + shared.cfg.snapshot_wait;
    let mut snaps = shared.snapshots.lock().unwrap();
    loop {
        if let Some(found) = snaps.get(key) {
            return Ok(found);
        }
        let now = Instant::now();
        if now >= deadline {
            return Err(Error::remote(
                ErrorCode::NoSource,
                format!(
                    "no snapshot of rank {} region {} for epoch {}",
                    key.rank, key.region, key.epoch
                ),
            ));
        }
        snaps = shared.snapshot_cv.wait_timeout(snaps, deadline - now).unwrap().0;
    }
}

fn read_snapshot_ranges(
    shared: &Shared,
    app: AppId,
    epoch: u32,
    rank: Rank,
    region: &str,
    ranges: &[ByteRange],
) -> Result<Vec<u8>> {
    let key = SnapshotKey {
        app,
        epoch,
        rank,
        region: region.to_string(),
    };
    let (data, crc) = wait_snapshot(shared, &key)?;
    if crc32(&data) != crc {
        return Err(Error::remote(
            ErrorCode::Integrity,
            format!("snapshot of rank {rank} region {region} fails its checksum"),
        ));
    }
    let mut out = Vec::with_capacity(ranges.iter().map(|r| r.len as usize).sum());
    for r in ranges {
        let end = r.offset.checked_add(r.len).filter(|&e| e <= data.len() as u64);
        let Some(end) = end else {
            return Err(Error::remote(
                ErrorCode::Layout,
                format!("range {}+{} outside snapshot of {} bytes", r.offset, r.len, data.len()),
            ));
        };
        out.extend_from_slice(&data[r.offset as usize..end as usize]);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn redistribute(
    shared: &Shared,
    s: &mut Session,
    app: AppId,
    epoch: u32,
    region: &str,
    elem_size: u32,
    old: Layout,
    new: Layout,
    dst: Rank,
) -> Result<Vec<u8>> {
    check_app(shared, app)?;
    if epoch == 0 {
        return Err(Error::remote(ErrorCode::Layout, "epoch 0 has no predecessor"));
    }
    {
        let reg = shared.registered.lock().unwrap();
        let desc = reg.get(&(app, epoch, dst)).and_then(|m| m.get(region));
        match desc {
            None => {
                return Err(Error::remote(
                    ErrorCode::Unregistered,
                    format!("region {region} of rank {dst} is not registered for epoch {epoch}"),
                ))
            }
            Some(d) if d.layout() != new || d.elem_size != elem_size => {
                return Err(Error::remote(
                    ErrorCode::Layout,
                    format!("requested layout {new:?} does not match registered region {region}"),
                ))
            }
            Some(_) => {}
        }
    }
    let pushed = shared
        .plans
        .lock()
        .unwrap()
        .get(&(app, epoch, region.to_string()))
        .cloned()
        .filter(|p| p.old == old && p.new == new && p.elem_size == elem_size);
    let (runs, sources) = match pushed {
        Some(p) => {
            let runs: Vec<Transfer> = p.transfers.iter().filter(|t| t.dst_rank == dst).copied().collect();
            (runs, p.sources.clone())
        }
        None => {
            let runs = destination_runs(old, new, dst)
                .map_err(|e| Error::remote(ErrorCode::Layout, e.to_string()))?;
            shared.plans_computed.fetch_add(1, Ordering::Relaxed);
            (runs, source_map(shared, s, app, epoch)?)
        }
    };
    let elem = u64::from(elem_size);
    let total = new.owned_count(dst)? * elem;
    let mut out = vec![0u8; total as usize];
    let mut by_src: BTreeMap<Rank, Vec<Transfer>> = BTreeMap::new();
    for t in runs {
        by_src.entry(t.src_rank).or_default().push(t);
    }
    let src_epoch = epoch - 1;
    for (src, runs) in by_src {
        let ranges: Vec<ByteRange> = runs
            .iter()
            .map(|t| ByteRange {
                offset: t.src_offset * elem,
                len: t.len * elem,
            })
            .collect();
        let holder = assignment_for(&sources, src).ok_or_else(|| {
            Error::remote(ErrorCode::NoSource, format!("no agent held rank {src} in epoch {src_epoch}"))
        })?;
        let bytes = if holder.agent_id == shared.cfg.agent_id {
            read_snapshot_ranges(shared, app, src_epoch, src, region, &ranges)?
        } else {
            let mut peer = Connection::connect(&holder.endpoint)?;
            let reply = peer.call(&Message::PeerFetch {
                app_id: app,
                epoch: src_epoch,
                src_rank: src,
                region_id: region.to_string(),
                ranges,
            })?;
            match reply {
                Message::PeerData { crc, data } if crc32(&data) == crc => data.0,
                Message::PeerData { .. } => {
                    return Err(Error::remote(ErrorCode::Integrity, "peer data fails its checksum"))
                }
                other => return Err(crate::net::unexpected(&other)),
            }
        };
        let mut pos = 0usize;
        for t in &runs {
            let n = (t.len * elem) as usize;
            let d = (t.dst_offset * elem) as usize;
            out[d..d + n].copy_from_slice(&bytes[pos..pos + n]);
            pos += n;
        }
    }
    Ok(out)
}

fn source_map(shared: &Shared, s: &mut Session, app: AppId, epoch: u32) -> Result<Vec<AgentAssignment>> {
    if let Some(m) = shared.source_maps.lock().unwrap().get(&(app, epoch)) {
        return Ok(m.clone());
    }
    let reply = s.controller_call(shared, &Message::SourceMapQuery { app_id: app, epoch })?;
    match reply {
        Message::SourceMap { assignments } => {
            shared
                .source_maps
                .lock()
                .unwrap()
                .insert((app, epoch), assignments.clone());
            Ok(assignments)
        }
        other => Err(crate::net::unexpected(&other)),
    }
}

#[allow(clippy::too_many_arguments)]
fn migrate_in(
    shared: &Shared,
    app: AppId,
    epoch: u32,
    version: u64,
    rank: Rank,
    region: String,
    crc: u32,
    data: Vec<u8>,
) -> Result<()> {
    check_app(shared, app)?;
    if crc32(&data) != crc {
        return Err(Error::remote(
            ErrorCode::Integrity,
            format!("migrated entry v{version} rank {rank} region {region} fails its checksum"),
        ));
    }
    let len = data.len() as u64;
    if !shared.budget.try_reserve(len) {
        return Err(Error::remote(ErrorCode::Capacity, "no room for migrated entry"));
    }
    let key = EntryKey {
        app,
        version,
        rank,
        region,
    };
    let flushed = shared.pfs.is_committed(app, epoch, version);
    let mut store = shared.store.lock().unwrap();
    let replaced = store.insert(key.clone(), epoch, Arc::new(data), crc)?;
    if flushed {
        store.mark_flushed(&key);
    }
    drop(store);
    shared.release(replaced);
    Ok(())
}

fn migrate_out(shared: &Shared, target: &str) -> Result<u64> {
    let keys = {
        let store = shared.store.lock().unwrap();
        shared.migrating.store(true, Ordering::SeqCst);
        store.keys()
    };
    let mut conn = Connection::connect(target)?;
    let mut moved = 0;
    for key in keys {
        let (epoch, data, crc) = {
            let store = shared.store.lock().unwrap();
            match store.get(&key) {
                Some(e) => match e.data() {
                    Some(d) => (e.epoch, d.clone(), e.crc),
                    None => continue, // PFS-only entries need no memory copy
                },
                None => continue,
            }
        };
        let mut attempt = 0;
        loop {
            let mut payload = data.to_vec();
            if shared.faults.corrupt_next_migration.swap(false, Ordering::SeqCst) && !payload.is_empty() {
                payload[0] ^= 0xff;
            }
            let msg = Message::MigrateStream {
                app_id: key.app,
                epoch,
                version: key.version,
                rank: key.rank,
                region_id: key.region.clone(),
                crc,
                data: Blob(payload),
            };
            match conn.call(&msg) {
                Ok(_) => break,
                Err(e) if e.code() == Some(ErrorCode::Integrity) && attempt < 2 => {
                    warn!("event=migration_retry agent={} key={key:?}", shared.cfg.agent_id);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
        shared.bytes_moved.fetch_add(data.len() as u64, Ordering::Relaxed);
        moved += 1;
    }
    info!("event=migrated_out agent={} target={target} entries={moved}", shared.cfg.agent_id);
    Ok(moved)
}

fn flush(shared: &Shared, app: AppId, epoch: u32, version: u64, ranks: &[Rank]) -> Result<u64> {
    if shared.faults.fail_flush.load(Ordering::SeqCst) {
        return Err(Error::remote(ErrorCode::Storage, "injected flush failure"));
    }
    let keys: Vec<EntryKey> = shared
        .store
        .lock()
        .unwrap()
        .version_keys(app, version)
        .into_iter()
        .filter(|k| ranks.contains(&k.rank))
        .collect();
    for r in ranks {
        if !keys.iter().any(|k| k.rank == *r) {
            return Err(Error::remote(
                ErrorCode::Missing,
                format!("no entries of v{version} for rank {r}"),
            ));
        }
    }
    let mut written = 0;
    for key in keys {
        let found = shared.store.lock().unwrap().read(&key)?;
        let Some((data, _)) = found else {
            continue; // already on the PFS tier only
        };
        shared
            .pfs
            .write_region(app, epoch, version, key.rank, &key.region, &data)
            .map_err(|e| Error::remote(ErrorCode::Storage, e.to_string()))?;
        shared.store.lock().unwrap().mark_flushed(&key);
        written += 1;
    }
    Ok(written)
}

fn drop_versions(shared: &Shared, app: AppId, versions: &[VersionKey], snapshots_through: u32) {
    let mut freed = 0;
    {
        let mut store = shared.store.lock().unwrap();
        for v in versions {
            for key in store.version_keys(app, v.version) {
                freed += store.remove(&key);
            }
        }
    }
    if snapshots_through != u32::MAX {
        freed += shared.snapshots.lock().unwrap().drop_through(app, snapshots_through);
        shared
            .plans
            .lock()
            .unwrap()
            .retain(|(a, e, _), _| *a != app || *e > snapshots_through + 1);
        shared
            .source_maps
            .lock()
            .unwrap()
            .retain(|(a, e), _| *a != app || *e > snapshots_through + 1);
        shared
            .registered
            .lock()
            .unwrap()
            .retain(|(a, e, _), _| *a != app || *e > snapshots_through);
    }
    shared.release(freed);
}
