//! Application library. A session registers with the controller, stages
//! commits through a double-buffered copy handed to one background transfer
//! worker, restores the latest complete version, redistributes regions when
//! the process count changes and follows agent reassignments.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::model::{
    assignment_for, crc32, make_version, AgentAssignment, AgentId, AppId, DistributionScheme, ProcessType, Rank,
    RegionDescriptor,
};
use crate::net::{expect_ok, request, send_chunks, unexpected, Connection, Throttle};
use crate::pfs::PfsTier;
use crate::protocol::{ErrorCode, Message, ProbeChange, RegionChecksum, RestartPoint};

/// User data of one region, shared between the application and the library.
pub type Buffer = Arc<RwLock<Vec<u8>>>;

pub fn buffer(bytes: Vec<u8>) -> Buffer {
    Arc::new(RwLock::new(bytes))
}

const STAGING_SETS: usize = 2;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub controller: String,
    /// Wait for every transfer inside `commit`.
    pub sync: bool,
    /// Automatic resends after an integrity NACK or a lost agent.
    pub retries: u32,
    pub chunk_size: usize,
    /// Limit on the commit stream to agents.
    pub throttle: Throttle,
    pub drain_timeout: Duration,
    /// How long a lost agent connection is re-resolved before giving up.
    pub refresh_timeout: Duration,
}

impl ClientConfig {
    pub fn new(controller: impl Into<String>) -> Self {
        Self {
            controller: controller.into(),
            sync: false,
            retries: 1,
            chunk_size: crate::agent::DEFAULT_CHUNK,
            throttle: Throttle::unlimited(),
            drain_timeout: Duration::from_secs(120),
            refresh_timeout: Duration::from_secs(15),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitMode {
    Async,
    Sync,
}

impl fmt::Display for CommitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommitMode::Async => "ASYNC",
            CommitMode::Sync => "SYNC",
        })
    }
}

impl FromStr for CommitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ASYNC" => Ok(CommitMode::Async),
            "SYNC" => Ok(CommitMode::Sync),
            other => Err(Error::invalid(format!("unknown commit mode {other}"))),
        }
    }
}

/// Timings of one commit, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitStats {
    pub commit: u64,
    pub version: u64,
    pub t_copy_us: u64,
    pub t_blocked_us: u64,
    pub t_transfer_us: u64,
    pub mode: CommitMode,
}

pub const CSV_HEADER: &str = "commit,version,t_copy_us,t_blocked_us,t_transfer_us,mode";

impl CommitStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.commit, self.version, self.t_copy_us, self.t_blocked_us, self.t_transfer_us, self.mode
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(Error::invalid(format!("expected 6 fields, got {}: {line}", f.len())));
        }
        let num = |i: usize| {
            f[i].parse::<u64>()
                .map_err(|e| Error::invalid(format!("field {i} of {line}: {e}")))
        };
        Ok(Self {
            commit: num(0)?,
            version: num(1)?,
            t_copy_us: num(2)?,
            t_blocked_us: num(3)?,
            t_transfer_us: num(4)?,
            mode: f[5].parse()?,
        })
    }
}

pub fn write_stats_csv(path: &Path, stats: &[CommitStats]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CSV_HEADER}")?;
    for s in stats {
        writeln!(f, "{}", s.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_stats_csv(path: &Path) -> Result<Vec<CommitStats>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::invalid(format!("{} lacks the stats header", path.display()))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(CommitStats::parse_csv_row)
        .collect()
}

/// Fault switches for crash tests.
#[derive(Debug)]
pub struct ClientFaults {
    /// The next commit stream stops after this many data bytes and the
    /// session dies as if its process was killed.
    crash_at_byte: AtomicU64,
}

impl Default for ClientFaults {
    fn default() -> Self {
        Self {
            crash_at_byte: AtomicU64::new(u64::MAX),
        }
    }
}

impl ClientFaults {
    pub fn crash_after_bytes(&self, bytes: u64) {
        self.crash_at_byte.store(bytes, Ordering::SeqCst);
    }
}

struct Region {
    desc: RegionDescriptor,
    buffer: Buffer,
    /// Layout before the open adaptation, until the region is redistributed.
    old: Option<Layout>,
}

#[derive(Debug, Clone)]
struct Ctx {
    app_id: AppId,
    rank: Rank,
    world: u32,
    epoch: u32,
    generation: u64,
    assignments: Vec<AgentAssignment>,
}

struct Link {
    agent: AgentId,
    conn: Connection,
}

#[derive(Default)]
struct Flow {
    inflight: Option<u64>,
    free: Vec<Vec<Vec<u8>>>,
    deferred: Option<(u64, Error)>,
    dead: bool,
}

struct Job {
    version: u64,
    epoch: u32,
    sums: Vec<RegionChecksum>,
    staging: Vec<Vec<u8>>,
    stat: usize,
}

struct Shared {
    cfg: ClientConfig,
    ctx: Mutex<Ctx>,
    /// Registered descriptors, re-sent on every new agent connection.
    descs: Mutex<Vec<RegionDescriptor>>,
    link: Mutex<Option<Link>>,
    flow: Mutex<Flow>,
    flow_cv: Condvar,
    stats: Mutex<Vec<CommitStats>>,
    faults: Arc<ClientFaults>,
}

struct Session {
    name: String,
    ptype: ProcessType,
    shared: Arc<Shared>,
    regions: Vec<Region>,
    next_version: u64,
    commits: u64,
    adapting: bool,
    /// World size before the adaptation a joining rank enters.
    joined_from: Option<u32>,
    tx: Option<Sender<Job>>,
    worker: Option<JoinHandle<()>>,
}

enum Phase {
    Fresh,
    Active(Box<Session>),
    Done,
}

/// One application process's handle on the checkpoint service.
pub struct Icheck {
    cfg: ClientConfig,
    faults: Arc<ClientFaults>,
    phase: Phase,
    stats: Vec<CommitStats>,
}

impl Icheck {
    pub fn new(cfg: ClientConfig) -> Self {
        Self {
            cfg,
            faults: Arc::default(),
            phase: Phase::Fresh,
            stats: Vec::new(),
        }
    }

    pub fn faults(&self) -> Arc<ClientFaults> {
        self.faults.clone()
    }

    fn session(&mut self) -> Result<&mut Session> {
        match &mut self.phase {
            Phase::Active(s) => {
                if s.shared.flow().dead {
                    return Err(Error::Usage("session was aborted".into()));
                }
                Ok(s)
            }
            Phase::Fresh => Err(Error::Usage("call before init".into())),
            Phase::Done => Err(Error::Usage("call after finalize".into())),
        }
    }

    fn ctx(&self) -> Option<Ctx> {
        match &self.phase {
            Phase::Active(s) => Some(s.shared.ctx().clone()),
            _ => None,
        }
    }

    pub fn app_id(&self) -> Option<AppId> {
        self.ctx().map(|c| c.app_id)
    }

    pub fn rank(&self) -> Option<Rank> {
        self.ctx().map(|c| c.rank)
    }

    pub fn world_size(&self) -> Option<u32> {
        self.ctx().map(|c| c.world)
    }

    pub fn adapt_epoch(&self) -> Option<u32> {
        self.ctx().map(|c| c.epoch)
    }

    /// Agent currently serving this rank.
    pub fn agent(&self) -> Option<AgentId> {
        let c = self.ctx()?;
        assignment_for(&c.assignments, c.rank).map(|a| a.agent_id)
    }

    pub fn assignments(&self) -> Vec<AgentAssignment> {
        self.ctx().map(|c| c.assignments).unwrap_or_default()
    }

    /// Version the next commit will carry.
    pub fn next_version(&self) -> Option<u64> {
        match &self.phase {
            Phase::Active(s) => Some(s.next_version),
            _ => None,
        }
    }

    /// Stats of every commit so far.
    pub fn stats(&self) -> Vec<CommitStats> {
        match &self.phase {
            Phase::Active(s) => s.shared.stats.lock().unwrap().clone(),
            _ => self.stats.clone(),
        }
    }

    pub fn init(&mut self, name: &str, rank: Rank, world_size: u32, ptype: ProcessType) -> Result<()> {
        if !matches!(self.phase, Phase::Fresh) {
            return Err(Error::Usage("session already initialized".into()));
        }
        let reply = request(
            &self.cfg.controller,
            &Message::Register {
                name: name.to_string(),
                world_size,
                rank,
                process_type: ptype,
                regions: Vec::new(),
            },
        )?;
        let Message::RegisterAck {
            app_id,
            world_size: world,
            adapt_epoch,
            next_version,
            generation,
            assignments,
        } = reply
        else {
            return Err(unexpected(&reply));
        };
        if world != world_size {
            return Err(Error::remote(
                ErrorCode::Rejected,
                format!("app {name} has {world} ranks, expected {world_size}"),
            ));
        }
        let shared = Arc::new(Shared {
            cfg: self.cfg.clone(),
            ctx: Mutex::new(Ctx {
                app_id,
                rank,
                world,
                epoch: adapt_epoch,
                generation,
                assignments,
            }),
            descs: Mutex::default(),
            link: Mutex::default(),
            flow: Mutex::new(Flow {
                free: vec![Vec::new(); STAGING_SETS],
                ..Flow::default()
            }),
            flow_cv: Condvar::new(),
            stats: Mutex::default(),
            faults: self.faults.clone(),
        });
        let (tx, rx) = mpsc::channel();
        let w = shared.clone();
        let worker = thread::Builder::new()
            .name(format!("icheck-commit-{rank}"))
            .spawn(move || worker_loop(&w, rx))?;
        info!("event=client_init app={app_id} rank={rank} world={world} type={ptype:?} epoch={adapt_epoch}");
        self.phase = Phase::Active(Box::new(Session {
            name: name.to_string(),
            ptype,
            shared,
            regions: Vec::new(),
            next_version,
            commits: 0,
            adapting: false,
            joined_from: None,
            tx: Some(tx),
            worker: Some(worker),
        }));
        Ok(())
    }

    /// Registers a region of `count` local elements out of `global_count`.
    pub fn add_adapt(
        &mut self,
        region_id: &str,
        buf: Buffer,
        count: u64,
        global_count: u64,
        elem_size: u32,
        scheme: DistributionScheme,
    ) -> Result<()> {
        let s = self.session()?;
        if s.regions.iter().any(|r| r.desc.region_id == region_id) {
            return Err(Error::Usage(format!("region {region_id} already added")));
        }
        let (app, rank, world) = {
            let c = s.shared.ctx();
            (c.app_id, c.rank, c.world)
        };
        let layout = Layout::new(global_count, world, scheme);
        layout.validate()?;
        let owned = layout.owned_count(rank)?;
        if count != owned {
            return Err(Error::invalid(format!(
                "region {region_id}: rank {rank} owns {owned} of {global_count} elements, got {count}"
            )));
        }
        let len = buf.read().unwrap().len() as u64;
        if len != count * u64::from(elem_size) {
            return Err(Error::invalid(format!(
                "region {region_id}: buffer holds {len} bytes, {count} elements of {elem_size} need {}",
                count * u64::from(elem_size)
            )));
        }
        let desc = RegionDescriptor::from_layout(region_id, elem_size, &layout);
        desc.validate()?;
        let reply = request(
            &s.shared.cfg.controller,
            &Message::DeclareRegions {
                app_id: app,
                regions: vec![desc.clone()],
            },
        )?;
        s.shared.take_assignments(reply)?;
        s.shared.descs.lock().unwrap().push(desc.clone());
        let linked = s.shared.link.lock().unwrap().is_some();
        if linked {
            s.shared.mem_register(&[desc.clone()])?;
        } else {
            s.shared.ensure_link()?;
        }
        let old = s.joined_from.map(|w| Layout::new(global_count, w, scheme));
        s.regions.push(Region { desc, buffer: buf, old });
        Ok(())
    }

    /// Stages every region and hands the copy to the transfer worker.
    /// Returns the committed version.
    pub fn commit(&mut self) -> Result<u64> {
        let s = self.session()?;
        if s.regions.is_empty() {
            return Err(Error::Usage("commit without regions".into()));
        }
        if s.adapting {
            return Err(Error::Usage("commit inside an adaptation".into()));
        }
        let t0 = Instant::now();
        let mut staging = {
            let mut f = s.shared.flow();
            if let Some((v, e)) = f.deferred.take() {
                return Err(deferred(v, e));
            }
            loop {
                if f.dead {
                    return Err(Error::Usage("session was aborted".into()));
                }
                if let Some(set) = f.free.pop() {
                    break set;
                }
                f = s.shared.flow_cv.wait(f).unwrap();
            }
        };
        let rank = s.shared.ctx().rank;
        staging.resize_with(s.regions.len(), Vec::new);
        let mut sums = Vec::with_capacity(s.regions.len());
        for (r, dst) in s.regions.iter().zip(staging.iter_mut()) {
            let src = r.buffer.read().unwrap();
            let want = r.desc.bytes_for_rank(rank);
            if src.len() as u64 != want {
                s.shared.flow().free.push(staging);
                return Err(Error::invalid(format!(
                    "region {} holds {} bytes, registered size is {want}",
                    r.desc.region_id,
                    src.len()
                )));
            }
            dst.clear();
            dst.extend_from_slice(&src);
            drop(src);
            sums.push(RegionChecksum {
                region_id: r.desc.region_id.clone(),
                len: dst.len() as u64,
                crc: crc32(dst),
            });
        }
        let t_copy = t0.elapsed();
        let version = s.next_version;
        let epoch = s.shared.ctx().epoch;
        let mode = if s.shared.cfg.sync {
            CommitMode::Sync
        } else {
            CommitMode::Async
        };
        let stat = {
            let mut st = s.shared.stats.lock().unwrap();
            st.push(CommitStats {
                commit: s.commits,
                version,
                t_copy_us: t_copy.as_micros() as u64,
                t_blocked_us: 0,
                t_transfer_us: 0,
                mode,
            });
            st.len() - 1
        };
        {
            // Back-pressure: one transfer in flight at a time.
            let mut f = s.shared.flow();
            while f.inflight.is_some() && !f.dead {
                f = s.shared.flow_cv.wait(f).unwrap();
            }
            f.inflight = Some(version);
        }
        let job = Job {
            version,
            epoch,
            sums,
            staging,
            stat,
        };
        s.tx.as_ref()
            .expect("worker runs while the session is active")
            .send(job)
            .map_err(|_| Error::Usage("transfer worker stopped".into()))?;
        s.next_version += 1;
        s.commits += 1;
        let mut result = Ok(version);
        if mode == CommitMode::Sync {
            let mut f = s.shared.flow();
            while f.inflight.is_some() && !f.dead {
                f = s.shared.flow_cv.wait(f).unwrap();
            }
            if let Some((v, e)) = f.deferred.take() {
                result = Err(deferred(v, e));
            }
        }
        s.shared.stats.lock().unwrap()[stat].t_blocked_us = t0.elapsed().as_micros() as u64;
        result
    }

    /// Waits for the outstanding transfer and reports a deferred failure.
    pub fn drain(&mut self) -> Result<()> {
        let s = self.session()?;
        s.shared.drain()
    }

    /// Restores the latest complete version of the current epoch into the
    /// region buffers. Returns false when there is nothing to restore.
    pub fn restart(&mut self) -> Result<bool> {
        let s = self.session()?;
        if s.regions.is_empty() {
            return Err(Error::Usage("restart without regions".into()));
        }
        s.shared.drain()?;
        let ctx = s.shared.ctx().clone();
        let reply = request(
            &s.shared.cfg.controller,
            &Message::RestartQuery {
                app_id: ctx.app_id,
                name: s.name.clone(),
            },
        )?;
        let Message::RestartInfo { info } = reply else {
            return Err(unexpected(&reply));
        };
        let Some(rp) = info else {
            return Ok(false);
        };
        if rp.adapt_epoch != ctx.epoch || rp.world_size != ctx.world {
            info!(
                "event=restart_skipped app={} rank={} reason=epoch_mismatch version={}",
                ctx.app_id, ctx.rank, rp.version
            );
            return Ok(false);
        }
        let mut fetched = Vec::with_capacity(s.regions.len());
        for r in &s.regions {
            let id = &r.desc.region_id;
            let want = r.desc.bytes_for_rank(ctx.rank);
            let sum = rp.checksum(ctx.rank, id).ok_or_else(|| {
                Error::Verification(format!("version {} has no checksum for rank {} region {id}", rp.version, ctx.rank))
            })?;
            let data = fetch_entry(&rp, ctx.rank, id)?;
            if data.len() as u64 != want || sum.len != want || crc32(&data) != sum.crc {
                return Err(Error::Verification(format!(
                    "version {} rank {} region {id} fails its checksum",
                    rp.version, ctx.rank
                )));
            }
            fetched.push(data);
        }
        for (r, data) in s.regions.iter().zip(fetched) {
            *r.buffer.write().unwrap() = data;
        }
        info!("event=restarted app={} rank={} version={}", ctx.app_id, ctx.rank, rp.version);
        Ok(true)
    }

    /// Enters an adaptation from `old_world` to `new_world` ranks. Surviving
    /// ranks first push their current region bytes as redistribution
    /// sources. Returns false for a rank that leaves; its session ends.
    pub fn begin_adapt(&mut self, old_world: u32, new_world: u32) -> Result<bool> {
        let s = self.session()?;
        if s.adapting {
            return Err(Error::Usage("adaptation already open".into()));
        }
        if new_world == 0 {
            return Err(Error::invalid("new world size must be positive"));
        }
        let ctx = s.shared.ctx().clone();
        if s.ptype == ProcessType::Joining && s.joined_from.is_none() && s.commits == 0 {
            if new_world != ctx.world {
                return Err(Error::invalid(format!(
                    "joining rank registered into {} ranks, adaptation targets {new_world}",
                    ctx.world
                )));
            }
            s.joined_from = Some(old_world);
            for r in &mut s.regions {
                r.old = Some(Layout::new(r.desc.total_count(), old_world, r.desc.scheme));
            }
            s.adapting = true;
            return Ok(true);
        }
        if old_world != ctx.world {
            return Err(Error::invalid(format!("session has {} ranks, not {old_world}", ctx.world)));
        }
        s.shared.drain()?;
        if new_world == ctx.world {
            for r in &mut s.regions {
                r.old = Some(r.desc.layout());
            }
            s.adapting = true;
            return Ok(true);
        }
        s.shared.push_snapshot(&ctx, &s.regions)?;
        let reply = request(
            &s.shared.cfg.controller,
            &Message::AdaptBegin {
                app_id: ctx.app_id,
                new_world_size: new_world,
                epoch: ctx.epoch + 1,
            },
        )?;
        let Message::AdaptAck {
            epoch,
            world_size,
            generation,
            assignments,
        } = reply
        else {
            return Err(unexpected(&reply));
        };
        for r in &mut s.regions {
            r.old = Some(r.desc.layout());
        }
        {
            let mut c = s.shared.ctx();
            c.epoch = epoch;
            c.world = world_size;
            c.generation = generation;
            c.assignments = assignments;
        }
        s.next_version = make_version(epoch, 1);
        info!(
            "event=adapt_begin app={} rank={} epoch={epoch} world={world_size}",
            ctx.app_id, ctx.rank
        );
        if ctx.rank >= world_size {
            self.leave();
            return Ok(false);
        }
        s.shared.drop_link();
        s.shared.descs.lock().unwrap().clear();
        s.shared.ensure_link()?;
        s.adapting = true;
        Ok(true)
    }

    /// Fills `buf` with this rank's portion of a region under the new
    /// layout.
    pub fn redistribute(
        &mut self,
        region_id: &str,
        buf: Buffer,
        new_count: u64,
        scheme: DistributionScheme,
    ) -> Result<()> {
        let s = self.session()?;
        if !s.adapting {
            return Err(Error::Usage("redistribute outside an adaptation".into()));
        }
        let ctx = s.shared.ctx().clone();
        let shared = s.shared.clone();
        let region = s
            .regions
            .iter_mut()
            .find(|r| r.desc.region_id == region_id)
            .ok_or_else(|| Error::Usage(format!("unknown region {region_id}")))?;
        let old = region
            .old
            .ok_or_else(|| Error::Usage(format!("region {region_id} already redistributed")))?;
        let new = Layout::new(old.total_n, ctx.world, scheme);
        let owned = new.owned_count(ctx.rank)?;
        if new_count != owned {
            return Err(Error::invalid(format!(
                "region {region_id}: rank {} owns {owned} elements after adaptation, got {new_count}",
                ctx.rank
            )));
        }
        let elem = region.desc.elem_size;
        let desc = RegionDescriptor::from_layout(region_id, elem, &new);
        let data = if old == new {
            region.buffer.read().unwrap().clone()
        } else {
            shared.mem_register(&[desc.clone()])?;
            shared.set_desc(&desc);
            shared.redist(&ctx, &desc, old, new)?
        };
        if data.len() as u64 != new_count * u64::from(elem) {
            return Err(Error::Verification(format!(
                "region {region_id}: received {} bytes, expected {}",
                data.len(),
                new_count * u64::from(elem)
            )));
        }
        *buf.write().unwrap() = data;
        shared.set_desc(&desc);
        region.desc = desc;
        region.buffer = buf;
        region.old = None;
        Ok(())
    }

    /// Closes the adaptation once every region is redistributed.
    pub fn end_adapt(&mut self) -> Result<()> {
        let s = self.session()?;
        if !s.adapting {
            return Err(Error::Usage("no adaptation open".into()));
        }
        if let Some(r) = s.regions.iter().find(|r| r.old.is_some()) {
            return Err(Error::Usage(format!("region {} not redistributed", r.desc.region_id)));
        }
        let app = s.shared.ctx().app_id;
        let regions: Vec<RegionDescriptor> = s.regions.iter().map(|r| r.desc.clone()).collect();
        let reply = request(&s.shared.cfg.controller, &Message::DeclareRegions { app_id: app, regions })?;
        s.shared.take_assignments(reply)?;
        s.shared.ensure_link()?;
        s.adapting = false;
        s.joined_from = None;
        Ok(())
    }

    /// Asks the controller whether the agent set should change and follows
    /// a new assignment. Returns whether one was issued.
    pub fn probe_agents(&mut self) -> Result<bool> {
        let s = self.session()?;
        s.shared.drain()?;
        let app = s.shared.ctx().app_id;
        let reply = request(&s.shared.cfg.controller, &Message::ProbeAgents { app_id: app })?;
        let Message::ProbeAgentsAck {
            change,
            generation,
            assignments,
        } = reply
        else {
            return Err(unexpected(&reply));
        };
        let previous = {
            let mut c = s.shared.ctx();
            c.generation = generation;
            std::mem::replace(&mut c.assignments, assignments)
        };
        if change == ProbeChange::NoChange {
            return Ok(false);
        }
        if let Err(e) = s.shared.follow_assignment() {
            warn!("event=reconnect_failed app={app} error={e}");
            s.shared.ctx().assignments = previous;
            return Err(e);
        }
        Ok(true)
    }

    /// Drains, detaches from the controller and returns the commit stats.
    pub fn finalize(&mut self) -> Result<Vec<CommitStats>> {
        let s = self.session()?;
        let drained = s.shared.drain();
        let app = s.shared.ctx().app_id;
        let dereg = request(&s.shared.cfg.controller, &Message::Deregister { app_id: app }).and_then(expect_ok);
        self.shutdown();
        drained?;
        dereg?;
        Ok(self.stats.clone())
    }

    /// Ends the session without detaching, as a killed process would.
    pub fn abort(&mut self) {
        if let Phase::Active(s) = &self.phase {
            s.shared.flow().dead = true;
            s.shared.flow_cv.notify_all();
        }
        self.shutdown();
    }

    /// Leaves the application during a shrink.
    fn leave(&mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let phase = std::mem::replace(&mut self.phase, Phase::Done);
        if let Phase::Active(mut s) = phase {
            drop(s.tx.take());
            let dead = s.shared.flow().dead;
            if let Some(w) = s.worker.take() {
                if dead {
                    // A crashed session does not wait for its transfer.
                    drop(w);
                } else {
                    let _ = w.join();
                }
            }
            s.shared.drop_link();
            self.stats = s.shared.stats.lock().unwrap().clone();
        }
    }
}

impl Drop for Icheck {
    fn drop(&mut self) {
        if matches!(self.phase, Phase::Active(_)) {
            self.abort();
        }
    }
}

fn deferred(version: u64, e: Error) -> Error {
    match e {
        Error::Remote { code, reason } => Error::remote(code, format!("commit of version {version} failed: {reason}")),
        other => other,
    }
}

impl Shared {
    fn ctx(&self) -> MutexGuard<'_, Ctx> {
        self.ctx.lock().unwrap()
    }

    fn flow(&self) -> MutexGuard<'_, Flow> {
        self.flow.lock().unwrap()
    }

    fn drain(&self) -> Result<()> {
        let deadline = Instant::now() + self.cfg.drain_timeout;
        let mut f = self.flow();
        while let Some(v) = f.inflight {
            if f.dead {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout(format!("version {v} unacknowledged")));
            }
            f = self.flow_cv.wait_timeout(f, deadline - now).unwrap().0;
        }
        if f.dead {
            return Err(Error::Usage("session was aborted".into()));
        }
        match f.deferred.take() {
            Some((v, e)) => Err(deferred(v, e)),
            None => Ok(()),
        }
    }

    fn take_assignments(&self, reply: Message) -> Result<()> {
        match reply {
            Message::ProbeAgentsAck {
                generation,
                assignments,
                ..
            } => {
                let mut c = self.ctx();
                c.generation = generation;
                c.assignments = assignments;
                Ok(())
            }
            other => Err(unexpected(&other)),
        }
    }

    fn set_desc(&self, desc: &RegionDescriptor) {
        let mut d = self.descs.lock().unwrap();
        match d.iter_mut().find(|x| x.region_id == desc.region_id) {
            Some(slot) => *slot = desc.clone(),
            None => d.push(desc.clone()),
        }
    }

    fn drop_link(&self) {
        if let Some(l) = self.link.lock().unwrap().take() {
            l.conn.shutdown();
        }
    }

    fn connect(&self, ctx: &Ctx) -> Result<Link> {
        let a = assignment_for(&ctx.assignments, ctx.rank).ok_or_else(|| {
            Error::remote(ErrorCode::Missing, format!("no agent assigned to rank {}", ctx.rank))
        })?;
        let mut conn = Connection::connect_timeout(&a.endpoint, CONNECT_TIMEOUT)?.with_throttle(self.cfg.throttle.clone());
        expect_ok(conn.call(&Message::Connect {
            app_id: ctx.app_id,
            rank: ctx.rank,
            epoch: ctx.epoch,
        })?)?;
        let descs = self.descs.lock().unwrap().clone();
        if !descs.is_empty() {
            expect_ok(conn.call(&Message::MemRegister {
                app_id: ctx.app_id,
                rank: ctx.rank,
                epoch: ctx.epoch,
                regions: descs,
            })?)?;
        }
        debug!("event=agent_connected app={} rank={} agent={}", ctx.app_id, ctx.rank, a.agent_id);
        Ok(Link {
            agent: a.agent_id,
            conn,
        })
    }

    /// Connects when the rank has an agent and no connection yet.
    fn ensure_link(&self) -> Result<()> {
        let mut link = self.link.lock().unwrap();
        if link.is_some() {
            return Ok(());
        }
        let ctx = self.ctx().clone();
        if assignment_for(&ctx.assignments, ctx.rank).is_none() {
            return Ok(());
        }
        *link = Some(self.connect(&ctx)?);
        Ok(())
    }

    /// Switches to the agent the current assignment names, keeping the old
    /// connection if the new one cannot be opened.
    fn follow_assignment(&self) -> Result<()> {
        let ctx = self.ctx().clone();
        let target = assignment_for(&ctx.assignments, ctx.rank).map(|a| a.agent_id);
        let mut link = self.link.lock().unwrap();
        if target.is_some() && link.as_ref().map(|l| l.agent) == target {
            return Ok(());
        }
        let fresh = self.connect(&ctx)?;
        if let Some(old) = link.replace(fresh) {
            old.conn.shutdown();
        }
        info!("event=agent_switched app={} rank={} agent={:?}", ctx.app_id, ctx.rank, target);
        Ok(())
    }

    /// Re-resolves this rank's agent after it moved or vanished.
    fn refresh(&self) -> Result<()> {
        self.drop_link();
        let deadline = Instant::now() + self.cfg.refresh_timeout;
        loop {
            let app = self.ctx().app_id;
            let res = request(&self.cfg.controller, &Message::AssignmentQuery { app_id: app })
                .and_then(|r| self.take_assignments(r))
                .and_then(|()| {
                    let ctx = self.ctx().clone();
                    self.connect(&ctx)
                });
            match res {
                Ok(l) => {
                    *self.link.lock().unwrap() = Some(l);
                    return Ok(());
                }
                Err(e) if Instant::now() >= deadline => return Err(e),
                Err(e) => debug!("event=refresh_retry app={app} error={e}"),
            }
            thread::sleep(POLL);
        }
    }

    fn mem_register(&self, descs: &[RegionDescriptor]) -> Result<()> {
        let ctx = self.ctx().clone();
        self.with_link(|l| {
            expect_ok(l.conn.call(&Message::MemRegister {
                app_id: ctx.app_id,
                rank: ctx.rank,
                epoch: ctx.epoch,
                regions: descs.to_vec(),
            })?)
        })
    }

    /// Runs `f` on the agent connection, re-resolving the agent once after a
    /// transport failure.
    fn with_link<T>(&self, mut f: impl FnMut(&mut Link) -> Result<T>) -> Result<T> {
        let first = {
            let mut link = self.link.lock().unwrap();
            match link.as_mut() {
                Some(l) => f(l),
                None => Err(Error::Disconnected),
            }
        };
        match first {
            Err(e) if e.is_transport() => {
                debug!("event=link_retry error={e}");
                self.refresh()?;
                let mut link = self.link.lock().unwrap();
                f(link.as_mut().ok_or(Error::Disconnected)?)
            }
            other => other,
        }
    }

    /// Stores the current region bytes on the agent as sources for the
    /// coming redistribution.
    fn push_snapshot(&self, ctx: &Ctx, regions: &[Region]) -> Result<()> {
        let bufs: Vec<Vec<u8>> = regions.iter().map(|r| r.buffer.read().unwrap().clone()).collect();
        let sums: Vec<RegionChecksum> = regions
            .iter()
            .zip(&bufs)
            .map(|(r, b)| RegionChecksum {
                region_id: r.desc.region_id.clone(),
                len: b.len() as u64,
                crc: crc32(b),
            })
            .collect();
        let head = Message::SnapshotPush {
            app_id: ctx.app_id,
            epoch: ctx.epoch,
            rank: ctx.rank,
            regions: sums.clone(),
        };
        self.with_link(|l| {
            stream(&mut l.conn, &head, &sums, &bufs, self.cfg.chunk_size, u64::MAX)?;
            finish_stream(&mut l.conn, ctx.app_id, 0, ctx.rank)
        })?;
        debug!("event=snapshot_pushed app={} rank={} epoch={}", ctx.app_id, ctx.rank, ctx.epoch);
        Ok(())
    }

    fn redist(&self, ctx: &Ctx, desc: &RegionDescriptor, old: Layout, new: Layout) -> Result<Vec<u8>> {
        let req = Message::RedistReq {
            app_id: ctx.app_id,
            epoch: ctx.epoch,
            region_id: desc.region_id.clone(),
            elem_size: desc.elem_size,
            old,
            new,
            dst_rank: ctx.rank,
        };
        self.with_link(|l| {
            l.conn.send(&req)?;
            recv_chunks(&mut l.conn, |m| match m {
                Message::RedistData {
                    offset, total, data, ..
                } => Ok((offset, total, data.0)),
                other => Err(unexpected(&other)),
            })
        })
    }

    fn send_commit(&self, job: &Job) -> Result<()> {
        let ctx = self.ctx().clone();
        let mut link = self.link.lock().unwrap();
        let l = link.as_mut().ok_or(Error::Disconnected)?;
        let head = Message::CommitBegin {
            app_id: ctx.app_id,
            epoch: job.epoch,
            version: job.version,
            rank: ctx.rank,
            regions: job.sums.clone(),
        };
        let crash_at = self.faults.crash_at_byte.swap(u64::MAX, Ordering::SeqCst);
        let res = stream(&mut l.conn, &head, &job.sums, &job.staging, self.cfg.chunk_size, crash_at);
        if crash_at != u64::MAX {
            l.conn.shutdown();
            *link = None;
            let mut f = self.flow();
            f.dead = true;
            warn!(
                "event=client_crashed app={} rank={} version={} after_bytes={crash_at}",
                ctx.app_id, ctx.rank, job.version
            );
            return Err(Error::Usage("session crashed mid-commit".into()));
        }
        let res = res.and_then(|()| finish_stream(&mut l.conn, ctx.app_id, job.version, ctx.rank));
        if matches!(&res, Err(e) if e.is_transport()) {
            *link = None;
        }
        res
    }

    fn transfer(&self, job: &Job) -> Result<()> {
        let mut attempt = 0;
        loop {
            let res = if self.link.lock().unwrap().is_none() {
                Err(Error::Disconnected)
            } else {
                self.send_commit(job)
            };
            match res {
                Ok(()) => return Ok(()),
                Err(e) if self.flow().dead => return Err(e),
                Err(e) if attempt < self.cfg.retries && (e.is_transport() || e.code() == Some(ErrorCode::Integrity)) => {
                    attempt += 1;
                    info!("event=commit_retry version={} attempt={attempt} error={e}", job.version);
                    if e.is_transport() {
                        self.refresh()?;
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Sends a commit or snapshot head and its region data, stopping after
/// `limit` data bytes.
fn stream(
    conn: &mut Connection,
    head: &Message,
    sums: &[RegionChecksum],
    bufs: &[Vec<u8>],
    chunk: usize,
    limit: u64,
) -> Result<()> {
    conn.send(head)?;
    let mut sent = 0u64;
    for (s, b) in sums.iter().zip(bufs) {
        if limit == u64::MAX {
            send_chunks(conn, b, chunk, |offset, data| Message::CommitData {
                region_id: s.region_id.clone(),
                offset,
                data,
            })?;
            continue;
        }
        let room = limit.saturating_sub(sent).min(b.len() as u64) as usize;
        if room > 0 {
            send_chunks(conn, &b[..room], chunk, |offset, data| Message::CommitData {
                region_id: s.region_id.clone(),
                offset,
                data,
            })?;
        }
        sent += room as u64;
        if sent >= limit {
            break;
        }
    }
    Ok(())
}

fn finish_stream(conn: &mut Connection, app: AppId, version: u64, rank: Rank) -> Result<()> {
    conn.send(&Message::CommitEnd {
        app_id: app,
        version,
        rank,
    })?;
    match conn.recv_ok()? {
        Message::CommitAck {
            code: ErrorCode::Ok, ..
        } => Ok(()),
        Message::CommitAck { code, reason, .. } => Err(Error::remote(code, reason)),
        other => Err(unexpected(&other)),
    }
}

/// Collects chunk replies until `total` bytes arrived.
fn recv_chunks(
    conn: &mut Connection,
    mut part: impl FnMut(Message) -> Result<(u64, u64, Vec<u8>)>,
) -> Result<Vec<u8>> {
    let mut out: Option<Vec<u8>> = None;
    let mut got = 0u64;
    loop {
        let (offset, total, data) = part(conn.recv_ok()?)?;
        let buf = out.get_or_insert_with(|| vec![0u8; total as usize]);
        let end = offset
            .checked_add(data.len() as u64)
            .filter(|&e| e <= buf.len() as u64)
            .ok_or_else(|| Error::remote(ErrorCode::Protocol, format!("chunk at {offset} overruns {total} bytes")))?;
        buf[offset as usize..end as usize].copy_from_slice(&data);
        got += data.len() as u64;
        if got >= buf.len() as u64 {
            return Ok(out.unwrap_or_default());
        }
    }
}

/// Reads one entry of a restart point from its agent, or from the PFS tier
/// when no agent holds it.
fn fetch_entry(rp: &RestartPoint, rank: Rank, region: &str) -> Result<Vec<u8>> {
    if let Some(holder) = assignment_for(&rp.placement, rank) {
        let from_agent = Connection::connect_timeout(&holder.endpoint, CONNECT_TIMEOUT).and_then(|mut c| {
            c.send(&Message::RestoreReq {
                app_id: rp.app_id,
                epoch: rp.adapt_epoch,
                version: rp.version,
                rank,
                region_id: region.to_string(),
            })?;
            recv_chunks(&mut c, |m| match m {
                Message::RestoreData {
                    offset, total, data, ..
                } => Ok((offset, total, data.0)),
                other => Err(unexpected(&other)),
            })
        });
        match from_agent {
            Ok(d) => return Ok(d),
            Err(e) => debug!(
                "event=restore_agent_failed agent={} version={} error={e}",
                holder.agent_id, rp.version
            ),
        }
    }
    let pfs = PfsTier::new(&rp.pfs_root);
    match pfs.read_region(rp.app_id, rp.adapt_epoch, rp.version, rank, region)? {
        Some((bytes, _)) => Ok(bytes),
        None => Err(Error::remote(
            ErrorCode::Missing,
            format!("version {} rank {rank} region {region} is on no agent and not on PFS", rp.version),
        )),
    }
}

fn worker_loop(shared: &Shared, rx: Receiver<Job>) {
    for job in rx {
        let started = Instant::now();
        let res = shared.transfer(&job);
        let elapsed = started.elapsed().as_micros() as u64;
        shared.stats.lock().unwrap()[job.stat].t_transfer_us = elapsed;
        let mut f = shared.flow();
        f.inflight = None;
        f.free.push(job.staging);
        if let Err(e) = res {
            warn!("event=commit_failed version={} error={e}", job.version);
            if f.deferred.is_none() {
                f.deferred = Some((job.version, e));
            }
        }
        drop(f);
        shared.flow_cv.notify_all();
    }
}
