//! Lockstep supervisor: starts a loopback cluster, drives every rank one
//! iteration at a time, applies resource-manager events at iteration
//! boundaries and checks every restore and redistribution against the
//! generator.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use log::{info, warn};
use serde::Serialize;

use super::rank::{RankCommand, RankParams, RankReply, SyntheticRank};
use super::scenario::{Launch, Scenario};
use crate::client::CSV_HEADER;
use crate::cluster::LocalCluster;
use crate::controller::ControllerCounters;
use crate::error::{Error, Result};
use crate::model::{AgentId, AppId, ProcessType, Rank};
use crate::rm::RmHooks;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Executable serving the `rank` subcommand, for process launch.
    pub rank_exe: Option<PathBuf>,
    pub reply_timeout: Duration,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            rank_exe: None,
            reply_timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestoreRecord {
    /// Last iteration computed before the kill.
    pub killed_after: u32,
    /// Iteration the restored state belongs to (0 when nothing was restored).
    pub restored: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptRecord {
    pub after_iteration: u32,
    pub from: u32,
    pub to: u32,
    /// Plans agents computed themselves during the redistribution.
    pub plans_computed: u64,
    pub source_map_queries: u64,
    pub plan_pushes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub verdict: String,
    pub failures: Vec<String>,
    pub iterations_completed: u32,
    pub final_world: u32,
    pub commits: u64,
    pub restores: Vec<RestoreRecord>,
    pub adapts: Vec<AdaptRecord>,
    pub agents_killed: Vec<u64>,
    pub controller: ControllerCounters,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum HookEvent {
    Adapt(u32),
    KillApp,
    KillAgent(AgentId),
    Throttle(u64),
}

/// Queues resource-manager actions for the runner to apply between
/// iterations.
struct HarnessHooks {
    app: String,
    info: Mutex<Option<(AppId, u32)>>,
    queue: Mutex<Vec<HookEvent>>,
}

impl HarnessHooks {
    fn push(&self, app: &str, e: HookEvent) {
        if app == self.app {
            self.queue.lock().unwrap().push(e);
        } else {
            warn!("event=hook_unknown_app app={app}");
        }
    }

    fn take(&self) -> Vec<HookEvent> {
        std::mem::take(&mut self.queue.lock().unwrap())
    }
}

impl RmHooks for HarnessHooks {
    fn resolve_app(&self, name: &str) -> Option<(AppId, u32)> {
        if name == self.app {
            *self.info.lock().unwrap()
        } else {
            None
        }
    }
    fn adapt(&self, app: &str, new_world_size: u32) {
        self.push(app, HookEvent::Adapt(new_world_size));
    }
    fn kill_app(&self, app: &str) {
        self.push(app, HookEvent::KillApp);
    }
    fn kill_agent(&self, agent: AgentId) {
        self.queue.lock().unwrap().push(HookEvent::KillAgent(agent));
    }
    fn throttle(&self, bytes_per_sec: u64) {
        self.queue.lock().unwrap().push(HookEvent::Throttle(bytes_per_sec));
    }
}

enum Conn {
    Thread(Sender<RankCommand>),
    Process { child: Child, stdin: ChildStdin },
}

struct RankHandle {
    rank: Rank,
    conn: Conn,
    replies: Receiver<RankReply>,
}

impl RankHandle {
    fn thread(p: RankParams) -> Result<Self> {
        let rank = p.rank;
        let (ctx, crx) = mpsc::channel::<RankCommand>();
        let (rtx, rrx) = mpsc::channel();
        thread::Builder::new().name(format!("rank-{rank}")).spawn(move || {
            let mut r = SyntheticRank::new(p);
            for cmd in crx {
                let ends = cmd.ends();
                let reply = r.handle(cmd);
                let leaves = matches!(reply, RankReply::Adapting { stays: false, .. });
                if rtx.send(reply).is_err() || ends || leaves {
                    break;
                }
            }
        })?;
        Ok(Self {
            rank,
            conn: Conn::Thread(ctx),
            replies: rrx,
        })
    }

    fn process(exe: &Path, scenario: &Path, controller: &str, rank: Rank) -> Result<Self> {
        let mut child = Command::new(exe)
            .arg("rank")
            .arg("--scenario")
            .arg(scenario)
            .arg("--rank")
            .arg(rank.to_string())
            .arg("--controller")
            .arg(controller)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (rtx, rrx) = mpsc::channel();
        thread::Builder::new().name(format!("rank-{rank}-out")).spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                match serde_json::from_str::<RankReply>(&line) {
                    Ok(r) => {
                        if rtx.send(r).is_err() {
                            break;
                        }
                    }
                    Err(e) => warn!("event=rank_bad_reply rank={rank} line={line:?} err={e}"),
                }
            }
        })?;
        Ok(Self {
            rank,
            conn: Conn::Process { child, stdin },
            replies: rrx,
        })
    }

    fn send(&mut self, cmd: &RankCommand) -> std::result::Result<(), String> {
        let r = self.rank;
        match &mut self.conn {
            Conn::Thread(tx) => tx.send(cmd.clone()).map_err(|_| format!("rank {r} exited")),
            Conn::Process { stdin, .. } => {
                let line = serde_json::to_string(cmd).map_err(|e| e.to_string())?;
                writeln!(stdin, "{line}")
                    .and_then(|_| stdin.flush())
                    .map_err(|e| format!("rank {r} exited: {e}"))
            }
        }
    }

    fn recv(&self, timeout: Duration) -> std::result::Result<RankReply, String> {
        match self.replies.recv_timeout(timeout) {
            Ok(RankReply::Failed { error }) => Err(error),
            Ok(r) => Ok(r),
            Err(RecvTimeoutError::Timeout) => Err(format!("rank {} did not answer within {timeout:?}", self.rank)),
            Err(RecvTimeoutError::Disconnected) => Err(format!("rank {} exited unexpectedly", self.rank)),
        }
    }

    /// Ends the rank without any cleanup it could observe.
    fn kill(mut self, timeout: Duration) {
        match &mut self.conn {
            Conn::Thread(_) => {
                if self.send(&RankCommand::Abort).is_ok() {
                    let _ = self.replies.recv_timeout(timeout);
                }
            }
            Conn::Process { child, .. } => {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }

    fn reap(mut self) {
        if let Conn::Process { child, .. } = &mut self.conn {
            let _ = child.wait();
        }
    }
}

type Flow<T> = std::result::Result<T, String>;

struct Runner<'a> {
    s: &'a Scenario,
    opts: &'a RunOptions,
    scenario_path: PathBuf,
    cluster: LocalCluster,
    hooks: Arc<HarnessHooks>,
    ranks: Vec<RankHandle>,
    world: u32,
    stats: BTreeMap<Rank, Vec<String>>,
    report: RunReport,
    /// Agent plan computations and controller counters before the latest
    /// batch of events.
    baseline: (u64, ControllerCounters),
}

impl Runner<'_> {
    fn spawn(&self, rank: Rank) -> Flow<RankHandle> {
        let h = match self.s.launch {
            Launch::Thread => RankHandle::thread(RankParams {
                app: self.s.app.clone(),
                controller: self.cluster.controller_endpoint(),
                rank,
                mode: self.s.mode,
                throttle: self.s.throttle,
            }),
            Launch::Process => {
                let exe = match &self.opts.rank_exe {
                    Some(p) => p.clone(),
                    None => std::env::current_exe().map_err(|e| e.to_string())?,
                };
                RankHandle::process(&exe, &self.scenario_path, &self.cluster.controller_endpoint(), rank)
            }
        };
        h.map_err(|e| format!("spawning rank {rank}: {e}"))
    }

    /// Sends each rank its command, then collects every reply.
    fn broadcast(&mut self, cmd: impl Fn(Rank) -> RankCommand) -> Flow<Vec<RankReply>> {
        for h in &mut self.ranks {
            h.send(&cmd(h.rank))?;
        }
        let t = self.opts.reply_timeout;
        let mut out = Vec::with_capacity(self.ranks.len());
        let mut first_err = None;
        for h in &self.ranks {
            match h.recv(t) {
                Ok(r) => out.push(r),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    fn set_info(&self, replies: &[RankReply]) {
        if let Some(RankReply::Opened { app_id, epoch }) = replies.first() {
            *self.hooks.info.lock().unwrap() = Some((AppId(*app_id), *epoch));
        }
    }

    /// Starts the full world as initial ranks and restores whatever the
    /// service holds. Returns the iteration to resume after.
    fn open_world(&mut self, killed_after: Option<u32>) -> Flow<u32> {
        for r in 0..self.world {
            let h = self.spawn(r)?;
            self.ranks.push(h);
        }
        let world = self.world;
        let opened = self.broadcast(|_| RankCommand::Open {
            ptype: ProcessType::Initial,
            world,
        })?;
        self.set_info(&opened);
        let restored = self.broadcast(|_| RankCommand::Restart)?;
        let points: Vec<Option<u32>> = restored
            .iter()
            .map(|r| match r {
                RankReply::Restored { iteration } => *iteration,
                _ => None,
            })
            .collect();
        if points.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("ranks restored different versions: {points:?}"));
        }
        let t = points.first().copied().flatten().unwrap_or(0);
        if let Some(k) = killed_after {
            if t > k {
                return Err(format!("restored iteration {t} is newer than the kill point {k}"));
            }
            if t % self.s.app.checkpoint_interval != 0 {
                return Err(format!("restored iteration {t} was never committed"));
            }
            self.report.restores.push(RestoreRecord {
                killed_after: k,
                restored: t,
            });
            info!("event=restored killed_after={k} iteration={t}");
        }
        Ok(t)
    }

    fn kill_app(&mut self, done: u32) -> Flow<u32> {
        let t = self.opts.reply_timeout;
        for h in self.ranks.drain(..) {
            h.kill(t);
        }
        self.open_world(Some(done))
    }

    fn plans_computed(&self) -> u64 {
        self.cluster
            .agents()
            .into_iter()
            .filter_map(|(a, _, _)| self.cluster.agent_counters(a).ok())
            .map(|c| c.plans_computed)
            .sum()
    }

    fn adapt(&mut self, new: u32, done: u32) -> Flow<()> {
        let old = self.world;
        if new == old || new == 0 {
            info!("event=adapt_skipped world={old} requested={new}");
            return Ok(());
        }
        let (plans_before, before) = self.baseline;
        self.broadcast(|_| RankCommand::Drain)?;
        let begin = RankCommand::AdaptBegin {
            old,
            new,
            iteration: done,
        };
        for h in &mut self.ranks {
            h.send(&begin)?;
        }
        let mut joiners = Vec::new();
        for r in old..new {
            let mut h = self.spawn(r)?;
            h.send(&RankCommand::Open {
                ptype: ProcessType::Joining,
                world: new,
            })?;
            joiners.push(h);
        }
        let t = self.opts.reply_timeout;
        let mut stay = Vec::new();
        for h in std::mem::take(&mut self.ranks) {
            match h.recv(t)? {
                RankReply::Adapting { stays: true, .. } => stay.push(h),
                RankReply::Adapting {
                    stays: false, stats, ..
                } => {
                    let rank = h.rank;
                    self.stats.entry(rank).or_default().extend(stats);
                    h.reap();
                    info!("event=rank_left rank={rank}");
                }
                other => return Err(format!("rank {} answered {other:?} to adapt", h.rank)),
            }
        }
        for h in &mut joiners {
            h.recv(t)?;
            h.send(&begin)?;
        }
        for h in &joiners {
            h.recv(t)?;
        }
        stay.extend(joiners);
        stay.sort_by_key(|h| h.rank);
        self.ranks = stay;
        self.world = new;
        self.broadcast(|_| RankCommand::Redistribute)?;
        let after = self.cluster.controller().counters();
        let mut info = self.hooks.info.lock().unwrap();
        if let Some((_, epoch)) = info.as_mut() {
            *epoch += 1;
        }
        drop(info);
        self.report.adapts.push(AdaptRecord {
            after_iteration: done,
            from: old,
            to: new,
            plans_computed: self.plans_computed().saturating_sub(plans_before),
            source_map_queries: after.source_map_queries - before.source_map_queries,
            plan_pushes: after.plan_pushes - before.plan_pushes,
        });
        info!("event=adapted from={old} to={new} after_iteration={done}");
        Ok(())
    }

    fn apply_events(&mut self, done: u32) -> Flow<u32> {
        let mut done = done;
        for e in self.hooks.take() {
            match e {
                HookEvent::KillAgent(a) => {
                    let killed = self.cluster.kill_agent(a);
                    info!("event=kill_agent agent={a} found={killed}");
                    if killed {
                        self.report.agents_killed.push(a.0);
                    }
                }
                HookEvent::Throttle(rate) => {
                    self.broadcast(|_| RankCommand::Throttle { bytes_per_sec: rate })?;
                }
                HookEvent::Adapt(n) => self.adapt(n, done)?,
                HookEvent::KillApp => done = self.kill_app(done)?,
            }
        }
        Ok(done)
    }

    fn fire(&mut self, done: u32) -> Flow<u32> {
        // Adapt notices act on the service as soon as they fire, so the
        // counters are sampled first.
        if self.cluster.rm().is_some_and(|rm| rm.next_iteration_event().is_some_and(|it| it <= u64::from(done))) {
            self.baseline = (self.plans_computed(), self.cluster.controller().counters());
        }
        if let Some(rm) = self.cluster.rm() {
            rm.on_iteration(u64::from(done));
        }
        self.apply_events(done)
    }

    fn drive(&mut self) -> Flow<()> {
        let mut done = self.open_world(None)?;
        done = self.fire(done)?;
        while done < self.s.app.iterations {
            let it = done + 1;
            let replies = self.broadcast(|_| RankCommand::Step { iteration: it })?;
            if matches!(replies.first(), Some(RankReply::Stepped { committed: Some(_), .. })) {
                self.report.commits += 1;
            }
            done = it;
            self.report.iterations_completed = self.report.iterations_completed.max(done);
            done = self.fire(done)?;
        }
        let finals = self.broadcast(|_| RankCommand::Finalize)?;
        for (h, r) in self.ranks.iter().zip(finals) {
            if let RankReply::Finalized { stats } = r {
                self.stats.entry(h.rank).or_default().extend(stats);
            }
        }
        for h in self.ranks.drain(..) {
            h.reap();
        }
        Ok(())
    }
}

/// Runs a scenario to completion, writing per-rank commit statistics,
/// the event log and the verdict under `opts.out`.
pub fn run_scenario(s: &Scenario, opts: &RunOptions) -> Result<RunReport> {
    let errs = s.check();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    fs::create_dir_all(&opts.out)?;
    let scenario_path = opts.out.join("scenario.json");
    fs::write(
        &scenario_path,
        serde_json::to_string_pretty(s).map_err(|e| Error::invalid(e.to_string()))?,
    )?;
    let pfs = opts.out.join("pfs");
    if pfs.exists() {
        fs::remove_dir_all(&pfs)?;
    }
    let mut cluster = LocalCluster::start(s.cluster.clone(), &pfs)?;
    let hooks = Arc::new(HarnessHooks {
        app: s.app.name.clone(),
        info: Mutex::new(None),
        queue: Mutex::default(),
    });
    cluster.start_rm(s.rm_script.clone(), std::slice::from_ref(&s.app.name), hooks.clone())?;
    let mut r = Runner {
        s,
        opts,
        scenario_path,
        cluster,
        hooks,
        ranks: Vec::new(),
        world: s.app.world_size,
        stats: BTreeMap::new(),
        baseline: (0, ControllerCounters::default()),
        report: RunReport {
            scenario: s.name.clone(),
            verdict: String::new(),
            failures: Vec::new(),
            iterations_completed: 0,
            final_world: s.app.world_size,
            commits: 0,
            restores: Vec::new(),
            adapts: Vec::new(),
            agents_killed: Vec::new(),
            controller: ControllerCounters::default(),
        },
    };
    if let Err(f) = r.drive() {
        warn!("event=run_failed reason={f}");
        r.report.failures.push(f);
        let t = Duration::from_secs(5);
        for h in r.ranks.drain(..) {
            h.kill(t);
        }
    }
    r.report.final_world = r.world;
    r.report.controller = r.cluster.controller().counters();
    r.report.verdict = if r.report.passed() { "PASS" } else { "FAIL" }.into();
    let log = r.cluster.rm().map(|rm| rm.log()).unwrap_or_default();
    r.cluster.stop();
    write_outputs(&opts.out, &r.stats, &r.report, &log)?;
    Ok(r.report)
}

fn write_outputs(
    out: &Path,
    stats: &BTreeMap<Rank, Vec<String>>,
    report: &RunReport,
    log: &[crate::rm::LogEntry],
) -> Result<()> {
    for (rank, rows) in stats {
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        fs::write(out.join(format!("rank{rank}.csv")), text)?;
    }
    fs::write(out.join("verdict.json"), pretty(report)?)?;
    fs::write(out.join("events.json"), pretty(&log)?)?;
    Ok(())
}

fn pretty<T: Serialize + ?Sized>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::invalid(e.to_string()))
}
