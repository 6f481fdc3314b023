//! Scriptable resource manager: owns the node inventory, answers node
//! requests, and plays timed or iteration-triggered events toward the
//! controller and the running application.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgentId, AppId};
use crate::net::{request, Connection, Server};
use crate::protocol::{ErrorCode, Message};

const DEFAULT_DEADLINE_MS: u64 = 10_000;

fn default_deadline() -> u64 {
    DEFAULT_DEADLINE_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RmAction {
    Grant {
        nodes: Vec<String>,
    },
    Reclaim {
        nodes: Vec<String>,
        #[serde(default = "default_deadline")]
        deadline_ms: u64,
    },
    MigrateHint {
        from: String,
        to: String,
    },
    Adapt {
        app: String,
        new_world_size: u32,
    },
    KillApp {
        app: String,
    },
    KillAgent {
        agent: u64,
    },
    Throttle {
        bytes_per_sec: u64,
    },
}

/// One scripted event; exactly one of `at` (seconds from start) and
/// `at_iteration` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_iteration: Option<u64>,
    #[serde(flatten)]
    pub action: RmAction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RmScript {
    pub events: Vec<RmEvent>,
}

impl RmScript {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("rm script: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks the script against the inventory and the known applications.
    /// Returns every problem found, each naming the offending field.
    pub fn check(&self, nodes: &BTreeSet<String>, apps: &[String]) -> Vec<String> {
        let mut errs = Vec::new();
        let mut last_at = f64::NEG_INFINITY;
        let mut last_it = 0u64;
        for (i, e) in self.events.iter().enumerate() {
            let at = |f: &str| format!("events[{i}].{f}");
            match (e.at, e.at_iteration) {
                (Some(t), None) => {
                    if !(t.is_finite() && t >= 0.0) {
                        errs.push(format!("{}: must be a non-negative number of seconds", at("at")));
                    } else if t < last_at {
                        errs.push(format!("{}: {t} is earlier than the previous event at {last_at}", at("at")));
                    } else {
                        last_at = t;
                    }
                }
                (None, Some(it)) => {
                    if it < last_it {
                        errs.push(format!(
                            "{}: {it} is earlier than the previous event at iteration {last_it}",
                            at("at_iteration")
                        ));
                    }
                    last_it = it;
                }
                _ => errs.push(format!("events[{i}]: exactly one of at and at_iteration is required")),
            }
            let node = |field: &str, n: &str| {
                (!nodes.contains(n)).then(|| format!("{}: unknown node {n}", at(field)))
            };
            match &e.action {
                RmAction::Grant { nodes: ns } | RmAction::Reclaim { nodes: ns, .. } => {
                    if ns.is_empty() {
                        errs.push(format!("{}: no nodes listed", at("nodes")));
                    }
                    for n in ns {
                        errs.extend(node("nodes", n));
                    }
                }
                RmAction::MigrateHint { from, to } => {
                    errs.extend(node("from", from));
                    errs.extend(node("to", to));
                }
                RmAction::Adapt { app, new_world_size } => {
                    if !apps.contains(app) {
                        errs.push(format!("{}: unknown app {app}", at("app")));
                    }
                    if *new_world_size == 0 {
                        errs.push(format!("{}: must be positive", at("new_world_size")));
                    }
                }
                RmAction::KillApp { app } => {
                    if !apps.contains(app) {
                        errs.push(format!("{}: unknown app {app}", at("app")));
                    }
                }
                RmAction::KillAgent { agent } => {
                    if *agent == 0 {
                        errs.push(format!("{}: agent ids start at 1", at("agent")));
                    }
                }
                RmAction::Throttle { .. } => {}
            }
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Owner {
    Spare,
    Icheck,
}

/// Ownership of every node the resource manager knows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Inventory {
    nodes: BTreeMap<String, Owner>,
}

impl Inventory {
    pub fn new(icheck: &[String], spare: &[String]) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for (list, owner) in [(icheck, Owner::Icheck), (spare, Owner::Spare)] {
            for n in list {
                if nodes.insert(n.clone(), owner).is_some() {
                    return Err(Error::Config(format!("node {n} listed twice")));
                }
            }
        }
        Ok(Self { nodes })
    }

    pub fn owner(&self, node: &str) -> Option<Owner> {
        self.nodes.get(node).copied()
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.nodes.keys().cloned().collect()
    }

    pub fn spare(&self) -> Vec<String> {
        self.owned_by(Owner::Spare)
    }

    pub fn owned_by(&self, owner: Owner) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|(_, o)| **o == owner)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Hands up to `count` spare nodes to the checkpoint service.
    pub fn grant(&mut self, count: u32) -> Vec<String> {
        let picked: Vec<String> = self.spare().into_iter().take(count as usize).collect();
        for n in &picked {
            self.nodes.insert(n.clone(), Owner::Icheck);
        }
        picked
    }

    fn set(&mut self, node: &str, owner: Owner) {
        if let Some(o) = self.nodes.get_mut(node) {
            *o = owner;
        }
    }
}

/// Application-side effects of scripted events.
pub trait RmHooks: Send + Sync {
    /// Id and current adaptation epoch of a running application.
    fn resolve_app(&self, name: &str) -> Option<(AppId, u32)>;
    fn adapt(&self, app: &str, new_world_size: u32);
    fn kill_app(&self, app: &str);
    fn kill_agent(&self, agent: AgentId);
    fn throttle(&self, bytes_per_sec: u64);
}

/// Hooks for a resource manager running without an attached harness.
#[derive(Debug, Default)]
pub struct NoHooks;

impl RmHooks for NoHooks {
    fn resolve_app(&self, _: &str) -> Option<(AppId, u32)> {
        None
    }
    fn adapt(&self, app: &str, n: u32) {
        info!("event=adapt_signal_unrouted app={app} world={n}");
    }
    fn kill_app(&self, app: &str) {
        info!("event=kill_unrouted app={app}");
    }
    fn kill_agent(&self, agent: AgentId) {
        info!("event=kill_unrouted agent={agent}");
    }
    fn throttle(&self, rate: u64) {
        info!("event=throttle_unrouted rate={rate}");
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogEntry {
    pub t_ms: u64,
    pub event: String,
    pub outcome: String,
}

#[derive(Debug, Clone)]
pub struct RmConfig {
    pub bind: String,
    pub controller: String,
    pub icheck_nodes: Vec<String>,
    pub spare_nodes: Vec<String>,
}

struct Inner {
    controller: String,
    inventory: Mutex<Inventory>,
    log: Mutex<Vec<LogEntry>>,
    hooks: Arc<dyn RmHooks>,
    start: Instant,
    by_iteration: Mutex<Vec<(u64, RmAction)>>,
    stopped: AtomicBool,
}

pub struct ResourceManager {
    inner: Arc<Inner>,
    server: Server,
    timer: Option<JoinHandle<()>>,
}

impl ResourceManager {
    /// Validates the script, starts the node-request endpoint and the
    /// event timer.
    pub fn start(cfg: RmConfig, script: RmScript, apps: &[String], hooks: Arc<dyn RmHooks>) -> Result<Self> {
        let inventory = Inventory::new(&cfg.icheck_nodes, &cfg.spare_nodes)?;
        let errs = script.check(&inventory.names(), apps);
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        let mut timed = Vec::new();
        let mut by_iteration = Vec::new();
        for e in script.events {
            match (e.at, e.at_iteration) {
                (Some(t), _) => timed.push((t, e.action)),
                (None, Some(it)) => by_iteration.push((it, e.action)),
                (None, None) => unreachable!("checked above"),
            }
        }
        let inner = Arc::new(Inner {
            controller: cfg.controller,
            inventory: Mutex::new(inventory),
            log: Mutex::default(),
            hooks,
            start: Instant::now(),
            by_iteration: Mutex::new(by_iteration),
            stopped: AtomicBool::new(false),
        });
        let h = inner.clone();
        let server = Server::spawn(&cfg.bind, "rm", move |conn| serve(&h, conn))?;
        let t = inner.clone();
        let timer = thread::Builder::new()
            .name("rm-timer".into())
            .spawn(move || {
                for (at, action) in timed {
                    let due = t.start + Duration::from_secs_f64(at);
                    while Instant::now() < due {
                        if t.stopped.load(Ordering::SeqCst) {
                            return;
                        }
                        thread::sleep((due - Instant::now()).min(Duration::from_millis(10)));
                    }
                    t.fire(&action);
                }
            })?;
        info!("event=rm_started endpoint={}", server.endpoint());
        Ok(Self {
            inner,
            server,
            timer: Some(timer),
        })
    }

    pub fn endpoint(&self) -> String {
        self.server.endpoint()
    }

    /// Fires every iteration-triggered event due at `iteration`. Returns
    /// how many fired.
    pub fn on_iteration(&self, iteration: u64) -> usize {
        let due: Vec<RmAction> = {
            let mut q = self.inner.by_iteration.lock().unwrap();
            let n = q.iter().take_while(|(it, _)| *it <= iteration).count();
            q.drain(..n).map(|(_, a)| a).collect()
        };
        for a in &due {
            self.inner.fire(a);
        }
        due.len()
    }

    /// Iteration of the next pending iteration-triggered event.
    pub fn next_iteration_event(&self) -> Option<u64> {
        self.inner.by_iteration.lock().unwrap().first().map(|(it, _)| *it)
    }

    /// Blocks until every timed event has fired.
    pub fn wait_timed(&mut self) {
        if let Some(t) = self.timer.take() {
            let _ = t.join();
        }
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.inner.log.lock().unwrap().clone()
    }

    pub fn inventory(&self) -> Inventory {
        self.inner.inventory.lock().unwrap().clone()
    }

    pub fn stop(&mut self) {
        self.inner.stopped.store(true, Ordering::SeqCst);
        self.server.stop();
        self.wait_timed();
    }
}

impl Drop for ResourceManager {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve(inner: &Arc<Inner>, mut conn: Connection) {
    while let Ok(msg) = conn.recv() {
        let reply = match msg {
            Message::NodeRequest { count, reason } => inner.node_request(count, &reason),
            other => Message::error(ErrorCode::Protocol, format!("rm does not handle {}", other.name())),
        };
        if conn.send(&reply).is_err() {
            break;
        }
    }
}

impl Inner {
    fn record(&self, event: String, outcome: String) {
        let t_ms = self.start.elapsed().as_millis() as u64;
        info!("event=rm_event t_ms={t_ms} what=\"{event}\" outcome=\"{outcome}\"");
        self.log.lock().unwrap().push(LogEntry { t_ms, event, outcome });
    }

    fn node_request(&self, count: u32, reason: &str) -> Message {
        let granted = self.inventory.lock().unwrap().grant(count);
        let event = format!("NODE_REQUEST count={count} reason={reason}");
        if granted.is_empty() {
            self.record(event, "denied".into());
            return Message::error(ErrorCode::Rejected, "no spare nodes");
        }
        let partial = (granted.len() as u32) < count;
        self.record(event, format!("granted {granted:?} partial={partial}"));
        Message::NodeGrant {
            nodes: granted,
            partial,
        }
    }

    fn outcome(reply: Result<Message>) -> String {
        match reply {
            Ok(Message::Ok {}) => "ok".into(),
            Ok(m) => format!("reply {}", m.name()),
            Err(e) => format!("error {e}"),
        }
    }

    fn fire(&self, action: &RmAction) {
        let event = format!("{action:?}");
        let outcome = match action {
            RmAction::Grant { nodes } => {
                let mut inv = self.inventory.lock().unwrap();
                let taken: Vec<&String> = nodes.iter().filter(|n| inv.owner(n) != Some(Owner::Spare)).collect();
                if !taken.is_empty() {
                    format!("skipped: {taken:?} not spare")
                } else {
                    for n in nodes {
                        inv.set(n, Owner::Icheck);
                    }
                    drop(inv);
                    Self::outcome(request(
                        &self.controller,
                        &Message::NodeGrant {
                            nodes: nodes.clone(),
                            partial: false,
                        },
                    ))
                }
            }
            RmAction::Reclaim { nodes, deadline_ms } => {
                let reply = request(
                    &self.controller,
                    &Message::NodeReclaim {
                        nodes: nodes.clone(),
                        deadline_ms: *deadline_ms,
                    },
                );
                let mut inv = self.inventory.lock().unwrap();
                for n in nodes {
                    inv.set(n, Owner::Spare);
                }
                Self::outcome(reply)
            }
            RmAction::MigrateHint { from, to } => Self::outcome(request(
                &self.controller,
                &Message::MigrateHint {
                    from: from.clone(),
                    to: to.clone(),
                },
            )),
            RmAction::Adapt { app, new_world_size } => {
                // The controller hears first so it can prepare the new
                // agents before the application reacts.
                let notice = match self.hooks.resolve_app(app) {
                    Some((id, epoch)) => Self::outcome(request(
                        &self.controller,
                        &Message::AppAdaptNotice {
                            app_id: id,
                            new_world_size: *new_world_size,
                            epoch: epoch + 1,
                        },
                    )),
                    None => {
                        warn!("event=adapt_unresolved app={app}");
                        "app not running".into()
                    }
                };
                self.hooks.adapt(app, *new_world_size);
                format!("notice {notice}; app signalled")
            }
            RmAction::KillApp { app } => {
                self.hooks.kill_app(app);
                "app signalled".into()
            }
            RmAction::KillAgent { agent } => {
                self.hooks.kill_agent(AgentId(*agent));
                "agent signalled".into()
            }
            RmAction::Throttle { bytes_per_sec } => {
                self.hooks.throttle(*bytes_per_sec);
                "throttle set".into()
            }
        };
        self.record(event, outcome);
    }
}
