//! Synthetic application rank driven one command at a time by the runner,
//! either as a thread or as a child process speaking JSON lines.

use std::io::{BufRead, Write};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::generator::{expected, fill, first_divergence, uniform_iteration};
use super::scenario::{AppSpec, ModeSpec};
use crate::client::{buffer, Buffer, ClientConfig, Icheck};
use crate::error::{Error, Result};
use crate::model::{ProcessType, Rank};
use crate::net::Throttle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum RankCommand {
    /// Registers and adds every region; initial ranks fill iteration 0.
    Open { ptype: ProcessType, world: u32 },
    Restart,
    Step { iteration: u32 },
    Drain,
    /// `iteration` is the last computed one, which joining ranks adopt.
    AdaptBegin { old: u32, new: u32, iteration: u32 },
    Redistribute,
    Throttle { bytes_per_sec: u64 },
    Finalize,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum RankReply {
    Ok,
    Opened { app_id: u64, epoch: u32 },
    Restored { iteration: Option<u32> },
    Stepped { committed: Option<u64>, changed: Option<bool> },
    /// Leaving ranks hand back their commit statistics.
    Adapting { stays: bool, epoch: u32, stats: Vec<String> },
    Finalized { stats: Vec<String> },
    Failed { error: String },
}

impl RankCommand {
    /// Whether the rank ends after answering.
    pub fn ends(&self) -> bool {
        matches!(self, RankCommand::Finalize | RankCommand::Abort)
    }
}

#[derive(Debug, Clone)]
pub struct RankParams {
    pub app: AppSpec,
    pub controller: String,
    pub rank: Rank,
    pub mode: ModeSpec,
    pub throttle: u64,
}

pub struct SyntheticRank {
    p: RankParams,
    world: u32,
    client: Icheck,
    bufs: Vec<Buffer>,
    /// Last computed iteration; buffers hold its values.
    iteration: u32,
    throttle: Throttle,
}

impl SyntheticRank {
    pub fn new(p: RankParams) -> Self {
        let throttle = Throttle::with_rate(p.throttle);
        let mut cfg = ClientConfig::new(p.controller.clone());
        cfg.sync = p.mode == ModeSpec::Sync;
        cfg.throttle = throttle.clone();
        Self {
            world: p.app.world_size,
            client: Icheck::new(cfg),
            bufs: Vec::new(),
            iteration: 0,
            throttle,
            p,
        }
    }

    pub fn handle(&mut self, cmd: RankCommand) -> RankReply {
        self.try_handle(cmd).unwrap_or_else(|e| RankReply::Failed {
            error: format!("rank {}: {e}", self.p.rank),
        })
    }

    fn try_handle(&mut self, cmd: RankCommand) -> Result<RankReply> {
        let rank = self.p.rank;
        match cmd {
            RankCommand::Open { ptype, world } => {
                self.world = world;
                self.client.init(&self.p.app.name, rank, world, ptype)?;
                for r in &self.p.app.regions {
                    let layout = r.layout(world);
                    let mut bytes = Vec::new();
                    if ptype == ProcessType::Initial {
                        fill(self.p.app.seed, 0, &layout, rank, r.elem_size, &mut bytes);
                    } else {
                        bytes.resize((layout.owned_count(rank)? * u64::from(r.elem_size)) as usize, 0);
                    }
                    let buf = buffer(bytes);
                    self.client
                        .add_adapt(&r.id, buf.clone(), layout.owned_count(rank)?, r.count, r.elem_size, r.scheme)?;
                    self.bufs.push(buf);
                }
                Ok(RankReply::Opened {
                    app_id: self.client.app_id().map(|a| a.0).unwrap_or(0),
                    epoch: self.client.adapt_epoch().unwrap_or(0),
                })
            }
            RankCommand::Restart => {
                if !self.client.restart()? {
                    return Ok(RankReply::Restored { iteration: None });
                }
                let mut at = None;
                for (r, buf) in self.p.app.regions.iter().zip(&self.bufs) {
                    let b = buf.read().unwrap();
                    let t = if b.is_empty() {
                        at.unwrap_or(0)
                    } else {
                        uniform_iteration(&b, r.elem_size).ok_or_else(|| {
                            Error::Verification(format!("rank {rank} region {}: restored elements mix iterations", r.id))
                        })?
                    };
                    if at.is_some_and(|x| x != t) {
                        return Err(Error::Verification(format!(
                            "rank {rank}: regions restored from iterations {} and {t}",
                            at.unwrap_or(0)
                        )));
                    }
                    at = Some(t);
                    self.verify(r.id.as_str(), &b, t, r)?;
                }
                self.iteration = at.unwrap_or(0);
                Ok(RankReply::Restored {
                    iteration: Some(self.iteration),
                })
            }
            RankCommand::Step { iteration } => {
                if self.p.app.compute_ms > 0 {
                    thread::sleep(Duration::from_millis(self.p.app.compute_ms));
                }
                for (r, buf) in self.p.app.regions.iter().zip(&self.bufs) {
                    let layout = r.layout(self.world);
                    fill(self.p.app.seed, iteration, &layout, rank, r.elem_size, &mut buf.write().unwrap());
                }
                self.iteration = iteration;
                let committed = if iteration % self.p.app.checkpoint_interval == 0 {
                    Some(self.client.commit()?)
                } else {
                    None
                };
                let changed = if iteration % self.p.app.probe_interval == 0 {
                    Some(self.client.probe_agents()?)
                } else {
                    None
                };
                Ok(RankReply::Stepped { committed, changed })
            }
            RankCommand::Drain => {
                self.client.drain()?;
                Ok(RankReply::Ok)
            }
            RankCommand::AdaptBegin { old, new, iteration } => {
                self.iteration = iteration;
                let stays = self.client.begin_adapt(old, new)?;
                if stays {
                    self.world = new;
                }
                let stats = if stays {
                    Vec::new()
                } else {
                    self.client.stats().iter().map(|s| s.csv_row()).collect()
                };
                Ok(RankReply::Adapting {
                    stays,
                    epoch: self.client.adapt_epoch().unwrap_or(0),
                    stats,
                })
            }
            RankCommand::Redistribute => {
                for (r, buf) in self.p.app.regions.iter().zip(&self.bufs) {
                    let layout = r.layout(self.world);
                    self.client
                        .redistribute(&r.id, buf.clone(), layout.owned_count(rank)?, r.scheme)?;
                }
                self.client.end_adapt()?;
                for (r, buf) in self.p.app.regions.iter().zip(&self.bufs) {
                    self.verify(&r.id, &buf.read().unwrap(), self.iteration, r)?;
                }
                Ok(RankReply::Ok)
            }
            RankCommand::Throttle { bytes_per_sec } => {
                self.throttle.set_rate(bytes_per_sec);
                Ok(RankReply::Ok)
            }
            RankCommand::Finalize => {
                let stats = self.client.finalize()?;
                Ok(RankReply::Finalized {
                    stats: stats.iter().map(|s| s.csv_row()).collect(),
                })
            }
            RankCommand::Abort => {
                self.client.abort();
                Ok(RankReply::Ok)
            }
        }
    }

    fn verify(&self, id: &str, got: &[u8], iteration: u32, r: &super::scenario::RegionSpec) -> Result<()> {
        let want = expected(self.p.app.seed, iteration, &r.layout(self.world), self.p.rank, r.elem_size);
        match first_divergence(got, &want) {
            None => Ok(()),
            Some(off) => Err(Error::Verification(format!(
                "rank {} region {id} iteration {iteration}: first divergence at byte {off}",
                self.p.rank
            ))),
        }
    }
}

/// Serves commands from `input` until the rank ends; used by child
/// processes.
pub fn serve_lines(p: RankParams, input: impl BufRead, mut output: impl Write) -> Result<()> {
    let mut rank = SyntheticRank::new(p);
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cmd: RankCommand =
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("bad rank command {line}: {e}")))?;
        let ends = cmd.ends();
        let reply = rank.handle(cmd);
        let leaves = matches!(reply, RankReply::Adapting { stays: false, .. });
        let text = serde_json::to_string(&reply).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(output, "{text}")?;
        output.flush()?;
        if ends || leaves {
            break;
        }
    }
    Ok(())
}
