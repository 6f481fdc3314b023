#![allow(dead_code)]

use std::time::Duration;

use icheck_core::client::{buffer, Buffer, ClientConfig, Icheck};
use icheck_core::cluster::{ClusterSpec, LocalCluster};
use icheck_core::controller::state::AppState;
use icheck_core::model::CheckpointVersion;
use icheck_core::net::Connection;
use icheck_core::pfs::PfsTier;
use icheck_core::protocol::Message;
use icheck_core::{AppId, DistributionScheme, Layout, ProcessType};
use rand::{Rng, RngCore};
use tempfile::TempDir;

pub type Outcome = Result<String, String>;

pub fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn start(spec: ClusterSpec) -> (TempDir, LocalCluster) {
    let dir = tempfile::tempdir().unwrap();
    let c = LocalCluster::start(spec, &dir.path().join("pfs")).unwrap();
    (dir, c)
}

#[derive(Debug, Clone, Copy)]
pub struct RegionDef {
    pub global: u64,
    pub elem: u32,
    pub scheme: DistributionScheme,
}

impl RegionDef {
    pub fn bytes(global: u64) -> Self {
        Self {
            global,
            elem: 1,
            scheme: DistributionScheme::Block,
        }
    }

    pub fn local_bytes(&self, rank: u32, world: u32) -> usize {
        let l = Layout::new(self.global, world, self.scheme);
        (l.owned_count(rank).unwrap() * u64::from(self.elem)) as usize
    }
}

/// Registers one rank and adds `regions` as `r0`, `r1`, ... with zeroed buffers.
pub fn open(
    cfg: ClientConfig,
    name: &str,
    rank: u32,
    world: u32,
    regions: &[RegionDef],
) -> Result<(Icheck, Vec<Buffer>), String> {
    let mut cli = Icheck::new(cfg);
    cli.init(name, rank, world, ProcessType::Initial).map_err(err)?;
    let mut bufs = Vec::new();
    for (i, r) in regions.iter().enumerate() {
        let l = Layout::new(r.global, world, r.scheme);
        let count = l.owned_count(rank).map_err(err)?;
        let b = buffer(vec![0; r.local_bytes(rank, world)]);
        cli.add_adapt(&format!("r{i}"), b.clone(), count, r.global, r.elem, r.scheme)
            .map_err(err)?;
        bufs.push(b);
    }
    Ok((cli, bufs))
}

pub fn random_bytes(rng: &mut impl RngCore, n: usize) -> Vec<u8> {
    let mut v = vec![0; n];
    rng.fill_bytes(&mut v);
    v
}

pub fn log_uniform(rng: &mut impl Rng, lo: u64, hi: u64) -> u64 {
    let x = rng.gen_range((lo as f64).ln()..=(hi as f64).ln()).exp().round() as u64;
    x.clamp(lo, hi)
}

pub fn set(bufs: &[Buffer], data: &[Vec<u8>]) {
    for (b, d) in bufs.iter().zip(data) {
        b.write().unwrap().copy_from_slice(d);
    }
}

pub fn get(bufs: &[Buffer]) -> Vec<Vec<u8>> {
    bufs.iter().map(|b| b.read().unwrap().clone()).collect()
}

/// Runs `f` once per rank on its own thread.
pub fn per_rank<T: Send>(world: u32, f: impl Fn(u32) -> T + Sync) -> Vec<T> {
    std::thread::scope(|s| {
        let hs: Vec<_> = (0..world).map(|r| { let f = &f; s.spawn(move || f(r)) }).collect();
        hs.into_iter().map(|h| h.join().expect("rank panicked")).collect()
    })
}

pub fn app_state<R>(c: &LocalCluster, app: AppId, f: impl FnOnce(&AppState) -> R) -> Option<R> {
    c.controller().inspect(|s| s.apps.get(&app).map(f))
}

pub fn complete_versions(c: &LocalCluster, app: AppId) -> Vec<CheckpointVersion> {
    app_state(c, app, |a| {
        a.record
            .versions
            .iter()
            .filter(|v| v.is_complete())
            .cloned()
            .collect()
    })
    .unwrap_or_default()
}

/// Reads one entry wherever the controller says it lives: the holding
/// agent, else the file tier.
pub fn fetch(c: &LocalCluster, app: AppId, v: &CheckpointVersion, rank: u32, region: &str) -> Result<Vec<u8>, String> {
    if let Some(agent) = v.placement.get(rank as usize).copied().flatten() {
        if let Some((_, ep)) = c.find_agent(agent) {
            return fetch_agent(&ep, app, v.adapt_epoch, v.version, rank, region);
        }
    }
    let pfs = PfsTier::new(c.pfs_root());
    match pfs.read_region(app, v.adapt_epoch, v.version, rank, region).map_err(err)? {
        Some((b, _)) => Ok(b),
        None => Err(format!("version {:#x} rank {rank} {region}: on no agent and not on PFS", v.version)),
    }
}

pub fn fetch_agent(ep: &str, app: AppId, epoch: u32, version: u64, rank: u32, region: &str) -> Result<Vec<u8>, String> {
    let mut conn = Connection::connect_timeout(ep, Duration::from_secs(5)).map_err(err)?;
    conn.send(&Message::RestoreReq {
        app_id: app,
        epoch,
        version,
        rank,
        region_id: region.into(),
    })
    .map_err(err)?;
    let mut out = Vec::new();
    let mut got = 0u64;
    loop {
        match conn.recv().map_err(err)? {
            Message::RestoreData {
                offset, total, data, ..
            } => {
                out.resize(total as usize, 0);
                let end = offset as usize + data.0.len();
                if end > out.len() {
                    return Err("chunk past end".into());
                }
                out[offset as usize..end].copy_from_slice(&data.0);
                got += data.0.len() as u64;
                if got >= total {
                    return Ok(out);
                }
            }
            Message::Error { code, reason } => return Err(format!("{code:?}: {reason}")),
            other => return Err(format!("unexpected {}", other.name())),
        }
    }
}
