//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.
//! A numeric argument runs only that criterion.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::Ordering;
use std::sync::Barrier;
use std::time::{Duration, Instant};

use common::*;
use icheck_core::client::ClientConfig;
use icheck_core::cluster::ClusterSpec;
use icheck_core::ewma::Ewma;
use icheck_core::harness::{run_scenario, summarize, Launch, RunOptions, Scenario};
use icheck_core::model::AgentId;
use icheck_core::net::{request, Throttle};
use icheck_core::pfs::PfsTier;
use icheck_core::protocol::{decode, encode, FrameDecoder, Message, ProtocolError, HEADER_LEN};
use icheck_core::{apply_plan, block_partition, cyclic_owner, redistribution_plan, AppId, DistributionScheme, Layout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIB: u64 = 1 << 20;
const SCHEMES: [DistributionScheme; 2] = [DistributionScheme::Block, DistributionScheme::Cyclic];

fn main() {
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "round-trip fidelity", c1_round_trip),
        (2, "redistribution oracle equivalence", c2_redistribution),
        (3, "coordinated atomicity", c3_atomicity),
        (4, "async vs sync blocking", c4_async_blocking),
        (5, "snapshot isolation", c5_snapshot_isolation),
        (6, "malleability: reclaim", c6_reclaim),
        (7, "malleability: adapt", c7_adapt),
        (8, "probe-driven agent scaling", c8_probe_scaling),
        (9, "protocol round-trip", c9_protocol),
        (10, "layout laws", c10_layout_laws),
        (11, "file-tier manifest as commit point", c11_manifest),
        (12, "EWMA", c12_ewma),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let r = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}; {secs:.1}s)"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({why}; {secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1. 1000 seeded commit/restore cycles, region sizes 1 B to 16 MiB.
fn c1_round_trip() -> Outcome {
    let (_d, c) = start(ClusterSpec::default());
    let ep = c.controller_endpoint();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1c);
    let (mut cycles, mut bytes) = (0, 0u64);
    let (mut smallest, mut largest) = (u64::MAX, 0);
    for s in 0..100 {
        let sizes: Vec<u64> = if s == 0 {
            vec![1, 16 * MIB]
        } else {
            (0..rng.gen_range(1..=2)).map(|_| log_uniform(&mut rng, 1, 16 * MIB)).collect()
        };
        smallest = smallest.min(*sizes.iter().min().unwrap());
        largest = largest.max(*sizes.iter().max().unwrap());
        let regions: Vec<RegionDef> = sizes.iter().map(|&n| RegionDef::bytes(n)).collect();
        let name = format!("roundtrip-{s}");
        let mut last: Option<Vec<Vec<u8>>> = None;
        for cycle in 0..=10 {
            let (mut cli, bufs) = open(ClientConfig::new(ep.clone()), &name, 0, 1, &regions)?;
            let restored = cli.restart().map_err(err)?;
            if let Some(want) = &last {
                check(restored, || format!("session {s} cycle {cycle}: nothing restored"))?;
                check(&get(&bufs) == want, || format!("session {s} cycle {cycle}: bytes differ"))?;
            }
            if cycle == 10 {
                cli.finalize().map_err(err)?;
                break;
            }
            let data: Vec<Vec<u8>> = sizes.iter().map(|&n| random_bytes(&mut rng, n as usize)).collect();
            set(&bufs, &data);
            cli.commit().map_err(err)?;
            cli.drain().map_err(err)?;
            cli.abort();
            bytes += sizes.iter().sum::<u64>();
            cycles += 1;
            last = Some(data);
        }
    }
    check(cycles == 1000, || format!("{cycles} cycles"))?;
    Ok(format!(
        "{cycles} cycles, {} MiB, sizes {smallest} B..{} MiB, 0 mismatches",
        bytes / MIB,
        largest / MIB
    ))
}

fn scatter(global: &[u8], l: &Layout, elem: usize) -> Vec<Vec<u8>> {
    (0..l.p)
        .map(|r| {
            let n = l.owned_count(r).unwrap();
            let mut v = Vec::with_capacity(n as usize * elem);
            for local in 0..n {
                let g = l.global_index(r, local) as usize;
                v.extend_from_slice(&global[g * elem..(g + 1) * elem]);
            }
            v
        })
        .collect()
}

// 2. apply_plan against gather-then-scatter, exhaustive over the grid.
fn c2_redistribution() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    for n in [0u64, 1, 7, 64, 10000] {
        for po in 1..=8 {
            for pn in 1..=8 {
                for so in SCHEMES {
                    for sn in SCHEMES {
                        let elem = 3;
                        let old = Layout::new(n, po, so);
                        let new = Layout::new(n, pn, sn);
                        let plan = redistribution_plan(old, new).map_err(err)?;
                        plan.check_invariants().map_err(err)?;
                        let moved: u64 = plan.transfers.iter().map(|t| t.len).sum();
                        check(moved == n, || format!("N={n} {po}{so:?}->{pn}{sn:?}: plan moves {moved}"))?;
                        let global = random_bytes(&mut rng, n as usize * elem);
                        let sources = scatter(&global, &old, elem);
                        let got = apply_plan(&plan, &sources, elem).map_err(err)?;
                        check(got == scatter(&global, &new, elem), || {
                            format!("N={n} {po}{so:?}->{pn}{sn:?}: output differs from oracle")
                        })?;
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{cases} cases byte-exact, conservation holds"))
}

// 3. One of four ranks dies mid-commit at 20 random points.
fn c3_atomicity() -> Outcome {
    let (_d, c) = start(ClusterSpec::default());
    let ep = c.controller_endpoint();
    let region = RegionDef {
        global: 4 * 65536,
        elem: 8,
        scheme: DistributionScheme::Block,
    };
    let rank_bytes = region.local_bytes(0, 4) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut points = Vec::new();
    for trial in 0..20u64 {
        let victim = rng.gen_range(0..4u32);
        let kill_at = rng.gen_range(0..rank_bytes);
        points.push(kill_at);
        let name = format!("atomic-{trial}");
        let data = |v: u64, r: u32| {
            let mut g = ChaCha8Rng::seed_from_u64(trial << 16 | v << 8 | u64::from(r));
            random_bytes(&mut g, region.local_bytes(r, 4))
        };
        let barrier = Barrier::new(4);
        let results = per_rank(4, |r| -> Result<(AppId, u64, u64, bool), String> {
            let (mut cli, bufs) = open(ClientConfig::new(ep.clone()), &name, r, 4, &[region])?;
            set(&bufs, &[data(1, r)]);
            let v1 = cli.commit().map_err(err)?;
            cli.drain().map_err(err)?;
            barrier.wait();
            if r == victim {
                cli.faults().crash_after_bytes(kill_at);
            }
            set(&bufs, &[data(2, r)]);
            let v2 = cli.commit().map(Some).unwrap_or(None);
            let ok = v2.is_some() && cli.drain().is_ok();
            let app = cli.app_id().unwrap();
            cli.abort();
            Ok((app, v1, v2.unwrap_or(0), ok))
        });
        let results: Vec<_> = results.into_iter().collect::<Result<_, _>>()?;
        let (app, v1, _, _) = results[0];
        let v2 = results.iter().map(|r| r.2).max().unwrap();
        check(!results[victim as usize].3, || format!("trial {trial}: the victim's commit succeeded"))?;
        let complete: Vec<u64> = complete_versions(&c, app).iter().map(|v| v.version).collect();
        check(!complete.contains(&v2), || format!("trial {trial}: torn version {v2:#x} is COMPLETE"))?;
        check(complete.contains(&v1), || format!("trial {trial}: version {v1:#x} lost"))?;
        let restored = per_rank(4, |r| -> Result<(), String> {
            let (mut cli, bufs) = open(ClientConfig::new(ep.clone()), &name, r, 4, &[region])?;
            check(cli.restart().map_err(err)?, || "nothing restored".into())?;
            check(get(&bufs)[0] == data(1, r), || format!("rank {r} differs from the previous version"))?;
            cli.finalize().map_err(err)?;
            Ok(())
        });
        for (r, x) in restored.into_iter().enumerate() {
            x.map_err(|e| format!("trial {trial} rank {r}: {e}"))?;
        }
    }
    Ok(format!(
        "20 kill points in 0..{rank_bytes} bytes (e.g. {:?}); torn versions never COMPLETE, previous version restored",
        &points[..4]
    ))
}

fn throttled(mode: &str, throttle: u64, compute_ms: u64) -> Scenario {
    let mut s = Scenario::parse(&format!(
        r#"{{"name": "{mode}", "mode": "{mode}", "throttle": {throttle},
            "app": {{"name": "blocking", "world_size": 1, "iterations": 16, "checkpoint_interval": 1,
                     "compute_ms": {compute_ms},
                     "regions": [{{"id": "state", "count": 8388608, "elem_size": 8}}]}},
            "cluster": {{"icheck_nodes": [{{"id": "n0", "capacity": 4294967296}}]}}}}"#
    ))
    .unwrap();
    s.launch = Launch::Thread;
    s
}

fn blocking_run(s: &Scenario) -> Result<icheck_core::harness::Summary, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let r = run_scenario(s, &RunOptions::new(dir.path())).map_err(err)?;
    check(r.passed(), || format!("{} run failed: {:?}", s.name, r.failures))?;
    let sum = summarize(dir.path()).map_err(err)?;
    check(sum.commits == 16, || format!("{} commits", sum.commits))?;
    Ok(sum)
}

// 4. 16 commits of 64 MiB at 256 MiB/s with a 150 ms commit interval,
// then unthrottled.
fn c4_async_blocking() -> Outcome {
    let rate = 256 * MIB;
    let a = blocking_run(&throttled("ASYNC", rate, 150))?;
    let s = blocking_run(&throttled("SYNC", rate, 150))?;
    let ratio = a.t_blocked_us.mean / s.t_blocked_us.mean;
    let fast = blocking_run(&throttled("ASYNC", 0, 300))?;
    let copy_ratio = fast.t_blocked_us.mean / fast.t_copy_us.mean;
    let detail = format!(
        "throttled: async blocked {:.0} ms, sync blocked {:.0} ms, ratio {ratio:.3} (limit 0.6); \
         unthrottled: blocked {:.1} ms vs copy {:.1} ms, ratio {copy_ratio:.2} (limit 1.5)",
        a.t_blocked_us.mean / 1e3,
        s.t_blocked_us.mean / 1e3,
        fast.t_blocked_us.mean / 1e3,
        fast.t_copy_us.mean / 1e3
    );
    check(ratio <= 0.6 && copy_ratio <= 1.5, || detail.clone())?;
    Ok(detail)
}

// 5. Buffers mutated right after an async commit returns.
fn c5_snapshot_isolation() -> Outcome {
    let (_d, c) = start(ClusterSpec::default());
    let ep = c.controller_endpoint();
    let regions = [RegionDef::bytes(MIB), RegionDef::bytes(4099)];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = ClientConfig::new(ep.clone());
    // Slow enough that every mutation lands while the transfer is in flight.
    cfg.throttle = Throttle::with_rate(128 * MIB);
    let mut want: Option<Vec<Vec<u8>>> = None;
    let mut inflight = 0;
    for trial in 0..=100 {
        let (mut cli, bufs) = open(cfg.clone(), "isolation", 0, 1, &regions)?;
        let restored = cli.restart().map_err(err)?;
        if let Some(w) = &want {
            check(restored && &get(&bufs) == w, || format!("trial {trial}: restored bytes are not the committed ones"))?;
        }
        if trial == 100 {
            cli.finalize().map_err(err)?;
            break;
        }
        let data: Vec<Vec<u8>> = regions.iter().map(|r| random_bytes(&mut rng, r.global as usize)).collect();
        set(&bufs, &data);
        cli.commit().map_err(err)?;
        for b in &bufs {
            b.write().unwrap().iter_mut().for_each(|x| *x = !*x);
        }
        // The transfer time is filled in once the background transfer ends.
        inflight += usize::from(cli.stats().last().is_some_and(|s| s.t_transfer_us == 0));
        cli.drain().map_err(err)?;
        cli.abort();
        want = Some(data);
    }
    check(inflight > 0, || "no mutation overlapped a transfer".into())?;
    Ok(format!("100 trials, pre-mutation bytes restored, {inflight} mutations finished during transfer"))
}

/// Commits `versions` versions on `world` ranks and leaves them registered.
fn seed_versions(
    ep: &str,
    name: &str,
    world: u32,
    region: RegionDef,
    versions: u64,
) -> Result<(AppId, impl Fn(u64, u32) -> Vec<u8>), String> {
    let data = move |v: u64, r: u32| {
        let mut g = ChaCha8Rng::seed_from_u64(v << 8 | u64::from(r));
        random_bytes(&mut g, region.local_bytes(r, world))
    };
    let apps = per_rank(world, |r| -> Result<AppId, String> {
        let (mut cli, bufs) = open(ClientConfig::new(ep.to_string()), name, r, world, &[region])?;
        for v in 1..=versions {
            set(&bufs, &[data(v, r)]);
            cli.commit().map_err(err)?;
        }
        cli.drain().map_err(err)?;
        let app = cli.app_id().unwrap();
        cli.abort();
        Ok(app)
    });
    Ok((apps[0].clone()?, data))
}

/// Checks every COMPLETE version of every rank against `data`.
fn verify_complete(
    c: &icheck_core::cluster::LocalCluster,
    app: AppId,
    world: u32,
    data: &impl Fn(u64, u32) -> Vec<u8>,
) -> Result<usize, String> {
    let vs = complete_versions(c, app);
    check(!vs.is_empty(), || "no COMPLETE version".into())?;
    let mut n = 0;
    for v in &vs {
        let seq = v.version & 0xFFFF_FFFF;
        for r in 0..world {
            let mut last = Err(String::new());
            for _ in 0..3 {
                // Placement may move between the lookup and the read.
                let fresh = complete_versions(c, app).into_iter().find(|x| x.version == v.version);
                let Some(fresh) = fresh else { break };
                last = fetch(c, app, &fresh, r, "r0");
                if last.is_ok() {
                    break;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            let got = last.map_err(|e| format!("version {seq} rank {r}: {e}"))?;
            check(got == data(seq, r), || format!("version {seq} rank {r} differs"))?;
            n += 1;
        }
    }
    Ok(n)
}

fn restart_all(ep: &str, name: &str, world: u32, region: RegionDef, want: impl Fn(u32) -> Vec<u8> + Sync) -> Result<(), String> {
    for (r, x) in per_rank(world, |r| -> Result<(), String> {
        let (mut cli, bufs) = open(ClientConfig::new(ep.to_string()), name, r, world, &[region])?;
        check(cli.restart().map_err(err)?, || "nothing restored".into())?;
        check(get(&bufs)[0] == want(r), || "restored bytes differ".into())?;
        cli.finalize().map_err(err)?;
        Ok(())
    })
    .into_iter()
    .enumerate()
    {
        x.map_err(|e| format!("restart rank {r}: {e}"))?;
    }
    Ok(())
}

// 6. Reclaim with a migration target, then with none.
fn c6_reclaim() -> Outcome {
    let region = RegionDef::bytes(64 * MIB);
    let world = 4;

    let mut spec = ClusterSpec::with_nodes(&[("n0", 2 << 30), ("n1", 2 << 30)], &[]);
    spec.policy.per_agent_capacity = 16 * MIB;
    let (_d, c) = start(spec);
    let ep = c.controller_endpoint();
    let (app, data) = seed_versions(&ep, "reclaim", world, region, 3)?;
    let on_n1 = c.agents().iter().filter(|(_, n, _)| n == "n1").count();
    check(on_n1 > 0, || "no agent was placed on n1".into())?;
    let reclaim = std::thread::spawn({
        let ep = ep.clone();
        move || {
            request(
                &ep,
                &Message::NodeReclaim {
                    nodes: vec!["n1".into()],
                    deadline_ms: 20_000,
                },
            )
        }
    });
    let mut during = 0;
    while !reclaim.is_finished() {
        during += verify_complete(&c, app, world, &data)?;
    }
    let reply = reclaim.join().unwrap().map_err(err)?;
    check(matches!(reply, Message::Ok {}), || format!("reclaim answered {}", reply.name()))?;
    let left = c.agents().iter().filter(|(_, n, _)| n == "n1").count();
    check(left == 0, || format!("{left} agents still on n1"))?;
    let after = verify_complete(&c, app, world, &data)?;
    let last = complete_versions(&c, app).last().unwrap().version & 0xFFFF_FFFF;
    restart_all(&ep, "reclaim", world, region, |r| data(last, r))?;
    let migrations = c.controller().counters().migrations;

    let (_d2, c2) = start(ClusterSpec::with_nodes(&[("n0", 2 << 30)], &[]));
    let ep2 = c2.controller_endpoint();
    let (app2, data2) = seed_versions(&ep2, "evacuate", world, region, 2)?;
    let reply = request(
        &ep2,
        &Message::NodeReclaim {
            nodes: vec!["n0".into()],
            deadline_ms: 20_000,
        },
    );
    let answered = match &reply {
        Ok(m) => m.name().to_string(),
        Err(e) => e.to_string(),
    };
    check(answered.contains("degraded"), || format!("reclaim without a target answered {answered}"))?;
    check(c2.agents().is_empty(), || "agents survived the reclaim".into())?;
    let on_pfs = verify_complete(&c2, app2, world, &data2)?;
    let last2 = complete_versions(&c2, app2).last().unwrap().version & 0xFFFF_FFFF;
    // The node comes back before the job restarts.
    request(
        &ep2,
        &Message::NodeGrant {
            nodes: vec!["n0".into()],
            partial: false,
        },
    )
    .map_err(err)?;
    restart_all(&ep2, "evacuate", world, region, |r| data2(last2, r))?;
    Ok(format!(
        "{migrations} migrations, {during} entry reads during and {after} after, restart exact; \
         no target: reclaim answered {}, {on_pfs} entries served from the file tier, restart exact",
        answered
    ))
}

// 7. Expand 4 -> 8 and shrink 8 -> 4 with the data oracle.
fn c7_adapt() -> Outcome {
    let mut s = Scenario::parse(
        r#"{"name": "adapt",
            "app": {"name": "malleable", "world_size": 4, "iterations": 60, "checkpoint_interval": 10, "seed": 9,
                    "regions": [{"id": "a", "count": 100003, "elem_size": 16, "scheme": "BLOCK"},
                                {"id": "b", "count": 4099, "elem_size": 8, "scheme": "CYCLIC"}]},
            "cluster": {"icheck_nodes": [{"id": "n0", "capacity": 1073741824}, {"id": "n1", "capacity": 1073741824}]},
            "rm_script": [{"at_iteration": 20, "action": "ADAPT", "app": "malleable", "new_world_size": 8},
                          {"at_iteration": 40, "action": "ADAPT", "app": "malleable", "new_world_size": 4}]}"#,
    )
    .map_err(|e| e.join("; "))?;
    s.launch = Launch::Thread;
    let dir = tempfile::tempdir().map_err(err)?;
    let r = run_scenario(&s, &RunOptions::new(dir.path())).map_err(err)?;
    check(r.passed(), || format!("{:?}", r.failures))?;
    check(r.adapts.len() == 2 && r.final_world == 4, || format!("{:?}", r.adapts))?;
    for a in &r.adapts {
        check(a.plan_pushes > 0, || format!("{}->{}: no plan was pushed", a.from, a.to))?;
        check(a.plans_computed == 0 && a.source_map_queries == 0, || {
            format!(
                "{}->{}: {} plans computed, {} source-map queries after the notice",
                a.from, a.to, a.plans_computed, a.source_map_queries
            )
        })?;
    }
    Ok(format!(
        "4->8->4 buffers match the re-sliced oracle; plans pushed {}/{}, computed 0, source-map queries 0",
        r.adapts[0].plan_pushes, r.adapts[1].plan_pushes
    ))
}

fn agent_set(cli: &icheck_core::client::Icheck) -> Vec<AgentId> {
    let mut v: Vec<AgentId> = cli.assignments().iter().map(|a| a.agent_id).collect();
    v.sort();
    v.dedup();
    v
}

// 8. Probe grows the agent set when slow and shrinks it when fast.
fn c8_probe_scaling() -> Outcome {
    let mut spec = ClusterSpec::with_nodes(&[("n0", 2 << 30), ("n1", 2 << 30)], &[]);
    spec.agent_ingest_rate = 64 * MIB;
    let (_d, c) = start(spec);
    let ep = c.controller_endpoint();
    let region = RegionDef::bytes(16 * MIB);
    let target = c.controller().inspect(|s| s.cfg.target_rate);
    let barrier = Barrier::new(4);
    let phase = Barrier::new(2);
    let ctl = &c;
    let outcome = std::thread::scope(|s| {
        let driver = s.spawn(|| {
            phase.wait();
            ctl.controller().set_target_rate(MIB as f64);
            phase.wait();
        });
        let ranks = per_rank(4, |r| -> Result<(Vec<AgentId>, Vec<AgentId>, Vec<AgentId>, bool, bool, AppId, u64), String> {
            let (mut cli, bufs) = open(ClientConfig::new(ep.clone()), "scaling", r, 4, &[region])?;
            set(&bufs, &[vec![r as u8; region.local_bytes(r, 4)]]);
            cli.commit().map_err(err)?;
            cli.drain().map_err(err)?;
            let before = agent_set(&cli);
            barrier.wait();
            let grew = cli.probe_agents().map_err(err)?;
            barrier.wait();
            let grown = agent_set(&cli);
            let v2 = cli.commit().map_err(err)?;
            cli.drain().map_err(err)?;
            barrier.wait();
            if r == 0 {
                phase.wait();
                phase.wait();
            }
            barrier.wait();
            let shrank = cli.probe_agents().map_err(err)?;
            barrier.wait();
            let shrunk = agent_set(&cli);
            let app = cli.app_id().unwrap();
            cli.finalize().map_err(err)?;
            Ok((before, grown, shrunk, grew, shrank, app, v2))
        });
        driver.join().unwrap();
        ranks
    });
    let ranks: Vec<_> = outcome.into_iter().collect::<Result<_, _>>()?;
    let (before, grown, shrunk, _, _, _, _) = ranks[0].clone();
    check(ranks.iter().any(|x| x.3), || "no probe reported NEW_ASSIGNMENTS when slow".into())?;
    check(grown.len() == before.len() + 1, || format!("agents {} -> {}", before.len(), grown.len()))?;
    check(ranks.iter().all(|x| x.1 == grown), || "ranks disagree on the grown assignment".into())?;
    check(ranks.iter().any(|x| x.4), || "no probe reported NEW_ASSIGNMENTS when fast".into())?;
    check(shrunk.len() + 1 == grown.len(), || format!("agents {} -> {}", grown.len(), shrunk.len()))?;
    Ok(format!(
        "target {:.0} MiB/s with ingest 64 MiB/s per agent: {} -> {} agents, second version stored on the grown set; \
         target 1 MiB/s: {} -> {} agents",
        target / MIB as f64,
        before.len(),
        grown.len(),
        grown.len(),
        shrunk.len()
    ))
}

// 9. Random messages of every type, malformed frames, random re-chunking.
fn c9_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let codes = Message::CODES;
    let cases = 20_000;
    let mut stream = Vec::new();
    let mut sent = Vec::new();
    for i in 0..cases {
        let m = Message::arbitrary(codes[i % codes.len()], &mut rng).unwrap();
        let bytes = encode(&m).map_err(err)?;
        match decode(&bytes).map_err(|e| format!("{}: {e}", m.name()))? {
            Some((got, used)) if got == m && used == bytes.len() => {}
            other => return Err(format!("{} did not round-trip: {other:?}", m.name())),
        }
        // Malformed variants of the same frame.
        let mut bad = bytes.clone();
        bad[rng.gen_range(0..4)] ^= 0x5A;
        check(matches!(decode(&bad), Err(ProtocolError::BadMagic(_))), || "bad magic accepted".into())?;
        let mut bad = bytes.clone();
        bad[4] = 2;
        check(matches!(decode(&bad), Err(ProtocolError::UnknownVersion(2))), || "bad version accepted".into())?;
        let mut bad = bytes.clone();
        bad[5] = 0xEE;
        check(matches!(decode(&bad), Err(ProtocolError::UnknownMsgType(0xEE))), || "bad type accepted".into())?;
        let payload = bytes.len() - HEADER_LEN;
        if payload > 0 {
            let cut = rng.gen_range(1..=payload);
            let mut bad = bytes[..bytes.len() - cut].to_vec();
            bad[6..10].copy_from_slice(&((payload - cut) as u32).to_be_bytes());
            check(matches!(decode(&bad), Err(ProtocolError::Truncated { .. })), || {
                format!("{} cut by {cut}: {:?}", m.name(), decode(&bad))
            })?;
        }
        let mut bad = bytes.clone();
        bad.push(0);
        bad[6..10].copy_from_slice(&((payload + 1) as u32).to_be_bytes());
        check(matches!(decode(&bad), Err(ProtocolError::TrailingBytes(1))), || {
            format!("{} with a trailing byte: {:?}", m.name(), decode(&bad))
        })?;
        if i % 10 == 0 {
            stream.extend_from_slice(&bytes);
            sent.push(m);
        }
    }
    for round in 0..5 {
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        let mut pos = 0;
        while pos < stream.len() {
            let n = rng.gen_range(1..=(64 << round)).min(stream.len() - pos);
            dec.push(&stream[pos..pos + n]);
            pos += n;
            while let Some(m) = dec.next_message().map_err(err)? {
                got.push(m);
            }
        }
        check(got == sent, || format!("re-chunking round {round} changed the message sequence"))?;
    }
    Ok(format!(
        "{cases} messages over {} types round-trip; 5 malformations per frame rejected by class; \
         {} messages re-chunked 5 ways",
        codes.len(),
        sent.len()
    ))
}

// 10. Exhaustive layout laws for N <= 256, P <= 16.
fn c10_layout_laws() -> Outcome {
    let mut involutions = 0u64;
    for n in 0..=256u64 {
        let global: Vec<u8> = (0..n).map(|i| (i * 7 + 3) as u8).collect();
        for p in 1..=16u32 {
            let counts = Layout::block(n, p).counts();
            let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
            check(hi - lo <= 1, || format!("block N={n} P={p} spread {}", hi - lo))?;
            let parts = block_partition(n, p).map_err(err)?;
            let mut next = 0;
            for (r, &(start, len)) in parts.iter().enumerate() {
                check(start == next && len == counts[r], || format!("block_partition N={n} P={p} rank {r}"))?;
                next += len;
            }
            check(next == n, || format!("block_partition N={n} P={p} covers {next}"))?;
            for i in 0..n {
                check(cyclic_owner(i, p) == ((i % u64::from(p)) as u32, i / u64::from(p)), || {
                    format!("cyclic_owner({i}, {p})")
                })?;
            }
            for r in 0..p {
                let listed: Vec<u64> = (0..n).filter(|i| i % u64::from(p) == u64::from(r)).collect();
                let l = Layout::cyclic(n, p);
                let owned: Vec<u64> = (0..l.owned_count(r).unwrap()).map(|k| l.global_index(r, k)).collect();
                check(listed == owned, || format!("cyclic enumeration N={n} P={p} rank {r}"))?;
            }
            for s in SCHEMES {
                let l = Layout::new(n, p, s);
                let mut seen = vec![false; n as usize];
                for r in 0..p {
                    for k in 0..l.owned_count(r).unwrap() {
                        let g = l.global_index(r, k);
                        check(!seen[g as usize], || format!("{s:?} N={n} P={p}: {g} owned twice"))?;
                        seen[g as usize] = true;
                        check(l.owner(g) == (r, k), || format!("{s:?} N={n} P={p}: owner({g})"))?;
                    }
                }
                check(seen.iter().all(|&x| x), || format!("{s:?} N={n} P={p}: index uncovered"))?;
                let a = scatter(&global, &l, 1);
                for q in 1..=16u32 {
                    for t in SCHEMES {
                        let m = Layout::new(n, q, t);
                        let there = apply_plan(&redistribution_plan(l, m).map_err(err)?, &a, 1).map_err(err)?;
                        let back = apply_plan(&redistribution_plan(m, l).map_err(err)?, &there, 1).map_err(err)?;
                        check(back == a, || format!("N={n} {p}{s:?}->{q}{t:?}->back differs"))?;
                        involutions += 1;
                    }
                }
            }
        }
    }
    Ok(format!(
        "257 sizes x 16 rank counts: balance, partition, cyclic formula, coverage; {involutions} involutions"
    ))
}

// 11. Crash between the data files and the manifest rename.
fn c11_manifest() -> Outcome {
    let (_d, c) = start(ClusterSpec::default());
    let ep = c.controller_endpoint();
    let world = 2;
    let region = RegionDef::bytes(3 * MIB + 5);
    let (app, data) = seed_versions(&ep, "manifest", world, region, 1)?;
    let v = complete_versions(&c, app).pop().ok_or("no COMPLETE version")?;
    let pfs = PfsTier::new(c.pfs_root());
    c.controller().faults().crash_before_manifest.store(true, Ordering::SeqCst);
    let crashed = c.controller().flush_now(app, v.version, false);
    c.controller().faults().crash_before_manifest.store(false, Ordering::SeqCst);
    check(crashed.is_err(), || "flush with the injected crash reported success".into())?;
    let files = (0..world)
        .filter(|&r| pfs.region_path(app, v.adapt_epoch, v.version, r, "r0").exists())
        .count();
    check(!pfs.is_committed(app, v.adapt_epoch, v.version), || "version committed without its manifest".into())?;
    check(
        pfs.read_region(app, v.adapt_epoch, v.version, 0, "r0").map_err(err)?.is_none(),
        || "file tier served a version without a manifest".into(),
    )?;
    c.controller().flush_now(app, v.version, true).map_err(err)?;
    check(pfs.is_committed(app, v.adapt_epoch, v.version), || "manifest missing after a clean flush".into())?;
    for r in 0..world {
        let (b, _) = pfs
            .read_region(app, v.adapt_epoch, v.version, r, "r0")
            .map_err(err)?
            .ok_or("region missing after the flush")?;
        check(b == data(1, r), || format!("file tier rank {r} differs"))?;
    }
    restart_all(&ep, "manifest", world, region, |r| data(1, r))?;
    Ok(format!(
        "crash left {files}/{world} data files and no manifest, version absent; after rename restore from the file tier byte-exact"
    ))
}

// 12. EWMA formula and convex-combination bound.
fn c12_ewma() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut steps = 0;
    let mut worst = 0f64;
    for _ in 0..1000 {
        let alpha = rng.gen_range(0.001..=1.0);
        let mut e = Ewma::new(alpha).map_err(err)?;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut prev: Option<f64> = None;
        for _ in 0..rng.gen_range(1..300) {
            let x = rng.gen_range(-1e6..1e9);
            lo = lo.min(x);
            hi = hi.max(x);
            let got = e.update(x);
            let want = match prev {
                None => x,
                Some(p) => alpha * x + (1.0 - alpha) * p,
            };
            let d = (got - want).abs() / want.abs().max(1.0);
            worst = worst.max(d);
            check(d <= 1e-12, || format!("alpha {alpha}: {got} vs {want}"))?;
            check(got >= lo - 1e-6 && got <= hi + 1e-6, || format!("{got} outside [{lo}, {hi}]"))?;
            prev = Some(got);
            steps += 1;
        }
    }
    Ok(format!("{steps} updates, worst relative error {worst:.1e}, all within sample range"))
}
