use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use icheck_core::agent::{run_standalone, AgentConfig};
use icheck_core::controller::{Controller, ControllerConfig};
use icheck_core::harness::{
    run_scenario, serve_lines, summarize, Comparison, RankParams, RunOptions, Scenario,
};
use icheck_core::manager::{AgentLauncher, Manager, ManagerConfig, ProcessLauncher, ThreadLauncher};
use icheck_core::model::{AgentId, AppId};
use icheck_core::rm::{NoHooks, ResourceManager, RmConfig, RmScript};
use log::info;

#[derive(Parser)]
#[command(name = "icheck", version, about = "In-memory checkpoint service and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write metrics and a verdict.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate commit statistics of one run, or compare two runs.
    Summarize {
        dir: PathBuf,
        other: Option<PathBuf>,
    },
    /// Check a scenario file and list every problem.
    Validate { file: PathBuf },
    /// Run the controller.
    Controller {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run a node manager.
    Manager {
        #[arg(long)]
        node_id: String,
        #[arg(long)]
        controller: String,
        #[arg(long)]
        mem_capacity: u64,
        /// Run agents as threads of the manager.
        #[arg(long)]
        single_process: bool,
    },
    /// Run the resource manager stub.
    Rm {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        controller: String,
        /// Comma-separated nodes; a `:spare` suffix marks a spare node.
        #[arg(long, value_delimiter = ',')]
        nodes: Vec<String>,
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: String,
        /// Exit once every timed event has fired.
        #[arg(long)]
        once: bool,
    },
    #[command(hide = true)]
    Agent {
        #[arg(long)]
        agent_id: u64,
        #[arg(long)]
        app_id: u64,
        #[arg(long)]
        node_id: String,
        #[arg(long)]
        controller: String,
        #[arg(long)]
        pfs_root: PathBuf,
        #[arg(long)]
        mem_budget: u64,
        #[arg(long, value_delimiter = ',')]
        ranks: Vec<u32>,
    },
    #[command(hide = true)]
    Rank {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        rank: u32,
        #[arg(long)]
        controller: String,
    },
}

fn load_scenario(path: &PathBuf) -> Result<Scenario> {
    Scenario::load(path).map_err(|errs| anyhow::anyhow!("{}:\n  {}", path.display(), errs.join("\n  ")))
}

fn park() -> ! {
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

fn ready(endpoint: &str) -> Result<()> {
    let mut out = io::stdout();
    writeln!(out, "READY {endpoint}")?;
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { scenario, out } => {
            let s = load_scenario(&scenario)?;
            let mut opts = RunOptions::new(&out);
            opts.rank_exe = Some(std::env::current_exe()?);
            let report = run_scenario(&s, &opts)?;
            println!(
                "{} iterations={} commits={} restores={} adapts={}",
                report.verdict,
                report.iterations_completed,
                report.commits,
                report.restores.len(),
                report.adapts.len()
            );
            for f in &report.failures {
                println!("  {f}");
            }
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Summarize { dir, other } => {
            let a = summarize(&dir).with_context(|| format!("reading {}", dir.display()))?;
            match other {
                None => print!("{a}"),
                Some(o) => {
                    let b = summarize(&o).with_context(|| format!("reading {}", o.display()))?;
                    print!("{}", Comparison::new(a, b));
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Validate { file } => match Scenario::load(&file) {
            Ok(s) => {
                println!("ok: {} ({} ranks, {} iterations)", file.display(), s.app.world_size, s.app.iterations);
                Ok(ExitCode::SUCCESS)
            }
            Err(errs) => {
                for e in errs {
                    println!("{}: {e}", file.display());
                }
                Ok(ExitCode::FAILURE)
            }
        },
        Cmd::Controller { config, listen } => {
            let mut cfg = match config {
                Some(p) => ControllerConfig::load(&p).with_context(|| format!("loading {}", p.display()))?,
                None => ControllerConfig::default(),
            };
            if let Some(l) = listen {
                cfg.listen = l;
            }
            let c = Controller::start(cfg)?;
            ready(&c.endpoint())?;
            park()
        }
        Cmd::Manager {
            node_id,
            controller,
            mem_capacity,
            single_process,
        } => {
            let launcher: Arc<dyn AgentLauncher> = if single_process {
                Arc::new(ThreadLauncher::new(mem_capacity))
            } else {
                Arc::new(ProcessLauncher::new(std::env::current_exe()?, mem_capacity))
            };
            let m = Manager::start(ManagerConfig::new(node_id, controller, mem_capacity), launcher)?;
            ready(&m.endpoint())?;
            park()
        }
        Cmd::Rm {
            script,
            controller,
            nodes,
            bind,
            once,
        } => {
            let script = RmScript::load(&script).with_context(|| format!("loading {}", script.display()))?;
            let (mut icheck, mut spare) = (Vec::new(), Vec::new());
            for n in nodes {
                match n.strip_suffix(":spare") {
                    Some(s) => spare.push(s.to_string()),
                    None => icheck.push(n),
                }
            }
            if icheck.is_empty() && spare.is_empty() {
                bail!("--nodes must list at least one node");
            }
            let mut rm = ResourceManager::start(
                RmConfig {
                    bind,
                    controller,
                    icheck_nodes: icheck,
                    spare_nodes: spare,
                },
                script,
                &[],
                Arc::new(NoHooks),
            )?;
            ready(&rm.endpoint())?;
            rm.wait_timed();
            for e in rm.log() {
                info!("event=rm_log t_ms={} what={} outcome={}", e.t_ms, e.event, e.outcome);
            }
            if once {
                rm.stop();
                return Ok(ExitCode::SUCCESS);
            }
            park()
        }
        Cmd::Agent {
            agent_id,
            app_id,
            node_id,
            controller,
            pfs_root,
            mem_budget,
            ranks,
        } => {
            let mut cfg = AgentConfig::new(AgentId(agent_id), AppId(app_id), node_id, controller, pfs_root);
            cfg.ranks = ranks;
            run_standalone(cfg, mem_budget)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Rank {
            scenario,
            rank,
            controller,
        } => {
            let s = load_scenario(&scenario)?;
            let p = RankParams {
                app: s.app,
                controller,
                rank,
                mode: s.mode,
                throttle: s.throttle,
            };
            serve_lines(p, BufReader::new(io::stdin()), io::stdout())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
