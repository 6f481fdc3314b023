//! Scenario files: the synthetic application, the cluster it runs on and
//! the resource-manager script.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generator::MIN_ELEM_SIZE;
use crate::cluster::ClusterSpec;
use crate::layout::Layout;
use crate::model::DistributionScheme;
use crate::rm::RmScript;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub id: String,
    /// Global element count.
    pub count: u64,
    pub elem_size: u32,
    #[serde(default = "default_scheme")]
    pub scheme: DistributionScheme,
}

fn default_scheme() -> DistributionScheme {
    DistributionScheme::Block
}

impl RegionSpec {
    pub fn layout(&self, world: u32) -> Layout {
        Layout::new(self.count, world, self.scheme)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub name: String,
    pub world_size: u32,
    pub regions: Vec<RegionSpec>,
    pub iterations: u32,
    /// Commit every this many iterations.
    pub checkpoint_interval: u32,
    /// Probe for agent changes every this many iterations.
    #[serde(default = "default_probe")]
    pub probe_interval: u32,
    #[serde(default)]
    pub seed: u64,
    /// Simulated compute time per iteration.
    #[serde(default)]
    pub compute_ms: u64,
}

fn default_probe() -> u32 {
    u32::MAX
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModeSpec {
    #[default]
    Async,
    Sync,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Launch {
    /// Each rank is a child process.
    #[default]
    Process,
    /// Ranks are threads of the runner.
    Thread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub app: AppSpec,
    #[serde(default)]
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub rm_script: RmScript,
    /// Client-side transport limit in bytes per second (0 = unlimited).
    #[serde(default)]
    pub throttle: u64,
    #[serde(default)]
    pub mode: ModeSpec,
    #[serde(default)]
    pub launch: Launch,
}

impl Scenario {
    /// Parses and checks a scenario; every problem is reported.
    pub fn parse(text: &str) -> Result<Self, Vec<String>> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| vec![format!("parse error: {e}")])?;
        let errs = s.check();
        if errs.is_empty() {
            Ok(s)
        } else {
            Err(errs)
        }
    }

    pub fn load(path: &Path) -> Result<Self, Vec<String>> {
        let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
        Self::parse(&text)
    }

    /// Cross-field checks.
    pub fn check(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let a = &self.app;
        if a.name.is_empty() {
            errs.push("app.name: must not be empty".into());
        }
        if a.world_size == 0 {
            errs.push("app.world_size: must be at least 1".into());
        }
        if a.checkpoint_interval == 0 {
            errs.push("app.checkpoint_interval: must be at least 1".into());
        }
        if a.probe_interval == 0 {
            errs.push("app.probe_interval: must be at least 1".into());
        }
        if a.regions.is_empty() {
            errs.push("app.regions: at least one region is required".into());
        }
        let mut ids = BTreeSet::new();
        for (i, r) in a.regions.iter().enumerate() {
            if r.id.is_empty() {
                errs.push(format!("app.regions[{i}].id: must not be empty"));
            }
            if !ids.insert(r.id.as_str()) {
                errs.push(format!("app.regions[{i}].id: duplicate region {}", r.id));
            }
            if r.elem_size < MIN_ELEM_SIZE {
                errs.push(format!(
                    "app.regions[{i}].elem_size: must be at least {MIN_ELEM_SIZE} to carry iteration and index"
                ));
            }
            if r.count > u64::from(u32::MAX) {
                errs.push(format!("app.regions[{i}].count: at most {} elements", u32::MAX));
            }
        }
        let c = &self.cluster;
        if c.icheck_nodes.is_empty() {
            errs.push("cluster.icheck_nodes: at least one node is required".into());
        }
        let mut nodes = BTreeSet::new();
        for (field, list) in [("icheck_nodes", &c.icheck_nodes), ("spare_nodes", &c.spare_nodes)] {
            for (i, n) in list.iter().enumerate() {
                if !nodes.insert(n.id.clone()) {
                    errs.push(format!("cluster.{field}[{i}].id: duplicate node {}", n.id));
                }
                if n.capacity == 0 {
                    errs.push(format!("cluster.{field}[{i}].capacity: must be positive"));
                }
            }
        }
        if let Err(e) = c.policy.validate() {
            errs.push(format!("cluster.policy: {e}"));
        }
        errs.extend(
            self.rm_script
                .check(&nodes, std::slice::from_ref(&a.name))
                .into_iter()
                .map(|e| format!("rm_script.{e}")),
        );
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
        "name": "baseline",
        "app": {
            "name": "demo", "world_size": 4, "iterations": 100,
            "checkpoint_interval": 10, "probe_interval": 20, "seed": 7,
            "regions": [{"id": "data", "count": 4096, "elem_size": 8, "scheme": "BLOCK"}]
        },
        "cluster": {"icheck_nodes": [{"id": "n0", "capacity": 1073741824}]},
        "rm_script": [{"at_iteration": 55, "action": "KILL_APP", "app": "demo"}]
    }"#;

    #[test]
    fn well_formed_file_parses() {
        let s = Scenario::parse(GOOD).unwrap();
        assert_eq!(s.app.world_size, 4);
        assert_eq!(s.mode, ModeSpec::Async);
        assert_eq!(s.launch, Launch::Process);
        assert_eq!(s.rm_script.events.len(), 1);
    }

    #[test]
    fn unknown_node_in_script_is_named() {
        let text = GOOD.replace(
            r#"{"at_iteration": 55, "action": "KILL_APP", "app": "demo"}"#,
            r#"{"at": 1, "action": "GRANT", "nodes": ["n7"]}"#,
        );
        let errs = Scenario::parse(&text).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].contains("rm_script.events[0].nodes") && errs[0].contains("n7"), "{errs:?}");
    }

    #[test]
    fn zero_interval_rejected() {
        let text = GOOD.replace(r#""checkpoint_interval": 10"#, r#""checkpoint_interval": 0"#);
        let errs = Scenario::parse(&text).unwrap_err();
        assert!(errs.iter().any(|e| e.starts_with("app.checkpoint_interval")), "{errs:?}");
    }

    #[test]
    fn syntax_errors_carry_position() {
        let errs = Scenario::parse("{\n  \"app\": 3,\n}").unwrap_err();
        assert!(errs[0].contains("line"), "{errs:?}");
    }

    #[test]
    fn unknown_field_rejected() {
        let text = GOOD.replace(r#""seed": 7"#, r#""seed": 7, "sed": 1"#);
        assert!(Scenario::parse(&text).is_err());
    }
}
