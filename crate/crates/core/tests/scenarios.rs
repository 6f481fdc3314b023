use icheck_core::harness::{run_scenario, Launch, RunOptions, Scenario};

fn scenario(world: u32, iterations: u32, script: &str) -> Scenario {
    let text = format!(
        r#"{{
        "name": "t",
        "app": {{
            "name": "demo", "world_size": {world}, "iterations": {iterations},
            "checkpoint_interval": 10, "probe_interval": 25, "seed": 11,
            "regions": [
                {{"id": "a", "count": 10000, "elem_size": 16, "scheme": "BLOCK"}},
                {{"id": "b", "count": 777, "elem_size": 8, "scheme": "CYCLIC"}}
            ]
        }},
        "cluster": {{
            "icheck_nodes": [{{"id": "n0", "capacity": 1073741824}}, {{"id": "n1", "capacity": 1073741824}}],
            "tick_ms": 20
        }},
        "rm_script": {script}
    }}"#
    );
    let mut s = Scenario::parse(&text).unwrap();
    s.launch = Launch::Thread;
    s
}

fn run(s: &Scenario) -> icheck_core::harness::RunReport {
    let dir = tempfile::tempdir().unwrap();
    let r = run_scenario(s, &RunOptions::new(dir.path())).unwrap();
    assert!(dir.path().join("verdict.json").exists());
    assert!(r.passed(), "{:?}", r.failures);
    r
}

#[test]
fn kill_at_55_restores_iteration_50() {
    let r = run(&scenario(4, 100, r#"[{"at_iteration": 55, "action": "KILL_APP", "app": "demo"}]"#));
    assert_eq!(r.restores.len(), 1);
    assert_eq!(r.restores[0].killed_after, 55);
    assert_eq!(r.restores[0].restored, 50);
    assert_eq!(r.iterations_completed, 100);
}

#[test]
fn expand_then_shrink() {
    let r = run(&scenario(
        4,
        60,
        r#"[{"at_iteration": 20, "action": "ADAPT", "app": "demo", "new_world_size": 8},
            {"at_iteration": 40, "action": "ADAPT", "app": "demo", "new_world_size": 4}]"#,
    ));
    assert_eq!(r.adapts.len(), 2);
    assert_eq!(r.final_world, 4);
    for a in &r.adapts {
        assert!(a.plan_pushes > 0, "{a:?}");
        assert_eq!(a.plans_computed, 0, "{a:?}");
        assert_eq!(a.source_map_queries, 0, "{a:?}");
    }
}

#[test]
fn zero_iterations_is_a_clean_run() {
    let r = run(&scenario(2, 0, "[]"));
    assert_eq!(r.commits, 0);
    assert!(r.restores.is_empty());
}
