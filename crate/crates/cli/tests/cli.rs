use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn modlib(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modlib"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("MODLIB_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn build_then_oracle_route_eval_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let b = modlib(dir.path(), &["build-library", "--mode", "mbc", "--k", "4"]);
    assert_eq!(code(&b), 0, "{}", String::from_utf8_lossy(&b.stderr));
    let r = modlib(dir.path(), &["route-eval", "--router", "oracle"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(stdout(&r).contains("oracle (upstream): 28 tasks"));
    let csv = fs::read_to_string(dir.path().join("results/route-oracle-upstream.csv")).unwrap();
    assert!(csv.starts_with("task_id,avg_log_likelihood,mse,n\n"));
    assert_eq!(csv.lines().count(), 29);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["route-eval", "--router", "arrow", "--top-k", "0"][..],
        &["no-such-command"],
        &["build-library", "--no-such-flag"],
        &["build-library", "--mode", "bogus"],
        &["experiment", "bogus"],
        &["route-eval", "--router", "oracle", "--heldout"],
    ] {
        let o = modlib(dir.path(), args);
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    // Nothing was written for rejected invocations.
    assert!(!dir.path().join("library").exists());
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "bench.no_such_key = 3\n").unwrap();
    let o = modlib(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-tasks"]);
    assert_eq!(code(&o), 1);
    fs::write(&cfg, "route.top_k = 0\n").unwrap();
    let o = modlib(dir.path(), &["--config", cfg.to_str().unwrap(), "route-eval"]);
    assert_eq!(code(&o), 1);
    fs::write(&cfg, "bench.n_clusters = four\n").unwrap();
    let o = modlib(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-tasks"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // No library has been built yet.
    let o = modlib(dir.path(), &["route-eval", "--router", "mu"]);
    assert_eq!(code(&o), 2);
    let o = modlib(dir.path(), &["inspect", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupted_library_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&modlib(dir.path(), &["build-library", "--mode", "shared"])), 0);
    let blob = dir.path().join("library/tensors/expert_0000/layer_2_b.mlib");
    let mut bytes = fs::read(&blob).unwrap();
    let i = bytes.len() - 5;
    bytes[i] ^= 0x40;
    fs::write(&blob, bytes).unwrap();
    let o = modlib(dir.path(), &["route-eval", "--router", "mu"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("content hash mismatch"));
}

#[test]
fn inspect_lists_ten_cluster_experts() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&modlib(dir.path(), &["build-library", "--mode", "mbc", "--k", "10"])),
        0
    );
    let o = modlib(dir.path(), &["inspect", dir.path().join("library").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("builder mbc  10 experts"));
    let expert_lines: Vec<&str> = text.lines().filter(|l| l.trim_start().starts_with("expert")).collect();
    assert_eq!(expert_lines.len(), 10);
    assert!(expert_lines.iter().all(|l| l.contains("provenance mbc")));
    assert_eq!(
        text.lines()
            .filter(|l| l.trim_start().starts_with("cluster ") && l.contains(": tasks"))
            .count(),
        10
    );
    assert!(text.contains("ARI vs planted"));
}

#[test]
fn flags_override_config_and_config_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# smaller benchmark\nbench.tasks_per_cluster = 4\nbuild.k = 3\nbuild.mode = mbc\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let o = modlib(dir.path(), &["--config", c, "build-library"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mbc library with 3 experts"));
    let o = modlib(dir.path(), &["--config", c, "build-library", "--k", "2"]);
    assert!(stdout(&o).contains("mbc library with 2 experts"));
    let t = modlib(dir.path(), &["inspect", dir.path().join("tasks").to_str().unwrap()]);
    assert!(stdout(&t).contains("16 tasks"));
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        assert_eq!(code(&modlib(d, &["build-library", "--mode", "mbc", "--seed", "7"])), 0);
        assert_eq!(code(&modlib(d, &["route-eval", "--router", "arrow"])), 0);
    }
    for rel in [
        "library/manifest.json",
        "base/manifest.json",
        "tasks/manifest.json",
        "results/route-arrow-upstream.csv",
    ] {
        assert_eq!(
            fs::read(a.path().join(rel)).unwrap(),
            fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&modlib(c.path(), &["build-library", "--mode", "mbc", "--seed", "8"])),
        0
    );
    assert_ne!(
        fs::read(a.path().join("library/manifest.json")).unwrap(),
        fs::read(c.path().join("library/manifest.json")).unwrap()
    );
}

#[test]
fn out_defaults_to_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_modlib"))
        .arg("gen-tasks")
        .env("MODLIB_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("tasks/manifest.json").exists());
}
