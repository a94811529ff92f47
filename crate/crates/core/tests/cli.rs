use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_twoscale-ocp");

fn smoke(benchmark: &str, epochs: u64, extra: &str) -> String {
    format!(
        r#"benchmark = "{benchmark}"
formulation = "optimality"
eps = 0.1
seed = 3

[network]
hidden = [8, 8]

[collocation]
interior = [6, 6]
boundary_per_side = 6

[continuation]
epochs_per_stage = {epochs}

[output]
log_every = 10
checkpoint_every = 20
grid = [20, 20]
{extra}"#
    )
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        twoscale_ocp::cli::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 13);
}

#[test]
fn unknown_benchmark_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &smoke("no-such-problem", 10, ""));
    let o = run(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("bad.toml"), "{}", stderr(&o));
}

#[test]
fn missing_config_and_bad_flags_exit_2() {
    assert_eq!(run(&["run", "--config", "/nonexistent/x.toml"]).status.code(), Some(2));
    assert_eq!(run(&["run"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn diverging_run_is_a_numeric_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &smoke("exp-boundary-layer", 200, "\n[lr]\ninitial = 1e200\n"));
    let o = run(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn run_is_reproducible_and_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &smoke("exp-boundary-layer", 40, ""));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["run", "--config", s(&cfg), "--out", s(out), "--quiet"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["history.csv", "summary.json", "timing.json", "grid_y.csv", "grid_w.csv", "collocation.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert!(a.join("checkpoint").join("manifest.txt").exists());
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "summary.json"), read(&b, "summary.json"));
    assert_eq!(read(&a, "history.csv"), read(&b, "history.csv"));
    let summary: serde_json::Value = serde_json::from_slice(&read(&a, "summary.json")).unwrap();
    assert!(summary["l1_y"].as_f64().unwrap() > 0.0);

    let o = run(&["compare", s(&a), s(&b), "--out", s(&tmp.path().join("cmp"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("max difference: 0.0000e0"), "{text}");
    assert!(text.contains("lower L1(y): tie"), "{text}");
    assert!(tmp.path().join("cmp").join("compare.csv").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &smoke("exp-boundary-layer", 10, ""));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&["run", "--config", s(&cfg), "--out", s(&a), "--quiet"]).status.code(), Some(0));
    assert_eq!(run(&["run", "--config", s(&cfg), "--out", s(&b), "--quiet", "--seed", "4"]).status.code(), Some(0));
    let read = |d: &Path| std::fs::read_to_string(d.join("summary.json")).unwrap();
    assert_ne!(read(&a), read(&b));
    assert!(read(&b).contains("\"seed\": 4"));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let short = write(tmp.path(), "short.toml", &smoke("exp-boundary-layer", 20, ""));
    let full = write(tmp.path(), "full.toml", &smoke("exp-boundary-layer", 50, ""));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&["run", "--config", s(&full), "--out", s(&a), "--quiet"]).status.code(), Some(0));
    assert_eq!(run(&["run", "--config", s(&short), "--out", s(&b), "--quiet"]).status.code(), Some(0));
    let o = run(&["run", "--config", s(&full), "--out", s(&b), "--quiet", "--resume"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "summary.json"), read(&b, "summary.json"));
    assert_eq!(read(&a, "history.csv"), read(&b, "history.csv"));
    assert_eq!(read(&a, "grid_y.csv"), read(&b, "grid_y.csv"));
}

#[test]
fn resume_without_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &smoke("exp-boundary-layer", 20, ""));
    let o = run(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("none")), "--resume"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn no_closed_form_and_no_reference_omits_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &smoke("parabolic-layers", 10, ""));
    let out = tmp.path().join("out");
    let o = run(&["run", "--config", s(&cfg), "--out", s(&out), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for k in ["l1_y", "l1_p", "l1_u"] {
        assert!(summary.get(k).is_none(), "{k} in {summary}");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let row = history.lines().nth(1).unwrap();
    assert!(row.contains(",,"), "{row}");
}

#[test]
fn reference_file_enables_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &smoke("parabolic-layers", 10, ""));
    let grid = twoscale_ocp::metrics_io::EvalGrid::new(twoscale_ocp::problems::RectDomain::unit_square(), 11, 11).unwrap();
    let reference = tmp.path().join("ref.csv");
    twoscale_ocp::metrics_io::export_grid(|_| 0.0, &grid, &reference).unwrap();
    let out = tmp.path().join("out");
    let o = run(&["run", "--config", s(&cfg), "--out", s(&out), "--quiet", "--reference", s(&reference)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["l1_y"].as_f64().unwrap() > 0.0);

    let bad = write(tmp.path(), "bad.csv", "x1,x2,value\n0,0,1\n0,1,oops\n");
    let o = run(&["run", "--config", s(&cfg), "--out", s(&out), "--quiet", "--reference", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.csv"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &smoke("interior-layer", 10, ""));
    let o = run(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    let o = run(&["gradcheck", "--config", s(&cfg), "--corrupt-gradient"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn compare_reports_missing_history() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["compare", s(&tmp.path().join("x")), s(&tmp.path().join("y"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("history.csv"), "{}", stderr(&o));
}

#[test]
fn sample_dump_writes_collocation_points() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &smoke("exp-boundary-layer", 10, ""));
    let out = tmp.path().join("dump");
    let o = run(&["sample-dump", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("collocation.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 36 + 24);
}
