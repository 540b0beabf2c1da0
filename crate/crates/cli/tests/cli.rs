use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_optimus-desk"));
    c.env_remove("OPTIMUS_DESK_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn metrics(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_corpus(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for f in 0..3 {
        let docs: Vec<String> = (0..4).map(|d| format!("document {d} of file {f}: {}", "lorem ipsum ".repeat(d + 2))).collect();
        std::fs::write(dir.join(format!("f{f}.txt")), docs.join("\n\n")).unwrap();
    }
}

#[test]
fn preprocess_counts_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let input = t.path().join("in");
    write_corpus(&input);
    let go = |out: &str, seed: &str| {
        let o = run(&[
            "preprocess", "--input", input.to_str().unwrap(), "--context", "16", "--seed", seed, "--out",
            t.path().join(out).to_str().unwrap(), "--shard-size", "5",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_str::<Value>(&stdout(&o)).unwrap()
    };
    let a = go("a", "7");
    let b = go("b", "7");
    let c = go("c", "8");
    let bytes: usize = (0..3)
        .map(|f| std::fs::read_to_string(input.join(format!("f{f}.txt"))).unwrap())
        .map(|s| s.split("\n\n").map(|d| d.len() + 1).sum::<usize>())
        .sum();
    // Per-file token streams are cut into whole instances only.
    assert!(a["instances"].as_u64().unwrap() as usize <= bytes / 16);
    assert!(a["instances"].as_u64().unwrap() as usize >= bytes / 16 - 3);
    assert_eq!(a["crc32"], b["crc32"]);
    assert_ne!(a["crc32"], c["crc32"]);

    let o = run(&["preprocess", "--input", "/nonexistent/dir", "--context", "16", "--out", t.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error kind=config"));
}

#[test]
fn plan_reports_memory_and_params() {
    let o = run(&["plan", "--preset", "mula-7b-a1b", "--optim", "ddp"]);
    let s = stdout(&o);
    assert!(o.status.success());
    assert!(s.contains("infeasible"), "{s}");
    let o = run(&["plan", "--preset", "mula-7b-a1b", "--optim", "ddp", "--json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let total = v["memory"][0]["total"].as_f64().unwrap();
    let params = v["total_params"].as_f64().unwrap();
    assert_eq!(total, 16.0 * params);

    let o = run(&["plan", "--preset", "mula-220b-a10b", "--dp", "8", "--ep", "8", "--tp", "4", "--pp", "4", "--json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let total = v["total_params"].as_f64().unwrap();
    assert!((total / 220e9 - 1.0).abs() < 0.02, "{total}");
    let epso = v["memory"][2]["total"].as_f64().unwrap();
    let so = v["memory"][1]["total"].as_f64().unwrap();
    assert!(epso < so);

    let o = run(&["plan", "--preset", "mula-tiny"]);
    assert!(stdout(&o).contains("feasible") && !stdout(&o).contains("infeasible"));
    let o = run(&["plan", "--preset", "no-such-model"]);
    assert_eq!(o.status.code(), Some(2));
}

fn train(dir: &Path, name: &str, extra: &[&str]) -> (Output, Vec<Value>) {
    let m = dir.join(name);
    let mut args = vec!["train", "--metrics", m.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = metrics(&m);
    (o, v)
}

#[test]
fn training_is_deterministic_and_learns() {
    let t = tempfile::tempdir().unwrap();
    let (_, a) = train(t.path(), "a.jsonl", &["--steps", "30", "--seed", "3", "--csv"]);
    let (_, b) = train(t.path(), "b.jsonl", &["--steps", "30", "--seed", "3"]);
    assert_eq!(std::fs::read(t.path().join("a.jsonl")).unwrap(), std::fs::read(t.path().join("b.jsonl")).unwrap());
    assert_eq!(a.len(), 30);
    assert!(t.path().join("a.csv").exists());
    let first = a[0]["loss"].as_f64().unwrap();
    let last = a[29]["loss"].as_f64().unwrap();
    assert!(last < first - 0.5, "{first} -> {last}");
    let _ = b;
}

#[test]
fn parallel_training_tracks_serial() {
    let t = tempfile::tempdir().unwrap();
    let common = ["--steps", "4", "--set", "global_batch=8", "--set", "microbatches=2", "--optim", "so"];
    let (_, serial) = train(t.path(), "s.jsonl", &common);
    let mut args = common.to_vec();
    args.extend_from_slice(&["--dp", "2", "--ep", "2", "--pp", "2"]);
    let (_, par) = train(t.path(), "p.jsonl", &args);
    for (s, p) in serial.iter().zip(&par) {
        let (a, b) = (s["loss"].as_f64().unwrap(), p["loss"].as_f64().unwrap());
        assert!((a - b).abs() <= 1e-2 * a.abs(), "{a} vs {b}");
    }
    let (a, b) = (serial[0]["loss"].as_f64().unwrap(), par[0]["loss"].as_f64().unwrap());
    assert!((a - b).abs() <= 1e-5 * a.abs(), "first step {a} vs {b}");
}

#[test]
fn hard_kill_relaunches_from_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let f = t.path().join("failures.json");
    std::fs::write(&f, r#"[{"step": 6, "node": 1, "kind": "hard"}]"#).unwrap();
    let base = ["--steps", "8", "--dp", "2", "--set", "tiles_per_node=1", "--set", "checkpoint_every=2"];
    let mut clean = base.to_vec();
    let c1 = t.path().join("c1");
    clean.extend_from_slice(&["--checkpoint-dir", c1.to_str().unwrap()]);
    let (_, want) = train(t.path(), "clean.jsonl", &clean);

    let c2 = t.path().join("c2");
    let mut killed = base.to_vec();
    killed.extend_from_slice(&["--checkpoint-dir", c2.to_str().unwrap(), "--failures", f.to_str().unwrap(), "--set", "buffer_nodes=5"]);
    let (o, got) = train(t.path(), "killed.jsonl", &killed);
    assert!(String::from_utf8_lossy(&o.stderr).contains("\"cause\":\"hard\""));
    assert_eq!(want, got);

    let mut no_buffer = base.to_vec();
    let c3 = t.path().join("c3");
    no_buffer.extend_from_slice(&["--checkpoint-dir", c3.to_str().unwrap(), "--failures", f.to_str().unwrap()]);
    let o = run(&[&["train", "--metrics", t.path().join("x.jsonl").to_str().unwrap()], &no_buffer[..]].concat());
    assert_eq!(o.status.code(), Some(5));
    let mut no_relaunch = base.to_vec();
    let c4 = t.path().join("c4");
    no_relaunch.extend_from_slice(&["--checkpoint-dir", c4.to_str().unwrap(), "--failures", f.to_str().unwrap(), "--set", "relaunch=false"]);
    let o = run(&[&["train", "--metrics", t.path().join("y.jsonl").to_str().unwrap()], &no_relaunch[..]].concat());
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error kind=hard_failure"));
}

#[test]
fn soft_failure_exit_code() {
    let t = tempfile::tempdir().unwrap();
    let f = t.path().join("failures.json");
    std::fs::write(&f, r#"[{"step": 2, "node": 0, "kind": "soft"}]"#).unwrap();
    let o = run(&[
        "train", "--steps", "3", "--failures", f.to_str().unwrap(), "--set", "relaunch=false", "--metrics",
        t.path().join("m.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn fur_gives_equal_expert_counts() {
    let t = tempfile::tempdir().unwrap();
    let (_, m) = train(t.path(), "fur.jsonl", &["--steps", "2", "--fur", "--ep", "2"]);
    for step in &m {
        for layer in step["expert_counts"].as_array().unwrap() {
            let c: Vec<u64> = layer.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
            assert!(c.iter().all(|&x| x == c[0]), "{c:?}");
        }
    }
}

#[test]
fn trains_on_preprocessed_data() {
    let t = tempfile::tempdir().unwrap();
    let input = t.path().join("in");
    write_corpus(&input);
    let out = t.path().join("shards");
    let ctx = "8";
    assert!(run(&["preprocess", "--input", input.to_str().unwrap(), "--context", ctx, "--out", out.to_str().unwrap()])
        .status
        .success());
    let (_, m) = train(t.path(), "d.jsonl", &["--steps", "3", "--data", out.to_str().unwrap(), "--set", "context=8"]);
    assert_eq!(m.len(), 3);
    let o = run(&["train", "--steps", "1", "--data", out.to_str().unwrap(), "--set", "context=16", "--metrics", t.path().join("e.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_and_verify() {
    let o = run(&["bench", "--reps", "1", "--json"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let names: Vec<&str> = v["rows"].as_array().unwrap().iter().map(|r| r["component"].as_str().unwrap()).collect();
    assert_eq!(names, ["F+B", "Optimizer", "Training"]);
    assert!(v["epso_state_bytes_per_rank"].as_u64() < v["so_state_bytes_per_rank"].as_u64());
    assert!(v["all2all_bytes"].as_u64() <= v["allgather_bytes"].as_u64());
    let o = run(&["verify"]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("FAIL"));
}
