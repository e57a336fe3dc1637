use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ctjoin::stats::CSV_HEADER;

fn ctjoin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctjoin"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn ctjoin")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("k3.txt"), "0 1\n0 2\n1 0\n1 2\n2 0\n2 1\n").unwrap();
    fs::write(d.path().join("empty.txt"), "# nothing\n").unwrap();
    fs::write(d.path().join("e.txt"), "1 2\n2 3\n3 1\n").unwrap();
    d
}

#[test]
fn run_counts_triangles_on_k3() {
    let d = workdir();
    let o = ctjoin(&["run", "--query", "cycle3", "--dataset", "k3.txt", "--count"], d.path());
    assert_eq!(stdout(&o).trim(), "6");
}

#[test]
fn run_on_empty_graph() {
    let d = workdir();
    let o = ctjoin(&["run", "--query", "path3", "--dataset", "empty.txt", "--count"], d.path());
    assert_eq!(stdout(&o).trim(), "0");
    let o = ctjoin(&["run", "--query", "path3", "--dataset", "empty.txt"], d.path());
    assert_eq!(stdout(&o), "");
}

#[test]
fn identity_query_echoes_edges() {
    let d = workdir();
    let o = ctjoin(&["run", "--query", "p(x,y) = R(x,y).", "--dataset", "e.txt"], d.path());
    assert_eq!(stdout(&o), "1\t2\n2\t3\n3\t1\n");
}

#[test]
fn every_engine_agrees_and_verifies() {
    let d = workdir();
    for engine in ["ctj", "ctj-nocache", "pairwise", "sim"] {
        let o = ctjoin(
            &["run", "--query", "path4", "--dataset", "k3.txt", "--engine", engine, "--verify", "--output", "out.tsv"],
            d.path(),
        );
        stdout(&o);
        assert_eq!(fs::read_to_string(d.path().join("out.tsv")).unwrap().lines().count(), 24, "{engine}");
    }
}

#[test]
fn relation_bindings() {
    let d = workdir();
    let o = ctjoin(
        &["run", "--query", "q(a,b,c) = A(a,b), B(b,c).", "--relation", "A=e.txt", "--relation", "B=k3.txt"],
        d.path(),
    );
    // b=3 has no out-edges in K3
    assert_eq!(stdout(&o), "1\t2\t0\n1\t2\t1\n3\t1\t0\n3\t1\t2\n");
    let o = ctjoin(&["run", "--query", "q(a,b) = A(a,b).", "--relation", "B=e.txt"], d.path());
    assert!(!o.status.success());
}

#[test]
fn simulate_reports_and_appends_stats() {
    let d = workdir();
    let stats = d.path().join("stats.csv");
    for t in ["1", "32"] {
        let o = ctjoin(
            &["simulate", "--query", "path4", "--dataset", "k3.txt", "--threads", t, "--verify", "--stats-out", "stats.csv"],
            d.path(),
        );
        let s = stdout(&o);
        assert!(s.starts_with("results=24 cycles="), "{s}");
        assert!(s.contains("verified"));
    }
    let csv = fs::read_to_string(stats).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], CSV_HEADER.join(","));
    assert!(lines[1].starts_with("path4,k3,hybrid,1,"));
    assert!(lines[2].starts_with("path4,k3,hybrid,32,"));
}

#[test]
fn simulate_deadlock_exits_nonzero() {
    let d = workdir();
    let o = ctjoin(&["simulate", "--query", "cycle3", "--dataset", "k3.txt", "--set", "queue_depth=1"], d.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("deadlock"), "{err}");
}

#[test]
fn simulate_trace_and_config_file() {
    let d = workdir();
    fs::write(d.path().join("w.conf"), "dram = 100\nl1 = 1\n").unwrap();
    fs::write(d.path().join("sim.conf"), "threads = 4\nmt = static\nenergy_weights = w.conf\n").unwrap();
    let o = ctjoin(
        &["simulate", "--query", "cycle3", "--dataset", "k3.txt", "--config", "sim.conf", "--trace", "t.txt", "--stats-out", "s.csv"],
        d.path(),
    );
    assert!(stdout(&o).contains("energy="));
    let trace = fs::read_to_string(d.path().join("t.txt")).unwrap();
    let first: Vec<&str> = trace.lines().next().unwrap().split('\t').collect();
    assert_eq!(first.len(), 3);
    assert!(trace.contains("\tEmit\t"));
    let csv = fs::read_to_string(d.path().join("s.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("cycle3,k3,static,4,"));
}

#[test]
fn compare_rows_share_the_header() {
    let d = workdir();
    let o = ctjoin(&["compare", "--query", "cycle3", "--dataset", "k3.txt", "--with-sim"], d.path());
    let out = stdout(&o);
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], CSV_HEADER.to_vec());
    let col = |name: &str| CSV_HEADER.iter().position(|h| *h == name).unwrap();
    let engines: Vec<&str> = rows[1..].iter().map(|r| r[col("engine")]).collect();
    assert_eq!(engines, ["ctj", "ctj-nocache", "pairwise", "sim"]);
    assert_eq!(rows[1][col("intermediateTuples")], "0");
    assert!(rows[1..].iter().all(|r| r[col("resultsEmitted")] == "6"));

    let o = ctjoin(&["compare", "--query", "path4", "--dataset", "empty.txt"], d.path());
    for line in stdout(&o).lines().skip(1) {
        let r: Vec<&str> = line.split(',').collect();
        for c in ["cycles", "resultsEmitted", "intermediateTuples", "memoryTouches", "lubCalls"] {
            assert_eq!(r[col(c)], "0", "{c} in {line}");
        }
    }
}

#[test]
fn repeated_runs_write_identical_rows() {
    let d = workdir();
    let args = ["simulate", "--query", "path4", "--dataset", "k3.txt", "--mt", "dynamic", "--stats-out", "s.csv"];
    stdout(&ctjoin(&args, d.path()));
    stdout(&ctjoin(&args, d.path()));
    let csv = fs::read_to_string(d.path().join("s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[1], lines[2]);
}

#[test]
fn index_dump_round_trip() {
    let d = workdir();
    let o = ctjoin(&["index", "--dataset", "e.txt", "--columns", "1,0", "--out", "e.trie", "--show"], d.path());
    let s = stdout(&o);
    assert!(s.contains("values  [1, 2, 3]"), "{s}");
    let o = ctjoin(&["index", "--load", "e.trie"], d.path());
    assert_eq!(stdout(&o), "level 0: 3 values\nlevel 1: 3 values\n");
}

#[test]
fn bad_input_fails() {
    let d = workdir();
    fs::write(d.path().join("bad.txt"), "1 2 3\n").unwrap();
    let o = ctjoin(&["run", "--query", "path3", "--dataset", "bad.txt"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    let o = ctjoin(&["run", "--query", "path3", "--dataset", "missing.txt"], d.path());
    assert_eq!(o.status.code(), Some(1));
    let o = ctjoin(&["run", "--query", "path3", "--dataset", "k3.txt", "--mt", "sideways"], d.path());
    assert_eq!(o.status.code(), Some(2));
}
