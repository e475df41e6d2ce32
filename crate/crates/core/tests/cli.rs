use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ngd::data::{Dataset, Partition};
use ngd::experiment::output::{self, CsvTable, AGGREGATE, FINAL, MANIFEST, SCHEMA_VERSION};

fn ngd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ngd")).args(args).output().expect("binary runs")
}

fn ngd_ok(args: &[&str]) -> String {
    let out = ngd(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const SMALL_RUN: &str = r#"
model = "linear"
n_total = 200
m_clients = 10
pattern = "heterogeneous"
replicates = 3
iterations = 400
record_every = 50
alpha_list = [0.005, 0.02]
base_seed = 9
topology = { kind = "circle", degree = 1 }
"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_consistent_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "model = \"linear\"\nn_total = 100\nm_clients = 4\npattern = \"heterogeneous\"\niterations = 1\ntopology = { kind = \"central_client\" }\n",
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = ngd_ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    let second = ngd_ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(first.split_whitespace().next(), second.split_whitespace().next());

    let ds = Dataset::from_text(&fs::read_to_string(a.join("dataset.txt")).unwrap()).unwrap();
    assert_eq!((ds.n_total(), ds.p()), (100, 8));
    let part = Partition::from_text(&fs::read_to_string(a.join("partition.txt")).unwrap()).unwrap();
    assert_eq!(part.m_clients(), 4);
    assert!(part.shards.iter().all(|sh| sh.len() == 25));
    let ys: Vec<f64> = part.shards.iter().flatten().map(|&i| ds.y[i]).collect();
    assert!(ys.windows(2).all(|w| w[0] <= w[1]));
    assert!(a.join("topology.txt").exists());

    let other = ngd_ok(&["gen-data", "--config", s(&cfg), "--out", s(&b), "--seed", "5"]);
    assert_ne!(first.split_whitespace().next(), other.split_whitespace().next());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    let missing = tmp.path().join("nope.toml");
    assert_eq!(ngd(&["run", "--config", s(&missing), "--out", out]).status.code(), Some(4));

    let bad = write_config(tmp.path(), "bad.toml", &SMALL_RUN.replace("m_clients = 10", "m_clients = 7"));
    assert_eq!(ngd(&["run", "--config", s(&bad), "--out", out]).status.code(), Some(2));
    let unknown = write_config(tmp.path(), "unknown.toml", &format!("{SMALL_RUN}colour = 3\n"));
    assert_eq!(ngd(&["run", "--config", s(&unknown), "--out", out]).status.code(), Some(2));
    let good = write_config(tmp.path(), "good.toml", SMALL_RUN);
    assert_eq!(ngd(&["run", "--config", s(&good), "--out", out, "--workers", "0"]).status.code(), Some(2));
    assert_eq!(ngd(&["run", "--config", s(&good)]).status.code(), Some(2));
}

#[test]
fn run_outputs_are_self_describing_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL_RUN);
    let (one, many) = (tmp.path().join("one"), tmp.path().join("many"));
    let stdout = ngd_ok(&["run", "--config", s(&cfg), "--out", s(&one)]);
    assert!(stdout.contains("circle_d1"), "{stdout}");
    ngd_ok(&["run", "--config", s(&cfg), "--out", s(&many), "--workers", "3"]);

    let files = files_under(&one);
    assert!(files.len() > 4);
    for f in &files {
        let rel = f.strip_prefix(&one).unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(many.join(rel)).unwrap(), "{}", rel.display());
        let text = fs::read_to_string(f).unwrap();
        match f.extension().and_then(|e| e.to_str()) {
            Some("csv") => assert!(
                text.starts_with(&format!("# schema_version={SCHEMA_VERSION} config_digest=")),
                "{}",
                rel.display()
            ),
            Some("json") => {
                let v: serde_json::Value = serde_json::from_str(&text).unwrap();
                assert_eq!(v["schema_version"], SCHEMA_VERSION, "{}", rel.display());
                assert!(v["config_digest"].is_string());
            }
            _ => {}
        }
    }
    assert!(one.join(MANIFEST).exists());
    let agg = fs::read_to_string(one.join(AGGREGATE)).unwrap();
    assert_eq!(output::recompute_aggregate(&one).unwrap(), agg);

    let fin = CsvTable::read(&one.join(FINAL)).unwrap();
    assert_eq!(fin.rows.len(), 6);
    let seeds: Vec<&str> = fin.rows.iter().map(|r| r[fin.column("seed").unwrap()].as_str()).collect();
    assert_eq!(seeds, ["9", "10", "11", "9", "10", "11"]);
}

#[test]
fn first_record_is_the_initial_error() {
    let tmp = tempfile::tempdir().unwrap();
    let body = SMALL_RUN.replace("replicates = 3", "replicates = 1").replace("iterations = 400", "iterations = 1");
    let cfg = write_config(tmp.path(), "c.toml", &body);
    let dir = tmp.path().join("r");
    ngd_ok(&["run", "--config", s(&cfg), "--out", s(&dir), "--record-every", "1"]);
    let t = CsvTable::read(&dir.join("trajectories").join("a0_r0.csv")).unwrap();
    let (ci, cm) = (t.column("iteration").unwrap(), t.column("mse").unwrap());
    assert_eq!(t.rows.len(), 2);
    assert_eq!(t.rows[0][ci], "0");
    // zero start, so the error is ‖θ0‖² = 15.25
    assert_eq!(t.rows[0][cm].parse::<f64>().unwrap(), 15.25);
    assert_eq!(t.rows[1][ci], "1");
}

#[test]
fn report_merges_topologies() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for (name, topo) in [
        ("circle", "{ kind = \"circle\", degree = 1 }"),
        ("central", "{ kind = \"central_client\" }"),
        ("fixed", "{ kind = \"fixed_degree\", degree = 3 }"),
    ] {
        let body = SMALL_RUN.replace("{ kind = \"circle\", degree = 1 }", topo);
        let cfg = write_config(tmp.path(), &format!("{name}.toml"), &body);
        let dir = tmp.path().join(name);
        ngd_ok(&["run", "--config", s(&cfg), "--out", s(&dir)]);
        dirs.push(dir);
    }
    let merged = tmp.path().join("merged");
    let mut args = vec!["report", "--out", s(&merged)];
    args.extend(dirs.iter().map(|d| s(d)));
    ngd_ok(&args);
    let fin = CsvTable::read(&merged.join("final_summary.csv")).unwrap();
    let ct = fin.column("topology").unwrap();
    let mut topos: Vec<&str> = fin.rows.iter().map(|r| r[ct].as_str()).collect();
    topos.dedup();
    assert_eq!(topos, ["circle_d1", "central_client", "fixed_degree_d3"]);
    assert!(merged.join("curves.csv").exists());

    // a result directory from another schema version is refused
    let m = dirs[0].join(MANIFEST);
    let text = fs::read_to_string(&m)
        .unwrap()
        .replace(&format!("\"schema_version\": \"{SCHEMA_VERSION}\""), "\"schema_version\": \"0\"");
    fs::write(&m, text).unwrap();
    assert_eq!(ngd(&["report", "--out", s(&merged), s(&dirs[0])]).status.code(), Some(2));
}

#[test]
fn diagnose_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL_RUN);
    let text = ngd_ok(&["diagnose", "--config", s(&cfg)]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v.is_object());

    let body = SMALL_RUN.replace("{ kind = \"circle\", degree = 1 }", "{ kind = \"fixed_degree\", degree = 2 }");
    let cfg = write_config(tmp.path(), "sweep.toml", &body);
    let dir = tmp.path().join("sweep");
    let stdout = ngd_ok(&["sweep-degree", "--config", s(&cfg), "--out", s(&dir), "--degrees", "1,3"]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("degree=")).count(), 2);
    let q = CsvTable::read(&dir.join("degree_quantiles.csv")).unwrap();
    assert_eq!(q.rows.len(), 2);
}
