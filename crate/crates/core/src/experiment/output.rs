//! Result files. Every CSV starts with a `# schema_version=… config_digest=…`
//! line and every JSON object carries the same two fields.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diagnostics::{self, ErrorBoundReport};
use crate::error::{NgdError, Result};
use crate::rng::PRNG_ID;

use super::config::ExperimentConfig;
use super::runner::{AlphaOutcome, ReplicateOutcome};

pub const SCHEMA_VERSION: &str = "1";
pub const MANIFEST: &str = "manifest.json";
pub const AGGREGATE: &str = "aggregate.csv";
pub const FINAL: &str = "final.csv";
pub const BOUNDS: &str = "bounds.csv";
pub const SUMMARY: &str = "summary.json";
pub const TRAJECTORIES: &str = "trajectories";

pub const TRAJECTORY_COLUMNS: [&str; 5] = ["iteration", "mse", "log_mse", "discrepancy_to_global", "consensus_spread"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: String,
    pub config_digest: String,
    pub command: String,
    pub ngd_version: String,
    pub prng: String,
    pub topology: String,
    pub alphas: Vec<f64>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, command: &str, topology: String, alphas: &[f64]) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            config_digest: cfg.digest(),
            command: command.into(),
            ngd_version: env!("CARGO_PKG_VERSION").into(),
            prng: PRNG_ID.into(),
            topology,
            alphas: alphas.to_vec(),
            config: cfg.clone(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| NgdError::io(&path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| NgdError::parse(path.display().to_string(), e.to_string()))?;
        let found = value.get("schema_version").and_then(|v| v.as_str()).unwrap_or("<missing>");
        if found != SCHEMA_VERSION {
            return Err(NgdError::SchemaMismatch { path, expected: SCHEMA_VERSION.into(), found: found.into() });
        }
        serde_json::from_value(value).map_err(|e| NgdError::parse(path.display().to_string(), e.to_string()))
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NgdError::io(dir, e))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| NgdError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, &text)
}

/// Shortest representation that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub struct CsvWriter {
    buf: String,
}

impl CsvWriter {
    pub fn new(digest: &str, columns: &[&str]) -> Self {
        let mut buf = format!("# schema_version={SCHEMA_VERSION} config_digest={digest}\n");
        buf.push_str(&columns.join(","));
        buf.push('\n');
        Self { buf }
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for f in fields {
            if !first {
                self.buf.push(',');
            }
            self.buf.push_str(f.as_ref());
            first = false;
        }
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }

    pub fn write(self, path: &Path) -> Result<()> {
        write_file(path, &self.buf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub schema_version: String,
    pub config_digest: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NgdError::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let ctx = path.display().to_string();
        let mut lines = text.lines();
        let meta = lines.next().ok_or_else(|| NgdError::parse(&ctx, "empty file"))?;
        let meta = meta.strip_prefix("# ").ok_or_else(|| NgdError::parse(&ctx, "missing metadata line"))?;
        let mut schema = None;
        let mut digest = None;
        for kv in meta.split_whitespace() {
            match kv.split_once('=') {
                Some(("schema_version", v)) => schema = Some(v.to_string()),
                Some(("config_digest", v)) => digest = Some(v.to_string()),
                _ => {}
            }
        }
        let schema_version = schema.unwrap_or_else(|| "<missing>".into());
        if schema_version != SCHEMA_VERSION {
            return Err(NgdError::SchemaMismatch {
                path: path.to_path_buf(),
                expected: SCHEMA_VERSION.into(),
                found: schema_version,
            });
        }
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| NgdError::parse(&ctx, "missing header"))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        if let Some(bad) = rows.iter().position(|r| r.len() != columns.len()) {
            return Err(NgdError::parse(&ctx, format!("row {} has the wrong number of fields", bad + 1)));
        }
        Ok(Self { schema_version, config_digest: digest.unwrap_or_default(), columns, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| NgdError::parse("csv", format!("missing column {name:?}")))
    }

    pub fn f64_at(&self, row: usize, col: usize) -> Result<f64> {
        self.rows[row][col]
            .parse()
            .map_err(|_| NgdError::parse("csv", format!("not a number: {:?}", self.rows[row][col])))
    }
}

pub fn trajectory_file(dir: &Path, alpha_index: usize, replicate: usize) -> PathBuf {
    dir.join(TRAJECTORIES).join(format!("a{alpha_index}_r{replicate}.csv"))
}

fn sidecar_file(dir: &Path, alpha_index: usize, replicate: usize) -> PathBuf {
    dir.join(TRAJECTORIES).join(format!("a{alpha_index}_r{replicate}.json"))
}

pub fn trajectory_csv(digest: &str, run: &AlphaOutcome) -> String {
    let mut w = CsvWriter::new(digest, &TRAJECTORY_COLUMNS);
    for s in &run.snapshots {
        w.row([
            s.iteration.to_string(),
            num(s.mse),
            num(s.log_mse),
            num(s.discrepancy_to_global),
            num(s.consensus_spread),
        ]);
    }
    w.finish()
}

/// A replicate's value at iteration `t`: its last record at or before `t`.
/// Runs that stopped early therefore hold their final value.
fn value_at(points: &[(usize, f64)], t: usize) -> Option<f64> {
    match points.binary_search_by_key(&t, |p| p.0) {
        Ok(i) => Some(points[i].1),
        Err(0) => None,
        Err(i) => Some(points[i - 1].1),
    }
}

pub const AGGREGATE_COLUMNS: [&str; 7] = [
    "alpha",
    "iteration",
    "replicates",
    "median_log_mse",
    "median_mse",
    "median_discrepancy_to_global",
    "median_consensus_spread",
];

/// Per-iteration medians over the non-diverged replicates of one learning rate.
/// `curves[r][k]` is replicate `r`'s `(iteration, value)` list for metric `k`.
pub fn aggregate_rows(alpha: f64, curves: &[Vec<Vec<(usize, f64)>>]) -> Vec<Vec<String>> {
    let grid: BTreeSet<usize> = curves.iter().flat_map(|c| c[0].iter().map(|p| p.0)).collect();
    let mut rows = Vec::with_capacity(grid.len());
    for t in grid {
        let mut row = vec![num(alpha), t.to_string(), curves.len().to_string()];
        for k in 0..4 {
            let vals: Vec<f64> = curves.iter().filter_map(|c| value_at(&c[k], t)).collect();
            row.push(num(diagnostics::median(&vals)));
        }
        rows.push(row);
    }
    rows
}

fn metric_curves(run: &AlphaOutcome) -> Vec<Vec<(usize, f64)>> {
    let s = &run.snapshots;
    vec![
        s.iter().map(|x| (x.iteration, x.log_mse)).collect(),
        s.iter().map(|x| (x.iteration, x.mse)).collect(),
        s.iter().map(|x| (x.iteration, x.discrepancy_to_global)).collect(),
        s.iter().map(|x| (x.iteration, x.consensus_spread)).collect(),
    ]
}

pub const FINAL_COLUMNS: [&str; 12] = [
    "alpha",
    "replicate",
    "seed",
    "status",
    "final_iteration",
    "stopped_early",
    "mse",
    "log_mse",
    "discrepancy_to_global",
    "consensus_spread",
    "global_log_mse",
    "topology_hash",
];

const BOUND_FIELDS: [&str; 16] = [
    "lhs_discrepancy",
    "bound_factor",
    "hetero_factor",
    "kappa1",
    "kappa2",
    "kappa3",
    "kappa4",
    "delta0_max",
    "opt_error_at_t",
    "global_stat_error",
    "se_w",
    "sigma_max_w",
    "sigma_min_i_minus_w",
    "rho",
    "linear_bound_condition",
    "general_bound_condition",
];

fn bound_fields(b: &ErrorBoundReport) -> Vec<String> {
    vec![
        num(b.lhs_discrepancy),
        num(b.bound_factor),
        num(b.hetero_factor),
        num(b.kappa1),
        num(b.kappa2),
        num(b.kappa3),
        num(b.kappa4),
        num(b.delta0_max),
        num(b.opt_error_at_t),
        num(b.global_stat_error),
        num(b.se_w),
        num(b.sigma_max_w),
        num(b.sigma_min_i_minus_w),
        num(b.rho),
        b.linear_bound_condition.to_string(),
        b.general_bound_condition.to_string(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub replicates: usize,
    pub diverged: usize,
    /// Divergent replicates count as `+inf`.
    pub median_final_log_mse: f64,
    pub global_median_log_mse: f64,
    pub median_lhs_discrepancy: f64,
    pub median_bound_factor: f64,
    pub median_hetero_factor: f64,
    pub median_implied_constant: f64,
}

pub fn summarize(outcomes: &[ReplicateOutcome], alphas: &[f64]) -> Vec<AlphaSummary> {
    let global_median = diagnostics::median(&outcomes.iter().map(|o| o.global.log_mse).collect::<Vec<_>>());
    alphas
        .iter()
        .enumerate()
        .map(|(ai, &alpha)| {
            let runs: Vec<&AlphaOutcome> = outcomes.iter().map(|o| &o.runs[ai]).collect();
            let bounds: Vec<&ErrorBoundReport> = runs.iter().filter_map(|r| r.bound.as_ref()).collect();
            let med = |f: &dyn Fn(&ErrorBoundReport) -> f64| {
                diagnostics::median(&bounds.iter().map(|b| f(b)).collect::<Vec<_>>())
            };
            AlphaSummary {
                alpha,
                replicates: runs.len(),
                diverged: runs.iter().filter(|r| r.final_snapshot().is_none()).count(),
                median_final_log_mse: diagnostics::median(&runs.iter().map(|r| r.final_log_mse()).collect::<Vec<_>>()),
                global_median_log_mse: global_median,
                median_lhs_discrepancy: med(&|b| b.lhs_discrepancy),
                median_bound_factor: med(&|b| b.bound_factor),
                median_hetero_factor: med(&|b| b.hetero_factor),
                median_implied_constant: med(&|b| b.implied_constant()),
            }
        })
        .collect()
}

/// Writes the full result directory for one `run` invocation.
pub fn write_run(dir: &Path, manifest: &Manifest, outcomes: &[ReplicateOutcome]) -> Result<Vec<AlphaSummary>> {
    let digest = &manifest.config_digest;
    let alphas = &manifest.alphas;
    ensure_dir(&dir.join(TRAJECTORIES))?;
    write_json(&dir.join(MANIFEST), manifest)?;

    let mut agg = CsvWriter::new(digest, &AGGREGATE_COLUMNS);
    let mut fin = CsvWriter::new(digest, &FINAL_COLUMNS);
    let mut bound_cols = vec!["alpha", "replicate"];
    bound_cols.extend(BOUND_FIELDS);
    let mut bnd = CsvWriter::new(digest, &bound_cols);

    for (ai, &alpha) in alphas.iter().enumerate() {
        let mut curves = Vec::new();
        for o in outcomes {
            let run = &o.runs[ai];
            write_file(&trajectory_file(dir, ai, o.replicate), &trajectory_csv(digest, run))?;
            let sidecar = json!({
                "schema_version": SCHEMA_VERSION,
                "config_digest": digest,
                "prng": PRNG_ID,
                "config": manifest.config,
                "replicate": o.replicate,
                "seed": o.seed,
                "alpha": alpha,
                "topology": o.topology,
                "global": o.global,
                "max_stable_lr": o.max_stable_lr,
                "heterogeneity": o.heterogeneity,
                "run": run,
            });
            write_json(&sidecar_file(dir, ai, o.replicate), &sidecar)?;

            let last = run.final_snapshot();
            let field = |f: fn(&crate::engine::Snapshot) -> f64| last.map_or(f64::INFINITY, f);
            fin.row([
                num(alpha),
                o.replicate.to_string(),
                o.seed.to_string(),
                run.status.label().to_string(),
                run.final_iteration.to_string(),
                run.stopped_early.to_string(),
                num(field(|s| s.mse)),
                num(field(|s| s.log_mse)),
                num(field(|s| s.discrepancy_to_global)),
                num(field(|s| s.consensus_spread)),
                num(o.global.log_mse),
                o.topology.hash.clone(),
            ]);
            if let Some(b) = &run.bound {
                let mut row = vec![num(alpha), o.replicate.to_string()];
                row.extend(bound_fields(b));
                bnd.row(row);
            }
            if last.is_some() {
                curves.push(metric_curves(run));
            }
        }
        for row in aggregate_rows(alpha, &curves) {
            agg.row(row);
        }
    }
    agg.write(&dir.join(AGGREGATE))?;
    fin.write(&dir.join(FINAL))?;
    bnd.write(&dir.join(BOUNDS))?;

    let summary = summarize(outcomes, alphas);
    write_json(
        &dir.join(SUMMARY),
        &json!({ "schema_version": SCHEMA_VERSION, "config_digest": digest, "alphas": summary }),
    )?;
    Ok(summary)
}

/// Recomputes aggregate rows from the per-replicate trajectory files of a
/// result directory, for checking that the emitted aggregate is consistent.
pub fn recompute_aggregate(dir: &Path) -> Result<String> {
    let manifest = Manifest::read(dir)?;
    let fin = CsvTable::read(&dir.join(FINAL))?;
    let (c_alpha, c_rep, c_status) = (fin.column("alpha")?, fin.column("replicate")?, fin.column("status")?);
    let mut agg = CsvWriter::new(&manifest.config_digest, &AGGREGATE_COLUMNS);
    for (ai, &alpha) in manifest.alphas.iter().enumerate() {
        let mut curves = Vec::new();
        for (i, row) in fin.rows.iter().enumerate() {
            if fin.f64_at(i, c_alpha)? != alpha || row[c_status] != "ok" {
                continue;
            }
            let r: usize = row[c_rep].parse().map_err(|_| NgdError::parse("final.csv", "bad replicate"))?;
            let tab = CsvTable::read(&trajectory_file(dir, ai, r))?;
            let mut metric = vec![Vec::new(); 4];
            for j in 0..tab.rows.len() {
                let t: usize = tab.rows[j][0].parse().map_err(|_| NgdError::parse("trajectory", "bad iteration"))?;
                for (k, col) in [2usize, 1, 3, 4].into_iter().enumerate() {
                    metric[k].push((t, tab.f64_at(j, col)?));
                }
            }
            curves.push(metric);
        }
        for row in aggregate_rows(alpha, &curves) {
            agg.row(row);
        }
    }
    Ok(agg.finish())
}

/// Human-readable one-line-per-alpha digest of a run.
pub fn summary_lines(label: &str, summary: &[AlphaSummary]) -> String {
    let mut out = String::new();
    for s in summary {
        let _ = writeln!(
            out,
            "{label} alpha={} median_final_log_mse={:.4} global={:.4} diverged={}/{}",
            s.alpha, s.median_final_log_mse, s.global_median_log_mse, s.diverged, s.replicates
        );
    }
    out
}
