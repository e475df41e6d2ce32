//! Config-driven experiment commands behind the `ngd` binary.

pub mod config;
pub mod output;
pub mod report;
pub mod runner;

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::ModelKind;
use crate::diagnostics::{self, BoundConditions, HeterogeneityStats};
use crate::engine::{self, OverparamReport, SpectralReport};
use crate::error::{NgdError, Result};
use crate::loss;
use crate::topology::{self, BalanceStats, TopologyKind};

pub use config::{default_sweep_alpha, ConnectivitySetting, ExperimentConfig, SpectralSetting, SweepConfig};
pub use output::{AlphaSummary, Manifest, SCHEMA_VERSION};
pub use runner::{run_all, run_replicate, Instance, ReplicateOutcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenDataOutput {
    pub dataset: PathBuf,
    pub partition: PathBuf,
    pub topology: PathBuf,
    /// SHA-256 of the dataset file.
    pub digest: String,
}

/// Writes the dataset, partition and graph of replicate 0.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<GenDataOutput> {
    output::ensure_dir(out)?;
    let inst_seed = cfg.replicate_seed(0);
    let dataset = crate::data::generate(cfg.model, cfg.n_total, inst_seed, cfg.p)?;
    let partition = crate::data::partition(&dataset, cfg.m_clients, cfg.pattern, inst_seed)?;
    let draw = cfg.topology.build(cfg.m_clients, inst_seed, cfg.connectivity.policy())?;
    let text = dataset.to_text();
    let paths = GenDataOutput {
        dataset: out.join("dataset.txt"),
        partition: out.join("partition.txt"),
        topology: out.join("topology.txt"),
        digest: hex::encode(Sha256::digest(text.as_bytes())),
    };
    output::write_file(&paths.dataset, &text)?;
    output::write_file(&paths.partition, &partition.to_text())?;
    output::write_file(&paths.topology, &draw.adjacency.to_edge_list())?;
    Ok(paths)
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<Vec<AlphaSummary>> {
    if cfg.alpha_list.is_empty() {
        return Err(NgdError::Config("alpha_list must contain at least one learning rate".into()));
    }
    run_into(cfg, cfg.topology, &cfg.alpha_list, "run", out, workers)
}

fn run_into(
    cfg: &ExperimentConfig,
    topology: TopologyKind,
    alphas: &[f64],
    command: &str,
    out: &Path,
    workers: usize,
) -> Result<Vec<AlphaSummary>> {
    output::ensure_dir(out)?;
    let outcomes = run_all(cfg, topology, alphas, workers)?;
    let manifest = Manifest::new(cfg, command, topology.label(), alphas);
    output::write_run(out, &manifest, &outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegreeSummary {
    pub degree: usize,
    pub alpha: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub diverged: usize,
    pub global_median_log_mse: f64,
}

pub const DEGREE_FINAL: &str = "degree_final.csv";
pub const DEGREE_QUANTILES: &str = "degree_quantiles.csv";
pub const DEGREE_QUANTILE_COLUMNS: [&str; 9] =
    ["degree", "alpha", "min", "q1", "median", "q3", "max", "diverged", "global_median_log_mse"];

fn sweep_topology(family: TopologyKind, degree: usize) -> Result<TopologyKind> {
    match family {
        TopologyKind::Circle { .. } => Ok(TopologyKind::Circle { degree }),
        TopologyKind::FixedDegree { .. } => Ok(TopologyKind::FixedDegree { degree }),
        TopologyKind::CentralClient => {
            Err(NgdError::Config("the degree sweep needs a circle or fixed_degree topology".into()))
        }
    }
}

/// Runs the experiment once per in-degree (same data per replicate across degrees)
/// and tabulates the final log-MSE distribution of each.
pub fn cmd_sweep_degree(
    cfg: &ExperimentConfig,
    degrees: Option<&[usize]>,
    out: &Path,
    workers: usize,
) -> Result<Vec<DegreeSummary>> {
    let sweep = cfg.sweep.clone();
    let degrees: Vec<usize> = match (degrees, &sweep) {
        (Some(d), _) => d.to_vec(),
        (None, Some(s)) => s.degrees.clone(),
        (None, None) => return Err(NgdError::Config("no degrees given for the sweep".into())),
    };
    if degrees.is_empty() || degrees.iter().any(|&d| d == 0 || d >= cfg.m_clients) {
        return Err(NgdError::Config(format!("degrees must lie in [1, {}]", cfg.m_clients - 1)));
    }
    let alpha = sweep.as_ref().and_then(|s| s.alpha).unwrap_or_else(|| default_sweep_alpha(cfg.model));
    output::ensure_dir(out)?;

    let mut sub_cfg = cfg.clone();
    sub_cfg.alpha_list = vec![alpha];
    let mut top_cfg = sub_cfg.clone();
    top_cfg.sweep = Some(SweepConfig { degrees: degrees.clone(), alpha: Some(alpha) });
    let digest = top_cfg.digest();

    let mut fin =
        output::CsvWriter::new(&digest, &["degree", "alpha", "replicate", "status", "final_log_mse", "global_log_mse"]);
    let mut quant = output::CsvWriter::new(&digest, &DEGREE_QUANTILE_COLUMNS);
    let mut summaries = Vec::with_capacity(degrees.len());
    for &d in &degrees {
        let topo = sweep_topology(cfg.topology, d)?;
        sub_cfg.topology = topo;
        let outcomes = run_all(&sub_cfg, topo, &[alpha], workers)?;
        let dir = out.join(format!("degree_{d}"));
        output::ensure_dir(&dir)?;
        output::write_run(&dir, &Manifest::new(&sub_cfg, "run", topo.label(), &[alpha]), &outcomes)?;

        let finals: Vec<f64> = outcomes.iter().map(|o| o.runs[0].final_log_mse()).collect();
        for o in &outcomes {
            let run = &o.runs[0];
            fin.row([
                d.to_string(),
                output::num(alpha),
                o.replicate.to_string(),
                run.status.label().to_string(),
                output::num(run.final_log_mse()),
                output::num(o.global.log_mse),
            ]);
        }
        let globals: Vec<f64> = outcomes.iter().map(|o| o.global.log_mse).collect();
        let s = DegreeSummary {
            degree: d,
            alpha,
            min: diagnostics::quantile(&finals, 0.0),
            q1: diagnostics::quantile(&finals, 0.25),
            median: diagnostics::quantile(&finals, 0.5),
            q3: diagnostics::quantile(&finals, 0.75),
            max: diagnostics::quantile(&finals, 1.0),
            diverged: outcomes.iter().filter(|o| o.runs[0].final_snapshot().is_none()).count(),
            global_median_log_mse: diagnostics::median(&globals),
        };
        quant.row([
            d.to_string(),
            output::num(alpha),
            output::num(s.min),
            output::num(s.q1),
            output::num(s.median),
            output::num(s.q3),
            output::num(s.max),
            s.diverged.to_string(),
            output::num(s.global_median_log_mse),
        ]);
        summaries.push(s);
    }
    fin.write(&out.join(DEGREE_FINAL))?;
    quant.write(&out.join(DEGREE_QUANTILES))?;
    output::write_json(
        &out.join(output::MANIFEST),
        &Manifest::new(&top_cfg, "sweep-degree", family_label(cfg.topology), &[alpha]),
    )?;
    Ok(summaries)
}

fn family_label(t: TopologyKind) -> String {
    match t {
        TopologyKind::CentralClient => "central_client".into(),
        TopologyKind::Circle { .. } => "circle".into(),
        TopologyKind::FixedDegree { .. } => "fixed_degree".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaDiagnosis {
    pub alpha: f64,
    pub spectral: Option<SpectralReport>,
    pub spectral_note: Option<String>,
    pub conditions: BoundConditions,
    pub overparam: Option<OverparamReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnosis {
    pub schema_version: String,
    pub config_digest: String,
    pub seed: u64,
    pub model: ModelKind,
    pub topology: String,
    pub topology_hash: String,
    pub strongly_connected: bool,
    pub se2_w: f64,
    pub balance: BalanceStats,
    pub max_stable_lr: f64,
    pub heterogeneity: HeterogeneityStats,
    pub global_theta: Vec<f64>,
    pub global_grad_norm: f64,
    pub shard_size: usize,
    pub p: usize,
    pub alphas: Vec<AlphaDiagnosis>,
}

/// Static analysis of replicate 0 without running NGD.
pub fn cmd_diagnose(cfg: &ExperimentConfig) -> Result<Diagnosis> {
    let seed = cfg.replicate_seed(0);
    let inst = Instance::build(cfg, cfg.topology, seed)?;
    let theta_ge = inst.global.theta.as_slice();
    let curv = inst.curvatures(cfg.model)?;
    let balance = topology::balance_stats(&inst.weights)?;
    let overparam = cfg.model == ModelKind::Linear && cfg.shard_size() < cfg.p();
    let mut alphas = cfg.alpha_list.clone();
    if alphas.is_empty() {
        alphas.push(cfg.sweep.as_ref().and_then(|s| s.alpha).unwrap_or_else(|| default_sweep_alpha(cfg.model)));
    }
    let mut per_alpha = Vec::with_capacity(alphas.len());
    for alpha in alphas {
        let (spectral, spectral_note) = match engine::contraction_spectral_radius(&curv, &inst.weights, alpha) {
            Ok(s) => (Some(s), None),
            Err(NgdError::NumericalFailure { message, best_estimate }) => {
                (None, Some(format!("{message}; best estimate {best_estimate:?}")))
            }
            Err(e) => return Err(e),
        };
        let overparam = if overparam {
            Some(engine::overparam_check(&inst.shards, inst.adjacency(), &inst.weights, alpha)?)
        } else {
            None
        };
        per_alpha.push(AlphaDiagnosis {
            alpha,
            spectral,
            spectral_note,
            conditions: diagnostics::bound_conditions(cfg.model, &inst.shards, &inst.weights, alpha, theta_ge)?,
            overparam,
        });
    }
    Ok(Diagnosis {
        schema_version: SCHEMA_VERSION.into(),
        config_digest: cfg.digest(),
        seed,
        model: cfg.model,
        topology: cfg.topology.label(),
        topology_hash: runner::topology_hash(inst.adjacency()),
        strongly_connected: inst.draw.strongly_connected,
        se2_w: balance.se2_w,
        balance,
        max_stable_lr: loss::max_stable_lr(&curv)?,
        heterogeneity: diagnostics::heterogeneity(cfg.model, &inst.shards, inst.dataset.theta0.as_slice())?,
        global_theta: theta_ge.to_vec(),
        global_grad_norm: inst.global.grad_norm_at_solution,
        shard_size: cfg.shard_size(),
        p: cfg.p(),
        alphas: per_alpha,
    })
}
