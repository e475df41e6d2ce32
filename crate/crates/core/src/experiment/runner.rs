//! One replicate: data, partition, graph, reference fit, then NGD for every
//! learning rate on that same draw.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, ModelKind, Partition};
use crate::diagnostics::{self, ErrorBoundReport, HeterogeneityStats};
use crate::engine::{self, RunConfig, Snapshot, SpectralReport, Trajectory};
use crate::error::{NgdError, Result};
use crate::linalg::{PowerIterationOptions, SpectralMethod};
use crate::loss::{self, Shard};
use crate::topology::{self, AdjacencyMatrix, FixedDegreeDraw, TopologyKind, WeightMatrix};

use super::config::{ExperimentConfig, SpectralSetting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSummary {
    pub theta: Vec<f64>,
    pub mse: f64,
    pub log_mse: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyInfo {
    pub label: String,
    /// SHA-256 of the edge-list text.
    pub hash: String,
    pub attempts: u32,
    pub seed_used: u64,
    pub strongly_connected: bool,
    pub se2_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged { iteration: Option<usize>, message: String },
}

impl RunStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Diverged { .. } => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaOutcome {
    pub alpha: f64,
    pub status: RunStatus,
    pub final_iteration: usize,
    pub stopped_early: bool,
    pub last_change: f64,
    #[serde(skip)]
    pub snapshots: Vec<Snapshot>,
    pub spectral: Option<SpectralReport>,
    pub bound: Option<ErrorBoundReport>,
}

impl AlphaOutcome {
    pub fn final_snapshot(&self) -> Option<&Snapshot> {
        match self.status {
            RunStatus::Ok => self.snapshots.last(),
            RunStatus::Diverged { .. } => None,
        }
    }

    /// Final log-MSE, with divergence counted as `+inf`.
    pub fn final_log_mse(&self) -> f64 {
        self.final_snapshot().map_or(f64::INFINITY, |s| s.log_mse)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub seed: u64,
    pub global: GlobalSummary,
    pub topology: TopologyInfo,
    pub max_stable_lr: f64,
    pub heterogeneity: HeterogeneityStats,
    pub runs: Vec<AlphaOutcome>,
}

/// Everything a replicate needs before NGD starts.
pub struct Instance {
    pub dataset: Dataset,
    pub partition: Partition,
    pub shards: Vec<Shard>,
    pub draw: FixedDegreeDraw,
    pub weights: WeightMatrix,
    pub global: loss::GlobalEstimate,
}

impl Instance {
    pub fn build(cfg: &ExperimentConfig, topology: TopologyKind, seed: u64) -> Result<Self> {
        let dataset = data::generate(cfg.model, cfg.n_total, seed, cfg.p)?;
        let partition = data::partition(&dataset, cfg.m_clients, cfg.pattern, seed)?;
        let shards = loss::build_shards(&dataset, &partition)?;
        let draw = topology.build(cfg.m_clients, seed, cfg.connectivity.policy())?;
        let weights = topology::to_weight_matrix(&draw.adjacency)?;
        let global = loss::global_estimator(cfg.model, &dataset, loss::DEFAULT_GLOBAL_TOLERANCE)?;
        Ok(Self { dataset, partition, shards, draw, weights, global })
    }

    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.draw.adjacency
    }

    /// Local curvatures at the reference fit (the `Σxx^{(m)}` for the linear model).
    pub fn curvatures(&self, kind: ModelKind) -> Result<Vec<nalgebra::DMatrix<f64>>> {
        loss::reference_hessians(kind, &self.shards, self.global.theta.as_slice())
    }
}

pub fn topology_hash(adj: &AdjacencyMatrix) -> String {
    hex::encode(Sha256::digest(adj.to_edge_list().as_bytes()))
}

pub fn spectral_for(
    setting: SpectralSetting,
    curvatures: &[nalgebra::DMatrix<f64>],
    w: &WeightMatrix,
    alpha: f64,
) -> Result<Option<SpectralReport>> {
    let method = match setting {
        SpectralSetting::Off => return Ok(None),
        SpectralSetting::Auto => return engine::contraction_spectral_radius(curvatures, w, alpha).map(Some),
        SpectralSetting::Dense => SpectralMethod::DenseSchur,
        SpectralSetting::Power => SpectralMethod::PowerIteration,
    };
    engine::contraction_spectral_radius_with(curvatures, w, alpha, method, PowerIterationOptions::default()).map(Some)
}

pub fn run_config(cfg: &ExperimentConfig, alpha: f64) -> RunConfig {
    let mut rc = RunConfig::new(alpha, cfg.iterations);
    rc.record_every = cfg.record_every;
    rc.divergence_guard = cfg.divergence_guard;
    rc.early_stop = cfg.early_stop;
    rc
}

pub fn run_replicate(
    cfg: &ExperimentConfig,
    topology: TopologyKind,
    alphas: &[f64],
    replicate: usize,
) -> Result<ReplicateOutcome> {
    let seed = cfg.replicate_seed(replicate);
    let inst = Instance::build(cfg, topology, seed)?;
    let theta0 = inst.dataset.theta0.as_slice();
    let theta_ge = inst.global.theta.as_slice();
    let curvatures = inst.curvatures(cfg.model)?;
    let max_stable_lr = loss::max_stable_lr(&curvatures)?;
    let heterogeneity = diagnostics::heterogeneity(cfg.model, &inst.shards, theta0)?;

    let gmse: f64 = theta_ge.iter().zip(theta0).map(|(a, b)| (a - b) * (a - b)).sum();
    let global = GlobalSummary {
        theta: theta_ge.to_vec(),
        mse: gmse,
        log_mse: gmse.ln(),
        grad_norm: inst.global.grad_norm_at_solution,
        iterations: inst.global.iterations_used,
    };
    let topo = TopologyInfo {
        label: topology.label(),
        hash: topology_hash(inst.adjacency()),
        attempts: inst.draw.attempts,
        seed_used: inst.draw.seed_used,
        strongly_connected: inst.draw.strongly_connected,
        se2_w: topology::se_w(&inst.weights).0,
    };

    let mut runs = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let spectral = spectral_for(cfg.spectral_radius, &curvatures, &inst.weights, alpha)?;
        let rc = run_config(cfg, alpha);
        let outcome = match engine::run(cfg.model, &inst.shards, &inst.weights, &rc, theta0, theta_ge) {
            Ok(tr) => {
                let bound =
                    diagnostics::bound_report(cfg.model, &inst.shards, &inst.weights, alpha, &tr, theta_ge, theta0)?;
                finished(alpha, tr, spectral, Some(bound))
            }
            Err(e) if e.is_divergence() => {
                let iteration = match &e {
                    NgdError::Diverged { iteration, .. } => Some(*iteration),
                    _ => None,
                };
                log::warn!("replicate {replicate} alpha {alpha}: {e}");
                AlphaOutcome {
                    alpha,
                    status: RunStatus::Diverged { iteration, message: e.to_string() },
                    final_iteration: iteration.unwrap_or(0),
                    stopped_early: false,
                    last_change: f64::NAN,
                    snapshots: Vec::new(),
                    spectral,
                    bound: None,
                }
            }
            Err(e) => return Err(e),
        };
        runs.push(outcome);
    }
    Ok(ReplicateOutcome { replicate, seed, global, topology: topo, max_stable_lr, heterogeneity, runs })
}

fn finished(
    alpha: f64,
    tr: Trajectory,
    spectral: Option<SpectralReport>,
    bound: Option<ErrorBoundReport>,
) -> AlphaOutcome {
    AlphaOutcome {
        alpha,
        status: RunStatus::Ok,
        final_iteration: tr.final_state.iteration,
        stopped_early: tr.stopped_early,
        last_change: tr.last_change,
        snapshots: tr.snapshots,
        spectral,
        bound,
    }
}

/// Runs every replicate on a pool of `workers` threads. Results come back in
/// replicate order, so the worker count never changes the output.
pub fn run_all(
    cfg: &ExperimentConfig,
    topology: TopologyKind,
    alphas: &[f64],
    workers: usize,
) -> Result<Vec<ReplicateOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| NgdError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..cfg.replicates).into_par_iter().map(|r| run_replicate(cfg, topology, alphas, r)).collect())
}
