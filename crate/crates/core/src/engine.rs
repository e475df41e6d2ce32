//! NGD iterations, the linear stable solution and the contraction operator.
//!
//! Stepping never materializes the `Mp × Mp` operator: each iteration is the
//! sparse product `W·Θ` followed by one local gradient step per client.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ModelKind;
use crate::diagnostics;
use crate::error::{NgdError, Result};
use crate::linalg::{self, PowerIterationOptions, SpectralMethod};
use crate::loss::{local_gradient_into, Shard};
use crate::topology::{is_central_client, is_circle, AdjacencyMatrix, WeightMatrix};

/// Largest `q = Mp` handled by the dense eigen-solver.
pub const DENSE_SPECTRAL_LIMIT: usize = 4096;
pub const OMEGA_CONDITION_LIMIT: f64 = 1e12;
pub const DEFAULT_DIVERGENCE_GUARD: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct NgdState {
    /// Row `m` holds client `m`'s parameter.
    pub theta_all: DMatrix<f64>,
    pub iteration: usize,
}

impl NgdState {
    pub fn zeros(m_clients: usize, p: usize) -> Self {
        Self { theta_all: DMatrix::zeros(m_clients, p), iteration: 0 }
    }

    fn from_rows(rows: &[f64], m: usize, p: usize, iteration: usize) -> Self {
        Self { theta_all: DMatrix::from_row_slice(m, p, rows), iteration }
    }

    fn to_rows(&self) -> Vec<f64> {
        let (m, p) = self.theta_all.shape();
        let mut out = Vec::with_capacity(m * p);
        for i in 0..m {
            out.extend(self.theta_all.row(i).iter());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Init {
    #[default]
    Zeros,
    Custom(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub alpha: f64,
    pub max_iterations: usize,
    pub init: Init,
    pub record_every: usize,
    pub divergence_guard: f64,
    /// Stop once the largest entry-wise change between iterates drops below this.
    pub early_stop: Option<f64>,
}

impl RunConfig {
    pub fn new(alpha: f64, max_iterations: usize) -> Self {
        Self {
            alpha,
            max_iterations,
            init: Init::Zeros,
            record_every: 10,
            divergence_guard: DEFAULT_DIVERGENCE_GUARD,
            early_stop: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(NgdError::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.max_iterations == 0 {
            return Err(NgdError::invalid("max_iterations must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(NgdError::invalid("record_every must be at least 1"));
        }
        if !(self.divergence_guard > 0.0) {
            return Err(NgdError::invalid("divergence_guard must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub mse: f64,
    pub log_mse: f64,
    pub discrepancy_to_global: f64,
    pub consensus_spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub initial: NgdState,
    pub final_state: NgdState,
    /// Largest entry-wise change over the last iteration.
    pub last_change: f64,
    pub stopped_early: bool,
}

fn check_shapes(shards: &[Shard], w: &WeightMatrix, m: usize, p: usize) -> Result<()> {
    if shards.len() != w.m_clients() || shards.len() != m {
        return Err(NgdError::invalid(format!(
            "{} shards, {}-client weight matrix, {} parameter rows",
            shards.len(),
            w.m_clients(),
            m
        )));
    }
    if shards.iter().any(|s| s.p() != p) {
        return Err(NgdError::invalid("shard dimension does not match parameter dimension"));
    }
    Ok(())
}

/// `W·Θ`.
pub fn neighborhood_average(state: &NgdState, w: &WeightMatrix) -> Result<DMatrix<f64>> {
    let (m, p) = state.theta_all.shape();
    if w.m_clients() != m {
        return Err(NgdError::invalid("weight matrix and state disagree on M"));
    }
    let rows = state.to_rows();
    let mut out = vec![0.0; m * p];
    average_rows(w, &rows, &mut out, p);
    Ok(DMatrix::from_row_slice(m, p, &out))
}

fn average_rows(w: &WeightMatrix, src: &[f64], dst: &mut [f64], p: usize) {
    for (m, out) in dst.chunks_exact_mut(p).enumerate() {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(k, wk) in w.row(m) {
            for (o, s) in out.iter_mut().zip(&src[k * p..(k + 1) * p]) {
                *o += wk * s;
            }
        }
    }
}

struct Stepper<'a> {
    kind: ModelKind,
    shards: &'a [Shard],
    w: &'a WeightMatrix,
    p: usize,
    tilde: Vec<f64>,
    grad: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(kind: ModelKind, shards: &'a [Shard], w: &'a WeightMatrix, p: usize) -> Self {
        let m = shards.len();
        Self { kind, shards, w, p, tilde: vec![0.0; m * p], grad: vec![0.0; p] }
    }

    /// Writes the next iterate into `next`.
    fn step(&mut self, cur: &[f64], next: &mut [f64], alpha: f64) -> Result<()> {
        let p = self.p;
        average_rows(self.w, cur, &mut self.tilde, p);
        for (m, shard) in self.shards.iter().enumerate() {
            let tilde = &self.tilde[m * p..(m + 1) * p];
            local_gradient_into(self.kind, shard, tilde, &mut self.grad)?;
            for ((o, t), g) in next[m * p..(m + 1) * p].iter_mut().zip(tilde).zip(&self.grad) {
                *o = t - alpha * g;
            }
        }
        Ok(())
    }
}

pub fn ngd_step(kind: ModelKind, state: &NgdState, w: &WeightMatrix, shards: &[Shard], alpha: f64) -> Result<NgdState> {
    ngd_step_guarded(kind, state, w, shards, alpha, DEFAULT_DIVERGENCE_GUARD)
}

pub fn ngd_step_guarded(
    kind: ModelKind,
    state: &NgdState,
    w: &WeightMatrix,
    shards: &[Shard],
    alpha: f64,
    divergence_guard: f64,
) -> Result<NgdState> {
    if !(alpha >= 0.0) {
        return Err(NgdError::invalid("alpha must be nonnegative"));
    }
    let (m, p) = state.theta_all.shape();
    check_shapes(shards, w, m, p)?;
    let cur = state.to_rows();
    let mut next = vec![0.0; m * p];
    Stepper::new(kind, shards, w, p).step(&cur, &mut next, alpha)?;
    guard(&next, state.iteration + 1, divergence_guard)?;
    Ok(NgdState::from_rows(&next, m, p, state.iteration + 1))
}

fn guard(rows: &[f64], iteration: usize, limit: f64) -> Result<()> {
    let max_abs = rows.iter().fold(0.0_f64, |a, v| if v.is_finite() { a.max(v.abs()) } else { f64::INFINITY });
    if max_abs > limit {
        return Err(NgdError::Diverged { iteration, max_abs });
    }
    Ok(())
}

fn snapshot(rows: &[f64], m: usize, p: usize, iteration: usize, theta0: &[f64], theta_ref: &[f64]) -> Snapshot {
    let mse = diagnostics::mse_rows(rows, m, p, theta0);
    Snapshot {
        iteration,
        mse,
        log_mse: mse.ln(),
        discrepancy_to_global: diagnostics::discrepancy_rows(rows, m, p, theta_ref),
        consensus_spread: diagnostics::consensus_spread_rows(rows, m, p),
    }
}

/// Runs up to `config.max_iterations` steps, recording `t = 0`, every
/// `record_every`-th iterate and the last one.
pub fn run(
    kind: ModelKind,
    shards: &[Shard],
    w: &WeightMatrix,
    config: &RunConfig,
    theta0: &[f64],
    theta_ref: &[f64],
) -> Result<Trajectory> {
    config.validate()?;
    let m = shards.len();
    let p = theta0.len();
    if theta_ref.len() != p {
        return Err(NgdError::invalid("reference estimator has the wrong dimension"));
    }
    let initial = match &config.init {
        Init::Zeros => NgdState::zeros(m, p),
        Init::Custom(t) => NgdState { theta_all: t.clone(), iteration: 0 },
    };
    check_shapes(shards, w, initial.theta_all.nrows(), initial.theta_all.ncols())?;
    let mut cur = initial.to_rows();
    guard(&cur, 0, config.divergence_guard)?;
    let mut next = vec![0.0; m * p];
    let mut stepper = Stepper::new(kind, shards, w, p);
    let mut snapshots = vec![snapshot(&cur, m, p, 0, theta0, theta_ref)];
    let mut last_change = f64::NAN;
    let mut stopped_early = false;
    let mut t = 0;
    while t < config.max_iterations {
        stepper.step(&cur, &mut next, config.alpha)?;
        t += 1;
        guard(&next, t, config.divergence_guard)?;
        last_change = cur.iter().zip(&next).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        std::mem::swap(&mut cur, &mut next);
        if config.early_stop.is_some_and(|tol| last_change < tol) {
            stopped_early = true;
            break;
        }
        if t % config.record_every == 0 && t < config.max_iterations {
            snapshots.push(snapshot(&cur, m, p, t, theta0, theta_ref));
        }
    }
    if snapshots.last().map(|s| s.iteration) != Some(t) {
        snapshots.push(snapshot(&cur, m, p, t, theta0, theta_ref));
    }
    Ok(Trajectory { snapshots, initial, final_state: NgdState::from_rows(&cur, m, p, t), last_change, stopped_early })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StableSolution {
    pub theta_star: DMatrix<f64>,
    pub omega_condition: f64,
}

/// `Δ*(W ⊗ I_p)` with `Δ_m = I − α H_m`, materialized densely.
pub fn contraction_operator(curvatures: &[DMatrix<f64>], w: &WeightMatrix, alpha: f64) -> Result<DMatrix<f64>> {
    let m = w.m_clients();
    if curvatures.len() != m || m == 0 {
        return Err(NgdError::invalid("need one curvature matrix per client"));
    }
    let p = curvatures[0].nrows();
    let q = m * p;
    let mut op = DMatrix::zeros(q, q);
    for (i, h) in curvatures.iter().enumerate() {
        let delta = DMatrix::identity(p, p) - h * alpha;
        for &(k, wk) in w.row(i) {
            let mut block = op.view_mut((i * p, k * p), (p, p));
            block += &delta * wk;
        }
    }
    Ok(op)
}

fn sigma_xy_stacked(shards: &[Shard]) -> DVector<f64> {
    let p = shards[0].p();
    let mut v = DVector::zeros(shards.len() * p);
    for (m, s) in shards.iter().enumerate() {
        v.rows_mut(m * p, p).copy_from(&s.stats().sigma_xy);
    }
    v
}

fn rows_to_matrix(v: &DVector<f64>, m: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(m, p, v.as_slice())
}

/// Solves `Ω θ* = α Σ*xy` with `Ω = I − Δ*(W ⊗ I_p)` for the linear model.
pub fn stable_solution_ols(shards: &[Shard], w: &WeightMatrix, alpha: f64) -> Result<StableSolution> {
    if shards.is_empty() || shards.len() != w.m_clients() {
        return Err(NgdError::invalid("need one shard per client"));
    }
    let m = shards.len();
    let p = shards[0].p();
    let curv: Vec<_> = shards.iter().map(|s| s.stats().sigma_xx.clone()).collect();
    let op = contraction_operator(&curv, w, alpha)?;
    let omega = DMatrix::identity(m * p, m * p) - &op;
    let rhs = sigma_xy_stacked(shards) * alpha;
    let (theta, cond) = match linalg::solve_with_condition(&omega, &rhs) {
        Ok(r) => r,
        Err(NgdError::SingularMatrix(_)) => return Err(NgdError::SingularOmega { condition: f64::INFINITY }),
        Err(e) => return Err(e),
    };
    if !(cond <= OMEGA_CONDITION_LIMIT) {
        return Err(NgdError::SingularOmega { condition: cond });
    }
    let resid = (&op * &theta + &rhs - &theta).norm();
    let scale = theta.norm().max(rhs.norm()).max(f64::MIN_POSITIVE);
    if resid / scale > 1e-8 {
        return Err(NgdError::numerical(format!("stable-solution residual {:.3e} too large", resid / scale)));
    }
    Ok(StableSolution { theta_star: rows_to_matrix(&theta, m, p), omega_condition: cond })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub radius: f64,
    pub method: SpectralMethod,
}

/// Largest eigenvalue modulus of `Δ*(W ⊗ I_p)`; dense when `Mp` is at most
/// [`DENSE_SPECTRAL_LIMIT`], power iteration beyond.
pub fn contraction_spectral_radius(
    curvatures: &[DMatrix<f64>],
    w: &WeightMatrix,
    alpha: f64,
) -> Result<SpectralReport> {
    let q = curvatures.len() * curvatures.first().map_or(0, |h| h.nrows());
    let method = if q <= DENSE_SPECTRAL_LIMIT { SpectralMethod::DenseSchur } else { SpectralMethod::PowerIteration };
    contraction_spectral_radius_with(curvatures, w, alpha, method, PowerIterationOptions::default())
}

pub fn contraction_spectral_radius_with(
    curvatures: &[DMatrix<f64>],
    w: &WeightMatrix,
    alpha: f64,
    method: SpectralMethod,
    opts: PowerIterationOptions,
) -> Result<SpectralReport> {
    let radius = match method {
        SpectralMethod::DenseSchur => linalg::spectral_radius_dense(&contraction_operator(curvatures, w, alpha)?)?,
        SpectralMethod::PowerIteration => {
            let m = w.m_clients();
            if curvatures.len() != m || m == 0 {
                return Err(NgdError::invalid("need one curvature matrix per client"));
            }
            let p = curvatures[0].nrows();
            let deltas: Vec<DMatrix<f64>> = curvatures.iter().map(|h| DMatrix::identity(p, p) - h * alpha).collect();
            let mut avg = vec![0.0; m * p];
            linalg::power_spectral_radius(
                m * p,
                |x, y| {
                    average_rows(w, x, &mut avg, p);
                    for (i, d) in deltas.iter().enumerate() {
                        for a in 0..p {
                            y[i * p + a] = (0..p).map(|b| d[(a, b)] * avg[i * p + b]).sum();
                        }
                    }
                },
                opts,
            )?
        }
    };
    Ok(SpectralReport { radius, method })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadingTermCase {
    CentralClient,
    CircleDegreeOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverparamReport {
    pub radius: f64,
    pub method: SpectralMethod,
    pub converges: bool,
    pub leading_term_radius: Option<f64>,
    pub leading_term_case: Option<LeadingTermCase>,
}

fn pooled_sigma_xx(shards: &[Shard]) -> DMatrix<f64> {
    let p = shards[0].p();
    let mut s = DMatrix::zeros(p, p);
    for sh in shards {
        s += &sh.stats().sigma_xx;
    }
    s / shards.len() as f64
}

fn sym_radius(m: &DMatrix<f64>) -> Result<f64> {
    let eig = linalg::sym_eigenvalues(m)?;
    Ok(eig[0].abs().max(eig[eig.len() - 1].abs()))
}

/// First-order term of the contraction for a central-client network
/// (client 0 is the hub): `I − α/(M−1)·{M Σxx + (M−2) Σxx^{(hub)}}`.
pub fn central_client_leading_term(shards: &[Shard], alpha: f64) -> DMatrix<f64> {
    let m = shards.len() as f64;
    let p = shards[0].p();
    let inner = pooled_sigma_xx(shards) * m + &shards[0].stats().sigma_xx * (m - 2.0);
    DMatrix::identity(p, p) - inner * (alpha / (m - 1.0))
}

/// First-order term of the product of the `Δ_m` around a directed ring: `I − α M Σxx`.
pub fn circle_leading_term(shards: &[Shard], alpha: f64) -> DMatrix<f64> {
    let m = shards.len() as f64;
    let p = shards[0].p();
    DMatrix::identity(p, p) - pooled_sigma_xx(shards) * (alpha * m)
}

/// Sufficient learning-rate bound for the central-client leading term,
/// `2(M−1) / {M λmax(Σxx) + (M−2) λmax(Σxx^{(hub)})}`.
pub fn central_client_alpha_bound(shards: &[Shard]) -> Result<f64> {
    let m = shards.len() as f64;
    let a = linalg::sym_lambda_max(&pooled_sigma_xx(shards))?;
    let b = linalg::sym_lambda_max(&shards[0].stats().sigma_xx)?;
    Ok(2.0 * (m - 1.0) / (m * a + (m - 2.0) * b))
}

/// Exact threshold at which the central-client leading term reaches radius 1,
/// `2(M−1) / λmax(M Σxx + (M−2) Σxx^{(hub)})`. Never below the sufficient bound.
pub fn central_client_alpha_threshold(shards: &[Shard]) -> Result<f64> {
    let m = shards.len() as f64;
    let inner = pooled_sigma_xx(shards) * m + &shards[0].stats().sigma_xx * (m - 2.0);
    Ok(2.0 * (m - 1.0) / linalg::sym_lambda_max(&inner)?)
}

/// `2 / {M λmax(Σxx)}` for the directed ring.
pub fn circle_alpha_threshold(shards: &[Shard]) -> Result<f64> {
    let m = shards.len() as f64;
    Ok(2.0 / (m * linalg::sym_lambda_max(&pooled_sigma_xx(shards))?))
}

/// Exact contraction radius plus the first-order analysis for central-client
/// and degree-one circle networks. Works when shards have fewer rows than columns.
pub fn overparam_check(
    shards: &[Shard],
    adjacency: &AdjacencyMatrix,
    w: &WeightMatrix,
    alpha: f64,
) -> Result<OverparamReport> {
    if shards.is_empty() {
        return Err(NgdError::invalid("need at least one shard"));
    }
    let curv: Vec<_> = shards.iter().map(|s| s.stats().sigma_xx.clone()).collect();
    let spec = contraction_spectral_radius(&curv, w, alpha)?;
    let (leading_term_radius, leading_term_case) = if is_central_client(adjacency) {
        (Some(sym_radius(&central_client_leading_term(shards, alpha))?), Some(LeadingTermCase::CentralClient))
    } else if is_circle(adjacency, 1) {
        (Some(sym_radius(&circle_leading_term(shards, alpha))?), Some(LeadingTermCase::CircleDegreeOne))
    } else {
        (None, None)
    };
    Ok(OverparamReport {
        radius: spec.radius,
        method: spec.method,
        converges: spec.radius < 1.0 - 1e-10,
        leading_term_radius,
        leading_term_case,
    })
}
