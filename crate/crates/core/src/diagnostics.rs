//! Error metrics, heterogeneity statistics and the empirical error-bound report.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ModelKind;
use crate::engine::{NgdState, Trajectory};
use crate::error::{NgdError, Result};
use crate::linalg;
use crate::loss::{local_gradient, local_hessian, Shard};
use crate::topology::{balance_stats, WeightMatrix};

/// Relative threshold below which the smallest local curvature counts as zero.
const DEGENERATE_CURVATURE: f64 = 1e-12;

pub(crate) fn mse_rows(rows: &[f64], m: usize, p: usize, theta0: &[f64]) -> f64 {
    sq_dist_rows(rows, m, p, theta0) / m as f64
}

pub(crate) fn discrepancy_rows(rows: &[f64], m: usize, p: usize, theta_ref: &[f64]) -> f64 {
    (sq_dist_rows(rows, m, p, theta_ref) / m as f64).sqrt()
}

fn sq_dist_rows(rows: &[f64], m: usize, p: usize, target: &[f64]) -> f64 {
    debug_assert_eq!(rows.len(), m * p);
    rows.chunks_exact(p).map(|r| r.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum()
}

pub(crate) fn consensus_spread_rows(rows: &[f64], m: usize, p: usize) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..m {
        let ri = &rows[i * p..(i + 1) * p];
        for j in (i + 1)..m {
            let rj = &rows[j * p..(j + 1) * p];
            let d: f64 = ri.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.max(d);
        }
    }
    best.sqrt()
}

fn state_rows(theta: &DMatrix<f64>) -> Vec<f64> {
    theta.transpose().as_slice().to_vec()
}

fn check_p(theta: &DMatrix<f64>, v: &[f64]) -> Result<()> {
    if theta.ncols() != v.len() || theta.nrows() == 0 {
        return Err(NgdError::invalid("parameter dimension mismatch"));
    }
    Ok(())
}

/// `‖Θ − 1 θ0ᵀ‖²_F / M`.
pub fn mse(state: &NgdState, theta0: &[f64]) -> Result<f64> {
    check_p(&state.theta_all, theta0)?;
    let (m, p) = state.theta_all.shape();
    Ok(mse_rows(&state_rows(&state.theta_all), m, p, theta0))
}

/// `‖Θ − 1 θ_geᵀ‖_F / √M`.
pub fn discrepancy_to_global(state: &NgdState, theta_ge: &[f64]) -> Result<f64> {
    check_p(&state.theta_all, theta_ge)?;
    let (m, p) = state.theta_all.shape();
    Ok(discrepancy_rows(&state_rows(&state.theta_all), m, p, theta_ge))
}

/// Largest distance between any two clients' parameters.
pub fn consensus_spread(state: &NgdState) -> f64 {
    let (m, p) = state.theta_all.shape();
    consensus_spread_rows(&state_rows(&state.theta_all), m, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityStats {
    pub se_sxx: f64,
    pub se_sxy: f64,
    pub se_grad0: f64,
}

pub fn heterogeneity(kind: ModelKind, shards: &[Shard], theta0: &[f64]) -> Result<HeterogeneityStats> {
    if shards.is_empty() {
        return Err(NgdError::invalid("heterogeneity needs at least one shard"));
    }
    let m = shards.len() as f64;
    let p = shards[0].p();
    let mut sxx = DMatrix::zeros(p, p);
    let mut sxy = DVector::zeros(p);
    for s in shards {
        sxx += &s.stats().sigma_xx;
        sxy += &s.stats().sigma_xy;
    }
    sxx /= m;
    sxy /= m;
    let mut tr = 0.0;
    let mut xy = 0.0;
    let mut g0 = 0.0;
    for s in shards {
        let d = &s.stats().sigma_xx - &sxx;
        // tr(D²) for symmetric D is the squared Frobenius norm
        tr += d.norm_squared();
        xy += (&s.stats().sigma_xy - &sxy).norm_squared();
        g0 += local_gradient(kind, s, theta0)?.norm_squared();
    }
    Ok(HeterogeneityStats { se_sxx: (tr / m).sqrt(), se_sxy: (xy / m).sqrt(), se_grad0: (g0 / m).sqrt() })
}

/// `(κ_min, κ_max)`: extreme eigenvalues over a set of symmetric matrices.
pub fn curvature_range(hessians: &[DMatrix<f64>]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for h in hessians {
        let e = linalg::sym_eigenvalues(h)?;
        lo = lo.min(e[0]);
        hi = hi.max(e[e.len() - 1]);
    }
    if hessians.is_empty() {
        return Err(NgdError::invalid("no curvature matrices"));
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    pub alpha: f64,
    pub iteration: usize,
    pub lhs_discrepancy: f64,
    pub bound_factor: f64,
    pub hetero_factor: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
    pub delta0_max: f64,
    pub opt_error_at_t: f64,
    pub global_stat_error: f64,
    pub se_w: f64,
    pub sigma_max_w: f64,
    pub sigma_min_i_minus_w: f64,
    pub rho: f64,
    pub heterogeneity: HeterogeneityStats,
    /// `ακ2σmax + SE(W) < κ1 σmin / (4 κ2 σmax)`.
    pub linear_bound_condition: bool,
    /// `ρ < 1` and `α σmax κ4 + SE(W) < κ3 (1 − ρ) / (2 κ4)`.
    pub general_bound_condition: bool,
    pub degenerate_curvature: bool,
}

impl ErrorBoundReport {
    /// `δ0_max (1 − ακ3)^t`, or NaN when the curvature estimate is degenerate.
    pub fn opt_error(&self, t: usize) -> f64 {
        if self.degenerate_curvature {
            return f64::NAN;
        }
        self.delta0_max * (1.0 - self.alpha * self.kappa3).powi(t as i32)
    }

    /// `lhs / (bound_factor · hetero_factor)`, the constant that makes the bound tight.
    pub fn implied_constant(&self) -> f64 {
        self.lhs_discrepancy / (self.bound_factor * self.hetero_factor)
    }
}

/// Curvature and network quantities entering the two sufficient conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConditions {
    pub alpha: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
    pub se_w: f64,
    pub sigma_max_w: f64,
    pub sigma_min_i_minus_w: f64,
    pub rho: f64,
    pub linear_bound_condition: bool,
    pub general_bound_condition: bool,
    pub degenerate_curvature: bool,
}

/// `κ1 = λmin` of the pooled curvature, `κ2 = max_m λmax` of the local ones;
/// `κ3, κ4` are the extreme local eigenvalues. All curvatures are taken at
/// `theta_ge` (for the linear model they are the `Σxx^{(m)}`).
pub fn bound_conditions(
    kind: ModelKind,
    shards: &[Shard],
    w: &WeightMatrix,
    alpha: f64,
    theta_ge: &[f64],
) -> Result<BoundConditions> {
    if shards.is_empty() {
        return Err(NgdError::invalid("bound conditions need shards"));
    }
    let hessians: Vec<_> = shards.iter().map(|s| local_hessian(kind, s, theta_ge)).collect::<Result<_>>()?;
    let p = theta_ge.len();
    let mut pooled = DMatrix::zeros(p, p);
    for h in &hessians {
        pooled += h;
    }
    pooled /= shards.len() as f64;
    let kappa1 = linalg::sym_lambda_min(&pooled)?;
    let (kappa3, kappa4) = curvature_range(&hessians)?;
    let kappa2 = kappa4;
    let bal = balance_stats(w)?;
    let se_w = bal.se2_w.sqrt();
    let smax = bal.sigma_max_w;
    let degenerate_curvature = !(kappa3 > DEGENERATE_CURVATURE * kappa4.abs().max(1.0));
    let linear_bound_condition =
        alpha * kappa2 * smax + se_w < kappa1 / kappa2 * bal.sigma_min_i_minus_w / (4.0 * smax);
    let general_bound_condition = !degenerate_curvature
        && bal.rho < 1.0
        && alpha * smax * kappa4 + se_w < 0.5 / kappa4 * kappa3 * (1.0 - bal.rho);
    Ok(BoundConditions {
        alpha,
        kappa1,
        kappa2,
        kappa3,
        kappa4,
        se_w,
        sigma_max_w: smax,
        sigma_min_i_minus_w: bal.sigma_min_i_minus_w,
        rho: bal.rho,
        linear_bound_condition,
        general_bound_condition,
        degenerate_curvature,
    })
}

/// Assembles every term of the error decomposition for one run.
pub fn bound_report(
    kind: ModelKind,
    shards: &[Shard],
    w: &WeightMatrix,
    alpha: f64,
    trajectory: &Trajectory,
    theta_ge: &[f64],
    theta0: &[f64],
) -> Result<ErrorBoundReport> {
    let c = bound_conditions(kind, shards, w, alpha, theta_ge)?;
    let het = heterogeneity(kind, shards, theta0)?;
    let hetero_factor = match kind {
        ModelKind::Linear => het.se_sxx + het.se_sxy,
        _ => het.se_grad0,
    };
    let init = &trajectory.initial.theta_all;
    let delta0_max = (0..init.nrows())
        .map(|m| init.row(m).iter().zip(theta_ge).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let global_stat_error = theta_ge.iter().zip(theta0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let lhs_discrepancy = discrepancy_to_global(&trajectory.final_state, theta_ge)?;

    let mut report = ErrorBoundReport {
        alpha,
        iteration: trajectory.final_state.iteration,
        lhs_discrepancy,
        bound_factor: c.se_w + alpha,
        hetero_factor,
        kappa1: c.kappa1,
        kappa2: c.kappa2,
        kappa3: c.kappa3,
        kappa4: c.kappa4,
        delta0_max,
        opt_error_at_t: 0.0,
        global_stat_error,
        se_w: c.se_w,
        sigma_max_w: c.sigma_max_w,
        sigma_min_i_minus_w: c.sigma_min_i_minus_w,
        rho: c.rho,
        heterogeneity: het,
        linear_bound_condition: c.linear_bound_condition,
        general_bound_condition: c.general_bound_condition,
        degenerate_curvature: c.degenerate_curvature,
    };
    report.opt_error_at_t = report.opt_error(report.iteration);
    Ok(report)
}

/// Points `(t, e_t)` from the start of a decreasing error curve while `e_t`
/// stays above ten times its terminal value.
pub fn initial_phase(curve: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let Some(&(_, terminal)) = curve.last() else {
        return Vec::new();
    };
    curve.iter().copied().take_while(|&(_, e)| e > 10.0 * terminal).collect()
}

/// Least-squares slope of `ln e_t` against `t`.
pub fn log_slope(points: &[(usize, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        points.iter().filter(|(_, e)| *e > 0.0 && e.is_finite()).map(|&(t, e)| (t as f64, e.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum::<f64>() / sxx)
}

/// Type-7 sample quantile (linear interpolation between order statistics).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}
