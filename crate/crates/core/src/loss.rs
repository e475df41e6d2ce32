//! Per-client losses for the three model families and the pooled reference fit.
//!
//! Gradients follow the NGD update quantity for each family: the linear model
//! uses `Σxx θ − Σxy` (half the calculus gradient of the mean squared error),
//! the GLMs use the gradient of twice the average negative log-likelihood.
//! Learning rates are therefore not comparable across families.

use nalgebra::{DMatrix, DVector};

use crate::data::{sigmoid, Dataset, ModelKind, Partition};
use crate::error::{NgdError, Result};
use crate::linalg;

/// Linear predictors above this abort a Poisson evaluation instead of overflowing.
pub const POISSON_ETA_LIMIT: f64 = 700.0;

const NEWTON_MAX_ITERATIONS: usize = 200;
const NEWTON_MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalSuffStats {
    pub sigma_xx: DMatrix<f64>,
    pub sigma_xy: DVector<f64>,
}

pub fn suff_stats(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LocalSuffStats> {
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(NgdError::invalid(format!("shard needs n >= 1 rows matching y (x has {n}, y has {})", y.len())));
    }
    let inv = 1.0 / n as f64;
    let mut sigma_xx = x.tr_mul(x) * inv;
    // force exact symmetry so eigen-solvers see a symmetric input
    for i in 0..sigma_xx.nrows() {
        for j in 0..i {
            let v = 0.5 * (sigma_xx[(i, j)] + sigma_xx[(j, i)]);
            sigma_xx[(i, j)] = v;
            sigma_xx[(j, i)] = v;
        }
    }
    let sigma_xy = x.tr_mul(y) * inv;
    Ok(LocalSuffStats { sigma_xx, sigma_xy })
}

/// One client's data, stored row-major for cheap per-observation passes.
#[derive(Debug, Clone)]
pub struct Shard {
    pub client: usize,
    n: usize,
    p: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    stats: LocalSuffStats,
}

impl Shard {
    pub fn new(client: usize, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let stats = suff_stats(x, y)?;
        let (n, p) = x.shape();
        let mut rows = Vec::with_capacity(n * p);
        for i in 0..n {
            rows.extend(x.row(i).iter());
        }
        Ok(Self { client, n, p, x: rows, y: y.as_slice().to_vec(), stats })
    }

    /// The whole dataset as a single shard.
    pub fn pooled(dataset: &Dataset) -> Result<Self> {
        Self::new(0, &dataset.x, &dataset.y)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn stats(&self) -> &LocalSuffStats {
        &self.stats
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    fn eta(&self, kind: ModelKind, i: usize, theta: &[f64]) -> Result<f64> {
        let eta = linalg::dot(self.row(i), theta);
        if kind == ModelKind::Poisson && eta > POISSON_ETA_LIMIT {
            return Err(NgdError::NumericOverflow { client: self.client, value: eta, limit: POISSON_ETA_LIMIT });
        }
        Ok(eta)
    }
}

pub fn build_shards(dataset: &Dataset, partition: &Partition) -> Result<Vec<Shard>> {
    let p = dataset.p();
    partition
        .shards
        .iter()
        .enumerate()
        .map(|(m, idx)| {
            if idx.iter().any(|&i| i >= dataset.n_total()) {
                return Err(NgdError::invalid("partition index out of range for dataset"));
            }
            let x = DMatrix::from_fn(idx.len(), p, |r, c| dataset.x[(idx[r], c)]);
            let y = DVector::from_fn(idx.len(), |r, _| dataset.y[idx[r]]);
            Shard::new(m, &x, &y)
        })
        .collect()
}

fn check_dim(shard: &Shard, theta: &[f64]) -> Result<()> {
    if theta.len() != shard.p {
        return Err(NgdError::invalid(format!("theta has length {}, shard has p = {}", theta.len(), shard.p)));
    }
    Ok(())
}

/// Writes the local gradient into `out` without allocating.
pub fn local_gradient_into(kind: ModelKind, shard: &Shard, theta: &[f64], out: &mut [f64]) -> Result<()> {
    check_dim(shard, theta)?;
    let p = shard.p;
    match kind {
        ModelKind::Linear => {
            let s = &shard.stats;
            for (j, o) in out.iter_mut().enumerate().take(p) {
                let mut acc = -s.sigma_xy[j];
                for k in 0..p {
                    acc += s.sigma_xx[(j, k)] * theta[k];
                }
                *o = acc;
            }
        }
        ModelKind::Logistic | ModelKind::Poisson => {
            let out = &mut out[..p];
            out.iter_mut().for_each(|v| *v = 0.0);
            for (row, &y) in shard.x.chunks_exact(p).zip(&shard.y) {
                let eta = linalg::dot(row, theta);
                let mean = match kind {
                    ModelKind::Logistic => sigmoid(eta),
                    _ if eta > POISSON_ETA_LIMIT => {
                        return Err(NgdError::NumericOverflow {
                            client: shard.client,
                            value: eta,
                            limit: POISSON_ETA_LIMIT,
                        })
                    }
                    _ => eta.exp(),
                };
                let r = mean - y;
                for (o, xv) in out.iter_mut().zip(row) {
                    *o += r * xv;
                }
            }
            let scale = 2.0 / shard.n as f64;
            out[..p].iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(())
}

pub fn local_gradient(kind: ModelKind, shard: &Shard, theta: &[f64]) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(shard.p);
    local_gradient_into(kind, shard, theta, out.as_mut_slice())?;
    Ok(out)
}

pub fn local_hessian(kind: ModelKind, shard: &Shard, theta: &[f64]) -> Result<DMatrix<f64>> {
    check_dim(shard, theta)?;
    if kind == ModelKind::Linear {
        return Ok(shard.stats.sigma_xx.clone());
    }
    let p = shard.p;
    let mut h = DMatrix::zeros(p, p);
    for i in 0..shard.n {
        let eta = shard.eta(kind, i, theta)?;
        let wgt = match kind {
            ModelKind::Logistic => {
                let s = sigmoid(eta);
                s * (1.0 - s)
            }
            _ => eta.exp(),
        };
        let row = shard.row(i);
        for a in 0..p {
            for b in 0..=a {
                h[(a, b)] += wgt * row[a] * row[b];
            }
        }
    }
    let scale = 2.0 / shard.n as f64;
    for a in 0..p {
        for b in 0..=a {
            let v = h[(a, b)] * scale;
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    Ok(h)
}

/// Loss whose gradient is [`local_gradient`]; for the linear model the
/// constant term is dropped.
pub fn local_loss(kind: ModelKind, shard: &Shard, theta: &[f64]) -> Result<f64> {
    check_dim(shard, theta)?;
    match kind {
        ModelKind::Linear => {
            let th = DVector::from_column_slice(theta);
            let s = &shard.stats;
            Ok(0.5 * th.dot(&(&s.sigma_xx * &th)) - th.dot(&s.sigma_xy))
        }
        ModelKind::Logistic | ModelKind::Poisson => {
            let mut acc = 0.0;
            for i in 0..shard.n {
                let eta = shard.eta(kind, i, theta)?;
                let y = shard.y[i];
                acc += if kind == ModelKind::Logistic {
                    // log(1 + e^eta) computed stably
                    let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
                    softplus - y * eta
                } else {
                    eta.exp() - y * eta
                };
            }
            Ok(2.0 * acc / shard.n as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEstimate {
    pub theta: DVector<f64>,
    pub grad_norm_at_solution: f64,
    pub iterations_used: usize,
}

pub const DEFAULT_GLOBAL_TOLERANCE: f64 = 1e-10;

/// OLS for the linear model, damped Newton on the pooled likelihood otherwise.
pub fn global_estimator(kind: ModelKind, dataset: &Dataset, tolerance: f64) -> Result<GlobalEstimate> {
    let pooled = Shard::pooled(dataset)?;
    global_estimator_for(kind, &pooled, tolerance)
}

pub fn global_estimator_for(kind: ModelKind, pooled: &Shard, tolerance: f64) -> Result<GlobalEstimate> {
    if !(tolerance > 0.0) {
        return Err(NgdError::invalid("tolerance must be positive"));
    }
    match kind {
        ModelKind::Linear => {
            let s = &pooled.stats;
            let eig = linalg::sym_eigenvalues(&s.sigma_xx)?;
            let (lo, hi) = (eig[0], eig[eig.len() - 1]);
            if !(lo > hi * 1e-13) {
                return Err(NgdError::SingularMatrix(format!("pooled Σxx has eigenvalues in [{lo:.3e}, {hi:.3e}]")));
            }
            let chol = s
                .sigma_xx
                .clone()
                .cholesky()
                .ok_or_else(|| NgdError::SingularMatrix("pooled Σxx is not positive definite".into()))?;
            let theta = chol.solve(&s.sigma_xy);
            let grad = local_gradient(kind, pooled, theta.as_slice())?;
            Ok(GlobalEstimate { theta, grad_norm_at_solution: grad.norm(), iterations_used: 1 })
        }
        ModelKind::Logistic | ModelKind::Poisson => newton(kind, pooled, tolerance),
    }
}

fn loss_or_inf(kind: ModelKind, shard: &Shard, theta: &[f64]) -> Result<f64> {
    match local_loss(kind, shard, theta) {
        Err(NgdError::NumericOverflow { .. }) => Ok(f64::INFINITY),
        other => other,
    }
}

fn newton(kind: ModelKind, shard: &Shard, tolerance: f64) -> Result<GlobalEstimate> {
    let p = shard.p;
    let mut theta = DVector::zeros(p);
    let mut loss = loss_or_inf(kind, shard, theta.as_slice())?;
    for iteration in 0..NEWTON_MAX_ITERATIONS {
        let grad = local_gradient(kind, shard, theta.as_slice())?;
        let gnorm = grad.norm();
        if gnorm <= tolerance {
            return Ok(GlobalEstimate { theta, grad_norm_at_solution: gnorm, iterations_used: iteration });
        }
        let hess = local_hessian(kind, shard, theta.as_slice())?;
        let dir = match hess.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                hess.lu().solve(&grad).ok_or(NgdError::SolverFailure { iterations: iteration, grad_norm: gnorm })?
            }
        };
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=NEWTON_MAX_HALVINGS {
            let cand = &theta - &dir * step;
            let cand_loss = loss_or_inf(kind, shard, cand.as_slice())?;
            // near the optimum the decrease falls below rounding, so allow a few ulps
            if cand_loss <= loss + 8.0 * f64::EPSILON * loss.abs().max(1.0) {
                theta = cand;
                loss = cand_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(NgdError::SolverFailure { iterations: iteration + 1, grad_norm: gnorm });
        }
    }
    let grad_norm = local_gradient(kind, shard, theta.as_slice())?.norm();
    if grad_norm <= tolerance {
        return Ok(GlobalEstimate { theta, grad_norm_at_solution: grad_norm, iterations_used: NEWTON_MAX_ITERATIONS });
    }
    Err(NgdError::SolverFailure { iterations: NEWTON_MAX_ITERATIONS, grad_norm })
}

/// Local Hessians at a reference point; for the linear model these are the Σxx^{(m)}.
pub fn reference_hessians(kind: ModelKind, shards: &[Shard], theta_ref: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    shards.iter().map(|s| local_hessian(kind, s, theta_ref)).collect()
}

/// `2 · min_m 1 / λmax(H_m)`.
pub fn max_stable_lr(hessians: &[DMatrix<f64>]) -> Result<f64> {
    if hessians.is_empty() {
        return Err(NgdError::invalid("max_stable_lr needs at least one shard"));
    }
    let mut worst: f64 = 0.0;
    for h in hessians {
        worst = worst.max(linalg::sym_lambda_max(h)?);
    }
    if worst <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(2.0 / worst)
}

pub fn max_stable_lr_linear(shards: &[Shard]) -> Result<f64> {
    let hs: Vec<_> = shards.iter().map(|s| s.stats.sigma_xx.clone()).collect();
    max_stable_lr(&hs)
}
