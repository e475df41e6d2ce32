//! Dense linear-algebra helpers shared by the topology, loss and engine modules.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. Symmetric problems go
//! through `SymmetricEigen`; spectral radii of nonsymmetric operators use the
//! real Schur form (dense) or a matrix-free power iteration whose modulus
//! estimator handles a dominant complex-conjugate pair.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NgdError, Result};

const SYM_EIG_EPS: f64 = 1e-15;
const SYM_EIG_MAX_SWEEPS: usize = 10_000;

/// Ascending eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(NgdError::invalid(format!("eigenvalues need a square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::try_new(sym, SYM_EIG_EPS, SYM_EIG_MAX_SWEEPS)
        .ok_or_else(|| NgdError::numerical("symmetric eigensolver did not converge"))?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

pub fn sym_lambda_max(m: &DMatrix<f64>) -> Result<f64> {
    sym_eigenvalues(m)?.last().copied().ok_or_else(|| NgdError::invalid("empty matrix"))
}

pub fn sym_lambda_min(m: &DMatrix<f64>) -> Result<f64> {
    sym_eigenvalues(m)?.first().copied().ok_or_else(|| NgdError::invalid("empty matrix"))
}

/// Largest eigenvalue modulus of a general square matrix via the real Schur form.
pub fn spectral_radius_dense(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(NgdError::invalid("spectral radius needs a non-empty square matrix"));
    }
    // nalgebra's real Schur lacks exceptional shifts and stalls on some
    // permutation-like inputs; faer's QR has them.
    let n = m.nrows();
    let eig = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)])
        .eigenvalues()
        .map_err(|_| NgdError::numerical("dense eigenvalue iteration did not converge"))?;
    let radius = eig.iter().map(|z| z.re.hypot(z.im)).fold(0.0, f64::max);
    Ok(radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMethod {
    DenseSchur,
    PowerIteration,
}

#[derive(Debug, Clone, Copy)]
pub struct PowerIterationOptions {
    pub max_iterations: usize,
    /// Relative change of the modulus estimate treated as converged.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for PowerIterationOptions {
    fn default() -> Self {
        Self { max_iterations: 10_000, tolerance: 1e-12, seed: 0x5eed }
    }
}

/// Spectral radius of a linear operator given only its action.
///
/// Each step fits `A^2 u ≈ c1 A u + c0 u` over the last pair of iterates; the
/// roots of `z^2 - c1 z - c0` then carry the dominant eigenvalue whether it is
/// real or one half of a complex pair. When the pair collapses (iterates become
/// colinear) the plain norm ratio is used. Operators whose dominant modulus is
/// shared by more than two eigenvalues do not converge and return a
/// `NumericalFailure` carrying the last estimate.
pub fn power_spectral_radius<F>(dim: usize, mut apply: F, opts: PowerIterationOptions) -> Result<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if dim == 0 {
        return Err(NgdError::invalid("power iteration on an empty operator"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut prev: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
    normalize(&mut prev);
    let mut cur = vec![0.0; dim];
    apply(&prev, &mut cur);
    let mut scale = norm(&cur);
    if scale == 0.0 {
        return Ok(0.0);
    }
    cur.iter_mut().for_each(|v| *v /= scale);
    let mut next = vec![0.0; dim];

    let mut estimate = f64::NAN;
    let mut stable_steps = 0;
    for _ in 0..opts.max_iterations {
        apply(&cur, &mut next);
        let next_norm = norm(&next);
        if next_norm == 0.0 {
            return Ok(0.0);
        }
        let (new_estimate, residual) = paired_estimate(&prev, &cur, &next, scale);
        let change = (new_estimate - estimate).abs();
        let converged_now = change <= opts.tolerance * new_estimate.max(1.0) && residual <= 1e-7;
        stable_steps = if converged_now { stable_steps + 1 } else { 0 };
        estimate = new_estimate;
        if stable_steps >= 3 {
            return Ok(estimate);
        }
        scale = next_norm;
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
        cur.iter_mut().for_each(|v| *v /= scale);
    }
    Err(NgdError::NumericalFailure {
        message: format!("power iteration did not converge in {} iterations", opts.max_iterations),
        best_estimate: Some(estimate),
    })
}

/// `prev`, `cur` unit vectors with `A prev = scale * cur`; `next = A cur`.
/// Returns (modulus estimate, relative residual of the two-term fit).
fn paired_estimate(prev: &[f64], cur: &[f64], next: &[f64], scale: f64) -> (f64, f64) {
    // Fit scale*next ≈ c1 * scale*cur + c0 * prev, i.e. A^2 prev ≈ c1 A prev + c0 prev.
    let a: Vec<f64> = cur.iter().map(|v| v * scale).collect();
    let z: Vec<f64> = next.iter().map(|v| v * scale).collect();
    let b = prev;
    let aa = dot(&a, &a);
    let bb = dot(b, b);
    let ab = dot(&a, b);
    let det = aa * bb - ab * ab;
    let z_norm = norm(&z);
    if det <= 1e-12 * aa * bb {
        // Colinear iterates: real dominant eigenvalue, plain ratio.
        let lambda = dot(next, cur);
        let resid: f64 = next.iter().zip(cur).map(|(n, c)| (n - lambda * c).powi(2)).sum::<f64>().sqrt();
        return (lambda.abs(), resid / norm(next).max(f64::MIN_POSITIVE));
    }
    let az = dot(&a, &z);
    let bz = dot(b, &z);
    let c1 = (bb * az - ab * bz) / det;
    let c0 = (aa * bz - ab * az) / det;
    let resid: f64 = z.iter().zip(&a).zip(b).map(|((zi, ai), bi)| (zi - c1 * ai - c0 * bi).powi(2)).sum::<f64>().sqrt();
    let disc = c1 * c1 + 4.0 * c0;
    let modulus = if disc < 0.0 {
        (-c0).sqrt()
    } else {
        let s = disc.sqrt();
        ((c1 + s) / 2.0).abs().max(((c1 - s) / 2.0).abs())
    };
    (modulus, resid / z_norm.max(f64::MIN_POSITIVE))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: &mut [f64]) {
    let n = norm(a);
    if n > 0.0 {
        a.iter_mut().for_each(|v| *v /= n);
    }
}

/// Neumaier-compensated sum; keeps small terms that follow a large one.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Column-sum (1-) norm.
pub fn norm_1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// LU-based solve that also returns a 1-norm condition-number estimate
/// (Hager's method with Higham's alternating-sign safeguard).
pub fn solve_with_condition(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let n = a.nrows();
    if !a.is_square() || rhs.len() != n {
        return Err(NgdError::invalid("solve: dimension mismatch"));
    }
    let lu = a.clone().lu();
    let x = lu.solve(rhs).ok_or_else(|| NgdError::SingularMatrix("LU factor has a zero pivot".into()))?;
    let l = lu.l();
    let u = lu.u();
    let p = lu.p();
    let solve_t = |b: &DVector<f64>| -> Option<DVector<f64>> {
        let z = u.tr_solve_upper_triangular(b)?;
        let mut w = l.tr_solve_lower_triangular(&z)?;
        p.inv_permute_rows(&mut w);
        Some(w)
    };
    let singular = || NgdError::SingularMatrix("LU factor has a zero pivot".into());

    let mut v = DVector::from_element(n, 1.0 / n as f64);
    let mut inv_norm = 0.0;
    for iter in 0..5 {
        let y = lu.solve(&v).ok_or_else(singular)?;
        inv_norm = y.iter().map(|t| t.abs()).sum();
        let xi = y.map(|t| if t >= 0.0 { 1.0 } else { -1.0 });
        let z = solve_t(&xi).ok_or_else(singular)?;
        let (j, zmax) = z.iter().enumerate().map(|(i, t)| (i, t.abs())).fold((0, f64::NEG_INFINITY), |acc, c| {
            if c.1 > acc.1 {
                c
            } else {
                acc
            }
        });
        if iter > 0 && zmax <= z.dot(&v) {
            break;
        }
        v = DVector::zeros(n);
        v[j] = 1.0;
    }
    let alt = DVector::from_fn(n, |i, _| {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * (1.0 + i as f64 / (n.max(2) - 1) as f64)
    });
    let y = lu.solve(&alt).ok_or_else(singular)?;
    let alt_est = 2.0 * y.iter().map(|t| t.abs()).sum::<f64>() / (3.0 * n as f64);
    let condition = norm_1(a) * inv_norm.max(alt_est);
    Ok((x, condition))
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| NgdError::SingularMatrix("matrix is not positive definite".into()))
}
