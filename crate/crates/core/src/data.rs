//! Synthetic regression datasets and their split across clients.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NgdError, Result};
use crate::linalg;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Logistic,
    Poisson,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Logistic => "logistic",
            ModelKind::Poisson => "poisson",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = NgdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "logistic" => Ok(ModelKind::Logistic),
            "poisson" => Ok(ModelKind::Poisson),
            other => Err(NgdError::parse("model kind", format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: ModelKind,
    /// `N × p`, one observation per row.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub theta0: DVector<f64>,
    /// Residual standard deviation; only meaningful for the linear model.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn n_total(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.theta0.len()
    }

    fn validate(&self) -> Result<()> {
        if self.x.nrows() != self.y.len() || self.x.ncols() != self.theta0.len() {
            return Err(NgdError::invalid(format!(
                "inconsistent dataset dimensions: x {}x{}, y {}, theta0 {}",
                self.x.nrows(),
                self.x.ncols(),
                self.y.len(),
                self.theta0.len()
            )));
        }
        let bad = match self.kind {
            ModelKind::Linear => self.y.iter().any(|v| !v.is_finite()),
            ModelKind::Logistic => self.y.iter().any(|&v| v != 0.0 && v != 1.0),
            ModelKind::Poisson => self.y.iter().any(|&v| v < 0.0 || v.fract() != 0.0),
        };
        if bad {
            return Err(NgdError::invalid(format!("responses out of range for {} model", self.kind)));
        }
        Ok(())
    }

    /// Columnar text: a `model <kind> <N> <p> <seed>` header, `theta0 …` and
    /// `noise_sd …` lines, then one `y x1 … xp` row per observation.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.n_total() * (self.p() + 1) * 25);
        let _ = writeln!(out, "model {} {} {} {}", self.kind, self.n_total(), self.p(), self.seed);
        out.push_str("theta0");
        for v in self.theta0.iter() {
            let _ = write!(out, " {}", fmt_f64(*v));
        }
        out.push('\n');
        let _ = writeln!(out, "noise_sd {}", fmt_f64(self.noise_sd));
        for i in 0..self.n_total() {
            out.push_str(&fmt_f64(self.y[i]));
            for j in 0..self.p() {
                let _ = write!(out, " {}", fmt_f64(self.x[(i, j)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ctx = "dataset";
        let mut lines = text.lines();
        let header: Vec<&str> =
            lines.next().ok_or_else(|| NgdError::parse(ctx, "empty input"))?.split_whitespace().collect();
        if header.len() != 5 || header[0] != "model" {
            return Err(NgdError::parse(ctx, "expected header `model <kind> <N> <p> <seed>`"));
        }
        let kind: ModelKind = header[1].parse()?;
        let n: usize = parse_tok(ctx, header[2])?;
        let p: usize = parse_tok(ctx, header[3])?;
        let seed: u64 = parse_tok(ctx, header[4])?;

        let theta_line: Vec<&str> =
            lines.next().ok_or_else(|| NgdError::parse(ctx, "missing theta0 line"))?.split_whitespace().collect();
        if theta_line.first() != Some(&"theta0") || theta_line.len() != p + 1 {
            return Err(NgdError::parse(ctx, format!("expected `theta0` followed by {p} values")));
        }
        let theta0 = theta_line[1..].iter().map(|t| parse_tok::<f64>(ctx, t)).collect::<Result<Vec<_>>>()?;

        let sd_line: Vec<&str> =
            lines.next().ok_or_else(|| NgdError::parse(ctx, "missing noise_sd line"))?.split_whitespace().collect();
        if sd_line.len() != 2 || sd_line[0] != "noise_sd" {
            return Err(NgdError::parse(ctx, "expected `noise_sd <value>`"));
        }
        let noise_sd: f64 = parse_tok(ctx, sd_line[1])?;

        let mut y = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(n * p);
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let vals = line.split_whitespace().map(|t| parse_tok::<f64>(ctx, t)).collect::<Result<Vec<_>>>()?;
            if vals.len() != p + 1 {
                return Err(NgdError::parse(
                    ctx,
                    format!("row {} has {} fields, expected {}", i + 1, vals.len(), p + 1),
                ));
            }
            y.push(vals[0]);
            xs.extend_from_slice(&vals[1..]);
        }
        if y.len() != n {
            return Err(NgdError::parse(ctx, format!("header says N={n} but found {} rows", y.len())));
        }
        let ds = Dataset {
            kind,
            x: DMatrix::from_row_slice(n, p, &xs),
            y: DVector::from_vec(y),
            theta0: DVector::from_vec(theta0),
            noise_sd,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Shortest decimal that round-trips, padded to 17 significant digits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_tok<T: FromStr>(ctx: &str, tok: &str) -> Result<T> {
    tok.parse().map_err(|_| NgdError::parse(ctx, format!("cannot parse {tok:?}")))
}

/// Gaussian-design linear model `Y = X θ0 + σ ε` with AR(1) covariance
/// `cov(X_j1, X_j2) = rho^|j1 - j2|`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDesign {
    pub theta0: Vec<f64>,
    pub rho: f64,
    pub noise_sd: f64,
}

impl Default for LinearDesign {
    fn default() -> Self {
        Self { theta0: vec![3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0], rho: 0.5, noise_sd: 1.0 }
    }
}

impl LinearDesign {
    /// The default coefficients padded with zeros (or truncated) to dimension `p`.
    pub fn with_dimension(p: usize) -> Self {
        let mut d = Self::default();
        d.theta0.resize(p, 0.0);
        d
    }
}

pub fn ar1_covariance(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

pub fn equicorrelated_covariance(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rho })
}

fn correlated_normals<R: Rng>(rng: &mut R, n: usize, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = linalg::cholesky_lower(cov)?;
    let p = cov.nrows();
    let mut x = DMatrix::zeros(n, p);
    let mut z = vec![0.0; p];
    for i in 0..n {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        for j in 0..p {
            x[(i, j)] = (0..=j).map(|k| l[(j, k)] * z[k]).sum();
        }
    }
    Ok(x)
}

pub fn gen_linear(n_total: usize, seed: u64) -> Result<Dataset> {
    gen_linear_with(&LinearDesign::default(), n_total, seed)
}

pub fn gen_linear_with(design: &LinearDesign, n_total: usize, seed: u64) -> Result<Dataset> {
    if n_total == 0 {
        return Err(NgdError::invalid("n_total must be at least 1"));
    }
    let p = design.theta0.len();
    if p == 0 {
        return Err(NgdError::invalid("theta0 must be non-empty"));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    let x = correlated_normals(&mut rng, n_total, &ar1_covariance(p, design.rho))?;
    let theta0 = DVector::from_column_slice(&design.theta0);
    let mean = &x * &theta0;
    let y = DVector::from_fn(n_total, |i, _| {
        let eps: f64 = rng.sample(StandardNormal);
        mean[i] + design.noise_sd * eps
    });
    Ok(Dataset { kind: ModelKind::Linear, x, y, theta0, noise_sd: design.noise_sd, seed })
}

pub fn logistic_theta0() -> Vec<f64> {
    vec![0.5, 0.5, 0.5, 0.5, 0.5, -1.25]
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn gen_logistic(n_total: usize, seed: u64) -> Result<Dataset> {
    if n_total == 0 {
        return Err(NgdError::invalid("n_total must be at least 1"));
    }
    let theta0 = DVector::from_vec(logistic_theta0());
    let p = theta0.len();
    let mut rng = stream_rng(seed, Stream::Data);
    let x = correlated_normals(&mut rng, n_total, &equicorrelated_covariance(p, 0.5))?;
    let eta = &x * &theta0;
    let y = DVector::from_fn(n_total, |i, _| {
        let prob = sigmoid(eta[i]);
        if rng.random::<f64>() < prob {
            1.0
        } else {
            0.0
        }
    });
    Ok(Dataset { kind: ModelKind::Logistic, x, y, theta0, noise_sd: 1.0, seed })
}

pub fn poisson_theta0() -> Vec<f64> {
    vec![1.2, 0.6, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0]
}

/// Six AR(1) normals with rho = 0.2 and two Bernoulli(0.5) covariates mapped
/// to ±1, so every column has population mean 0 and variance 1.
pub fn gen_poisson(n_total: usize, seed: u64) -> Result<Dataset> {
    if n_total == 0 {
        return Err(NgdError::invalid("n_total must be at least 1"));
    }
    let theta0 = DVector::from_vec(poisson_theta0());
    let mut rng = stream_rng(seed, Stream::Data);
    let normals = correlated_normals(&mut rng, n_total, &ar1_covariance(6, 0.2))?;
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let mut x = DMatrix::zeros(n_total, 8);
    for i in 0..n_total {
        for j in 0..6 {
            x[(i, j)] = normals[(i, j)];
        }
        for j in 6..8 {
            x[(i, j)] = standardize_bernoulli(coin.sample(&mut rng));
        }
    }
    let eta = &x * &theta0;
    let mut y = DVector::zeros(n_total);
    for i in 0..n_total {
        let dist = Poisson::new(eta[i].exp())
            .map_err(|e| NgdError::numerical(format!("poisson rate {}: {e}", eta[i].exp())))?;
        y[i] = dist.sample(&mut rng);
    }
    Ok(Dataset { kind: ModelKind::Poisson, x, y, theta0, noise_sd: 1.0, seed })
}

/// `(b - 0.5) / 0.5` for a Bernoulli(0.5) draw.
pub fn standardize_bernoulli(b: bool) -> f64 {
    if b {
        1.0
    } else {
        -1.0
    }
}

pub fn generate(kind: ModelKind, n_total: usize, seed: u64, linear_p: Option<usize>) -> Result<Dataset> {
    match kind {
        ModelKind::Linear => match linear_p {
            Some(p) => gen_linear_with(&LinearDesign::with_dimension(p), n_total, seed),
            None => gen_linear(n_total, seed),
        },
        ModelKind::Logistic => gen_logistic(n_total, seed),
        ModelKind::Poisson => gen_poisson(n_total, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Homogeneous,
    Heterogeneous,
}

impl Pattern {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pattern::Homogeneous => "homogeneous",
            Pattern::Heterogeneous => "heterogeneous",
        }
    }
}

impl FromStr for Pattern {
    type Err = NgdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homogeneous" => Ok(Pattern::Homogeneous),
            "heterogeneous" => Ok(Pattern::Heterogeneous),
            other => Err(NgdError::parse("pattern", format!("unknown pattern {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub pattern: Pattern,
    /// 0-based sample indices held by each client.
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn m_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_size(&self) -> usize {
        self.shards.first().map_or(0, Vec::len)
    }

    fn validate(&self, n_total: Option<usize>) -> Result<()> {
        let m = self.m_clients();
        if m == 0 {
            return Err(NgdError::invalid("partition has no shards"));
        }
        let n = self.shard_size();
        if n == 0 || self.shards.iter().any(|s| s.len() != n) {
            return Err(NgdError::invalid("partition shards must be non-empty and equally sized"));
        }
        let total = n * m;
        if let Some(expected) = n_total {
            if expected != total {
                return Err(NgdError::invalid(format!("partition covers {total} samples, dataset has {expected}")));
            }
        }
        let mut seen = vec![false; total];
        for &i in self.shards.iter().flatten() {
            if i >= total || seen[i] {
                return Err(NgdError::invalid(format!("index {} repeated or out of range", i + 1)));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// `M n pattern` then one line of 1-based indices per client.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} {}", self.m_clients(), self.shard_size(), self.pattern.as_str());
        for shard in &self.shards {
            let line: Vec<String> = shard.iter().map(|i| (i + 1).to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ctx = "partition";
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> =
            lines.next().ok_or_else(|| NgdError::parse(ctx, "empty input"))?.split_whitespace().collect();
        if header.len() != 3 {
            return Err(NgdError::parse(ctx, "expected header `M n pattern`"));
        }
        let m: usize = parse_tok(ctx, header[0])?;
        let n: usize = parse_tok(ctx, header[1])?;
        let pattern: Pattern = header[2].parse()?;
        let shards = lines
            .map(|l| {
                l.split_whitespace()
                    .map(|t| {
                        let v: usize = parse_tok(ctx, t)?;
                        if v == 0 {
                            return Err(NgdError::parse(ctx, "indices are 1-based"));
                        }
                        Ok(v - 1)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if shards.len() != m || shards.iter().any(|s| s.len() != n) {
            return Err(NgdError::parse(ctx, format!("expected {m} lines of {n} indices")));
        }
        let part = Partition { pattern, shards };
        part.validate(None)?;
        Ok(part)
    }
}

fn check_divides(n_total: usize, m_clients: usize) -> Result<usize> {
    if m_clients == 0 || !n_total.is_multiple_of(m_clients) {
        return Err(NgdError::invalid(format!("M = {m_clients} does not divide N = {n_total}")));
    }
    Ok(n_total / m_clients)
}

/// Uniformly random assignment in equal blocks.
pub fn partition_homogeneous(dataset: &Dataset, m_clients: usize, seed: u64) -> Result<Partition> {
    let n = check_divides(dataset.n_total(), m_clients)?;
    let mut order: Vec<usize> = (0..dataset.n_total()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Partition));
    let shards = order.chunks(n).map(<[usize]>::to_vec).collect();
    Ok(Partition { pattern: Pattern::Homogeneous, shards })
}

/// Sort by response (ascending, ties by original index) and deal out in blocks.
pub fn partition_heterogeneous(dataset: &Dataset, m_clients: usize) -> Result<Partition> {
    let n = check_divides(dataset.n_total(), m_clients)?;
    let mut order: Vec<usize> = (0..dataset.n_total()).collect();
    order.sort_by(|&a, &b| dataset.y[a].total_cmp(&dataset.y[b]));
    let shards = order.chunks(n).map(<[usize]>::to_vec).collect();
    Ok(Partition { pattern: Pattern::Heterogeneous, shards })
}

pub fn partition(dataset: &Dataset, m_clients: usize, pattern: Pattern, seed: u64) -> Result<Partition> {
    match pattern {
        Pattern::Homogeneous => partition_homogeneous(dataset, m_clients, seed),
        Pattern::Heterogeneous => partition_heterogeneous(dataset, m_clients),
    }
}
