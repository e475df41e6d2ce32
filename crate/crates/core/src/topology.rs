//! Communication graphs between clients and the statistics that describe how
//! balanced they are.
//!
//! Orientation: `a[m1][m2] = 1` means client `m1` receives parameters from
//! client `m2`. Row `m1` of the weight matrix therefore averages over the
//! clients that `m1` listens to, with equal weight `1 / d_m1`.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{NgdError, Result};
use crate::linalg;
use crate::rng::{stream_rng, Stream};

/// Attempts made by [`build_fixed_degree`] before giving up on strong connectivity.
pub const FIXED_DEGREE_MAX_ATTEMPTS: u32 = 64;

/// Eigenvalues of `(I - W)^T (I - W)` at or below this are treated as the structural zero.
pub const POSITIVE_EIGEN_THRESHOLD: f64 = 1e-10;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    /// `sources[m]` lists, in ascending order, the clients `m` receives from.
    sources: Vec<Vec<usize>>,
}

impl AdjacencyMatrix {
    /// Builds from per-row neighbour lists, checking the zero diagonal and
    /// in-degree ≥ 1 invariants.
    pub fn from_sources(mut sources: Vec<Vec<usize>>) -> Result<Self> {
        let m = sources.len();
        if m < 2 {
            return Err(NgdError::invalid(format!("need at least 2 clients, got {m}")));
        }
        for (row, list) in sources.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.is_empty() {
                return Err(NgdError::invalid(format!("client {} has in-degree 0", row + 1)));
            }
            if let Some(&bad) = list.iter().find(|&&c| c >= m) {
                return Err(NgdError::invalid(format!("neighbour index {} out of range", bad + 1)));
            }
            if list.binary_search(&row).is_ok() {
                return Err(NgdError::invalid(format!("self loop on client {}", row + 1)));
            }
        }
        Ok(Self { sources })
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(NgdError::invalid("adjacency matrix must be square"));
        }
        let mut sources = vec![Vec::new(); a.nrows()];
        for r in 0..a.nrows() {
            for c in 0..a.ncols() {
                let v = a[(r, c)];
                if v == 1.0 {
                    sources[r].push(c);
                } else if v != 0.0 {
                    return Err(NgdError::invalid(format!(
                        "adjacency entry ({}, {}) = {v} is not binary",
                        r + 1,
                        c + 1
                    )));
                }
            }
        }
        Self::from_sources(sources)
    }

    pub fn m_clients(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self, m: usize) -> &[usize] {
        &self.sources[m]
    }

    pub fn in_degree(&self, m: usize) -> usize {
        self.sources[m].len()
    }

    pub fn n_edges(&self) -> usize {
        self.sources.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.m_clients();
        let mut a = DMatrix::zeros(m, m);
        for (r, list) in self.sources.iter().enumerate() {
            for &c in list {
                a[(r, c)] = 1.0;
            }
        }
        a
    }

    /// Edge-list text: `M` on the first line, then one 1-indexed `src dst`
    /// pair per line meaning `a[src][dst] = 1`.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.m_clients());
        for (r, list) in self.sources.iter().enumerate() {
            for &c in list {
                let _ = writeln!(out, "{} {}", r + 1, c + 1);
            }
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let ctx = "edge list";
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| NgdError::parse(ctx, "empty input"))?;
        let m: usize =
            header.trim().parse().map_err(|_| NgdError::parse(ctx, format!("bad client count {header:?}")))?;
        let mut sources = vec![Vec::new(); m];
        for (lineno, line) in lines.enumerate() {
            let mut it = line.split_whitespace();
            let mut field = || -> Result<usize> {
                let tok =
                    it.next().ok_or_else(|| NgdError::parse(ctx, format!("line {}: missing field", lineno + 2)))?;
                let v: usize =
                    tok.parse().map_err(|_| NgdError::parse(ctx, format!("line {}: bad index {tok:?}", lineno + 2)))?;
                if v == 0 || v > m {
                    return Err(NgdError::parse(ctx, format!("line {}: index {v} out of 1..={m}", lineno + 2)));
                }
                Ok(v - 1)
            };
            let src = field()?;
            let dst = field()?;
            if it.next().is_some() {
                return Err(NgdError::parse(ctx, format!("line {}: trailing fields", lineno + 2)));
            }
            if sources[src].contains(&dst) {
                return Err(NgdError::parse(ctx, format!("line {}: duplicate edge", lineno + 2)));
            }
            sources[src].push(dst);
        }
        Self::from_sources(sources)
    }
}

/// Row-stochastic averaging weights derived from an adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    dense: DMatrix<f64>,
    rows: Vec<Vec<(usize, f64)>>,
}

impl WeightMatrix {
    /// Accepts any nonnegative row-stochastic matrix (rows within 1e-12 of 1).
    pub fn from_dense(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() || w.nrows() < 2 {
            return Err(NgdError::invalid("weight matrix must be square with M >= 2"));
        }
        let mut rows = Vec::with_capacity(w.nrows());
        for (r, row) in w.row_iter().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(NgdError::invalid(format!("row {} has a negative or non-finite weight", r + 1)));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(NgdError::invalid(format!("row {} sums to {s}, not 1", r + 1)));
            }
            rows.push(row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(c, &v)| (c, v)).collect());
        }
        Ok(Self { dense: w, rows })
    }

    pub fn m_clients(&self) -> usize {
        self.dense.nrows()
    }

    pub fn dense(&self) -> &DMatrix<f64> {
        &self.dense
    }

    /// Nonzero `(column, weight)` pairs of row `m`.
    pub fn row(&self, m: usize) -> &[(usize, f64)] {
        &self.rows[m]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.dense.column_iter().map(|c| linalg::compensated_sum(c.iter().copied())).collect()
    }
}

pub fn to_weight_matrix(adj: &AdjacencyMatrix) -> Result<WeightMatrix> {
    let m = adj.m_clients();
    let mut dense = DMatrix::zeros(m, m);
    let mut rows = Vec::with_capacity(m);
    for r in 0..m {
        let d = adj.in_degree(r);
        if d == 0 {
            return Err(NgdError::invalid(format!("client {} has in-degree 0", r + 1)));
        }
        let w = 1.0 / d as f64;
        let mut row = Vec::with_capacity(d);
        for &c in adj.sources(r) {
            dense[(r, c)] = w;
            row.push((c, w));
        }
        rows.push(row);
    }
    Ok(WeightMatrix { dense, rows })
}

/// Client 1 is linked both ways with every other client; nothing else.
pub fn build_central_client(m_clients: usize) -> Result<AdjacencyMatrix> {
    if m_clients < 2 {
        return Err(NgdError::invalid(format!("central-client needs M >= 2, got {m_clients}")));
    }
    let mut sources = vec![vec![0]; m_clients];
    sources[0] = (1..m_clients).collect();
    AdjacencyMatrix::from_sources(sources)
}

/// Client `m` listens to the next `degree` clients around the ring.
pub fn build_circle(m_clients: usize, degree: usize) -> Result<AdjacencyMatrix> {
    check_degree(m_clients, degree)?;
    let sources = (0..m_clients).map(|m| (1..=degree).map(|d| (m + d) % m_clients).collect()).collect();
    AdjacencyMatrix::from_sources(sources)
}

fn check_degree(m_clients: usize, degree: usize) -> Result<()> {
    if m_clients < 2 {
        return Err(NgdError::invalid(format!("need M >= 2, got {m_clients}")));
    }
    if degree < 1 || degree >= m_clients {
        return Err(NgdError::invalid(format!("degree {degree} outside 1..={}", m_clients - 1)));
    }
    Ok(())
}

/// One draw of the fixed-degree graph: every client samples `degree` distinct
/// sources uniformly without replacement from the other `M - 1` clients.
/// No connectivity constraint is applied.
pub fn sample_fixed_degree(m_clients: usize, degree: usize, seed: u64) -> Result<AdjacencyMatrix> {
    check_degree(m_clients, degree)?;
    let mut rng = stream_rng(seed, Stream::Topology);
    let sources = (0..m_clients)
        .map(|m| {
            index::sample(&mut rng, m_clients - 1, degree).into_iter().map(|k| if k >= m { k + 1 } else { k }).collect()
        })
        .collect();
    AdjacencyMatrix::from_sources(sources)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum Connectivity {
    /// Keep the first draw whatever its connectivity.
    Unconstrained,
    /// Redraw with seeds `seed, seed + 1, …` until strongly connected.
    Resample { max_attempts: u32 },
}

#[derive(Debug, Clone)]
pub struct FixedDegreeDraw {
    pub adjacency: AdjacencyMatrix,
    /// Number of draws made (1 when the first draw was accepted).
    pub attempts: u32,
    pub seed_used: u64,
    pub strongly_connected: bool,
}

/// Fixed-degree graph conditioned on strong connectivity: resamples up to
/// [`FIXED_DEGREE_MAX_ATTEMPTS`] times.
pub fn build_fixed_degree(m_clients: usize, degree: usize, seed: u64) -> Result<FixedDegreeDraw> {
    build_fixed_degree_with(m_clients, degree, seed, Connectivity::Resample { max_attempts: FIXED_DEGREE_MAX_ATTEMPTS })
}

pub fn build_fixed_degree_with(
    m_clients: usize,
    degree: usize,
    seed: u64,
    policy: Connectivity,
) -> Result<FixedDegreeDraw> {
    match policy {
        Connectivity::Unconstrained => {
            let adjacency = sample_fixed_degree(m_clients, degree, seed)?;
            let strongly_connected = is_strongly_connected(&adjacency);
            Ok(FixedDegreeDraw { adjacency, attempts: 1, seed_used: seed, strongly_connected })
        }
        Connectivity::Resample { max_attempts } => {
            for attempt in 0..max_attempts {
                let s = seed.wrapping_add(attempt as u64);
                let adjacency = sample_fixed_degree(m_clients, degree, s)?;
                if is_strongly_connected(&adjacency) {
                    if attempt > 0 {
                        log::warn!(
                            "fixed-degree graph (M={m_clients}, D={degree}) resampled {attempt} time(s) for strong connectivity"
                        );
                    }
                    return Ok(FixedDegreeDraw {
                        adjacency,
                        attempts: attempt + 1,
                        seed_used: s,
                        strongly_connected: true,
                    });
                }
            }
            Err(NgdError::TopologyGeneration {
                attempts: max_attempts,
                reason: format!("no strongly connected draw for M={m_clients}, D={degree}"),
            })
        }
    }
}

/// True iff every client can reach every other along directed edges.
pub fn is_strongly_connected(adj: &AdjacencyMatrix) -> bool {
    let m = adj.m_clients();
    let mut reverse = vec![Vec::new(); m];
    for r in 0..m {
        for &c in adj.sources(r) {
            reverse[c].push(r);
        }
    }
    let forward: Vec<Vec<usize>> = (0..m).map(|r| adj.sources(r).to_vec()).collect();
    reaches_all(&forward, 0) && reaches_all(&reverse, 0)
}

fn reaches_all(graph: &[Vec<usize>], start: usize) -> bool {
    let mut seen = vec![false; graph.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut count = 1;
    while let Some(v) = queue.pop_front() {
        for &u in &graph[v] {
            if !seen[u] {
                seen[u] = true;
                count += 1;
                queue.push_back(u);
            }
        }
    }
    count == graph.len()
}

/// `(SE²(W), SE(W))`: mean squared deviation of the column sums of `W` from 1.
pub fn se_w(w: &WeightMatrix) -> (f64, f64) {
    let m = w.m_clients() as f64;
    let se2 = linalg::compensated_sum(w.column_sums().iter().map(|s| (s - 1.0).powi(2))) / m;
    (se2, se2.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    pub se2_w: f64,
    /// Largest singular value of `W`.
    pub sigma_max_w: f64,
    /// Smallest positive singular value of `I - W`.
    pub sigma_min_i_minus_w: f64,
    /// Square root of the largest eigenvalue of `W^T (I - 11^T/M) W`.
    pub rho: f64,
}

pub fn balance_stats(w: &WeightMatrix) -> Result<BalanceStats> {
    let m = w.m_clients();
    let wd = w.dense();
    let (se2_w, _) = se_w(w);

    let sigma_max_w = linalg::sym_lambda_max(&(wd.transpose() * wd))?.max(0.0).sqrt();

    let i_minus_w = DMatrix::identity(m, m) - wd;
    let smallest_positive = linalg::sym_eigenvalues(&(i_minus_w.transpose() * &i_minus_w))?
        .into_iter()
        .find(|&v| v > POSITIVE_EIGEN_THRESHOLD)
        .ok_or_else(|| NgdError::numerical("(I - W)^T (I - W) has no positive eigenvalue"))?;

    let centering = DMatrix::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
    let sigma_w = wd.transpose() * centering * wd;
    let rho = linalg::sym_lambda_max(&sigma_w)?.max(0.0).sqrt();

    Ok(BalanceStats { se2_w, sigma_max_w, sigma_min_i_minus_w: smallest_positive.sqrt(), rho })
}

/// The three graph families used in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TopologyKind {
    CentralClient,
    Circle { degree: usize },
    FixedDegree { degree: usize },
}

impl TopologyKind {
    pub fn label(&self) -> String {
        match self {
            TopologyKind::CentralClient => "central_client".into(),
            TopologyKind::Circle { degree } => format!("circle_d{degree}"),
            TopologyKind::FixedDegree { degree } => format!("fixed_degree_d{degree}"),
        }
    }

    /// Builds the graph; `seed` only matters for the fixed-degree family.
    pub fn build(&self, m_clients: usize, seed: u64, policy: Connectivity) -> Result<FixedDegreeDraw> {
        let deterministic = |adjacency: AdjacencyMatrix| {
            let strongly_connected = is_strongly_connected(&adjacency);
            FixedDegreeDraw { adjacency, attempts: 1, seed_used: seed, strongly_connected }
        };
        match *self {
            TopologyKind::CentralClient => Ok(deterministic(build_central_client(m_clients)?)),
            TopologyKind::Circle { degree } => Ok(deterministic(build_circle(m_clients, degree)?)),
            TopologyKind::FixedDegree { degree } => build_fixed_degree_with(m_clients, degree, seed, policy),
        }
    }
}

/// Structural check for the central-client graph with client 1 as hub.
pub fn is_central_client(adj: &AdjacencyMatrix) -> bool {
    let m = adj.m_clients();
    adj.in_degree(0) == m - 1 && (1..m).all(|r| adj.sources(r) == [0])
}

/// Structural check for the circle graph with the given degree.
pub fn is_circle(adj: &AdjacencyMatrix, degree: usize) -> bool {
    match build_circle(adj.m_clients(), degree) {
        Ok(c) => &c == adj,
        Err(_) => false,
    }
}
