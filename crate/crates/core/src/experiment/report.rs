//! Merges result directories into plot-ready tables.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::diagnostics;
use crate::error::{NgdError, Result};

use super::output::{self, CsvTable, CsvWriter, Manifest, AGGREGATE, FINAL};
use super::{DEGREE_QUANTILES, DEGREE_QUANTILE_COLUMNS};

pub const CURVES: &str = "curves.csv";
pub const FINAL_SUMMARY: &str = "final_summary.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportOutput {
    pub curves: PathBuf,
    pub final_summary: PathBuf,
    pub degree_quantiles: Option<PathBuf>,
    pub runs: usize,
    pub sweeps: usize,
}

/// Every input is a directory written by `run` or `sweep-degree`.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<ReportOutput> {
    if inputs.is_empty() {
        return Err(NgdError::Config("report needs at least one result directory".into()));
    }
    let manifests = inputs.iter().map(|p| Manifest::read(p)).collect::<Result<Vec<_>>>()?;
    let mut digests: Vec<&str> = manifests.iter().map(|m| m.config_digest.as_str()).collect();
    digests.sort_unstable();
    let digest = hex::encode(Sha256::digest(digests.join("\n").as_bytes()));

    let mut curves = CsvWriter::new(
        &digest,
        &["model", "topology", "pattern", "alpha", "iteration", "replicates", "median_log_mse"],
    );
    let mut finals = CsvWriter::new(
        &digest,
        &[
            "model",
            "topology",
            "pattern",
            "alpha",
            "replicates",
            "diverged",
            "median_final_log_mse",
            "global_median_log_mse",
        ],
    );
    let mut qcols = vec!["model", "topology", "pattern"];
    qcols.extend(DEGREE_QUANTILE_COLUMNS);
    let mut quant = CsvWriter::new(&digest, &qcols);
    let (mut runs, mut sweeps) = (0, 0);

    for (dir, m) in inputs.iter().zip(&manifests) {
        let prefix = [m.config.model.to_string(), m.topology.clone(), m.config.pattern.as_str().to_string()];
        match m.command.as_str() {
            "run" => {
                runs += 1;
                let agg = CsvTable::read(&dir.join(AGGREGATE))?;
                let (ca, ci, cr, cl) = (
                    agg.column("alpha")?,
                    agg.column("iteration")?,
                    agg.column("replicates")?,
                    agg.column("median_log_mse")?,
                );
                for row in &agg.rows {
                    let mut r = prefix.to_vec();
                    r.extend([row[ca].clone(), row[ci].clone(), row[cr].clone(), row[cl].clone()]);
                    curves.row(r);
                }
                for r in final_rows(&dir.join(FINAL), &m.alphas)? {
                    let mut full = prefix.to_vec();
                    full.extend(r);
                    finals.row(full);
                }
            }
            "sweep-degree" => {
                sweeps += 1;
                let q = CsvTable::read(&dir.join(DEGREE_QUANTILES))?;
                for row in &q.rows {
                    let mut r = prefix.to_vec();
                    r.extend(row.iter().cloned());
                    quant.row(r);
                }
            }
            other => return Err(NgdError::parse(dir.display().to_string(), format!("unknown command {other:?}"))),
        }
    }

    output::ensure_dir(out)?;
    let res = ReportOutput {
        curves: out.join(CURVES),
        final_summary: out.join(FINAL_SUMMARY),
        degree_quantiles: (sweeps > 0).then(|| out.join(DEGREE_QUANTILES)),
        runs,
        sweeps,
    };
    curves.write(&res.curves)?;
    finals.write(&res.final_summary)?;
    if let Some(p) = &res.degree_quantiles {
        quant.write(p)?;
    }
    Ok(res)
}

/// Per-alpha medians of a `final.csv`, divergent rows counted as `+inf`.
fn final_rows(path: &Path, alphas: &[f64]) -> Result<Vec<Vec<String>>> {
    let t = CsvTable::read(path)?;
    let (ca, cs, cl, cg) = (t.column("alpha")?, t.column("status")?, t.column("log_mse")?, t.column("global_log_mse")?);
    let mut out = Vec::new();
    for &alpha in alphas {
        let mut vals = Vec::new();
        let mut globals = Vec::new();
        let mut diverged = 0;
        for i in 0..t.rows.len() {
            if t.f64_at(i, ca)? != alpha {
                continue;
            }
            if t.rows[i][cs] != "ok" {
                diverged += 1;
            }
            vals.push(t.f64_at(i, cl)?);
            globals.push(t.f64_at(i, cg)?);
        }
        out.push(vec![
            output::num(alpha),
            vals.len().to_string(),
            diverged.to_string(),
            output::num(diagnostics::median(&vals)),
            output::num(diagnostics::median(&globals)),
        ]);
    }
    Ok(out)
}
