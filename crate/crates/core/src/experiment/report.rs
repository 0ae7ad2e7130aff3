//! Codebook diagnostics from run records.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::RunRecord;
use crate::decorrelation::{correlation_matrix, mean_offdiag_sq_corr, DEFAULT_EPSILON};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookReport {
    pub config_hash: String,
    pub label: String,
    /// Mean off-diagonal squared correlation after each epoch. Empty for
    /// runs without a codebook.
    pub trajectory: Vec<f64>,
    /// Same statistic for the kept codebook.
    pub final_mean_sq_corr: Option<f64>,
    /// `K x K` correlation matrix of the kept codebook.
    pub correlation: Option<Tensor>,
}

impl CodebookReport {
    pub fn is_empty(&self) -> bool {
        self.correlation.is_none()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} [{}]\n", self.label, self.config_hash);
        let Some(r) = &self.correlation else {
            out.push_str("  no codebook\n");
            return out;
        };
        let traj: Vec<String> = self.trajectory.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(out, "  mean squared correlation by epoch: {}", traj.join(" "));
        let _ = writeln!(out, "  kept codebook: {:.6}", self.final_mean_sq_corr.unwrap_or(f64::NAN));
        let k = r.shape()[0];
        for row in r.data().chunks(k) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:+.3}")).collect();
            let _ = writeln!(out, "  {}", cells.join(" "));
        }
        out
    }
}

/// One report per record; gmp/gap records yield empty diagnostics.
pub fn report(records: &[RunRecord]) -> Result<Vec<CodebookReport>> {
    records
        .iter()
        .map(|rec| {
            let trajectory = rec.epochs.iter().filter_map(|m| m.mean_sq_corr).collect();
            let (final_mean_sq_corr, correlation) = match &rec.codebook {
                Some(cb) => {
                    let centers = Tensor::from_vec(&[cb.k, cb.d], cb.centers.clone())?;
                    let sim = rec.config.similarity;
                    (
                        Some(mean_offdiag_sq_corr(&centers, DEFAULT_EPSILON, sim)?),
                        Some(correlation_matrix(&centers, DEFAULT_EPSILON, sim)?),
                    )
                }
                None => (None, None),
            };
            Ok(CodebookReport {
                config_hash: rec.config_hash.clone(),
                label: rec.config.label(),
                trajectory,
                final_mean_sq_corr,
                correlation,
            })
        })
        .collect()
}
