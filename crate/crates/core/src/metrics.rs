//! Convergence measures and the append-only run log.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("metric `{0}` requires ground truth, but this run has none")]
    NoGroundTruth(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Regularity: half the squared Frobenius distance of the live estimates
/// to the ground truth, `1/2 sum_i ||w_i - w_i*||^2`.
pub fn regularity(w: &DMatrix<f64>, w_star: &DMatrix<f64>) -> Result<f64, MetricsError> {
    if w.shape() != w_star.shape() {
        return Err(MetricsError::DimensionMismatch {
            what: "w_star",
            expected: w.ncols(),
            got: w_star.ncols(),
        });
    }
    Ok(0.5 * (w - w_star).norm_squared())
}

/// Consistency: mean squared Frobenius distance of the group precision
/// estimates to the truth, `1/(2q) sum_j ||Theta_j - Theta*||_F^2`.
pub fn consistency(
    thetas: &[DMatrix<f64>],
    theta_star: &DMatrix<f64>,
) -> Result<f64, MetricsError> {
    let q = thetas.len();
    let mut acc = 0.0;
    for th in thetas {
        if th.shape() != theta_star.shape() {
            return Err(MetricsError::DimensionMismatch {
                what: "theta",
                expected: theta_star.nrows(),
                got: th.nrows(),
            });
        }
        acc += (th - theta_star).norm_squared();
    }
    Ok(acc / (2.0 * q.max(1) as f64))
}

/// Estimation error: mean Frobenius distance of the per-group assembled
/// matrices to the truth, `1/q sum_l ||W^(l) - W*||_F`.
pub fn estimation_error(
    w_groups: &[DMatrix<f64>],
    w_star: &DMatrix<f64>,
) -> Result<f64, MetricsError> {
    let q = w_groups.len();
    let mut acc = 0.0;
    for w in w_groups {
        if w.shape() != w_star.shape() {
            return Err(MetricsError::DimensionMismatch {
                what: "w_group",
                expected: w_star.ncols(),
                got: w.ncols(),
            });
        }
        acc += (w - w_star).norm();
    }
    Ok(acc / q.max(1) as f64)
}

/// Prediction error on a node's data: the Euclidean residual norm
/// `||y - X w||`.
pub fn prediction_error(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<f64, MetricsError> {
    if x.ncols() != w.len() {
        return Err(MetricsError::DimensionMismatch {
            what: "w",
            expected: x.ncols(),
            got: w.len(),
        });
    }
    if x.nrows() != y.len() {
        return Err(MetricsError::DimensionMismatch {
            what: "y",
            expected: x.nrows(),
            got: y.len(),
        });
    }
    Ok((y - x * w).norm())
}

/// One logged sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub time: f64,
    pub metric: String,
    pub value: f64,
}

/// Append-only, time-ordered record of a run.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    rows: Vec<MetricRow>,
    pub seed: u64,
    pub config_hash: u64,
}

impl MetricsLog {
    pub fn new(seed: u64, config_hash: u64) -> Self {
        MetricsLog {
            rows: Vec::new(),
            seed,
            config_hash,
        }
    }

    /// Appends a sample; times must be nondecreasing per metric id.
    pub fn record(&mut self, time: f64, metric: &str, value: f64) {
        debug_assert!(
            self.rows
                .iter()
                .rev()
                .find(|r| r.metric == metric)
                .map_or(true, |r| r.time <= time),
            "metric {metric} went back in time"
        );
        self.rows.push(MetricRow {
            time,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    /// All samples of one metric as (time, value) pairs.
    pub fn series(&self, metric: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.time, r.value))
            .collect()
    }

    /// Last value of a metric, if any was recorded.
    pub fn last(&self, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.metric == metric)
            .map(|r| r.value)
    }

    /// Distinct metric ids in first-appearance order.
    pub fn metric_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for r in &self.rows {
            if !ids.contains(&r.metric) {
                ids.push(r.metric.clone());
            }
        }
        ids
    }

    /// Comma-separated serialization: `time,metric,value` per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.time, r.metric, r.value);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Companion metadata: seed and configuration echo.
    pub fn write_metadata(&self, path: &Path, config_echo: &str) -> Result<(), MetricsError> {
        let mut out = String::new();
        let _ = writeln!(out, "# seed = {}", self.seed);
        let _ = writeln!(out, "# config_hash = {:016x}", self.config_hash);
        out.push_str(config_echo);
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// FNV-1a hash of a byte string; used to fingerprint configurations and
/// serialized logs.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
