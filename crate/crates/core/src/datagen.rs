//! Synthetic data streams and dataset ingestion.
//!
//! Each node observes `y = X w* + eps + Lambda xi`: a design matrix with
//! Gaussian rows, individual noise `eps` private to the node, and a common
//! noise vector `xi` shared by every node at a tick and loaded through the
//! node's diagonal `Lambda`. Ground-truth coefficient matrices are drawn
//! from a matrix-variate normal prior whose column covariance encodes the
//! task relationships.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("omega is singular: sigma = 0 and a lambda diagonal entry is 0")]
    SingularOmega,
    #[error("{0} is not symmetric positive definite")]
    NotSpd(&'static str),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("source peak {0} outside [0, 255]")]
    InvalidPeak(f64),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("node `{node}` has {rows} rows but p = {needed} coefficients")]
    InsufficientRows {
        node: String,
        rows: usize,
        needed: usize,
    },
    #[error("column `{0}` is constant; cannot standardize")]
    DegenerateColumn(String),
    #[error("node `{0}` has no group assignment")]
    UnmappedNode(String),
    #[error("line {line}, column `{column}`: cannot parse `{value}` as a number")]
    BadNumber {
        line: usize,
        column: String,
        value: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-node generative model for the observation stream.
#[derive(Debug, Clone)]
pub struct NodeDataModel {
    design_mean: DVector<f64>,
    psi_chol: Option<DMatrix<f64>>,
    w_star: DVector<f64>,
    sigma: f64,
    lambda_diag: DVector<f64>,
    m: usize,
    p: usize,
    identity_design: bool,
}

impl NodeDataModel {
    /// General Gaussian design: rows of `X` are i.i.d. `N(design_mean, design_cov)`.
    pub fn new(
        design_mean: DVector<f64>,
        design_cov: DMatrix<f64>,
        w_star: DVector<f64>,
        sigma: f64,
        lambda_diag: DVector<f64>,
        m: usize,
    ) -> Result<Self, DatagenError> {
        let p = w_star.len();
        if design_mean.len() != p {
            return Err(DatagenError::DimensionMismatch {
                what: "design_mean",
                expected: p,
                got: design_mean.len(),
            });
        }
        if design_cov.nrows() != p || design_cov.ncols() != p {
            return Err(DatagenError::DimensionMismatch {
                what: "design_cov",
                expected: p,
                got: design_cov.nrows(),
            });
        }
        if lambda_diag.len() != m {
            return Err(DatagenError::DimensionMismatch {
                what: "lambda_diag",
                expected: m,
                got: lambda_diag.len(),
            });
        }
        if sigma < 0.0 {
            return Err(DatagenError::InvalidParam(format!("sigma = {sigma} < 0")));
        }
        let chol = Cholesky::new(design_cov).ok_or(DatagenError::NotSpd("design_cov"))?;
        Ok(NodeDataModel {
            design_mean,
            psi_chol: Some(chol.l()),
            w_star,
            sigma,
            lambda_diag,
            m,
            p,
            identity_design: false,
        })
    }

    /// Fixed identity design `X = I` (direct observation of the signal),
    /// so `m = p` and `y = w* + eps + Lambda xi`.
    pub fn identity(
        w_star: DVector<f64>,
        sigma: f64,
        lambda_diag: DVector<f64>,
    ) -> Result<Self, DatagenError> {
        let p = w_star.len();
        if lambda_diag.len() != p {
            return Err(DatagenError::DimensionMismatch {
                what: "lambda_diag",
                expected: p,
                got: lambda_diag.len(),
            });
        }
        if sigma < 0.0 {
            return Err(DatagenError::InvalidParam(format!("sigma = {sigma} < 0")));
        }
        Ok(NodeDataModel {
            design_mean: DVector::zeros(p),
            psi_chol: None,
            w_star,
            sigma,
            lambda_diag,
            m: p,
            p,
            identity_design: true,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.p)
    }

    pub fn w_star(&self) -> &DVector<f64> {
        &self.w_star
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn lambda_diag(&self) -> &DVector<f64> {
        &self.lambda_diag
    }

    pub fn is_identity_design(&self) -> bool {
        self.identity_design
    }

    /// Error covariance `Omega = sigma^2 I + Lambda^2`, exact entrywise.
    pub fn omega_diag(&self) -> DVector<f64> {
        let s2 = self.sigma * self.sigma;
        self.lambda_diag.map(|l| s2 + l * l)
    }

    /// `Omega` as a full (diagonal) matrix.
    pub fn omega(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.omega_diag())
    }

    /// Inverse of `Omega`; the downstream weighted losses need it.
    pub fn omega_inv_diag(&self) -> Result<DVector<f64>, DatagenError> {
        let d = self.omega_diag();
        if d.iter().any(|&v| v <= 0.0) {
            return Err(DatagenError::SingularOmega);
        }
        Ok(d.map(|v| 1.0 / v))
    }

    /// Draws one observation, loading the engine-supplied common noise
    /// realization `xi` through this node's `Lambda`.
    pub fn gen_observation(
        &self,
        xi: &DVector<f64>,
        tick: u64,
        node: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Observation, DatagenError> {
        if xi.len() != self.m {
            return Err(DatagenError::DimensionMismatch {
                what: "xi",
                expected: self.m,
                got: xi.len(),
            });
        }
        let x = if self.identity_design {
            DMatrix::identity(self.m, self.p)
        } else {
            let chol = self.psi_chol.as_ref().expect("general design has a factor");
            let mut x = DMatrix::zeros(self.m, self.p);
            let mut z = DVector::zeros(self.p);
            for r in 0..self.m {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let row = &self.design_mean + chol * &z;
                x.set_row(r, &row.transpose());
            }
            x
        };
        let mut y = &x * &self.w_star;
        if self.sigma > 0.0 {
            for v in y.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.sigma * z;
            }
        } else {
            // Keep the stream position independent of sigma.
            for _ in 0..self.m {
                let _: f64 = rng.sample(StandardNormal);
            }
        }
        y += self.lambda_diag.component_mul(xi);
        Ok(Observation { y, x, tick, node })
    }
}

/// One draw from a node's stream.
#[derive(Debug, Clone)]
pub struct Observation {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub tick: u64,
    pub node: usize,
}

/// Ground truth for synthetic runs.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub w_star: DMatrix<f64>,
    pub m_star: DMatrix<f64>,
    pub sigma_star: DMatrix<f64>,
    pub theta_star: DMatrix<f64>,
}

/// Draws `W* ~ MN(M*, I (x) Sigma)` (rows i.i.d. with covariance `Sigma`),
/// then replaces each group's columns by their mean so members share the
/// same coefficients. `group_of` maps node to 0-based group id.
pub fn sample_ground_truth(
    p: usize,
    group_of: &[usize],
    m_star: &DVector<f64>,
    sigma: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<GroundTruth, DatagenError> {
    let n = group_of.len();
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(DatagenError::DimensionMismatch {
            what: "sigma",
            expected: n,
            got: sigma.nrows(),
        });
    }
    if m_star.len() != p {
        return Err(DatagenError::DimensionMismatch {
            what: "m_star",
            expected: p,
            got: m_star.len(),
        });
    }
    let chol = Cholesky::new(sigma.clone()).ok_or(DatagenError::NotSpd("sigma"))?;
    let l = chol.l();

    let mut z = DMatrix::zeros(p, n);
    for v in z.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    // Row r of W is m*_r 1^T + z_r L^T, so each row has covariance Sigma.
    let mut w: DMatrix<f64> = &z * l.transpose();
    for r in 0..p {
        for c in 0..n {
            w[(r, c)] += m_star[r];
        }
    }

    let q = group_of.iter().copied().max().map_or(0, |g| g + 1);
    for g in 0..q {
        let members: Vec<usize> = (0..n).filter(|&i| group_of[i] == g).collect();
        if members.is_empty() {
            return Err(DatagenError::InvalidParam(format!("group {g} is empty")));
        }
        let mut mean = DVector::zeros(p);
        for &i in &members {
            mean += w.column(i);
        }
        mean /= members.len() as f64;
        for &i in &members {
            w.set_column(i, &mean);
        }
    }

    let theta = chol.inverse();
    let resid = (&theta * sigma - DMatrix::identity(n, n)).abs().max();
    if resid > 1e-8 {
        return Err(DatagenError::NotSpd("sigma (inverse check failed)"));
    }
    let m_star_mat = DMatrix::from_fn(p, q, |r, _| m_star[r]);
    Ok(GroundTruth {
        w_star: w,
        m_star: m_star_mat,
        sigma_star: sigma.clone(),
        theta_star: theta,
    })
}

/// Side length of the square random field; `SIDE * SIDE` cells of 1 unit.
pub const FIELD_SIDE: usize = 10;
/// Number of grid cells in the field.
pub const FIELD_CELLS: usize = FIELD_SIDE * FIELD_SIDE;

/// A heat source on the field.
#[derive(Debug, Clone, Copy)]
pub struct HeatSource {
    pub x: f64,
    pub y: f64,
    pub peak: f64,
}

/// Parameters of the grid random-field generator.
#[derive(Debug, Clone)]
pub struct MrfFieldSpec {
    pub sources: Vec<HeatSource>,
    /// Temperature decrease per unit distance from a source.
    pub drop_rate: f64,
    /// Region of influence around each source.
    pub radius: f64,
    /// Precision scale of the grid field; larger means smoother (the field
    /// has precision `tau * (grid Laplacian + eps I)`). `f64::INFINITY`
    /// yields a deterministic base field.
    pub tau: f64,
    pub eps: f64,
    /// Mean temperature of the base field.
    pub base_mean: f64,
    /// Half-width of the uniform per-group temperature offset.
    pub group_offset_scale: f64,
}

impl Default for MrfFieldSpec {
    fn default() -> Self {
        MrfFieldSpec {
            sources: Vec::new(),
            drop_rate: 25.0,
            radius: 5.0,
            tau: 1.0,
            eps: 0.01,
            base_mean: 60.0,
            group_offset_scale: 10.0,
        }
    }
}

/// Center coordinates of grid cell `i` (row-major over the field).
pub fn cell_center(i: usize) -> (f64, f64) {
    let row = i / FIELD_SIDE;
    let col = i % FIELD_SIDE;
    (col as f64 + 0.5, row as f64 + 0.5)
}

/// 4-neighbor Laplacian of the field grid.
fn grid_laplacian() -> DMatrix<f64> {
    let n = FIELD_CELLS;
    let mut l = DMatrix::zeros(n, n);
    let idx = |r: usize, c: usize| r * FIELD_SIDE + c;
    for r in 0..FIELD_SIDE {
        for c in 0..FIELD_SIDE {
            let i = idx(r, c);
            let mut link = |j: usize| {
                l[(i, j)] = -1.0;
                l[(i, i)] += 1.0;
            };
            if r > 0 {
                link(idx(r - 1, c));
            }
            if r + 1 < FIELD_SIDE {
                link(idx(r + 1, c));
            }
            if c > 0 {
                link(idx(r, c - 1));
            }
            if c + 1 < FIELD_SIDE {
                link(idx(r, c + 1));
            }
        }
    }
    l
}

/// Samples per-group temperature fields: one Gaussian Markov random field
/// base draw plus source contributions, shifted by a group-specific offset
/// and clamped to [0, 255].
pub fn gen_mrf_field(
    spec: &MrfFieldSpec,
    groups: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DVector<f64>>, DatagenError> {
    for s in &spec.sources {
        if !(0.0..=255.0).contains(&s.peak) {
            return Err(DatagenError::InvalidPeak(s.peak));
        }
    }
    if spec.tau <= 0.0 {
        return Err(DatagenError::InvalidParam(format!("tau = {}", spec.tau)));
    }

    let prec = grid_laplacian() + DMatrix::identity(FIELD_CELLS, FIELD_CELLS) * spec.eps;
    let chol = Cholesky::new(prec).ok_or(DatagenError::NotSpd("grid precision"))?;
    let mut z = DVector::zeros(FIELD_CELLS);
    for v in z.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    // Solve L^T x = z so x ~ N(0, (L L^T)^-1); scale by 1/sqrt(tau).
    let x = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or(DatagenError::NotSpd("grid precision factor"))?;
    let amp = if spec.tau.is_infinite() {
        0.0
    } else {
        1.0 / spec.tau.sqrt()
    };

    let mut base = DVector::from_element(FIELD_CELLS, spec.base_mean);
    base += x * amp;
    for i in 0..FIELD_CELLS {
        let (cx, cy) = cell_center(i);
        for s in &spec.sources {
            let d = ((cx - s.x).powi(2) + (cy - s.y).powi(2)).sqrt();
            if d <= spec.radius {
                base[i] += (s.peak - spec.drop_rate * d).max(0.0);
            }
        }
    }

    let mut fields = Vec::with_capacity(groups);
    for _ in 0..groups {
        let off = spec.group_offset_scale * (2.0 * rng.gen::<f64>() - 1.0);
        fields.push(base.map(|v| (v + off).clamp(0.0, 255.0)));
    }
    Ok(fields)
}

/// Column selection and grouping for tabular files.
#[derive(Debug, Clone)]
pub struct TabularSpec {
    /// Column whose value identifies the node a row belongs to.
    pub node_column: String,
    pub response_column: String,
    pub predictor_columns: Vec<String>,
    /// Node key -> 0-based group id; every key in the file must appear.
    pub group_map: BTreeMap<String, usize>,
    /// Z-score predictors and response with global mean/std.
    pub standardize: bool,
}

/// One node's design matrix (intercept column first) and response.
#[derive(Debug, Clone)]
pub struct NodeDataset {
    pub key: String,
    pub group: usize,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Loads a comma-separated file with a header row into per-node datasets,
/// ordered by (group, first appearance). The returned design matrices get
/// a leading intercept column of ones.
pub fn load_tabular_dataset(
    path: &Path,
    spec: &TabularSpec,
) -> Result<Vec<NodeDataset>, DatagenError> {
    let text = std::fs::read_to_string(path)?;
    load_tabular_from_str(&text, spec)
}

pub fn load_tabular_from_str(
    text: &str,
    spec: &TabularSpec,
) -> Result<Vec<NodeDataset>, DatagenError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DatagenError::MissingColumn(spec.node_column.clone()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| -> Result<usize, DatagenError> {
        columns
            .iter()
            .position(|&c| c == name)
            .ok_or_else(|| DatagenError::MissingColumn(name.to_string()))
    };
    let node_idx = find(&spec.node_column)?;
    let resp_idx = find(&spec.response_column)?;
    let pred_idx: Vec<usize> = spec
        .predictor_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<_, _>>()?;
    let p = pred_idx.len() + 1;

    struct RawNode {
        key: String,
        group: usize,
        rows: Vec<Vec<f64>>,
        resp: Vec<f64>,
    }
    let mut nodes: Vec<RawNode> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |i: usize, col: &str| -> Result<f64, DatagenError> {
            let raw = fields.get(i).copied().unwrap_or("");
            raw.parse::<f64>().map_err(|_| DatagenError::BadNumber {
                line: lineno + 1,
                column: col.to_string(),
                value: raw.to_string(),
            })
        };
        let key = fields.get(node_idx).copied().unwrap_or("").to_string();
        let group = *spec
            .group_map
            .get(&key)
            .ok_or_else(|| DatagenError::UnmappedNode(key.clone()))?;
        let resp = get(resp_idx, &spec.response_column)?;
        let mut row = Vec::with_capacity(pred_idx.len());
        for (k, &i) in pred_idx.iter().enumerate() {
            row.push(get(i, &spec.predictor_columns[k])?);
        }
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            nodes.push(RawNode {
                key,
                group,
                rows: Vec::new(),
                resp: Vec::new(),
            });
            nodes.len() - 1
        });
        nodes[slot].rows.push(row);
        nodes[slot].resp.push(resp);
    }

    // Global standardization statistics.
    let ncols = pred_idx.len();
    let total: usize = nodes.iter().map(|n| n.rows.len()).sum();
    let mut shift = vec![0.0; ncols + 1];
    let mut scale = vec![1.0; ncols + 1];
    if spec.standardize {
        let mut mean = vec![0.0; ncols + 1];
        for node in &nodes {
            for row in &node.rows {
                for (c, &v) in row.iter().enumerate() {
                    mean[c] += v;
                }
            }
            for &v in &node.resp {
                mean[ncols] += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= total as f64;
        }
        let mut var = vec![0.0; ncols + 1];
        for node in &nodes {
            for row in &node.rows {
                for (c, &v) in row.iter().enumerate() {
                    var[c] += (v - mean[c]).powi(2);
                }
            }
            for &v in &node.resp {
                var[ncols] += (v - mean[ncols]).powi(2);
            }
        }
        for (c, v) in var.iter_mut().enumerate() {
            let sd = (*v / (total.max(2) - 1) as f64).sqrt();
            if sd < 1e-12 {
                let name = if c == ncols {
                    spec.response_column.clone()
                } else {
                    spec.predictor_columns[c].clone()
                };
                return Err(DatagenError::DegenerateColumn(name));
            }
            shift[c] = mean[c];
            scale[c] = sd;
        }
    }

    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by_key(|&i| (nodes[i].group, i));
    let mut out = Vec::with_capacity(nodes.len());
    for &i in &order {
        let node = &nodes[i];
        let rows = node.rows.len();
        if rows < p {
            return Err(DatagenError::InsufficientRows {
                node: node.key.clone(),
                rows,
                needed: p,
            });
        }
        let mut x = DMatrix::zeros(rows, p);
        let mut y = DVector::zeros(rows);
        for (r, row) in node.rows.iter().enumerate() {
            x[(r, 0)] = 1.0;
            for (c, &v) in row.iter().enumerate() {
                x[(r, c + 1)] = (v - shift[c]) / scale[c];
            }
            y[r] = (node.resp[r] - shift[ncols]) / scale[ncols];
        }
        out.push(NodeDataset {
            key: node.key.clone(),
            group: node.group,
            x,
            y,
        });
    }
    Ok(out)
}

/// Writes rows as comma-separated text with a header; floats are printed
/// with the shortest representation that parses back bit-exactly.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), DatagenError> {
    let mut out = String::new();
    let _ = writeln!(out, "{}", header.join(","));
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Serializes a matrix as comma-separated rows under a `rows cols` header.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), DatagenError> {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let line: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a matrix written by [`write_matrix`].
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, DatagenError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DatagenError::BadNumber {
        line: 1,
        column: "shape".into(),
        value: String::new(),
    })?;
    let mut toks = header.split_whitespace();
    let bad = |line: usize, value: &str| DatagenError::BadNumber {
        line,
        column: "shape".into(),
        value: value.to_string(),
    };
    let rows: usize = toks
        .next()
        .ok_or_else(|| bad(1, header))?
        .parse()
        .map_err(|_| bad(1, header))?;
    let cols: usize = toks
        .next()
        .ok_or_else(|| bad(1, header))?
        .parse()
        .map_err(|_| bad(1, header))?;
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let (lineno, line) = lines.next().ok_or_else(|| bad(r + 2, "missing row"))?;
        for (c, tok) in line.split(',').enumerate().take(cols) {
            m[(r, c)] = tok.trim().parse::<f64>().map_err(|_| DatagenError::BadNumber {
                line: lineno + 1,
                column: format!("col {c}"),
                value: tok.to_string(),
            })?;
        }
    }
    Ok(m)
}
