//! Losses, penalties, and gradients of the bi-level estimation problem.
//!
//! Inner problem (per node): weighted least squares on the node's stream
//! plus a within-group consensus penalty and a cross-task Mahalanobis
//! penalty. Outer problem (per messenger): ridge-penalized maximum
//! likelihood for the task precision matrix. Everything here is a pure
//! function; the engine owns all state.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("theta is singular")]
    SingularTheta,
}

/// Penalty configuration shared by the inner updates.
#[derive(Debug, Clone)]
pub struct PenaltyWeights {
    /// Consensus weight (within group).
    pub delta1: f64,
    /// Task weight (across groups).
    pub delta2: f64,
    /// Outer ridge magnitude at the current step.
    pub ridge: f64,
    /// Ridge target, symmetric positive definite.
    pub target: DMatrix<f64>,
}

fn check_dims(
    what: &'static str,
    expected: usize,
    got: usize,
) -> Result<(), ObjectiveError> {
    if expected == got {
        Ok(())
    } else {
        Err(ObjectiveError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

/// Weighted least-squares loss `1/2 (y - Xw)^T Omega^-1 (y - Xw)` for one
/// sample; `omega_inv` is the diagonal of the inverse error covariance.
pub fn inner_loss(
    w: &DVector<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    omega_inv: &DVector<f64>,
) -> Result<f64, ObjectiveError> {
    check_dims("w", x.ncols(), w.len())?;
    check_dims("y", x.nrows(), y.len())?;
    check_dims("omega_inv", x.nrows(), omega_inv.len())?;
    let r = y - x * w;
    Ok(0.5 * r.iter().zip(omega_inv.iter()).map(|(ri, oi)| ri * ri * oi).sum::<f64>())
}

/// Gradient of [`inner_loss`]: `X^T Omega^-1 (Xw - y)`.
pub fn inner_gradient(
    w: &DVector<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    omega_inv: &DVector<f64>,
) -> Result<DVector<f64>, ObjectiveError> {
    check_dims("w", x.ncols(), w.len())?;
    check_dims("y", x.nrows(), y.len())?;
    check_dims("omega_inv", x.nrows(), omega_inv.len())?;
    let r = x * w - y;
    Ok(x.transpose() * r.component_mul(omega_inv))
}

/// Gradient of the consensus penalty `1/2 sum_j a_ij ||w_i - w_j||^2` with
/// respect to `w_i`: `sum_j a_ij (w_i - w_j)`.
pub fn consensus_gradient<'a>(
    w_i: &DVector<f64>,
    neighbor_models: impl IntoIterator<Item = (f64, &'a DVector<f64>)>,
) -> DVector<f64> {
    let mut g = DVector::zeros(w_i.len());
    for (a, w_j) in neighbor_models {
        if a != 0.0 {
            g += (w_i - w_j) * a;
        }
    }
    g
}

/// Mahalanobis task penalty `tr((W - M) Theta (W - M)^T)`.
pub fn task_penalty_value(
    w: &DMatrix<f64>,
    m: &DMatrix<f64>,
    theta: &DMatrix<f64>,
) -> Result<f64, ObjectiveError> {
    check_dims("m rows", w.nrows(), m.nrows())?;
    check_dims("m cols", w.ncols(), m.ncols())?;
    check_dims("theta", w.ncols(), theta.nrows())?;
    let d = w - m;
    Ok((&d * theta * d.transpose()).trace())
}

/// Gradient of [`task_penalty_value`] with respect to column `i` of `W`:
/// twice the product of `(W - M)` with the `i`th column of `Theta`.
pub fn task_penalty_gradient(
    i: usize,
    w: &DMatrix<f64>,
    m: &DMatrix<f64>,
    theta: &DMatrix<f64>,
) -> Result<DVector<f64>, ObjectiveError> {
    check_dims("m rows", w.nrows(), m.nrows())?;
    check_dims("m cols", w.ncols(), m.ncols())?;
    check_dims("theta", w.ncols(), theta.nrows())?;
    if i >= w.ncols() {
        return Err(ObjectiveError::DimensionMismatch {
            what: "column index",
            expected: w.ncols(),
            got: i,
        });
    }
    let d = w - m;
    Ok(2.0 * (&d * theta.column(i)))
}

/// Outer objective `tr(S Theta) + b/2 ||Theta - T||_F^2 - log|Theta|`.
pub fn outer_objective(
    theta: &DMatrix<f64>,
    s: &DMatrix<f64>,
    b: f64,
    target: &DMatrix<f64>,
) -> Result<f64, ObjectiveError> {
    check_dims("s", theta.nrows(), s.nrows())?;
    check_dims("target", theta.nrows(), target.nrows())?;
    let chol = Cholesky::new(theta.clone()).ok_or(ObjectiveError::NotSpd)?;
    let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let diff = theta - target;
    Ok((s * theta).trace() + 0.5 * b * diff.norm_squared() - logdet)
}

/// Stochastic gradient of [`outer_objective`]:
/// `S + b (Theta - T) - Theta^-1 - noise`, symmetrized.
pub fn outer_gradient(
    theta: &DMatrix<f64>,
    s: &DMatrix<f64>,
    b: f64,
    target: &DMatrix<f64>,
    noise: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>, ObjectiveError> {
    check_dims("s", theta.nrows(), s.nrows())?;
    check_dims("target", theta.nrows(), target.nrows())?;
    let inv = theta
        .clone()
        .try_inverse()
        .ok_or(ObjectiveError::SingularTheta)?;
    let mut g = s + (theta - target) * b - inv;
    if let Some(n) = noise {
        check_dims("noise", theta.nrows(), n.nrows())?;
        g -= n;
    }
    Ok(symmetrize(&g))
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Strong-convexity constant of the noise-free inner loss for a realized
/// design: `2 lambda_min(X^T Omega^-1 X)`, clamped at zero.
pub fn kappa(x: &DMatrix<f64>, omega_inv: &DVector<f64>) -> f64 {
    let mut weighted = x.clone();
    for (mut row, oi) in weighted.row_iter_mut().zip(omega_inv.iter()) {
        row *= *oi;
    }
    let h = x.transpose() * weighted;
    let eigs = h.symmetric_eigen().eigenvalues;
    (2.0 * eigs.min()).max(0.0)
}

/// Central finite differences of a scalar function of a vector; step
/// `1e-6 * (1 + |x_j|)` per coordinate.
pub fn finite_diff_vec(
    f: impl Fn(&DVector<f64>) -> f64,
    at: &DVector<f64>,
) -> DVector<f64> {
    let mut g = DVector::zeros(at.len());
    for j in 0..at.len() {
        let h = 1e-6 * (1.0 + at[j].abs());
        let mut hi = at.clone();
        let mut lo = at.clone();
        hi[j] += h;
        lo[j] -= h;
        g[j] = (f(&hi) - f(&lo)) / (2.0 * h);
    }
    g
}

/// Central finite differences of a scalar function of a symmetric matrix,
/// perturbing upper-triangular coordinates symmetrically. The result is
/// the symmetric-matrix gradient (matching `d f(Theta + t E_sym) / dt`).
pub fn finite_diff_sym(
    f: impl Fn(&DMatrix<f64>) -> f64,
    at: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = at.nrows();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let h = 1e-6 * (1.0 + at[(i, j)].abs());
            let mut hi = at.clone();
            let mut lo = at.clone();
            hi[(i, j)] += h;
            lo[(i, j)] -= h;
            if i != j {
                hi[(j, i)] += h;
                lo[(j, i)] -= h;
            }
            let d = (f(&hi) - f(&lo)) / (2.0 * h);
            if i == j {
                g[(i, j)] = d;
            } else {
                // The directional derivative along the symmetric pair is
                // split between the two mirrored entries.
                g[(i, j)] = d / 2.0;
                g[(j, i)] = d / 2.0;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamId};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        stream(seed, StreamId::GroundTruth)
    }

    fn rand_vec(n: usize, r: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| r.sample(StandardNormal))
    }

    fn rand_mat(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
    }

    fn rand_spd(n: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = rand_mat(n, n, r);
        &a * a.transpose() + DMatrix::identity(n, n) * (n as f64 * 0.5)
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    #[test]
    fn loss_zero_at_exact_solution() {
        let mut r = rng(1);
        let x = rand_mat(5, 3, &mut r);
        let w = rand_vec(3, &mut r);
        let y = &x * &w;
        let oi = DVector::from_element(5, 1.0);
        assert_relative_eq!(inner_loss(&w, &x, &y, &oi).unwrap(), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn loss_identity_instance() {
        let x = DMatrix::identity(2, 2);
        let y = DVector::zeros(2);
        let w = DVector::from_element(2, 1.0);
        let oi = DVector::from_element(2, 1.0);
        assert_eq!(inner_loss(&w, &x, &y, &oi).unwrap(), 1.0);
    }

    #[test]
    fn loss_matches_entrywise_oracle() {
        let mut r = rng(2);
        let (m, p) = (6, 4);
        let x = rand_mat(m, p, &mut r);
        let w = rand_vec(p, &mut r);
        let y = rand_vec(m, &mut r);
        let oi = DVector::from_fn(m, |_, _| 0.5 + r.gen::<f64>());
        let mut acc = 0.0;
        for i in 0..m {
            let mut ri = y[i];
            for j in 0..p {
                ri -= x[(i, j)] * w[j];
            }
            acc += 0.5 * ri * ri * oi[i];
        }
        assert_relative_eq!(inner_loss(&w, &x, &y, &oi).unwrap(), acc, epsilon = 1e-12);
    }

    #[test]
    fn gradient_zero_at_noise_free_truth() {
        let mut r = rng(3);
        for _ in 0..50 {
            let (m, p) = (5, 3);
            let x = rand_mat(m, p, &mut r);
            let w_star = rand_vec(p, &mut r);
            let y = &x * &w_star;
            let oi = DVector::from_fn(m, |_, _| 0.5 + r.gen::<f64>());
            let g = inner_gradient(&w_star, &x, &y, &oi).unwrap();
            assert!(g.norm() < 1e-10, "gradient {g} not zero at truth");
        }
    }

    #[test]
    fn gradient_identity_design_is_residual() {
        let x = DMatrix::identity(3, 3);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let w = DVector::from_vec(vec![2.0, 2.0, 2.0]);
        let oi = DVector::from_element(3, 1.0);
        let g = inner_gradient(&w, &x, &y, &oi).unwrap();
        assert_eq!(g, &w - &y);
    }

    #[test]
    fn inner_gradient_matches_finite_differences() {
        let mut r = rng(4);
        for _ in 0..20 {
            let (m, p) = (7, 4);
            let x = rand_mat(m, p, &mut r);
            let y = rand_vec(m, &mut r);
            let w = rand_vec(p, &mut r);
            let oi = DVector::from_fn(m, |_, _| 0.5 + r.gen::<f64>());
            let g = inner_gradient(&w, &x, &y, &oi).unwrap();
            let fd = finite_diff_vec(|v| inner_loss(v, &x, &y, &oi).unwrap(), &w);
            assert!(rel_err(&fd, &g) <= 1e-6, "rel err {}", rel_err(&fd, &g));
        }
    }

    #[test]
    fn consensus_zero_when_models_agree() {
        let w = DVector::from_vec(vec![1.0, -1.0]);
        let n1 = w.clone();
        let n2 = w.clone();
        let g = consensus_gradient(&w, [(1.0, &n1), (1.0, &n2)]);
        assert_eq!(g, DVector::zeros(2));
    }

    #[test]
    fn consensus_single_neighbor() {
        let w = DVector::from_vec(vec![1.0, 0.0]);
        let other = DVector::zeros(2);
        let g = consensus_gradient(&w, [(1.0, &other)]);
        assert_eq!(g, w);
    }

    #[test]
    fn consensus_matches_finite_differences() {
        let mut r = rng(5);
        let p = 3;
        let w = rand_vec(p, &mut r);
        let neighbors: Vec<(f64, DVector<f64>)> =
            (0..3).map(|_| (1.0, rand_vec(p, &mut r))).collect();
        let g = consensus_gradient(&w, neighbors.iter().map(|(a, v)| (*a, v)));
        let value = |wi: &DVector<f64>| -> f64 {
            neighbors
                .iter()
                .map(|(a, wj)| 0.5 * a * (wi - wj).norm_squared())
                .sum()
        };
        let fd = finite_diff_vec(value, &w);
        assert!(rel_err(&fd, &g) <= 1e-6);
    }

    #[test]
    fn task_penalty_zero_at_mean() {
        let mut r = rng(6);
        let w = rand_mat(3, 4, &mut r);
        let theta = rand_spd(4, &mut r);
        assert_relative_eq!(
            task_penalty_value(&w, &w, &theta).unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn task_penalty_identity_theta_is_frobenius() {
        let mut r = rng(7);
        let w = rand_mat(3, 4, &mut r);
        let m = DMatrix::zeros(3, 4);
        let theta = DMatrix::identity(4, 4);
        assert_relative_eq!(
            task_penalty_value(&w, &m, &theta).unwrap(),
            w.norm_squared(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn task_penalty_matches_triple_loop() {
        let mut r = rng(8);
        let (p, n) = (3, 4);
        let w = rand_mat(p, n, &mut r);
        let m = rand_mat(p, n, &mut r);
        let theta = rand_spd(n, &mut r);
        let d = &w - &m;
        let mut acc = 0.0;
        for l in 0..p {
            for h in 0..n {
                for k in 0..n {
                    acc += theta[(h, k)] * d[(l, k)] * d[(l, h)];
                }
            }
        }
        assert_relative_eq!(
            task_penalty_value(&w, &m, &theta).unwrap(),
            acc,
            epsilon = 1e-10
        );
    }

    #[test]
    fn task_gradient_trivial_cases() {
        let mut r = rng(9);
        let (p, n) = (2, 3);
        let w = rand_mat(p, n, &mut r);
        let theta = rand_spd(n, &mut r);
        let g = task_penalty_gradient(1, &w, &w, &theta).unwrap();
        assert_eq!(g, DVector::zeros(p));
        let zero_m = DMatrix::zeros(p, n);
        let id = DMatrix::identity(n, n);
        let g = task_penalty_gradient(2, &w, &zero_m, &id).unwrap();
        let expected: DVector<f64> = 2.0 * w.column(2);
        assert_relative_eq!((g - expected).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn task_gradient_matches_finite_differences() {
        let mut r = rng(10);
        for _ in 0..20 {
            let (p, n) = (3, 4);
            let w = rand_mat(p, n, &mut r);
            let m = rand_mat(p, n, &mut r);
            let theta = rand_spd(n, &mut r);
            let i = r.gen_range(0..n);
            let g = task_penalty_gradient(i, &w, &m, &theta).unwrap();
            let value = |wi: &DVector<f64>| -> f64 {
                let mut wm = w.clone();
                wm.set_column(i, wi);
                task_penalty_value(&wm, &m, &theta).unwrap()
            };
            let fd = finite_diff_vec(value, &w.column(i).into_owned());
            assert!(rel_err(&fd, &g) <= 1e-6, "rel err {}", rel_err(&fd, &g));
        }
    }

    #[test]
    fn outer_objective_identity_instance() {
        let id = DMatrix::identity(3, 3);
        let v = outer_objective(&id, &id, 0.0, &id).unwrap();
        assert_relative_eq!(v, 3.0, epsilon = 1e-14);
    }

    #[test]
    fn outer_objective_ridge_vanishes_at_target() {
        let mut r = rng(11);
        let theta = rand_spd(4, &mut r);
        let s = rand_spd(4, &mut r);
        let v0 = outer_objective(&theta, &s, 0.0, &theta).unwrap();
        let v1 = outer_objective(&theta, &s, 7.5, &theta).unwrap();
        assert_relative_eq!(v0, v1, epsilon = 1e-12);
    }

    #[test]
    fn outer_objective_logdet_matches_eigen_oracle() {
        let mut r = rng(12);
        let n = 5;
        let theta = rand_spd(n, &mut r);
        let s = rand_spd(n, &mut r);
        let t = DMatrix::identity(n, n);
        let b = 0.3;
        let eigs = theta.clone().symmetric_eigen().eigenvalues;
        let logdet: f64 = eigs.iter().map(|e| e.ln()).sum();
        let oracle = (&s * &theta).trace() + 0.5 * b * (&theta - &t).norm_squared() - logdet;
        assert_relative_eq!(
            outer_objective(&theta, &s, b, &t).unwrap(),
            oracle,
            epsilon = 1e-8
        );
    }

    #[test]
    fn outer_objective_rejects_indefinite() {
        let mut theta = DMatrix::identity(2, 2);
        theta[(1, 1)] = -1.0;
        let s = DMatrix::identity(2, 2);
        assert!(matches!(
            outer_objective(&theta, &s, 0.0, &DMatrix::identity(2, 2)),
            Err(ObjectiveError::NotSpd)
        ));
    }

    #[test]
    fn outer_gradient_zero_at_stationary_point() {
        let mut r = rng(13);
        let theta = rand_spd(3, &mut r);
        let s = theta.clone().try_inverse().unwrap();
        let g = outer_gradient(&theta, &s, 4.0, &theta, None).unwrap();
        assert!(g.norm() < 1e-10);
    }

    #[test]
    fn outer_gradient_simple_instance() {
        let id = DMatrix::identity(2, 2);
        let s = &id * 2.0;
        let g = outer_gradient(&id, &s, 0.0, &id, None).unwrap();
        assert_relative_eq!((g - id).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn outer_gradient_matches_finite_differences() {
        let mut r = rng(14);
        for _ in 0..20 {
            let n = 4;
            let theta = rand_spd(n, &mut r);
            let s = rand_spd(n, &mut r);
            let t = DMatrix::identity(n, n);
            let b = 0.5;
            let g = outer_gradient(&theta, &s, b, &t, None).unwrap();
            let fd = finite_diff_sym(|th| outer_objective(th, &s, b, &t).unwrap(), &theta);
            let rel = (&fd - &g).norm() / g.norm().max(1e-12);
            assert!(rel <= 1e-5, "rel err {rel}");
        }
    }

    #[test]
    fn outer_gradient_output_is_exactly_symmetric() {
        let mut r = rng(15);
        let n = 4;
        let theta = rand_spd(n, &mut r);
        let s = rand_spd(n, &mut r);
        let noise = rand_mat(n, n, &mut r);
        let g = outer_gradient(&theta, &s, 0.2, &DMatrix::identity(n, n), Some(&noise)).unwrap();
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn kappa_identity_is_two() {
        let x = DMatrix::identity(3, 3);
        let oi = DVector::from_element(3, 1.0);
        assert_relative_eq!(kappa(&x, &oi), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn kappa_rank_deficient_is_zero() {
        let mut r = rng(16);
        let x = rand_mat(2, 4, &mut r);
        let oi = DVector::from_element(2, 1.0);
        assert_eq!(kappa(&x, &oi), 0.0);
    }

    #[test]
    fn kappa_matches_eigen_oracle() {
        let mut r = rng(17);
        let (m, p) = (6, 3);
        let x = rand_mat(m, p, &mut r);
        let oi = DVector::from_fn(m, |_, _| 0.5 + r.gen::<f64>());
        let mut h = DMatrix::zeros(p, p);
        for i in 0..m {
            let row = x.row(i).transpose();
            h += &row * row.transpose() * oi[i];
        }
        let eigs = h.symmetric_eigen().eigenvalues;
        assert_relative_eq!(kappa(&x, &oi), 2.0 * eigs.min(), epsilon = 1e-8);
    }

    #[test]
    fn strong_convexity_inequality_holds() {
        // (g(w1) - g(w2))^T (w1 - w2) >= kappa/2 ||w1 - w2||^2 for the
        // noise-free loss (kappa-strong convexity with the kappa/2
        // convention, kappa = 2 lambda_min of the Hessian).
        let mut r = rng(18);
        for _ in 0..20 {
            let (m, p) = (6, 3);
            let x = rand_mat(m, p, &mut r);
            let w_star = rand_vec(p, &mut r);
            let y = &x * &w_star;
            let oi = DVector::from_fn(m, |_, _| 0.5 + r.gen::<f64>());
            let k = kappa(&x, &oi);
            assert!(k >= 0.0);
            let w1 = rand_vec(p, &mut r);
            let w2 = rand_vec(p, &mut r);
            let g1 = inner_gradient(&w1, &x, &y, &oi).unwrap();
            let g2 = inner_gradient(&w2, &x, &y, &oi).unwrap();
            let lhs = (g1 - g2).dot(&(&w1 - &w2));
            let rhs = 0.5 * k * (&w1 - &w2).norm_squared();
            assert!(lhs + 1e-8 >= rhs, "lhs {lhs} rhs {rhs}");
        }
    }
}
