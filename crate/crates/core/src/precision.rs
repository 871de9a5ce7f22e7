//! Messenger-side estimation of the task precision matrix.
//!
//! Each messenger keeps a `PrecisionState`: the current precision estimate,
//! the empirical covariance of the centered assembled coefficients, the
//! ridge target, and the step/ridge schedules. Updates are stochastic
//! gradient steps on the ridge-penalized log-likelihood, safeguarded so the
//! trace stays positive and repaired onto the SPD cone after noisy steps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::objectives::{outer_gradient, ObjectiveError};

#[derive(Debug, Error)]
pub enum PrecisionError {
    #[error("trace of theta is not positive ({0})")]
    NonpositiveTrace(f64),
    #[error("precision update failed: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("nonpositive constant: {0}")]
    NonpositiveConstant(&'static str),
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Decreasing sequence specification for ridge and stepsize schedules.
#[derive(Debug, Clone, Copy)]
pub enum Schedule {
    /// `scale / k` for step count k = 1, 2, ...
    Harmonic { scale: f64 },
    /// Fixed value (used by stationarity checks).
    Constant { value: f64 },
}

impl Schedule {
    pub fn at(&self, k: u64) -> f64 {
        match *self {
            Schedule::Harmonic { scale } => scale / k.max(1) as f64,
            Schedule::Constant { value } => value,
        }
    }
}

/// Outcome of the eigenvalue floor repair.
#[derive(Debug, Clone)]
pub struct SpdRepair {
    pub matrix: DMatrix<f64>,
    /// Number of eigenvalues clamped up to the floor.
    pub clamped: usize,
}

/// Eigen-decomposes a symmetric matrix, clamps eigenvalues below
/// `eig_floor` up to the floor, and reconstructs.
pub fn enforce_spd(a: &DMatrix<f64>, eig_floor: f64) -> SpdRepair {
    let eig = a.clone().symmetric_eigen();
    let clamped = eig.eigenvalues.iter().filter(|&&l| l < eig_floor).count();
    if clamped == 0 {
        return SpdRepair {
            matrix: a.clone(),
            clamped: 0,
        };
    }
    let vals = eig.eigenvalues.map(|l| l.max(eig_floor));
    let matrix = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    SpdRepair {
        // Reconstruction breaks exact symmetry at the last ulp.
        matrix: crate::objectives::symmetrize(&matrix),
        clamped,
    }
}

/// Subtracts the across-column mean from every column; returns the
/// centered matrix and the mean vector.
pub fn center_estimates(w: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = w.ncols() as f64;
    let mut mean = DVector::zeros(w.nrows());
    for c in w.column_iter() {
        mean += c;
    }
    mean /= n;
    let mut centered = w.clone();
    for mut c in centered.column_iter_mut() {
        c -= &mean;
    }
    (centered, mean)
}

/// Empirical covariance of the rows of a centered matrix:
/// `(1/p) sum_k w_k^c (w_k^c)^T` over the p rows, an N x N PSD matrix.
pub fn empirical_covariance(w_c: &DMatrix<f64>) -> DMatrix<f64> {
    let p = w_c.nrows().max(1) as f64;
    (w_c.transpose() * w_c) / p
}

/// One messenger's outer-problem state.
#[derive(Debug, Clone)]
pub struct PrecisionState {
    theta: DMatrix<f64>,
    s: DMatrix<f64>,
    target: DMatrix<f64>,
    ridge_schedule: Schedule,
    step_schedule: Schedule,
    /// Constant multiplier of the decreasing stepsize part.
    beta: f64,
    eig_floor: f64,
    update_count: u64,
    /// Running bound on the fourth moment of centered entries.
    f_hat: f64,
    floor_activations: u64,
    safeguard_shrinks: u64,
}

impl PrecisionState {
    pub fn new(
        n: usize,
        target: DMatrix<f64>,
        beta: f64,
        step_schedule: Schedule,
        ridge_schedule: Schedule,
        eig_floor: f64,
    ) -> Self {
        PrecisionState {
            theta: DMatrix::identity(n, n),
            s: DMatrix::zeros(n, n),
            target,
            ridge_schedule,
            step_schedule,
            beta,
            eig_floor,
            update_count: 0,
            f_hat: 0.0,
            floor_activations: 0,
            safeguard_shrinks: 0,
        }
    }

    pub fn with_theta(mut self, theta: DMatrix<f64>) -> Self {
        self.theta = theta;
        self
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn target(&self) -> &DMatrix<f64> {
        &self.target
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn floor_activations(&self) -> u64 {
        self.floor_activations
    }

    pub fn safeguard_shrinks(&self) -> u64 {
        self.safeguard_shrinks
    }

    pub fn f_hat(&self) -> f64 {
        self.f_hat
    }

    /// Ridge magnitude for the upcoming step.
    pub fn current_ridge(&self) -> f64 {
        self.ridge_schedule.at(self.update_count + 1)
    }

    /// Scheduled decreasing stepsize part for the upcoming step.
    pub fn scheduled_step(&self) -> f64 {
        self.step_schedule.at(self.update_count + 1)
    }

    /// Admissible decreasing stepsize: the scheduled value shrunk to keep
    /// the trace positive through the next update. Bound one keeps the
    /// step short of `|tr(Theta) / (2 tr(Theta - T))|`; bound two is
    /// `2 tr(Theta) / (3 N sqrt(F))` with `F` the running fourth-moment
    /// bound.
    pub fn check_outer_stepsize(&self, f_hat: f64) -> Result<f64, PrecisionError> {
        let trace = self.theta.trace();
        if trace <= 0.0 {
            return Err(PrecisionError::NonpositiveTrace(trace));
        }
        let scheduled = self.scheduled_step();
        let diff_trace = (&self.theta - &self.target).trace();
        let bound1 = if diff_trace == 0.0 {
            f64::INFINITY
        } else {
            (trace / (2.0 * diff_trace)).abs()
        };
        let n = self.theta.nrows() as f64;
        let bound2 = if f_hat > 0.0 {
            2.0 * trace / (3.0 * n * f_hat.sqrt())
        } else {
            f64::INFINITY
        };
        Ok(scheduled.min(0.9 * bound1).min(bound2))
    }

    /// Overrides the empirical covariance directly (stationarity checks
    /// iterate the update rule under a fixed S).
    pub fn set_covariance(&mut self, s: DMatrix<f64>) {
        self.s = s;
    }

    /// One safeguarded stochastic precision update from an assembled
    /// coefficient matrix. Recomputes the empirical covariance, takes a
    /// noisy gradient step, and repairs the result onto the SPD cone.
    pub fn step(
        &mut self,
        w_assembled: &DMatrix<f64>,
        noise_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), PrecisionError> {
        if w_assembled.ncols() != self.theta.nrows() {
            return Err(PrecisionError::DimensionMismatch {
                expected: self.theta.nrows(),
                got: w_assembled.ncols(),
            });
        }
        let (centered, _) = center_estimates(w_assembled);
        self.s = empirical_covariance(&centered);
        let entries = (centered.nrows() * centered.ncols()) as f64;
        let moment4 = centered.iter().map(|v| v.powi(4)).sum::<f64>() / entries.max(1.0);
        self.f_hat = self.f_hat.max(moment4);
        self.gradient_step(noise_std, rng)
    }

    /// The gradient half of [`PrecisionState::step`], using the covariance
    /// already stored.
    pub fn gradient_step(
        &mut self,
        noise_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), PrecisionError> {
        let beta_hat = self.check_outer_stepsize(self.f_hat)?;
        if beta_hat < self.scheduled_step() {
            self.safeguard_shrinks += 1;
        }
        let beta_k = self.beta * beta_hat;
        let b_k = self.current_ridge();

        let noise = if noise_std > 0.0 {
            let n = self.theta.nrows();
            Some(DMatrix::from_fn(n, n, |_, _| {
                let z: f64 = rng.sample(StandardNormal);
                noise_std * z
            }))
        } else {
            None
        };
        let grad = outer_gradient(&self.theta, &self.s, b_k, &self.target, noise.as_ref())?;
        let raw = &self.theta - grad * beta_k;
        let repair = enforce_spd(&raw, self.eig_floor);
        if repair.clamped > 0 {
            self.floor_activations += 1;
        }
        self.theta = repair.matrix;
        self.update_count += 1;
        Ok(())
    }
}

/// User-supplied constants of the long-run convergence bounds; inputs to
/// the stepsize advisor only.
#[derive(Debug, Clone)]
pub struct AnalysisConstants {
    /// Long-run coefficient of the regularity influence on consistency.
    pub c1p: f64,
    /// Long-run additive consistency coefficient.
    pub c2: f64,
    /// Effective inner contraction rate.
    pub cp: f64,
    /// Sum over nodes of rate-weighted Brownian magnitudes.
    pub ag_sum: f64,
    /// Per-group gradient-noise scales.
    pub iota: Vec<f64>,
    /// Per-group task-penalty update rates.
    pub phi_rates: Vec<f64>,
    /// Integral of the decreasing stepsize part.
    pub beta_tilde: f64,
    /// Number of nodes.
    pub node_count: usize,
}

/// Stepsize choices meeting target consistency and regularity levels.
#[derive(Debug, Clone, Copy)]
pub struct StepsizeAdvice {
    /// Precision update rate.
    pub phi: f64,
    /// Outer constant stepsize part.
    pub beta: f64,
    /// Inner constant stepsize.
    pub gamma: f64,
}

/// Picks (phi, beta, gamma) so the expected consistency and regularity
/// levels land near `zeta1` and `zeta2`. The two outer budget shares are
/// split evenly: `zeta3 = zeta4 = zeta1 / beta_tilde`.
pub fn advise_stepsizes(
    constants: &AnalysisConstants,
    zeta1: f64,
    zeta2: f64,
) -> Result<StepsizeAdvice, PrecisionError> {
    if zeta1 <= 0.0 {
        return Err(PrecisionError::NonpositiveConstant("zeta1"));
    }
    if zeta2 <= 0.0 {
        return Err(PrecisionError::NonpositiveConstant("zeta2"));
    }
    if constants.beta_tilde <= 0.0 {
        return Err(PrecisionError::NonpositiveConstant("beta_tilde"));
    }
    if constants.cp <= 0.0 {
        return Err(PrecisionError::NonpositiveConstant("cp"));
    }
    let zeta3 = zeta1 / constants.beta_tilde;
    let zeta4 = zeta3;
    let phi = zeta3 * (1.0 / (constants.c1p + constants.c2)).min(1.0);
    let n = constants.node_count as f64;
    let mut beta_min = 1.0f64;
    for (&iota, &phi_j) in constants.iota.iter().zip(constants.phi_rates.iter()) {
        let prod = iota * phi_j;
        if prod > 0.0 {
            beta_min = beta_min.min(1.0 / (n * prod.sqrt()));
        }
    }
    let beta = zeta4 * beta_min;
    let gamma = if constants.ag_sum > 0.0 {
        zeta2 * (constants.cp / constants.ag_sum).min(1.0)
    } else {
        zeta2
    };
    Ok(StepsizeAdvice { phi, beta, gamma })
}
