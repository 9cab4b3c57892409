//! Linear-Gaussian latent dynamics
//! `z_1 ~ N(0, sigma_z)`, `z_{t+1} = A z_t + B u_t + w_t`, `w_t ~ N(0, sigma_w)`.
//!
//! Input indexing: `u_seq[t]` drives the transition from `z_t` to `z_{t+1}`,
//! so a trajectory of `T` states carries `T - 1` inputs.

use rand::Rng;

use crate::error::{check_dim, Result, VssfError};
use crate::gaussian::{cholesky, symmetrize, GaussianMoment, Matrix, Vector};

const STABILITY_MARGIN: f64 = 1e-9;
const LYAPUNOV_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsParams {
    pub a: Matrix,
    pub b: Matrix,
    pub sigma_w: Matrix,
    pub sigma_z: Matrix,
}

impl DynamicsParams {
    pub fn new(a: Matrix, b: Matrix, sigma_w: Matrix, sigma_z: Matrix) -> Result<Self> {
        let m = a.nrows();
        check_dim("transition matrix columns", m, a.ncols())?;
        check_dim("input matrix rows", m, b.nrows())?;
        check_dim("process noise", m, sigma_w.nrows())?;
        check_dim("prior covariance", m, sigma_z.nrows())?;
        cholesky(&sigma_w)?;
        cholesky(&sigma_z)?;
        Ok(Self {
            a,
            b,
            sigma_w: symmetrize(&sigma_w),
            sigma_z: symmetrize(&sigma_z),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Relative Frobenius residual of the stationarity condition
    /// `sigma_z = A sigma_z A^T + sigma_w`.
    pub fn stationarity_residual(&self) -> f64 {
        let r = &self.sigma_z - (&self.a * &self.sigma_z * self.a.transpose() + &self.sigma_w);
        r.norm() / self.sigma_z.norm()
    }

    pub fn is_stationary_consistent(&self) -> bool {
        self.stationarity_residual() < 1e-6
    }

    fn check_input(&self, u: &Vector) -> Result<()> {
        check_dim("input vector", self.input_dim(), u.len())
    }

    /// Mean of the transition density from `z`.
    pub fn transition_mean(&self, z: &Vector, u: &Vector) -> Result<Vector> {
        check_dim("state vector", self.state_dim(), z.len())?;
        self.check_input(u)?;
        Ok(&self.a * z + &self.b * u)
    }

    /// Kalman propagation: `N(A p + B u, A P A^T + sigma_w)`.
    pub fn predict(&self, belief: &GaussianMoment, u: &Vector) -> Result<GaussianMoment> {
        let mean = self.transition_mean(&belief.mean, u)?;
        let cov = symmetrize(&(&self.a * &belief.cov * self.a.transpose() + &self.sigma_w));
        Ok(GaussianMoment { mean, cov })
    }

    /// `log N(z_next; A z + B u, sigma_w)`.
    pub fn transition_log_density(&self, z: &Vector, u: &Vector, z_next: &Vector) -> Result<f64> {
        check_dim("next state", self.state_dim(), z_next.len())?;
        let mean = self.transition_mean(z, u)?;
        GaussianMoment {
            mean,
            cov: self.sigma_w.clone(),
        }
        .log_density(z_next)
    }

    /// Time-invariant latent prior `N(0, sigma_z)`.
    pub fn prior_belief(&self) -> GaussianMoment {
        GaussianMoment {
            mean: Vector::zeros(self.state_dim()),
            cov: self.sigma_z.clone(),
        }
    }

    /// Draws `z_1 ~ N(0, sigma_z)` and rolls the dynamics forward through `u_seq`.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, u_seq: &[Vector], rng: &mut R) -> Result<Vec<Vector>> {
        let z1 = self.prior_belief().sample(rng)?;
        self.simulate_from(z1, u_seq, rng)
    }

    /// Rolls the dynamics forward from a given initial state.
    pub fn simulate_from<R: Rng + ?Sized>(
        &self,
        z1: Vector,
        u_seq: &[Vector],
        rng: &mut R,
    ) -> Result<Vec<Vector>> {
        check_dim("initial state", self.state_dim(), z1.len())?;
        let noise = GaussianMoment {
            mean: Vector::zeros(self.state_dim()),
            cov: self.sigma_w.clone(),
        };
        let factor = noise.cov_factor()?;
        let mut traj = Vec::with_capacity(u_seq.len() + 1);
        traj.push(z1);
        for u in u_seq {
            let eps = crate::gaussian::standard_normal_vector(self.state_dim(), rng);
            let next = self.transition_mean(traj.last().unwrap(), u)? + &factor * eps;
            traj.push(next);
        }
        Ok(traj)
    }
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Solves the discrete Lyapunov equation `S = A S A^T + sigma_w`.
///
/// Uses the doubling form of the fixed-point iteration
/// (`S <- S + A_k S A_k^T`, `A_k <- A_k^2`), which reaches the same fixed
/// point in logarithmically many sweeps.
pub fn stationary_covariance(a: &Matrix, sigma_w: &Matrix) -> Result<Matrix> {
    check_dim("lyapunov", a.nrows(), sigma_w.nrows())?;
    let rho = spectral_radius(a);
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(VssfError::NotStable(rho));
    }
    let mut s = sigma_w.clone();
    let mut ak = a.clone();
    for _ in 0..200 {
        let inc = &ak * &s * ak.transpose();
        s += &inc;
        ak = &ak * &ak;
        if inc.norm() <= LYAPUNOV_TOL * s.norm().max(1.0) {
            break;
        }
    }
    // finish with plain fixed-point sweeps until the residual meets the tolerance
    for _ in 0..10_000 {
        let next = a * &s * a.transpose() + sigma_w;
        let delta = (&next - &s).norm();
        s = next;
        if delta < LYAPUNOV_TOL {
            break;
        }
    }
    Ok(symmetrize(&s))
}

/// Free-function forms.
pub fn predict(psi: &DynamicsParams, belief: &GaussianMoment, u: &Vector) -> Result<GaussianMoment> {
    psi.predict(belief, u)
}

pub fn transition_log_density(
    psi: &DynamicsParams,
    z: &Vector,
    u: &Vector,
    z_next: &Vector,
) -> Result<f64> {
    psi.transition_log_density(z, u, z_next)
}

pub fn prior_belief(psi: &DynamicsParams) -> GaussianMoment {
    psi.prior_belief()
}

pub fn sample_trajectory<R: Rng + ?Sized>(
    psi: &DynamicsParams,
    u_seq: &[Vector],
    rng: &mut R,
) -> Result<Vec<Vector>> {
    psi.sample_trajectory(u_seq, rng)
}
