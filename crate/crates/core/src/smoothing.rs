//! Backward pass.
//!
//! The smoothing posterior factors as `q(z_T | x) prod_t q(z_t | z_{t+1}, x_{1:t})`.
//! Each reverse factor is the product of the filtering posterior at `t` with
//! the transition likelihood of `z_{t+1}`, which is Gaussian with precision
//! `P^{-1} + A^T W^{-1} A` and information `A^T W^{-1} (z_{t+1} - B u_t) + P^{-1} p`.

use rand::Rng;

use crate::error::{check_dim, Result, VssfError};
use crate::filtering::{check_lengths, FilterBelief};
use crate::gaussian::{
    spd_inverse, standard_normal_vector, symmetrize, GaussianMoment, Matrix, Vector,
};
use crate::lgssm::DynamicsParams;

/// The reverse factor as an affine-Gaussian map `z_t | z_{t+1} ~ N(gain z_{t+1} + offset, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardKernel {
    pub gain: Matrix,
    pub offset: Vector,
    pub cov: Matrix,
}

impl BackwardKernel {
    pub fn new(psi: &DynamicsParams, posterior_t: &GaussianMoment, u_t: &Vector) -> Result<Self> {
        let m = psi.state_dim();
        check_dim("filtering posterior", m, posterior_t.dim())?;
        check_dim("input vector", psi.input_dim(), u_t.len())?;
        let p_inv = spd_inverse(&posterior_t.cov)?;
        let at_w_inv = psi.a.transpose() * spd_inverse(&psi.sigma_w)?;
        let precision = symmetrize(&(&p_inv + &at_w_inv * &psi.a));
        let cov = spd_inverse(&precision)?;
        let gain = &cov * &at_w_inv;
        let offset = &cov * (&p_inv * &posterior_t.mean - &at_w_inv * (&psi.b * u_t));
        Ok(Self { gain, offset, cov })
    }

    pub fn conditional(&self, z_next: &Vector) -> Result<GaussianMoment> {
        check_dim("next state", self.gain.ncols(), z_next.len())?;
        Ok(GaussianMoment {
            mean: &self.gain * z_next + &self.offset,
            cov: self.cov.clone(),
        })
    }

    /// Pushes a Gaussian over `z_{t+1}` through the kernel.
    pub fn marginalize(&self, next: &GaussianMoment) -> GaussianMoment {
        GaussianMoment {
            mean: &self.gain * &next.mean + &self.offset,
            cov: symmetrize(&(&self.cov + &self.gain * &next.cov * self.gain.transpose())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingSample {
    pub trajectory: Vec<Vector>,
    pub log_q: f64,
}

pub fn backward_conditional(
    psi: &DynamicsParams,
    posterior_t: &GaussianMoment,
    u_t: &Vector,
    z_next: &Vector,
) -> Result<GaussianMoment> {
    BackwardKernel::new(psi, posterior_t, u_t)?.conditional(z_next)
}

/// One kernel per transition, `T - 1` in total.
pub fn backward_kernels(
    psi: &DynamicsParams,
    beliefs: &[FilterBelief],
    u_seq: &[Vector],
) -> Result<Vec<BackwardKernel>> {
    check_lengths(beliefs.len(), u_seq)?;
    u_seq
        .iter()
        .enumerate()
        .map(|(t, u)| BackwardKernel::new(psi, &beliefs[t].posterior, u))
        .collect()
}

fn last_posterior(beliefs: &[FilterBelief]) -> Result<&GaussianMoment> {
    beliefs
        .last()
        .map(|b| &b.posterior)
        .ok_or(VssfError::DimensionMismatch {
            context: "belief sequence length",
            expected: 1,
            got: 0,
        })
}

/// Draws `count` trajectories: `z_T` from the last filtering posterior, then
/// each earlier state from its backward conditional.
pub fn sample_smoothing<R: Rng + ?Sized>(
    psi: &DynamicsParams,
    beliefs: &[FilterBelief],
    u_seq: &[Vector],
    rng: &mut R,
    count: usize,
) -> Result<Vec<SmoothingSample>> {
    let kernels = backward_kernels(psi, beliefs, u_seq)?;
    let last = last_posterior(beliefs)?;
    let last_factor = last.cov_factor()?;
    let kernel_factors = kernels
        .iter()
        .map(|k| {
            GaussianMoment {
                mean: k.offset.clone(),
                cov: k.cov.clone(),
            }
            .cov_factor()
        })
        .collect::<Result<Vec<_>>>()?;
    let m = psi.state_dim();
    let big_t = beliefs.len();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut traj = vec![Vector::zeros(m); big_t];
        let eps = standard_normal_vector(m, rng);
        traj[big_t - 1] = &last.mean + &last_factor * &eps;
        let mut log_q = last.log_density(&traj[big_t - 1])?;
        for t in (0..big_t - 1).rev() {
            let eps = standard_normal_vector(m, rng);
            let cond = kernels[t].conditional(&traj[t + 1])?;
            traj[t] = &cond.mean + &kernel_factors[t] * &eps;
            log_q += cond.log_density(&traj[t])?;
        }
        if !log_q.is_finite() {
            return Err(VssfError::NonFinite("smoothing sample log-density".into()));
        }
        out.push(SmoothingSample {
            trajectory: traj,
            log_q,
        });
    }
    Ok(out)
}

pub fn smoothing_log_density(
    psi: &DynamicsParams,
    beliefs: &[FilterBelief],
    u_seq: &[Vector],
    trajectory: &[Vector],
) -> Result<f64> {
    check_dim("trajectory length", beliefs.len(), trajectory.len())?;
    let kernels = backward_kernels(psi, beliefs, u_seq)?;
    let mut total = last_posterior(beliefs)?.log_density(trajectory.last().unwrap())?;
    for (t, k) in kernels.iter().enumerate() {
        total += k.conditional(&trajectory[t + 1])?.log_density(&trajectory[t])?;
    }
    Ok(total)
}

/// Marginals of the backward factorization by composing the kernels from `T` down.
pub fn smoothing_marginals(
    psi: &DynamicsParams,
    beliefs: &[FilterBelief],
    u_seq: &[Vector],
) -> Result<Vec<GaussianMoment>> {
    let kernels = backward_kernels(psi, beliefs, u_seq)?;
    let mut out = vec![last_posterior(beliefs)?.clone()];
    for k in kernels.iter().rev() {
        let next = k.marginalize(out.last().unwrap());
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Rauch-Tung-Striebel smoother on the filter output.
pub fn rts_smooth(
    psi: &DynamicsParams,
    beliefs: &[FilterBelief],
    u_seq: &[Vector],
) -> Result<Vec<GaussianMoment>> {
    check_lengths(beliefs.len(), u_seq)?;
    let mut out = vec![last_posterior(beliefs)?.clone()];
    for t in (0..beliefs.len() - 1).rev() {
        let filt = &beliefs[t].posterior;
        let pred = &beliefs[t + 1].predicted;
        let next = out.last().unwrap();
        let j = &filt.cov * psi.a.transpose() * spd_inverse(&pred.cov)?;
        let mean = &filt.mean + &j * (&next.mean - &pred.mean);
        let cov = symmetrize(&(&filt.cov + &j * (&next.cov - &pred.cov) * j.transpose()));
        out.push(GaussianMoment { mean, cov });
    }
    out.reverse();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::{filter_forward, EvidenceBundle};
    use crate::gaussian::{product_info, GaussianInfo};
    use crate::lgssm::{spectral_radius, stationary_covariance};
    use crate::sensors::LinearSensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
    }

    fn random_system(m: usize, rng: &mut ChaCha8Rng) -> DynamicsParams {
        let mut a = randn(m, m, rng);
        a *= 0.9 / spectral_radius(&a);
        let q = randn(m, m, rng);
        let sigma_w = &q * q.transpose() * 0.1 + Matrix::identity(m, m) * 0.05;
        let sigma_z = stationary_covariance(&a, &sigma_w).unwrap();
        DynamicsParams::new(a, randn(m, 1, rng), sigma_w, sigma_z).unwrap()
    }

    /// Random system with one partial linear sensor, filtered over `t_len` steps.
    fn filtered_case(
        m: usize,
        t_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> (DynamicsParams, Vec<FilterBelief>, Vec<Vector>) {
        let psi = random_system(m, rng);
        let s = LinearSensor::new(randn(1, m, rng), Matrix::identity(1, 1) * 0.2).unwrap();
        let us: Vec<Vector> = (0..t_len - 1).map(|_| standard_normal_vector(1, rng)).collect();
        let zs = psi.sample_trajectory(&us, rng).unwrap();
        let ev: Vec<EvidenceBundle> = zs
            .iter()
            .map(|z| {
                let x = &s.c * z + standard_normal_vector(1, rng) * 0.2f64.sqrt();
                EvidenceBundle::new(vec![s.evidence(&x).unwrap()])
            })
            .collect();
        let beliefs = filter_forward(&psi, &ev, &us).unwrap();
        (psi, beliefs, us)
    }

    #[test]
    fn identity_dynamics_halves_variance() {
        let psi = DynamicsParams::new(
            Matrix::identity(2, 2),
            Matrix::zeros(2, 1),
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
        )
        .unwrap();
        let v = Vector::from_vec(vec![2.0, -1.0]);
        let out = backward_conditional(&psi, &GaussianMoment::standard(2), &Vector::zeros(1), &v).unwrap();
        assert!((out.mean - &v / 2.0).abs().max() < 1e-14);
        assert!((out.cov - Matrix::identity(2, 2) / 2.0).abs().max() < 1e-14);
    }

    #[test]
    fn vague_dynamics_return_filtering_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut psi = random_system(2, &mut rng);
        psi.sigma_w = Matrix::identity(2, 2) * 1e12;
        let post = GaussianMoment::new(standard_normal_vector(2, &mut rng), Matrix::identity(2, 2) * 0.3).unwrap();
        let out = backward_conditional(&psi, &post, &Vector::zeros(1), &standard_normal_vector(2, &mut rng)).unwrap();
        assert!((out.mean - &post.mean).abs().max() < 1e-9);
        assert!((out.cov - &post.cov).abs().max() < 1e-9);
    }

    #[test]
    fn conditional_matches_gaussian_product_with_grid_fitted_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a: f64 = rng.random_range(-1.5..1.5);
            let b: f64 = rng.random_range(-1.0..1.0);
            let w: f64 = rng.random_range(0.1..2.0);
            let psi = DynamicsParams::new(
                Matrix::from_element(1, 1, a),
                Matrix::from_element(1, 1, b),
                Matrix::from_element(1, 1, w),
                Matrix::from_element(1, 1, 1.0),
            )
            .unwrap();
            let post = GaussianMoment::new(
                Vector::from_element(1, rng.random_range(-1.0..1.0)),
                Matrix::from_element(1, 1, rng.random_range(0.2..2.0)),
            )
            .unwrap();
            let u = Vector::from_element(1, rng.random_range(-1.0..1.0));
            let z_next = Vector::from_element(1, rng.random_range(-2.0..2.0));
            // fit log p(z_next | z, u) = c0 + c1 z + c2 z^2 by least squares on a grid
            let grid: Vec<f64> = (0..201).map(|i| -5.0 + 0.05 * i as f64).collect();
            let design = Matrix::from_fn(grid.len(), 3, |i, j| grid[i].powi(j as i32));
            let target = Vector::from_iterator(
                grid.len(),
                grid.iter().map(|&z| {
                    psi.transition_log_density(&Vector::from_element(1, z), &u, &z_next).unwrap()
                }),
            );
            let coef = (design.transpose() * &design)
                .lu()
                .solve(&(design.transpose() * target))
                .unwrap();
            let likelihood = GaussianInfo {
                eta: Vector::from_element(1, coef[1]),
                lambda: Matrix::from_element(1, 1, -2.0 * coef[2]),
            };
            let oracle = product_info(&post.to_info().unwrap(), &likelihood)
                .unwrap()
                .to_moment()
                .unwrap();
            let out = backward_conditional(&psi, &post, &u, &z_next).unwrap();
            assert!((out.mean[0] - oracle.mean[0]).abs() < 1e-6);
            assert!((out.cov[(0, 0)] - oracle.cov[(0, 0)]).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_precision_matches_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let psi = random_system(3, &mut rng);
        let p = randn(3, 3, &mut rng);
        let post = GaussianMoment::new(standard_normal_vector(3, &mut rng), &p * p.transpose() + Matrix::identity(3, 3)).unwrap();
        let k = BackwardKernel::new(&psi, &post, &Vector::zeros(1)).unwrap();
        let expected = spd_inverse(&post.cov).unwrap()
            + psi.a.transpose() * spd_inverse(&psi.sigma_w).unwrap() * &psi.a;
        assert!((spd_inverse(&k.cov).unwrap() - expected).abs().max() < 1e-10);
    }

    #[test]
    fn single_step_sampler_draws_from_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (psi, beliefs, us) = filtered_case(2, 1, &mut rng);
        let post = &beliefs[0].posterior;
        let n = 20_000;
        let samples = sample_smoothing(&psi, &beliefs, &us, &mut rng, n).unwrap();
        let mean = samples.iter().fold(Vector::zeros(2), |acc, s| acc + &s.trajectory[0]) / n as f64;
        for i in 0..2 {
            let se = (post.cov[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - post.mean[i]).abs() < 4.0 * se);
        }
        for s in &samples[..10] {
            assert!((s.log_q - post.log_density(&s.trajectory[0]).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_log_q_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (psi, beliefs, us) = filtered_case(3, 6, &mut rng);
        for s in sample_smoothing(&psi, &beliefs, &us, &mut rng, 20).unwrap() {
            let again = smoothing_log_density(&psi, &beliefs, &us, &s.trajectory).unwrap();
            assert!((s.log_q - again).abs() < 1e-10);
        }
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (psi, beliefs, us) = filtered_case(2, 4, &mut rng);
        let a = sample_smoothing(&psi, &beliefs, &us, &mut ChaCha8Rng::seed_from_u64(9), 3).unwrap();
        let b = sample_smoothing(&psi, &beliefs, &us, &mut ChaCha8Rng::seed_from_u64(9), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn marginals_match_rts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let (psi, beliefs, us) = filtered_case(3, 8, &mut rng);
            let ours = smoothing_marginals(&psi, &beliefs, &us).unwrap();
            let rts = rts_smooth(&psi, &beliefs, &us).unwrap();
            for (a, b) in ours.iter().zip(&rts) {
                assert!((&a.mean - &b.mean).abs().max() < 1e-8);
                assert!((&a.cov - &b.cov).abs().max() < 1e-8);
            }
            assert_eq!(rts.last().unwrap(), &beliefs.last().unwrap().posterior);
        }
    }

    #[test]
    fn single_step_marginals_are_the_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (psi, beliefs, us) = filtered_case(2, 1, &mut rng);
        assert_eq!(smoothing_marginals(&psi, &beliefs, &us).unwrap(), vec![beliefs[0].posterior.clone()]);
        assert_eq!(rts_smooth(&psi, &beliefs, &us).unwrap(), vec![beliefs[0].posterior.clone()]);
    }

    #[test]
    fn no_evidence_marginals_are_open_loop_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let psi = random_system(2, &mut rng);
        let us: Vec<Vector> = (0..5).map(|_| standard_normal_vector(1, &mut rng)).collect();
        let beliefs = filter_forward(&psi, &vec![EvidenceBundle::empty(); 6], &us).unwrap();
        let marg = smoothing_marginals(&psi, &beliefs, &us).unwrap();
        for (m, b) in marg.iter().zip(&beliefs) {
            assert!((&m.mean - &b.posterior.mean).abs().max() < 1e-9);
            assert!((&m.cov - &b.posterior.cov).abs().max() < 1e-9);
        }
    }

    #[test]
    fn time_reversal_identity_without_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let psi = random_system(3, &mut rng);
        let us: Vec<Vector> = (0..6).map(|_| standard_normal_vector(1, &mut rng)).collect();
        let beliefs = filter_forward(&psi, &vec![EvidenceBundle::empty(); 7], &us).unwrap();
        for _ in 0..10 {
            let traj: Vec<Vector> = (0..7).map(|_| standard_normal_vector(3, &mut rng)).collect();
            let mut forward = psi.prior_belief().log_density(&traj[0]).unwrap();
            for t in 0..6 {
                forward += psi.transition_log_density(&traj[t], &us[t], &traj[t + 1]).unwrap();
            }
            let backward = smoothing_log_density(&psi, &beliefs, &us, &traj).unwrap();
            assert!((forward - backward).abs() < 1e-8, "{forward} vs {backward}");
        }
    }

    #[test]
    fn log_density_peaks_near_smoothed_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (psi, beliefs, us) = filtered_case(2, 5, &mut rng);
        let rts = rts_smooth(&psi, &beliefs, &us).unwrap();
        // the joint mode of a Gaussian is its mean; marginal means coincide with it
        let centre: Vec<Vector> = rts.iter().map(|g| g.mean.clone()).collect();
        let best = smoothing_log_density(&psi, &beliefs, &us, &centre).unwrap();
        assert!(best.is_finite());
        for _ in 0..100 {
            let moved: Vec<Vector> = centre.iter().map(|z| z + standard_normal_vector(2, &mut rng) * 0.1).collect();
            assert!(smoothing_log_density(&psi, &beliefs, &us, &moved).unwrap() < best);
        }
    }

    #[test]
    fn sampler_moments_match_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (psi, beliefs, us) = filtered_case(2, 5, &mut rng);
        let marg = smoothing_marginals(&psi, &beliefs, &us).unwrap();
        let n = 100_000;
        let samples = sample_smoothing(&psi, &beliefs, &us, &mut rng, n).unwrap();
        for t in 0..5 {
            let mean = samples.iter().fold(Vector::zeros(2), |acc, s| acc + &s.trajectory[t]) / n as f64;
            for i in 0..2 {
                let se = (marg[t].cov[(i, i)] / n as f64).sqrt();
                assert!((mean[i] - marg[t].mean[i]).abs() < 3.0 * se, "t={t} i={i}");
            }
        }
        let mean0 = &marg[0].mean;
        let cov0 = samples.iter().fold(Matrix::zeros(2, 2), |acc, s| {
            let d = &s.trajectory[0] - mean0;
            acc + &d * d.transpose()
        }) / n as f64;
        assert!((&cov0 - &marg[0].cov).norm() / marg[0].cov.norm() < 0.05);
    }
}
