//! Forward pass: predict in moment form, update in information form.

use crate::error::{check_dim, Result, VssfError};
use crate::gaussian::{cholesky, symmetrize, GaussianInfo, GaussianMoment, Vector, HALF_LN_2PI};
use crate::lgssm::DynamicsParams;
use crate::sensors::{LinearSensor, SensorEvidence};

/// Filtering prior and posterior at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBelief {
    pub predicted: GaussianMoment,
    pub posterior: GaussianMoment,
}

/// Evidence from whichever sensors reported at one step. Absent sensors are omitted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvidenceBundle {
    pub items: Vec<SensorEvidence>,
}

impl EvidenceBundle {
    pub fn new(items: Vec<SensorEvidence>) -> Self {
        Self { items }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Fuses evidence into a predicted belief: `lambda = P^{-1} + sum lambda_e`,
/// `eta = P^{-1} p + sum eta_e`.
pub fn update(predicted: &GaussianMoment, evidence: &EvidenceBundle) -> Result<GaussianMoment> {
    if evidence.is_empty() {
        return Ok(predicted.clone());
    }
    let m = predicted.dim();
    let GaussianInfo { mut eta, mut lambda } = predicted.to_info()?;
    for item in &evidence.items {
        check_dim("evidence dimension", m, item.dim())?;
        check_dim("evidence precision", m, item.lambda_e.nrows())?;
        eta += &item.eta_e;
        lambda += &item.lambda_e;
    }
    GaussianInfo {
        eta,
        lambda: symmetrize(&lambda),
    }
    .to_moment()
}

/// One propagate-and-update step. With no previous posterior the prediction is
/// the latent prior `N(0, sigma_z)`.
pub fn filter_step(
    psi: &DynamicsParams,
    prev_posterior: Option<&GaussianMoment>,
    u_prev: Option<&Vector>,
    evidence: &EvidenceBundle,
) -> Result<FilterBelief> {
    let predicted = match prev_posterior {
        None => psi.prior_belief(),
        Some(prev) => {
            let zero;
            let u = match u_prev {
                Some(u) => u,
                None => {
                    zero = Vector::zeros(psi.input_dim());
                    &zero
                }
            };
            psi.predict(prev, u)?
        }
    };
    let posterior = update(&predicted, evidence)?;
    Ok(FilterBelief {
        predicted,
        posterior,
    })
}

pub(crate) fn check_lengths(steps: usize, u_seq: &[Vector]) -> Result<()> {
    check_dim("input sequence length", steps.saturating_sub(1), u_seq.len())
}

pub fn filter_forward(
    psi: &DynamicsParams,
    evidence_seq: &[EvidenceBundle],
    u_seq: &[Vector],
) -> Result<Vec<FilterBelief>> {
    check_lengths(evidence_seq.len(), u_seq)?;
    let mut beliefs: Vec<FilterBelief> = Vec::with_capacity(evidence_seq.len());
    for (t, ev) in evidence_seq.iter().enumerate() {
        let belief = match beliefs.last() {
            None => filter_step(psi, None, None, ev)?,
            Some(prev) => filter_step(psi, Some(&prev.posterior), Some(&u_seq[t - 1]), ev)?,
        };
        beliefs.push(belief);
    }
    Ok(beliefs)
}

/// Exact `log p(x_{1:T} | u)` for a suite of linear sensors, by the prediction-error
/// decomposition with sensors fused one at a time within each step.
///
/// `x_seq[t][j]` is the reading of `sensors[j]` at step `t`.
pub fn linear_marginal_log_likelihood(
    psi: &DynamicsParams,
    sensors: &[LinearSensor],
    x_seq: &[Vec<Vector>],
    u_seq: &[Vector],
) -> Result<f64> {
    check_lengths(x_seq.len(), u_seq)?;
    let mut total = 0.0;
    let mut belief = psi.prior_belief();
    for (t, xs) in x_seq.iter().enumerate() {
        if t > 0 {
            belief = psi.predict(&belief, &u_seq[t - 1])?;
        }
        check_dim("readings per step", sensors.len(), xs.len())?;
        for (s, x) in sensors.iter().zip(xs) {
            check_dim("linear observation", s.obs_dim(), x.len())?;
            let innov_cov = symmetrize(&(&s.c * &belief.cov * s.c.transpose() + &s.sigma_x));
            let chol = cholesky(&innov_cov)?;
            let resid = x - &s.c * &belief.mean;
            let white = chol.l().solve_lower_triangular(&resid).ok_or(VssfError::NotPositiveDefinite)?;
            let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            total += -(x.len() as f64) * HALF_LN_2PI - 0.5 * log_det - 0.5 * white.norm_squared();
            // Kalman update with gain K = P C^T S^{-1}
            let pct = &belief.cov * s.c.transpose();
            let gain = chol.solve(&pct.transpose()).transpose();
            belief = GaussianMoment {
                mean: &belief.mean + &gain * resid,
                cov: symmetrize(&(&belief.cov - &gain * pct.transpose())),
            };
        }
    }
    if !total.is_finite() {
        return Err(VssfError::NonFinite("marginal log-likelihood".into()));
    }
    Ok(total)
}
