//! Observation models.
//!
//! A linear sensor measures `x = C z + v`, `v ~ N(0, sigma_x)`, and yields exact
//! information-form evidence. A nonlinear sensor encodes an observation into a
//! Gaussian posterior mean `r_h(x)` with an observation-independent precision
//! and decodes latents through a neural mean with fixed noise.

use rand::Rng;
use vssf_autodiff::{Activation, MlpParams};

use crate::error::{check_dim, Result, VssfError};
use crate::gaussian::{
    as_row, cholesky, log_det, spd_inverse, symmetrize, GaussianInfo, GaussianMoment, Matrix, Vector,
    HALF_LN_2PI,
};

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const HIDDEN_UNITS: usize = 64;
pub const DEFAULT_DECODER_NOISE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSensor {
    pub c: Matrix,
    pub sigma_x: Matrix,
    pub trainable: bool,
}

impl LinearSensor {
    pub fn new(c: Matrix, sigma_x: Matrix) -> Result<Self> {
        check_dim("measurement noise", c.nrows(), sigma_x.nrows())?;
        check_dim("measurement noise", c.nrows(), sigma_x.ncols())?;
        cholesky(&sigma_x)?;
        Ok(Self {
            c,
            sigma_x: symmetrize(&sigma_x),
            trainable: false,
        })
    }

    /// Measures the listed state coordinates with isotropic noise `variance`.
    pub fn select(state_dim: usize, coords: &[usize], variance: f64) -> Result<Self> {
        let mut c = Matrix::zeros(coords.len(), state_dim);
        for (row, &col) in coords.iter().enumerate() {
            if col >= state_dim {
                return Err(VssfError::DimensionMismatch {
                    context: "selected coordinate out of range",
                    expected: state_dim,
                    got: col,
                });
            }
            c[(row, col)] = 1.0;
        }
        Self::new(c, Matrix::identity(coords.len(), coords.len()) * variance)
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.ncols()
    }

    /// `C^T sigma_x^{-1}`, the map from observations to information vectors.
    pub fn gain(&self) -> Result<Matrix> {
        Ok(self.c.transpose() * spd_inverse(&self.sigma_x)?)
    }

    /// `(eta, lambda) = (C^T sigma_x^{-1} x, C^T sigma_x^{-1} C)`.
    pub fn evidence(&self, x: &Vector) -> Result<SensorEvidence> {
        check_dim("linear observation", self.obs_dim(), x.len())?;
        let gain = self.gain()?;
        Ok(SensorEvidence {
            eta_e: &gain * x,
            lambda_e: symmetrize(&(&gain * &self.c)),
        })
    }

    pub fn posterior(&self, x: &Vector, prior: &GaussianMoment) -> Result<GaussianMoment> {
        check_dim("prior dimension", self.state_dim(), prior.dim())?;
        let ev = self.evidence(x)?;
        let info = prior.to_info()?;
        GaussianInfo {
            eta: info.eta + ev.eta_e,
            lambda: info.lambda + ev.lambda_e,
        }
        .to_moment()
    }

    /// `log N(x; C z, sigma_x)`.
    pub fn log_density(&self, x: &Vector, z: &Vector) -> Result<f64> {
        check_dim("linear observation", self.obs_dim(), x.len())?;
        check_dim("state vector", self.state_dim(), z.len())?;
        GaussianMoment {
            mean: &self.c * z,
            cov: self.sigma_x.clone(),
        }
        .log_density(x)
    }
}

/// Information-form message `N(eta, lambda)` contributed by one sensor at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorEvidence {
    pub eta_e: Vector,
    pub lambda_e: Matrix,
}

impl SensorEvidence {
    pub fn dim(&self) -> usize {
        self.eta_e.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearSensor {
    pub encoder: MlpParams,
    pub evidence_factor: Matrix,
    pub epsilon: f64,
    pub decoder: MlpParams,
    pub decoder_sigma_x: Matrix,
}

impl NonlinearSensor {
    /// Two hidden GELU layers in each direction; `L = I` so the initial evidence
    /// precision is `1 / (1 + epsilon)` per axis.
    pub fn random<R: Rng + ?Sized>(obs_dim: usize, state_dim: usize, decoder_noise: f64, rng: &mut R) -> Self {
        let encoder = MlpParams::random(
            &[obs_dim, HIDDEN_UNITS, HIDDEN_UNITS, state_dim],
            Activation::Gelu,
            rng,
        );
        let decoder = MlpParams::random(
            &[state_dim, HIDDEN_UNITS, HIDDEN_UNITS, obs_dim],
            Activation::Gelu,
            rng,
        );
        Self {
            encoder,
            evidence_factor: Matrix::identity(state_dim, state_dim),
            epsilon: DEFAULT_EPSILON,
            decoder,
            decoder_sigma_x: Matrix::identity(obs_dim, obs_dim) * decoder_noise,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// `(L^T L + epsilon I)^{-1}`.
    pub fn evidence_precision(&self) -> Result<Matrix> {
        let m = self.state_dim();
        check_dim("evidence factor", m, self.evidence_factor.nrows())?;
        let l = &self.evidence_factor;
        spd_inverse(&(l.transpose() * l + Matrix::identity(m, m) * self.epsilon))
    }

    /// Encoder output `r_h(x)` for each row of `xs`, returned as columns `[m, n]`.
    pub fn encode_means(&self, xs: &Matrix) -> Result<Matrix> {
        check_dim("encoder input", self.obs_dim(), xs.ncols())?;
        Ok(self.encoder.forward(xs)?.transpose())
    }

    /// Evidence whose fusion with the prior `N(0, sigma_z)` has mean `r_h(x)`
    /// and precision `lambda_e + sigma_z^{-1}`.
    pub fn encode(&self, x: &Vector, sigma_z: &Matrix) -> Result<SensorEvidence> {
        check_dim("prior covariance", self.state_dim(), sigma_z.nrows())?;
        let r_h = self.encode_means(&as_row(x))?.column(0).into_owned();
        let lambda_e = self.evidence_precision()?;
        let eta_e = (&lambda_e + spd_inverse(sigma_z)?) * r_h;
        Ok(SensorEvidence { eta_e, lambda_e })
    }

    /// Decoder mean `nu(z)`.
    pub fn decode_mean(&self, z: &Vector) -> Result<Vector> {
        check_dim("decoder input", self.state_dim(), z.len())?;
        Ok(self.decoder.forward(&as_row(z))?.row(0).transpose())
    }

    /// `log N(x; nu(z), sigma_x)`.
    pub fn decode_log_density(&self, x: &Vector, z: &Vector) -> Result<f64> {
        check_dim("nonlinear observation", self.obs_dim(), x.len())?;
        GaussianMoment {
            mean: self.decode_mean(z)?,
            cov: self.decoder_sigma_x.clone(),
        }
        .log_density(x)
    }

    /// Normalising constant `-(p/2) ln 2pi - (1/2) ln det sigma_x` of the decoder density.
    pub fn decoder_log_norm(&self) -> Result<f64> {
        Ok(-(self.obs_dim() as f64) * HALF_LN_2PI - 0.5 * log_det(&self.decoder_sigma_x)?)
    }
}

pub fn linear_evidence(s: &LinearSensor, x: &Vector) -> Result<SensorEvidence> {
    s.evidence(x)
}

pub fn linear_posterior(s: &LinearSensor, x: &Vector, prior: &GaussianMoment) -> Result<GaussianMoment> {
    s.posterior(x, prior)
}

pub fn linear_log_density(s: &LinearSensor, x: &Vector, z: &Vector) -> Result<f64> {
    s.log_density(x, z)
}

pub fn encode_evidence(s: &NonlinearSensor, x: &Vector, sigma_z: &Matrix) -> Result<SensorEvidence> {
    s.encode(x, sigma_z)
}

pub fn decode_log_density(s: &NonlinearSensor, x: &Vector, z: &Vector) -> Result<f64> {
    s.decode_log_density(x, z)
}
