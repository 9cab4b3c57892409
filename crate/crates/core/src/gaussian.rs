//! Multivariate normal algebra in moment and information form.
//!
//! Every inversion goes through a Cholesky factor of the symmetrised matrix.
//! If the first factorisation fails, a jitter of `1e-9 * trace / m` is added
//! to the diagonal once before giving up.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Result, VssfError};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// `0.5 * ln(2 pi)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

const JITTER_SCALE: f64 = 1e-9;

/// A vector as a `1 x n` matrix.
pub fn as_row(v: &Vector) -> Matrix {
    Matrix::from_row_slice(1, v.len(), v.as_slice())
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorisation of `(m + m^T) / 2` under the jitter policy.
pub fn cholesky(m: &Matrix) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(VssfError::DimensionMismatch {
            context: "cholesky",
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(VssfError::NotPositiveDefinite);
    }
    let sym = symmetrize(m);
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Ok(c);
    }
    let n = sym.nrows().max(1) as f64;
    let jitter = JITTER_SCALE * sym.trace().abs() / n;
    let jittered = sym + Matrix::identity(m.nrows(), m.ncols()) * jitter;
    Cholesky::new(jittered).ok_or(VssfError::NotPositiveDefinite)
}

/// Inverse of a symmetric positive definite matrix, re-symmetrised.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    Ok(symmetrize(&cholesky(m)?.inverse()))
}

/// `ln det m` for symmetric positive definite `m`.
pub fn log_det(m: &Matrix) -> Result<f64> {
    Ok(chol_log_det(&cholesky(m)?))
}

fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Normal distribution in mean/covariance form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoment {
    pub mean: Vector,
    pub cov: Matrix,
}

/// Normal distribution (or unnormalised Gaussian factor) in information form:
/// `eta = cov^{-1} mean`, `lambda = cov^{-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianInfo {
    pub eta: Vector,
    pub lambda: Matrix,
}

impl GaussianMoment {
    /// Validates dimensions and positive definiteness; stores the symmetrised covariance.
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        check_dim("gaussian covariance rows", mean.len(), cov.nrows())?;
        check_dim("gaussian covariance cols", mean.len(), cov.ncols())?;
        cholesky(&cov)?;
        Ok(Self {
            mean,
            cov: symmetrize(&cov),
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Vector::zeros(dim),
            cov: Matrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_info(&self) -> Result<GaussianInfo> {
        let lambda = spd_inverse(&self.cov)?;
        let eta = &lambda * &self.mean;
        Ok(GaussianInfo { eta, lambda })
    }

    pub fn log_density(&self, x: &Vector) -> Result<f64> {
        check_dim("log_density point", self.dim(), x.len())?;
        let chol = cholesky(&self.cov)?;
        let r = chol
            .l_dirty()
            .solve_lower_triangular(&(x - &self.mean))
            .ok_or(VssfError::NotPositiveDefinite)?;
        let m = self.dim() as f64;
        Ok(-m * HALF_LN_2PI - 0.5 * chol_log_det(&chol) - 0.5 * r.norm_squared())
    }

    /// Lower Cholesky factor of the covariance.
    pub fn cov_factor(&self) -> Result<Matrix> {
        Ok(cholesky(&self.cov)?.unpack())
    }

    /// `mean + chol(cov) * noise` for a given standard-normal vector.
    pub fn transform(&self, noise: &Vector) -> Result<Vector> {
        check_dim("sample noise", self.dim(), noise.len())?;
        Ok(&self.mean + self.cov_factor()? * noise)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vector> {
        let noise = standard_normal_vector(self.dim(), rng);
        self.transform(&noise)
    }
}

impl GaussianInfo {
    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    /// Zero-information factor: the identity element of [`product_info`].
    pub fn uninformative(dim: usize) -> Self {
        Self {
            eta: Vector::zeros(dim),
            lambda: Matrix::zeros(dim, dim),
        }
    }

    pub fn to_moment(&self) -> Result<GaussianMoment> {
        check_dim("information matrix", self.dim(), self.lambda.nrows())?;
        let chol = cholesky(&self.lambda)?;
        let cov = symmetrize(&chol.inverse());
        let mean = chol.solve(&self.eta);
        Ok(GaussianMoment { mean, cov })
    }

    /// Unnormalised density product: information adds.
    pub fn product(&self, other: &GaussianInfo) -> Result<GaussianInfo> {
        check_dim("product_info", self.dim(), other.dim())?;
        check_dim("product_info", self.lambda.nrows(), other.lambda.nrows())?;
        Ok(GaussianInfo {
            eta: &self.eta + &other.eta,
            lambda: symmetrize(&(&self.lambda + &other.lambda)),
        })
    }
}

pub fn standard_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vector {
    Vector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

pub fn to_info(g: &GaussianMoment) -> Result<GaussianInfo> {
    g.to_info()
}

pub fn to_moment(g: &GaussianInfo) -> Result<GaussianMoment> {
    g.to_moment()
}

pub fn product_info(a: &GaussianInfo, b: &GaussianInfo) -> Result<GaussianInfo> {
    a.product(b)
}

pub fn log_density(g: &GaussianMoment, x: &Vector) -> Result<f64> {
    g.log_density(x)
}

pub fn sample<R: Rng + ?Sized>(g: &GaussianMoment, rng: &mut R) -> Result<Vector> {
    g.sample(rng)
}
