//! Joint Gaussians over `<x, u, x'>` tuples, empirical moments and
//! conditioning.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative ridge added to the conditioning marginal before factorizing.
pub const CONDITIONING_RIDGE: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// Sizes of the `x`, `u` and `x'` blocks of a joint vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub x: usize,
    pub u: usize,
    pub x_next: usize,
}

impl BlockDims {
    pub fn new(x: usize, u: usize, x_next: usize) -> Self {
        BlockDims { x, u, x_next }
    }

    /// Length of the conditioning block `<x, u>`.
    pub fn input(&self) -> usize {
        self.x + self.u
    }

    pub fn total(&self) -> usize {
        self.x + self.u + self.x_next
    }
}

/// Gaussian over the concatenation `<x, u, x'>`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    dims: BlockDims,
}

impl JointGaussian {
    /// Validates and wraps a mean/covariance pair.
    ///
    /// The covariance must be symmetric to within `1e-12` relative and its
    /// smallest eigenvalue no lower than `-1e-10 * trace`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, dims: BlockDims) -> Result<Self> {
        let n = dims.total();
        if mean.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: mean.len(),
            });
        }
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("joint gaussian has non-finite entries".into()));
        }
        check_symmetric(&cov)?;
        check_psd(&cov)?;
        Ok(JointGaussian { mean, cov, dims })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dims(&self) -> BlockDims {
        self.dims
    }

    /// Affine map of the conditional mean: `x' = F <x,u> + f0`.
    ///
    /// `F = Σ_{x'a} (Σ_aa + ridge I)^{-1}` with `a = <x,u>`, solved through a
    /// Cholesky factorization of the regularized marginal.
    pub fn conditional_map(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let na = self.dims.input();
        let nb = self.dims.x_next;
        let s_aa = self.cov.view((0, 0), (na, na));
        let s_ab = self.cov.view((0, na), (na, nb));
        let mut marginal = s_aa.clone_owned();
        let ridge = CONDITIONING_RIDGE * marginal.diagonal().mean();
        for i in 0..na {
            marginal[(i, i)] += ridge;
        }
        let chol = Cholesky::new(marginal).ok_or(Error::DegenerateMarginal)?;
        // F^T = Σ_aa^{-1} Σ_ax'
        let gain = chol.solve(&s_ab.clone_owned()).transpose();
        let mu_a = self.mean.rows(0, na);
        let mu_b = self.mean.rows(na, nb);
        let offset = mu_b - &gain * mu_a;
        if gain.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(Error::DegenerateMarginal);
        }
        Ok((gain, offset))
    }
}

fn check_symmetric(cov: &DMatrix<f64>) -> Result<()> {
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    let asym = (cov - cov.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::InvalidArgument(format!(
            "covariance not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

fn check_psd(cov: &DMatrix<f64>) -> Result<()> {
    if cov.nrows() == 0 {
        return Ok(());
    }
    let trace = cov.trace();
    let min_eig = SymmetricEigen::new(symmetrize(cov)).eigenvalues.min();
    if min_eig < -PSD_TOL * trace.abs() {
        return Err(Error::InvalidArgument(format!(
            "covariance not positive semi-definite (min eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

/// `(A + A^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Arithmetic mean and population (`1/M`) covariance.
///
/// Coordinates that are constant across all samples get exactly their
/// common value as mean and an exactly zero variance.
pub fn empirical_moments(samples: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let first = samples.first().ok_or(Error::NoSamples)?;
    let dim = first.len();
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let count = samples.len() as f64;
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= count;
    for j in 0..dim {
        if samples.iter().all(|s| s[j] == first[j]) {
            mean[j] = first[j];
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = s - &mean;
        cov.syger(1.0, &d, &d, 1.0);
    }
    cov /= count;
    cov.fill_upper_triangle_with_lower_triangle();
    Ok((mean, cov))
}

/// Conditional mean of `x'` given `<x, u>`.
pub fn condition_gaussian(g: &JointGaussian, xu: &DVector<f64>) -> Result<DVector<f64>> {
    let na = g.dims.input();
    if xu.len() != na {
        return Err(Error::DimensionMismatch {
            expected: na,
            found: xu.len(),
        });
    }
    let (gain, _) = g.conditional_map()?;
    let mu_a = g.mean.rows(0, na);
    let mu_b = g.mean.rows(na, g.dims.x_next);
    Ok(mu_b + gain * (xu - mu_a))
}

/// `log |Σ|` from a Cholesky factor.
pub(crate) fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}
