//! Time-varying locally linear dynamics: one joint Gaussian per timestep,
//! smoothed toward a normal-inverse-Wishart prior whose moments come from a
//! Gaussian mixture over all of the trajectory's tuples.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{condition_gaussian, empirical_moments, symmetrize, BlockDims, JointGaussian};
use crate::gmm::{fit_em, gmm_prior, GmmModel};

/// Which count plays `n` in the weight `M m / (n + m)` of the posterior's
/// mean-disagreement term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankOneCount {
    /// `n = M`, the conjugate normal-inverse-Wishart update. The posterior
    /// converges to the empirical moments as `M` grows.
    #[default]
    SampleCount,
    /// `n = n0`. The term then keeps weight `m / (n0 + m)` as `M` grows.
    PriorStrength,
}

/// Normal-inverse-Wishart prior parameters for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct IwPrior {
    pub phi: DMatrix<f64>,
    pub mu0: DVector<f64>,
    pub m: f64,
    pub n0: f64,
    pub rank_one: RankOneCount,
}

impl IwPrior {
    pub fn new(phi: DMatrix<f64>, mu0: DVector<f64>, m: f64, n0: f64) -> Result<Self> {
        if !(m > 0.0 && n0 > 0.0) {
            return Err(Error::InvalidArgument("prior strengths m and n0 must be positive".into()));
        }
        if phi.nrows() != mu0.len() || phi.ncols() != mu0.len() {
            return Err(Error::DimensionMismatch {
                expected: mu0.len(),
                found: phi.nrows(),
            });
        }
        Ok(IwPrior {
            phi,
            mu0,
            m,
            n0,
            rank_one: RankOneCount::SampleCount,
        })
    }

    pub fn with_rank_one(mut self, rank_one: RankOneCount) -> Self {
        self.rank_one = rank_one;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    /// Mixture components for the prior.
    pub gmm_components: usize,
    pub em_max_iters: usize,
    pub em_tol: f64,
    /// Prior mean strength `m`.
    pub prior_m: f64,
    /// Prior covariance strength `n0`.
    pub prior_n0: f64,
    /// Fit one mixture over all trajectories instead of one per trajectory.
    pub pool_trajectories: bool,
    pub rank_one_count: RankOneCount,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            gmm_components: 5,
            em_max_iters: 40,
            em_tol: 1e-6,
            prior_m: 1.0,
            prior_n0: 1.0,
            pool_trajectories: false,
            rank_one_count: RankOneCount::SampleCount,
        }
    }
}

/// Per-timestep conditional-Gaussian predictors for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    per_timestep: Vec<JointGaussian>,
    dims: BlockDims,
    rollouts: usize,
}

impl DynamicsModel {
    pub fn from_parts(per_timestep: Vec<JointGaussian>, rollouts: usize) -> Result<Self> {
        let dims = per_timestep
            .first()
            .ok_or_else(|| Error::InvalidArgument("dynamics model needs at least one timestep".into()))?
            .dims();
        if per_timestep.iter().any(|g| g.dims() != dims) {
            return Err(Error::InvalidArgument("timestep block dimensions differ".into()));
        }
        Ok(DynamicsModel {
            per_timestep,
            dims,
            rollouts,
        })
    }

    pub fn horizon(&self) -> usize {
        self.per_timestep.len()
    }

    pub fn dims(&self) -> BlockDims {
        self.dims
    }

    /// Number of rollouts the model was fitted on.
    pub fn rollouts(&self) -> usize {
        self.rollouts
    }

    pub fn timesteps(&self) -> &[JointGaussian] {
        &self.per_timestep
    }

    pub fn timestep(&self, t: usize) -> Result<&JointGaussian> {
        self.per_timestep.get(t).ok_or(Error::TimestepOutOfRange {
            t,
            horizon: self.horizon(),
        })
    }

    /// Conditional-mean prediction of the next state at (0-based) step `t`.
    pub fn predict(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.timestep(t)?;
        let mut xu = DVector::zeros(x.len() + u.len());
        xu.rows_mut(0, x.len()).copy_from(x);
        xu.rows_mut(x.len(), u.len()).copy_from(u);
        condition_gaussian(g, &xu)
    }

    /// `(F, f0)` with `predict(t, x, u) = F <x,u> + f0`.
    pub fn linearize(&self, t: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.timestep(t)?.conditional_map()
    }
}

/// Posterior mean and covariance for one timestep.
///
/// `μ = (m μ0 + M μ̂) / (m + M)` and
/// `Σ = (Φ + M Σ̂ + M m / (n + m) (μ̂ - μ0)(μ̂ - μ0)^T) / (M + n0)`, with
/// `n` chosen by `prior.rank_one`.
pub fn posterior_moments(
    prior: &IwPrior,
    emp_mean: &DVector<f64>,
    emp_cov: &DMatrix<f64>,
    count: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let big_m = count as f64;
    let m = prior.m;
    let n = match prior.rank_one {
        RankOneCount::PriorStrength => prior.n0,
        RankOneCount::SampleCount => big_m,
    };
    let mean = (&prior.mu0 * m + emp_mean * big_m) / (m + big_m);
    let diff = emp_mean - &prior.mu0;
    let mut cov = &prior.phi + emp_cov * big_m;
    cov.ger(big_m * m / (n + m), &diff, &diff, 1.0);
    cov /= big_m + prior.n0;
    (mean, symmetrize(&cov))
}

fn check_rollouts(rollouts: &[Vec<DVector<f64>>], dims: BlockDims) -> Result<usize> {
    let first = rollouts
        .first()
        .ok_or_else(|| Error::InvalidArgument("dynamics fit needs at least one rollout".into()))?;
    let horizon = first.len();
    if horizon == 0 {
        return Err(Error::InvalidArgument("rollouts have zero length".into()));
    }
    for r in rollouts {
        if r.len() != horizon {
            return Err(Error::HorizonMismatch {
                expected: horizon,
                found: r.len(),
            });
        }
        if let Some(bad) = r.iter().find(|v| v.len() != dims.total()) {
            return Err(Error::DimensionMismatch {
                expected: dims.total(),
                found: bad.len(),
            });
        }
    }
    Ok(horizon)
}

/// Fits the per-timestep posteriors given one explicit prior per timestep.
pub fn fit_dynamics_with_priors(
    rollouts: &[Vec<DVector<f64>>],
    dims: BlockDims,
    priors: &[IwPrior],
) -> Result<DynamicsModel> {
    let horizon = check_rollouts(rollouts, dims)?;
    if priors.len() != horizon {
        return Err(Error::HorizonMismatch {
            expected: horizon,
            found: priors.len(),
        });
    }
    let per_timestep = (0..horizon)
        .map(|t| {
            let window: Vec<DVector<f64>> = rollouts.iter().map(|r| r[t].clone()).collect();
            let (mu_hat, sigma_hat) = empirical_moments(&window)?;
            let (mean, cov) = posterior_moments(&priors[t], &mu_hat, &sigma_hat, rollouts.len());
            JointGaussian::new(mean, cov, dims)
        })
        .collect::<Result<Vec<_>>>()?;
    DynamicsModel::from_parts(per_timestep, rollouts.len())
}

/// Fits a model from `rollouts[rollout][t]` tuples `<x_t, u_t, x_{t+1}>`.
///
/// The mixture is fitted on every tuple of these rollouts pooled over time
/// unless `mixture` supplies one; each timestep's prior is then the mixture
/// prior on that timestep's window. When the mixture cannot be fitted the
/// global empirical moments serve as the prior for every timestep.
pub fn fit_dynamics(
    rollouts: &[Vec<DVector<f64>>],
    dims: BlockDims,
    cfg: &DynamicsConfig,
    mixture: Option<&GmmModel>,
    seed: u64,
) -> Result<DynamicsModel> {
    let horizon = check_rollouts(rollouts, dims)?;
    let pooled: Vec<DVector<f64>> = rollouts.iter().flatten().cloned().collect();

    let fitted;
    let mixture = match mixture {
        Some(m) => Some(m),
        None => match fit_em(&pooled, cfg.gmm_components, seed, cfg.em_max_iters, cfg.em_tol) {
            Ok(m) => {
                fitted = m;
                Some(&fitted)
            }
            Err(e) => {
                warn!("mixture fit failed ({e}), using the global empirical prior");
                None
            }
        },
    };

    let global = || -> Result<IwPrior> {
        let (mu_bar, sigma_bar) = empirical_moments(&pooled)?;
        Ok(IwPrior::new(sigma_bar, mu_bar, cfg.prior_m, cfg.prior_n0)?.with_rank_one(cfg.rank_one_count))
    };

    let priors = (0..horizon)
        .map(|t| {
            let window: Vec<DVector<f64>> = rollouts.iter().map(|r| r[t].clone()).collect();
            match mixture.map(|m| gmm_prior(m, &window)) {
                Some(Ok((phi, mu0))) => {
                    Ok(IwPrior::new(phi, mu0, cfg.prior_m, cfg.prior_n0)?.with_rank_one(cfg.rank_one_count))
                }
                Some(Err(e)) => {
                    warn!("mixture prior failed at t={t} ({e}), using the global empirical prior");
                    global()
                }
                None => global(),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    fit_dynamics_with_priors(rollouts, dims, &priors)
}
