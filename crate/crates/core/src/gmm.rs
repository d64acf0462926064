//! Gaussian mixture fitted by expectation-maximization, and the
//! likelihood-weighted prior moments derived from it.

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{chol_log_det, empirical_moments, symmetrize};

/// Relative covariance floor added in every M-step.
pub const COV_FLOOR_REL: f64 = 1e-8;
/// Components whose mixing weight drops below this are re-seeded.
pub const COLLAPSE_WEIGHT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    floor: f64,
}

/// Per-iteration diagnostics of an EM fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    /// Total data log-likelihood before each M-step, plus the final value.
    pub log_likelihoods: Vec<f64>,
    /// Indices into `log_likelihoods` after which a component was re-seeded.
    pub reseeds: Vec<usize>,
}

impl EmTrace {
    /// Smallest `ll[i+1] - ll[i]` over steps not interrupted by a re-seed.
    pub fn worst_step(&self) -> f64 {
        self.log_likelihoods
            .windows(2)
            .enumerate()
            .filter(|(i, _)| !self.reseeds.contains(i))
            .map(|(_, w)| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

struct Factored {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GmmModel {
    /// Builds a model from explicit parameters. Weights are normalized.
    pub fn from_parts(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(Error::InvalidArgument(
                "mixture needs matching, non-empty weights/means/covs".into(),
            ));
        }
        let dim = means[0].len();
        for (m, c) in means.iter().zip(&covs) {
            if m.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: m.len(),
                });
            }
            if c.nrows() != dim || c.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: c.nrows(),
                });
            }
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || total <= 0.0 {
            return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(GmmModel {
            weights,
            means,
            covs,
            floor: 0.0,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    /// Covariance floor used while fitting (zero for hand-built models).
    pub fn floor(&self) -> f64 {
        self.floor
    }

    fn factor(&self) -> Result<Vec<Factored>> {
        self.covs
            .iter()
            .map(|c| {
                let chol = Cholesky::new(c.clone()).ok_or_else(|| {
                    Error::InvalidArgument("mixture covariance is not positive definite".into())
                })?;
                let log_det = chol_log_det(&chol);
                Ok(Factored { chol, log_det })
            })
            .collect()
    }

    /// Total log-likelihood of `data` under the mixture.
    pub fn log_likelihood(&self, data: &[DVector<f64>]) -> Result<f64> {
        let factored = self.factor()?;
        let mut buf = vec![0.0; self.dim()];
        let mut comp = vec![0.0; self.components()];
        let mut total = 0.0;
        for x in data {
            for (k, f) in factored.iter().enumerate() {
                comp[k] = self.weights[k].ln() + log_pdf(x, &self.means[k], f, &mut buf);
            }
            total += log_sum_exp(&comp);
        }
        Ok(total)
    }
}

/// Log-density via forward substitution into a scratch buffer.
fn log_pdf(x: &DVector<f64>, mean: &DVector<f64>, f: &Factored, buf: &mut [f64]) -> f64 {
    let l = f.chol.l_dirty();
    let n = x.len();
    let mut quad = 0.0;
    for i in 0..n {
        let mut s = x[i] - mean[i];
        for j in 0..i {
            s -= l[(i, j)] * buf[j];
        }
        let z = s / l[(i, i)];
        buf[i] = z;
        quad += z * z;
    }
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + f.log_det + quad)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Expected complete-data log-likelihood of one component's covariance,
/// up to terms that do not depend on it: `-N_k/2 (log|Σ| + tr(Σ^{-1} S))`.
fn covariance_objective(cov: &DMatrix<f64>, scatter: &DMatrix<f64>, n_k: f64) -> Option<f64> {
    let chol = Cholesky::new(cov.clone())?;
    let log_det = chol_log_det(&chol);
    let trace = chol.solve(scatter).trace();
    Some(-0.5 * n_k * (log_det + trace))
}

fn kmeans_pp_seeds(data: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut dist: Vec<f64> = data
        .iter()
        .map(|x| (x - &centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let idx = if total > 0.0 && total.is_finite() {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = data.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..data.len())
        };
        let c = data[idx].clone();
        for (d, x) in dist.iter_mut().zip(data) {
            *d = d.min((x - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

/// Fits a `k`-component mixture to `data`.
pub fn fit_em(
    data: &[DVector<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<GmmModel> {
    fit_em_traced(data, k, seed, max_iters, tol).map(|(m, _)| m)
}

/// [`fit_em`] that also returns the log-likelihood trace.
///
/// The M-step is a generalized one: a floored covariance candidate is only
/// accepted when it does not lower the component's expected log-likelihood,
/// otherwise the previous covariance is kept with the updated mean. This keeps
/// the data log-likelihood monotone even with the floor in place.
pub fn fit_em_traced(
    data: &[DVector<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(GmmModel, EmTrace)> {
    if k == 0 {
        return Err(Error::InvalidArgument("mixture needs at least one component".into()));
    }
    if data.len() < k {
        return Err(Error::InvalidArgument(format!(
            "mixture with {k} components needs at least {k} points, got {}",
            data.len()
        )));
    }
    let (global_mean, global_cov) = empirical_moments(data)?;
    let dim = global_mean.len();
    let mean_diag = global_cov.diagonal().mean();
    let floor = if mean_diag > 0.0 {
        COV_FLOOR_REL * mean_diag
    } else {
        COV_FLOOR_REL
    };
    let floored = |c: DMatrix<f64>| -> DMatrix<f64> {
        let mut c = symmetrize(&c);
        for i in 0..dim {
            c[(i, i)] += floor;
        }
        c
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = kmeans_pp_seeds(data, k, &mut rng);
    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means,
        covs: vec![floored(global_cov.clone()); k],
        floor,
    };

    let n = data.len();
    let mut trace = EmTrace::default();
    let mut resp = vec![0.0; n * k];
    let mut buf = vec![0.0; dim];
    let mut comp = vec![0.0; k];

    for iter in 0..=max_iters {
        // E-step
        let factored = model.factor()?;
        let mut ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            for (j, f) in factored.iter().enumerate() {
                comp[j] = model.weights[j].ln() + log_pdf(x, &model.means[j], f, &mut buf);
            }
            let norm = log_sum_exp(&comp);
            ll += norm;
            for j in 0..k {
                resp[i * k + j] = (comp[j] - norm).exp();
            }
        }
        if !ll.is_finite() {
            return Err(Error::InvalidArgument("mixture log-likelihood is not finite".into()));
        }
        let prev = trace.log_likelihoods.last().copied();
        trace.log_likelihoods.push(ll);
        if iter == max_iters {
            break;
        }
        if let Some(prev) = prev {
            if trace.reseeds.last() != Some(&(trace.log_likelihoods.len() - 2))
                && ll - prev <= tol * ll.abs().max(1.0)
            {
                break;
            }
        }

        // M-step
        let mut reseeded = false;
        for j in 0..k {
            let n_k: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if n_k / (n as f64) < COLLAPSE_WEIGHT {
                let pick = rng.random_range(0..n);
                warn!("mixture component {j} collapsed (weight {:e}), re-seeding from datum {pick}", n_k / n as f64);
                model.means[j] = data[pick].clone();
                model.covs[j] = floored(global_cov.clone());
                model.weights[j] = 1.0 / k as f64;
                reseeded = true;
                continue;
            }
            let mut mean = DVector::zeros(dim);
            for (i, x) in data.iter().enumerate() {
                mean.axpy(resp[i * k + j], x, 1.0);
            }
            mean /= n_k;
            let mut scatter = DMatrix::zeros(dim, dim);
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * k + j];
                if r > 0.0 {
                    let d = x - &mean;
                    scatter.syger(r / n_k, &d, &d, 1.0);
                }
            }
            scatter.fill_upper_triangle_with_lower_triangle();
            let candidate = floored(scatter.clone());
            let keep_candidate = match (
                covariance_objective(&candidate, &scatter, n_k),
                covariance_objective(&model.covs[j], &scatter, n_k),
            ) {
                (Some(new), Some(old)) => new >= old,
                (Some(_), None) => true,
                _ => false,
            };
            if keep_candidate {
                model.covs[j] = candidate;
            }
            model.means[j] = mean;
            model.weights[j] = n_k / n as f64;
        }
        let total: f64 = model.weights.iter().sum();
        for w in &mut model.weights {
            *w /= total;
        }
        if reseeded {
            trace.reseeds.push(trace.log_likelihoods.len() - 1);
        }
    }
    debug!(
        "EM finished after {} evaluations, log-likelihood {:.6}",
        trace.log_likelihoods.len(),
        trace.log_likelihoods.last().copied().unwrap_or(f64::NAN)
    );
    Ok((model, trace))
}

/// Prior moments `(Φ, μ0)` as the window-likelihood-weighted average of the
/// mixture components.
///
/// Each component's weight is the joint likelihood of every point in
/// `window`, accumulated as a sum of log-densities and normalized with
/// log-sum-exp. The mixing proportions do not enter.
pub fn gmm_prior(model: &GmmModel, window: &[DVector<f64>]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if window.is_empty() {
        return Err(Error::NoSamples);
    }
    let dim = model.dim();
    if let Some(bad) = window.iter().find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let weights = window_weights(model, window)?;
    let mut phi = DMatrix::zeros(dim, dim);
    let mut mu0 = DVector::zeros(dim);
    for ((w, m), c) in weights.iter().zip(&model.means).zip(&model.covs) {
        if *w > 0.0 {
            phi += c * *w;
            mu0 += m * *w;
        }
    }
    Ok((symmetrize(&phi), mu0))
}

/// Normalized per-component weights `p(window | component)`.
pub fn window_weights(model: &GmmModel, window: &[DVector<f64>]) -> Result<Vec<f64>> {
    let factored = model.factor()?;
    let mut buf = vec![0.0; model.dim()];
    let log_w: Vec<f64> = factored
        .iter()
        .zip(&model.means)
        .map(|(f, m)| window.iter().map(|x| log_pdf(x, m, f, &mut buf)).sum())
        .collect();
    let norm = log_sum_exp(&log_w);
    if !norm.is_finite() {
        warn!("all mixture window likelihoods underflowed, using uniform weights");
        return Ok(vec![1.0 / log_w.len() as f64; log_w.len()]);
    }
    Ok(log_w.iter().map(|l| (l - norm).exp()).collect())
}
