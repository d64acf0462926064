use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use gps_core::dynamics::{
    fit_dynamics, fit_dynamics_with_priors, posterior_moments, DynamicsConfig, IwPrior, RankOneCount,
};
use gps_core::gaussian::{condition_gaussian, empirical_moments, BlockDims, JointGaussian};
use gps_core::Error;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn concat(parts: &[&DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
}

/// Rollouts `[rollout][t]` of `x' = A x + B u` with random states and controls.
fn linear_rollouts(a: &DMatrix<f64>, b: &DMatrix<f64>, count: usize, horizon: usize, seed: u64) -> Vec<Vec<DVector<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..horizon)
                .map(|_| {
                    let x = DVector::from_fn(a.ncols(), |_, _| normal(&mut rng));
                    let u = DVector::from_fn(b.ncols(), |_, _| normal(&mut rng));
                    let xn = a * &x + b * &u;
                    concat(&[&x, &u, &xn])
                })
                .collect()
        })
        .collect()
}

/// The posterior covariance written out entry by entry.
fn posterior_cov_by_hand(phi: &DMatrix<f64>, mu0: &DVector<f64>, window: &[DVector<f64>]) -> DMatrix<f64> {
    let d = mu0.len();
    let big_m = window.len() as f64;
    let (m, n, n0) = (1.0, big_m, 1.0);
    let mut mean = vec![0.0; d];
    for w in window {
        for i in 0..d {
            mean[i] += w[i] / big_m;
        }
    }
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for w in window {
                s += (w[i] - mean[i]) * (w[j] - mean[j]);
            }
            let emp = s / big_m;
            let rank_one = (mean[i] - mu0[i]) * (mean[j] - mu0[j]);
            out[(i, j)] = (phi[(i, j)] + big_m * emp + big_m * m / (n + m) * rank_one) / (big_m + n0);
        }
    }
    out
}

#[test]
fn single_rollout_mean_averages_with_global_moments() {
    let dims = BlockDims::new(2, 1, 2);
    let rollouts = linear_rollouts(&DMatrix::identity(2, 2), &DMatrix::from_element(2, 1, 0.5), 1, 6, 3);
    let (mu_bar, sigma_bar) = empirical_moments(&rollouts[0]).unwrap();
    let prior = IwPrior::new(sigma_bar, mu_bar.clone(), 1.0, 1.0).unwrap();
    let model = fit_dynamics_with_priors(&rollouts, dims, &vec![prior; 6]).unwrap();
    for t in 0..6 {
        let expected = (&mu_bar + &rollouts[0][t]) / 2.0;
        assert!((model.timestep(t).unwrap().mean() - expected).amax() < 1e-14);
    }
}

#[test]
fn prior_agreement_leaves_mean_and_drops_rank_one_term() {
    let window: Vec<DVector<f64>> = [[1.0, 0.0, 2.0], [3.0, 1.0, 0.0], [2.0, 2.0, 1.0]]
        .iter()
        .map(|r| DVector::from_row_slice(r))
        .collect();
    let (mu_hat, sigma_hat) = empirical_moments(&window).unwrap();
    let phi = DMatrix::from_diagonal_element(3, 3, 0.7);
    let prior = IwPrior::new(phi.clone(), mu_hat.clone(), 1.0, 1.0).unwrap();
    let (mean, cov) = posterior_moments(&prior, &mu_hat, &sigma_hat, 3);
    assert!((mean - &mu_hat).amax() < 1e-15);
    assert!((cov - (phi + sigma_hat * 3.0) / 4.0).amax() < 1e-15);
}

#[test]
fn posterior_covariance_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = BlockDims::new(2, 1, 2);
    let d = dims.total();
    let rollouts: Vec<Vec<DVector<f64>>> = (0..4)
        .map(|_| (0..3).map(|_| DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0))).collect())
        .collect();
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let phi = &a * a.transpose() + DMatrix::identity(d, d) * 0.3;
    let mu0 = DVector::from_fn(d, |i, _| 0.1 * i as f64 - 0.2);
    let prior = IwPrior::new(phi.clone(), mu0.clone(), 1.0, 1.0).unwrap();
    let model = fit_dynamics_with_priors(&rollouts, dims, &vec![prior; 3]).unwrap();
    for t in 0..3 {
        let window: Vec<DVector<f64>> = rollouts.iter().map(|r| r[t].clone()).collect();
        let want = posterior_cov_by_hand(&phi, &mu0, &window);
        let got = model.timestep(t).unwrap().cov();
        assert!((got - want).amax() < 1e-12, "t={t}");
    }
}

#[test]
fn noiseless_linear_system_is_recovered() {
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
    let b = DMatrix::from_row_slice(2, 1, &[0.5, -0.3]);
    let rollouts = linear_rollouts(&a, &b, 30, 4, 11);
    let model = fit_dynamics(&rollouts, BlockDims::new(2, 1, 2), &DynamicsConfig::default(), None, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in 0..4 {
        for _ in 0..10 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
            let u = DVector::from_fn(1, |_, _| rng.random_range(-0.5..0.5));
            let got = model.predict(t, &x, &u).unwrap();
            let want = &a * &x + &b * &u;
            assert!((&got - &want).amax() < 1e-6, "t={t}: {:e}", (got - want).amax());
        }
    }
}

#[test]
fn independent_next_state_predicts_its_mean() {
    let mean = DVector::from_row_slice(&[0.0, 1.0, 4.0]);
    let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 2.0, 0.0, 0.0, 0.0, 0.0]);
    let g = JointGaussian::new(mean, cov, BlockDims::new(1, 1, 1)).unwrap();
    let model = gps_core::dynamics::DynamicsModel::from_parts(vec![g], 1).unwrap();
    for x in [-5.0, 0.0, 7.0] {
        let got = model.predict(0, &DVector::from_element(1, x), &DVector::from_element(1, -x)).unwrap();
        assert_eq!(got[0], 4.0);
    }
    let (f, f0) = model.linearize(0).unwrap();
    assert_eq!(f, DMatrix::zeros(1, 2));
    assert_eq!(f0[0], 4.0);
}

#[test]
fn exact_linear_relation_linearizes_to_its_slope() {
    let g = JointGaussian::new(
        DVector::zeros(2),
        DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]),
        BlockDims::new(1, 0, 1),
    )
    .unwrap();
    let model = gps_core::dynamics::DynamicsModel::from_parts(vec![g], 1).unwrap();
    let (f, f0) = model.linearize(0).unwrap();
    assert!((f[(0, 0)] - 2.0).abs() < 1e-5);
    assert_eq!(f0[0], 0.0);
}

#[test]
fn prediction_delegates_to_conditioning_and_matches_linearization() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let mut rollouts = linear_rollouts(&a, &b, 8, 5, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for r in &mut rollouts {
        for tuple in r.iter_mut() {
            for i in 3..5 {
                tuple[i] += 0.05 * normal(&mut rng);
            }
        }
    }
    let model = fit_dynamics(&rollouts, BlockDims::new(2, 1, 2), &DynamicsConfig::default(), None, 1).unwrap();
    for t in 0..5 {
        let (f, f0) = model.linearize(t).unwrap();
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let u = DVector::from_fn(1, |_, _| rng.random_range(-3.0..3.0));
            let xu = concat(&[&x, &u]);
            let predicted = model.predict(t, &x, &u).unwrap();
            assert_eq!(predicted, condition_gaussian(model.timestep(t).unwrap(), &xu).unwrap());
            assert!((&f * &xu + &f0 - &predicted).amax() < 1e-10);
        }
    }
}

fn draw_tuples(count: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    (0..count)
        .map(|_| {
            let x = 2.0 + normal(rng);
            let u = -1.0 + 0.5 * normal(rng);
            DVector::from_row_slice(&[x, u, 0.7 * x + u + 0.1 * normal(rng)])
        })
        .collect()
}

#[test]
fn many_rollouts_overwhelm_the_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dims = BlockDims::new(1, 1, 1);
    let window = draw_tuples(10_000, &mut rng);
    let rollouts: Vec<Vec<DVector<f64>>> = window.iter().map(|w| vec![w.clone()]).collect();
    let prior = IwPrior::new(DMatrix::identity(3, 3), DVector::zeros(3), 1.0, 1.0).unwrap();
    let model = fit_dynamics_with_priors(&rollouts, dims, &[prior]).unwrap();
    let (mu_hat, sigma_hat) = empirical_moments(&window).unwrap();
    let g = model.timestep(0).unwrap();
    for i in 0..3 {
        assert!((g.mean()[i] - mu_hat[i]).abs() <= 0.01 * mu_hat[i].abs());
        for j in 0..3 {
            let scale = (sigma_hat[(i, i)] * sigma_hat[(j, j)]).sqrt();
            assert!((g.cov()[(i, j)] - sigma_hat[(i, j)]).abs() <= 0.01 * scale, "cov {i},{j}");
        }
    }
}

/// With `n = n0` the limit holds only when the prior mean agrees with the
/// data; here it comes from a large independent pilot.
#[test]
fn prior_strength_weighting_converges_with_a_consistent_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let pilot = draw_tuples(5_000, &mut rng);
    let (mu_bar, sigma_bar) = empirical_moments(&pilot).unwrap();
    let prior = IwPrior::new(sigma_bar, mu_bar, 1.0, 1.0)
        .unwrap()
        .with_rank_one(RankOneCount::PriorStrength);
    let window = draw_tuples(10_000, &mut rng);
    let rollouts: Vec<Vec<DVector<f64>>> = window.iter().map(|w| vec![w.clone()]).collect();
    let model = fit_dynamics_with_priors(&rollouts, BlockDims::new(1, 1, 1), &[prior]).unwrap();
    let (_, sigma_hat) = empirical_moments(&window).unwrap();
    let cov = model.timestep(0).unwrap().cov();
    for i in 0..3 {
        for j in 0..3 {
            let scale = (sigma_hat[(i, i)] * sigma_hat[(j, j)]).sqrt();
            assert!((cov[(i, j)] - sigma_hat[(i, j)]).abs() <= 0.01 * scale, "cov {i},{j}");
        }
    }
}

/// With `n = n0` the mean-disagreement term is weighted `M m / (n0 + m)`,
/// so half of `(μ̂ - μ0)(μ̂ - μ0)^T` survives however many rollouts there are.
#[test]
fn prior_strength_rank_one_term_persists() {
    let emp_mean = DVector::from_row_slice(&[2.0, 0.0]);
    let emp_cov = DMatrix::identity(2, 2);
    let prior = IwPrior::new(DMatrix::identity(2, 2), DVector::zeros(2), 1.0, 1.0)
        .unwrap()
        .with_rank_one(RankOneCount::PriorStrength);
    let (_, cov) = posterior_moments(&prior, &emp_mean, &emp_cov, 1_000_000);
    assert!((cov[(0, 0)] - 3.0).abs() < 1e-5);
    assert!((cov[(1, 1)] - 1.0).abs() < 1e-5);
}

#[test]
fn fitting_is_deterministic() {
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.9]);
    let b = DMatrix::from_row_slice(2, 1, &[0.1, 1.0]);
    let rollouts = linear_rollouts(&a, &b, 6, 5, 41);
    let cfg = DynamicsConfig::default();
    let one = fit_dynamics(&rollouts, BlockDims::new(2, 1, 2), &cfg, None, 5).unwrap();
    let two = fit_dynamics(&rollouts, BlockDims::new(2, 1, 2), &cfg, None, 5).unwrap();
    assert_eq!(one, two);
}

#[test]
fn shape_errors() {
    let dims = BlockDims::new(1, 1, 1);
    let cfg = DynamicsConfig::default();
    let tuple = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
    let ragged = vec![vec![tuple.clone(); 3], vec![tuple.clone(); 2]];
    assert!(matches!(fit_dynamics(&ragged, dims, &cfg, None, 0), Err(Error::HorizonMismatch { .. })));
    assert!(fit_dynamics(&[], dims, &cfg, None, 0).is_err());
    let model = fit_dynamics(&[vec![tuple; 2]], dims, &cfg, None, 0).unwrap();
    assert!(matches!(
        model.predict(2, &DVector::zeros(1), &DVector::zeros(1)),
        Err(Error::TimestepOutOfRange { .. })
    ));
    assert!(IwPrior::new(DMatrix::identity(3, 3), DVector::zeros(3), 0.0, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn posterior_mean_lies_between_prior_and_data(
        prior_mean in proptest::collection::vec(-10.0f64..10.0, 3),
        rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..12),
    ) {
        let window: Vec<DVector<f64>> = rows.iter().map(|r| DVector::from_row_slice(r)).collect();
        let (mu_hat, sigma_hat) = empirical_moments(&window).unwrap();
        let mu0 = DVector::from_vec(prior_mean);
        let prior = IwPrior::new(DMatrix::identity(3, 3), mu0.clone(), 1.0, 1.0).unwrap();
        let (mean, cov) = posterior_moments(&prior, &mu_hat, &sigma_hat, window.len());
        for i in 0..3 {
            let lo = mu0[i].min(mu_hat[i]) - 1e-12;
            let hi = mu0[i].max(mu_hat[i]) + 1e-12;
            prop_assert!(mean[i] >= lo && mean[i] <= hi);
        }
        prop_assert_eq!(&cov, &cov.transpose());
        prop_assert!(cov.symmetric_eigen().eigenvalues.min() > 0.0);
    }
}
