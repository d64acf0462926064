//! The outer guided-policy-search loop.
//!
//! Each outer iteration fits one dynamics model per example trajectory on
//! all of that trajectory's rollouts so far, alternates one iLQG pass per
//! trajectory with one policy fit `inner_iters` times, then rolls the policy
//! out on the simulator from every starting fill and appends the rollouts to
//! the data.

use log::info;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delay::{HistoryBuffer, HistoryLayout};
use crate::dynamics::{fit_dynamics, DynamicsConfig, DynamicsModel};
use crate::env::{PouringSim, SimParams, TraceRow};
use crate::error::{Error, Result};
use crate::gaussian::BlockDims;
use crate::gmm::fit_em;
use crate::policy::{fit_policy, synthesize_training_pairs, FitConfig, PolicyNet, RegressionSet};
use crate::trajopt::{
    backward_pass, line_search, AffineSystem, CostModel, HistoryPolicy,
    LocalPolicy, NominalTrajectory, PourCost, PourCostWeights, Regularizer,
};
use crate::types::{ControlVec, Trajectory, CONTROL_DIM, STATE_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidConfig {
    /// Proportional gain, rad/s per gram remaining.
    pub p: f64,
    /// Integral gain on the per-step sum of remaining grams.
    pub i: f64,
    /// Derivative gain on the per-step change in remaining grams.
    pub d: f64,
    /// Relative per-trajectory gain perturbation, uniform in `±jitter`.
    pub jitter: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        PidConfig {
            p: 0.02,
            i: 0.001,
            d: 0.05,
            jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub fit: FitConfig,
    /// Gains-based samples drawn around every optimized timestep.
    pub samples_per_step: usize,
    /// Sampling standard deviation as a fraction of each state dimension's
    /// spread along the trajectory.
    pub sigma_fraction: f64,
    /// Pair the hidden layer with the current state only instead of the
    /// whole stacked input.
    pub hidden_current_state_only: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            fit: FitConfig::default(),
            samples_per_step: 20,
            sigma_fraction: 0.05,
            hidden_current_state_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpsConfig {
    /// Number of example trajectories `N`.
    pub trajectories: usize,
    /// Horizon `T` in steps.
    pub horizon: usize,
    /// History length `n`, current state included.
    pub history: usize,
    pub inner_iters: usize,
    pub max_outer_iters: usize,
    pub target: f64,
    pub fill_min: f64,
    pub fill_max: f64,
    pub lambda_init: f64,
    pub lambda_growth: f64,
    pub lambda_max: f64,
    /// Stop once every trajectory's `|error|` is at most this many grams.
    pub convergence_threshold: f64,
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to policy rollout controls.
    pub exploration_noise: f64,
    pub pid: PidConfig,
    pub cost: PourCostWeights,
    pub dynamics: DynamicsConfig,
    pub policy: PolicyConfig,
}

impl Default for GpsConfig {
    fn default() -> Self {
        GpsConfig {
            trajectories: 10,
            horizon: 50,
            history: 4,
            inner_iters: 10,
            max_outer_iters: 40,
            target: 100.0,
            fill_min: 200.0,
            fill_max: 400.0,
            lambda_init: 0.1,
            lambda_growth: 2.0,
            lambda_max: 10.0,
            convergence_threshold: 10.0,
            seed: 0,
            exploration_noise: 0.0,
            pid: PidConfig::default(),
            cost: PourCostWeights::default(),
            dynamics: DynamicsConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

fn config_err(field: &str, message: &str) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl GpsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories < 1 {
            return Err(config_err("gps.trajectories", "must be at least 1"));
        }
        if self.horizon < 2 {
            return Err(config_err("gps.horizon", "must be at least 2"));
        }
        if self.history < 1 {
            return Err(config_err("gps.history", "must be at least 1"));
        }
        if self.inner_iters < 1 {
            return Err(config_err("gps.inner_iters", "must be at least 1"));
        }
        if !(self.target > 0.0 && self.target.is_finite()) {
            return Err(config_err("gps.target", "must be positive"));
        }
        if !(self.fill_min > self.target && self.fill_max >= self.fill_min && self.fill_max.is_finite()) {
            return Err(config_err(
                "gps.fill_min",
                "fills must exceed the target and satisfy fill_min <= fill_max",
            ));
        }
        if !(self.lambda_init >= 0.0 && self.lambda_growth >= 1.0 && self.lambda_max >= self.lambda_init) {
            return Err(config_err(
                "gps.lambda_init",
                "need lambda_init >= 0, lambda_growth >= 1 and lambda_max >= lambda_init",
            ));
        }
        if self.convergence_threshold.is_nan() || self.convergence_threshold < 0.0 {
            return Err(config_err("gps.convergence_threshold", "must be non-negative"));
        }
        if self.exploration_noise < 0.0 || !self.exploration_noise.is_finite() {
            return Err(config_err("gps.exploration_noise", "must be non-negative"));
        }
        if self.dynamics.gmm_components < 1 {
            return Err(config_err("gps.dynamics.gmm_components", "must be at least 1"));
        }
        if !(self.dynamics.prior_m > 0.0 && self.dynamics.prior_n0 > 0.0) {
            return Err(config_err("gps.dynamics.prior_m", "prior strengths must be positive"));
        }
        let fit = &self.policy.fit;
        if fit.batch_size < 1 {
            return Err(config_err("gps.policy.fit.batch_size", "must be at least 1"));
        }
        if !(fit.learning_rate > 0.0) {
            return Err(config_err("gps.policy.fit.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&fit.momentum) {
            return Err(config_err("gps.policy.fit.momentum", "must lie in [0, 1)"));
        }
        if self.policy.sigma_fraction < 0.0 {
            return Err(config_err("gps.policy.sigma_fraction", "must be non-negative"));
        }
        Ok(())
    }

    pub fn layout(&self) -> HistoryLayout {
        HistoryLayout {
            n: self.history.max(1),
            state_dim: STATE_DIM,
            control_dim: CONTROL_DIM,
        }
    }

    /// Initial fills spread evenly over `[fill_min, fill_max]`.
    pub fn fills(&self) -> Vec<f64> {
        let n = self.trajectories;
        if n == 1 {
            return vec![0.5 * (self.fill_min + self.fill_max)];
        }
        (0..n)
            .map(|i| self.fill_min + (self.fill_max - self.fill_min) * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// λ for a 1-based outer iteration.
    pub fn lambda_at(&self, iteration: usize) -> f64 {
        let mut l = self.lambda_init;
        for _ in 1..iteration {
            l = (l * self.lambda_growth).min(self.lambda_max);
        }
        l
    }
}

/// Deterministic sub-seed from a base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, p| mix(acc ^ mix(*p)))
}

mod purpose {
    pub const PID: u64 = 1;
    pub const POLICY_INIT: u64 = 2;
    pub const GMM: u64 = 3;
    pub const SAMPLES: u64 = 4;
    pub const FIT: u64 = 5;
    pub const ROLLOUT: u64 = 6;
}

/// A simulator rollout with its ground-truth trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub fill: f64,
    pub trajectory: Trajectory,
    pub trace: Vec<TraceRow>,
    /// Target minus the grams in the bowl at the end of the horizon.
    pub final_error: f64,
}

/// Runs `controller` for `horizon` steps from an upright cup holding `fill`.
///
/// The controller sees the history buffer (oldest first) and returns a wrist
/// velocity; the applied control is clamped to the simulator's limit.
pub fn rollout(
    sim_params: &SimParams,
    fill: f64,
    target: f64,
    horizon: usize,
    history: usize,
    seed: u64,
    mut controller: impl FnMut(usize, &HistoryBuffer) -> Result<f64>,
) -> Result<Rollout> {
    let mut sim = PouringSim::new(sim_params.clone())?;
    let first = sim.reset(fill, target, seed)?;
    let mut buf = HistoryBuffer::new(history, first)?;
    let limit = sim_params.velocity_limit;
    let mut states = vec![first];
    let mut controls = Vec::with_capacity(horizon);
    let mut trace = Vec::with_capacity(horizon + 1);
    for t in 0..horizon {
        let raw = controller(t, &buf)?;
        if !raw.is_finite() {
            return Err(Error::NonFiniteRollout { step: t });
        }
        let u = ControlVec::clamped(raw, limit)?;
        trace.push(TraceRow {
            t,
            u: u.velocity(),
            truth: sim.snapshot(),
            obs: sim.observe(),
        });
        sim.step(u)?;
        let obs = sim.observe();
        buf.push(obs, u);
        states.push(obs);
        controls.push(u);
    }
    trace.push(TraceRow {
        t: horizon,
        u: f64::NAN,
        truth: sim.snapshot(),
        obs: sim.observe(),
    });
    Ok(Rollout {
        fill,
        trajectory: Trajectory::new(states, controls)?,
        trace,
        final_error: sim.pour_error(),
    })
}

/// PID rollout on the remaining-to-pour signal, with the integral in
/// gram-seconds and frozen while the output saturates.
pub fn pid_rollout(
    sim: &SimParams,
    cfg: &GpsConfig,
    fill: f64,
    gains: (f64, f64, f64),
) -> Result<Rollout> {
    let (p, i, d) = gains;
    let limit = sim.velocity_limit;
    let mut integral = 0.0;
    rollout(sim, fill, cfg.target, cfg.horizon, cfg.history, 0, |_, buf| {
        let x = buf.current();
        let pd = p * x.remaining() + d * x.d_remaining();
        let candidate = integral + x.remaining() * sim.dt;
        if (pd + i * candidate).abs() < limit {
            integral = candidate;
        }
        Ok(pd + i * integral)
    })
}

/// PID rollouts from each of the `N` starting fills, with per-trajectory
/// gain jitter.
pub fn initialize_trajectories(cfg: &GpsConfig, sim: &SimParams) -> Result<Vec<Rollout>> {
    cfg.validate()?;
    cfg.fills()
        .into_iter()
        .enumerate()
        .map(|(k, fill)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[purpose::PID, k as u64]));
            let mut jitter = || 1.0 + cfg.pid.jitter * rng.random_range(-1.0..=1.0);
            let gains = (cfg.pid.p * jitter(), cfg.pid.i * jitter(), cfg.pid.d * jitter());
            pid_rollout(sim, cfg, fill, gains).map_err(|e| e.in_trajectory(k))
        })
        .collect()
}

/// Rolls the policy out, clamping its output at execution time.
pub fn policy_rollout(
    net: &PolicyNet,
    sim: &SimParams,
    cfg: &GpsConfig,
    fill: f64,
    noise_seed: u64,
) -> Result<Rollout> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    rollout(sim, fill, cfg.target, cfg.horizon, cfg.history, noise_seed, |_, buf| {
        let mut u = net.forward(&buf.augment_for_policy())?[0];
        if cfg.exploration_noise > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            u += cfg.exploration_noise * z;
        }
        Ok(u)
    })
}

/// `<z_t, u_t, x_{t+1}>` tuples of a trajectory under history length `n`.
pub fn dynamics_tuples(traj: &Trajectory, n: usize) -> Result<Vec<DVector<f64>>> {
    let mut buf = HistoryBuffer::new(n, traj.states()[0])?;
    let mut out = Vec::with_capacity(traj.horizon());
    for (t, u) in traj.controls().iter().enumerate() {
        let next = traj.states()[t + 1];
        let mut v: Vec<f64> = buf.augment_for_dynamics(*u).iter().copied().collect();
        v.extend_from_slice(next.as_slice());
        out.push(DVector::from_vec(v));
        buf.push(next, *u);
    }
    Ok(out)
}

/// History-space states and controls of a trajectory.
pub fn history_plan(traj: &Trajectory, n: usize) -> Result<NominalTrajectory> {
    let mut buf = HistoryBuffer::new(n, traj.states()[0])?;
    let mut states = vec![buf.history_vector()];
    let mut controls = Vec::with_capacity(traj.horizon());
    for (t, u) in traj.controls().iter().enumerate() {
        buf.push(traj.states()[t + 1], *u);
        states.push(buf.history_vector());
        controls.push(DVector::from_row_slice(u.as_slice()));
    }
    NominalTrajectory::new(states, controls)
}

/// Fits one model per trajectory from its accumulated rollouts.
pub fn fit_models(
    datasets: &[Vec<Trajectory>],
    cfg: &GpsConfig,
    iteration: usize,
) -> Result<Vec<DynamicsModel>> {
    let layout = cfg.layout();
    let dims = BlockDims::new(layout.history_dim(), CONTROL_DIM, STATE_DIM);
    let tuples: Vec<Vec<Vec<DVector<f64>>>> = datasets
        .iter()
        .map(|rollouts| {
            rollouts
                .iter()
                .map(|r| dynamics_tuples(r, cfg.history))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let shared = if cfg.dynamics.pool_trajectories {
        let pooled: Vec<DVector<f64>> = tuples.iter().flatten().flatten().cloned().collect();
        let seed = derive_seed(cfg.seed, &[purpose::GMM, iteration as u64, u64::MAX]);
        match fit_em(
            &pooled,
            cfg.dynamics.gmm_components,
            seed,
            cfg.dynamics.em_max_iters,
            cfg.dynamics.em_tol,
        ) {
            Ok(m) => Some(m),
            Err(e) => {
                log::warn!("pooled mixture fit failed ({e}); fitting per trajectory");
                None
            }
        }
    } else {
        None
    };

    tuples
        .par_iter()
        .enumerate()
        .map(|(k, rollouts)| {
            let seed = derive_seed(cfg.seed, &[purpose::GMM, iteration as u64, k as u64]);
            fit_dynamics(rollouts, dims, &cfg.dynamics, shared.as_ref(), seed)
                .map_err(|e| e.in_trajectory(k))
        })
        .collect()
}

/// Per-dimension sampling spread: a fraction of each state component's
/// standard deviation along the plan; control slots of the history stay
/// unperturbed since the policy never sees them.
pub fn sampling_sigma(plan: &NominalTrajectory, layout: &HistoryLayout, fraction: f64) -> DVector<f64> {
    let dim = plan.state_dim();
    let count = plan.states.len() as f64;
    let mut sigma = DVector::zeros(dim);
    for i in 0..layout.n {
        for j in 0..layout.state_dim {
            let idx = layout.state_offset(i) + j;
            let mean = plan.states.iter().map(|z| z[idx]).sum::<f64>() / count;
            let var = plan.states.iter().map(|z| (z[idx] - mean).powi(2)).sum::<f64>() / count;
            sigma[idx] = fraction * var.sqrt();
        }
    }
    sigma
}

/// Statistics of one trajectory's iLQG pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassStats {
    pub cost_before: f64,
    pub cost_after: f64,
    pub improved: bool,
    /// `max_t |u_t - π(x_t)|` on the accepted plan under the pass's policy.
    pub max_policy_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerIterationStats {
    pub passes: Vec<PassStats>,
    pub policy_mse: f64,
}

pub struct InnerLoopOutput {
    pub plans: Vec<NominalTrajectory>,
    pub policy: PolicyNet,
    pub stats: Vec<InnerIterationStats>,
}

/// Alternates one iLQG pass per trajectory with one policy fit,
/// `cfg.inner_iters` times.
pub fn inner_loop(
    systems: &[AffineSystem],
    plans: Vec<NominalTrajectory>,
    policy: PolicyNet,
    cfg: &GpsConfig,
    lambda: f64,
    seed: u64,
) -> Result<InnerLoopOutput> {
    if cfg.inner_iters < 1 {
        return Err(config_err("gps.inner_iters", "must be at least 1"));
    }
    if systems.len() != plans.len() {
        return Err(Error::InvalidArgument("one system per plan required".into()));
    }
    let layout = cfg.layout();
    let task = PourCost::for_layout(cfg.cost, &layout);
    let cost = CostModel { task: &task, lambda };
    let mut plans = plans;
    let mut policy = policy;
    let mut regs = vec![Regularizer::default(); plans.len()];
    let mut stats = Vec::with_capacity(cfg.inner_iters);

    for it in 0..cfg.inner_iters {
        let pol = HistoryPolicy {
            net: &policy,
            layout,
        };
        let passes: Vec<(crate::trajopt::BackwardPassResult, PassStats, Regularizer)> = systems
            .par_iter()
            .zip(plans.par_iter())
            .zip(regs.par_iter())
            .enumerate()
            .map(|(k, ((sys, plan), reg))| {
                let mut reg = *reg;
                let run = |reg: &mut Regularizer| -> Result<_> {
                    let result = backward_pass(sys, plan, &cost, &pol, reg)?;
                    let outcome = line_search(sys, &result, &cost, &pol)?;
                    let mut dev: f64 = 0.0;
                    for (z, u) in outcome.plan.states.iter().zip(&outcome.plan.controls) {
                        dev = dev.max((u - pol.action(z)?).amax());
                    }
                    let stats = PassStats {
                        cost_before: outcome.cost_before,
                        cost_after: outcome.cost_after,
                        improved: outcome.improved(),
                        max_policy_deviation: dev,
                    };
                    Ok((result.with_open_loop(outcome.plan), stats))
                };
                run(&mut reg).map(|(r, s)| (r, s, reg)).map_err(|e| e.in_trajectory(k))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut data = RegressionSet::new();
        let mut pass_stats = Vec::with_capacity(passes.len());
        for (k, (result, st, reg)) in passes.into_iter().enumerate() {
            let sigma = sampling_sigma(&result.open_loop, &layout, cfg.policy.sigma_fraction);
            let seed = derive_seed(seed, &[purpose::SAMPLES, it as u64, k as u64]);
            let pairs = synthesize_training_pairs(&result, &sigma, cfg.policy.samples_per_step, seed, k)?;
            data.extend(pairs.map_inputs(|z| layout.policy_input(z))?)?;
            plans[k] = result.open_loop;
            regs[k] = reg;
            pass_stats.push(st);
        }
        let fit_seed = derive_seed(seed, &[purpose::FIT, it as u64]);
        let (next, report) = fit_policy(&policy, &data, &cfg.policy.fit, fit_seed)?;
        policy = next;
        stats.push(InnerIterationStats {
            passes: pass_stats,
            policy_mse: report.final_mse,
        });
    }
    Ok(InnerLoopOutput {
        plans,
        policy,
        stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// 1-based outer iteration.
    pub iteration: usize,
    pub lambda: f64,
    /// Per-trajectory final error in grams (target minus poured).
    pub errors: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `errors`.
    pub stddev: f64,
    pub inner: Vec<InnerIterationStats>,
}

impl IterationReport {
    pub fn new(iteration: usize, lambda: f64, errors: Vec<f64>, inner: Vec<InnerIterationStats>) -> Self {
        let (mean, stddev) = mean_std(&errors);
        IterationReport {
            iteration,
            lambda,
            errors,
            mean,
            stddev,
            inner,
        }
    }

    pub fn max_abs_error(&self) -> f64 {
        self.errors.iter().fold(0.0, |m, e| m.max(e.abs()))
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Everything an outer iteration produced.
pub struct IterationOutput {
    pub report: IterationReport,
    pub rollouts: Vec<Rollout>,
    pub models: Vec<DynamicsModel>,
}

/// Resumable state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsState {
    /// Completed outer iterations.
    pub iteration: usize,
    pub policy: PolicyNet,
    /// Rollouts per example trajectory, PID initialization first.
    pub datasets: Vec<Vec<Trajectory>>,
    pub reports: Vec<IterationReport>,
}

pub struct GpsRunner {
    cfg: GpsConfig,
    sim: SimParams,
    state: GpsState,
    initial: Vec<Rollout>,
}

impl GpsRunner {
    /// Validates the config and collects the PID initialization.
    pub fn new(cfg: GpsConfig, sim: SimParams) -> Result<Self> {
        cfg.validate()?;
        sim.validate()?;
        let initial = initialize_trajectories(&cfg, &sim)?;
        let layout = cfg.layout();
        let policy = if cfg.policy.hidden_current_state_only {
            PolicyNet::with_hidden(
                layout.policy_dim(),
                STATE_DIM,
                CONTROL_DIM,
                derive_seed(cfg.seed, &[purpose::POLICY_INIT]),
            )?
        } else {
            PolicyNet::new(
                layout.policy_dim(),
                CONTROL_DIM,
                derive_seed(cfg.seed, &[purpose::POLICY_INIT]),
            )?
        };
        let datasets = initial.iter().map(|r| vec![r.trajectory.clone()]).collect();
        Ok(GpsRunner {
            cfg,
            sim,
            state: GpsState {
                iteration: 0,
                policy,
                datasets,
                reports: Vec::new(),
            },
            initial,
        })
    }

    /// Continues from a saved state.
    pub fn resume(cfg: GpsConfig, sim: SimParams, state: GpsState) -> Result<Self> {
        cfg.validate()?;
        sim.validate()?;
        if state.datasets.len() != cfg.trajectories {
            return Err(Error::InvalidArgument(format!(
                "state has {} trajectories, config expects {}",
                state.datasets.len(),
                cfg.trajectories
            )));
        }
        if state.policy.input_dim() != cfg.layout().policy_dim() {
            return Err(Error::DimensionMismatch {
                expected: cfg.layout().policy_dim(),
                found: state.policy.input_dim(),
            });
        }
        Ok(GpsRunner {
            cfg,
            sim,
            state,
            initial: Vec::new(),
        })
    }

    pub fn config(&self) -> &GpsConfig {
        &self.cfg
    }

    pub fn sim_params(&self) -> &SimParams {
        &self.sim
    }

    pub fn state(&self) -> &GpsState {
        &self.state
    }

    /// PID rollouts used to initialize (empty after a resume).
    pub fn initial_rollouts(&self) -> &[Rollout] {
        &self.initial
    }

    pub fn converged(&self) -> bool {
        self.state
            .reports
            .last()
            .is_some_and(|r| r.max_abs_error() <= self.cfg.convergence_threshold)
    }

    pub fn finished(&self) -> bool {
        self.converged() || self.state.iteration >= self.cfg.max_outer_iters
    }

    /// One outer iteration.
    pub fn step(&mut self) -> Result<IterationOutput> {
        let iteration = self.state.iteration + 1;
        let cfg = &self.cfg;
        let layout = cfg.layout();
        let lambda = cfg.lambda_at(iteration);

        let models = fit_models(&self.state.datasets, cfg, iteration)?;
        let systems = models
            .iter()
            .enumerate()
            .map(|(k, m)| AffineSystem::from_model(m, layout).map_err(|e| e.in_trajectory(k)))
            .collect::<Result<Vec<_>>>()?;

        // Nominals: the latest real rollouts in history space.
        let plans = self
            .state
            .datasets
            .iter()
            .map(|rollouts| {
                let latest = rollouts.last().expect("datasets start with the PID rollout");
                history_plan(latest, cfg.history)
            })
            .collect::<Result<Vec<_>>>()?;

        let inner_seed = derive_seed(cfg.seed, &[iteration as u64]);
        let out = inner_loop(&systems, plans, self.state.policy.clone(), cfg, lambda, inner_seed)?;

        let fills = cfg.fills();
        let rollouts = fills
            .par_iter()
            .enumerate()
            .map(|(k, fill)| {
                let seed = derive_seed(cfg.seed, &[purpose::ROLLOUT, iteration as u64, k as u64]);
                policy_rollout(&out.policy, &self.sim, cfg, *fill, seed).map_err(|e| e.in_trajectory(k))
            })
            .collect::<Result<Vec<_>>>()?;

        for (data, r) in self.state.datasets.iter_mut().zip(&rollouts) {
            data.push(r.trajectory.clone());
        }
        let errors: Vec<f64> = rollouts.iter().map(|r| r.final_error).collect();
        let report = IterationReport::new(iteration, lambda, errors, out.stats);
        info!(
            "iteration {iteration}: mean error {:.2} g, std {:.2} g, max |error| {:.2} g",
            report.mean,
            report.stddev,
            report.max_abs_error()
        );
        self.state.policy = out.policy;
        self.state.iteration = iteration;
        self.state.reports.push(report.clone());
        Ok(IterationOutput {
            report,
            rollouts,
            models,
        })
    }
}

/// A failed run: the error plus the iteration it happened in and the
/// reports completed before it.
#[derive(Debug)]
pub struct GpsFailure {
    pub iteration: usize,
    pub reports: Vec<IterationReport>,
    pub error: Error,
}

impl std::fmt::Display for GpsFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "outer iteration {}: {}", self.iteration, self.error)
    }
}

impl std::error::Error for GpsFailure {}

/// Runs until every trajectory is within the convergence threshold or the
/// iteration limit is reached.
pub fn run_gps(cfg: GpsConfig, sim: SimParams) -> std::result::Result<Vec<IterationReport>, GpsFailure> {
    let mut runner = GpsRunner::new(cfg, sim).map_err(|error| GpsFailure {
        iteration: 0,
        reports: Vec::new(),
        error,
    })?;
    while !runner.finished() {
        if let Err(error) = runner.step() {
            return Err(GpsFailure {
                iteration: runner.state.iteration + 1,
                reports: runner.state.reports.clone(),
                error,
            });
        }
    }
    Ok(runner.state.reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_grid() {
        let cfg = GpsConfig::default();
        let fills = cfg.fills();
        assert_eq!(fills.len(), 10);
        assert_eq!(fills[0], 200.0);
        assert_eq!(fills[9], 400.0);
        assert!((fills[1] - 222.222_222).abs() < 1e-3);
    }

    #[test]
    fn lambda_schedule() {
        let cfg = GpsConfig::default();
        assert_eq!(cfg.lambda_at(1), 0.1);
        assert_eq!(cfg.lambda_at(2), 0.2);
        assert_eq!(cfg.lambda_at(50), 10.0);
    }

    #[test]
    fn validation_names_fields() {
        let cfg = GpsConfig { horizon: 0, ..GpsConfig::default() };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "gps.horizon"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = GpsConfig { inner_iters: 0, ..GpsConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn initial_trajectories_have_full_horizon() {
        let cfg = GpsConfig::default();
        let init = initialize_trajectories(&cfg, &SimParams::default()).unwrap();
        assert_eq!(init.len(), 10);
        for r in &init {
            assert_eq!(r.trajectory.controls().len(), 50);
            assert_eq!(r.trajectory.states().len(), 51);
        }
    }

    #[test]
    fn zero_gain_pid_never_pours() {
        let cfg = GpsConfig::default();
        let r = pid_rollout(&SimParams::default(), &cfg, 300.0, (0.0, 0.0, 0.0)).unwrap();
        assert_eq!(r.final_error, 100.0);
        assert!(r.trajectory.states().iter().all(|s| s.angle() == 0.0));
    }

    #[test]
    fn tuples_and_plan_share_layout() {
        let cfg = GpsConfig::default();
        let r = pid_rollout(&SimParams::default(), &cfg, 300.0, (0.02, 0.001, 0.05)).unwrap();
        let tuples = dynamics_tuples(&r.trajectory, 4).unwrap();
        let plan = history_plan(&r.trajectory, 4).unwrap();
        assert_eq!(tuples.len(), 50);
        for t in 0..50 {
            assert_eq!(tuples[t].rows(0, 19), plan.states[t].rows(0, 19));
            assert_eq!(tuples[t][19], plan.controls[t][0]);
            assert_eq!(tuples[t].rows(20, 4), plan.states[t + 1].rows(15, 4));
        }
    }

    #[test]
    fn seeds_differ_by_path() {
        assert_ne!(derive_seed(0, &[1, 2]), derive_seed(0, &[2, 1]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }
}
