//! iLQG on time-varying affine dynamics with the policy-deviation cost
//! `l*(x, u) = l(x, u) + λ ||u - π(x)||²`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::delay::HistoryLayout;
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::gaussian::symmetrize;
use crate::policy::PolicyNet;

/// States `x_0..x_T` and controls `u_0..u_{T-1}` of a plan in the
/// optimizer's (possibly history-augmented) state space.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl NominalTrajectory {
    pub fn new(states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> Result<Self> {
        if states.len() != controls.len() + 1 || controls.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "plan needs T >= 1 controls and T + 1 states, got {} and {}",
                controls.len(),
                states.len()
            )));
        }
        Ok(NominalTrajectory { states, controls })
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn control_dim(&self) -> usize {
        self.controls[0].len()
    }
}

/// `x_{t+1} = A_t x_t + B_t u_t + c_t`.
pub trait LinearDynamics: Sync {
    fn horizon(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn matrices(&self, t: usize) -> Result<(&DMatrix<f64>, &DMatrix<f64>, &DVector<f64>)>;

    fn step(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let (a, b, c) = self.matrices(t)?;
        Ok(a * x + b * u + c)
    }
}

/// Explicit time-varying affine system.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSystem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: Vec<DVector<f64>>,
}

impl LinearDynamics for AffineSystem {
    fn horizon(&self) -> usize {
        self.a.len()
    }

    fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    fn matrices(&self, t: usize) -> Result<(&DMatrix<f64>, &DMatrix<f64>, &DVector<f64>)> {
        match (self.a.get(t), self.b.get(t), self.c.get(t)) {
            (Some(a), Some(b), Some(c)) => Ok((a, b, c)),
            _ => Err(Error::TimestepOutOfRange {
                t,
                horizon: self.horizon(),
            }),
        }
    }
}

impl AffineSystem {
    /// History-space dynamics of a learned model.
    ///
    /// The model maps `[z_t, u_t]` to the next state; the rest of `z_{t+1}`
    /// is the shifted history. Linearizations are exact because the
    /// conditional mean is affine.
    pub fn from_model(model: &DynamicsModel, layout: HistoryLayout) -> Result<Self> {
        let dims = model.dims();
        let zd = layout.history_dim();
        if dims.x != zd || dims.u != layout.control_dim || dims.x_next != layout.state_dim {
            return Err(Error::DimensionMismatch {
                expected: zd,
                found: dims.x,
            });
        }
        let du = layout.control_dim;
        let d = layout.state_dim;
        let slot = d + du;
        let mut a_all = Vec::with_capacity(model.horizon());
        let mut b_all = Vec::with_capacity(model.horizon());
        let mut c_all = Vec::with_capacity(model.horizon());
        for t in 0..model.horizon() {
            let (f, f0) = model.linearize(t)?;
            let mut a = DMatrix::zeros(zd, zd);
            let mut b = DMatrix::zeros(zd, du);
            let mut c = DVector::zeros(zd);
            if layout.n > 1 {
                let keep = zd - slot - d;
                for i in 0..keep {
                    a[(i, slot + i)] = 1.0;
                }
                for i in 0..d {
                    a[(keep + i, zd - d + i)] = 1.0;
                }
                for i in 0..du {
                    b[(keep + d + i, i)] = 1.0;
                }
            }
            a.view_mut((zd - d, 0), (d, zd)).copy_from(&f.view((0, 0), (d, zd)));
            b.view_mut((zd - d, 0), (d, du)).copy_from(&f.view((0, zd), (d, du)));
            c.rows_mut(zd - d, d).copy_from(&f0);
            a_all.push(a);
            b_all.push(b);
            c_all.push(c);
        }
        Ok(AffineSystem {
            a: a_all,
            b: b_all,
            c: c_all,
        })
    }
}

/// Second-order expansion of a running cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostExpansion {
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub lux: DMatrix<f64>,
}

/// Task cost `l(x, u)` with terminal cost `l(x_{T+1})`.
pub trait TaskCost: Sync {
    fn running(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn terminal(&self, x: &DVector<f64>) -> f64;
    fn running_expansion(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> CostExpansion;
    /// `(l_x, l_xx)` at the final state.
    fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

/// `x^T Q x + u^T R u` with terminal `x^T Q_f x`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
}

impl TaskCost for QuadraticCost {
    fn running(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }

    fn terminal(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.qf * x))
    }

    fn running_expansion(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> CostExpansion {
        CostExpansion {
            lx: (&self.q + self.q.transpose()) * x,
            lu: (&self.r + self.r.transpose()) * u,
            lxx: &self.q + self.q.transpose(),
            luu: &self.r + self.r.transpose(),
            lux: DMatrix::zeros(u.len(), x.len()),
        }
    }

    fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let h = &self.qf + self.qf.transpose();
        (&h * x, h)
    }
}

/// Default pouring cost weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PourCostWeights {
    /// Control effort weight `w_u`.
    pub control: f64,
    /// Running remaining-to-pour weight `w_r`.
    pub remaining: f64,
    /// Terminal remaining-to-pour weight `w_T`.
    pub terminal: f64,
    /// Weight of the soft penalty `w_l max(0, |u| - u_max)²`.
    pub limit: f64,
    /// Control magnitude `u_max` above which the soft penalty applies.
    pub limit_velocity: f64,
}

impl Default for PourCostWeights {
    fn default() -> Self {
        PourCostWeights {
            control: 1e-3,
            remaining: 1e-2,
            terminal: 10.0,
            limit: 100.0,
            limit_velocity: 1.0,
        }
    }
}

impl PourCostWeights {
    fn limit_excess(&self, u: f64) -> f64 {
        (u.abs() - self.limit_velocity).max(0.0) * u.signum()
    }
}

/// `w_u u² + w_r remaining² + w_l max(0, |u| - u_max)²`, terminal
/// `w_T remaining²`, where `remaining` is read from a fixed index of the
/// (history) state.
#[derive(Debug, Clone, PartialEq)]
pub struct PourCost {
    pub weights: PourCostWeights,
    pub remaining_index: usize,
}

impl PourCost {
    /// Cost on the current state's remaining grams of a history vector.
    pub fn for_layout(weights: PourCostWeights, layout: &HistoryLayout) -> Self {
        PourCost {
            weights,
            remaining_index: layout.current_state_offset() + crate::types::StateVec::REMAINING,
        }
    }
}

impl TaskCost for PourCost {
    fn running(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let r = x[self.remaining_index];
        let limit: f64 = u.iter().map(|&v| self.weights.limit_excess(v).powi(2)).sum();
        self.weights.control * u.norm_squared() + self.weights.remaining * r * r + self.weights.limit * limit
    }

    fn terminal(&self, x: &DVector<f64>) -> f64 {
        let r = x[self.remaining_index];
        self.weights.terminal * r * r
    }

    fn running_expansion(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> CostExpansion {
        let n = x.len();
        let m = u.len();
        let i = self.remaining_index;
        let mut lx = DVector::zeros(n);
        let mut lxx = DMatrix::zeros(n, n);
        lx[i] = 2.0 * self.weights.remaining * x[i];
        lxx[(i, i)] = 2.0 * self.weights.remaining;
        let mut lu = u * (2.0 * self.weights.control);
        let mut luu = DMatrix::identity(m, m) * (2.0 * self.weights.control);
        for j in 0..m {
            let excess = self.weights.limit_excess(u[j]);
            if excess != 0.0 {
                lu[j] += 2.0 * self.weights.limit * excess;
                luu[(j, j)] += 2.0 * self.weights.limit;
            }
        }
        CostExpansion {
            lx,
            lu,
            lxx,
            luu,
            lux: DMatrix::zeros(m, n),
        }
    }

    fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = x.len();
        let i = self.remaining_index;
        let mut lx = DVector::zeros(n);
        let mut lxx = DMatrix::zeros(n, n);
        lx[i] = 2.0 * self.weights.terminal * x[i];
        lxx[(i, i)] = 2.0 * self.weights.terminal;
        (lx, lxx)
    }
}

/// A policy seen from the optimizer's state space.
pub trait LocalPolicy: Sync {
    fn action(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// The zero map, for runs without a policy term.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy {
    pub state_dim: usize,
    pub control_dim: usize,
}

impl LocalPolicy for ZeroPolicy {
    fn action(&self, _x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.control_dim))
    }

    fn jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(self.control_dim, self.state_dim))
    }
}

/// A network applied to the state part of a history vector.
#[derive(Debug, Clone)]
pub struct HistoryPolicy<'a> {
    pub net: &'a PolicyNet,
    pub layout: HistoryLayout,
}

impl LocalPolicy for HistoryPolicy<'_> {
    fn action(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.net.forward(&self.layout.policy_input(z))
    }

    fn jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        let j = self.net.jacobian(&self.layout.policy_input(z))?;
        let mut out = DMatrix::zeros(j.nrows(), self.layout.history_dim());
        for i in 0..self.layout.n {
            out.view_mut((0, self.layout.state_offset(i)), (j.nrows(), self.layout.state_dim))
                .copy_from(&j.view((0, i * self.layout.state_dim), (j.nrows(), self.layout.state_dim)));
        }
        Ok(out)
    }
}

/// Task cost plus the policy-deviation weight.
pub struct CostModel<'a> {
    pub task: &'a dyn TaskCost,
    pub lambda: f64,
}

/// `l(x, u) + λ ||u - π(x)||²`.
pub fn modified_cost(
    cost: &CostModel,
    policy: &dyn LocalPolicy,
    t: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64> {
    let base = cost.task.running(t, x, u);
    if cost.lambda == 0.0 {
        return Ok(base);
    }
    let dev = u - policy.action(x)?;
    Ok(base + cost.lambda * dev.norm_squared())
}

/// Total modified cost of a plan, terminal task cost included.
pub fn trajectory_cost(
    plan: &NominalTrajectory,
    cost: &CostModel,
    policy: &dyn LocalPolicy,
) -> Result<f64> {
    let mut total = cost.task.terminal(&plan.states[plan.horizon()]);
    for t in 0..plan.horizon() {
        total += modified_cost(cost, policy, t, &plan.states[t], &plan.controls[t])?;
    }
    Ok(total)
}

/// Levenberg regularization added to `Q_uu`.
///
/// Starts at zero; the first failure sets it to `min`, later failures
/// multiply by 10 up to `max`, and each success halves it (dropping back to
/// zero below `min`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularizer {
    pub mu: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for Regularizer {
    fn default() -> Self {
        Regularizer {
            mu: 0.0,
            min: 1e-6,
            max: 1e10,
        }
    }
}

impl Regularizer {
    fn increase(&mut self) -> bool {
        self.mu = (self.mu * 10.0).max(self.min);
        self.mu <= self.max
    }

    fn decrease(&mut self) {
        self.mu *= 0.5;
        if self.mu < self.min {
            self.mu = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPassResult {
    /// Nominal `(x̂_t, û_t)` the pass was expanded around.
    pub open_loop: NominalTrajectory,
    /// Feedforward terms `k_t`.
    pub feedforward: Vec<DVector<f64>>,
    /// Feedback gains `L_t`, `control_dim x state_dim`.
    pub gains: Vec<DMatrix<f64>>,
    /// `V_x` for `t = 0..=T`.
    pub value_gradients: Vec<DVector<f64>>,
    /// `V_xx` for `t = 0..=T`.
    pub value_hessians: Vec<DMatrix<f64>>,
    /// Predicted cost change `Σ k^T Q_u + ½ k^T Q_uu k` at step size 1.
    pub expected_improvement: f64,
}

impl BackwardPassResult {
    /// Same gains around a different open-loop plan (e.g. the accepted
    /// forward pass).
    pub fn with_open_loop(mut self, plan: NominalTrajectory) -> Self {
        self.open_loop = plan;
        self
    }
}

fn check_plan(dynamics: &dyn LinearDynamics, plan: &NominalTrajectory) -> Result<()> {
    if plan.horizon() != dynamics.horizon() {
        return Err(Error::HorizonMismatch {
            expected: dynamics.horizon(),
            found: plan.horizon(),
        });
    }
    if let Some(bad) = plan.states.iter().find(|x| x.len() != dynamics.state_dim()) {
        return Err(Error::DimensionMismatch {
            expected: dynamics.state_dim(),
            found: bad.len(),
        });
    }
    if let Some(bad) = plan.controls.iter().find(|u| u.len() != dynamics.control_dim()) {
        return Err(Error::DimensionMismatch {
            expected: dynamics.control_dim(),
            found: bad.len(),
        });
    }
    Ok(())
}

/// One backward sweep from `t = T - 1` down to `0`.
///
/// The policy term is quadratized by linearizing `π` at `x̂_t`. Dynamics
/// defects `A x̂ + B û + c - x̂'` are folded into the expansion so the
/// nominal need not be dynamically consistent. A `Q_uu` that is not
/// positive definite raises the regularizer and restarts the sweep.
pub fn backward_pass(
    dynamics: &dyn LinearDynamics,
    nominal: &NominalTrajectory,
    cost: &CostModel,
    policy: &dyn LocalPolicy,
    reg: &mut Regularizer,
) -> Result<BackwardPassResult> {
    check_plan(dynamics, nominal)?;
    let horizon = nominal.horizon();

    // Policy expansions do not depend on the regularizer.
    let mut policy_terms = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let x = &nominal.states[t];
        let u = &nominal.controls[t];
        let mut e = cost.task.running_expansion(t, x, u);
        if cost.lambda != 0.0 {
            let dev = u - policy.action(x)?;
            let jac = policy.jacobian(x)?;
            let two_l = 2.0 * cost.lambda;
            e.lu += &dev * two_l;
            e.lx -= jac.transpose() * &dev * two_l;
            for i in 0..u.len() {
                e.luu[(i, i)] += two_l;
            }
            e.lux -= &jac * two_l;
            e.lxx += jac.transpose() * &jac * two_l;
        }
        policy_terms.push(e);
    }

    'sweep: loop {
        let (vx_t, vxx_t) = cost.task.terminal_expansion(&nominal.states[horizon]);
        let mut vx = vx_t;
        let mut vxx = vxx_t;
        let mut gains = vec![DMatrix::zeros(0, 0); horizon];
        let mut ff = vec![DVector::zeros(0); horizon];
        let mut vxs = vec![DVector::zeros(0); horizon + 1];
        let mut vxxs = vec![DMatrix::zeros(0, 0); horizon + 1];
        vxs[horizon] = vx.clone();
        vxxs[horizon] = vxx.clone();
        let mut improvement = 0.0;

        for t in (0..horizon).rev() {
            let (a, b, c) = dynamics.matrices(t)?;
            let e = &policy_terms[t];
            let defect = a * &nominal.states[t] + b * &nominal.controls[t] + c - &nominal.states[t + 1];
            let vx_next = &vx + &vxx * &defect;
            let vxx_a = &vxx * a;
            let vxx_b = &vxx * b;
            let qx = &e.lx + a.transpose() * &vx_next;
            let qu = &e.lu + b.transpose() * &vx_next;
            let qxx = &e.lxx + a.transpose() * &vxx_a;
            let quu = &e.luu + b.transpose() * &vxx_b;
            let qux = &e.lux + b.transpose() * &vxx_a;

            let mut quu_reg = symmetrize(&quu);
            for i in 0..quu_reg.nrows() {
                quu_reg[(i, i)] += reg.mu;
            }
            let chol = match Cholesky::new(quu_reg) {
                Some(c) => c,
                None => {
                    if reg.increase() {
                        continue 'sweep;
                    }
                    return Err(Error::BackwardPassDiverged { t });
                }
            };
            let k = -chol.solve(&qu);
            let l = -chol.solve(&qux);

            improvement += k.dot(&qu) + 0.5 * k.dot(&(&quu * &k));
            let lt = l.transpose();
            vx = &qx + &lt * (&quu * &k) + &lt * &qu + qux.transpose() * &k;
            vxx = symmetrize(&(&qxx + &lt * (&quu * &l) + &lt * &qux + qux.transpose() * &l));
            if vx.iter().chain(vxx.iter()).any(|v| !v.is_finite()) {
                if reg.increase() {
                    continue 'sweep;
                }
                return Err(Error::BackwardPassDiverged { t });
            }
            vxs[t] = vx.clone();
            vxxs[t] = vxx.clone();
            gains[t] = l;
            ff[t] = k;
        }
        reg.decrease();
        return Ok(BackwardPassResult {
            open_loop: nominal.clone(),
            feedforward: ff,
            gains,
            value_gradients: vxs,
            value_hessians: vxxs,
            expected_improvement: improvement,
        });
    }
}

/// Rolls out `u_t = û_t + α k_t + L_t (x_t - x̂_t)` from `x̂_0`.
pub fn forward_pass(
    dynamics: &dyn LinearDynamics,
    result: &BackwardPassResult,
    alpha: f64,
) -> Result<NominalTrajectory> {
    let plan = &result.open_loop;
    check_plan(dynamics, plan)?;
    let mut states = Vec::with_capacity(plan.horizon() + 1);
    let mut controls = Vec::with_capacity(plan.horizon());
    let mut x = plan.states[0].clone();
    for t in 0..plan.horizon() {
        let u = &plan.controls[t] + &result.feedforward[t] * alpha + &result.gains[t] * (&x - &plan.states[t]);
        let next = dynamics.step(t, &x, &u)?;
        states.push(x);
        controls.push(u);
        x = next;
    }
    states.push(x);
    NominalTrajectory::new(states, controls)
}

/// Result of a line-searched forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutcome {
    pub plan: NominalTrajectory,
    pub cost_before: f64,
    pub cost_after: f64,
    /// Accepted step size, `None` when no step improved the cost.
    pub alpha: Option<f64>,
}

impl ForwardOutcome {
    pub fn improved(&self) -> bool {
        self.alpha.is_some()
    }
}

const LINE_SEARCH_STEPS: usize = 12;

/// Backtracks `α ∈ {1, 1/2, 1/4, ...}` until the modified cost does not
/// increase; returns the nominal unchanged if no step qualifies.
pub fn line_search(
    dynamics: &dyn LinearDynamics,
    result: &BackwardPassResult,
    cost: &CostModel,
    policy: &dyn LocalPolicy,
) -> Result<ForwardOutcome> {
    let cost_before = trajectory_cost(&result.open_loop, cost, policy)?;
    let mut alpha = 1.0;
    for _ in 0..LINE_SEARCH_STEPS {
        let plan = forward_pass(dynamics, result, alpha)?;
        let c = trajectory_cost(&plan, cost, policy)?;
        if c.is_finite() && c <= cost_before {
            return Ok(ForwardOutcome {
                plan,
                cost_before,
                cost_after: c,
                alpha: Some(alpha),
            });
        }
        alpha *= 0.5;
    }
    log::debug!("line search found no improvement");
    Ok(ForwardOutcome {
        plan: result.open_loop.clone(),
        cost_before,
        cost_after: cost_before,
        alpha: None,
    })
}

/// Open-loop rollout of `controls` from `x0`.
pub fn simulate_open_loop(
    dynamics: &dyn LinearDynamics,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<NominalTrajectory> {
    let mut states = vec![x0.clone()];
    for (t, u) in controls.iter().enumerate() {
        let next = dynamics.step(t, &states[t], u)?;
        states.push(next);
    }
    NominalTrajectory::new(states, controls.to_vec())
}
