//! Simulated pouring with transport and scale delay, plus a random
//! linear-Gaussian system used as an LQR test bed.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajopt::LinearDynamics;
use crate::types::{ControlVec, StateVec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Seconds per step.
    pub dt: f64,
    /// Outflow in grams per second per radian past the critical angle.
    pub outflow_gain: f64,
    /// Fill (grams) at which the critical angle reaches zero.
    pub capacity: f64,
    /// Extra critical angle, as a fraction of π/2.
    pub critical_margin: f64,
    /// Steps water spends falling from cup to bowl.
    pub fall_delay: usize,
    /// Steps between bowl mass and the scale filter input.
    pub scale_delay: usize,
    /// Scale filter time constant in seconds.
    pub filter_tau: f64,
    /// Wrist speed limit, rad/s.
    pub velocity_limit: f64,
    /// Scale resolution in grams.
    pub quantization: f64,
    /// Standard deviation of additive scale noise, grams.
    pub obs_noise_std: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt: 0.5,
            outflow_gain: 10.0,
            capacity: 500.0,
            critical_margin: 0.05,
            fall_delay: 1,
            scale_delay: 1,
            filter_tau: 0.5,
            velocity_limit: 1.0,
            quantization: 0.1,
            obs_noise_std: 0.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sim.dt", self.dt),
            ("sim.outflow_gain", self.outflow_gain),
            ("sim.capacity", self.capacity),
            ("sim.velocity_limit", self.velocity_limit),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    field: field.into(),
                    message: "must be positive".into(),
                });
            }
        }
        let nonneg = [
            ("sim.critical_margin", self.critical_margin),
            ("sim.filter_tau", self.filter_tau),
            ("sim.quantization", self.quantization),
            ("sim.obs_noise_std", self.obs_noise_std),
        ];
        for (field, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    field: field.into(),
                    message: "must be non-negative".into(),
                });
            }
        }
        Ok(())
    }

    /// Angle past which water leaves a cup holding `fill` grams.
    pub fn critical_angle(&self, fill: f64) -> f64 {
        let frac = (fill / self.capacity).clamp(0.0, 1.0);
        FRAC_PI_2 * (1.0 - frac) + FRAC_PI_2 * self.critical_margin
    }

    /// Per-step coefficient of the first-order scale filter.
    pub fn filter_gain(&self) -> f64 {
        self.dt / (self.filter_tau + self.dt)
    }
}

/// Delay line followed by a first-order low-pass, reading the bowl mass.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePipeline {
    delay_line: VecDeque<f64>,
    filtered: f64,
    gain: f64,
}

impl ScalePipeline {
    pub fn new(delay: usize, gain: f64, initial: f64) -> Self {
        ScalePipeline {
            delay_line: std::iter::repeat_n(initial, delay).collect(),
            filtered: initial,
            gain,
        }
    }

    /// Feeds the current bowl mass and returns the unquantized reading.
    pub fn push(&mut self, bowl: f64) -> f64 {
        self.delay_line.push_back(bowl);
        let delayed = self.delay_line.pop_front().expect("just pushed");
        self.filtered += self.gain * (delayed - self.filtered);
        self.filtered
    }

    pub fn value(&self) -> f64 {
        self.filtered
    }
}

/// Ground truth of the simulator, for traces and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSnapshot {
    pub step: usize,
    pub theta: f64,
    pub v_cup: f64,
    pub in_transit: f64,
    pub bowl: f64,
    pub scale_reading: f64,
}

/// Deterministic pouring simulator.
///
/// Observations only see the cup angle and the delayed, filtered,
/// quantized scale.
#[derive(Debug, Clone)]
pub struct PouringSim {
    params: SimParams,
    theta: f64,
    v_cup: f64,
    transit: VecDeque<(f64, usize)>,
    bowl: f64,
    scale: ScalePipeline,
    scale_reading: f64,
    fill: f64,
    target: f64,
    step: usize,
    obs: StateVec,
    rng: ChaCha8Rng,
}

impl PouringSim {
    pub fn new(params: SimParams) -> Result<Self> {
        params.validate()?;
        let gain = params.filter_gain();
        Ok(PouringSim {
            scale: ScalePipeline::new(params.scale_delay, gain, 0.0),
            params,
            theta: 0.0,
            v_cup: 0.0,
            transit: VecDeque::new(),
            bowl: 0.0,
            scale_reading: 0.0,
            fill: 0.0,
            target: 0.0,
            step: 0,
            obs: StateVec::new(0.0, 0.0, 0.0, 0.0)?,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    /// Upright cup holding `initial_fill` grams, empty bowl and pipelines.
    pub fn reset(&mut self, initial_fill: f64, target: f64, seed: u64) -> Result<StateVec> {
        if !(target > 0.0 && initial_fill.is_finite() && target.is_finite()) || target >= initial_fill {
            return Err(Error::InfeasiblePour {
                fill: initial_fill,
                target,
            });
        }
        self.theta = 0.0;
        self.v_cup = initial_fill;
        self.transit.clear();
        self.bowl = 0.0;
        self.scale = ScalePipeline::new(self.params.scale_delay, self.params.filter_gain(), 0.0);
        self.scale_reading = 0.0;
        self.fill = initial_fill;
        self.target = target;
        self.step = 0;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.obs = StateVec::new(0.0, target, 0.0, initial_fill)?;
        Ok(self.obs)
    }

    /// Advances one step under wrist velocity `u` (clamped to the limit).
    pub fn step(&mut self, u: ControlVec) -> Result<()> {
        let p = &self.params;
        let omega = u.velocity().clamp(-p.velocity_limit, p.velocity_limit);
        self.theta = (self.theta + omega * p.dt).clamp(0.0, PI);
        let exceed = (self.theta - p.critical_angle(self.v_cup)).max(0.0);
        let outflow = (p.outflow_gain * exceed * p.dt).min(self.v_cup);
        self.v_cup -= outflow;
        self.step += 1;
        if outflow > 0.0 {
            self.transit.push_back((outflow, self.step + p.fall_delay));
        }
        while let Some(&(grams, arrival)) = self.transit.front() {
            if arrival > self.step {
                break;
            }
            self.bowl += grams;
            self.transit.pop_front();
        }
        let mut reading = self.scale.push(self.bowl);
        if p.obs_noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            reading += p.obs_noise_std * z;
        }
        if p.quantization > 0.0 {
            reading = (reading / p.quantization).round() * p.quantization;
        }
        self.scale_reading = reading;

        let remaining = self.target - reading;
        let d_remaining = remaining - self.obs.remaining();
        let in_cup = self.fill - reading;
        self.obs = StateVec::new(self.theta, remaining, d_remaining, in_cup)
            .map_err(|_| Error::NonFiniteRollout { step: self.step })?;
        Ok(())
    }

    /// Latest observation.
    pub fn observe(&self) -> StateVec {
        self.obs
    }

    pub fn snapshot(&self) -> SimSnapshot {
        SimSnapshot {
            step: self.step,
            theta: self.theta,
            v_cup: self.v_cup,
            in_transit: self.transit.iter().map(|(g, _)| g).sum(),
            bowl: self.bowl,
            scale_reading: self.scale_reading,
        }
    }

    pub fn initial_fill(&self) -> f64 {
        self.fill
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    /// Grams still missing from the bowl (negative when overpoured).
    pub fn pour_error(&self) -> f64 {
        self.target - self.bowl
    }
}

/// One row of a rollout trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub u: f64,
    pub truth: SimSnapshot,
    pub obs: StateVec,
}

pub const TRACE_HEADER: &str =
    "t,u,theta,v_cup,bowl,scale_reading,obs_angle,obs_remaining,obs_d_remaining,obs_in_cup";

/// Writes rows as CSV under [`TRACE_HEADER`]. `u` is the control applied
/// after the row's observation (empty on the final row).
pub fn write_trace<W: Write>(mut out: W, rows: &[TraceRow]) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        let u = if r.u.is_nan() { String::new() } else { r.u.to_string() };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t,
            u,
            r.truth.theta,
            r.truth.v_cup,
            r.truth.bowl,
            r.truth.scale_reading,
            r.obs.angle(),
            r.obs.remaining(),
            r.obs.d_remaining(),
            r.obs.in_cup()
        )?;
    }
    Ok(())
}

/// `x' = A x + B u + noise` with a fixed horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTestEnv {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub noise_scale: f64,
    pub horizon: usize,
    offset: DVector<f64>,
}

impl LinearTestEnv {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, noise_scale: f64, horizon: usize) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() || horizon == 0 {
            return Err(Error::InvalidArgument("inconsistent linear system".into()));
        }
        let offset = DVector::zeros(a.nrows());
        Ok(LinearTestEnv {
            a,
            b,
            noise_scale,
            horizon,
            offset,
        })
    }

    /// Random system with a moderate spectral radius.
    pub fn random(seed: u64, state_dim: usize, control_dim: usize, horizon: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(state_dim, state_dim, |i, j| {
            let base = if i == j { 0.9 } else { 0.0 };
            base + rng.random_range(-0.3..0.3) / (state_dim as f64).sqrt()
        });
        let b = DMatrix::from_fn(state_dim, control_dim, |_, _| rng.random_range(-1.0..1.0));
        Self::new(a, b, 0.01, horizon)
    }

    pub fn sample_step(&self, x: &DVector<f64>, u: &DVector<f64>, rng: &mut impl Rng) -> DVector<f64> {
        let noise = DVector::from_fn(x.len(), |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            self.noise_scale * z
        });
        &self.a * x + &self.b * u + noise
    }
}

impl LinearDynamics for LinearTestEnv {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn matrices(&self, t: usize) -> Result<(&DMatrix<f64>, &DMatrix<f64>, &DVector<f64>)> {
        if t >= self.horizon {
            return Err(Error::TimestepOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok((&self.a, &self.b, &self.offset))
    }
}
