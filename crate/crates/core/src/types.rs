//! Domain types for the pouring task.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the pouring state.
pub const STATE_DIM: usize = 4;
/// Dimension of the wrist-velocity control.
pub const CONTROL_DIM: usize = 1;

/// Observed pouring state.
///
/// Component order is fixed: cup angle (radians, 0 upright, π inverted),
/// grams remaining to pour, change in the remaining grams since the previous
/// step, and grams believed to be in the cup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVec([f64; STATE_DIM]);

impl StateVec {
    pub const ANGLE: usize = 0;
    pub const REMAINING: usize = 1;
    pub const D_REMAINING: usize = 2;
    pub const IN_CUP: usize = 3;

    pub fn new(angle: f64, remaining: f64, d_remaining: f64, in_cup: f64) -> Result<Self> {
        Self::from_array([angle, remaining, d_remaining, in_cup])
    }

    pub fn from_array(values: [f64; STATE_DIM]) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(StateVec(values))
        } else {
            Err(Error::InvalidArgument(format!(
                "state has non-finite component: {values:?}"
            )))
        }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; STATE_DIM] = values.try_into().map_err(|_| Error::DimensionMismatch {
            expected: STATE_DIM,
            found: values.len(),
        })?;
        Self::from_array(arr)
    }

    pub fn angle(&self) -> f64 {
        self.0[Self::ANGLE]
    }

    pub fn remaining(&self) -> f64 {
        self.0[Self::REMAINING]
    }

    pub fn d_remaining(&self) -> f64 {
        self.0[Self::D_REMAINING]
    }

    pub fn in_cup(&self) -> f64 {
        self.0[Self::IN_CUP]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.0)
    }
}

/// Wrist angular velocity in radians per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlVec(f64);

impl ControlVec {
    pub const ZERO: ControlVec = ControlVec(0.0);

    pub fn new(velocity: f64) -> Result<Self> {
        if velocity.is_finite() {
            Ok(ControlVec(velocity))
        } else {
            Err(Error::InvalidArgument("control is not finite".into()))
        }
    }

    /// Builds a control already limited to `|velocity| <= limit`.
    pub fn clamped(velocity: f64, limit: f64) -> Result<Self> {
        Self::new(velocity).map(|c| ControlVec(c.0.clamp(-limit, limit)))
    }

    pub fn velocity(&self) -> f64 {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        std::slice::from_ref(&self.0)
    }
}

/// A full-horizon rollout: `T + 1` states and the `T` controls between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    states: Vec<StateVec>,
    controls: Vec<ControlVec>,
}

impl Trajectory {
    pub fn new(states: Vec<StateVec>, controls: Vec<ControlVec>) -> Result<Self> {
        if states.len() != controls.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs one more state than controls, got {} states and {} controls",
                states.len(),
                controls.len()
            )));
        }
        Ok(Trajectory { states, controls })
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn states(&self) -> &[StateVec] {
        &self.states
    }

    pub fn controls(&self) -> &[ControlVec] {
        &self.controls
    }

    pub fn final_state(&self) -> &StateVec {
        self.states.last().expect("trajectory always has a state")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_rejects_non_finite() {
        assert!(StateVec::new(0.0, f64::NAN, 0.0, 1.0).is_err());
        assert!(StateVec::from_slice(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn trajectory_length_invariant() {
        let s = StateVec::new(0.0, 100.0, 0.0, 300.0).unwrap();
        assert!(Trajectory::new(vec![s, s], vec![ControlVec::ZERO]).is_ok());
        assert!(Trajectory::new(vec![s], vec![ControlVec::ZERO]).is_err());
    }

    #[test]
    fn control_clamps() {
        assert_eq!(ControlVec::clamped(3.0, 1.0).unwrap().velocity(), 1.0);
        assert_eq!(ControlVec::clamped(-3.0, 1.0).unwrap().velocity(), -1.0);
    }
}
