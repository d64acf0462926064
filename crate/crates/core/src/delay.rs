//! State-history augmentation.
//!
//! A history of `n` states (the current one included) and the `n - 1`
//! controls applied between them makes the delayed-sensor process markovian.
//! Every consumer shares one layout, oldest entry first:
//!
//! ```text
//! history  z_t = [x_{t-n+1}, u_{t-n+1}, ..., x_{t-1}, u_{t-1}, x_t]
//! dynamics      [z_t, u_t]                     -> x_{t+1}
//! policy        [x_{t-n+1}, ..., x_t]          -> u_t
//! ```

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ControlVec, StateVec, CONTROL_DIM, STATE_DIM};

/// Index arithmetic for stacked histories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryLayout {
    pub n: usize,
    pub state_dim: usize,
    pub control_dim: usize,
}

impl HistoryLayout {
    pub fn new(n: usize, state_dim: usize, control_dim: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("history length must be at least 1".into()));
        }
        Ok(HistoryLayout {
            n,
            state_dim,
            control_dim,
        })
    }

    /// Layout for the pouring state and control.
    pub fn pouring(n: usize) -> Result<Self> {
        Self::new(n, STATE_DIM, CONTROL_DIM)
    }

    fn slot(&self) -> usize {
        self.state_dim + self.control_dim
    }

    /// Dimension of the history vector `z_t`.
    pub fn history_dim(&self) -> usize {
        self.n * self.state_dim + (self.n - 1) * self.control_dim
    }

    /// Dimension of `[z_t, u_t]`.
    pub fn dynamics_input_dim(&self) -> usize {
        self.n * self.slot()
    }

    pub fn policy_dim(&self) -> usize {
        self.n * self.state_dim
    }

    /// Offset of the `i`-th (oldest first) state inside `z_t`.
    pub fn state_offset(&self, i: usize) -> usize {
        i * self.slot()
    }

    /// Offset of the current state inside `z_t`.
    pub fn current_state_offset(&self) -> usize {
        self.state_offset(self.n - 1)
    }

    /// Policy input: the states of a history vector.
    pub fn policy_input(&self, history: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.policy_dim());
        for i in 0..self.n {
            out.rows_mut(i * self.state_dim, self.state_dim)
                .copy_from(&history.rows(self.state_offset(i), self.state_dim));
        }
        out
    }

    /// Selection matrix `S` with `policy_input(z) = S z`.
    pub fn policy_selection(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.policy_dim(), self.history_dim());
        for i in 0..self.n {
            for j in 0..self.state_dim {
                s[(i * self.state_dim + j, self.state_offset(i) + j)] = 1.0;
            }
        }
        s
    }

    /// `z_{t+1}` from `z_t`, the applied control and the next state.
    pub fn shift(&self, history: &DVector<f64>, u: &DVector<f64>, next: &DVector<f64>) -> DVector<f64> {
        let dim = self.history_dim();
        let slot = self.slot();
        let mut out = DVector::zeros(dim);
        if self.n > 1 {
            let keep = dim - slot - self.state_dim;
            out.rows_mut(0, keep).copy_from(&history.rows(slot, keep));
            out.rows_mut(keep, self.state_dim)
                .copy_from(&history.rows(dim - self.state_dim, self.state_dim));
            out.rows_mut(keep + self.state_dim, self.control_dim).copy_from(u);
        }
        out.rows_mut(dim - self.state_dim, self.state_dim).copy_from(next);
        out
    }

    /// Concatenates `z` and `u` into a dynamics input.
    pub fn dynamics_input(&self, history: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dynamics_input_dim());
        out.rows_mut(0, history.len()).copy_from(history);
        out.rows_mut(history.len(), u.len()).copy_from(u);
        out
    }
}

/// The last `n` observed states and the controls between them.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    n: usize,
    states: VecDeque<StateVec>,
    controls: VecDeque<ControlVec>,
}

impl HistoryBuffer {
    /// Starts an episode: `first` fills every slot and the padding controls
    /// are zero.
    pub fn new(n: usize, first: StateVec) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("history length must be at least 1".into()));
        }
        Ok(HistoryBuffer {
            n,
            states: std::iter::repeat_n(first, n).collect(),
            controls: std::iter::repeat_n(ControlVec::ZERO, n - 1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn layout(&self) -> HistoryLayout {
        HistoryLayout::pouring(self.n).expect("buffer length is at least 1")
    }

    /// Oldest first.
    pub fn states(&self) -> impl Iterator<Item = &StateVec> {
        self.states.iter()
    }

    pub fn controls(&self) -> impl Iterator<Item = &ControlVec> {
        self.controls.iter()
    }

    pub fn current(&self) -> &StateVec {
        self.states.back().expect("buffer is never empty")
    }

    /// Records `x`, reached by applying `u_prev` from the current state.
    pub fn push(&mut self, x: StateVec, u_prev: ControlVec) {
        self.states.pop_front();
        self.states.push_back(x);
        if self.n > 1 {
            self.controls.pop_front();
            self.controls.push_back(u_prev);
        }
    }

    /// Value-style [`push`](Self::push).
    pub fn pushed(&self, x: StateVec, u_prev: ControlVec) -> Self {
        let mut next = self.clone();
        next.push(x, u_prev);
        next
    }

    /// The history vector `z_t`.
    pub fn history_vector(&self) -> DVector<f64> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.history_dim());
        for (i, s) in self.states.iter().enumerate() {
            out.extend_from_slice(s.as_slice());
            if let Some(u) = self.controls.get(i) {
                out.extend_from_slice(u.as_slice());
            }
        }
        DVector::from_vec(out)
    }

    /// `[x_{t-n+1}, u_{t-n+1}, ..., x_t, u_now]`.
    pub fn augment_for_dynamics(&self, u_now: ControlVec) -> DVector<f64> {
        let mut out: Vec<f64> = self.history_vector().iter().copied().collect();
        out.extend_from_slice(u_now.as_slice());
        DVector::from_vec(out)
    }

    /// `[x_{t-n+1}, ..., x_t]`.
    pub fn augment_for_policy(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n * STATE_DIM,
            self.states.iter().flat_map(|s| s.as_slice().iter().copied()),
        )
    }
}
