//! Element-wise-product policy network and its regression training.
//!
//! ```text
//! a = W_h x + b_h          (hidden pre-activation, one unit per input)
//! h = max(a, 0)
//! p = h ⊙ x                (product with the input)
//! u = W_o p + b_o
//! ```
//!
//! Inputs may pass through a frozen per-dimension standardizer first.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajopt::BackwardPassResult;

/// Per-dimension input standardization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaler {
    /// Scaler fitted to the empirical mean and standard deviation of
    /// `inputs`; near-constant dimensions keep unit scale.
    pub fn fit(inputs: &[DVector<f64>]) -> Result<Self> {
        let (mean, cov) = crate::gaussian::empirical_moments(inputs)?;
        let scale = cov
            .diagonal()
            .iter()
            .map(|v| {
                let sd = v.sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(InputScaler {
            mean: mean.iter().copied().collect(),
            scale,
        })
    }
}

/// Network weights.
///
/// Parameters live in one flat vector laid out as
/// `[W_h (hidden x input, row-major), b_h, W_o (output x hidden, row-major), b_o]`.
/// The hidden layer multiplies the last `hidden` inputs element-wise; with
/// the default `hidden == input_dim` that is the whole input.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
    params: Vec<f64>,
    scaler: Option<InputScaler>,
}

impl PolicyNet {
    /// Net with `hidden == input_dim`, weights uniform in `±1/sqrt(input_dim)`
    /// and zero biases.
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        Self::with_hidden(input_dim, input_dim, output_dim, seed)
    }

    /// Net whose hidden layer pairs with only the last `hidden` inputs.
    pub fn with_hidden(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(input_dim, hidden, output_dim)?;
        let bound = 1.0 / (input_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (wh, bh, wo, _) = net.offsets();
        for p in &mut net.params[wh..bh] {
            *p = rng.random_range(-bound..bound);
        }
        for p in &mut net.params[wo..wo + output_dim * hidden] {
            *p = rng.random_range(-bound..bound);
        }
        Ok(net)
    }

    pub fn zeros(input_dim: usize, hidden: usize, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden == 0 || hidden > input_dim {
            return Err(Error::InvalidArgument(format!(
                "bad network shape: input {input_dim}, hidden {hidden}, output {output_dim}"
            )));
        }
        let count = hidden * input_dim + hidden + output_dim * hidden + output_dim;
        Ok(PolicyNet {
            input_dim,
            hidden,
            output_dim,
            params: vec![0.0; count],
            scaler: None,
        })
    }

    /// Builds a net from explicit weight matrices and bias vectors.
    pub fn from_weights(
        w_hidden: &DMatrix<f64>,
        b_hidden: &DVector<f64>,
        w_out: &DMatrix<f64>,
        b_out: &DVector<f64>,
    ) -> Result<Self> {
        let (hidden, input_dim) = w_hidden.shape();
        let output_dim = w_out.nrows();
        if w_out.ncols() != hidden || b_hidden.len() != hidden || b_out.len() != output_dim {
            return Err(Error::InvalidArgument("inconsistent weight shapes".into()));
        }
        let mut net = Self::zeros(input_dim, hidden, output_dim)?;
        let mut params = Vec::with_capacity(net.params.len());
        for i in 0..hidden {
            params.extend(w_hidden.row(i).iter());
        }
        params.extend(b_hidden.iter());
        for o in 0..output_dim {
            params.extend(w_out.row(o).iter());
        }
        params.extend(b_out.iter());
        net.set_params(params)?;
        Ok(net)
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let wh = 0;
        let bh = self.hidden * self.input_dim;
        let wo = bh + self.hidden;
        let bo = wo + self.output_dim * self.hidden;
        (wh, bh, wo, bo)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                found: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("network weights must be finite".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn scaler(&self) -> Option<&InputScaler> {
        self.scaler.as_ref()
    }

    pub fn set_scaler(&mut self, scaler: Option<InputScaler>) -> Result<()> {
        if let Some(s) = &scaler {
            if s.mean.len() != self.input_dim || s.scale.len() != self.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.input_dim,
                    found: s.mean.len(),
                });
            }
        }
        self.scaler = scaler;
        Ok(())
    }

    fn scaled_input(&self, x: &[f64], out: &mut [f64]) {
        match &self.scaler {
            Some(s) => {
                for j in 0..self.input_dim {
                    out[j] = (x[j] - s.mean[j]) / s.scale[j];
                }
            }
            None => out.copy_from_slice(x),
        }
    }

    /// Forward pass on a pre-scaled input, filling the pre-activations.
    fn forward_scaled(&self, xs: &[f64], pre: &mut [f64], out: &mut [f64]) {
        let (_, bh, wo, bo) = self.offsets();
        let off = self.input_dim - self.hidden;
        let p = &self.params;
        out[..self.output_dim].copy_from_slice(&p[bo..bo + self.output_dim]);
        for i in 0..self.hidden {
            let row = &p[i * self.input_dim..(i + 1) * self.input_dim];
            let a = row.iter().zip(xs).map(|(w, x)| w * x).sum::<f64>() + p[bh + i];
            pre[i] = a;
            if a > 0.0 {
                let prod = a * xs[off + i];
                for o in 0..self.output_dim {
                    out[o] += p[wo + o * self.hidden + i] * prod;
                }
            }
        }
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Network output for a raw (unscaled) input. Not clamped.
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let mut xs = vec![0.0; self.input_dim];
        self.scaled_input(x.as_slice(), &mut xs);
        let mut pre = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.output_dim];
        self.forward_scaled(&xs, &mut pre, &mut out);
        Ok(DVector::from_vec(out))
    }

    /// `du/dx` at a raw input. Inactive or kinked units contribute no slope
    /// through their activation.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let (_, _, wo, _) = self.offsets();
        let off = self.input_dim - self.hidden;
        let mut xs = vec![0.0; self.input_dim];
        self.scaled_input(x.as_slice(), &mut xs);
        let mut pre = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.output_dim];
        self.forward_scaled(&xs, &mut pre, &mut out);
        let p = &self.params;
        let mut jac = DMatrix::zeros(self.output_dim, self.input_dim);
        for i in 0..self.hidden {
            if pre[i] <= 0.0 {
                continue;
            }
            let partner = xs[off + i];
            for o in 0..self.output_dim {
                let w_o = p[wo + o * self.hidden + i];
                for j in 0..self.input_dim {
                    jac[(o, j)] += w_o * p[i * self.input_dim + j] * partner;
                }
                jac[(o, off + i)] += w_o * pre[i];
            }
        }
        if let Some(s) = &self.scaler {
            for j in 0..self.input_dim {
                for o in 0..self.output_dim {
                    jac[(o, j)] /= s.scale[j];
                }
            }
        }
        Ok(jac)
    }

    /// Accumulates `d loss / d params` for one scaled sample given
    /// `d loss / d u`.
    fn backprop(&self, xs: &[f64], pre: &[f64], d_out: &[f64], grad: &mut [f64]) {
        let (_, bh, wo, bo) = self.offsets();
        let off = self.input_dim - self.hidden;
        let p = &self.params;
        for o in 0..self.output_dim {
            grad[bo + o] += d_out[o];
        }
        for i in 0..self.hidden {
            let a = pre[i];
            if a <= 0.0 {
                continue;
            }
            let partner = xs[off + i];
            let mut d_prod = 0.0;
            for o in 0..self.output_dim {
                grad[wo + o * self.hidden + i] += d_out[o] * a * partner;
                d_prod += d_out[o] * p[wo + o * self.hidden + i];
            }
            let d_pre = d_prod * partner;
            grad[bh + i] += d_pre;
            let row = &mut grad[i * self.input_dim..(i + 1) * self.input_dim];
            for (g, x) in row.iter_mut().zip(xs) {
                *g += d_pre * x;
            }
        }
    }

    /// Mean squared error `Σ ||π(x) - u||² / |data|` and its gradient with
    /// respect to [`params`](Self::params).
    pub fn loss_and_gradient(&self, data: &RegressionSet) -> Result<(f64, Vec<f64>)> {
        let flat = FlatData::new(self, data)?;
        let idx: Vec<usize> = (0..flat.len).collect();
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.batch_gradient(&flat, &idx, &mut grad);
        Ok((loss, grad))
    }

    /// Mean squared error over a data set.
    pub fn mse(&self, data: &RegressionSet) -> Result<f64> {
        let flat = FlatData::new(self, data)?;
        Ok(self.flat_mse(&flat))
    }

    fn flat_mse(&self, flat: &FlatData) -> f64 {
        let mut pre = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.output_dim];
        let mut total = 0.0;
        for s in 0..flat.len {
            self.forward_scaled(flat.input(s), &mut pre, &mut out);
            total += out
                .iter()
                .zip(flat.target(s))
                .map(|(u, y)| (u - y) * (u - y))
                .sum::<f64>();
        }
        total / flat.len as f64
    }

    /// Mean loss over `batch` with its gradient written into `grad`.
    fn batch_gradient(&self, flat: &FlatData, batch: &[usize], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut pre = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.output_dim];
        let mut d_out = vec![0.0; self.output_dim];
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &s in batch {
            let xs = flat.input(s);
            self.forward_scaled(xs, &mut pre, &mut out);
            for ((d, u), y) in d_out.iter_mut().zip(&out).zip(flat.target(s)) {
                let e = u - y;
                loss += e * e;
                *d = 2.0 * e * scale;
            }
            self.backprop(xs, &pre, &d_out, grad);
        }
        loss * scale
    }
}

/// Where a regression pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleTag {
    pub trajectory: usize,
    pub timestep: usize,
    pub sampled: bool,
}

/// Policy regression targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegressionSet {
    inputs: Vec<DVector<f64>>,
    targets: Vec<DVector<f64>>,
    tags: Vec<SampleTag>,
}

impl RegressionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, input: DVector<f64>, target: DVector<f64>, tag: SampleTag) -> Result<()> {
        if let (Some(i), Some(t)) = (self.inputs.first(), self.targets.first()) {
            if input.len() != i.len() || target.len() != t.len() {
                return Err(Error::DimensionMismatch {
                    expected: i.len(),
                    found: input.len(),
                });
            }
        }
        self.inputs.push(input);
        self.targets.push(target);
        self.tags.push(tag);
        Ok(())
    }

    pub fn extend(&mut self, other: RegressionSet) -> Result<()> {
        for ((i, t), g) in other.inputs.into_iter().zip(other.targets).zip(other.tags) {
            self.push(i, t, g)?;
        }
        Ok(())
    }

    /// Applies `f` to every input, e.g. to project histories onto policy inputs.
    pub fn map_inputs(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Result<RegressionSet> {
        let mut out = RegressionSet::new();
        for ((i, t), g) in self.inputs.iter().zip(&self.targets).zip(&self.tags) {
            out.push(f(i), t.clone(), *g)?;
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[DVector<f64>] {
        &self.targets
    }

    pub fn tags(&self) -> &[SampleTag] {
        &self.tags
    }
}

struct FlatData {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
    len: usize,
}

impl FlatData {
    fn new(net: &PolicyNet, data: &RegressionSet) -> Result<Self> {
        let mut inputs = vec![0.0; data.len() * net.input_dim];
        let mut targets = Vec::with_capacity(data.len() * net.output_dim);
        for (s, (x, y)) in data.inputs.iter().zip(&data.targets).enumerate() {
            net.check_input(x)?;
            if y.len() != net.output_dim {
                return Err(Error::DimensionMismatch {
                    expected: net.output_dim,
                    found: y.len(),
                });
            }
            net.scaled_input(
                x.as_slice(),
                &mut inputs[s * net.input_dim..(s + 1) * net.input_dim],
            );
            targets.extend(y.iter());
        }
        Ok(FlatData {
            inputs,
            targets,
            in_dim: net.input_dim,
            out_dim: net.output_dim,
            len: data.len(),
        })
    }

    fn input(&self, s: usize) -> &[f64] {
        &self.inputs[s * self.in_dim..(s + 1) * self.in_dim]
    }

    fn target(&self, s: usize) -> &[f64] {
        &self.targets[s * self.out_dim..(s + 1) * self.out_dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Freeze an input standardizer from the data if the net has none yet.
    pub standardize: bool,
    /// Batch gradients with a larger Euclidean norm are rescaled to this
    /// norm; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 200,
            learning_rate: 1e-3,
            batch_size: 32,
            momentum: 0.9,
            standardize: true,
            grad_clip: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub final_mse: f64,
    pub learning_rate: f64,
    pub retries: usize,
}

const MAX_RETRIES: usize = 3;

/// Mini-batch gradient descent with momentum on the mean squared error.
///
/// A non-finite loss aborts the attempt; training restarts from `net` with
/// half the learning rate, at most three times.
pub fn fit_policy(
    net: &PolicyNet,
    data: &RegressionSet,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(PolicyNet, FitReport)> {
    if data.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut start = net.clone();
    if cfg.standardize && start.scaler.is_none() {
        start.set_scaler(Some(InputScaler::fit(data.inputs())?))?;
    }
    let flat = FlatData::new(&start, data)?;
    let batch_size = cfg.batch_size.max(1);
    let mut lr = cfg.learning_rate;
    for retry in 0..=MAX_RETRIES {
        if let Some(trained) = train_attempt(&start, &flat, cfg, batch_size, lr, seed) {
            let final_mse = trained.flat_mse(&flat);
            if final_mse.is_finite() {
                return Ok((
                    trained,
                    FitReport {
                        final_mse,
                        learning_rate: lr,
                        retries: retry,
                    },
                ));
            }
        }
        let max_in = flat.inputs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_out = flat.targets.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        log::warn!("policy training diverged at learning rate {lr:e}, halving (max |input| {max_in:.3e}, max |target| {max_out:.3e})");
        lr *= 0.5;
    }
    Err(Error::PolicyDiverged)
}

fn train_attempt(
    start: &PolicyNet,
    flat: &FlatData,
    cfg: &FitConfig,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Option<PolicyNet> {
    let mut net = start.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..flat.len).collect();
    let mut grad = vec![0.0; net.params.len()];
    let mut velocity = vec![0.0; net.params.len()];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let loss = net.batch_gradient(flat, batch, &mut grad);
            if !loss.is_finite() {
                return None;
            }
            if cfg.grad_clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    let shrink = cfg.grad_clip / norm;
                    grad.iter_mut().for_each(|g| *g *= shrink);
                }
            }
            for ((p, v), g) in net.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - lr * g;
                *p += *v;
            }
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return None;
        }
    }
    Some(net)
}

/// Regression pairs around an optimized trajectory.
///
/// For every timestep emits `(x̂_t, û_t)` plus `samples` pairs
/// `(x_s, û_t + L_t (x_s - x̂_t))` with `x_s ~ N(x̂_t, diag(sigma²))`.
/// Inputs are in the trajectory's state space.
pub fn synthesize_training_pairs(
    result: &BackwardPassResult,
    sigma: &DVector<f64>,
    samples: usize,
    seed: u64,
    trajectory: usize,
) -> Result<RegressionSet> {
    let plan = &result.open_loop;
    let dim = plan.state_dim();
    if sigma.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: sigma.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = RegressionSet::new();
    for t in 0..plan.horizon() {
        let x_hat = &plan.states[t];
        let u_hat = &plan.controls[t];
        out.push(
            x_hat.clone(),
            u_hat.clone(),
            SampleTag {
                trajectory,
                timestep: t,
                sampled: false,
            },
        )?;
        for _ in 0..samples {
            let noise = DVector::from_fn(dim, |i, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma[i] * z
            });
            let x_s = x_hat + &noise;
            let u_s = u_hat + &result.gains[t] * noise;
            out.push(
                x_s,
                u_s,
                SampleTag {
                    trajectory,
                    timestep: t,
                    sampled: true,
                },
            )?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajopt::NominalTrajectory;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = PolicyNet::zeros(5, 5, 2).unwrap();
        assert_eq!(net.forward(&v(&[1.0, -2.0, 3.0, 4.0, 5.0])).unwrap(), v(&[0.0, 0.0]));
        assert_eq!(net.jacobian(&v(&[1.0, -2.0, 3.0, 4.0, 5.0])).unwrap(), DMatrix::zeros(2, 5));
    }

    #[test]
    fn hand_arithmetic_through_relu() {
        let net = PolicyNet::from_weights(
            &DMatrix::identity(2, 2),
            &DVector::zeros(2),
            &DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            &DVector::zeros(1),
        )
        .unwrap();
        assert_eq!(net.forward(&v(&[1.0, -2.0])).unwrap(), v(&[1.0]));
    }

    #[test]
    fn hidden_count_defaults_to_input_dim() {
        for d in [1, 4, 16] {
            let net = PolicyNet::new(d, 1, 0).unwrap();
            assert_eq!(net.hidden(), d);
        }
        assert!(PolicyNet::with_hidden(4, 5, 1, 0).is_err());
    }

    #[test]
    fn init_within_bounds() {
        let net = PolicyNet::new(16, 1, 3).unwrap();
        let bound = 0.25;
        assert!(net.params().iter().all(|p| p.abs() <= bound));
    }

    #[test]
    fn fixed_point_training() {
        let net = PolicyNet::new(4, 1, 7).unwrap();
        let mut data = RegressionSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 0..64 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let y = net.forward(&x).unwrap();
            data.push(x, y, SampleTag { trajectory: 0, timestep: t, sampled: false }).unwrap();
        }
        let before = net.mse(&data).unwrap();
        let cfg = FitConfig { epochs: 20, standardize: false, ..FitConfig::default() };
        let (trained, report) = fit_policy(&net, &data, &cfg, 3).unwrap();
        assert!((report.final_mse - before).abs() <= 1e-10);
        assert_eq!(trained.params(), net.params());
    }

    #[test]
    fn training_does_not_mutate_data() {
        let mut data = RegressionSet::new();
        for t in 0..10 {
            let x = v(&[t as f64, 1.0]);
            data.push(x, v(&[0.5 * t as f64]), SampleTag { trajectory: 0, timestep: t, sampled: false }).unwrap();
        }
        let copy = data.clone();
        let net = PolicyNet::new(2, 1, 0).unwrap();
        fit_policy(&net, &data, &FitConfig { epochs: 5, ..FitConfig::default() }, 0).unwrap();
        assert_eq!(copy, data);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let mut data = RegressionSet::new();
        for t in 0..40 {
            let x = v(&[t as f64 * 100.0, 3.0]);
            data.push(x, v(&[1e6]), SampleTag { trajectory: 0, timestep: t, sampled: false }).unwrap();
        }
        let net = PolicyNet::new(2, 1, 0).unwrap();
        let cfg = FitConfig { learning_rate: 1e6, standardize: false, grad_clip: 0.0, ..FitConfig::default() };
        assert!(matches!(fit_policy(&net, &data, &cfg, 0), Err(Error::PolicyDiverged)));
    }

    #[test]
    fn clipping_bounds_each_step() {
        let mut data = RegressionSet::new();
        for t in 0..40 {
            let x = v(&[t as f64 * 100.0, 3.0]);
            data.push(x, v(&[1e6]), SampleTag { trajectory: 0, timestep: t, sampled: false }).unwrap();
        }
        let net = PolicyNet::new(2, 1, 0).unwrap();
        let cfg = FitConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            epochs: 1,
            batch_size: 40,
            standardize: false,
            grad_clip: 1.0,
        };
        let (trained, _) = fit_policy(&net, &data, &cfg, 0).unwrap();
        let step: f64 = trained.params().iter().zip(net.params()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(step <= 0.1 + 1e-12, "{step}");
    }

    fn result_with(gains: Vec<DMatrix<f64>>, states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> BackwardPassResult {
        let horizon = controls.len();
        BackwardPassResult {
            open_loop: NominalTrajectory::new(states, controls).unwrap(),
            feedforward: vec![DVector::zeros(1); horizon],
            gains,
            value_gradients: vec![],
            value_hessians: vec![],
            expected_improvement: 0.0,
        }
    }

    #[test]
    fn zero_sigma_repeats_nominal() {
        let states = vec![v(&[1.0, 2.0]), v(&[3.0, 4.0]), v(&[5.0, 6.0])];
        let controls = vec![v(&[0.1]), v(&[0.2])];
        let gains = vec![DMatrix::from_row_slice(1, 2, &[1.0, -1.0]); 2];
        let r = result_with(gains, states.clone(), controls.clone());
        let set = synthesize_training_pairs(&r, &DVector::zeros(2), 4, 0, 0).unwrap();
        assert_eq!(set.len(), 10);
        for (x, (u, tag)) in set.inputs().iter().zip(set.targets().iter().zip(set.tags())) {
            assert_eq!(x, &states[tag.timestep]);
            assert_eq!(u, &controls[tag.timestep]);
        }
    }

    #[test]
    fn zero_gain_targets_are_open_loop() {
        let states = vec![v(&[1.0, 2.0]), v(&[3.0, 4.0])];
        let controls = vec![v(&[0.7])];
        let r = result_with(vec![DMatrix::zeros(1, 2)], states, controls);
        let set = synthesize_training_pairs(&r, &v(&[1.0, 2.0]), 30, 5, 0).unwrap();
        assert!(set.targets().iter().all(|u| u == &v(&[0.7])));
        assert!(set.tags().iter().filter(|t| t.sampled).count() == 30);
    }
}
