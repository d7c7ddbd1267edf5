//! Batch-normalization statistics.
//!
//! Covers the per-batch moments used while training, the exponentially
//! weighted running estimates updated once per training batch, the
//! single-instance incremental update used while streaming, the affine
//! normalization itself and its training-mode backward pass.
//!
//! All statistics are kept in `f64`: the streaming variance recurrence
//! subtracts nearly equal quantities and loses digits quickly otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TRAIN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_ONLINE_MOMENTUM: f64 = 0.01;

/// Per-channel parameters and running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnChannelState {
    pub gamma: f64,
    pub beta: f64,
    pub running_mean: f64,
    pub running_var: f64,
    pub epsilon: f64,
}

impl Default for BnChannelState {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            beta: 0.0,
            running_mean: 0.0,
            running_var: 1.0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl BnChannelState {
    pub fn with_epsilon(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be finite and > 0, got {epsilon}")));
        }
        Ok(Self {
            epsilon,
            ..Self::default()
        })
    }

    pub fn is_valid(&self) -> bool {
        self.gamma.is_finite()
            && self.beta.is_finite()
            && self.running_mean.is_finite()
            && self.running_var.is_finite()
            && self.running_var >= 0.0
            && self.epsilon > 0.0
    }
}

/// Mean and biased variance of one channel over one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMoments {
    pub mean: f64,
    pub var: f64,
    pub count: usize,
}

/// One normalization layer of width `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerState {
    pub channels: Vec<BnChannelState>,
    pub train_momentum: f64,
    pub online_momentum: f64,
}

pub(crate) fn check_momentum(momentum: f64) -> Result<()> {
    if momentum > 0.0 && momentum < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("momentum must lie in (0, 1), got {momentum}")))
    }
}

/// Arithmetic mean and biased (divisor `n`) variance, two passes.
pub fn batch_moments(values: &[f64]) -> Result<BatchMoments> {
    if values.is_empty() {
        return Err(Error::invalid("batch_moments of an empty batch"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite batch value {v}")));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(BatchMoments {
        mean,
        var,
        count: values.len(),
    })
}

/// Exponential running update from one training batch. The variance term
/// carries the `n / (n - 1)` correction of the biased batch variance.
pub fn update_running_train(
    state: &BnChannelState,
    moments: &BatchMoments,
    momentum: f64,
) -> Result<BnChannelState> {
    check_momentum(momentum)?;
    if moments.count <= 1 {
        return Err(Error::invalid(format!(
            "running update needs a batch of more than one instance, got {}",
            moments.count
        )));
    }
    if !(moments.mean.is_finite() && moments.var.is_finite() && moments.var >= 0.0) {
        return Err(Error::invalid(format!("bad batch moments {moments:?}")));
    }
    let n = moments.count as f64;
    let keep = 1.0 - momentum;
    Ok(BnChannelState {
        running_mean: keep * state.running_mean + momentum * moments.mean,
        running_var: keep * state.running_var + momentum * (n / (n - 1.0)) * moments.var,
        ..*state
    })
}

/// Single-instance exponential update. The variance innovation uses the
/// mean from *before* this update; no bias correction is applied.
pub fn update_running_online(state: &BnChannelState, z: f64, momentum: f64) -> Result<BnChannelState> {
    check_momentum(momentum)?;
    if !z.is_finite() {
        return Err(Error::invalid(format!("non-finite streaming input {z}")));
    }
    let (mean, var) = online_step(state.running_mean, state.running_var, z, momentum);
    Ok(BnChannelState {
        running_mean: mean,
        running_var: var,
        ..*state
    })
}

#[inline]
fn online_step(mean: f64, var: f64, z: f64, momentum: f64) -> (f64, f64) {
    let d = z - mean;
    let keep = 1.0 - momentum;
    (keep * mean + momentum * z, keep * (var + momentum * d * d))
}

/// `gamma * (z - mean) / sqrt(var + eps) + beta`.
pub fn normalize(state: &BnChannelState, z: f64, mean: f64, var: f64) -> Result<f64> {
    if !(var >= 0.0) {
        return Err(Error::invalid(format!("variance must be >= 0, got {var}")));
    }
    Ok(normalize_unchecked(state, z, mean, var))
}

#[inline]
pub(crate) fn normalize_unchecked(state: &BnChannelState, z: f64, mean: f64, var: f64) -> f64 {
    state.gamma * (z - mean) / (var + state.epsilon).sqrt() + state.beta
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub input: Matrix,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Gradients of a training-mode normalization, with the batch mean and
/// variance differentiated as functions of the batch inputs.
pub fn bn_backward(
    layer: &BnLayerState,
    batch_inputs: &Matrix,
    batch_moments: &[BatchMoments],
    upstream_grads: &Matrix,
) -> Result<BnGrads> {
    let (n, width) = batch_inputs.shape();
    check_backward_shapes(layer, batch_inputs, upstream_grads)?;
    if batch_moments.len() != width {
        return Err(Error::shape("bn_backward moments", width, batch_moments.len()));
    }
    if let Some(m) = batch_moments.iter().find(|m| m.count != n) {
        return Err(Error::shape("bn_backward moments count", n, m.count));
    }

    let nf = n as f64;
    let mut input = Matrix::zeros(n, width);
    let mut grad_gamma = vec![0.0; width];
    let mut grad_beta = vec![0.0; width];
    for l in 0..width {
        let ch = &layer.channels[l];
        let m = &batch_moments[l];
        let inv_std = 1.0 / (m.var + ch.epsilon).sqrt();
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for r in 0..n {
            let xhat = (batch_inputs.get(r, l) - m.mean) * inv_std;
            let dy = upstream_grads.get(r, l);
            grad_gamma[l] += dy * xhat;
            grad_beta[l] += dy;
            let dxhat = dy * ch.gamma;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for r in 0..n {
            let xhat = (batch_inputs.get(r, l) - m.mean) * inv_std;
            let dxhat = upstream_grads.get(r, l) * ch.gamma;
            input.set(r, l, inv_std / nf * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
        }
    }
    Ok(BnGrads {
        input,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

/// Gradients when normalizing with fixed (running) statistics: the
/// transform is affine per channel.
pub fn bn_backward_frozen(
    layer: &BnLayerState,
    batch_inputs: &Matrix,
    upstream_grads: &Matrix,
) -> Result<BnGrads> {
    let (n, width) = batch_inputs.shape();
    check_backward_shapes(layer, batch_inputs, upstream_grads)?;
    let mut input = Matrix::zeros(n, width);
    let mut grad_gamma = vec![0.0; width];
    let mut grad_beta = vec![0.0; width];
    for (l, ch) in layer.channels.iter().enumerate() {
        let inv_std = 1.0 / (ch.running_var + ch.epsilon).sqrt();
        for r in 0..n {
            let dy = upstream_grads.get(r, l);
            let xhat = (batch_inputs.get(r, l) - ch.running_mean) * inv_std;
            grad_gamma[l] += dy * xhat;
            grad_beta[l] += dy;
            input.set(r, l, dy * ch.gamma * inv_std);
        }
    }
    Ok(BnGrads {
        input,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

fn check_backward_shapes(layer: &BnLayerState, inputs: &Matrix, upstream: &Matrix) -> Result<()> {
    if inputs.cols() != layer.width() {
        return Err(Error::shape("bn_backward input width", layer.width(), inputs.cols()));
    }
    if upstream.shape() != inputs.shape() {
        return Err(Error::shape(
            "bn_backward upstream grads",
            format!("{:?}", inputs.shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    Ok(())
}

impl BnLayerState {
    pub fn new(width: usize, train_momentum: f64, online_momentum: f64) -> Result<Self> {
        if width == 0 {
            return Err(Error::invalid("normalization layer width must be >= 1"));
        }
        check_momentum(train_momentum)?;
        check_momentum(online_momentum)?;
        Ok(Self {
            channels: vec![BnChannelState::default(); width],
            train_momentum,
            online_momentum,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.channels.len()
    }

    pub fn running_means(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.running_mean).collect()
    }

    pub fn running_vars(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.running_var).collect()
    }

    /// Per-channel moments of a batch of layer inputs (`|B| x L`).
    pub fn moments(&self, inputs: &Matrix) -> Result<Vec<BatchMoments>> {
        if inputs.cols() != self.width() {
            return Err(Error::shape("layer input width", self.width(), inputs.cols()));
        }
        (0..self.width()).map(|l| batch_moments(&inputs.column(l))).collect()
    }

    /// Applies the batch update to every channel with `train_momentum`.
    pub fn update_train(&mut self, moments: &[BatchMoments]) -> Result<()> {
        if moments.len() != self.width() {
            return Err(Error::shape("moments", self.width(), moments.len()));
        }
        let updated = self
            .channels
            .iter()
            .zip(moments)
            .map(|(ch, m)| update_running_train(ch, m, self.train_momentum))
            .collect::<Result<Vec<_>>>()?;
        self.channels = updated;
        Ok(())
    }

    /// Applies the single-instance update to every channel with
    /// `online_momentum`. The layer is left untouched if any input is
    /// non-finite.
    pub fn update_online(&mut self, z: &[f64]) -> Result<()> {
        if z.len() != self.width() {
            return Err(Error::shape("layer input", self.width(), z.len()));
        }
        check_momentum(self.online_momentum)?;
        if let Some(v) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite streaming input {v}")));
        }
        for (ch, &v) in self.channels.iter_mut().zip(z) {
            let (mean, var) = online_step(ch.running_mean, ch.running_var, v, self.online_momentum);
            ch.running_mean = mean;
            ch.running_var = var;
        }
        Ok(())
    }

    /// Overwrites the running statistics with plain batch moments.
    pub fn set_running(&mut self, moments: &[BatchMoments]) -> Result<()> {
        if moments.len() != self.width() {
            return Err(Error::shape("moments", self.width(), moments.len()));
        }
        for (ch, m) in self.channels.iter_mut().zip(moments) {
            ch.running_mean = m.mean;
            ch.running_var = m.var;
        }
        Ok(())
    }

    /// Normalizes one row of layer inputs with the running statistics.
    pub fn normalize_running(&self, z: &[f64], out: &mut [f64]) {
        for ((o, &v), ch) in out.iter_mut().zip(z).zip(&self.channels) {
            *o = normalize_unchecked(ch, v, ch.running_mean, ch.running_var);
        }
    }
}
