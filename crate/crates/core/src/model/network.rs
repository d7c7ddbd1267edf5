//! Forward and backward passes.
//!
//! Per window: `window_len x in_channels` input, `conv_layers` zero-padded
//! convolutions each followed by ReLU, max pool, flatten, dense layer,
//! normalization, dropout, ReLU, linear classifier. Activations inside the
//! conv block are channel-major (`[channel][time]`).

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bn::{bn_backward, bn_backward_frozen, normalize_unchecked, BatchMoments, BnLayerState};
use crate::error::{Error, Result};
use crate::model::arch::{ArchConfig, TrainHyper};
use crate::seed::Rng;
use crate::tensor::Matrix;

/// Rows per chunk when accumulating conv gradients in parallel. Fixed so
/// the reduction order never depends on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `[out_ch][in_ch][kernel]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// The network `f_0`: architecture, weights and the running
/// normalization statistics left by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub arch: ArchConfig,
    pub conv: Vec<ConvLayer>,
    pub dense: Linear,
    pub bn: BnLayerState,
    pub classifier: Linear,
    pub label_map: Vec<String>,
    pub hyper: TrainHyper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Normalize with the batch's own moments.
    BatchStats,
    /// Normalize with the running statistics.
    GlobalStats,
}

#[derive(Debug, Clone)]
struct ConvTrace {
    /// Input to each conv layer, then the final post-ReLU output.
    acts: Vec<Vec<f64>>,
    pool_argmax: Vec<usize>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: NormMode,
    traces: Vec<ConvTrace>,
    pub features: Matrix,
    /// Inputs of the normalization layer, `|B| x L`.
    pub z: Matrix,
    pub moments: Option<Vec<BatchMoments>>,
    pub dropout_mask: Option<Matrix>,
    pub hidden: Matrix,
    pub logits: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv: Vec<(Vec<f64>, Vec<f64>)>,
    pub dense_weight: Matrix,
    pub dense_bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub classifier_weight: Matrix,
    pub classifier_bias: Vec<f64>,
    /// Mean cross-entropy of the batch.
    pub loss: f64,
}

impl Gradients {
    /// Tensors in the same order as [`TrainedModel::param_names`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in &self.conv {
            out.push(w);
            out.push(b);
        }
        out.push(self.dense_weight.as_slice());
        out.push(&self.dense_bias);
        out.push(&self.gamma);
        out.push(&self.beta);
        out.push(self.classifier_weight.as_slice());
        out.push(&self.classifier_bias);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn uniform(rng: &mut Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl ConvLayer {
    fn forward(&self, input: &[f64], len: usize) -> Vec<f64> {
        let pad = (self.kernel - 1) / 2;
        let mut out = vec![0.0; self.out_ch * len];
        for o in 0..self.out_ch {
            for t in 0..len {
                let mut acc = self.bias[o];
                for i in 0..self.in_ch {
                    let w = &self.weight[(o * self.in_ch + i) * self.kernel..][..self.kernel];
                    let x = &input[i * len..(i + 1) * len];
                    for (k, wk) in w.iter().enumerate() {
                        let src = t + k;
                        if src >= pad && src - pad < len {
                            acc += wk * x[src - pad];
                        }
                    }
                }
                out[o * len + t] = acc;
            }
        }
        out
    }

    /// Accumulates weight/bias gradients; returns the input gradient if asked.
    fn backward(
        &self,
        input: &[f64],
        dpre: &[f64],
        len: usize,
        dw: &mut [f64],
        db: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let pad = (self.kernel - 1) / 2;
        let mut din = want_input_grad.then(|| vec![0.0; self.in_ch * len]);
        for o in 0..self.out_ch {
            for t in 0..len {
                let g = dpre[o * len + t];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                for i in 0..self.in_ch {
                    let base = (o * self.in_ch + i) * self.kernel;
                    for k in 0..self.kernel {
                        let src = t + k;
                        if src >= pad && src - pad < len {
                            let s = i * len + src - pad;
                            dw[base + k] += g * input[s];
                            if let Some(d) = din.as_mut() {
                                d[s] += g * self.weight[base + k];
                            }
                        }
                    }
                }
            }
        }
        din
    }
}

impl Linear {
    fn row(&self, x: &[f64]) -> Vec<f64> {
        (0..self.weight.rows())
            .map(|o| {
                self.weight
                    .row(o)
                    .iter()
                    .zip(x)
                    .fold(self.bias[o], |acc, (w, v)| acc + w * v)
            })
            .collect()
    }
}

impl TrainedModel {
    /// Fan-in scaled uniform initialization (`|w| <= sqrt(1 / fan_in)`).
    pub fn init(arch: &ArchConfig, label_map: Vec<String>, hyper: &TrainHyper, rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeroed(arch, label_map, hyper)?;
        for layer in &mut model.conv {
            let bound = (1.0 / (layer.in_ch * layer.kernel) as f64).sqrt();
            layer.weight = uniform(rng, layer.weight.len(), bound);
            layer.bias = uniform(rng, layer.bias.len(), bound);
        }
        for lin in [&mut model.dense, &mut model.classifier] {
            let bound = (1.0 / lin.weight.cols() as f64).sqrt();
            let (r, c) = lin.weight.shape();
            lin.weight = Matrix::from_vec(r, c, uniform(rng, r * c, bound))?;
            lin.bias = uniform(rng, r, bound);
        }
        Ok(model)
    }

    /// All weights and biases zero, neutral normalization.
    pub fn zeroed(arch: &ArchConfig, label_map: Vec<String>, hyper: &TrainHyper) -> Result<Self> {
        arch.validate()?;
        if label_map.len() != arch.classes {
            return Err(Error::shape("label map", arch.classes, label_map.len()));
        }
        let conv = (0..arch.conv_layers)
            .map(|l| {
                let in_ch = if l == 0 { arch.in_channels } else { arch.feature_maps };
                ConvLayer {
                    in_ch,
                    out_ch: arch.feature_maps,
                    kernel: arch.kernel,
                    weight: vec![0.0; arch.feature_maps * in_ch * arch.kernel],
                    bias: vec![0.0; arch.feature_maps],
                }
            })
            .collect();
        Ok(Self {
            conv,
            dense: Linear {
                weight: Matrix::zeros(arch.dense_width, arch.feature_len()),
                bias: vec![0.0; arch.dense_width],
            },
            bn: BnLayerState::new(arch.dense_width, hyper.train_momentum, crate::bn::DEFAULT_ONLINE_MOMENTUM)?,
            classifier: Linear {
                weight: Matrix::zeros(arch.classes, arch.dense_width),
                bias: vec![0.0; arch.classes],
            },
            label_map,
            arch: arch.clone(),
            hyper: hyper.clone(),
        })
    }

    pub fn window_values(&self) -> usize {
        self.arch.window_len * self.arch.in_channels
    }

    fn check_window(&self, data: &[f64]) -> Result<()> {
        if data.len() != self.window_values() {
            return Err(Error::shape("window", self.window_values(), data.len()));
        }
        Ok(())
    }

    /// Conv block on one window: flattened pooled features and a trace.
    fn conv_block(&self, data: &[f64]) -> (Vec<f64>, ConvTrace) {
        let len = self.arch.window_len;
        let ch = self.arch.in_channels;
        let mut x = vec![0.0; ch * len];
        for t in 0..len {
            for c in 0..ch {
                x[c * len + t] = data[t * ch + c];
            }
        }
        let mut acts = Vec::with_capacity(self.conv.len() + 1);
        for layer in &self.conv {
            let mut out = layer.forward(&x, len);
            for v in &mut out {
                *v = v.max(0.0);
            }
            acts.push(std::mem::replace(&mut x, out));
        }
        let pool = self.arch.pool;
        let pooled = self.arch.pooled_len();
        let maps = self.arch.feature_maps;
        let mut features = vec![0.0; maps * pooled];
        let mut pool_argmax = vec![0; maps * pooled];
        for c in 0..maps {
            for j in 0..pooled {
                let start = c * len + j * pool;
                let mut best = start;
                for s in start + 1..start + pool {
                    if x[s] > x[best] {
                        best = s;
                    }
                }
                features[c * pooled + j] = x[best];
                pool_argmax[c * pooled + j] = best;
            }
        }
        acts.push(x);
        (features, ConvTrace { acts, pool_argmax })
    }

    /// Input `z` of the normalization layer for one window.
    pub fn layer_inputs(&self, data: &[f64]) -> Result<Vec<f64>> {
        self.check_window(data)?;
        Ok(self.dense.row(&self.conv_block(data).0))
    }

    /// Normalization-layer inputs for many windows, `|B| x L`.
    pub fn layer_inputs_batch(&self, batch: &[&[f64]]) -> Result<Matrix> {
        for d in batch {
            self.check_window(d)?;
        }
        let rows: Vec<Vec<f64>> = batch.par_iter().map(|d| self.dense.row(&self.conv_block(d).0)).collect();
        Matrix::from_vec(rows.len(), self.arch.dense_width, rows.concat())
    }

    /// Logits from layer inputs normalized with the running statistics of
    /// `bn` (inference path, no dropout).
    pub fn head_logits(&self, z: &[f64], bn: &BnLayerState) -> Vec<f64> {
        let mut y = vec![0.0; z.len()];
        bn.normalize_running(z, &mut y);
        for v in &mut y {
            *v = v.max(0.0);
        }
        self.classifier.row(&y)
    }

    pub fn forward(
        &self,
        batch: &[&[f64]],
        mode: NormMode,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(Matrix, ForwardCache)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for d in batch {
            self.check_window(d)?;
        }
        if mode == NormMode::BatchStats && batch.len() < 2 {
            return Err(Error::invalid("batch-statistics mode needs more than one window"));
        }
        let n = batch.len();
        let width = self.arch.dense_width;

        let (feature_rows, traces): (Vec<Vec<f64>>, Vec<ConvTrace>) =
            batch.par_iter().map(|d| self.conv_block(d)).unzip();
        let features = Matrix::from_vec(n, self.arch.feature_len(), feature_rows.concat())?;
        let mut z = Matrix::zeros(n, width);
        for r in 0..n {
            z.row_mut(r).copy_from_slice(&self.dense.row(features.row(r)));
        }

        let moments = match mode {
            NormMode::BatchStats => Some(self.bn.moments(&z)?),
            NormMode::GlobalStats => None,
        };
        let mut y = Matrix::zeros(n, width);
        for r in 0..n {
            match &moments {
                Some(ms) => {
                    for (l, (ch, m)) in self.bn.channels.iter().zip(ms).enumerate() {
                        y.set(r, l, normalize_unchecked(ch, z.get(r, l), m.mean, m.var));
                    }
                }
                None => self.bn.normalize_running(z.row(r), y.row_mut(r)),
            }
        }

        let p = self.arch.dropout_rate;
        let dropout_mask = match dropout_rng {
            // Dropout only acts while normalizing with batch statistics.
            Some(rng) if p > 0.0 && mode == NormMode::BatchStats => {
                let keep = 1.0 / (1.0 - p);
                let mut mask = Matrix::zeros(n, width);
                for v in mask.as_mut_slice() {
                    *v = if rng.random::<f64>() < p { 0.0 } else { keep };
                }
                for (yv, m) in y.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *yv *= m;
                }
                Some(mask)
            }
            _ => None,
        };

        let mut hidden = y;
        for v in hidden.as_mut_slice() {
            *v = v.max(0.0);
        }
        let mut logits = Matrix::zeros(n, self.arch.classes);
        for r in 0..n {
            logits.row_mut(r).copy_from_slice(&self.classifier.row(hidden.row(r)));
        }

        let cache = ForwardCache {
            mode,
            traces,
            features,
            z,
            moments,
            dropout_mask,
            hidden,
            logits: logits.clone(),
        };
        Ok((logits, cache))
    }

    /// Gradients of the mean cross-entropy of the cached batch.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        let n = cache.logits.rows();
        if labels.len() != n {
            return Err(Error::shape("labels", n, labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.arch.classes) {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        let classes = self.arch.classes;
        let width = self.arch.dense_width;
        let nf = n as f64;

        let mut loss = 0.0;
        let mut dlogits = Matrix::zeros(n, classes);
        for (r, &label) in labels.iter().enumerate() {
            let row = cache.logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            let probs = softmax(row);
            for (c, p) in probs.into_iter().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                dlogits.set(r, c, (p - onehot) / nf);
            }
        }
        loss /= nf;

        let mut classifier_weight = Matrix::zeros(classes, width);
        let classifier_bias = dlogits.column_sums();
        let mut dy = Matrix::zeros(n, width);
        for r in 0..n {
            let h = cache.hidden.row(r);
            for c in 0..classes {
                let g = dlogits.get(r, c);
                let wrow = self.classifier.weight.row(c);
                for l in 0..width {
                    classifier_weight.row_mut(c)[l] += g * h[l];
                    dy.row_mut(r)[l] += g * wrow[l];
                }
            }
            for l in 0..width {
                // ReLU after dropout: h > 0 exactly where the dropped-out
                // normalized value was positive.
                let mut g = if h[l] > 0.0 { dy.get(r, l) } else { 0.0 };
                if let Some(mask) = &cache.dropout_mask {
                    g *= mask.get(r, l);
                }
                dy.set(r, l, g);
            }
        }

        let bn_grads = match cache.mode {
            NormMode::BatchStats => {
                let moments = cache
                    .moments
                    .as_ref()
                    .ok_or_else(|| Error::Contract("batch-statistics cache without moments".into()))?;
                bn_backward(&self.bn, &cache.z, moments, &dy)?
            }
            NormMode::GlobalStats => bn_backward_frozen(&self.bn, &cache.z, &dy)?,
        };
        let dz = bn_grads.input;

        let feat_len = self.arch.feature_len();
        let mut dense_weight = Matrix::zeros(width, feat_len);
        let dense_bias = dz.column_sums();
        let mut dfeatures = Matrix::zeros(n, feat_len);
        for r in 0..n {
            let x = cache.features.row(r);
            for l in 0..width {
                let g = dz.get(r, l);
                if g == 0.0 {
                    continue;
                }
                let wrow = self.dense.weight.row(l);
                let dwrow = dense_weight.row_mut(l);
                for f in 0..feat_len {
                    dwrow[f] += g * x[f];
                }
                let dfrow = dfeatures.row_mut(r);
                for f in 0..feat_len {
                    dfrow[f] += g * wrow[f];
                }
            }
        }

        let chunk_grads: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(GRAD_CHUNK)
            .map(|rows| {
                let mut acc = self.zero_conv_grads();
                for &r in rows {
                    self.conv_backward_row(&cache.traces[r], dfeatures.row(r), &mut acc);
                }
                acc
            })
            .collect();
        let mut conv = self.zero_conv_grads();
        for chunk in chunk_grads {
            for ((w, b), (cw, cb)) in conv.iter_mut().zip(chunk) {
                w.iter_mut().zip(cw).for_each(|(a, v)| *a += v);
                b.iter_mut().zip(cb).for_each(|(a, v)| *a += v);
            }
        }

        Ok(Gradients {
            conv,
            dense_weight,
            dense_bias,
            gamma: bn_grads.gamma,
            beta: bn_grads.beta,
            classifier_weight,
            classifier_bias,
            loss,
        })
    }

    fn zero_conv_grads(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.conv
            .iter()
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
            .collect()
    }

    fn conv_backward_row(&self, trace: &ConvTrace, dfeatures: &[f64], acc: &mut [(Vec<f64>, Vec<f64>)]) {
        let len = self.arch.window_len;
        let mut dact = vec![0.0; self.arch.feature_maps * len];
        for (g, &src) in dfeatures.iter().zip(&trace.pool_argmax) {
            dact[src] += g;
        }
        for (li, layer) in self.conv.iter().enumerate().rev() {
            let out = &trace.acts[li + 1];
            for (d, &o) in dact.iter_mut().zip(out) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
            let (dw, db) = &mut acc[li];
            match layer.backward(&trace.acts[li], &dact, len, dw, db, li > 0) {
                Some(din) => dact = din,
                None => break,
            }
        }
    }

    /// Class probabilities and label for one window, using the running
    /// statistics. Ties go to the lowest class index.
    pub fn predict(&self, data: &[f64]) -> Result<Prediction> {
        let z = self.layer_inputs(data)?;
        Ok(prediction(&self.head_logits(&z, &self.bn)))
    }

    /// Batched inference path; per-row arithmetic matches [`Self::predict`].
    pub fn predict_batch(&self, batch: &[&[f64]]) -> Result<Vec<Prediction>> {
        let (logits, _) = self.forward(batch, NormMode::GlobalStats, None)?;
        Ok((0..logits.rows()).map(|r| prediction(logits.row(r))).collect())
    }

    /// Canonical parameter tensor names, in optimizer and checkpoint order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.conv.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        for n in ["dense.weight", "dense.bias", "bn.gamma", "bn.beta", "classifier.weight", "classifier.bias"] {
            names.push(n.to_string());
        }
        names
    }

    /// Copies of the parameter tensors in canonical order.
    pub fn param_tensors(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for l in &self.conv {
            out.push(l.weight.clone());
            out.push(l.bias.clone());
        }
        out.push(self.dense.weight.as_slice().to_vec());
        out.push(self.dense.bias.clone());
        out.push(self.bn.channels.iter().map(|c| c.gamma).collect());
        out.push(self.bn.channels.iter().map(|c| c.beta).collect());
        out.push(self.classifier.weight.as_slice().to_vec());
        out.push(self.classifier.bias.clone());
        out
    }

    /// Runs `f` over mutable views of every parameter tensor in canonical
    /// order.
    pub fn update_params<F>(&mut self, f: F) -> Result<()>
    where
        F: FnOnce(&mut [&mut [f64]]) -> Result<()>,
    {
        let mut gamma: Vec<f64> = self.bn.channels.iter().map(|c| c.gamma).collect();
        let mut beta: Vec<f64> = self.bn.channels.iter().map(|c| c.beta).collect();
        {
            let mut views: Vec<&mut [f64]> = Vec::new();
            for l in &mut self.conv {
                views.push(&mut l.weight);
                views.push(&mut l.bias);
            }
            views.push(self.dense.weight.as_mut_slice());
            views.push(&mut self.dense.bias);
            views.push(&mut gamma);
            views.push(&mut beta);
            views.push(self.classifier.weight.as_mut_slice());
            views.push(&mut self.classifier.bias);
            f(&mut views)?;
        }
        for ((ch, g), b) in self.bn.channels.iter_mut().zip(gamma).zip(beta) {
            ch.gamma = g;
            ch.beta = b;
        }
        Ok(())
    }

    /// SHA-256 over every trainable parameter (full precision), hex.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in self.param_tensors() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over the complete model state including running statistics.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        h.update(serde_json::to_vec(&self.label_map).expect("labels serialize"));
        h.update(self.weights_hash().as_bytes());
        for ch in &self.bn.channels {
            h.update(ch.running_mean.to_le_bytes());
            h.update(ch.running_var.to_le_bytes());
            h.update(ch.epsilon.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.param_tensors().iter().flatten().all(|v| v.is_finite()) && self.bn.channels.iter().all(|c| c.is_valid())
    }
}

fn prediction(logits: &[f64]) -> Prediction {
    let probabilities = softmax(logits);
    Prediction {
        label: argmax(&probabilities),
        probabilities,
    }
}
