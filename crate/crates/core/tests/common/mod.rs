//! Oracles and fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use dabn::bn::{batch_moments, bn_backward, normalize, BnLayerState};
use dabn::model::{ArchConfig, NormMode, TrainHyper, TrainedModel};
use dabn::seed::{Rng, SeedStream};
use dabn::tensor::Matrix;
use rand::Rng as _;

/// Denominator floor for elementwise relative errors of near-zero values.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Norm-wise relative error of a tensor: largest absolute deviation over
/// the largest magnitude.
pub fn tensor_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let dev = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(REL_FLOOR, f64::max);
    dev / scale
}

pub fn labels(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("c{i}")).collect()
}

/// Small network used by the gradient checks.
pub fn grad_arch() -> ArchConfig {
    ArchConfig {
        conv_layers: 1,
        feature_maps: 4,
        dense_width: 8,
        window_len: 8,
        classes: 3,
        ..ArchConfig::tiny(3)
    }
    .with_dropout_rate(0.0)
}

pub fn random_model(arch: &ArchConfig, seed: u64) -> TrainedModel {
    let streams = SeedStream::new(seed);
    let mut m = TrainedModel::init(arch, labels(arch.classes), &TrainHyper::default(), &mut streams.rng("weights")).unwrap();
    let mut rng = streams.rng("bn");
    for ch in &mut m.bn.channels {
        ch.gamma = rng.random_range(0.5..1.5);
        ch.beta = rng.random_range(-0.5..0.5);
        ch.running_mean = rng.random_range(-0.5..0.5);
        ch.running_var = rng.random_range(0.2..2.0);
    }
    m
}

pub fn random_windows(rng: &mut Rng, n: usize, values: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..values).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

fn batch_loss(model: &TrainedModel, batch: &[&[f64]], labels: &[usize]) -> f64 {
    let (logits, _) = model.forward(batch, NormMode::BatchStats, None).unwrap();
    mean_cross_entropy(&logits, labels)
}

fn perturbed(model: &TrainedModel, tensor: usize, index: usize, delta: f64) -> TrainedModel {
    let mut m = model.clone();
    m.update_params(|views| {
        views[tensor][index] += delta;
        Ok(())
    })
    .unwrap();
    m
}

/// Signs of every ReLU input and the winner of every pooling group over a
/// batch in batch-statistics mode. Central differences are only meaningful
/// when this pattern is the same at every point of the stencil.
fn activation_pattern(m: &TrainedModel, batch: &[&[f64]]) -> Vec<usize> {
    let a = &m.arch;
    let len = a.window_len;
    let mut pattern = Vec::new();
    let mut features = Vec::new();
    for window in batch {
        let mut x: Vec<Vec<f64>> = (0..a.in_channels)
            .map(|c| (0..len).map(|t| window[t * a.in_channels + c]).collect())
            .collect();
        for layer in &m.conv {
            let half = (layer.kernel as isize - 1) / 2;
            let mut y = vec![vec![0.0; len]; layer.out_ch];
            for o in 0..layer.out_ch {
                for t in 0..len as isize {
                    let mut s = layer.bias[o];
                    for i in 0..layer.in_ch {
                        for k in 0..layer.kernel as isize {
                            let src = t + k - half;
                            if (0..len as isize).contains(&src) {
                                s += layer.weight[(o * layer.in_ch + i) * layer.kernel + k as usize] * x[i][src as usize];
                            }
                        }
                    }
                    pattern.push((s > 0.0) as usize);
                    y[o][t as usize] = s.max(0.0);
                }
            }
            x = y;
        }
        let mut flat = Vec::new();
        for map in &x {
            for chunk in map.chunks(a.pool) {
                let best = (1..chunk.len()).fold(0, |b, j| if chunk[j] > chunk[b] { j } else { b });
                pattern.push(best);
                flat.push(chunk[best]);
            }
        }
        features.push(flat);
    }
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            (0..a.dense_width)
                .map(|o| m.dense.bias[o] + f.iter().enumerate().map(|(j, v)| m.dense.weight.get(o, j) * v).sum::<f64>())
                .collect()
        })
        .collect();
    for l in 0..a.dense_width {
        let col: Vec<f64> = z.iter().map(|r| r[l]).collect();
        let bm = batch_moments(&col).unwrap();
        for v in col {
            pattern.push((normalize(&m.bn.channels[l], v, bm.mean, bm.var).unwrap() > 0.0) as usize);
        }
    }
    pattern
}

/// Largest norm-wise relative error between analytic and central-difference
/// gradients over the parameter tensors of a random model on a random batch, or
/// `None` if some perturbation crosses a ReLU or pooling kink.
pub fn network_grad_error(seed: u64, step: f64) -> Option<f64> {
    let arch = grad_arch();
    let model = random_model(&arch, seed);
    let mut rng = SeedStream::new(seed).rng("batch");
    let n = rng.random_range(8..17);
    let windows = random_windows(&mut rng, n, arch.window_len * arch.in_channels);
    let batch: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..arch.classes)).collect();

    let (_, cache) = model.forward(&batch, NormMode::BatchStats, None).unwrap();
    let grads = model.backward(&cache, &labels).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let params = model.param_tensors();
    assert_eq!(analytic.len(), params.len());
    let pattern = activation_pattern(&model, &batch);

    let mut worst: f64 = 0.0;
    for (t, p) in params.iter().enumerate() {
        assert_eq!(p.len(), analytic[t].len());
        let mut numeric = vec![0.0; p.len()];
        for (i, g) in numeric.iter_mut().enumerate() {
            let (up, down) = (perturbed(&model, t, i, step), perturbed(&model, t, i, -step));
            if activation_pattern(&up, &batch) != pattern || activation_pattern(&down, &batch) != pattern {
                return None;
            }
            *g = (batch_loss(&up, &batch, &labels) - batch_loss(&down, &batch, &labels)) / (2.0 * step);
        }
        worst = worst.max(tensor_rel_err(&analytic[t], &numeric));
    }
    Some(worst)
}

/// Errors of the first `cases` kink-free seeds, with the number of seeds
/// tried.
pub fn network_grad_cases(cases: usize, step: f64) -> (Vec<(u64, f64)>, u64) {
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < cases {
        if let Some(e) = network_grad_error(seed, step) {
            out.push((seed, e));
        }
        seed += 1;
        assert!(seed < 50 * cases as u64, "too few kink-free cases");
    }
    (out, seed)
}

fn bn_objective(layer: &BnLayerState, z: &Matrix, upstream: &Matrix) -> f64 {
    let mut total = 0.0;
    for l in 0..z.cols() {
        let m = batch_moments(&z.column(l)).unwrap();
        for r in 0..z.rows() {
            total += upstream.get(r, l) * normalize(&layer.channels[l], z.get(r, l), m.mean, m.var).unwrap();
        }
    }
    total
}

/// Same as [`network_grad_error`] for the normalization layer alone, with a
/// random linear objective on its outputs.
pub fn bn_grad_error(seed: u64, step: f64) -> f64 {
    let mut rng = SeedStream::new(seed).rng("bn-grad");
    let (n, width) = (rng.random_range(2..12), rng.random_range(1..6));
    let mut layer = BnLayerState::new(width, 0.1, 0.01).unwrap();
    for ch in &mut layer.channels {
        ch.gamma = rng.random_range(0.5..2.0);
        ch.beta = rng.random_range(-1.0..1.0);
    }
    let rand_matrix = |rng: &mut Rng, scale: f64| {
        Matrix::from_vec(n, width, (0..n * width).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let z = rand_matrix(&mut rng, 3.0);
    let upstream = rand_matrix(&mut rng, 1.0);
    let moments = layer.moments(&z).unwrap();
    let g = bn_backward(&layer, &z, &moments, &upstream).unwrap();

    let mut worst: f64 = 0.0;
    for r in 0..n {
        for l in 0..width {
            let mut zp = z.clone();
            zp.set(r, l, z.get(r, l) + step);
            let mut zm = z.clone();
            zm.set(r, l, z.get(r, l) - step);
            let numeric = (bn_objective(&layer, &zp, &upstream) - bn_objective(&layer, &zm, &upstream)) / (2.0 * step);
            worst = worst.max(rel_err(g.input.get(r, l), numeric));
        }
    }
    for l in 0..width {
        for (which, analytic) in [(0, g.gamma[l]), (1, g.beta[l])] {
            let shift = |d: f64| {
                let mut ly = layer.clone();
                if which == 0 {
                    ly.channels[l].gamma += d;
                } else {
                    ly.channels[l].beta += d;
                }
                bn_objective(&ly, &z, &upstream)
            };
            let numeric = (shift(step) - shift(-step)) / (2.0 * step);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

/// Straight-line evaluation of the network on one window with the running
/// statistics: zero-padded convolutions with ReLU, max pool, dense,
/// normalization, ReLU, classifier, softmax.
pub fn reference_probabilities(m: &TrainedModel, window: &[f64]) -> Vec<f64> {
    let a = &m.arch;
    let len = a.window_len;
    // x[channel][time]
    let mut x: Vec<Vec<f64>> = (0..a.in_channels)
        .map(|c| (0..len).map(|t| window[t * a.in_channels + c]).collect())
        .collect();
    for layer in &m.conv {
        let half = (layer.kernel as isize - 1) / 2;
        let mut y = vec![vec![0.0; len]; layer.out_ch];
        for o in 0..layer.out_ch {
            for t in 0..len as isize {
                let mut s = layer.bias[o];
                for i in 0..layer.in_ch {
                    for k in 0..layer.kernel as isize {
                        let src = t + k - half;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        let w = layer.weight[o * layer.in_ch * layer.kernel + i * layer.kernel + k as usize];
                        s += w * x[i][src as usize];
                    }
                }
                y[o][t as usize] = if s > 0.0 { s } else { 0.0 };
            }
        }
        x = y;
    }
    let mut flat = Vec::new();
    for map in &x {
        for chunk in map.chunks(a.pool) {
            flat.push(chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    let mut hidden = Vec::new();
    for o in 0..a.dense_width {
        let mut s = m.dense.bias[o];
        for (j, v) in flat.iter().enumerate() {
            s += m.dense.weight.get(o, j) * v;
        }
        let ch = &m.bn.channels[o];
        let n = ch.gamma * (s - ch.running_mean) / (ch.running_var + ch.epsilon).sqrt() + ch.beta;
        hidden.push(if n > 0.0 { n } else { 0.0 });
    }
    let mut logits = Vec::new();
    for o in 0..a.classes {
        let mut s = m.classifier.bias[o];
        for (j, v) in hidden.iter().enumerate() {
            s += m.classifier.weight.get(o, j) * v;
        }
        logits.push(s);
    }
    let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Double-double number: `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub fn new(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let (hi, lo) = quick_two_sum(p, e + self.hi * o.lo + self.lo * o.hi);
        Dd { hi, lo }
    }
}

/// Running `(mean, var)` after each element of `stream`, computed in
/// double-double directly from the recurrence
/// `mean' = (1 - a) mean + a z`, `var' = (1 - a) (var + a (z - mean)^2)`.
pub fn online_oracle(mean: f64, var: f64, alpha: f64, stream: &[f64]) -> Vec<(f64, f64)> {
    let a = Dd::new(alpha);
    let keep = Dd::new(1.0).sub(a);
    let (mut m, mut v) = (Dd::new(mean), Dd::new(var));
    stream
        .iter()
        .map(|&z| {
            let z = Dd::new(z);
            let d = z.sub(m);
            v = keep.mul(v.add(a.mul(d.mul(d))));
            m = keep.mul(m).add(a.mul(z));
            (m.hi, v.hi)
        })
        .collect()
}

/// `c + (1 - a)^n (m0 - c)` for `n = 1..=steps`, in double-double.
pub fn geometric_oracle(m0: f64, c: f64, alpha: f64, steps: usize) -> Vec<f64> {
    let keep = Dd::new(1.0).sub(Dd::new(alpha));
    let gap = Dd::new(m0).sub(Dd::new(c));
    let mut f = Dd::new(1.0);
    (0..steps)
        .map(|_| {
            f = f.mul(keep);
            Dd::new(c).add(f.mul(gap)).hi
        })
        .collect()
}
