use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::arch::TrainHyper;

/// Adaptive-moment optimizer state mirroring a list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
}

impl AdamState {
    pub fn new(shapes: &[usize], hyper: &TrainHyper) -> Self {
        Self {
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps_opt: hyper.eps_opt,
        }
    }

    /// One bias-corrected update of every tensor with learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "optimizer tensors",
                self.first_moment.len(),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first_moment[i].len() || g.len() != p.len() {
                return Err(Error::shape("optimizer tensor", self.first_moment[i].len(), p.len().max(g.len())));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps_opt);
            }
        }
        Ok(())
    }
}

/// Functional wrapper: one step over owned tensors.
pub fn adam_step(params: &mut [Vec<f64>], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    let mut views: Vec<&mut [f64]> = params.iter_mut().map(Vec::as_mut_slice).collect();
    let gviews: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    state.step(&mut views, &gviews, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let h = TrainHyper::default();
        let mut s = AdamState::new(&[3], &h);
        let mut p = vec![vec![1.0, -2.0, 3.0]];
        adam_step(&mut p, &[vec![0.0; 3]], &mut s, 0.1).unwrap();
        assert_eq!(p[0], vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let h = TrainHyper::default();
        let mut s = AdamState::new(&[3], &h);
        let g = vec![0.5, -2.0, 1e-9];
        let mut p = vec![vec![0.0; 3]];
        adam_step(&mut p, &[g.clone()], &mut s, 1e-3).unwrap();
        for j in 0..3 {
            // m_hat = g, v_hat = g^2 at t = 1
            let expect = -1e-3 * g[j] / (g[j].abs() + h.eps_opt);
            assert!((p[0][j] - expect).abs() < 1e-15, "{j}: {} vs {expect}", p[0][j]);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        // Independent recurrence for f(w) = |w|^2 on one coordinate.
        let h = TrainHyper::default();
        let lr = 0.01;
        let (mut w_ref, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut s = AdamState::new(&[4], &h);
        let mut p = vec![vec![1.0; 4]];
        let mut prev = 2.0f64;
        for t in 1..=100 {
            let g: Vec<f64> = p[0].iter().map(|w| 2.0 * w).collect();
            adam_step(&mut p, &[g], &mut s, lr).unwrap();
            let gr = 2.0 * w_ref;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            w_ref -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((p[0][0] - w_ref).abs() < 1e-12);
            let norm = p[0].iter().map(|w| w * w).sum::<f64>().sqrt();
            assert!(norm < prev);
            prev = norm;
        }
        assert!(prev < 0.5 * 2.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = AdamState::new(&[2], &TrainHyper::default());
        let mut p = vec![vec![0.0; 3]];
        assert!(adam_step(&mut p, &[vec![0.0; 3]], &mut s, 0.1).is_err());
        assert_eq!(s.step_count, 0);
    }
}
