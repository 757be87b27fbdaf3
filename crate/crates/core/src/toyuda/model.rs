//! Toy scorer (linear, or one tanh hidden layer) with a scalar regression
//! head on its features, backpropagated by hand.
//!
//! Parameters live in one flat vector so SGD and the teacher EMA are plain
//! elementwise loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub input_dim: usize,
    /// 0 for a linear scorer.
    pub hidden: usize,
    pub num_classes: usize,
}

impl Layout {
    pub fn feature_dim(&self) -> usize {
        if self.hidden == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    fn w1(&self) -> usize {
        0
    }

    fn b1(&self) -> usize {
        self.hidden * self.input_dim
    }

    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }

    fn b2(&self) -> usize {
        self.w2() + self.num_classes * self.feature_dim()
    }

    fn head_w(&self) -> usize {
        self.b2() + self.num_classes
    }

    fn head_b(&self) -> usize {
        self.head_w() + self.feature_dim()
    }

    pub fn len(&self) -> usize {
        self.head_b() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub layout: Layout,
    pub params: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub cde: f64,
}

impl ToyModel {
    pub fn new(layout: Layout, init_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..layout.len())
            .map(|_| init_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ToyModel { layout, params }
    }

    pub fn zeros(layout: Layout) -> Self {
        ToyModel {
            layout,
            params: vec![0.0; layout.len()],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Forward {
        let l = &self.layout;
        let p = &self.params;
        let features: Vec<f64> = if l.hidden == 0 {
            x.to_vec()
        } else {
            (0..l.hidden)
                .map(|h| {
                    let row = &p[l.w1() + h * l.input_dim..l.w1() + (h + 1) * l.input_dim];
                    (p[l.b1() + h] + dot(row, x)).tanh()
                })
                .collect()
        };
        let f = l.feature_dim();
        let logits = (0..l.num_classes)
            .map(|c| p[l.b2() + c] + dot(&p[l.w2() + c * f..l.w2() + (c + 1) * f], &features))
            .collect();
        let cde = p[l.head_b()] + dot(&p[l.head_w()..l.head_w() + f], &features);
        Forward { features, logits, cde }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).logits
    }

    /// Accumulates into `grad` the parameter gradient for upstream
    /// `d_logits` and `d_cde`.
    pub fn backward(&self, x: &[f64], fwd: &Forward, d_logits: &[f64], d_cde: f64, grad: &mut [f64]) {
        let l = &self.layout;
        let p = &self.params;
        let f = l.feature_dim();
        let mut d_feat = vec![0.0; f];
        for (c, &g) in d_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[l.b2() + c] += g;
            let base = l.w2() + c * f;
            for j in 0..f {
                grad[base + j] += g * fwd.features[j];
                d_feat[j] += g * p[base + j];
            }
        }
        if d_cde != 0.0 {
            grad[l.head_b()] += d_cde;
            for j in 0..f {
                grad[l.head_w() + j] += d_cde * fwd.features[j];
                d_feat[j] += d_cde * p[l.head_w() + j];
            }
        }
        if l.hidden > 0 {
            for h in 0..l.hidden {
                let a = fwd.features[h];
                let d_pre = d_feat[h] * (1.0 - a * a);
                if d_pre == 0.0 {
                    continue;
                }
                grad[l.b1() + h] += d_pre;
                let base = l.w1() + h * l.input_dim;
                for (i, &xi) in x.iter().enumerate() {
                    grad[base + i] += d_pre * xi;
                }
            }
        }
    }

    /// `self ← α·self + (1−α)·student`.
    pub fn ema_from(&mut self, student: &ToyModel, alpha: f64) {
        for (t, &s) in self.params.iter_mut().zip(&student.params) {
            *t = alpha * *t + (1.0 - alpha) * s;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn objective(m: &ToyModel, x: &[f64], w: &[f64], wc: f64) -> f64 {
        let fwd = m.forward(x);
        fwd.logits.iter().zip(w).map(|(z, a)| z * a).sum::<f64>() + wc * fwd.cde
    }

    fn check_gradient(hidden: usize) {
        let layout = Layout { input_dim: 3, hidden, num_classes: 4 };
        let m = ToyModel::new(layout, 0.7, 3);
        let x = [0.4, -1.1, 0.8];
        let w = [0.3, -0.5, 1.2, 0.1];
        let wc = -0.7;
        let fwd = m.forward(&x);
        let mut grad = vec![0.0; layout.len()];
        m.backward(&x, &fwd, &w, wc, &mut grad);
        let h = 1e-5;
        for i in 0..layout.len() {
            let mut plus = m.clone();
            plus.params[i] += h;
            let mut minus = m.clone();
            minus.params[i] -= h;
            let fd = (objective(&plus, &x, &w, wc) - objective(&minus, &x, &w, wc)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            assert!(rel < 1e-6, "param {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        check_gradient(0);
    }

    #[test]
    fn hidden_backward_matches_finite_differences() {
        check_gradient(6);
    }

    #[test]
    fn ema_moves_by_one_minus_alpha() {
        let layout = Layout { input_dim: 2, hidden: 0, num_classes: 2 };
        let mut teacher = ToyModel::zeros(layout);
        let student = ToyModel::new(layout, 1.0, 1);
        teacher.ema_from(&student, 0.999);
        for (t, s) in teacher.params.iter().zip(&student.params) {
            assert!((t - 0.001 * s).abs() < 1e-15);
        }
    }
}
