//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::Parameter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub updated: usize,
    /// Parameters without a gradient buffer; left untouched.
    pub skipped: usize,
}

impl AdamW {
    pub fn step(&self, params: &mut [Parameter]) -> StepStats {
        let mut stats = StepStats::default();
        for p in params.iter_mut() {
            let Some(grad) = p.tensor.grad() else {
                stats.skipped += 1;
                continue;
            };
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = 1.0 - self.lr * self.weight_decay;
            let (m, v) = (&mut p.m, &mut p.v);
            p.tensor.update_data(|w| {
                for i in 0..w.len() {
                    let g = grad[i];
                    w[i] *= decay;
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
            stats.updated += 1;
        }
        if stats.skipped > 0 {
            log::warn!("adamw: {} parameters had no gradient", stats.skipped);
        }
        stats
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &[Parameter], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / (total + 1e-6);
        for p in params {
            if let Some(mut g) = p.tensor.grad() {
                g.iter_mut().for_each(|x| *x *= s);
                p.tensor.set_grad(Some(g));
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, v) in values.iter().enumerate() {
            s.register(format!("w{i}"), Tensor::leaf(vec![*v], &[1]).unwrap())
                .unwrap();
        }
        s
    }

    #[test]
    fn zero_gradient_isolates_decay() {
        let mut s = store_with(&[1.0]);
        s.params()[0].tensor.set_grad(Some(vec![0.0]));
        let opt = AdamW {
            lr: 1.0,
            weight_decay: 0.01,
            ..AdamW::default()
        };
        opt.step(s.params_mut());
        assert!((s.params()[0].tensor.item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn step_on_square_descends() {
        let mut s = store_with(&[1.0]);
        let w = s.params()[0].tensor.clone();
        w.mul(&w).unwrap().sum().backward().unwrap();
        AdamW::default().step(s.params_mut());
        assert!(w.item().abs() < 1.0);
    }

    #[test]
    fn missing_gradient_is_skipped() {
        let mut s = store_with(&[1.0, 2.0]);
        s.params()[1].tensor.set_grad(Some(vec![0.5]));
        let stats = AdamW::default().step(s.params_mut());
        assert_eq!(stats, StepStats { updated: 1, skipped: 1 });
        assert_eq!(s.params()[0].tensor.item(), 1.0);
        assert_eq!(s.params()[0].step_count(), 0);
    }

    /// Plain scalar AdamW, written out independently of the tensor path.
    fn reference_trace(w0: [f64; 3], grads: &[[f64; 3]], o: &AdamW) -> [f64; 3] {
        let mut w = w0;
        let mut m = [0.0; 3];
        let mut v = [0.0; 3];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            for i in 0..3 {
                w[i] -= o.lr * o.weight_decay * w[i];
                m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
                v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
                let mh = m[i] / (1.0 - o.beta1.powf(t));
                let vh = v[i] / (1.0 - o.beta2.powf(t));
                w[i] -= o.lr * mh / (vh.sqrt() + o.eps);
            }
        }
        w
    }

    #[test]
    fn two_steps_match_reference() {
        let opt = AdamW {
            lr: 0.05,
            weight_decay: 0.1,
            ..AdamW::default()
        };
        let w0 = [0.5, -1.5, 2.0];
        let grads = [[0.3, -0.2, 1.1], [-0.4, 0.25, 0.9]];
        let mut s = store_with(&w0);
        for g in &grads {
            for (p, gi) in s.params().iter().zip(g) {
                p.tensor.set_grad(Some(vec![*gi]));
            }
            opt.step(s.params_mut());
        }
        let expect = reference_trace(w0, &grads, &opt);
        for (p, e) in s.params().iter().zip(expect) {
            assert!((p.tensor.item() - e).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let s = store_with(&[0.0, 0.0]);
        s.params()[0].tensor.set_grad(Some(vec![3.0]));
        s.params()[1].tensor.set_grad(Some(vec![4.0]));
        let before = clip_grad_norm(s.params(), 0.1);
        assert!((before - 5.0).abs() < 1e-12);
        let after: f64 = s
            .params()
            .iter()
            .map(|p| p.tensor.grad().unwrap()[0].powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(after <= 0.1 + 1e-12);
    }
}
