use crate::model::{ModelParams, ParamLayout};

use super::OptimConfig;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    decay: Vec<bool>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(layout: &ParamLayout, cfg: &OptimConfig) -> Self {
        let mut decay = vec![false; layout.total()];
        for spec in layout.specs() {
            if spec.kind.decays() {
                decay[spec.range.clone()].fill(true);
            }
        }
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            decay,
            m: vec![0.0; layout.total()],
            v: vec![0.0; layout.total()],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let p = params.as_mut_slice();
        let g = grads.as_slice();
        for i in 0..p.len() {
            let gi = g[i] as f64;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            let mut x = p[i] as f64;
            if self.decay[i] {
                x -= lr * self.weight_decay * x;
            }
            x -= lr * mhat / (vhat.sqrt() + self.eps);
            p[i] = x as f32;
        }
    }
}

/// Euclidean norm of a gradient buffer.
pub fn grad_norm(grads: &ModelParams<f32>) -> f64 {
    grads
        .as_slice()
        .iter()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so its norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams<f32>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.as_mut_slice() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let config = ModelConfig::default();
        let mut p = ModelParams::<f32>::zeros(config).unwrap();
        let mut g = p.zeros_like();
        g.as_mut_slice()[0] = 3.0;
        g.as_mut_slice()[1] = -0.5;
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(p.layout(), &cfg);
        opt.step(&mut p, &g, 1e-2);
        assert!((p.as_slice()[0] + 1e-2).abs() < 1e-6);
        assert!((p.as_slice()[1] - 1e-2).abs() < 1e-6);
        assert_eq!(p.as_slice()[2], 0.0);
    }

    #[test]
    fn decay_skips_gains() {
        let config = ModelConfig::default();
        let mut p = ModelParams::<f32>::zeros(config).unwrap();
        p.as_mut_slice().fill(1.0);
        let g = p.zeros_like();
        let cfg = OptimConfig {
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(p.layout(), &cfg);
        opt.step(&mut p, &g, 0.1);
        let gain = p.tensor("ln_f.gain").unwrap();
        assert!(gain.iter().all(|&x| x == 1.0));
        let wq = p.tensor("layers.0.attn.w_q").unwrap();
        assert!(wq.iter().all(|&x| (x - 0.95).abs() < 1e-6));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = ModelParams::<f32>::zeros(ModelConfig::default()).unwrap();
        g.as_mut_slice()[..4].copy_from_slice(&[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-6);
    }
}
