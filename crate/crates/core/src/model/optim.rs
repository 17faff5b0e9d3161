//! Optimizers: plain gradient descent for tabular exact runs, an
//! adaptive-moment optimizer with decoupled weight decay for the neural
//! model.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip applied by trainers before stepping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.1,
            grad_clip: 2.0,
        }
    }
}

pub trait Optimizer {
    fn step(&mut self, params: &mut [f64], grad: &[f64]);
    /// Clears accumulated state (fresh subproblem at a phase boundary).
    fn reset(&mut self);
}

/// Momentum-free descent.
#[derive(Debug, Clone)]
pub struct GradientDescent {
    pub learning_rate: f64,
}

impl GradientDescent {
    pub fn new(learning_rate: f64) -> Self {
        GradientDescent { learning_rate }
    }
}

impl Optimizer for GradientDescent {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.learning_rate * g;
        }
    }

    fn reset(&mut self) {}
}

/// Adaptive moments with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamOptimizer {
    cfg: OptimConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamOptimizer {
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn new(cfg: OptimConfig, num_params: usize) -> Self {
        AdamOptimizer {
            cfg,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }
}

impl Optimizer for AdamOptimizer {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const EPS: f64 = 1e-8;
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.cfg.learning_rate;
        let wd = self.cfg.weight_decay;
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + EPS) + wd * params[i]);
        }
    }

    fn reset(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
        self.t = 0;
    }
}

/// Scales the gradient in place so its global norm is at most `clip`;
/// returns the pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], clip: f64) -> f64 {
    let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if clip > 0.0 && norm > clip {
        let scale = clip / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gd_moves_against_gradient() {
        let mut p = vec![1.0, -1.0];
        let g = vec![0.5, -0.5];
        GradientDescent::new(0.1).step(&mut p, &g);
        assert!((p[0] - 0.95).abs() < 1e-15);
        assert!((p[1] + 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize 0.5 * ||p - target||^2 without weight decay.
        let cfg = OptimConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let target = [2.0, -3.0, 0.5];
        let mut p = vec![0.0; 3];
        let mut opt = AdamOptimizer::new(cfg, 3);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| x - t).collect();
            opt.step(&mut p, &g);
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-3, "{x} vs {t}");
        }
    }

    #[test]
    fn clip_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        let pre = clip_grad_norm(&mut g, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((post - 1.0).abs() < 1e-12);
    }
}
