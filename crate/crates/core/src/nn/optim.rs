use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerKind::Sgd { lr, momentum }
    }

    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

/// Constant learning rate with a single step decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    /// Fraction of the epochs after which the rate is multiplied by `factor`.
    pub decay_at: f64,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { decay_at: 0.8, factor: 0.1 }
    }
}

impl LrSchedule {
    pub fn multiplier(&self, epoch: usize, total_epochs: usize) -> f64 {
        if (epoch as f64) >= self.decay_at * total_epochs as f64 {
            self.factor
        } else {
            1.0
        }
    }
}

/// Optimizer with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
    lr_multiplier: f64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        let second = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; num_params],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer { kind, first: vec![0.0; num_params], second, steps: 0, lr_multiplier: 1.0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr_multiplier(&mut self, m: f64) {
        self.lr_multiplier = m;
    }

    /// SGD-momentum: `v = mu*v - lr*g; p += v`. Adam: bias-corrected moments.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
        assert_eq!(params.len(), self.first.len(), "optimizer built for a different model");
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { lr, momentum } => {
                let lr = lr * self.lr_multiplier;
                for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    *v = momentum * *v - lr * g;
                    *p += *v;
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let lr = lr * self.lr_multiplier;
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}
