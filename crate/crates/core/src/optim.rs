//! AdamW, reduce-on-plateau and early stopping.

use serde::{Deserialize, Serialize};

use crate::nn::Parameters;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW with decoupled weight decay applied to every parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, num_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grad: &P, lr: f64) {
        let mut slices: Vec<&[f64]> = Vec::new();
        grad.visit("", &mut |_, _, g| slices.push(g));
        assert_eq!(
            slices.iter().map(|s| s.len()).sum::<usize>(),
            self.m.len(),
            "gradient size does not match optimizer state"
        );
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let decay = 1.0 - lr * weight_decay;
        let (m, v) = (&mut self.m, &mut self.v);
        let mut k = 0;
        let mut off = 0;
        params.visit_mut("", &mut |_, p| {
            let g = slices[k];
            assert_eq!(g.len(), p.len(), "gradient tensor shape mismatch");
            for i in 0..p.len() {
                let j = off + i;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[i];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
            k += 1;
            off += p.len();
        });
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has failed
/// to improve (relative threshold) for more than `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub lr: f64,
    best: f64,
    num_bad: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            threshold: 1e-4,
            lr,
            best: f64::INFINITY,
            num_bad: 0,
        }
    }

    /// Records one epoch's loss and returns the learning rate for the next.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.num_bad = 0;
        } else {
            self.num_bad += 1;
        }
        if self.num_bad > self.patience {
            self.lr *= self.factor;
            self.num_bad = 0;
        }
        self.lr
    }
}

/// Stops after `patience` epochs without a strict improvement of the loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Returns true when `loss` is a new best.
    pub fn step(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}
