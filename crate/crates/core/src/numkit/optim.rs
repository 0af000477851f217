//! First-order optimizers over a [`ParamStore`].
//!
//! Parameters without a gradient are left untouched and counted in
//! `skipped`, so a frozen or unused parameter never drifts through decay.

use super::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    skipped: u64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            skipped: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Number of (parameter, step) pairs skipped for lack of a gradient.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if self.m.len() <= i {
                self.m.push(vec![0.0; p.value.len()]);
                self.v.push(vec![0.0; p.value.len()]);
            }
            let Some(g) = p.grad.as_ref().filter(|_| p.requires_grad) else {
                self.skipped += 1;
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((theta, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *theta *= decay;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *theta -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Heavy-ball SGD: `v <- momentum * v + g; theta <- theta - lr * v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
    step: u64,
    skipped: u64,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
            step: 0,
            skipped: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if self.velocity.len() <= i {
                self.velocity.push(vec![0.0; p.value.len()]);
            }
            let Some(g) = p.grad.as_ref().filter(|_| p.requires_grad) else {
                self.skipped += 1;
                continue;
            };
            for ((theta, &g), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(&mut self.velocity[i]) {
                *v = self.momentum * *v + g;
                *theta -= self.lr * *v;
            }
        }
    }
}

/// Staircase schedule: the base rate is multiplied by `gamma` at each
/// milestone, given as fractions of the total epoch count.
#[derive(Clone, Debug)]
pub struct MultiStepLr {
    pub base: f64,
    pub gamma: f64,
    milestones: Vec<usize>,
}

impl MultiStepLr {
    pub fn new(base: f64, gamma: f64, total_epochs: usize, fractions: &[f64]) -> Self {
        let milestones = fractions
            .iter()
            .map(|f| (f * total_epochs as f64).floor() as usize)
            .collect();
        Self {
            base,
            gamma,
            milestones,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}
