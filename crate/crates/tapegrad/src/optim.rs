//! AdamW with decoupled weight decay, global-norm clipping, and LR schedules.

use crate::nn::Params;
use crate::Scalar;
use indexmap::IndexMap;
use ndarray::ArrayD;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

pub struct AdamW<F: Scalar> {
    cfg: AdamWConfig,
    step: u64,
    m: IndexMap<String, ArrayD<F>>,
    v: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &Params<F>, cfg: AdamWConfig) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, value) in params.iter() {
            m.insert(name.clone(), ArrayD::zeros(value.raw_dim()));
            v.insert(name.clone(), ArrayD::zeros(value.raw_dim()));
        }
        AdamW { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step. `grads` must be keyed like `params`.
    pub fn step(&mut self, params: &mut Params<F>, grads: &IndexMap<String, ArrayD<F>>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let b1 = F::of(self.cfg.beta1);
        let b2 = F::of(self.cfg.beta2);
        let one_m_b1 = F::of(1.0 - self.cfg.beta1);
        let one_m_b2 = F::of(1.0 - self.cfg.beta2);
        let eps = F::of(self.cfg.eps);
        let lr_f = F::of(lr);
        let decay = F::of(lr * self.cfg.weight_decay);
        let inv_bc1 = F::of(1.0 / bc1);
        let inv_bc2 = F::of(1.0 / bc2);

        for (name, p) in params.iter_mut() {
            let g = grads.get(name).unwrap_or_else(|| panic!("missing gradient for {name}"));
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let mhat = *m * inv_bc1;
                let vhat = *v * inv_bc2;
                *p = *p - decay * *p - lr_f * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut IndexMap<String, ArrayD<F>>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for v in g.iter() {
            let x = v.f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::of(max_norm / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the initial rate down to `lr_min` over all epochs.
    Cosine {
        lr_min: f64,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, lr_initial: f64, epoch: usize, total_epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr_initial,
            LrSchedule::Cosine { lr_min } => {
                if total_epochs <= 1 {
                    return lr_initial;
                }
                let progress = epoch as f64 / (total_epochs - 1) as f64;
                lr_min + 0.5 * (lr_initial - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}
