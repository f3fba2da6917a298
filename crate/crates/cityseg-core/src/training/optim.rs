//! Momentum SGD with a one-cycle learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::numcore::{ParamStore, Tensor};

/// Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        params.for_each_mut(|name, value, grad| {
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros_like(value));
            for ((vv, &g), p) in v.data_mut().iter_mut().zip(grad.data()).zip(value.data_mut()) {
                *vv = momentum * *vv + g;
                *p -= lr * *vv;
            }
        });
        params.ensure_finite("after optimizer step")
    }
}

/// One-cycle schedule: linear warmup to the peak over `warmup_frac` of the
/// steps, then cosine decay to zero.
pub fn one_cycle_lr(step: usize, total_steps: usize, peak: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return peak;
    }
    let warmup = ((total_steps as f64 * warmup_frac).ceil() as usize).clamp(1, total_steps);
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else if total_steps == warmup {
        peak
    } else {
        let t = (step - warmup) as f64 / (total_steps - warmup) as f64;
        peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Deterministic per-(epoch, scene, batch) seed derivation (splitmix64).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = base;
    for &p in parts {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}
