//! Adam with decoupled weight decay, and the per-epoch learning-rate schedule.

use crate::model::Param;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one flat parameter buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam step at time `t ≥ 1` with decoupled weight decay:
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
pub fn adam_update(
    params: &mut [f32],
    grads: &[f32],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    assert!(t >= 1, "Adam step count starts at 1");
    assert_eq!(params.len(), grads.len());
    if state.m.len() != params.len() {
        *state = AdamState::zeros(params.len());
    }
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    let decay = 1.0 - lr * weight_decay;
    for i in 0..params.len() {
        let g = grads[i] as f64;
        let m = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        let v = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let step = (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
        params[i] = (params[i] as f64 * decay - lr * step) as f32;
    }
}

/// Adam over a whole parameter list.
#[derive(Clone, Debug)]
pub struct Adam {
    pub weight_decay: f64,
    states: Vec<AdamState>,
    t: u64,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            states: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: &mut [Param<f32>], grads: &[Tensor<f32>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.states.len() != params.len() {
            self.states = params.iter().map(|p| AdamState::zeros(p.value.numel())).collect();
        }
        self.t += 1;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adam_update(p.value.data_mut(), g.data(), s, self.t, lr, self.weight_decay);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScheduleKind {
    /// Half-cosine from `lr0` to `lr_final`.
    #[default]
    Cosine,
    /// `steps` equal multiplicative drops from `lr0` to `lr_final`.
    Staircase { steps: usize },
}

/// Per-epoch learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr_final: f64,
    pub epochs: usize,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn new(lr0: f64, final_ratio: f64, epochs: usize, kind: ScheduleKind) -> Self {
        Self {
            lr0,
            lr_final: lr0 * final_ratio,
            epochs,
            kind,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr0;
        }
        let progress = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        match self.kind {
            ScheduleKind::Cosine => {
                self.lr_final
                    + (self.lr0 - self.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
            }
            ScheduleKind::Staircase { steps } => {
                let steps = steps.max(1);
                let k = ((progress * steps as f64).floor() as usize).min(steps);
                if k == steps {
                    return self.lr_final;
                }
                self.lr0 * (self.lr_final / self.lr0).powf(k as f64 / steps as f64)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5f32, -1.0];
        let mut s = AdamState::zeros(2);
        for t in 1..5 {
            adam_update(&mut p, &[0.0, 0.0], &mut s, t, 1e-3, 0.0);
        }
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m = 0.1g, v = 0.001g², m̂ = g, v̂ = g², step = lr·g/(|g| + ε)
        let g = [0.2f32, -3.0];
        let mut p = vec![1.0f32, 1.0];
        let mut s = AdamState::zeros(2);
        let lr = 0.01;
        adam_update(&mut p, &g, &mut s, 1, lr, 0.0);
        for i in 0..2 {
            let gi = g[i] as f64;
            let expected = 1.0 - lr * gi / (gi.abs() + ADAM_EPS);
            assert!((p[i] as f64 - expected).abs() < 1e-7, "{} vs {}", p[i], expected);
        }
        assert!((s.m[0] - 0.1 * 0.2f32 as f64).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = vec![0.0f32];
        let mut s = AdamState::zeros(1);
        let lr = 1e-3;
        let mut last = 0.0;
        for t in 1..=2000 {
            let before = p[0];
            adam_update(&mut p, &[0.37], &mut s, t, lr, 0.0);
            last = (before - p[0]) as f64;
        }
        assert!((last - lr).abs() < 1e-5 * 10.0, "{last}");
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = vec![2.0f32];
        let mut s = AdamState::zeros(1);
        adam_update(&mut p, &[0.0], &mut s, 1, 0.1, 0.5);
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-6);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = LrSchedule::new(1e-5, 1.0 / 20.0, 51, ScheduleKind::Cosine);
        assert_eq!(s.lr(0), 1e-5);
        assert!((s.lr(50) / (1e-5 / 20.0) - 1.0).abs() < 1e-12);
        assert!((s.lr(25) / (0.525 * 1e-5) - 1.0).abs() < 1e-12);
        for e in 1..51 {
            assert!(s.lr(e) <= s.lr(e - 1));
        }
    }

    #[test]
    fn staircase_has_twenty_drops() {
        let s = LrSchedule::new(1.0, 0.05, 50, ScheduleKind::Staircase { steps: 20 });
        let lrs: Vec<f64> = (0..50).map(|e| s.lr(e)).collect();
        let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
        assert_eq!(drops, 20);
        assert_eq!(lrs[0], 1.0);
        assert_eq!(lrs[49], 0.05);
    }

    #[test]
    fn single_epoch_uses_lr0() {
        let s = LrSchedule::new(3e-4, 0.05, 1, ScheduleKind::Cosine);
        assert_eq!(s.lr(0), 3e-4);
    }
}
