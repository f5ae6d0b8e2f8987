use serde::{Deserialize, Serialize};

use super::adapter::{ProjectionAdapter, Slot};
use super::loss::Gradients;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments for every slot of an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: [Vec<f64>; 4],
    pub v: [Vec<f64>; 4],
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        let z = vec![0.0; dim * dim];
        Self {
            step: 0,
            m: [z.clone(), z.clone(), z.clone(), z.clone()],
            v: [z.clone(), z.clone(), z.clone(), z],
        }
    }
}

/// One AdamW update of a flat parameter slice.
///
/// Weight decay is decoupled: `θ ← θ - lr·λ·θ` is applied before the Adam
/// step, and both moments are bias-corrected with `step` (1-based).
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        theta[i] -= lr * cfg.weight_decay * theta[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Applies one AdamW step to every unfrozen matrix of `adapter`.
///
/// All gradients are checked before anything is modified.
pub fn adamw_step(
    adapter: &mut ProjectionAdapter,
    grads: &Gradients,
    state: &mut AdamState,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::InvalidArgument("optimizer steps are 1-based".into()));
    }
    if grads.dim != adapter.dim() {
        return Err(Error::DimensionMismatch {
            declared: adapter.dim(),
            actual: grads.dim,
        });
    }
    let active: Vec<Slot> = Slot::ALL.into_iter().filter(|s| !adapter.is_frozen(*s)).collect();
    for slot in &active {
        if grads.slot(*slot).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(slot.to_string()));
        }
    }
    for slot in active {
        let i = slot.index();
        adamw_update(
            adapter.matrix_mut(slot),
            &grads.slots[i],
            &mut state.m[i],
            &mut state.v[i],
            step,
            lr,
            cfg,
        );
    }
    state.step = step;
    Ok(())
}

/// Linear warmup to `peak` followed by cosine annealing to zero.
pub fn lr_at_step(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> Result<f64> {
    if total_steps == 0 || step >= total_steps || warmup_steps >= total_steps {
        return Err(Error::InvalidArgument(format!(
            "invalid schedule: step {step}, warmup {warmup_steps}, total {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(peak * (step + 1) as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(theta: f64, g: f64, lr: f64, wd: f64) -> (f64, f64, f64) {
        let cfg = AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        };
        let (mut t, mut m, mut v) = ([theta], [0.0], [0.0]);
        adamw_update(&mut t, &[g], &mut m, &mut v, 1, lr, &cfg);
        (t[0], m[0], v[0])
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (t, m, v) = one(0.37, 0.0, 1e-5, 0.0);
        assert_eq!((t, m, v), (0.37, 0.0, 0.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (t, _, _) = one(0.0, 1.0, 1e-5, 0.0);
        // m_hat = v_hat = 1
        let expected = -1e-5 / (1.0 + 1e-8);
        assert!((t - expected).abs() < 1e-18);
        assert!((t + 1e-5).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay() {
        let (t, _, _) = one(1.0, 0.0, 1e-5, 0.01);
        assert!((t - 0.9999999).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_matrix() {
        let mut a = ProjectionAdapter::identity(2);
        let mut g = Gradients::zeros(2);
        g.slots[Slot::ContextText.index()][3] = f64::NAN;
        let mut st = AdamState::new(2);
        let before = a.clone();
        let err = adamw_step(&mut a, &g, &mut st, 1, 1e-3, &AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("context_text"), "{err}");
        assert_eq!(a, before);
    }

    #[test]
    fn frozen_slots_are_untouched() {
        let mut a = ProjectionAdapter::identity(3).with_frozen([true, false, true, false]);
        let mut g = Gradients::zeros(3);
        g.slots.iter_mut().for_each(|s| s.fill(0.5));
        let before = a.clone();
        adamw_step(&mut a, &g, &mut AdamState::new(3), 1, 1e-2, &AdamWConfig::default()).unwrap();
        assert_eq!(a.matrix(Slot::QueryImage), before.matrix(Slot::QueryImage));
        assert_eq!(a.matrix(Slot::ContextImage), before.matrix(Slot::ContextImage));
        assert_ne!(a.matrix(Slot::QueryText), before.matrix(Slot::QueryText));
    }

    #[test]
    fn schedule_examples() {
        let peak = 1e-5;
        assert_eq!(lr_at_step(10, 100, 10, peak).unwrap(), peak);
        assert_eq!(lr_at_step(9, 100, 10, peak).unwrap(), peak);
        assert_eq!(lr_at_step(4, 100, 10, peak).unwrap(), 0.5 * peak);
        let closed = peak * 0.5 * (1.0 + (std::f64::consts::PI / 2.0).cos());
        assert_eq!(lr_at_step(1, 2, 0, peak).unwrap(), closed);
        assert!((closed - 0.5 * peak).abs() < 1e-20);
    }

    #[test]
    fn schedule_bounds() {
        assert!(lr_at_step(5, 5, 0, 1.0).is_err());
        assert!(lr_at_step(0, 5, 5, 1.0).is_err());
        assert!(lr_at_step(0, 0, 0, 1.0).is_err());
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let total = 1890;
        let lrs: Vec<f64> = (189..total).map(|s| lr_at_step(s, total, 189, 1e-5).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(*lrs.last().unwrap() < 1e-9);
    }
}
