//! Adam with the usual constants: beta1 0.9, beta2 0.999, eps 1e-8,
//! bias-corrected moments.

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One in-place update. `params`, `grads`, and the state must share a length.
pub fn adam_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, lr: f32) {
    assert_eq!(params.len(), grads.len(), "param/grad length mismatch");
    assert_eq!(params.len(), state.m.len(), "param/state length mismatch");
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With g = 1 the corrected moments are exactly (1, 1), so the first
        // update is lr / (1 + eps).
        let mut p = [0.5f32];
        let mut state = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut state, 1e-3);
        let expected = 0.5 - 1e-3 / (1.0 + EPS);
        assert!((p[0] - expected).abs() < 1e-9, "{p:?} vs {expected}");
    }

    #[test]
    fn zero_grad_keeps_params() {
        let mut p = [1.0f32, -2.0];
        let mut state = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut state, 1e-2);
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize (x - 3)^2; 2000 steps at lr 0.05 should land close.
        let mut p = [0.0f32];
        let mut state = AdamState::new(1);
        for _ in 0..2000 {
            let g = 2.0 * (p[0] - 3.0);
            adam_step(&mut p, &[g], &mut state, 0.05);
        }
        assert!((p[0] - 3.0).abs() < 1e-2, "{}", p[0]);
    }
}
