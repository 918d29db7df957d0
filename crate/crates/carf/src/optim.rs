//! Adaptive-moment parameter updates.

/// First/second moment accumulators for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Fixed optimizer constants (bias-corrected, baseline convention).
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradient contained a non-finite entry; the whole step was skipped.
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update step. Moments always decay; parameters move only when the
    /// gradient is finite everywhere (a poisoned step is skipped whole so a
    /// single NaN cannot corrupt the trajectory).
    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) -> StepOutcome {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        if grad.iter().any(|g| !g.is_finite()) {
            return StepOutcome::SkippedNonFinite;
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] as f64;
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = (params[i] as f64 - lr * m_hat / (v_hat.sqrt() + EPS)) as f32;
        }
        StepOutcome::Applied
    }

    /// Scalar variant for f64-held parameters (quantizer state values).
    pub fn step_scalar(&mut self, param: &mut f64, grad: f64, lr: f64) -> StepOutcome {
        assert_eq!(self.m.len(), 1);
        if !grad.is_finite() {
            return StepOutcome::SkippedNonFinite;
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        self.m[0] = BETA1 * self.m[0] + (1.0 - BETA1) * grad;
        self.v[0] = BETA2 * self.v[0] + (1.0 - BETA2) * grad * grad;
        let m_hat = self.m[0] / bc1;
        let v_hat = self.v[0] / bc2;
        *param -= lr * m_hat / (v_hat.sqrt() + EPS);
        StepOutcome::Applied
    }
}
