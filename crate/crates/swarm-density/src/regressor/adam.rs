//! ADAM optimizer state over the flattened parameter vector.

use super::{NetError, RegressorParams};

/// First/second moment accumulators plus the step counter. Moments are kept
/// in the same fixed tensor order as [`RegressorParams::to_flat`], so one
/// state must only ever be applied to the parameter set it was created for.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    pub fn new(param_count: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected update in place:
    /// m/v are exponential moving averages of the gradient and its square,
    /// the step is lr * m_hat / (sqrt(v_hat) + epsilon).
    pub fn step(
        &mut self,
        params: &mut RegressorParams,
        grads: &RegressorParams,
        lr: f64,
    ) -> Result<(), NetError> {
        let mut flat = params.to_flat();
        let grad_flat = grads.to_flat();
        if flat.len() != self.m.len() || grad_flat.len() != self.m.len() {
            return Err(NetError::ShapeMismatch(format!(
                "optimizer state holds {} parameters, update got {} params / {} grads",
                self.m.len(),
                flat.len(),
                grad_flat.len()
            )));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in flat
            .iter_mut()
            .zip(&grad_flat)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / b1t;
            let v_hat = *v / b2t;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        params.set_flat(&flat)?;
        Ok(())
    }
}
