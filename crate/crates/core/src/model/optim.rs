use serde::{Deserialize, Serialize};

use super::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Linear warmup from 0 to `learning_rate`, constant afterwards.
    pub warmup_steps: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            warmup_steps: 200,
        }
    }
}

impl OptimizerSpec {
    /// Learning rate for the update numbered `step` (0-based).
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// Adam moments over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub spec: OptimizerSpec,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: usize,
}

impl Adam {
    pub fn new(spec: OptimizerSpec, num_params: usize) -> Self {
        Adam {
            spec,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            steps: 0,
        }
    }

    pub fn update(&mut self, params: &mut Parameters, grads: &Parameters) {
        let lr = self.spec.learning_rate_at(self.steps);
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps) = (self.spec.beta1, self.spec.beta2, self.spec.epsilon);
        let correction1 = 1.0 - b1.powi(t);
        let correction2 = 1.0 - b2.powi(t);

        let mut i = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        params.zip_apply(grads, |p, g| {
            first[i] = b1 * first[i] + (1.0 - b1) * g;
            second[i] = b2 * second[i] + (1.0 - b2) * g * g;
            let m_hat = first[i] / correction1;
            let v_hat = second[i] / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_constant() {
        let spec = OptimizerSpec::default();
        assert!((spec.learning_rate_at(0) - 3e-4 / 200.0).abs() < 1e-18);
        assert!((spec.learning_rate_at(99) - 1.5e-4).abs() < 1e-18);
        assert_eq!(spec.learning_rate_at(199), 3e-4);
        assert_eq!(spec.learning_rate_at(5000), 3e-4);
    }

    #[test]
    fn zero_warmup_uses_full_rate() {
        let spec = OptimizerSpec {
            warmup_steps: 0,
            ..OptimizerSpec::default()
        };
        assert_eq!(spec.learning_rate_at(0), 3e-4);
    }
}
