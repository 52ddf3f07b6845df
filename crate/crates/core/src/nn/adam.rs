//! Adam optimizer with bias correction, one state per model.

use super::tensor::Tensor;
use super::NnError;

/// Adam moment estimates for a fixed list of parameter tensors.
///
/// β1 = 0.9, β2 = 0.999, ε = 1e-8 (applied outside the square root). The
/// update order over tensors and elements is fixed, so identical gradient
/// streams reproduce identical parameters bit for bit.
#[derive(Debug, Clone)]
pub struct AdamState {
    step_count: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Zero-initialized moments shaped after the given parameter tensors.
    pub fn new(learning_rate: f64, params: &[&Tensor]) -> Self {
        AdamState {
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// One Adam update applied in place.
    ///
    /// Fails fast on any non-finite gradient so a numerical blow-up surfaces
    /// at the step that produced it rather than as corrupted parameters later.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), NnError> {
        if params.len() != self.first_moment.len() || grads.len() != self.first_moment.len() {
            return Err(NnError::OptimizerShapeMismatch {
                expected: self.first_moment.len(),
                got: params.len().max(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(NnError::ShapeMismatch {
                    context: "AdamState::apply",
                    expected: m.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient {
                    context: "AdamState::apply",
                });
            }
        }

        self.step_count += 1;
        // Fold both bias corrections into per-step scalars so the per-element
        // work is one sqrt, one division and three multiplies:
        //   θ -= (lr/bc1)·m / (√v/√bc2 + ε)
        // This pass over every parameter is the whole cost of a small-batch
        // step, so it is kept to zipped slices (no bounds checks) and the
        // minimum of divider-port work.
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let step_size = self.learning_rate / bc1;
        let inv_sqrt_bc2 = 1.0 / bc2.sqrt();
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - self.beta1, 1.0 - self.beta2);
        let eps = self.epsilon;
        for ((param, grad), (m_t, v_t)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            let n = grad.len();
            let p = &mut param.data_mut()[..n];
            let g = &grad.data()[..n];
            let m = &mut m_t.data_mut()[..n];
            let v = &mut v_t.data_mut()[..n];
            let chunks = n / 4;
            for i in 0..chunks {
                let s = 4 * i;
                for j in 0..4 {
                    m[s + j] = b1 * m[s + j] + c1 * g[s + j];
                    v[s + j] = b2 * v[s + j] + c2 * g[s + j] * g[s + j];
                }
                let denom = [
                    v[s].sqrt() * inv_sqrt_bc2 + eps,
                    v[s + 1].sqrt() * inv_sqrt_bc2 + eps,
                    v[s + 2].sqrt() * inv_sqrt_bc2 + eps,
                    v[s + 3].sqrt() * inv_sqrt_bc2 + eps,
                ];
                for j in 0..4 {
                    p[s + j] -= step_size * m[s + j] / denom[j];
                }
            }
            for i in 4 * chunks..n {
                m[i] = b1 * m[i] + c1 * g[i];
                v[i] = b2 * v[i] + c2 * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
