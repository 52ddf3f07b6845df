//! Minimal dense / convolutional network substrate with reverse-mode gradients.
//!
//! Everything is `f64` and deterministic: parameter initialisation draws from a
//! caller-provided seeded RNG and every forward/backward pass iterates in a
//! fixed order, so identical seeds reproduce identical bits.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod tensor;

pub use adam::AdamState;
pub use conv::{Conv2dLayer, ConvTranspose2dLayer};
pub use dense::{DenseLayer, Mlp};
pub use loss::{gaussian_nll, gaussian_nll_grad, mse, mse_grad};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors surfaced by network construction, passes and optimisation.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("backward called without a pending forward pass")]
    NoForwardPass,
    #[error("backward expected {expected} upstream gradients, got {got}")]
    GradientCountMismatch { expected: usize, got: usize },
    #[error("non-finite gradient encountered in {context}")]
    NonFiniteGradient { context: &'static str },
    #[error("standard deviation must be strictly positive, got {value}")]
    NonPositiveStd { value: f64 },
    #[error("empty input where at least one element is required: {context}")]
    EmptyInput { context: &'static str },
    #[error("optimizer state tracks {expected} parameter tensors, got {got}")]
    OptimizerShapeMismatch { expected: usize, got: usize },
}

/// Pointwise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    /// Applies the nonlinearity to one pre-activation value.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative with respect to the pre-activation value.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
