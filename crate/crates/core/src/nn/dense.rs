//! Fully-connected layers and a small multi-layer perceptron.
//!
//! `Mlp::forward` records a tape per pass; `Mlp::backward` consumes all
//! pending tapes in order and accumulates parameter gradients across them,
//! which is how the mean-aggregated encoder backpropagates through several
//! observation passes at once.

use rand::Rng;

use super::tensor::Tensor;
use super::{Activation, NnError};

/// Dot product accumulated in four independent lanes (fixed association
/// order, identical on every call) so the matvec reduction vectorizes and
/// overlaps add latency.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        for j in 0..4 {
            lanes[j] += xa[j] * xb[j];
        }
    }
    let mut acc = (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        acc += xa * xb;
    }
    acc
}

/// One affine layer `activation(W·x + b)` with weights stored `[out × in]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    /// Fresh layer with He-style fan-in uniform initialization (±√(6/fan_in))
    /// and zero bias, drawn from the caller's seeded RNG.
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(input_dim > 0 && output_dim > 0, "layer dims must be positive");
        let limit = (6.0 / input_dim as f64).sqrt();
        let mut weights = Tensor::zeros(&[output_dim, input_dim]);
        for v in weights.data_mut() {
            *v = rng.random_range(-limit..limit);
        }
        DenseLayer {
            weights,
            bias: Tensor::zeros(&[output_dim]),
            activation,
        }
    }

    /// Wraps explicit parameters, validating shape consistency.
    pub fn from_params(
        weights: Tensor,
        bias: Tensor,
        activation: Activation,
    ) -> Result<Self, NnError> {
        let ok = weights.shape().len() == 2
            && bias.shape().len() == 1
            && weights.shape()[0] == bias.shape()[0]
            && weights.shape()[1] > 0;
        if !ok {
            return Err(NnError::ShapeMismatch {
                context: "DenseLayer::from_params",
                expected: weights.shape().to_vec(),
                got: bias.shape().to_vec(),
            });
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Returns (post-activation, pre-activation).
    pub(crate) fn forward_full(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                context: "dense forward input",
                expected: vec![self.input_dim()],
                got: vec![input.len()],
            });
        }
        let mut pre = Vec::with_capacity(self.output_dim());
        for (row, b) in self
            .weights
            .data()
            .chunks_exact(self.input_dim())
            .zip(self.bias.data())
        {
            pre.push(dot(row, input) + b);
        }
        let post = pre.iter().map(|&p| self.activation.apply(p)).collect();
        Ok((post, pre))
    }

    /// Applies the layer without recording anything.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.forward_full(input).map(|(post, _)| post)
    }
}

/// One recorded forward pass: the input seen by each layer plus each layer's
/// pre-activation vector.
#[derive(Debug, Clone)]
struct Tape {
    layer_inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

/// Parameter gradients in `Mlp::params()` order (weights, bias per layer).
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub tensors: Vec<Tensor>,
}

/// A stack of dense layers with tape-based reverse-mode differentiation.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    tapes: Vec<Tape>,
}

impl Mlp {
    /// Builds a stack from `dims = [in, h1, …, out]` and one activation per
    /// layer, initialized from the caller's seeded RNG.
    pub fn new(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(NnError::ShapeMismatch {
                context: "Mlp::new",
                expected: vec![dims.len().saturating_sub(1)],
                got: vec![activations.len()],
            });
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(pair, &act)| DenseLayer::new(pair[0], pair[1], act, rng))
            .collect();
        Ok(Mlp {
            layers,
            tapes: Vec::new(),
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self, NnError> {
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NnError::ShapeMismatch {
                    context: "Mlp::from_layers",
                    expected: vec![pair[0].output_dim()],
                    got: vec![pair[1].input_dim()],
                });
            }
        }
        if layers.is_empty() {
            return Err(NnError::EmptyInput {
                context: "Mlp::from_layers",
            });
        }
        Ok(Mlp {
            layers,
            tapes: Vec::new(),
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable layer access (e.g. checkpoint restore). Pending tapes are
    /// dropped because they describe passes through the old parameters.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.tapes.clear();
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Parameter tensors in declaration order (weights, bias per layer).
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    /// Forward pass without recording (for frozen models).
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut current = input.to_vec();
        for layer in &self.layers {
            current = layer.forward(&current)?;
        }
        Ok(current)
    }

    /// Smallest |pre-activation| over all ReLU units for one input — a
    /// finite-difference probe this close to a kink is unreliable and should
    /// be redrawn.
    pub(crate) fn min_abs_relu_preactivation(&self, input: &[f64]) -> Result<f64, NnError> {
        let mut current = input.to_vec();
        let mut min = f64::INFINITY;
        for layer in &self.layers {
            let (post, pre) = layer.forward_full(&current)?;
            if layer.activation == Activation::Relu {
                for &p in &pre {
                    min = min.min(p.abs());
                }
            }
            current = post;
        }
        Ok(min)
    }

    /// Forward pass that records a tape for a later [`Mlp::backward`].
    pub fn forward(&mut self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = input.to_vec();
        for layer in &self.layers {
            let (post, pre) = layer.forward_full(&current)?;
            layer_inputs.push(current);
            pre_activations.push(pre);
            current = post;
        }
        self.tapes.push(Tape {
            layer_inputs,
            pre_activations,
        });
        Ok(current)
    }

    /// Number of forward passes awaiting a backward call.
    pub fn pending_passes(&self) -> usize {
        self.tapes.len()
    }

    pub fn clear_tapes(&mut self) {
        self.tapes.clear();
    }

    /// Consumes all pending tapes (in forward order), accumulating parameter
    /// gradients across them. `output_grads[i]` is the loss gradient with
    /// respect to the i-th pass's output; the matching input gradients are
    /// returned in the same order.
    pub fn backward(
        &mut self,
        output_grads: &[Vec<f64>],
    ) -> Result<(MlpGradients, Vec<Vec<f64>>), NnError> {
        if self.tapes.is_empty() {
            return Err(NnError::NoForwardPass);
        }
        if output_grads.len() != self.tapes.len() {
            return Err(NnError::GradientCountMismatch {
                expected: self.tapes.len(),
                got: output_grads.len(),
            });
        }
        let mut grads: Vec<Tensor> = self
            .layers
            .iter()
            .flat_map(|l| [Tensor::zeros(l.weights.shape()), Tensor::zeros(l.bias.shape())])
            .collect();
        let mut input_grads = Vec::with_capacity(output_grads.len());

        let tapes = std::mem::take(&mut self.tapes);
        for (tape, out_grad) in tapes.iter().zip(output_grads) {
            if out_grad.len() != self.output_dim() {
                return Err(NnError::ShapeMismatch {
                    context: "Mlp::backward output grad",
                    expected: vec![self.output_dim()],
                    got: vec![out_grad.len()],
                });
            }
            // Gradient w.r.t. the current layer's post-activation output.
            let mut grad = out_grad.clone();
            for (idx, layer) in self.layers.iter().enumerate().rev() {
                let pre = &tape.pre_activations[idx];
                let input = &tape.layer_inputs[idx];
                let in_dim = layer.input_dim();
                // Through the nonlinearity.
                let delta: Vec<f64> = grad
                    .iter()
                    .zip(pre)
                    .map(|(g, &p)| g * layer.activation.derivative(p))
                    .collect();
                {
                    let gw = grads[2 * idx].data_mut();
                    for (o, &d) in delta.iter().enumerate() {
                        let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                        for (slot, &x) in row.iter_mut().zip(input) {
                            *slot += d * x;
                        }
                    }
                    let gb = grads[2 * idx + 1].data_mut();
                    for (slot, &d) in gb.iter_mut().zip(&delta) {
                        *slot += d;
                    }
                }
                // Gradient w.r.t. this layer's input, i.e. Wᵀ·delta.
                let mut prev = vec![0.0; in_dim];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights.data()[o * in_dim..(o + 1) * in_dim];
                    for (slot, &w) in prev.iter_mut().zip(row) {
                        *slot += d * w;
                    }
                }
                grad = prev;
            }
            input_grads.push(grad);
        }
        Ok((MlpGradients { tensors: grads }, input_grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftest::naive_matvec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(weights: (usize, usize, Vec<f64>), bias: Vec<f64>, act: Activation) -> DenseLayer {
        DenseLayer::from_params(
            Tensor::from_vec(&[weights.0, weights.1], weights.2).unwrap(),
            Tensor::from_vec(&[bias.len()], bias).unwrap(),
            act,
        )
        .unwrap()
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let l = layer(
            (2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            vec![0.0, 0.0],
            Activation::Linear,
        );
        assert_eq!(l.forward(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let l = layer((1, 3, vec![0.0; 3]), vec![0.5], Activation::Linear);
        assert_eq!(l.forward(&[7.3, -2.2, 0.1]).unwrap(), vec![0.5]);
        assert_eq!(l.forward(&[0.0, 0.0, 0.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn random_layer_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = DenseLayer::new(3, 4, Activation::Linear, &mut rng);
        let input = [0.37, -1.2, 2.05];
        let rows: Vec<Vec<f64>> = l
            .weights
            .data()
            .chunks_exact(3)
            .map(|r| r.to_vec())
            .collect();
        let mut expected = naive_matvec(&rows, &input);
        for (e, b) in expected.iter_mut().zip(l.bias.data()) {
            *e += b;
        }
        for (got, want) in l.forward(&input).unwrap().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn input_length_mismatch_is_an_error() {
        let l = layer((2, 2, vec![1.0; 4]), vec![0.0, 0.0], Activation::Linear);
        assert!(matches!(
            l.forward(&[1.0]),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new(&[2, 2], &[Activation::Linear], &mut rng).unwrap();
        assert!(matches!(
            mlp.backward(&[vec![1.0, 1.0]]),
            Err(NnError::NoForwardPass)
        ));
    }

    #[test]
    fn backward_gradient_count_must_match_pending_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new(&[2, 2], &[Activation::Linear], &mut rng).unwrap();
        mlp.forward(&[1.0, 2.0]).unwrap();
        mlp.forward(&[0.5, -1.0]).unwrap();
        assert!(matches!(
            mlp.backward(&[vec![1.0, 1.0]]),
            Err(NnError::GradientCountMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn single_linear_layer_mse_gradient_is_analytic() {
        // For scalar output MSE, dL/dW = 2(pred − target)·inputᵀ.
        let mut mlp = Mlp::from_layers(vec![layer(
            (1, 3, vec![0.2, -0.4, 0.9]),
            vec![0.1],
            Activation::Linear,
        )])
        .unwrap();
        let input = [1.5, -2.0, 0.25];
        let target = 0.7;
        let pred = mlp.forward(&input).unwrap()[0];
        let (grads, _) = mlp
            .backward(&[vec![2.0 * (pred - target)]])
            .unwrap();
        for (g, x) in grads.tensors[0].data().iter().zip(&input) {
            assert!((g - 2.0 * (pred - target) * x).abs() < 1e-14);
        }
        assert!((grads.tensors[1].data()[0] - 2.0 * (pred - target)).abs() < 1e-14);
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(
            &[3, 8, 2],
            &[Activation::Relu, Activation::Linear],
            &mut rng,
        )
        .unwrap();
        mlp.forward(&[0.3, -0.6, 1.1]).unwrap();
        let (grads, input_grads) = mlp.backward(&[vec![0.0, 0.0]]).unwrap();
        assert!(grads
            .tensors
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(input_grads[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multi_pass_backward_accumulates_like_separate_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mlp = Mlp::new(
            &[2, 6, 2],
            &[Activation::Relu, Activation::Linear],
            &mut rng,
        )
        .unwrap();
        let a = [0.4, -0.9];
        let b = [-1.3, 0.2];
        let ga = vec![0.7, -0.1];
        let gb = vec![-0.3, 0.8];

        mlp.forward(&a).unwrap();
        mlp.forward(&b).unwrap();
        let (combined, _) = mlp.backward(&[ga.clone(), gb.clone()]).unwrap();

        mlp.forward(&a).unwrap();
        let (only_a, _) = mlp.backward(&[ga]).unwrap();
        mlp.forward(&b).unwrap();
        let (only_b, _) = mlp.backward(&[gb]).unwrap();

        for ((c, x), y) in combined
            .tensors
            .iter()
            .zip(&only_a.tensors)
            .zip(&only_b.tensors)
        {
            for ((cv, xv), yv) in c.data().iter().zip(x.data()).zip(y.data()) {
                assert_eq!(*cv, xv + yv);
            }
        }
    }

    #[test]
    fn seeded_initialization_is_deterministic() {
        let dims = [4, 16, 3];
        let acts = [Activation::Relu, Activation::Linear];
        let a = Mlp::new(&dims, &acts, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = Mlp::new(&dims, &acts, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        for (pa, pb) in a.params().into_iter().zip(b.params()) {
            assert_eq!(pa, pb);
        }
        let c = Mlp::new(&dims, &acts, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
        assert!(a
            .params()
            .into_iter()
            .zip(c.params())
            .any(|(pa, pc)| pa != pc));
    }
}
