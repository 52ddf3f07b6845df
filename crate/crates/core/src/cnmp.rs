//! Conditional Neural Movement Primitive: an encoder maps (t, SM(t))
//! observation pairs into a mean-aggregated latent; a decoder conditioned on
//! that latent, a task context, and a query time emits a Gaussian (μ, σ) per
//! output dimension. One model learns one movement phase.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PhaseStats;
use crate::demo::{Trajectory, TrajectoryPoint};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::{gaussian_nll, gaussian_nll_grad, sigmoid, softplus, Activation, AdamState, Mlp, NnError, Tensor};

/// Hidden width of encoder and decoder layers.
pub const HIDDEN_WIDTH: usize = 128;
/// Dimension of the aggregated latent (the encoder's output width).
pub const LATENT_DIM: usize = 128;
/// Additive floor keeping σ strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Observation counts are drawn uniformly from 1..=MAX_OBSERVATIONS.
pub const MAX_OBSERVATIONS: usize = 5;
/// Adam learning rate for CNMP training.
pub const LEARNING_RATE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CnmpError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("observation set is empty")]
    EmptyObservations,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("context has {got} values, model expects {expected}")]
    ContextDimMismatch { expected: usize, got: usize },
    #[error("observation value has {got} dims, model expects {expected}")]
    ValueDimMismatch { expected: usize, got: usize },
    #[error("query time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("time grid must be strictly increasing within [0, 1]")]
    GridNotIncreasing,
    #[error(
        "non-finite loss at update {step} (training item {item}); aborting before parameters are poisoned"
    )]
    NonFiniteLoss { step: usize, item: usize },
}

/// What conditions the decoder besides observations, and how raw context
/// values map onto the network's [−1, 1] input scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ContextSpec {
    /// No context input (the pre-movement primitive).
    None,
    /// A single scalar with fixed min-max bounds known a priori.
    Scalar { lo: f64, hi: f64 },
    /// A learned latent vector with per-dimension bounds observed on the
    /// training corpus.
    Latent { lo: Vec<f64>, hi: Vec<f64> },
}

impl ContextSpec {
    pub fn dim(&self) -> usize {
        match self {
            ContextSpec::None => 0,
            ContextSpec::Scalar { .. } => 1,
            ContextSpec::Latent { lo, .. } => lo.len(),
        }
    }

    /// Min-max scales raw context values to [−1, 1] (values beyond the
    /// recorded bounds extrapolate rather than clamp).
    pub fn normalize(&self, raw: &[f64]) -> Result<Vec<f64>, CnmpError> {
        if raw.len() != self.dim() {
            return Err(CnmpError::ContextDimMismatch {
                expected: self.dim(),
                got: raw.len(),
            });
        }
        let scale = |v: f64, lo: f64, hi: f64| {
            if hi - lo < 1e-12 {
                0.0
            } else {
                2.0 * (v - lo) / (hi - lo) - 1.0
            }
        };
        Ok(match self {
            ContextSpec::None => Vec::new(),
            ContextSpec::Scalar { lo, hi } => vec![scale(raw[0], *lo, *hi)],
            ContextSpec::Latent { lo, hi } => raw
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| scale(*v, *l, *h))
                .collect(),
        })
    }
}

/// Architecture and normalization metadata persisted with checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnmpDescriptor {
    pub output_dim: usize,
    pub context: ContextSpec,
    pub value_stats: PhaseStats,
    /// Per-dimension clamp bounds for generated values (real units).
    pub value_lo: Vec<f64>,
    pub value_hi: Vec<f64>,
}

/// A Gaussian prediction in real (de-normalized) units.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A generated trajectory plus the per-point σ diagnostics.
#[derive(Debug, Clone)]
pub struct GeneratedTrajectory {
    pub trajectory: Trajectory,
    pub std: Vec<Vec<f64>>,
}

/// The movement primitive model.
#[derive(Debug, Clone)]
pub struct CnmpModel {
    encoder: Mlp,
    decoder: Mlp,
    descriptor: CnmpDescriptor,
}

impl CnmpModel {
    /// Fresh He-uniform initialized model. Encoder: 3 dense layers reading
    /// (t, SM(t)); decoder: 4 dense layers reading (latent, context, t) and
    /// emitting interleaved-free (μ‖σ_raw) heads.
    pub fn new(descriptor: CnmpDescriptor, rng: &mut impl Rng) -> Self {
        Self::with_widths(descriptor, HIDDEN_WIDTH, rng)
    }

    /// Same architecture shape with a custom layer width (used by the
    /// parameter-matched baseline).
    pub fn with_widths(descriptor: CnmpDescriptor, width: usize, rng: &mut impl Rng) -> Self {
        let out = descriptor.output_dim;
        let ctx = descriptor.context.dim();
        let encoder = Mlp::new(
            &[1 + out, width, width, width],
            &[Activation::Relu, Activation::Relu, Activation::Linear],
            rng,
        )
        .expect("encoder dims and activations are consistent");
        let decoder = Mlp::new(
            &[width + ctx + 1, width, width, width, 2 * out],
            &[
                Activation::Relu,
                Activation::Relu,
                Activation::Relu,
                Activation::Linear,
            ],
            rng,
        )
        .expect("decoder dims and activations are consistent");
        CnmpModel {
            encoder,
            decoder,
            descriptor,
        }
    }

    pub fn descriptor(&self) -> &CnmpDescriptor {
        &self.descriptor
    }

    pub fn output_dim(&self) -> usize {
        self.descriptor.output_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.layers().last().unwrap().output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    fn normalize_value(&self, v: &[f64]) -> Vec<f64> {
        let s = &self.descriptor.value_stats;
        v.iter()
            .zip(s.mean.iter().zip(&s.std))
            .map(|(x, (m, sd))| (x - m) / sd)
            .collect()
    }

    /// Normalized encoder input for one observation.
    fn encoder_input(&self, p: &TrajectoryPoint) -> Result<Vec<f64>, CnmpError> {
        if p.values.len() != self.descriptor.output_dim {
            return Err(CnmpError::ValueDimMismatch {
                expected: self.descriptor.output_dim,
                got: p.values.len(),
            });
        }
        let mut input = Vec::with_capacity(1 + p.values.len());
        input.push(p.t);
        input.extend(self.normalize_value(&p.values));
        Ok(input)
    }

    /// Mean-aggregates encoder outputs over the observation set.
    ///
    /// Observations are grouped by exact bit pattern and folded in a
    /// canonical order with weights count/n, so any permutation — and any
    /// uniform duplication — of the set produces a bit-identical latent.
    pub fn encode_observations(
        &self,
        observations: &[TrajectoryPoint],
    ) -> Result<Vec<f64>, CnmpError> {
        let inputs = observations
            .iter()
            .map(|p| self.encoder_input(p))
            .collect::<Result<Vec<_>, _>>()?;
        let groups = canonical_groups(&inputs)?;
        let mut latent = vec![0.0; self.latent_dim()];
        for (input, weight) in &groups {
            let encoded = self.encoder.infer(input)?;
            for (l, e) in latent.iter_mut().zip(&encoded) {
                *l += weight * e;
            }
        }
        Ok(latent)
    }

    fn decoder_input(
        &self,
        latent: &[f64],
        context_norm: &[f64],
        t: f64,
    ) -> Result<Vec<f64>, CnmpError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(CnmpError::TimeOutOfRange(t));
        }
        let mut input = Vec::with_capacity(latent.len() + context_norm.len() + 1);
        input.extend_from_slice(latent);
        input.extend_from_slice(context_norm);
        input.push(t);
        Ok(input)
    }

    /// Splits raw decoder output into normalized (μ, σ) with the softplus
    /// floor applied.
    fn split_heads(&self, raw: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let out = self.descriptor.output_dim;
        let mean = raw[..out].to_vec();
        let std = raw[out..].iter().map(|&x| softplus(x) + SIGMA_FLOOR).collect();
        (mean, std)
    }

    /// De-normalizes a prediction back to real units.
    fn denormalize(&self, mean_n: &[f64], std_n: &[f64]) -> QueryOutput {
        let s = &self.descriptor.value_stats;
        QueryOutput {
            mean: mean_n
                .iter()
                .zip(s.mean.iter().zip(&s.std))
                .map(|(m, (mu, sd))| m * sd + mu)
                .collect(),
            std: std_n
                .iter()
                .zip(&s.std)
                .map(|(sg, sd)| sg * sd)
                .collect(),
        }
    }

    /// Predicts (μ, σ) in real units for a query time, conditioned on
    /// observations and a raw (unnormalized) context.
    pub fn query(
        &self,
        observations: &[TrajectoryPoint],
        context: &[f64],
        t: f64,
    ) -> Result<QueryOutput, CnmpError> {
        let latent = self.encode_observations(observations)?;
        let context_norm = self.descriptor.context.normalize(context)?;
        let input = self.decoder_input(&latent, &context_norm, t)?;
        let raw = self.decoder.infer(&input)?;
        let (mean_n, std_n) = self.split_heads(&raw);
        Ok(self.denormalize(&mean_n, &std_n))
    }

    /// Normalized-space NLL of a real-unit target at time `t` — the same
    /// quantity the training loop minimizes, usable for validation curves.
    pub fn point_nll(
        &self,
        observations: &[TrajectoryPoint],
        context: &[f64],
        t: f64,
        target: &[f64],
    ) -> Result<f64, CnmpError> {
        let latent = self.encode_observations(observations)?;
        let context_norm = self.descriptor.context.normalize(context)?;
        let input = self.decoder_input(&latent, &context_norm, t)?;
        let raw = self.decoder.infer(&input)?;
        let (mean_n, std_n) = self.split_heads(&raw);
        let target_n = self.normalize_value(target);
        Ok(gaussian_nll(&mean_n, &std_n, &target_n)?)
    }

    /// Rolls the primitive out over a time grid: μ at every grid time
    /// (clamped to the declared value bounds), σ attached as diagnostics.
    pub fn generate_trajectory(
        &self,
        conditioning: &[TrajectoryPoint],
        context: &[f64],
        time_grid: &[f64],
    ) -> Result<GeneratedTrajectory, CnmpError> {
        if conditioning.is_empty() {
            return Err(CnmpError::EmptyObservations);
        }
        if time_grid.is_empty()
            || time_grid.windows(2).any(|w| w[1] <= w[0])
            || time_grid.iter().any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(CnmpError::GridNotIncreasing);
        }
        let latent = self.encode_observations(conditioning)?;
        let context_norm = self.descriptor.context.normalize(context)?;
        let mut points = Vec::with_capacity(time_grid.len());
        let mut stds = Vec::with_capacity(time_grid.len());
        for &t in time_grid {
            let input = self.decoder_input(&latent, &context_norm, t)?;
            let raw = self.decoder.infer(&input)?;
            let (mean_n, std_n) = self.split_heads(&raw);
            let mut out = self.denormalize(&mean_n, &std_n);
            for (v, (lo, hi)) in out
                .mean
                .iter_mut()
                .zip(self.descriptor.value_lo.iter().zip(&self.descriptor.value_hi))
            {
                *v = v.clamp(*lo, *hi);
            }
            points.push(TrajectoryPoint {
                t,
                values: out.mean,
            });
            stds.push(out.std);
        }
        Ok(GeneratedTrajectory {
            trajectory: Trajectory { points },
            std: stds,
        })
    }

    /// Uniform 200-point grid used for generation.
    pub fn default_time_grid() -> Vec<f64> {
        (0..200).map(|i| i as f64 / 199.0).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CnmpError> {
        let params: Vec<&Tensor> = self
            .encoder
            .params()
            .into_iter()
            .chain(self.decoder.params())
            .collect();
        checkpoint::save(path, &self.descriptor, &params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CnmpModel, CnmpError> {
        let (descriptor, tensors): (CnmpDescriptor, Vec<Tensor>) = checkpoint::load(path)?;
        // Reconstruct the architecture, then overwrite parameters; width is
        // recovered from the stored tensors so baseline variants round-trip.
        let width = tensors
            .first()
            .map(|t| t.shape()[0])
            .ok_or_else(|| CheckpointError::ModelMismatch("checkpoint has no tensors".into()))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut model = CnmpModel::with_widths(descriptor, width, &mut rng);
        let mut params = model.encoder.params_mut();
        params.extend(model.decoder.params_mut());
        if params.len() != tensors.len() {
            return Err(CheckpointError::ModelMismatch(format!(
                "checkpoint has {} tensors, architecture needs {}",
                tensors.len(),
                params.len()
            ))
            .into());
        }
        for (param, tensor) in params.into_iter().zip(tensors) {
            if param.shape() != tensor.shape() {
                return Err(CheckpointError::ModelMismatch(format!(
                    "tensor shape {:?} does not match architecture {:?}",
                    tensor.shape(),
                    param.shape()
                ))
                .into());
            }
            *param = tensor;
        }
        Ok(model)
    }
}

/// Groups identical inputs (by exact bit pattern), sorts groups canonically,
/// and returns (input, count/n) weights.
fn canonical_groups(inputs: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, f64)>, CnmpError> {
    if inputs.is_empty() {
        return Err(CnmpError::EmptyObservations);
    }
    let n = inputs.len() as f64;
    let mut keyed: Vec<(Vec<u64>, &Vec<f64>)> = inputs
        .iter()
        .map(|v| (v.iter().map(|x| x.to_bits()).collect(), v))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let mut groups: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut i = 0;
    while i < keyed.len() {
        let mut j = i + 1;
        while j < keyed.len() && keyed[j].0 == keyed[i].0 {
            j += 1;
        }
        groups.push((keyed[i].1.clone(), (j - i) as f64 / n));
        i = j;
    }
    Ok(groups)
}

/// One training example: a demonstration trajectory and its raw context.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub trajectory: Trajectory,
    pub context: Vec<f64>,
}

/// Owns a model plus optimizer state and performs single-sample updates.
#[derive(Debug)]
pub struct CnmpTrainer {
    model: CnmpModel,
    adam: AdamState,
    steps: usize,
}

/// A sampled training tuple in normalized network space.
pub(crate) struct TrainSample {
    item: usize,
    encoder_inputs: Vec<(Vec<f64>, f64)>,
    context_norm: Vec<f64>,
    target_t: f64,
    target_n: Vec<f64>,
}

impl CnmpTrainer {
    pub fn new(model: CnmpModel) -> Self {
        let params: Vec<&Tensor> = model
            .encoder
            .params()
            .into_iter()
            .chain(model.decoder.params())
            .collect();
        let adam = AdamState::new(LEARNING_RATE, &params);
        CnmpTrainer {
            model,
            adam,
            steps: 0,
        }
    }

    pub fn model(&self) -> &CnmpModel {
        &self.model
    }

    pub fn into_model(self) -> CnmpModel {
        self.model
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn draw_sample(
        &self,
        items: &[TrainingItem],
        rng: &mut impl Rng,
    ) -> Result<TrainSample, CnmpError> {
        if items.is_empty() {
            return Err(CnmpError::EmptyTrainingSet);
        }
        let item = rng.random_range(0..items.len());
        let traj = &items[item].trajectory;
        let n_points = traj.len();
        let n_obs = rng.random_range(1..=MAX_OBSERVATIONS);
        let mut inputs = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            let p = &traj.points[rng.random_range(0..n_points)];
            inputs.push(self.model.encoder_input(p)?);
        }
        let target = &traj.points[rng.random_range(0..n_points)];
        Ok(TrainSample {
            item,
            encoder_inputs: canonical_groups(&inputs)?,
            context_norm: self.model.descriptor.context.normalize(&items[item].context)?,
            target_t: target.t,
            target_n: self.model.normalize_value(&target.values),
        })
    }

    /// Samples one demonstration, 1–5 observation points and one target, and
    /// applies a single Adam update on the Gaussian NLL. Returns the loss.
    pub fn train_step(
        &mut self,
        items: &[TrainingItem],
        rng: &mut impl Rng,
    ) -> Result<f64, CnmpError> {
        let sample = self.draw_sample(items, rng)?;
        let (loss, grads) = self.model.loss_and_grads(&sample)?;
        if !loss.is_finite() {
            return Err(CnmpError::NonFiniteLoss {
                step: self.steps,
                item: sample.item,
            });
        }
        let mut params = self.model.encoder.params_mut();
        params.extend(self.model.decoder.params_mut());
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        self.adam.apply(&mut params, &grad_refs)?;
        self.steps += 1;
        Ok(loss)
    }
}

impl CnmpModel {
    /// Forward + backward for one sampled tuple; gradients are ordered
    /// encoder parameters then decoder parameters.
    fn loss_and_grads(&mut self, sample: &TrainSample) -> Result<(f64, Vec<Tensor>), CnmpError> {
        let out = self.descriptor.output_dim;
        // Encode each unique observation with a tape.
        let mut latent = vec![0.0; self.latent_dim()];
        for (input, weight) in &sample.encoder_inputs {
            let encoded = self.encoder.forward(input)?;
            for (l, e) in latent.iter_mut().zip(&encoded) {
                *l += weight * e;
            }
        }
        let input = self.decoder_input(&latent, &sample.context_norm, sample.target_t)?;
        let raw = self.decoder.forward(&input)?;
        let (mean_n, std_n) = self.split_heads(&raw);
        let loss = gaussian_nll(&mean_n, &std_n, &sample.target_n)?;

        let (d_mean, d_std) = gaussian_nll_grad(&mean_n, &std_n, &sample.target_n)?;
        // Chain σ = softplus(raw) + floor through dσ/draw = sigmoid(raw).
        let mut d_raw = vec![0.0; 2 * out];
        d_raw[..out].copy_from_slice(&d_mean);
        for k in 0..out {
            d_raw[out + k] = d_std[k] * sigmoid(raw[out + k]);
        }
        let (dec_grads, dec_input_grads) = self.decoder.backward(&[d_raw])?;
        let d_latent = &dec_input_grads[0][..self.latent_dim()];
        let enc_output_grads: Vec<Vec<f64>> = sample
            .encoder_inputs
            .iter()
            .map(|(_, weight)| d_latent.iter().map(|g| g * weight).collect())
            .collect();
        let (enc_grads, _) = self.encoder.backward(&enc_output_grads)?;

        let mut grads = enc_grads.tensors;
        grads.extend(dec_grads.tensors);
        Ok((loss, grads))
    }

    /// Loss only (no tapes) for the same sampled tuple; the finite-difference
    /// oracle perturbs parameters around this.
    fn sample_loss(&self, sample: &TrainSample) -> Result<f64, CnmpError> {
        let mut latent = vec![0.0; self.latent_dim()];
        for (input, weight) in &sample.encoder_inputs {
            let encoded = self.encoder.infer(input)?;
            for (l, e) in latent.iter_mut().zip(&encoded) {
                *l += weight * e;
            }
        }
        let input = self.decoder_input(&latent, &sample.context_norm, sample.target_t)?;
        let raw = self.decoder.infer(&input)?;
        let (mean_n, std_n) = self.split_heads(&raw);
        Ok(gaussian_nll(&mean_n, &std_n, &sample.target_n)?)
    }

    pub(crate) fn all_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut params = self.encoder.params_mut();
        params.extend(self.decoder.params_mut());
        params
    }

    /// Smallest |pre-activation| across both networks for a sampled tuple —
    /// the finite-difference oracle redraws samples that sit on ReLU kinks.
    pub(crate) fn min_relu_margin(&self, sample: &TrainSample) -> Result<f64, CnmpError> {
        let mut margin = f64::INFINITY;
        let mut latent = vec![0.0; self.latent_dim()];
        for (input, weight) in &sample.encoder_inputs {
            margin = margin.min(self.encoder.min_abs_relu_preactivation(input)?);
            let encoded = self.encoder.infer(input)?;
            for (l, e) in latent.iter_mut().zip(&encoded) {
                *l += weight * e;
            }
        }
        let input = self.decoder_input(&latent, &sample.context_norm, sample.target_t)?;
        margin = margin.min(self.decoder.min_abs_relu_preactivation(&input)?);
        Ok(margin)
    }
}

/// Builds a full-gradient finite-difference check for the CNMP loss on a toy
/// training set; returns (max relative error, parameter count checked).
pub fn gradient_check(seed: u64) -> Result<(f64, usize), CnmpError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // Tiny width keeps the FD sweep fast while covering both networks.
    let descriptor = CnmpDescriptor {
        output_dim: 2,
        context: ContextSpec::Scalar { lo: -1.0, hi: 1.0 },
        value_stats: PhaseStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        },
        value_lo: vec![-10.0, -10.0],
        value_hi: vec![10.0, 10.0],
    };
    let mut model = CnmpModel::with_widths(descriptor, 6, &mut rng);
    let items: Vec<TrainingItem> = (0..2)
        .map(|i| TrainingItem {
            trajectory: Trajectory {
                points: (0..5)
                    .map(|k| TrajectoryPoint {
                        t: k as f64 / 4.0,
                        values: vec![
                            (k as f64 * 0.61 + i as f64).sin(),
                            (k as f64 * 0.37 - i as f64).cos(),
                        ],
                    })
                    .collect(),
            },
            context: vec![if i == 0 { -0.8 } else { 0.8 }],
        })
        .collect();

    let trainer = CnmpTrainer::new(model.clone());
    // Redraw until the sample is clear of every ReLU kink: central
    // differences with h=1e-5 are meaningless on a kink.
    let mut sample = trainer.draw_sample(&items, &mut rng)?;
    while model.min_relu_margin(&sample)? < 1e-3 {
        sample = trainer.draw_sample(&items, &mut rng)?;
    }

    let (_, grads) = model.loss_and_grads(&sample)?;
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (pi, grad) in grads.iter().enumerate() {
        for k in 0..grad.len() {
            let original = {
                let mut params = model.all_params_mut();
                let v = params[pi].data()[k];
                params[pi].data_mut()[k] = v + h;
                v
            };
            let up = model.sample_loss(&sample)?;
            {
                let mut params = model.all_params_mut();
                params[pi].data_mut()[k] = original - h;
            }
            let down = model.sample_loss(&sample)?;
            {
                let mut params = model.all_params_mut();
                params[pi].data_mut()[k] = original;
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.data()[k];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok((max_rel, checked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_descriptor(output_dim: usize, context: ContextSpec) -> CnmpDescriptor {
        CnmpDescriptor {
            output_dim,
            context,
            value_stats: PhaseStats {
                mean: vec![0.0; output_dim],
                std: vec![1.0; output_dim],
            },
            value_lo: vec![-1e9; output_dim],
            value_hi: vec![1e9; output_dim],
        }
    }

    fn test_model(seed: u64) -> CnmpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CnmpModel::new(
            identity_descriptor(3, ContextSpec::Scalar { lo: -0.03, hi: 0.03 }),
            &mut rng,
        )
    }

    fn obs(t: f64, a: f64, b: f64, c: f64) -> TrajectoryPoint {
        TrajectoryPoint {
            t,
            values: vec![a, b, c],
        }
    }

    #[test]
    fn zeroed_final_decoder_layer_pins_mean_and_std() {
        let mut model = test_model(1);
        let n = model.decoder.layers().len();
        {
            let layers = model.decoder.layers_mut();
            layers[n - 1].weights.fill_zero();
            layers[n - 1].bias.fill_zero();
        }
        let out = model
            .query(&[obs(0.3, 0.1, -0.2, 0.05)], &[0.01], 0.7)
            .unwrap();
        let expected_std = softplus(0.0) + SIGMA_FLOOR;
        for k in 0..3 {
            assert_eq!(out.mean[k], 0.0);
            assert!((out.std[k] - expected_std).abs() < 1e-15);
        }
    }

    #[test]
    fn denormalization_maps_zero_head_to_dataset_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut descriptor = identity_descriptor(3, ContextSpec::None);
        descriptor.value_stats = PhaseStats {
            mean: vec![1.0, -2.0, 0.5],
            std: vec![2.0, 4.0, 0.5],
        };
        let mut model = CnmpModel::new(descriptor, &mut rng);
        let n = model.decoder.layers().len();
        {
            let layers = model.decoder.layers_mut();
            layers[n - 1].weights.fill_zero();
            layers[n - 1].bias.fill_zero();
        }
        let out = model.query(&[obs(0.0, 1.0, -2.0, 0.5)], &[], 0.5).unwrap();
        let floor = softplus(0.0) + SIGMA_FLOOR;
        assert_eq!(out.mean, vec![1.0, -2.0, 0.5]);
        for (s, sd) in out.std.iter().zip([2.0, 4.0, 0.5]) {
            assert!((s - floor * sd).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_is_permutation_and_duplication_invariant_bitwise() {
        let model = test_model(3);
        let base = vec![
            obs(0.0, 0.01, -0.02, 0.0),
            obs(0.25, 0.03, 0.01, 0.08),
            obs(0.5, -0.01, 0.04, 0.02),
            obs(0.75, 0.0, 0.0, 0.05),
        ];
        let reference = model.encode_observations(&base).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let mut shuffled = base.clone();
            shuffled.shuffle(&mut rng);
            let latent = model.encode_observations(&shuffled).unwrap();
            assert!(bits_equal(&reference, &latent));
        }
        for copies in [2usize, 3, 5] {
            let mut duplicated = Vec::new();
            for p in &base {
                duplicated.extend(std::iter::repeat_n(p.clone(), copies));
            }
            duplicated.shuffle(&mut rng);
            let latent = model.encode_observations(&duplicated).unwrap();
            assert!(bits_equal(&reference, &latent), "copies {copies}");
        }
    }

    fn bits_equal(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn single_observation_latent_matches_its_duplicates() {
        let model = test_model(4);
        let single = model.encode_observations(&[obs(0.4, 0.0, 0.01, 0.02)]).unwrap();
        let tripled = model
            .encode_observations(&[
                obs(0.4, 0.0, 0.01, 0.02),
                obs(0.4, 0.0, 0.01, 0.02),
                obs(0.4, 0.0, 0.01, 0.02),
            ])
            .unwrap();
        assert!(bits_equal(&single, &tripled));
    }

    #[test]
    fn different_observations_give_different_latents() {
        let model = test_model(5);
        let a = model.encode_observations(&[obs(0.1, 0.0, 0.0, 0.0)]).unwrap();
        let b = model.encode_observations(&[obs(0.9, 0.02, -0.01, 0.06)]).unwrap();
        assert!(!bits_equal(&a, &b));
    }

    #[test]
    fn contract_violations_are_rejected() {
        let model = test_model(6);
        assert!(matches!(
            model.encode_observations(&[]),
            Err(CnmpError::EmptyObservations)
        ));
        assert!(matches!(
            model.query(&[obs(0.0, 0.0, 0.0, 0.0)], &[0.1, 0.2], 0.5),
            Err(CnmpError::ContextDimMismatch { expected: 1, got: 2 })
        ));
        assert!(matches!(
            model.query(&[obs(0.0, 0.0, 0.0, 0.0)], &[0.0], 1.5),
            Err(CnmpError::TimeOutOfRange(_))
        ));
        let bad = TrajectoryPoint {
            t: 0.0,
            values: vec![0.0; 2],
        };
        assert!(matches!(
            model.encode_observations(&[bad]),
            Err(CnmpError::ValueDimMismatch { expected: 3, got: 2 })
        ));
    }

    fn toy_items() -> Vec<TrainingItem> {
        (0..3)
            .map(|i| TrainingItem {
                trajectory: Trajectory {
                    points: (0..20)
                        .map(|k| {
                            let t = k as f64 / 19.0;
                            TrajectoryPoint {
                                t,
                                values: vec![t * 0.02, (i as f64 - 1.0) * 0.01, 0.01],
                            }
                        })
                        .collect(),
                },
                context: vec![(i as f64 - 1.0) * 0.03],
            })
            .collect()
    }

    #[test]
    fn training_steps_are_deterministic_under_seed() {
        let losses = |seed: u64| -> Vec<f64> {
            let mut trainer = CnmpTrainer::new(test_model(seed));
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            (0..5)
                .map(|_| trainer.train_step(&toy_items(), &mut rng).unwrap())
                .collect()
        };
        let a = losses(7);
        let b = losses(7);
        assert_eq!(a, b);
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn training_updates_parameters() {
        let mut trainer = CnmpTrainer::new(test_model(8));
        let before: Vec<Tensor> = trainer
            .model
            .encoder
            .params()
            .into_iter()
            .chain(trainer.model.decoder.params())
            .cloned()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        trainer.train_step(&toy_items(), &mut rng).unwrap();
        let after: Vec<Tensor> = trainer
            .model
            .encoder
            .params()
            .into_iter()
            .chain(trainer.model.decoder.params())
            .cloned()
            .collect();
        assert!(before.iter().zip(&after).any(|(x, y)| x != y));
        assert_eq!(trainer.steps(), 1);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let mut trainer = CnmpTrainer::new(test_model(9));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            trainer.train_step(&[], &mut rng),
            Err(CnmpError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn generation_follows_the_grid_and_clamps_to_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut descriptor = identity_descriptor(3, ContextSpec::None);
        descriptor.value_lo = vec![-0.001; 3];
        descriptor.value_hi = vec![0.001; 3];
        let model = CnmpModel::new(descriptor, &mut rng);
        let grid = CnmpModel::default_time_grid();
        let gen = model
            .generate_trajectory(&[obs(0.0, 0.0, 0.0, 0.0)], &[], &grid)
            .unwrap();
        assert_eq!(gen.trajectory.len(), 200);
        assert_eq!(gen.std.len(), 200);
        assert!(gen
            .trajectory
            .points
            .windows(2)
            .all(|w| w[1].t > w[0].t));
        for p in &gen.trajectory.points {
            for v in &p.values {
                assert!(v.abs() <= 0.001);
            }
        }
        for s in &gen.std {
            assert!(s.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn bad_grids_are_rejected() {
        let model = test_model(11);
        let o = [obs(0.0, 0.0, 0.0, 0.0)];
        for grid in [vec![], vec![0.2, 0.2], vec![0.5, 0.4], vec![0.9, 1.1]] {
            assert!(matches!(
                model.generate_trajectory(&o, &[0.0], &grid),
                Err(CnmpError::GridNotIncreasing)
            ));
        }
    }

    #[test]
    fn sigma_stays_positive_across_random_queries() {
        let model = test_model(12);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let o = obs(
                rng.random_range(0.0..1.0),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.0..0.2),
            );
            let out = model
                .query(&[o], &[rng.random_range(-0.03..0.03)], rng.random_range(0.0..1.0))
                .unwrap();
            assert!(out.std.iter().all(|s| *s > 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = test_model(13);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cor.cnmp");
        model.save(&path).unwrap();
        let loaded = CnmpModel::load(&path).unwrap();
        assert_eq!(loaded.descriptor, model.descriptor);
        let probe = [obs(0.31, 0.012, -0.004, 0.07)];
        let a = model.query(&probe, &[0.02], 0.66).unwrap();
        let b = loaded.query(&probe, &[0.02], 0.66).unwrap();
        assert!(bits_equal(&a.mean, &b.mean));
        assert!(bits_equal(&a.std, &b.std));
    }

    #[test]
    fn context_normalization_maps_bounds_to_unit_interval() {
        let spec = ContextSpec::Scalar { lo: -0.03, hi: 0.03 };
        assert_eq!(spec.normalize(&[-0.03]).unwrap(), vec![-1.0]);
        assert_eq!(spec.normalize(&[0.03]).unwrap(), vec![1.0]);
        assert_eq!(spec.normalize(&[0.0]).unwrap(), vec![0.0]);
        let latent = ContextSpec::Latent {
            lo: vec![0.0, -2.0],
            hi: vec![1.0, 2.0],
        };
        assert_eq!(latent.normalize(&[0.5, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(latent.dim(), 2);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let (max_rel, checked) = gradient_check(42).unwrap();
        assert!(checked > 100);
        assert!(max_rel < 1e-4, "max relative error {max_rel:.3e}");
    }

    #[test]
    #[ignore]
    fn step_phase_timing() {
        let items: Vec<TrainingItem> = (0..10)
            .map(|i| {
                let points = (0..200)
                    .map(|k| obs(k as f64 / 199.0, i as f64 * 0.01, k as f64 * 1e-3, 0.02))
                    .collect();
                TrainingItem {
                    trajectory: crate::demo::Trajectory { points },
                    context: vec![i as f64 * 0.005 - 0.025],
                }
            })
            .collect();
        let mut trainer = CnmpTrainer::new(test_model(0));
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t0 = std::time::Instant::now();
        let samples: Vec<TrainSample> = (0..n)
            .map(|_| trainer.draw_sample(&items, &mut rng).unwrap())
            .collect();
        let t_draw = t0.elapsed().as_secs_f64();
        let t0 = std::time::Instant::now();
        let mut acc = 0.0;
        for s in &samples {
            acc += trainer.model.sample_loss(s).unwrap();
        }
        let t_fwd = t0.elapsed().as_secs_f64();
        let t0 = std::time::Instant::now();
        for s in &samples {
            acc += trainer.model.loss_and_grads(s).unwrap().0;
        }
        let t_bwd = t0.elapsed().as_secs_f64();
        let t0 = std::time::Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..n {
            acc += trainer.train_step(&items, &mut rng).unwrap();
        }
        let t_full = t0.elapsed().as_secs_f64();
        let us = 1e6 / n as f64;
        println!(
            "draw {:.0}us fwd {:.0}us fwd+bwd {:.0}us full {:.0}us (acc {acc:.1})",
            t_draw * us,
            t_fwd * us,
            t_bwd * us,
            t_full * us
        );
    }
}
