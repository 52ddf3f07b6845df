//! Convolutional autoencoder that compresses 64×64 scene renders into an
//! 8-dimensional latent code.
//!
//! The latent replaces direct state readouts (corridor offset, object
//! position) as the conditioning context for the corrective and
//! post-movement primitives when only camera images of the scene are
//! available. The encoder halves the spatial resolution three times
//! (64 → 32 → 16 → 8) with 3×3 same-padding convolutions; the decoder
//! mirrors it with transposed convolutions and a sigmoid output head so
//! reconstructions stay in the render's [0,1] gray range.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnmp::ContextSpec;
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::conv::{Conv2dLayer, ConvTranspose2dLayer};
use crate::nn::{mse, mse_grad, Activation, AdamState, Mlp, NnError, Tensor};
use crate::sim::{SceneImage, IMAGE_SIDE};

/// Dimension of the learned image context.
pub const AE_LATENT_DIM: usize = 8;
/// Reconstruction training runs exactly this many epochs.
pub const AE_EPOCHS: usize = 70;
/// Adam learning rate for reconstruction training.
pub const AE_LEARNING_RATE: f64 = 3e-4;
/// Mini-batch size for reconstruction training.
pub const AE_BATCH_SIZE: usize = 16;

/// Encoder filter counts, one per convolution.
const ENC_FILTERS: [usize; 5] = [32, 32, 64, 64, 64];
/// Encoder strides; three stride-2 stages take 64×64 down to 8×8.
const ENC_STRIDES: [usize; 5] = [2, 1, 2, 1, 2];
/// Spatial side of the last encoder feature map.
const BOTTLENECK_SIDE: usize = 8;
/// Flattened size of the last encoder feature map (64·8·8).
const FLAT_DIM: usize = ENC_FILTERS[4] * BOTTLENECK_SIDE * BOTTLENECK_SIDE;

#[derive(Debug, Error)]
pub enum AeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("image has {got} pixels, expected {expected}")]
    ImageSize { expected: usize, got: usize },
    #[error("autoencoder training needs at least one train and one test image")]
    EmptyTrainingSet,
    #[error("non-finite reconstruction loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

/// Checkpoint metadata: per-dimension bounds of the training-set latents,
/// used to min-max normalize latents when they serve as CNMP contexts.
/// Zero until [`train_ae`] has run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeDescriptor {
    pub latent_lo: Vec<f64>,
    pub latent_hi: Vec<f64>,
}

impl Default for AeDescriptor {
    fn default() -> Self {
        AeDescriptor {
            latent_lo: vec![0.0; AE_LATENT_DIM],
            latent_hi: vec![0.0; AE_LATENT_DIM],
        }
    }
}

/// Per-epoch mean reconstruction errors over the train and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct AeTrainHistory {
    pub train_mse: Vec<f64>,
    pub test_mse: Vec<f64>,
}

/// Split sizes for reconstruction training: first 90% train, rest test.
pub fn ae_split(n: usize) -> (usize, usize) {
    let train = n * 9 / 10;
    (train, n - train)
}

/// The image autoencoder: five convolutions to an 8×8×64 feature map, a
/// dense bottleneck to [`AE_LATENT_DIM`], and the mirrored decoder.
#[derive(Debug, Clone)]
pub struct AeModel {
    enc: Vec<Conv2dLayer>,
    enc_head: Mlp,
    dec_head: Mlp,
    dec: Vec<ConvTranspose2dLayer>,
    descriptor: AeDescriptor,
}

impl AeModel {
    /// Fresh model with fan-in uniform weights and zero biases drawn from the
    /// caller's seeded RNG. Zero biases make a fresh model map the all-zero
    /// image to the all-zero latent, which pins down initialization bugs.
    pub fn new(rng: &mut impl Rng) -> AeModel {
        let mut channels = vec![1];
        channels.extend(ENC_FILTERS);
        let enc = (0..ENC_FILTERS.len())
            .map(|i| {
                Conv2dLayer::new(
                    channels[i],
                    channels[i + 1],
                    ENC_STRIDES[i],
                    Activation::Relu,
                    rng,
                )
            })
            .collect();
        let enc_head = Mlp::new(&[FLAT_DIM, AE_LATENT_DIM], &[Activation::Linear], rng)
            .expect("bottleneck dims are consistent");
        let dec_head = Mlp::new(&[AE_LATENT_DIM, FLAT_DIM], &[Activation::Relu], rng)
            .expect("bottleneck dims are consistent");
        let dec = (0..ENC_FILTERS.len())
            .map(|i| {
                let rev = ENC_FILTERS.len() - 1 - i;
                let act = if i + 1 == ENC_FILTERS.len() {
                    Activation::Sigmoid
                } else {
                    Activation::Relu
                };
                ConvTranspose2dLayer::new(channels[rev + 1], channels[rev], ENC_STRIDES[rev], act, rng)
            })
            .collect();
        AeModel {
            enc,
            enc_head,
            dec_head,
            dec,
            descriptor: AeDescriptor::default(),
        }
    }

    pub fn descriptor(&self) -> &AeDescriptor {
        &self.descriptor
    }

    /// Context normalization spec for CNMPs conditioned on this latent.
    pub fn context_spec(&self) -> ContextSpec {
        ContextSpec::Latent {
            lo: self.descriptor.latent_lo.clone(),
            hi: self.descriptor.latent_hi.clone(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        AE_LATENT_DIM
    }

    pub fn param_count(&self) -> usize {
        self.enc.iter().map(Conv2dLayer::param_count).sum::<usize>()
            + self.enc_head.param_count()
            + self.dec_head.param_count()
            + self.dec.iter().map(ConvTranspose2dLayer::param_count).sum::<usize>()
    }

    fn image_tensor(image: &SceneImage) -> Result<Tensor, AeError> {
        let expected = IMAGE_SIDE * IMAGE_SIDE;
        if image.pixels.len() != expected {
            return Err(AeError::ImageSize {
                expected,
                got: image.pixels.len(),
            });
        }
        Ok(Tensor::from_vec(&[1, IMAGE_SIDE, IMAGE_SIDE], image.pixels.clone())?)
    }

    /// Encodes one render into its latent code.
    pub fn encode(&self, image: &SceneImage) -> Result<Vec<f64>, AeError> {
        let mut current = Self::image_tensor(image)?;
        for layer in &self.enc {
            current = layer.forward(&current)?;
        }
        Ok(self.enc_head.infer(current.data())?)
    }

    /// Decodes a latent back into a [0,1] image.
    pub fn decode(&self, latent: &[f64]) -> Result<Vec<f64>, AeError> {
        let hidden = self.dec_head.infer(latent)?;
        let mut current = Tensor::from_vec(
            &[ENC_FILTERS[4], BOTTLENECK_SIDE, BOTTLENECK_SIDE],
            hidden,
        )?;
        for layer in &self.dec {
            current = layer.forward(&current)?;
        }
        Ok(current.data().to_vec())
    }

    /// Round-trips one render through the bottleneck. The sigmoid head keeps
    /// every reconstructed pixel inside [0,1]; the input's tag is preserved.
    pub fn reconstruct(&self, image: &SceneImage) -> Result<SceneImage, AeError> {
        let latent = self.encode(image)?;
        Ok(SceneImage {
            pixels: self.decode(&latent)?,
            tag: image.tag,
        })
    }

    /// Mean squared reconstruction error of one render, without training.
    pub fn reconstruction_mse(&self, image: &SceneImage) -> Result<f64, AeError> {
        let recon = self.reconstruct(image)?;
        Ok(mse(&recon.pixels, &image.pixels)?)
    }

    /// Parameter tensors in checkpoint order.
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut params: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.enc {
            params.push(&mut layer.kernels);
            params.push(&mut layer.bias);
        }
        params.extend(self.enc_head.params_mut());
        params.extend(self.dec_head.params_mut());
        for layer in &mut self.dec {
            params.push(&mut layer.kernels);
            params.push(&mut layer.bias);
        }
        params
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut params: Vec<&Tensor> = Vec::new();
        for layer in &self.enc {
            params.push(&layer.kernels);
            params.push(&layer.bias);
        }
        params.extend(self.enc_head.params());
        params.extend(self.dec_head.params());
        for layer in &self.dec {
            params.push(&layer.kernels);
            params.push(&layer.bias);
        }
        params
    }

    pub fn save(&self, path: &Path) -> Result<(), AeError> {
        checkpoint::save(path, &self.descriptor, &self.params())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AeModel, AeError> {
        let (descriptor, tensors): (AeDescriptor, Vec<Tensor>) = checkpoint::load(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = AeModel::new(&mut rng);
        model.descriptor = descriptor;
        let params = model.params_mut();
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

    /// One reconstruction pass with gradients, accumulated into `grads`
    /// (checkpoint parameter order). Returns the item's MSE.
    fn item_backward(&mut self, image: &Tensor, grads: &mut [Tensor]) -> Result<f64, AeError> {
        // Forward, keeping each convolution's (input, pre-activation) pair.
        let mut enc_caches = Vec::with_capacity(self.enc.len());
        let mut current = image.clone();
        for layer in &self.enc {
            let (post, pre) = layer.forward_cached(&current)?;
            enc_caches.push((current, pre));
            current = post;
        }
        let latent = self.enc_head.forward(current.data())?;
        let hidden = self.dec_head.forward(&latent)?;
        let mut dec_caches = Vec::with_capacity(self.dec.len());
        let mut current = Tensor::from_vec(
            &[ENC_FILTERS[4], BOTTLENECK_SIDE, BOTTLENECK_SIDE],
            hidden,
        )?;
        for layer in &self.dec {
            let (post, pre) = layer.forward_cached(&current)?;
            dec_caches.push((current, pre));
            current = post;
        }

        let loss = mse(current.data(), image.data())?;
        let grad_recon = mse_grad(current.data(), image.data())?;

        // Backward: decoder convolutions, dense heads, encoder convolutions.
        let n_enc = self.enc.len();
        let mut grad = Tensor::from_vec(current.shape(), grad_recon)?;
        for (idx, layer) in self.dec.iter().enumerate().rev() {
            let (input, pre) = &dec_caches[idx];
            let (layer_grads, grad_in) = layer.backward(input, pre, &grad)?;
            accumulate(&mut grads[2 * (n_enc + idx) + 4], &layer_grads.kernels);
            accumulate(&mut grads[2 * (n_enc + idx) + 5], &layer_grads.bias);
            grad = grad_in;
        }
        let (dec_head_grads, dec_in) = self.dec_head.backward(&[grad.data().to_vec()])?;
        accumulate(&mut grads[2 * n_enc + 2], &dec_head_grads.tensors[0]);
        accumulate(&mut grads[2 * n_enc + 3], &dec_head_grads.tensors[1]);
        let (enc_head_grads, enc_in) = self.enc_head.backward(&[dec_in[0].clone()])?;
        accumulate(&mut grads[2 * n_enc], &enc_head_grads.tensors[0]);
        accumulate(&mut grads[2 * n_enc + 1], &enc_head_grads.tensors[1]);
        let last_shape = enc_caches.last().map(|(_, pre)| pre.shape().to_vec()).unwrap();
        let mut grad = Tensor::from_vec(&last_shape, enc_in[0].clone())?;
        for (idx, layer) in self.enc.iter().enumerate().rev() {
            let (input, pre) = &enc_caches[idx];
            let (layer_grads, grad_in) = layer.backward(input, pre, &grad)?;
            accumulate(&mut grads[2 * idx], &layer_grads.kernels);
            accumulate(&mut grads[2 * idx + 1], &layer_grads.bias);
            grad = grad_in;
        }
        Ok(loss)
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Trains a fresh autoencoder on `images` for exactly `epochs` epochs of
/// mini-batch Adam. The first 90% of the images (in the order given) form
/// the train split, the rest the test split; both reconstruction errors are
/// recorded once per epoch. After training, the descriptor captures the
/// per-dimension bounds of the train-split latents. Fully determined by
/// `seed`.
pub fn train_ae(
    images: &[SceneImage],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(AeModel, AeTrainHistory), AeError> {
    let (n_train, n_test) = ae_split(images.len());
    if n_train == 0 || n_test == 0 {
        return Err(AeError::EmptyTrainingSet);
    }
    let tensors: Vec<Tensor> = images
        .iter()
        .map(AeModel::image_tensor)
        .collect::<Result<_, _>>()?;
    let (train_imgs, test_imgs) = tensors.split_at(n_train);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = AeModel::new(&mut rng);
    let mut adam = AdamState::new(learning_rate, &model.params());
    let mut grads: Vec<Tensor> = model
        .params()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut history = AeTrainHistory {
        train_mse: Vec::with_capacity(epochs),
        test_mse: Vec::with_capacity(epochs),
    };
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(AE_BATCH_SIZE).enumerate() {
            for g in &mut grads {
                g.fill_zero();
            }
            let mut batch_loss = 0.0;
            for &idx in chunk {
                batch_loss += model.item_backward(&train_imgs[idx], &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(AeError::NonFiniteLoss { epoch, batch });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.apply(&mut model.params_mut(), &grad_refs)?;
        }
        history.train_mse.push(epoch_loss / n_train as f64);

        let mut test_loss = 0.0;
        for img in test_imgs {
            let mut current = img.clone();
            for layer in &model.enc {
                current = layer.forward(&current)?;
            }
            let latent = model.enc_head.infer(current.data())?;
            let hidden = model.dec_head.infer(&latent)?;
            let mut current = Tensor::from_vec(
                &[ENC_FILTERS[4], BOTTLENECK_SIDE, BOTTLENECK_SIDE],
                hidden,
            )?;
            for layer in &model.dec {
                current = layer.forward(&current)?;
            }
            test_loss += mse(current.data(), img.data())?;
        }
        history.test_mse.push(test_loss / n_test as f64);
    }

    // Latent bounds over the train split, for downstream context
    // normalization.
    let mut lo = vec![f64::INFINITY; AE_LATENT_DIM];
    let mut hi = vec![f64::NEG_INFINITY; AE_LATENT_DIM];
    for img in train_imgs {
        let mut current = img.clone();
        for layer in &model.enc {
            current = layer.forward(&current)?;
        }
        let latent = model.enc_head.infer(current.data())?;
        for (k, &v) in latent.iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    model.descriptor = AeDescriptor {
        latent_lo: lo,
        latent_hi: hi,
    };
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ImageTag;
    use tempfile::tempdir;

    fn blank_image() -> SceneImage {
        SceneImage {
            pixels: vec![0.0; IMAGE_SIDE * IMAGE_SIDE],
            tag: ImageTag::AfterPreMP,
        }
    }

    fn checker_image(phase: usize) -> SceneImage {
        let pixels = (0..IMAGE_SIDE * IMAGE_SIDE)
            .map(|i| {
                let (r, c) = (i / IMAGE_SIDE, i % IMAGE_SIDE);
                if (r / 8 + c / 8 + phase) % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        SceneImage {
            pixels,
            tag: ImageTag::AfterCorMP,
        }
    }

    #[test]
    fn zero_image_through_fresh_model_gives_exactly_zero_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = AeModel::new(&mut rng);
        let latent = model.encode(&blank_image()).unwrap();
        assert_eq!(latent, vec![0.0; AE_LATENT_DIM]);
    }

    #[test]
    fn encode_rejects_wrong_pixel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = AeModel::new(&mut rng);
        let bad = SceneImage {
            pixels: vec![0.0; 100],
            tag: ImageTag::AfterPreMP,
        };
        assert!(matches!(
            model.encode(&bad),
            Err(AeError::ImageSize { expected: 4096, got: 100 })
        ));
    }

    #[test]
    fn reconstruction_keeps_shape_range_and_tag() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = AeModel::new(&mut rng);
        let image = checker_image(0);
        let recon = model.reconstruct(&image).unwrap();
        assert_eq!(recon.pixels.len(), IMAGE_SIDE * IMAGE_SIDE);
        assert_eq!(recon.tag, ImageTag::AfterCorMP);
        assert!(recon.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn equal_images_get_bit_equal_latents_and_different_images_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = AeModel::new(&mut rng);
        let a = model.encode(&checker_image(0)).unwrap();
        let b = model.encode(&checker_image(0)).unwrap();
        let c = model.encode(&checker_image(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_is_ninety_ten() {
        assert_eq!(ae_split(400), (360, 40));
        assert_eq!(ae_split(10), (9, 1));
        assert_eq!(ae_split(2), (1, 1));
    }

    #[test]
    fn param_count_matches_hand_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = AeModel::new(&mut rng);
        // Encoder convs: 320 + 9 248 + 18 496 + 36 928 + 36 928.
        // Heads: 8·4096+8 and 4096·8+4096. Decoder convs mirror the encoder
        // with transposed channel counts: 36 928 + 36 928 + 18 464 + 9 248 + 289.
        let expected = 320 + 9248 + 18496 + 36928 + 36928
            + (8 * 4096 + 8)
            + (4096 * 8 + 4096)
            + 36928 + 36928 + 18464 + 9248 + 289;
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn checkpoint_round_trip_preserves_latents_and_descriptor() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model = AeModel::new(&mut rng);
        model.descriptor = AeDescriptor {
            latent_lo: vec![-1.0; AE_LATENT_DIM],
            latent_hi: vec![2.5; AE_LATENT_DIM],
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("ae.ckpt");
        model.save(&path).unwrap();
        let restored = AeModel::load(&path).unwrap();
        assert_eq!(restored.descriptor(), model.descriptor());
        let image = checker_image(0);
        assert_eq!(
            restored.encode(&image).unwrap(),
            model.encode(&image).unwrap()
        );
    }

    #[test]
    fn load_rejects_checkpoint_with_wrong_tensor_count() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        let lone = Tensor::zeros(&[3, 3]);
        checkpoint::save(&path, &AeDescriptor::default(), &[&lone]).unwrap();
        assert!(matches!(
            AeModel::load(&path),
            Err(AeError::Checkpoint(CheckpointError::ModelMismatch(_)))
        ));
    }

    #[test]
    fn one_epoch_of_training_is_deterministic_and_recorded() {
        let images: Vec<SceneImage> = (0..4).map(checker_image).collect();
        let (model_a, hist_a) = train_ae(&images, 1, AE_LEARNING_RATE, 5).unwrap();
        let (model_b, hist_b) = train_ae(&images, 1, AE_LEARNING_RATE, 5).unwrap();
        assert_eq!(hist_a, hist_b);
        assert_eq!(hist_a.train_mse.len(), 1);
        assert_eq!(hist_a.test_mse.len(), 1);
        assert!(hist_a.train_mse[0].is_finite() && hist_a.train_mse[0] > 0.0);
        let probe = checker_image(0);
        assert_eq!(
            model_a.encode(&probe).unwrap(),
            model_b.encode(&probe).unwrap()
        );
        assert_eq!(model_a.descriptor(), model_b.descriptor());
        // Bounds come from the train split and must bracket a train latent.
        let latent = model_a.encode(&images[0]).unwrap();
        for k in 0..AE_LATENT_DIM {
            assert!(model_a.descriptor().latent_lo[k] <= latent[k] + 1e-12);
            assert!(model_a.descriptor().latent_hi[k] >= latent[k] - 1e-12);
        }
    }

    #[test]
    fn training_rejects_sets_without_both_splits() {
        let images = vec![checker_image(0)];
        assert!(matches!(
            train_ae(&images, 1, AE_LEARNING_RATE, 0),
            Err(AeError::EmptyTrainingSet)
        ));
    }
}
