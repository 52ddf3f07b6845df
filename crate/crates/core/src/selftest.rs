//! Independent numerical oracles (naive reimplementations, finite
//! differences) and the self-check suite behind the `selftest` command.
//!
//! The oracles here deliberately avoid sharing code with the optimized
//! implementations they verify: the matrix product is a plain nested loop and
//! the convolution builds an explicitly zero-padded buffer before sliding.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cnmp::{self, CnmpDescriptor, CnmpModel, ContextSpec, SIGMA_FLOOR};
use crate::context_ae::AeModel;
use crate::dataset::{build_dataset, save_dataset, PhaseStats};
use crate::demo::{demonstrate, TrajectoryPoint};
use crate::nn::conv::{conv_output_dim, Conv2dLayer, ConvTranspose2dLayer};
use crate::nn::tensor::Tensor;
use crate::nn::{loss, softplus, Activation, AdamState, Mlp};
use crate::sim::{render, sample_scene, scene_with_offset, ImageTag, WorldConfig};

/// Plain row-by-row matrix–vector product.
pub fn naive_matvec(rows: &[Vec<f64>], input: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        assert_eq!(row.len(), input.len());
        let mut acc = 0.0;
        for i in 0..row.len() {
            acc += row[i] * input[i];
        }
        out.push(acc);
    }
    out
}

/// Same-padding 3×3 convolution via an explicitly zero-padded buffer — the
/// slow reference the fast implementation is checked against.
pub fn naive_conv2d_same(input: &Tensor, kernels: &Tensor, stride: usize) -> Tensor {
    let (c_in, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => panic!("naive conv expects [c,h,w]"),
    };
    let filters = kernels.shape()[0];
    assert_eq!(kernels.shape(), &[filters, c_in, 3, 3]);
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let pad_h_total = ((oh - 1) * stride + 3).saturating_sub(h);
    let pad_w_total = ((ow - 1) * stride + 3).saturating_sub(w);
    let (ph, pw) = (pad_h_total / 2, pad_w_total / 2);

    // Zero-padded copy of every channel.
    let (hp, wp) = (h + pad_h_total, w + pad_w_total);
    let mut padded = vec![0.0; c_in * hp * wp];
    for c in 0..c_in {
        for y in 0..h {
            for x in 0..w {
                padded[c * hp * wp + (y + ph) * wp + (x + pw)] =
                    input.data()[c * h * w + y * w + x];
            }
        }
    }

    let mut out = Tensor::zeros(&[filters, oh, ow]);
    for f in 0..filters {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            acc += kernels.data()[((f * c_in + c) * 3 + ky) * 3 + kx]
                                * padded[c * hp * wp + iy * wp + ix];
                        }
                    }
                }
                out.data_mut()[(f * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Worst relative disagreement between two gradient vectors, with a floor on
/// the denominator so true-zero components compare in absolute terms.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Flattens parameter tensors into one vector (declaration order).
pub fn collect_params(params: &[&Tensor]) -> Vec<f64> {
    params.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Writes a flat vector back into parameter tensors (declaration order).
pub fn scatter_params(params: &mut [&mut Tensor], flat: &[f64]) {
    let mut offset = 0;
    for t in params.iter_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, flat.len());
}

/// Result of one self-check property.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn from_bool(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Loss used to drive a finite-difference check through an MLP stack.
enum ProbeLoss {
    Mse,
    /// Splits the output into (μ, σ_raw), maps σ through softplus + 1e-4 —
    /// the exact head used by the movement-primitive decoder.
    NllHead,
}

fn mlp_loss(mlp: &Mlp, input: &[f64], target: &[f64], loss: &ProbeLoss) -> f64 {
    let out = mlp.infer(input).unwrap();
    match loss {
        ProbeLoss::Mse => loss::mse(&out, target).unwrap(),
        ProbeLoss::NllHead => {
            let d = out.len() / 2;
            let mean = &out[..d];
            let std: Vec<f64> = out[d..].iter().map(|&r| softplus(r) + 1e-4).collect();
            loss::gaussian_nll(mean, &std, target).unwrap()
        }
    }
}

fn mlp_analytic_grad(mlp: &mut Mlp, input: &[f64], target: &[f64], loss: &ProbeLoss) -> Vec<f64> {
    let out = mlp.forward(input).unwrap();
    let out_grad = match loss {
        ProbeLoss::Mse => loss::mse_grad(&out, target).unwrap(),
        ProbeLoss::NllHead => {
            let d = out.len() / 2;
            let mean = &out[..d];
            let raw = &out[d..];
            let std: Vec<f64> = raw.iter().map(|&r| softplus(r) + 1e-4).collect();
            let (d_mean, d_std) = loss::gaussian_nll_grad(mean, &std, target).unwrap();
            let mut g = d_mean;
            // Chain through softplus: dσ/draw = sigmoid(raw).
            g.extend(
                d_std
                    .iter()
                    .zip(raw)
                    .map(|(&ds, &r)| ds * crate::nn::sigmoid(r)),
            );
            g
        }
    };
    let (grads, _) = mlp.backward(&[out_grad]).unwrap();
    grads.tensors.iter().flat_map(|t| t.data().to_vec()).collect()
}

/// Smallest |pre-activation| over all ReLU units — finite differences are
/// invalid when a kink lies inside the probe step, so such inputs are redrawn.
fn min_abs_relu_preactivation(mlp: &Mlp, input: &[f64]) -> f64 {
    mlp.min_abs_relu_preactivation(input).unwrap()
}

/// Finite-difference check over every parameter of a small dense stack.
fn check_mlp_gradients(name: &str, configs: usize, loss: ProbeLoss) -> CheckOutcome {
    let mut worst = 0.0f64;
    for seed in 0..configs as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let acts = [
            Activation::Relu,
            Activation::Softplus,
            Activation::Sigmoid,
        ];
        let hidden = 3 + (seed as usize % 5);
        let out_dim = match loss {
            ProbeLoss::Mse => 1 + (seed as usize % 3),
            ProbeLoss::NllHead => 2 * (1 + (seed as usize % 3)),
        };
        let dims = [2 + (seed as usize % 3), hidden, hidden, out_dim];
        let hidden_act = acts[seed as usize % acts.len()];
        let mut mlp = Mlp::new(
            &dims,
            &[hidden_act, hidden_act, Activation::Linear],
            &mut rng,
        )
        .unwrap();
        let mut input = random_vec(dims[0], &mut rng);
        while min_abs_relu_preactivation(&mlp, &input) < 1e-3 {
            input = random_vec(dims[0], &mut rng);
        }
        let target = random_vec(
            match loss {
                ProbeLoss::Mse => out_dim,
                ProbeLoss::NllHead => out_dim / 2,
            },
            &mut rng,
        );

        let analytic = mlp_analytic_grad(&mut mlp, &input, &target, &loss);
        let flat = collect_params(&mlp.params());
        let numeric = finite_diff(
            |p| {
                let mut probe = mlp.clone();
                scatter_params(&mut probe.params_mut(), p);
                mlp_loss(&probe, &input, &target, &loss)
            },
            &flat,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    CheckOutcome::from_bool(
        name,
        worst < FD_TOLERANCE,
        format!("max relative error {worst:.3e} over {configs} random configurations"),
    )
}

/// Finite-difference check of a conv → transposed-conv stack (a miniature
/// autoencoder) under per-pixel MSE.
fn check_conv_gradients() -> CheckOutcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let stride = 1 + (seed as usize % 2);
        let acts = [Activation::Relu, Activation::Softplus, Activation::Sigmoid];
        let act = acts[seed as usize % acts.len()];
        let enc = Conv2dLayer::new(1, 2, stride, act, &mut rng);
        let dec = ConvTranspose2dLayer::new(2, 1, stride, Activation::Linear, &mut rng);
        // The decoder upsamples by the stride, so the side must divide evenly
        // for the reconstruction to match the input shape.
        let side = if stride == 2 {
            4 + 2 * (seed as usize % 2)
        } else {
            4 + (seed as usize % 3)
        };
        let mut image = Tensor::from_vec(
            &[1, side, side],
            random_vec(side * side, &mut rng),
        )
        .unwrap();
        // Keep ReLU pre-activations away from kinks so central differences
        // measure a one-sided slope.
        while act == Activation::Relu {
            let (_, pre) = enc.forward_cached(&image).unwrap();
            if pre.data().iter().all(|p| p.abs() > 1e-3) {
                break;
            }
            image = Tensor::from_vec(&[1, side, side], random_vec(side * side, &mut rng))
                .unwrap();
        }

        let run = |enc: &Conv2dLayer, dec: &ConvTranspose2dLayer| -> f64 {
            let mid = enc.forward(&image).unwrap();
            let out = dec.forward(&mid).unwrap();
            loss::mse(out.data(), image.data()).unwrap()
        };

        // Analytic gradients via the layer backward passes.
        let (mid_post, mid_pre) = enc.forward_cached(&image).unwrap();
        let (out_post, out_pre) = dec.forward_cached(&mid_post).unwrap();
        let d_out = loss::mse_grad(out_post.data(), image.data()).unwrap();
        let d_out = Tensor::from_vec(out_post.shape(), d_out).unwrap();
        let (dec_grads, d_mid) = dec.backward(&mid_post, &out_pre, &d_out).unwrap();
        let (enc_grads, _) = enc.backward(&image, &mid_pre, &d_mid).unwrap();
        let analytic: Vec<f64> = [
            enc_grads.kernels.data(),
            enc_grads.bias.data(),
            dec_grads.kernels.data(),
            dec_grads.bias.data(),
        ]
        .concat();

        let flat: Vec<f64> = [
            enc.kernels.data(),
            enc.bias.data(),
            dec.kernels.data(),
            dec.bias.data(),
        ]
        .concat();
        let numeric = finite_diff(
            |p| {
                let mut e = enc.clone();
                let mut d = dec.clone();
                let mut off = 0;
                for t in [&mut e.kernels, &mut e.bias, &mut d.kernels, &mut d.bias] {
                    let n = t.len();
                    t.data_mut().copy_from_slice(&p[off..off + n]);
                    off += n;
                }
                run(&e, &d)
            },
            &flat,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    CheckOutcome::from_bool(
        "conv/transposed-conv gradients vs finite differences",
        worst < FD_TOLERANCE,
        format!("max relative error {worst:.3e} over 10 random configurations"),
    )
}

fn check_nll_gradients() -> CheckOutcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let n = 1 + (seed as usize % 4);
        let mean = random_vec(n, &mut rng);
        let std: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..2.0)).collect();
        let target = random_vec(n, &mut rng);
        let (d_mean, d_std) = loss::gaussian_nll_grad(&mean, &std, &target).unwrap();
        let num_mean = finite_diff(
            |m| loss::gaussian_nll(m, &std, &target).unwrap(),
            &mean,
            FD_STEP,
        );
        let num_std = finite_diff(
            |s| loss::gaussian_nll(&mean, s, &target).unwrap(),
            &std,
            FD_STEP,
        );
        worst = worst
            .max(max_rel_err(&d_mean, &num_mean))
            .max(max_rel_err(&d_std, &num_std));
    }
    CheckOutcome::from_bool(
        "Gaussian NLL gradients vs finite differences",
        worst < FD_TOLERANCE,
        format!("max relative error {worst:.3e} over 10 random configurations"),
    )
}

fn check_matmul_oracle() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (rows, cols) = (rng.random_range(1..6), rng.random_range(1..6));
        let layer = crate::nn::DenseLayer::new(cols, rows, Activation::Linear, &mut rng);
        let input = random_vec(cols, &mut rng);
        let row_vecs: Vec<Vec<f64>> = layer
            .weights
            .data()
            .chunks_exact(cols)
            .map(|r| r.to_vec())
            .collect();
        let expected = naive_matvec(&row_vecs, &input);
        let got = layer.forward(&input).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            worst = worst.max((g - e).abs());
        }
    }
    CheckOutcome::from_bool(
        "dense forward vs naive matrix–vector oracle",
        worst < 1e-12,
        format!("max absolute deviation {worst:.3e}"),
    )
}

fn check_conv_oracle() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    let mut worst = 0.0f64;
    for case in 0..10 {
        let stride = 1 + case % 2;
        let c = 1 + case % 3;
        let f = 1 + case % 4;
        let h = 4 + case;
        let w = 4 + (case * 3) % 9;
        let mut input = Tensor::zeros(&[c, h, w]);
        for v in input.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut kernels = Tensor::zeros(&[f, c, 3, 3]);
        for v in kernels.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let fast = crate::nn::conv::conv2d(&input, &kernels, stride).unwrap();
        let slow = naive_conv2d_same(&input, &kernels, stride);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckOutcome::from_bool(
        "fast convolution vs naive zero-padded oracle",
        worst < 1e-12,
        format!("max absolute deviation {worst:.3e}"),
    )
}

fn check_adam_first_step() -> CheckOutcome {
    let mut theta = Tensor::from_vec(&[1], vec![0.0]).unwrap();
    let grad = Tensor::from_vec(&[1], vec![1.0]).unwrap();
    let mut adam = AdamState::new(1e-4, &[&theta]);
    adam.apply(&mut [&mut theta], &[&grad]).unwrap();
    let expected = -1e-4 / (1.0 + 1e-8);
    let err = (theta.data()[0] - expected).abs();
    CheckOutcome::from_bool(
        "Adam first step matches closed form",
        err < 1e-15,
        format!("|Δθ − (−lr·g/(|g|+ε))| = {err:.3e}"),
    )
}

fn check_adam_quadratic() -> CheckOutcome {
    let mut theta = Tensor::from_vec(&[1], vec![0.0]).unwrap();
    let mut adam = AdamState::new(0.05, &[&theta]);
    for _ in 0..2000 {
        let g = Tensor::from_vec(&[1], vec![2.0 * (theta.data()[0] - 3.0)]).unwrap();
        adam.apply(&mut [&mut theta], &[&g]).unwrap();
    }
    let err = (theta.data()[0] - 3.0).abs();
    CheckOutcome::from_bool(
        "Adam minimizes (θ−3)² to within 0.01 in 2000 steps",
        err < 0.01,
        format!("|θ − 3| = {err:.3e}"),
    )
}

fn check_conv_shape_law() -> CheckOutcome {
    let mut ok = true;
    for h in 4usize..=128 {
        for stride in [1usize, 2] {
            if conv_output_dim(h, stride) != h.div_ceil(stride) {
                ok = false;
            }
        }
    }
    CheckOutcome::from_bool(
        "conv output dim = ceil(in/stride) for all sizes in [4,128]",
        ok,
        "exhaustive over both strides".into(),
    )
}

/// Self-checks covering the network substrate.
pub fn nn_checks() -> Vec<CheckOutcome> {
    vec![
        check_mlp_gradients("dense-stack gradients vs finite differences (MSE)", 10, ProbeLoss::Mse),
        check_mlp_gradients(
            "dense-stack gradients vs finite differences (Gaussian NLL head)",
            10,
            ProbeLoss::NllHead,
        ),
        check_conv_gradients(),
        check_nll_gradients(),
        check_matmul_oracle(),
        check_conv_oracle(),
        check_adam_first_step(),
        check_adam_quadratic(),
        check_conv_shape_law(),
    ]
}

/// A small movement-primitive model with neutral normalization, used by the
/// model-level checks below.
fn toy_cnmp(seed: u64) -> CnmpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CnmpModel::with_widths(
        CnmpDescriptor {
            output_dim: 3,
            context: ContextSpec::Scalar {
                lo: -0.03,
                hi: 0.03,
            },
            value_stats: PhaseStats {
                mean: vec![0.0; 3],
                std: vec![1.0; 3],
            },
            value_lo: vec![-1.0; 3],
            value_hi: vec![1.0; 3],
        },
        16,
        &mut rng,
    )
}

fn check_cnmp_gradients() -> CheckOutcome {
    let name = "full movement-primitive gradients vs finite differences";
    let mut worst = 0.0f64;
    let mut total = 0usize;
    for seed in 0..3u64 {
        match cnmp::gradient_check(7000 + seed) {
            Ok((rel, n)) => {
                worst = worst.max(rel);
                total += n;
            }
            Err(e) => {
                return CheckOutcome::from_bool(name, false, format!("check failed to run: {e}"))
            }
        }
    }
    CheckOutcome::from_bool(
        name,
        worst < FD_TOLERANCE,
        format!("max relative error {worst:.3e} over {total} parameters"),
    )
}

fn check_observation_symmetry() -> CheckOutcome {
    let model = toy_cnmp(7100);
    let mut rng = ChaCha8Rng::seed_from_u64(7101);
    let mut ok = true;
    for _ in 0..50 {
        let n = rng.random_range(1..=5usize);
        let obs: Vec<TrajectoryPoint> = (0..n)
            .map(|_| TrajectoryPoint {
                t: rng.random_range(0.0..=1.0),
                values: random_vec(3, &mut rng),
            })
            .collect();
        let base = model.encode_observations(&obs).unwrap();
        let mut permuted = obs.clone();
        permuted.reverse();
        if n > 2 {
            permuted.swap(0, 1);
        }
        let doubled: Vec<TrajectoryPoint> = obs.iter().chain(&obs).cloned().collect();
        ok &= model.encode_observations(&permuted).unwrap() == base;
        ok &= model.encode_observations(&doubled).unwrap() == base;
    }
    CheckOutcome::from_bool(
        "latent is bit-identical under observation permutation and duplication",
        ok,
        "50 random observation sets, reversed and doubled".into(),
    )
}

fn check_sigma_floor() -> CheckOutcome {
    let model = toy_cnmp(7200);
    let mut rng = ChaCha8Rng::seed_from_u64(7201);
    let mut min_sigma = f64::MAX;
    for _ in 0..1000 {
        let obs = [TrajectoryPoint {
            t: rng.random_range(0.0..=1.0),
            values: random_vec(3, &mut rng),
        }];
        let ctx = [rng.random_range(-0.03..0.03)];
        let out = model
            .query(&obs, &ctx, rng.random_range(0.0..=1.0))
            .unwrap();
        min_sigma = out.std.iter().fold(min_sigma, |m, &s| m.min(s));
    }
    CheckOutcome::from_bool(
        "predicted σ stays positive over 1000 random queries",
        min_sigma > 0.0,
        format!("min σ = {min_sigma:.3e} (softplus floor {SIGMA_FLOOR:.0e})"),
    )
}

fn check_sim_replay() -> CheckOutcome {
    let config = WorldConfig::default();
    let mut ok = true;
    for seed in 0..20u64 {
        let mut rng_a = ChaCha8Rng::seed_from_u64(7300 + seed);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7300 + seed);
        let scene_a = sample_scene(&config, &mut rng_a);
        let scene_b = sample_scene(&config, &mut rng_b);
        ok &= scene_a == scene_b;
        match (demonstrate(&config, &scene_a), demonstrate(&config, &scene_b)) {
            (Ok(a), Ok(b)) => {
                ok &= a.pre == b.pre && a.cor == b.cor && a.post == b.post;
                ok &= a.after_pre_image == b.after_pre_image;
                ok &= a.after_cor_image == b.after_cor_image;
            }
            _ => ok = false,
        }
    }
    CheckOutcome::from_bool(
        "simulator episodes replay bit-exactly",
        ok,
        "20 seeded scenes demonstrated twice".into(),
    )
}

fn check_demo_success() -> CheckOutcome {
    let config = WorldConfig::default();
    let mut failures = 0usize;
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7400 + seed);
        let scene = sample_scene(&config, &mut rng);
        match demonstrate(&config, &scene) {
            Ok(d) if d.success => {}
            _ => failures += 1,
        }
    }
    CheckOutcome::from_bool(
        "scripted expert succeeds on 500 random scenes",
        failures == 0,
        format!("{failures} failures out of 500"),
    )
}

fn check_checkpoint_round_trip(scratch: &Path) -> CheckOutcome {
    let name = "checkpoints reload to bit-identical models";
    let run = || -> Result<bool, String> {
        let err = |e: &dyn std::fmt::Display| e.to_string();
        fs::create_dir_all(scratch).map_err(|e| err(&e))?;
        let model = toy_cnmp(7500);
        let mp_path = scratch.join("selftest_mp.bin");
        model.save(&mp_path).map_err(|e| err(&e))?;
        let reloaded = CnmpModel::load(&mp_path).map_err(|e| err(&e))?;
        let obs = [TrajectoryPoint {
            t: 0.25,
            values: vec![0.1, -0.2, 0.05],
        }];
        let q_a = model.query(&obs, &[0.01], 0.75).map_err(|e| err(&e))?;
        let q_b = reloaded.query(&obs, &[0.01], 0.75).map_err(|e| err(&e))?;

        let mut rng = ChaCha8Rng::seed_from_u64(7501);
        let ae = AeModel::new(&mut rng);
        let ae_path = scratch.join("selftest_ae.bin");
        ae.save(&ae_path).map_err(|e| err(&e))?;
        let ae_reloaded = AeModel::load(&ae_path).map_err(|e| err(&e))?;
        let config = WorldConfig::default();
        let image = render(&config, &scene_with_offset(&config, 0.01), ImageTag::AfterPreMP);
        let latents_match =
            ae.encode(&image).map_err(|e| err(&e))? == ae_reloaded.encode(&image).map_err(|e| err(&e))?;
        Ok(q_a == q_b && latents_match)
    };
    match run() {
        Ok(ok) => CheckOutcome::from_bool(
            name,
            ok,
            "primitive and autoencoder checkpoints round-trip".into(),
        ),
        Err(e) => CheckOutcome::from_bool(name, false, e),
    }
}

/// All files under `dir`, as (relative path, contents), sorted by path.
fn dir_files(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    fn walk(
        base: &Path,
        dir: &Path,
        out: &mut Vec<(String, Vec<u8>)>,
    ) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let rel = path
                    .strip_prefix(base)
                    .expect("walk stays under base")
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, fs::read(&path)?));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn check_dataset_reproducibility(scratch: &Path) -> CheckOutcome {
    let name = "dataset builds are byte-reproducible";
    let run = || -> Result<(bool, String), String> {
        let err = |e: &dyn std::fmt::Display| e.to_string();
        let config = WorldConfig::default();
        let a = build_dataset(&config, 6, 42).map_err(|e| err(&e))?;
        let b = build_dataset(&config, 6, 42).map_err(|e| err(&e))?;
        let dir_a = scratch.join("dataset_a");
        let dir_b = scratch.join("dataset_b");
        save_dataset(&a, &dir_a).map_err(|e| err(&e))?;
        save_dataset(&b, &dir_b).map_err(|e| err(&e))?;
        let files_a = dir_files(&dir_a).map_err(|e| err(&e))?;
        let files_b = dir_files(&dir_b).map_err(|e| err(&e))?;
        if files_a.len() != files_b.len() {
            return Ok((false, "file sets differ".into()));
        }
        for ((name_a, bytes_a), (name_b, bytes_b)) in files_a.iter().zip(&files_b) {
            if name_a != name_b || bytes_a != bytes_b {
                return Ok((false, format!("{name_a} differs between builds")));
            }
        }
        Ok((true, format!("{} files identical across two builds", files_a.len())))
    };
    match run() {
        Ok((ok, detail)) => CheckOutcome::from_bool(name, ok, detail),
        Err(e) => CheckOutcome::from_bool(name, false, e),
    }
}

/// Self-checks covering the simulator, expert, dataset plumbing, and model
/// persistence. `scratch` is a caller-owned directory for disk round-trips.
pub fn system_checks(scratch: &Path) -> Vec<CheckOutcome> {
    vec![
        check_cnmp_gradients(),
        check_observation_symmetry(),
        check_sigma_floor(),
        check_sim_replay(),
        check_demo_success(),
        check_checkpoint_round_trip(scratch),
        check_dataset_reproducibility(scratch),
    ]
}

/// The full property suite behind the `selftest` command.
pub fn run_all(scratch: &Path) -> Vec<CheckOutcome> {
    let mut out = nn_checks();
    out.extend(system_checks(scratch));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_recovers_polynomial_gradient() {
        // f(x) = x0² + 3·x0·x1 → ∇ = (2x0 + 3x1, 3x0)
        let x = [1.5, -2.0];
        let g = finite_diff(|v| v[0] * v[0] + 3.0 * v[0] * v[1], &x, 1e-5);
        assert!((g[0] - (2.0 * 1.5 + 3.0 * -2.0)).abs() < 1e-8);
        assert!((g[1] - 3.0 * 1.5).abs() < 1e-8);
    }

    #[test]
    fn all_nn_checks_pass() {
        for outcome in nn_checks() {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }

    #[test]
    fn all_system_checks_pass() {
        let tmp = tempfile::tempdir().unwrap();
        for outcome in system_checks(tmp.path()) {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }

    #[test]
    fn rel_err_floors_near_zero_components() {
        assert!(max_rel_err(&[0.0], &[1e-9]) < 1e-2);
        assert!(max_rel_err(&[1.0], &[1.1]) > 0.05);
    }
}
