//! Behavioral tests of trained primitives at a reduced update budget: demo
//! reproduction, context steering, training-curve shape, and robustness on
//! degenerate data. One shared training run backs the suite.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use corridor_lfd::cnmp::{
    CnmpDescriptor, CnmpModel, CnmpTrainer, ContextSpec, TrainingItem, SIGMA_FLOOR,
};
use corridor_lfd::dataset::{build_dataset, Dataset, Phase, PhaseStats, TestContext};
use corridor_lfd::demo::{CorrectionKind, Trajectory, TrajectoryPoint};
use corridor_lfd::pipeline::{
    execute_trial, trajectory_error, train_segmented, ContextMode, Policy, SegmentedModels,
    TrainReport,
};
use corridor_lfd::sim::WorldConfig;

/// Enough updates for clean reproduction of a small corpus without making
/// the suite slow; the full protocol uses a much larger budget.
const BUDGET: usize = 30_000;

struct Fixture {
    dataset: Dataset,
    models: SegmentedModels,
    report: TrainReport,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dataset = build_dataset(&WorldConfig::default(), 40, 18).unwrap();
        let (models, report) =
            train_segmented(&dataset, ContextMode::Perfect, BUDGET, 0).unwrap();
        Fixture {
            dataset,
            models,
            report,
        }
    })
}

fn anchor(values: &[f64]) -> [TrajectoryPoint; 1] {
    [TrajectoryPoint {
        t: 0.0,
        values: values.to_vec(),
    }]
}

fn grid(trajectory: &Trajectory) -> Vec<f64> {
    trajectory.points.iter().map(|p| p.t).collect()
}

#[test]
fn corrective_primitive_reproduces_training_demonstrations() {
    let fx = fixture();
    for demo in fx.dataset.train().iter().take(4) {
        let generated = fx
            .models
            .cor
            .generate_trajectory(
                &anchor(&[0.0, 0.0, 0.0]),
                &[demo.corridor_offset],
                &grid(&demo.cor),
            )
            .unwrap();
        let err = trajectory_error(&generated.trajectory, &demo.cor).unwrap();
        assert!(
            err.mean_cm < 1.0,
            "corrective reproduction off by {:.3} cm mean at offset {}",
            err.mean_cm,
            demo.corridor_offset
        );
    }
}

#[test]
fn post_primitive_reproduces_training_demonstrations() {
    let fx = fixture();
    for demo in fx.dataset.train().iter().take(4) {
        let generated = fx
            .models
            .post
            .generate_trajectory(
                &anchor(&demo.post.points[0].values),
                &[demo.object_x_after_cor],
                &grid(&demo.post),
            )
            .unwrap();
        let err = trajectory_error(&generated.trajectory, &demo.post).unwrap();
        assert!(
            err.mean_cm < 1.5,
            "post reproduction off by {:.3} cm mean",
            err.mean_cm
        );
    }
}

/// Steering check: corridor offsets of opposite sign must produce corrective
/// segments whose net x-displacements point opposite ways.
#[test]
fn opposite_contexts_steer_the_correction_opposite_ways() {
    let fx = fixture();
    let world = &fx.dataset.header.world;
    let raw = 0.8 * world.offset_range;
    let t: Vec<f64> = (0..200).map(|k| k as f64 / 199.0).collect();
    let net = |offset: f64| {
        fx.models
            .cor
            .generate_trajectory(&anchor(&[0.0, 0.0, 0.0]), &[offset], &t)
            .unwrap()
            .trajectory
            .net_displacement(0)
    };
    let (plus, minus) = (net(raw), net(-raw));
    assert!(
        plus > 0.0 && minus < 0.0,
        "net x-displacements must open opposite ways: {plus:+.4} vs {minus:+.4}"
    );
    assert!(
        plus > world.dead_band && minus < -world.dead_band,
        "steering must clear the dead band: {plus:+.4} vs {minus:+.4}"
    );
}

#[test]
fn training_curves_fall_and_validation_improves() {
    let fx = fixture();
    for (name, curves) in [
        ("pre", &fx.report.pre),
        ("cor", &fx.report.cor),
        ("post", &fx.report.post),
    ] {
        let loss = &curves.loss;
        assert!(loss.len() >= 6, "{name}: expected many loss windows");
        let head: f64 = loss[..3].iter().map(|p| p.value).sum::<f64>() / 3.0;
        let tail: f64 =
            loss[loss.len() - 3..].iter().map(|p| p.value).sum::<f64>() / 3.0;
        assert!(
            tail < head,
            "{name}: windowed loss should fall, went {head:.3} -> {tail:.3}"
        );

        let val = &curves.validation;
        let early = val
            .iter()
            .find(|p| p.step * 20 >= BUDGET)
            .expect("checkpoint at 5% of the budget");
        let last = val.last().unwrap();
        assert!(
            last.value < early.value,
            "{name}: validation NLL should improve, went {:.3} (step {}) -> {:.3} (step {})",
            early.value,
            early.step,
            last.value,
            last.step
        );
    }
}

#[test]
fn a_trial_on_training_contexts_succeeds_end_to_end() {
    let fx = fixture();
    let policy = Policy::Segmented {
        models: &fx.models,
        mode: ContextMode::Perfect,
    };
    let world = &fx.dataset.header.world;
    // The most decisive push and pull offsets seen in training.
    let offsets = fx.dataset.train_offsets();
    let push = offsets.iter().copied().fold(f64::MIN, f64::max);
    let pull = offsets.iter().copied().fold(f64::MAX, f64::min);
    for (id, offset) in [(0, push), (1, pull)] {
        let trial = TestContext {
            id,
            corridor_offset: offset,
            required: CorrectionKind::required(offset, world.dead_band),
        };
        let result = execute_trial(world, &policy, &trial).unwrap();
        assert!(
            result.row.failure_cause.is_empty(),
            "trial aborted: {}",
            result.row.failure_cause
        );
        assert!(result.row.success, "trial at training offset {offset} failed");
        assert!(result.row.decision_match, "decision mismatch at offset {offset}");
    }
}

/// A corpus of identical trajectories drives the optimal σ to zero; the
/// softplus floor must keep predictions finite and strictly positive.
#[test]
fn sigma_floor_survives_degenerate_identical_data() {
    let points: Vec<TrajectoryPoint> = (0..50)
        .map(|k| {
            let t = k as f64 / 49.0;
            TrajectoryPoint {
                t,
                values: vec![t, 0.5, 1.0 - t],
            }
        })
        .collect();
    let items: Vec<TrainingItem> = (0..8)
        .map(|_| TrainingItem {
            trajectory: Trajectory {
                points: points.clone(),
            },
            context: vec![],
        })
        .collect();
    let descriptor = CnmpDescriptor {
        output_dim: 3,
        context: ContextSpec::None,
        value_stats: PhaseStats {
            mean: vec![0.5, 0.5, 0.5],
            std: vec![0.3, 0.3, 0.3],
        },
        value_lo: vec![-2.0; 3],
        value_hi: vec![2.0; 3],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = CnmpModel::with_widths(descriptor, 32, &mut rng);
    let mut trainer = CnmpTrainer::new(model);
    for _ in 0..2000 {
        let loss = trainer.train_step(&items, &mut rng).unwrap();
        assert!(loss.is_finite());
    }
    let model = trainer.into_model();
    let obs = anchor(&[0.0, 0.5, 1.0]);
    for k in 0..=20 {
        let out = model.query(&obs, &[], k as f64 / 20.0).unwrap();
        for s in &out.std {
            assert!(
                *s >= SIGMA_FLOOR && s.is_finite(),
                "sigma collapsed below the floor: {s:e}"
            );
        }
    }
}

/// The autoencoder protocol memorizes a single repeated scene to near-zero
/// reconstruction error within its fixed epoch count.
#[test]
fn autoencoder_memorizes_a_single_scene() {
    use corridor_lfd::context_ae::{train_ae, AE_EPOCHS, AE_LEARNING_RATE};
    use corridor_lfd::sim::{render, scene_with_offset, ImageTag};

    let world = WorldConfig::default();
    let scene = scene_with_offset(&world, 0.012);
    let image = render(&world, &scene, ImageTag::AfterPreMP);
    let images: Vec<_> = std::iter::repeat_n(image.clone(), 10).collect();
    let (ae, history) = train_ae(&images, AE_EPOCHS, AE_LEARNING_RATE, 3).unwrap();
    let final_mse = *history.test_mse.last().unwrap();
    assert!(
        final_mse < 1e-3,
        "single-scene reconstruction should memorize, test MSE {final_mse:e}"
    );
    assert_eq!(history.train_mse.len(), AE_EPOCHS);
    let latent = ae.encode(&image).unwrap();
    assert_eq!(latent.len(), ae.latent_dim());
    assert!(latent.iter().all(|v| v.is_finite()));
}

/// Scenes with clearly different corridor offsets must land on separated
/// latent codes once the reconstruction loss has something to distinguish.
#[test]
fn latents_separate_distinct_scenes() {
    use corridor_lfd::context_ae::{train_ae, AE_LEARNING_RATE};
    use corridor_lfd::sim::{render, scene_with_offset, ImageTag};

    let world = WorldConfig::default();
    let offsets = [-0.024, -0.012, 0.0, 0.012, 0.024];
    let images: Vec<_> = offsets
        .iter()
        .flat_map(|&o| {
            let scene = scene_with_offset(&world, o);
            [
                render(&world, &scene, ImageTag::AfterPreMP),
                render(&world, &scene, ImageTag::AfterPreMP),
            ]
        })
        .collect();
    let (ae, _) = train_ae(&images, 30, AE_LEARNING_RATE, 5).unwrap();
    let far_a = ae.encode(&images[0]).unwrap();
    let far_b = ae.encode(&images[8]).unwrap();
    let distance: f64 = far_a
        .iter()
        .zip(&far_b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(
        distance > 1e-3,
        "extreme offsets should separate in latent space, distance {distance:e}"
    );
    // Identical scenes still collapse to identical codes.
    assert_eq!(far_a, ae.encode(&images[1]).unwrap());
}
