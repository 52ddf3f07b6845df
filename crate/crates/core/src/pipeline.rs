//! Experiment pipeline: trains the three segment primitives and the
//! parameter-matched monolithic baseline, rolls the learned policy out on the
//! stratified trial suite, and writes the metrics artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cnmp::{
    CnmpDescriptor, CnmpError, CnmpModel, CnmpTrainer, ContextSpec, TrainingItem, HIDDEN_WIDTH,
};
use crate::context_ae::{AeError, AeModel};
use crate::dataset::{phase_stats, Dataset, NormStats, Phase, TestContext};
use crate::demo::{
    demonstrate, CorrectionKind, DemoError, Demonstration, Trajectory, TrajectoryPoint,
    POINTS_PER_PHASE,
};
use crate::sim::{
    check_success, execute_waypoints, render, scene_with_offset, ImageTag, SceneImage, SceneState,
    WorldConfig,
};

/// The monolithic baseline must land within this percentage of the segmented
/// parameter total.
pub const PARAM_MATCH_TOLERANCE_PCT: f64 = 1.0;

/// Reference mean/max corrective- and post-segment errors (cm) quoted in the
/// summary for the segmented policy under ground-truth contexts.
pub const REFERENCE_SEGMENTED: ReferenceErrors = ReferenceErrors {
    cor: Some((0.80, 1.45)),
    post: Some((1.69, 3.19)),
};

/// Reference errors (cm) for the segmented policy under autoencoder contexts.
pub const REFERENCE_LATENT: ReferenceErrors = ReferenceErrors {
    cor: Some((0.80, 0.99)),
    post: Some((2.64, 4.83)),
};

/// Reference errors (cm) for the monolithic baseline.
pub const REFERENCE_MONOLITHIC: ReferenceErrors = ReferenceErrors {
    cor: Some((1.30, 1.92)),
    post: Some((5.75, 7.24)),
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Cnmp(#[from] CnmpError),
    #[error(transparent)]
    Ae(#[from] AeError),
    #[error("scripted expert failed on the trial scene: {0}")]
    GroundTruth(#[from] DemoError),
    #[error("trajectory grids differ: {generated} vs {reference} points")]
    GridMismatch { generated: usize, reference: usize },
    #[error("no layer width puts the parameter count within {tolerance_pct}% of {target}")]
    NoMatchingWidth { target: usize, tolerance_pct: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed trial record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Where the corrective and post primitives read their contexts from.
#[derive(Clone, Copy)]
pub enum ContextMode<'a> {
    /// Ground-truth scalars straight from the simulator state.
    Perfect,
    /// Latent codes produced by the trained scene autoencoder.
    Latent(&'a AeModel),
}

/// The three trained segment primitives.
#[derive(Debug, Clone)]
pub struct SegmentedModels {
    pub pre: CnmpModel,
    pub cor: CnmpModel,
    pub post: CnmpModel,
}

impl SegmentedModels {
    pub fn param_count(&self) -> usize {
        self.pre.param_count() + self.cor.param_count() + self.post.param_count()
    }
}

/// One point of a training diagnostic curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub value: f64,
}

/// Loss and validation traces recorded while a primitive trains.
#[derive(Debug, Clone, Default)]
pub struct TrainingCurves {
    /// Mean training NLL per window of updates.
    pub loss: Vec<CurvePoint>,
    /// Validation NLL at checkpoints spaced 5% of the budget apart.
    pub validation: Vec<CurvePoint>,
}

/// Diagnostic curves for the three segment primitives.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub pre: TrainingCurves,
    pub cor: TrainingCurves,
    pub post: TrainingCurves,
}

/// Training tuples for one phase: the phase trajectory plus the context its
/// primitive conditions on — nothing for pre, the corridor offset (or the
/// encoded after-pre render) for cor, the post-correction object x (or the
/// encoded after-cor render) for post.
pub fn phase_items(
    demos: &[Demonstration],
    phase: Phase,
    mode: ContextMode,
) -> Result<Vec<TrainingItem>, PipelineError> {
    demos
        .iter()
        .map(|d| {
            let (trajectory, context) = match phase {
                Phase::Pre => (d.pre.clone(), Vec::new()),
                Phase::Cor => (
                    d.cor.clone(),
                    context_values(mode, d.corridor_offset, &d.after_pre_image)?,
                ),
                Phase::Post => (
                    d.post.clone(),
                    context_values(mode, d.object_x_after_cor, &d.after_cor_image)?,
                ),
            };
            Ok(TrainingItem {
                trajectory,
                context,
            })
        })
        .collect()
}

fn context_values(
    mode: ContextMode,
    scalar: f64,
    image: &crate::sim::SceneImage,
) -> Result<Vec<f64>, PipelineError> {
    match mode {
        ContextMode::Perfect => Ok(vec![scalar]),
        ContextMode::Latent(ae) => Ok(ae.encode(image)?),
    }
}

/// Architecture and normalization metadata for one segment primitive.
///
/// Value clamps keep generated absolute positions on the table and inside the
/// workspace; corrective values are displacements from the critical point, so
/// they span at most the table diameter and workspace height both ways.
pub fn segment_descriptor(
    world: &WorldConfig,
    stats: &NormStats,
    phase: Phase,
    mode: ContextMode,
) -> CnmpDescriptor {
    let e = world.table_half_extent;
    let z = world.workspace_z_max;
    let (value_lo, value_hi) = match phase {
        Phase::Pre | Phase::Post => (vec![-e, -e, 0.0], vec![e, e, z]),
        Phase::Cor => (vec![-2.0 * e, -2.0 * e, -z], vec![2.0 * e, 2.0 * e, z]),
    };
    let context = match phase {
        Phase::Pre => ContextSpec::None,
        Phase::Cor | Phase::Post => match mode {
            ContextMode::Perfect => ContextSpec::Scalar {
                lo: -world.offset_range,
                hi: world.offset_range,
            },
            ContextMode::Latent(ae) => ae.context_spec(),
        },
    };
    CnmpDescriptor {
        output_dim: 3,
        context,
        value_stats: stats.phase(phase).clone(),
        value_lo,
        value_hi,
    }
}

/// SplitMix64 finalizer; keeps derived RNG streams disjoint even when base
/// seeds are adjacent integers.
fn mix_seed(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn phase_seed(seed: u64, phase: Phase) -> u64 {
    let tag = match phase {
        Phase::Pre => 1,
        Phase::Cor => 2,
        Phase::Post => 3,
    } as u64;
    mix_seed(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn monolithic_seed(seed: u64) -> u64 {
    mix_seed(seed ^ 4u64.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Deterministic validation score: condition each held-out demonstration on
/// its first point and average the NLL over every tenth target point.
fn validation_nll(model: &CnmpModel, items: &[TrainingItem]) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for item in items {
        let obs = [item.trajectory.points[0].clone()];
        for p in item.trajectory.points.iter().step_by(10) {
            total += model.point_nll(&obs, &item.context, p.t, &p.values)?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Trains one primitive for `budget` single-sample Adam updates, recording
/// the windowed training loss and periodic validation NLL. A non-finite loss
/// aborts with the trainer's diagnostics instead of saving poisoned weights.
fn train_one(
    descriptor: CnmpDescriptor,
    width: usize,
    items: &[TrainingItem],
    val_items: &[TrainingItem],
    budget: usize,
    seed: u64,
) -> Result<(CnmpModel, TrainingCurves), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CnmpModel::with_widths(descriptor, width, &mut rng);
    let mut trainer = CnmpTrainer::new(model);
    let window = (budget / 200).max(1);
    let check_every = (budget / 20).max(1);
    let mut curves = TrainingCurves::default();
    let mut acc = 0.0;
    let mut acc_n = 0usize;
    for step in 1..=budget {
        acc += trainer.train_step(items, &mut rng)?;
        acc_n += 1;
        if step % window == 0 || step == budget {
            curves.loss.push(CurvePoint {
                step,
                value: acc / acc_n as f64,
            });
            acc = 0.0;
            acc_n = 0;
        }
        if (step % check_every == 0 || step == budget)
            && curves.validation.last().map(|c| c.step) != Some(step)
        {
            curves.validation.push(CurvePoint {
                step,
                value: validation_nll(trainer.model(), val_items)?,
            });
        }
    }
    Ok((trainer.into_model(), curves))
}

/// Trains the pre, cor, and post primitives sequentially on the training
/// split, with contexts wired per `mode`.
pub fn train_segmented(
    dataset: &Dataset,
    mode: ContextMode,
    budget: usize,
    seed: u64,
) -> Result<(SegmentedModels, TrainReport), PipelineError> {
    let run = |phase: Phase| -> Result<(CnmpModel, TrainingCurves), PipelineError> {
        let descriptor =
            segment_descriptor(&dataset.header.world, &dataset.header.stats, phase, mode);
        let items = phase_items(dataset.train(), phase, mode)?;
        let val = phase_items(dataset.validation(), phase, mode)?;
        train_one(
            descriptor,
            HIDDEN_WIDTH,
            &items,
            &val,
            budget,
            phase_seed(seed, phase),
        )
    };
    let (pre, pre_curves) = run(Phase::Pre)?;
    let (cor, cor_curves) = run(Phase::Cor)?;
    let (post, post_curves) = run(Phase::Post)?;
    Ok((
        SegmentedModels { pre, cor, post },
        TrainReport {
            pre: pre_curves,
            cor: cor_curves,
            post: post_curves,
        },
    ))
}

/// Concatenates a demonstration's three phases into one absolute-valued
/// trajectory on a single [0, 1] clock, each phase keeping a third of the
/// span. The duplicate points at the phase boundaries are dropped.
pub fn monolithic_trajectory(demo: &Demonstration) -> Trajectory {
    let critical = demo.critical_point();
    let global = |phase: usize, t: f64| (phase as f64 + t) / 3.0;
    let mut points = Vec::with_capacity(3 * POINTS_PER_PHASE - 2);
    for p in &demo.pre.points {
        points.push(TrajectoryPoint {
            t: global(0, p.t),
            values: p.values.clone(),
        });
    }
    for p in demo.cor.points.iter().skip(1) {
        points.push(TrajectoryPoint {
            t: global(1, p.t),
            values: p.values.iter().zip(critical).map(|(v, c)| v + c).collect(),
        });
    }
    for p in demo.post.points.iter().skip(1) {
        points.push(TrajectoryPoint {
            t: global(2, p.t),
            values: p.values.clone(),
        });
    }
    Trajectory { points }
}

/// The scene renders for reconstruction training, in demonstration order:
/// after-pre then after-cor for each episode. The autoencoder's split takes
/// the first 90% for training, so a 200-demo corpus trains on 360 of 400.
pub fn scene_image_corpus(dataset: &Dataset) -> Vec<SceneImage> {
    dataset
        .demonstrations
        .iter()
        .flat_map(|d| [d.after_pre_image.clone(), d.after_cor_image.clone()])
        .collect()
}

/// Training tuples for the baseline: full concatenated trajectories with the
/// corridor offset as context.
pub fn monolithic_items(demos: &[Demonstration]) -> Vec<TrainingItem> {
    demos
        .iter()
        .map(|d| TrainingItem {
            trajectory: monolithic_trajectory(d),
            context: vec![d.corridor_offset],
        })
        .collect()
}

/// Exact parameter count of the CNMP architecture at a given layer width.
pub fn cnmp_param_count(width: usize, output_dim: usize, context_dim: usize) -> usize {
    let dense = |i: usize, o: usize| i * o + o;
    let encoder = dense(1 + output_dim, width) + 2 * dense(width, width);
    let decoder = dense(width + context_dim + 1, width)
        + 2 * dense(width, width)
        + dense(width, 2 * output_dim);
    encoder + decoder
}

/// The layer width whose parameter count lands closest to `target`, required
/// to fall within `tolerance_pct` percent.
pub fn monolithic_width(
    target: usize,
    output_dim: usize,
    context_dim: usize,
    tolerance_pct: f64,
) -> Result<usize, PipelineError> {
    let mut best = (usize::MAX, 0usize); // (abs diff, width)
    let mut width = 1;
    loop {
        let count = cnmp_param_count(width, output_dim, context_dim);
        let diff = count.abs_diff(target);
        if diff < best.0 {
            best = (diff, width);
        }
        if count >= target {
            break;
        }
        width += 1;
    }
    if best.0 as f64 * 100.0 <= tolerance_pct * target as f64 {
        Ok(best.1)
    } else {
        Err(PipelineError::NoMatchingWidth {
            target,
            tolerance_pct,
        })
    }
}

/// Trains the single-primitive baseline on full concatenated trajectories,
/// sized so its parameter count matches `target_params` within
/// [`PARAM_MATCH_TOLERANCE_PCT`].
pub fn train_monolithic(
    dataset: &Dataset,
    budget: usize,
    seed: u64,
    target_params: usize,
) -> Result<(CnmpModel, TrainingCurves), PipelineError> {
    let world = &dataset.header.world;
    let items = monolithic_items(dataset.train());
    let val = monolithic_items(dataset.validation());
    let e = world.table_half_extent;
    let descriptor = CnmpDescriptor {
        output_dim: 3,
        context: ContextSpec::Scalar {
            lo: -world.offset_range,
            hi: world.offset_range,
        },
        value_stats: phase_stats(items.iter().map(|i| &i.trajectory)),
        value_lo: vec![-e, -e, 0.0],
        value_hi: vec![e, e, world.workspace_z_max],
    };
    let width = monolithic_width(target_params, 3, 1, PARAM_MATCH_TOLERANCE_PCT)?;
    train_one(
        descriptor,
        width,
        &items,
        &val,
        budget,
        monolithic_seed(seed),
    )
}

/// Renders a diagnostic curve as `step,value` CSV.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("step,value\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.step, p.value);
    }
    out
}

// ---------------------------------------------------------------------------
// Trial execution
// ---------------------------------------------------------------------------

/// A frozen policy the evaluator can roll out.
pub enum Policy<'a> {
    Segmented {
        models: &'a SegmentedModels,
        mode: ContextMode<'a>,
    },
    Monolithic(&'a CnmpModel),
}

/// Mean and max pointwise Euclidean distance between two rollouts, in cm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryError {
    pub mean_cm: f64,
    pub max_cm: f64,
}

/// Compares two rollouts point by point. The grids must have equal length;
/// times are not compared, so trajectories parameterized on different clocks
/// (the baseline's single global span) remain comparable.
pub fn trajectory_error(
    generated: &Trajectory,
    reference: &Trajectory,
) -> Result<TrajectoryError, PipelineError> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(PipelineError::GridMismatch {
            generated: generated.len(),
            reference: reference.len(),
        });
    }
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (a, b) in generated.points.iter().zip(&reference.points) {
        let d = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        sum += d;
        max = max.max(d);
    }
    Ok(TrajectoryError {
        mean_cm: 100.0 * sum / generated.len() as f64,
        max_cm: 100.0 * max,
    })
}

/// Classifies a net object x-displacement against the dead band.
pub fn classify_displacement(dx: f64, dead_band: f64) -> CorrectionKind {
    if dx > dead_band {
        CorrectionKind::Push
    } else if dx < -dead_band {
        CorrectionKind::Pull
    } else {
        CorrectionKind::NoCorrection
    }
}

/// The persisted per-trial record: one row of `trials.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub id: usize,
    pub corridor_offset: f64,
    pub required: CorrectionKind,
    pub predicted: CorrectionKind,
    pub decision_match: bool,
    pub success: bool,
    /// Empty when the trial executed cleanly.
    pub failure_cause: String,
    pub pre_error: TrajectoryError,
    pub cor_error: TrajectoryError,
    pub post_error: TrajectoryError,
    /// Distance from each generated segment's first point to the gripper
    /// position it was conditioned on, in mm.
    pub start_offset_mm: [f64; 3],
    /// Net x-displacement of the generated corrective segment, in meters.
    pub cor_net_dx_m: f64,
}

/// A finished trial: the persisted row plus the trajectories the overlay
/// plots are drawn from.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub row: TrialRow,
    pub generated_cor: Trajectory,
    pub ground_truth_cor: Trajectory,
}

/// A conditioning observation pinning t = 0 to the given values.
fn anchor(values: [f64; 3]) -> TrajectoryPoint {
    TrajectoryPoint {
        t: 0.0,
        values: values.to_vec(),
    }
}

fn waypoint(values: &[f64]) -> [f64; 3] {
    [values[0], values[1], values[2]]
}

fn offset_mm(point: &[f64], reference: [f64; 3]) -> f64 {
    point
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
        * 1000.0
}

/// Executes one generated segment unless an earlier violation already ended
/// the trial; a simulator contract violation records its cause and freezes
/// the state where it happened.
fn run_segment(
    config: &WorldConfig,
    failure: &mut String,
    state: SceneState,
    waypoints: &[[f64; 3]],
) -> SceneState {
    if !failure.is_empty() {
        return state;
    }
    match execute_waypoints(config, &state, waypoints) {
        Ok(states) => states.last().copied().unwrap_or(state),
        Err(e) => {
            *failure = e.to_string();
            state
        }
    }
}

/// Reads the context for the next primitive from the world: the ground-truth
/// scalar in perfect mode, the encoded scene render in latent mode.
fn observe(
    mode: ContextMode,
    config: &WorldConfig,
    state: &SceneState,
    scalar: f64,
    tag: ImageTag,
) -> Result<Vec<f64>, PipelineError> {
    match mode {
        ContextMode::Perfect => Ok(vec![scalar]),
        ContextMode::Latent(ae) => Ok(ae.encode(&render(config, state, tag))?),
    }
}

/// Rolls the policy out on a fresh scene with the trial's corridor offset and
/// scores it against the scripted expert on the same scene.
pub fn execute_trial(
    config: &WorldConfig,
    policy: &Policy,
    trial: &TestContext,
) -> Result<TrialResult, PipelineError> {
    let scene = scene_with_offset(config, trial.corridor_offset);
    let truth = demonstrate(config, &scene)?;
    match policy {
        Policy::Segmented { models, mode } => {
            segmented_trial(config, models, *mode, trial, &scene, &truth)
        }
        Policy::Monolithic(model) => monolithic_trial(config, model, trial, &scene, &truth),
    }
}

fn segmented_trial(
    config: &WorldConfig,
    models: &SegmentedModels,
    mode: ContextMode,
    trial: &TestContext,
    scene: &SceneState,
    truth: &Demonstration,
) -> Result<TrialResult, PipelineError> {
    let grid = CnmpModel::default_time_grid();
    let mut state = *scene;
    let mut failure = String::new();

    // Approach-and-stage segment, conditioned on the gripper's start pose.
    let pre = models
        .pre
        .generate_trajectory(&[anchor(state.gripper)], &[], &grid)?;
    let start_pre = offset_mm(&pre.trajectory.points[0].values, state.gripper);
    let pre_path: Vec<[f64; 3]> = pre.trajectory.points.iter().map(|p| waypoint(&p.values)).collect();
    state = run_segment(config, &mut failure, state, &pre_path);

    // Observe, then correct. The corrective primitive works in displacements
    // from the critical point, so conditioning on the current gripper
    // position means anchoring t = 0 at zero displacement.
    let critical = state.gripper;
    let cor_context = observe(
        mode,
        config,
        &state,
        state.corridor_offset,
        ImageTag::AfterPreMP,
    )?;
    let cor = models
        .cor
        .generate_trajectory(&[anchor([0.0; 3])], &cor_context, &grid)?;
    let start_cor = offset_mm(&cor.trajectory.points[0].values, [0.0; 3]);
    let cor_path: Vec<[f64; 3]> = cor
        .trajectory
        .points
        .iter()
        .map(|p| {
            [
                critical[0] + p.values[0],
                critical[1] + p.values[1],
                critical[2] + p.values[2],
            ]
        })
        .collect();
    let object_before_cor = state.object_center[0];
    state = run_segment(config, &mut failure, state, &cor_path);
    let object_dx = state.object_center[0] - object_before_cor;

    // Observe again, then push through the corridor.
    let post_context = observe(
        mode,
        config,
        &state,
        state.object_center[0],
        ImageTag::AfterCorMP,
    )?;
    let post = models
        .post
        .generate_trajectory(&[anchor(state.gripper)], &post_context, &grid)?;
    let start_post = offset_mm(&post.trajectory.points[0].values, state.gripper);
    let post_path: Vec<[f64; 3]> = post.trajectory.points.iter().map(|p| waypoint(&p.values)).collect();
    state = run_segment(config, &mut failure, state, &post_path);

    let predicted = classify_displacement(object_dx, config.dead_band);
    let success = failure.is_empty() && check_success(config, &state);
    Ok(TrialResult {
        row: TrialRow {
            id: trial.id,
            corridor_offset: trial.corridor_offset,
            required: trial.required,
            predicted,
            decision_match: predicted == trial.required,
            success,
            failure_cause: failure,
            pre_error: trajectory_error(&pre.trajectory, &truth.pre)?,
            cor_error: trajectory_error(&cor.trajectory, &truth.cor)?,
            post_error: trajectory_error(&post.trajectory, &truth.post)?,
            start_offset_mm: [start_pre, start_cor, start_post],
            cor_net_dx_m: cor.trajectory.net_displacement(0),
        },
        generated_cor: cor.trajectory,
        ground_truth_cor: truth.cor.clone(),
    })
}

fn monolithic_trial(
    config: &WorldConfig,
    model: &CnmpModel,
    trial: &TestContext,
    scene: &SceneState,
    truth: &Demonstration,
) -> Result<TrialResult, PipelineError> {
    // One primitive on the global clock: query each phase's third of the
    // span on its own 200-point grid so segment errors compare like
    // against like, then execute the spans in order.
    let sub_grid = |phase: usize| -> Vec<f64> {
        (0..POINTS_PER_PHASE)
            .map(|k| (phase as f64 + k as f64 / (POINTS_PER_PHASE - 1) as f64) / 3.0)
            .collect()
    };
    let context = vec![trial.corridor_offset];
    let start = [anchor(scene.gripper)];
    let pre = model.generate_trajectory(&start, &context, &sub_grid(0))?;
    let cor = model.generate_trajectory(&start, &context, &sub_grid(1))?;
    let post = model.generate_trajectory(&start, &context, &sub_grid(2))?;

    let mut state = *scene;
    let mut failure = String::new();
    let paths: [Vec<[f64; 3]>; 3] = [&pre, &cor, &post].map(|g| {
        g.trajectory
            .points
            .iter()
            .map(|p| waypoint(&p.values))
            .collect()
    });
    let start_pre = offset_mm(&pre.trajectory.points[0].values, state.gripper);
    state = run_segment(config, &mut failure, state, &paths[0]);
    let start_cor = offset_mm(&cor.trajectory.points[0].values, state.gripper);
    let object_before_cor = state.object_center[0];
    state = run_segment(config, &mut failure, state, &paths[1]);
    let object_dx = state.object_center[0] - object_before_cor;
    let start_post = offset_mm(&post.trajectory.points[0].values, state.gripper);
    state = run_segment(config, &mut failure, state, &paths[2]);

    // The baseline predicts absolute positions, so its corrective span is
    // scored against the expert's corrective phase in absolute coordinates.
    let truth_critical = truth.critical_point();
    let truth_cor_abs = Trajectory {
        points: truth
            .cor
            .points
            .iter()
            .map(|p| TrajectoryPoint {
                t: p.t,
                values: p
                    .values
                    .iter()
                    .zip(truth_critical)
                    .map(|(v, c)| v + c)
                    .collect(),
            })
            .collect(),
    };

    let predicted = classify_displacement(object_dx, config.dead_band);
    let success = failure.is_empty() && check_success(config, &state);
    Ok(TrialResult {
        row: TrialRow {
            id: trial.id,
            corridor_offset: trial.corridor_offset,
            required: trial.required,
            predicted,
            decision_match: predicted == trial.required,
            success,
            failure_cause: failure,
            pre_error: trajectory_error(&pre.trajectory, &truth.pre)?,
            cor_error: trajectory_error(&cor.trajectory, &truth_cor_abs)?,
            post_error: trajectory_error(&post.trajectory, &truth.post)?,
            start_offset_mm: [start_pre, start_cor, start_post],
            cor_net_dx_m: cor.trajectory.net_displacement(0),
        },
        generated_cor: cor.trajectory,
        ground_truth_cor: truth_cor_abs,
    })
}

/// Classification-consistency check: the kind classified from the executed
/// object displacement agrees with the one implied by the generated
/// corrective segment's own net x-displacement.
pub fn classification_consistent(row: &TrialRow, dead_band: f64) -> bool {
    row.predicted == classify_displacement(row.cor_net_dx_m, dead_band)
}

/// Executes the trial suite, `threads` trials at a time. Results come back
/// ordered by position in `trials` and are independent of the thread count.
pub fn run_trials(
    config: &WorldConfig,
    policy: &Policy,
    trials: &[TestContext],
    threads: usize,
) -> Result<Vec<TrialResult>, PipelineError> {
    let threads = threads.clamp(1, trials.len().max(1));
    if threads == 1 {
        return trials
            .iter()
            .map(|t| execute_trial(config, policy, t))
            .collect();
    }
    let chunk = trials.len().div_ceil(threads);
    let mut out = Vec::with_capacity(trials.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = trials
            .chunks(chunk)
            .map(|batch| {
                scope.spawn(move || {
                    batch
                        .iter()
                        .map(|t| execute_trial(config, policy, t))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for handle in handles {
            out.extend(handle.join().expect("trial worker panicked"));
        }
    });
    out.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Metrics and report artifacts
// ---------------------------------------------------------------------------

/// Aggregates for one correction kind (or the whole suite).
#[derive(Debug, Clone, PartialEq)]
pub struct KindMetrics {
    pub label: &'static str,
    pub n: usize,
    pub decision_matches: usize,
    pub successes: usize,
    /// Mean of per-trial mean errors and max of per-trial max errors.
    pub pre: TrajectoryError,
    pub cor: TrajectoryError,
    pub post: TrajectoryError,
}

impl KindMetrics {
    pub fn match_pct(&self) -> f64 {
        percentage(self.decision_matches, self.n)
    }

    pub fn success_pct(&self) -> f64 {
        percentage(self.successes, self.n)
    }
}

fn percentage(count: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * count as f64 / n as f64
    }
}

/// Aggregate metrics over the trial suite: one row per correction kind plus
/// the all-trials row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub kinds: [KindMetrics; 3],
    pub total: KindMetrics,
}

fn aggregate(label: &'static str, rows: &[&TrialRow]) -> KindMetrics {
    let n = rows.len();
    let err = |f: fn(&TrialRow) -> TrajectoryError| {
        if n == 0 {
            return TrajectoryError {
                mean_cm: 0.0,
                max_cm: 0.0,
            };
        }
        TrajectoryError {
            mean_cm: rows.iter().map(|r| f(r).mean_cm).sum::<f64>() / n as f64,
            max_cm: rows.iter().map(|r| f(r).max_cm).fold(0.0, f64::max),
        }
    };
    KindMetrics {
        label,
        n,
        decision_matches: rows.iter().filter(|r| r.decision_match).count(),
        successes: rows.iter().filter(|r| r.success).count(),
        pre: err(|r| r.pre_error),
        cor: err(|r| r.cor_error),
        post: err(|r| r.post_error),
    }
}

/// Computes the aggregate report from persisted per-trial rows.
pub fn metrics(rows: &[TrialRow]) -> MetricsReport {
    let of_kind = |kind: CorrectionKind| -> Vec<&TrialRow> {
        rows.iter().filter(|r| r.required == kind).collect()
    };
    let all: Vec<&TrialRow> = rows.iter().collect();
    MetricsReport {
        kinds: [
            aggregate("push", &of_kind(CorrectionKind::Push)),
            aggregate("pull", &of_kind(CorrectionKind::Pull)),
            aggregate("none", &of_kind(CorrectionKind::NoCorrection)),
        ],
        total: aggregate("all", &all),
    }
}

/// Target error levels quoted in the human-readable summary, in cm.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceErrors {
    pub cor: Option<(f64, f64)>,
    pub post: Option<(f64, f64)>,
}

const TRIALS_HEADER: &str = "id,corridor_offset,required,predicted,decision_match,success,\
    failure_cause,pre_mean_cm,pre_max_cm,cor_mean_cm,cor_max_cm,post_mean_cm,post_max_cm,\
    start_pre_mm,start_cor_mm,start_post_mm,cor_net_dx_m";

/// Serializes per-trial rows as CSV. Floats use the shortest round-trip
/// form, so parsing the file back reproduces the rows bit for bit.
pub fn trials_csv(rows: &[TrialRow]) -> String {
    let mut out = String::from(TRIALS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.id,
            r.corridor_offset,
            r.required.as_str(),
            r.predicted.as_str(),
            r.decision_match,
            r.success,
            r.failure_cause.replace(',', ";"),
            r.pre_error.mean_cm,
            r.pre_error.max_cm,
            r.cor_error.mean_cm,
            r.cor_error.max_cm,
            r.post_error.mean_cm,
            r.post_error.max_cm,
            r.start_offset_mm[0],
            r.start_offset_mm[1],
            r.start_offset_mm[2],
            r.cor_net_dx_m,
        );
    }
    out
}

/// Parses a `trials.csv` produced by [`trials_csv`].
pub fn parse_trials_csv(text: &str) -> Result<Vec<TrialRow>, PipelineError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let bad = |reason: &str| PipelineError::MalformedRecord {
            line: i + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 17 {
            return Err(bad(&format!("expected 17 fields, got {}", f.len())));
        }
        let num =
            |s: &str| -> Result<f64, PipelineError> { s.parse().map_err(|_| bad("bad number")) };
        let flag = |s: &str| -> Result<bool, PipelineError> {
            s.parse().map_err(|_| bad("bad boolean"))
        };
        let kind = |s: &str| CorrectionKind::parse(s).ok_or_else(|| bad("bad correction kind"));
        rows.push(TrialRow {
            id: f[0].parse().map_err(|_| bad("bad id"))?,
            corridor_offset: num(f[1])?,
            required: kind(f[2])?,
            predicted: kind(f[3])?,
            decision_match: flag(f[4])?,
            success: flag(f[5])?,
            failure_cause: f[6].to_string(),
            pre_error: TrajectoryError {
                mean_cm: num(f[7])?,
                max_cm: num(f[8])?,
            },
            cor_error: TrajectoryError {
                mean_cm: num(f[9])?,
                max_cm: num(f[10])?,
            },
            post_error: TrajectoryError {
                mean_cm: num(f[11])?,
                max_cm: num(f[12])?,
            },
            start_offset_mm: [num(f[13])?, num(f[14])?, num(f[15])?],
            cor_net_dx_m: num(f[16])?,
        });
    }
    Ok(rows)
}

/// Serializes the aggregate table: per-kind and overall decision match,
/// success, and segment error statistics.
pub fn aggregate_csv(report: &MetricsReport) -> String {
    let mut out = String::from(
        "kind,n,decision_matches,match_pct,successes,success_pct,\
         pre_mean_cm,pre_max_cm,cor_mean_cm,cor_max_cm,post_mean_cm,post_max_cm\n",
    );
    for k in report.kinds.iter().chain([&report.total]) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            k.label,
            k.n,
            k.decision_matches,
            k.match_pct(),
            k.successes,
            k.success_pct(),
            k.pre.mean_cm,
            k.pre.max_cm,
            k.cor.mean_cm,
            k.cor.max_cm,
            k.post.mean_cm,
            k.post.max_cm,
        );
    }
    out
}

/// Renders the human-readable summary.
pub fn summary_text(
    rows: &[TrialRow],
    report: &MetricsReport,
    label: &str,
    references: &ReferenceErrors,
) -> String {
    let t = &report.total;
    let mut out = String::new();
    let _ = writeln!(out, "{}-trial evaluation: {label}", t.n);
    let _ = writeln!(out, "{}", "=".repeat(out.len() - 1));
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "decision match: {}/{} ({:.1}%)",
        t.decision_matches,
        t.n,
        t.match_pct()
    );
    let _ = writeln!(
        out,
        "task success:   {}/{} ({:.1}%)",
        t.successes,
        t.n,
        t.success_pct()
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "per correction kind     match     success");
    for k in &report.kinds {
        let _ = writeln!(
            out,
            "  {:<6} (n={:<2})       {:>5}     {:>7}",
            k.label,
            k.n,
            format!("{}/{}", k.decision_matches, k.n),
            format!("{}/{}", k.successes, k.n),
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "segment error vs scripted expert (cm, mean of means / max of maxes)"
    );
    let reference = |r: Option<(f64, f64)>| match r {
        Some((mean, max)) => format!("   (reference {mean:.2} / {max:.2})"),
        None => String::new(),
    };
    let _ = writeln!(out, "  pre    {:.2} / {:.2}", t.pre.mean_cm, t.pre.max_cm);
    let _ = writeln!(
        out,
        "  cor    {:.2} / {:.2}{}",
        t.cor.mean_cm,
        t.cor.max_cm,
        reference(references.cor)
    );
    let _ = writeln!(
        out,
        "  post   {:.2} / {:.2}{}",
        t.post.mean_cm,
        t.post.max_cm,
        reference(references.post)
    );
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.success)
        .map(|r| r.id.to_string())
        .collect();
    let _ = writeln!(out);
    if failed.is_empty() {
        let _ = writeln!(out, "failed trials: none");
    } else {
        let _ = writeln!(
            out,
            "failed trials: {} (ids {})",
            failed.len(),
            failed.join(", ")
        );
    }
    for r in rows.iter().filter(|r| !r.failure_cause.is_empty()) {
        let _ = writeln!(out, "  trial {}: {}", r.id, r.failure_cause);
    }
    out
}

/// A top-down overlay (x against y, in meters) of the expert's and the
/// policy's corrective trajectories for one trial.
pub fn cor_overlay_svg(result: &TrialResult) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 40.0;
    let both = result
        .ground_truth_cor
        .points
        .iter()
        .chain(&result.generated_cor.points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in both {
        x0 = x0.min(p.values[0]);
        x1 = x1.max(p.values[0]);
        y0 = y0.min(p.values[1]);
        y1 = y1.max(p.values[1]);
    }
    let span = ((x1 - x0).max(y1 - y0)).max(1e-4);
    let map = |x: f64, y: f64| {
        (
            PAD + (x - x0) / span * (SIZE - 2.0 * PAD),
            PAD + (y1 - y) / span * (SIZE - 2.0 * PAD),
        )
    };
    let polyline = |traj: &Trajectory, color: &str, dash: &str| {
        let pts: Vec<String> = traj
            .points
            .iter()
            .map(|p| {
                let (sx, sy) = map(p.values[0], p.values[1]);
                format!("{sx:.2},{sy:.2}")
            })
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash} points=\"{}\"/>\n",
            pts.join(" ")
        )
    };
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" \
         viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        out,
        "<text x=\"{PAD}\" y=\"24\" font-family=\"monospace\" font-size=\"14\">trial {} \
         ({}, offset {:.4} m)</text>",
        result.row.id,
        result.row.required.as_str(),
        result.row.corridor_offset
    );
    out.push_str(&polyline(&result.ground_truth_cor, "#1f77b4", ""));
    out.push_str(&polyline(
        &result.generated_cor,
        "#d62728",
        " stroke-dasharray=\"6 4\"",
    ));
    let _ = writeln!(
        out,
        "<text x=\"{PAD}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
         fill=\"#1f77b4\">expert</text>",
        SIZE - 24.0
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
         fill=\"#d62728\">generated</text>",
        PAD + 70.0,
        SIZE - 24.0
    );
    out.push_str("</svg>\n");
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `trials.csv`, `aggregate.csv`, `summary.txt`, and per-trial SVG
/// overlays of the corrective segment into `dir`.
pub fn write_report(
    dir: &Path,
    results: &[TrialResult],
    label: &str,
    references: &ReferenceErrors,
) -> Result<MetricsReport, PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let rows: Vec<TrialRow> = results.iter().map(|r| r.row.clone()).collect();
    let report = metrics(&rows);
    write_file(&dir.join("trials.csv"), &trials_csv(&rows))?;
    write_file(&dir.join("aggregate.csv"), &aggregate_csv(&report))?;
    write_file(
        &dir.join("summary.txt"),
        &summary_text(&rows, &report, label, references),
    )?;
    for r in results {
        write_file(
            &dir.join(format!("cor_overlay_trial_{:02}.svg", r.row.id)),
            &cor_overlay_svg(r),
        )?;
    }
    Ok(report)
}

/// Rebuilds `aggregate.csv` and `summary.txt` from a persisted `trials.csv`;
/// the artifacts come out byte-identical to the originals.
pub fn regenerate_report(
    dir: &Path,
    label: &str,
    references: &ReferenceErrors,
) -> Result<MetricsReport, PipelineError> {
    let path = dir.join("trials.csv");
    let text = fs::read_to_string(&path).map_err(|source| PipelineError::Io { path, source })?;
    let rows = parse_trials_csv(&text)?;
    let report = metrics(&rows);
    write_file(&dir.join("aggregate.csv"), &aggregate_csv(&report))?;
    write_file(
        &dir.join("summary.txt"),
        &summary_text(&rows, &report, label, references),
    )?;
    Ok(report)
}
