//! Scripted expert that produces phase-labeled demonstrations: it always
//! performs the correct corrective action for the scene it is shown, so the
//! resulting dataset is a clean supervision signal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{
    check_success, execute_waypoints, render, ImageTag, SceneImage, SceneState, SimError,
    WorldConfig,
};

/// Points recorded per phase trajectory.
pub const POINTS_PER_PHASE: usize = 200;

/// Lateral clearance the gripper keeps from object faces while approaching.
const APPROACH_CLEARANCE: f64 = 0.015;

/// Gripper y short of an object face when approaching from below.
const PRE_APPROACH_CLEARANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("scripted demonstration failed for corridor offset {offset:.4}: {reason}")]
    Failed { offset: f64, reason: String },
}

/// Which corrective action the expert chose between the two pushes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrectionKind {
    /// Move the object toward +x (gripper pushes from the −x side).
    Push,
    /// Move the object toward −x (gripper lifts over and drags from +x).
    Pull,
    /// Alignment already within the dead band; hold position.
    NoCorrection,
}

impl CorrectionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorrectionKind::Push => "push",
            CorrectionKind::Pull => "pull",
            CorrectionKind::NoCorrection => "none",
        }
    }

    pub fn parse(s: &str) -> Option<CorrectionKind> {
        match s {
            "push" => Some(CorrectionKind::Push),
            "pull" => Some(CorrectionKind::Pull),
            "none" => Some(CorrectionKind::NoCorrection),
            _ => None,
        }
    }

    /// The action required for a given misalignment under dead band τ.
    pub fn required(misalignment: f64, dead_band: f64) -> CorrectionKind {
        if misalignment > dead_band {
            CorrectionKind::Push
        } else if misalignment < -dead_band {
            CorrectionKind::Pull
        } else {
            CorrectionKind::NoCorrection
        }
    }
}

/// One sample of a time-normalized trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    /// Phase time in [0, 1].
    pub t: f64,
    /// Cartesian sensorimotor values (gripper x, y, z here).
    pub values: Vec<f64>,
}

/// A time-normalized sequence of sensorimotor values — the unit of
/// demonstration and generation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.values.len())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Net change of one value dimension from first to last point.
    pub fn net_displacement(&self, dim: usize) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.values[dim] - a.values[dim],
            _ => 0.0,
        }
    }
}

/// A phase-labeled expert episode: the dataset record.
#[derive(Debug, Clone)]
pub struct Demonstration {
    /// Corridor x-offset of the episode (context for the corrective phase).
    pub corridor_offset: f64,
    /// Object x after the correction (context for the post phase).
    pub object_x_after_cor: f64,
    pub correction_kind: CorrectionKind,
    /// Approach-and-stage push; absolute gripper positions.
    pub pre: Trajectory,
    /// Corrective motion; values are relative to the gripper position at the
    /// end of the pre phase (the critical point), so the primitive is
    /// position-free.
    pub cor: Trajectory,
    /// Push through the corridor; absolute gripper positions.
    pub post: Trajectory,
    pub after_pre_image: SceneImage,
    pub after_cor_image: SceneImage,
    pub after_pre_object: [f64; 2],
    pub after_cor_object: [f64; 2],
    pub success: bool,
}

impl Demonstration {
    /// Gripper position where the corrective phase begins.
    pub fn critical_point(&self) -> [f64; 3] {
        let v = &self.pre.points.last().expect("pre phase non-empty").values;
        [v[0], v[1], v[2]]
    }
}

/// Resamples a waypoint polyline at `n` points spaced uniformly by arc
/// length; a degenerate (zero-length) polyline yields `n` copies of the
/// start.
fn sample_polyline(waypoints: &[[f64; 3]], n: usize) -> Vec<[f64; 3]> {
    assert!(!waypoints.is_empty() && n >= 2);
    let mut cumulative = vec![0.0];
    for pair in waypoints.windows(2) {
        let d: f64 = (0..3)
            .map(|k| (pair[1][k] - pair[0][k]).powi(2))
            .sum::<f64>()
            .sqrt();
        cumulative.push(cumulative.last().unwrap() + d);
    }
    let total = *cumulative.last().unwrap();
    if total == 0.0 {
        return vec![waypoints[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let s = total * i as f64 / (n - 1) as f64;
        while seg + 2 < cumulative.len() && cumulative[seg + 1] < s {
            seg += 1;
        }
        let seg_len = cumulative[seg + 1] - cumulative[seg];
        let f = if seg_len == 0.0 {
            0.0
        } else {
            (s - cumulative[seg]) / seg_len
        };
        let a = waypoints[seg];
        let b = waypoints[seg + 1];
        out.push([
            a[0] + (b[0] - a[0]) * f,
            a[1] + (b[1] - a[1]) * f,
            a[2] + (b[2] - a[2]) * f,
        ]);
    }
    out
}

/// Executes a sampled phase: steps through each point, recording the state
/// reached at every sample. Returns the trajectory (absolute values) and the
/// state after the final point.
fn run_phase(
    config: &WorldConfig,
    start: &SceneState,
    waypoints: &[[f64; 3]],
) -> Result<(Trajectory, SceneState), DemoError> {
    let samples = sample_polyline(waypoints, POINTS_PER_PHASE);
    let mut state = *start;
    let mut points = Vec::with_capacity(POINTS_PER_PHASE);
    for (i, &target) in samples.iter().enumerate() {
        // Consecutive samples may exceed the step contract only if a script
        // is malformed; execute_waypoints splits defensively.
        let states = execute_waypoints(config, &state, &[target])?;
        if let Some(last) = states.last() {
            state = *last;
        }
        points.push(TrajectoryPoint {
            t: i as f64 / (POINTS_PER_PHASE - 1) as f64,
            values: vec![state.gripper[0], state.gripper[1], state.gripper[2]],
        });
    }
    Ok((Trajectory { points }, state))
}

/// Waypoints for the staging push: descend behind the object and push it
/// straight up to the staging line.
fn pre_waypoints(config: &WorldConfig, scene: &SceneState) -> Vec<[f64; 3]> {
    let (_, hy) = config.object_half_extents;
    let (ox, oy) = (scene.object_center[0], scene.object_center[1]);
    let approach_y = oy - hy - PRE_APPROACH_CLEARANCE;
    let g = scene.gripper;
    vec![
        g,
        [ox, approach_y, config.travel_z],
        [ox, approach_y, config.push_z],
        // Push until the object center reaches the staging line.
        [ox, config.staging_y - hy, config.push_z],
    ]
}

/// Waypoints for the corrective phase given the signed misalignment `d`
/// (corridor offset minus object x). Push approaches from −x at push height;
/// pull lifts over the object to +x and drags back. Both finish by re-staging
/// the gripper centered behind the corrected object at push height, so the
/// phase's net x-displacement carries the correction's sign and size and the
/// next phase starts ready to push. No correction holds position, already
/// staged by the pre phase.
fn cor_waypoints(
    config: &WorldConfig,
    state: &SceneState,
    d: f64,
    kind: CorrectionKind,
) -> Vec<[f64; 3]> {
    let (hx, hy) = config.object_half_extents;
    let (ox, oy) = (state.object_center[0], state.object_center[1]);
    let g = state.gripper;
    let end_x = ox + d;
    let restage_y = oy - hy - APPROACH_CLEARANCE;
    match kind {
        CorrectionKind::NoCorrection => vec![g, g],
        CorrectionKind::Push => {
            let side_x = ox - hx - APPROACH_CLEARANCE;
            vec![
                g,
                [g[0], g[1], config.travel_z],
                [side_x, oy, config.travel_z],
                [side_x, oy, config.push_z],
                // Drive the −x face until the object center lands on ox + d.
                [end_x - hx, oy, config.push_z],
                [end_x - hx, oy, config.travel_z],
                [end_x, restage_y, config.travel_z],
                [end_x, restage_y, config.push_z],
            ]
        }
        CorrectionKind::Pull => {
            let side_x = ox + hx + APPROACH_CLEARANCE;
            vec![
                g,
                [g[0], g[1], config.travel_z],
                // Crossing over the object happens at travel height.
                [side_x, oy, config.travel_z],
                [side_x, oy, config.push_z],
                [end_x + hx, oy, config.push_z],
                [end_x + hx, oy, config.travel_z],
                [end_x, restage_y, config.travel_z],
                [end_x, restage_y, config.push_z],
            ]
        }
    }
}

/// Waypoints for the final push: the corrective phase leaves the gripper
/// centered behind the object at push height, so this is a single straight
/// push through the corridor until the object center reaches goal y.
fn post_waypoints(config: &WorldConfig, state: &SceneState) -> Vec<[f64; 3]> {
    let (_, hy) = config.object_half_extents;
    let g = state.gripper;
    vec![g, [g[0], config.goal_y - hy, config.push_z]]
}

/// Runs the scripted expert on a fresh scene and records all three phases.
///
/// The expert reads the true corridor offset, stages the object, corrects the
/// residual misalignment if it exceeds the dead band, and pushes through. A
/// demonstration that fails the task check is an error so callers can
/// resample.
pub fn demonstrate(
    config: &WorldConfig,
    scene: &SceneState,
) -> Result<Demonstration, DemoError> {
    let (pre, after_pre) = run_phase(config, scene, &pre_waypoints(config, scene))?;
    let d = after_pre.corridor_offset - after_pre.object_center[0];
    let kind = CorrectionKind::required(d, config.dead_band);

    let (cor_abs, after_cor) =
        run_phase(config, &after_pre, &cor_waypoints(config, &after_pre, d, kind))?;
    // Store the corrective phase relative to its own start.
    let critical = after_pre.gripper;
    let cor = Trajectory {
        points: cor_abs
            .points
            .iter()
            .map(|p| TrajectoryPoint {
                t: p.t,
                values: (0..3).map(|k| p.values[k] - critical[k]).collect(),
            })
            .collect(),
    };

    let (post, final_state) =
        run_phase(config, &after_cor, &post_waypoints(config, &after_cor))?;

    let success = check_success(config, &final_state);
    if !success {
        return Err(DemoError::Failed {
            offset: scene.corridor_offset,
            reason: format!(
                "episode ended at object {:?}, contact={}",
                final_state.object_center, final_state.contact_with_corridor
            ),
        });
    }

    Ok(Demonstration {
        corridor_offset: scene.corridor_offset,
        object_x_after_cor: after_cor.object_center[0],
        correction_kind: kind,
        pre,
        cor,
        post,
        after_pre_image: render(config, &after_pre, ImageTag::AfterPreMP),
        after_cor_image: render(config, &after_cor, ImageTag::AfterCorMP),
        after_pre_object: after_pre.object_center,
        after_cor_object: after_cor.object_center,
        success,
    })
}
