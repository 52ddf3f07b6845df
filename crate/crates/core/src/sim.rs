//! Deterministic quasi-static tabletop world: a point gripper pushes an
//! axis-aligned box toward and through a corridor whose lateral position is
//! perturbed per episode. No momentum, no friction model — the object moves
//! only while a gripper motion segment drives one of its faces inward
//! (sticking contact), and stops dead at corridor walls.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of rendered scene images, in pixels.
pub const IMAGE_SIDE: usize = 64;
/// Gray level of corridor walls in renders (an exact 8-bit level so PGM
/// round-trips reproduce the float value).
pub const WALL_GRAY: f64 = 128.0 / 255.0;
/// Gray level of the object blob in renders.
pub const OBJECT_GRAY: f64 = 1.0;

/// Margin below which a gripper start point counts as resting on a face
/// rather than inside the object. Repeated face-tracking pushes leave the
/// gripper on a face up to rounding; 1 nm is far above f64 dust at these
/// magnitudes and far below any physical scale in the world.
const GHOST_EPS: f64 = 1e-9;
/// Rounding slack for wall-gap comparisons.
const GEOM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("gripper step of {length:.4} m exceeds the {max:.4} m contract")]
    StepTooLarge { length: f64, max: f64 },
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
}

/// Fixed world geometry and task thresholds (meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Table spans ±this in x and y.
    pub table_half_extent: f64,
    /// Workspace height limit for trajectory values.
    pub workspace_z_max: f64,
    /// Box half-extents (x, y).
    pub object_half_extents: (f64, f64),
    /// Free opening between the two corridor walls.
    pub corridor_gap_width: f64,
    /// Wall extent along y.
    pub corridor_wall_length: f64,
    /// y of the corridor entrance (walls span entrance..entrance+length).
    pub corridor_entrance_y: f64,
    /// y where the pre-movement leaves the object, short of the entrance.
    pub staging_y: f64,
    /// y the object must reach after crossing (past the corridor midpoint).
    pub goal_y: f64,
    /// Gripper height at or below which it can move the object.
    pub z_contact: f64,
    /// Alignment dead-band τ: |misalignment| below this needs no correction.
    pub dead_band: f64,
    /// Corridor offset is drawn uniformly from ±this.
    pub offset_range: f64,
    /// Object spawn center.
    pub object_start: (f64, f64),
    /// Gripper spawn position.
    pub gripper_home: (f64, f64, f64),
    /// Gripper height used while pushing.
    pub push_z: f64,
    /// Gripper height used to travel over the object without touching it.
    pub travel_z: f64,
    /// Maximum gripper displacement per step.
    pub max_step: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            table_half_extent: 0.30,
            workspace_z_max: 0.20,
            object_half_extents: (0.02, 0.02),
            corridor_gap_width: 0.08,
            corridor_wall_length: 0.12,
            corridor_entrance_y: 0.05,
            staging_y: -0.01,
            goal_y: 0.16,
            z_contact: 0.02,
            dead_band: 0.005,
            offset_range: 0.03,
            object_start: (0.0, -0.20),
            gripper_home: (0.0, -0.27, 0.08),
            push_z: 0.01,
            travel_z: 0.08,
            max_step: 0.005,
        }
    }
}

impl WorldConfig {
    pub fn corridor_mid_y(&self) -> f64 {
        self.corridor_entrance_y + self.corridor_wall_length / 2.0
    }

    pub fn corridor_exit_y(&self) -> f64 {
        self.corridor_entrance_y + self.corridor_wall_length
    }

    /// The two wall rectangles for a given corridor offset. Walls run from
    /// the table edges to the gap, so the only way through is the gap itself.
    pub fn wall_rects(&self, corridor_offset: f64) -> [Rect; 2] {
        let half_gap = self.corridor_gap_width / 2.0;
        let t = self.table_half_extent;
        [
            Rect {
                x0: -t,
                x1: corridor_offset - half_gap,
                y0: self.corridor_entrance_y,
                y1: self.corridor_exit_y(),
            },
            Rect {
                x0: corridor_offset + half_gap,
                x1: t,
                y0: self.corridor_entrance_y,
                y1: self.corridor_exit_y(),
            },
        ]
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.corridor_gap_width <= 2.0 * self.object_half_extents.0 {
            return Err(SimError::InvalidConfig(format!(
                "corridor gap {} must exceed object width {}",
                self.corridor_gap_width,
                2.0 * self.object_half_extents.0
            )));
        }
        if self.goal_y <= self.corridor_mid_y() {
            return Err(SimError::InvalidConfig(
                "goal must lie past the corridor midpoint".into(),
            ));
        }
        if self.push_z > self.z_contact || self.travel_z <= self.z_contact {
            return Err(SimError::InvalidConfig(
                "push height must touch and travel height must clear z_contact".into(),
            ));
        }
        if self.offset_range + self.corridor_gap_width / 2.0 >= self.table_half_extent {
            return Err(SimError::InvalidConfig(
                "corridor gap must stay on the table at extreme offsets".into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle, closed bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    /// Depth of mutual penetration: positive only when the interiors
    /// genuinely overlap on both axes.
    pub fn penetration(&self, other: &Rect) -> f64 {
        let ox = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let oy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        ox.min(oy)
    }
}

/// Full simulator state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub gripper: [f64; 3],
    pub object_center: [f64; 2],
    pub corridor_offset: f64,
    /// Latched true forever once the object touches a corridor wall.
    pub contact_with_corridor: bool,
}

impl SceneState {
    pub fn object_rect(&self, config: &WorldConfig) -> Rect {
        let (hx, hy) = config.object_half_extents;
        Rect {
            x0: self.object_center[0] - hx,
            x1: self.object_center[0] + hx,
            y0: self.object_center[1] - hy,
            y1: self.object_center[1] + hy,
        }
    }
}

/// Draws a fresh scene: fixed spawn poses, corridor offset uniform in ±range.
pub fn sample_scene(config: &WorldConfig, rng: &mut impl Rng) -> SceneState {
    let offset = rng.random_range(-config.offset_range..config.offset_range);
    scene_with_offset(config, offset)
}

/// A scene with an explicit corridor offset (test contexts, probes).
pub fn scene_with_offset(config: &WorldConfig, corridor_offset: f64) -> SceneState {
    SceneState {
        gripper: [
            config.gripper_home.0,
            config.gripper_home.1,
            config.gripper_home.2,
        ],
        object_center: [config.object_start.0, config.object_start.1],
        corridor_offset,
        contact_with_corridor: false,
    }
}

/// Advances the world by one gripper motion of at most `max_step` meters.
///
/// Contact rule: while the gripper is at or below `z_contact`, a motion
/// segment that ends strictly inside the object footprint pushes the entered
/// face along the entry axis so the face stays glued to the gripper. If that
/// translation would drive the object into a corridor wall, the object stops
/// at the wall face and `contact_with_corridor` latches.
pub fn step(
    config: &WorldConfig,
    state: &SceneState,
    gripper_target: [f64; 3],
) -> Result<SceneState, SimError> {
    let p0 = state.gripper;
    let p1 = gripper_target;
    let length = dist3(p0, p1);
    if length > config.max_step * (1.0 + 1e-9) {
        return Err(SimError::StepTooLarge {
            length,
            max: config.max_step,
        });
    }

    let mut next = *state;
    next.gripper = p1;

    // Contact requires the whole motion at contact height.
    if p0[2] > config.z_contact || p1[2] > config.z_contact {
        return Ok(next);
    }

    let rect = state.object_rect(config);
    let inside = |x: f64, y: f64| x > rect.x0 && x < rect.x1 && y > rect.y0 && y < rect.y1;
    let deep_inside = |x: f64, y: f64| {
        x > rect.x0 + GHOST_EPS
            && x < rect.x1 - GHOST_EPS
            && y > rect.y0 + GHOST_EPS
            && y < rect.y1 - GHOST_EPS
    };
    if !inside(p1[0], p1[1]) || deep_inside(p0[0], p0[1]) {
        // Not a pushing motion: either no penetration, or a ghost start
        // inside the footprint (which scripted and generated motions avoid).
        return Ok(next);
    }

    // Entry axis via the slab method: the face crossed last is the one hit.
    // A motion with no face crossing at all (a slide along a face the gripper
    // is resting on) moves nothing.
    let dx = p1[0] - p0[0];
    let dy = p1[1] - p0[1];
    let tx = entry_time(p0[0], dx, rect.x0, rect.x1);
    let ty = entry_time(p0[1], dy, rect.y0, rect.y1);
    if tx == f64::NEG_INFINITY && ty == f64::NEG_INFINITY {
        return Ok(next);
    }
    let push_x = tx > ty || (tx == ty && dx.abs() >= dy.abs());

    let (axis, delta) = if push_x {
        // The face tracks the gripper's final coordinate.
        if dx > 0.0 {
            (0usize, p1[0] - rect.x0)
        } else {
            (0usize, p1[0] - rect.x1)
        }
    } else if dy > 0.0 {
        (1usize, p1[1] - rect.y0)
    } else {
        (1usize, p1[1] - rect.y1)
    };

    let (allowed, hit_wall) = clamp_translation(config, state, &rect, axis, delta);
    next.object_center[axis] += allowed;
    if hit_wall {
        next.contact_with_corridor = true;
    }
    Ok(next)
}

/// Signed entry time of a 1-D motion into the slab [lo, hi]; −∞ when the
/// coordinate starts inside the slab (no crossing on this axis). Starting on
/// a face within rounding counts as outside, so sustained face-tracking
/// pushes keep their crossing.
fn entry_time(origin: f64, delta: f64, lo: f64, hi: f64) -> f64 {
    if delta > 0.0 && origin <= lo + GHOST_EPS {
        (lo - origin) / delta
    } else if delta < 0.0 && origin >= hi - GHOST_EPS {
        (hi - origin) / delta
    } else {
        f64::NEG_INFINITY
    }
}

/// Clamps a requested object translation along one axis against corridor
/// walls and table edges. Returns (allowed translation, touched a wall).
fn clamp_translation(
    config: &WorldConfig,
    state: &SceneState,
    rect: &Rect,
    axis: usize,
    delta: f64,
) -> (f64, bool) {
    if delta == 0.0 {
        return (0.0, false);
    }
    let mut allowed = delta;
    let mut hit_wall = false;
    for wall in config.wall_rects(state.corridor_offset) {
        // Only walls the moving box can actually meet on this axis matter:
        // they must overlap the box's extent on the *other* axis.
        let lateral_overlap = if axis == 0 {
            rect.y0 < wall.y1 && wall.y0 < rect.y1
        } else {
            rect.x0 < wall.x1 && wall.x0 < rect.x1
        };
        if !lateral_overlap {
            continue;
        }
        let gap = if axis == 0 {
            if delta > 0.0 {
                wall.x0 - rect.x1
            } else {
                wall.x1 - rect.x0
            }
        } else if delta > 0.0 {
            wall.y0 - rect.y1
        } else {
            wall.y1 - rect.y0
        };
        // `gap` is the signed free distance to this wall in the direction of
        // motion; clearly negative gaps mean the wall lies behind the box,
        // while a gap within rounding of zero is a box already touching it.
        if delta > 0.0 {
            if gap >= -GEOM_EPS && allowed >= gap - GEOM_EPS {
                allowed = gap.max(0.0);
                hit_wall = true;
            }
        } else if gap <= GEOM_EPS && allowed <= gap + GEOM_EPS {
            allowed = gap.min(0.0);
            hit_wall = true;
        }
    }

    // Table edges stop the box too, but are not corridor contact.
    let t = config.table_half_extent;
    let (lo, hi) = if axis == 0 {
        (rect.x0, rect.x1)
    } else {
        (rect.y0, rect.y1)
    };
    if delta > 0.0 {
        allowed = allowed.min(t - hi);
    } else {
        allowed = allowed.max(-t - lo);
    }
    (allowed, hit_wall)
}

/// Task success: the object center passed the corridor midpoint without the
/// object ever touching a wall.
pub fn check_success(config: &WorldConfig, state: &SceneState) -> bool {
    state.object_center[1] > config.corridor_mid_y() && !state.contact_with_corridor
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Which camera moment a scene image captures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageTag {
    AfterPreMP,
    AfterCorMP,
}

/// 64×64 grayscale top-down render, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub pixels: Vec<f64>,
    pub tag: ImageTag,
}

impl SceneImage {
    pub fn side(&self) -> usize {
        IMAGE_SIDE
    }

    /// Centroid (col, row) of pixels at the object gray level, if any.
    pub fn object_centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut cx, mut cy) = (0.0, 0.0);
        for row in 0..IMAGE_SIDE {
            for col in 0..IMAGE_SIDE {
                if self.pixels[row * IMAGE_SIDE + col] == OBJECT_GRAY {
                    n += 1;
                    cx += col as f64;
                    cy += row as f64;
                }
            }
        }
        if n == 0 {
            None
        } else {
            Some((cx / n as f64, cy / n as f64))
        }
    }
}

/// Projects world x (or y) to the continuous pixel coordinate.
pub fn world_to_pixel(config: &WorldConfig, coord: f64) -> f64 {
    (coord + config.table_half_extent) / (2.0 * config.table_half_extent) * IMAGE_SIDE as f64
}

/// Top-down orthographic render: dark background, mid-gray walls, bright
/// object (drawn last). Row 0 is the far edge (largest y).
pub fn render(config: &WorldConfig, state: &SceneState, tag: ImageTag) -> SceneImage {
    let mut pixels = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    let side = IMAGE_SIDE as f64;
    let span = 2.0 * config.table_half_extent;
    let fill = |rect: &Rect, level: f64, pixels: &mut Vec<f64>| {
        for row in 0..IMAGE_SIDE {
            let y = config.table_half_extent - (row as f64 + 0.5) / side * span;
            if y < rect.y0 || y > rect.y1 {
                continue;
            }
            for col in 0..IMAGE_SIDE {
                let x = -config.table_half_extent + (col as f64 + 0.5) / side * span;
                if x >= rect.x0 && x <= rect.x1 {
                    pixels[row * IMAGE_SIDE + col] = level;
                }
            }
        }
    };
    for wall in config.wall_rects(state.corridor_offset) {
        fill(&wall, WALL_GRAY, &mut pixels);
    }
    fill(&state.object_rect(config), OBJECT_GRAY, &mut pixels);
    SceneImage { pixels, tag }
}

/// One line of an episode log.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub t: f64,
    pub gripper: [f64; 3],
    pub object: [f64; 2],
    pub contact_with_corridor: bool,
}

/// Per-step episode trace, serializable as CSV for inspection.
#[derive(Debug, Clone, Default)]
pub struct EpisodeLog {
    pub records: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn push(&mut self, t: f64, state: &SceneState) {
        self.records.push(StepRecord {
            t,
            gripper: state.gripper,
            object: state.object_center,
            contact_with_corridor: state.contact_with_corridor,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,gripper_x,gripper_y,gripper_z,object_x,object_y,contact\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.t,
                r.gripper[0],
                r.gripper[1],
                r.gripper[2],
                r.object[0],
                r.object[1],
                r.contact_with_corridor as u8
            ));
        }
        out
    }
}

/// Drives the gripper through `waypoints`, splitting long legs into steps
/// within the contract, and returns the states visited (one per step).
pub fn execute_waypoints(
    config: &WorldConfig,
    start: &SceneState,
    waypoints: &[[f64; 3]],
) -> Result<Vec<SceneState>, SimError> {
    let mut states = Vec::new();
    let mut current = *start;
    for &wp in waypoints {
        loop {
            let remaining = dist3(current.gripper, wp);
            if remaining <= 1e-12 {
                break;
            }
            let target = if remaining <= config.max_step {
                wp
            } else {
                let f = config.max_step / remaining;
                [
                    current.gripper[0] + (wp[0] - current.gripper[0]) * f,
                    current.gripper[1] + (wp[1] - current.gripper[1]) * f,
                    current.gripper[2] + (wp[2] - current.gripper[2]) * f,
                ]
            };
            current = step(config, &current, target)?;
            states.push(current);
        }
    }
    Ok(states)
}
