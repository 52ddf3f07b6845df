//! Dataset construction and on-disk format: demonstrations as CSV
//! trajectories, scene images as PGM, and a TOML header carrying the world
//! config, split, and normalization statistics. All files are
//! byte-reproducible from the seed.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demo::{
    demonstrate, CorrectionKind, DemoError, Demonstration, Trajectory, TrajectoryPoint,
    POINTS_PER_PHASE,
};
use crate::sim::{sample_scene, ImageTag, SceneImage, WorldConfig, IMAGE_SIDE};

/// On-disk dataset format version.
pub const DATASET_VERSION: u32 = 1;

/// Default seed for dataset construction. Chosen so that all three test
/// strata retain room for unseen offsets at the full [`TEST_SEPARATION`]
/// from every training offset; most seeds leave the no-correction band
/// completely covered by training-offset neighborhoods.
pub const DEFAULT_DATASET_SEED: u64 = 18;

/// Default seed for drawing the evaluation contexts.
pub const DEFAULT_TEST_SEED: u64 = 1;

/// Minimum spacing between a test offset and every training offset.
pub const TEST_SEPARATION: f64 = 0.001;

/// Test offsets keep this far from the dead-band boundary so the required
/// action is unambiguous.
const STRATUM_MARGIN: f64 = 0.0015;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error("{attempts} consecutive demonstrations were rejected; giving up")]
    TooManyRejections { attempts: usize },
    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("incompatible dataset: {0}")]
    Incompatible(String),
}

/// The three movement phases of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pre,
    Cor,
    Post,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Pre, Phase::Cor, Phase::Post];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pre => "pre",
            Phase::Cor => "cor",
            Phase::Post => "post",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "pre" => Some(Phase::Pre),
            "cor" => Some(Phase::Cor),
            "post" => Some(Phase::Post),
            _ => None,
        }
    }
}

/// Per-dimension z-score statistics for one phase's trajectory values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Normalization statistics for all three phases, train split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub pre: PhaseStats,
    pub cor: PhaseStats,
    pub post: PhaseStats,
}

impl NormStats {
    pub fn phase(&self, phase: Phase) -> &PhaseStats {
        match phase {
            Phase::Pre => &self.pre,
            Phase::Cor => &self.cor,
            Phase::Post => &self.post,
        }
    }
}

/// Demonstration counts per correction kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub push: usize,
    pub pull: usize,
    pub none: usize,
}

/// Dataset metadata persisted as `header.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub seed: u64,
    pub n_demos: usize,
    /// First `n_train` demonstrations are the training split.
    pub n_train: usize,
    /// Demonstrations rejected and resampled during construction.
    pub rejections: usize,
    pub counts: KindCounts,
    pub world: WorldConfig,
    pub stats: NormStats,
}

/// A full demonstration corpus plus its metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub demonstrations: Vec<Demonstration>,
}

impl Dataset {
    pub fn train(&self) -> &[Demonstration] {
        &self.demonstrations[..self.header.n_train]
    }

    pub fn validation(&self) -> &[Demonstration] {
        &self.demonstrations[self.header.n_train..]
    }

    pub fn train_offsets(&self) -> Vec<f64> {
        self.train().iter().map(|d| d.corridor_offset).collect()
    }
}

/// Samples `n` scenes, demonstrates each, and assembles the dataset. The
/// first half of the demonstrations is the training split and supplies the
/// normalization statistics. A rejected demonstration is resampled; ten
/// consecutive rejections abort.
pub fn build_dataset(config: &WorldConfig, n: usize, seed: u64) -> Result<Dataset, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut demonstrations = Vec::with_capacity(n);
    let mut rejections = 0usize;
    let mut consecutive = 0usize;
    while demonstrations.len() < n {
        let scene = sample_scene(config, &mut rng);
        match demonstrate(config, &scene) {
            Ok(demo) => {
                consecutive = 0;
                demonstrations.push(demo);
            }
            Err(err) => {
                eprintln!("rejected demonstration: {err}");
                rejections += 1;
                consecutive += 1;
                if consecutive >= 10 {
                    return Err(DatasetError::TooManyRejections { attempts: consecutive });
                }
            }
        }
    }

    let n_train = n / 2;
    let counts = KindCounts {
        push: count_kind(&demonstrations, CorrectionKind::Push),
        pull: count_kind(&demonstrations, CorrectionKind::Pull),
        none: count_kind(&demonstrations, CorrectionKind::NoCorrection),
    };
    let train = &demonstrations[..n_train];
    let stats = NormStats {
        pre: phase_stats(train.iter().map(|d| &d.pre)),
        cor: phase_stats(train.iter().map(|d| &d.cor)),
        post: phase_stats(train.iter().map(|d| &d.post)),
    };

    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            seed,
            n_demos: n,
            n_train,
            rejections,
            counts,
            world: config.clone(),
            stats,
        },
        demonstrations,
    })
}

fn count_kind(demos: &[Demonstration], kind: CorrectionKind) -> usize {
    demos.iter().filter(|d| d.correction_kind == kind).count()
}

/// Per-dimension mean and population standard deviation over every point of
/// every trajectory; a near-zero spread falls back to 1 so z-scoring stays
/// finite.
pub(crate) fn phase_stats<'a>(trajs: impl Iterator<Item = &'a Trajectory> + Clone) -> PhaseStats {
    let dim = trajs.clone().next().map_or(0, |t| t.dim());
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for traj in trajs.clone() {
        for p in &traj.points {
            for (m, v) in mean.iter_mut().zip(&p.values) {
                *m += v;
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; dim];
    for traj in trajs {
        for p in &traj.points {
            for (s, (v, m)) in var.iter_mut().zip(p.values.iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd < 1e-9 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    PhaseStats { mean, std }
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

/// Writes a dataset directory: `header.toml`, `contexts.csv`,
/// `demos/demo_NNNN.csv`, and `images/demo_NNNN_{after_pre,after_cor}.pgm`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir.join("demos"))?;
    fs::create_dir_all(dir.join("images"))?;

    let header = toml::to_string_pretty(&dataset.header)
        .map_err(|e| DatasetError::Incompatible(format!("header serialization: {e}")))?;
    fs::write(dir.join("header.toml"), header)?;

    let mut contexts = String::from(
        "id,corridor_offset,kind,after_pre_x,after_pre_y,after_cor_x,after_cor_y,success\n",
    );
    for (i, demo) in dataset.demonstrations.iter().enumerate() {
        writeln!(
            contexts,
            "{},{},{},{},{},{},{},{}",
            i,
            demo.corridor_offset,
            demo.correction_kind.as_str(),
            demo.after_pre_object[0],
            demo.after_pre_object[1],
            demo.after_cor_object[0],
            demo.after_cor_object[1],
            demo.success as u8
        )
        .expect("string write");
        fs::write(
            dir.join(format!("demos/demo_{i:04}.csv")),
            demo_csv(demo),
        )?;
        write_pgm(
            &dir.join(format!("images/demo_{i:04}_after_pre.pgm")),
            &demo.after_pre_image,
        )?;
        write_pgm(
            &dir.join(format!("images/demo_{i:04}_after_cor.pgm")),
            &demo.after_cor_image,
        )?;
    }
    fs::write(dir.join("contexts.csv"), contexts)?;
    Ok(())
}

fn demo_csv(demo: &Demonstration) -> String {
    let mut out = String::from("phase,t,x,y,z\n");
    for (phase, traj) in [
        (Phase::Pre, &demo.pre),
        (Phase::Cor, &demo.cor),
        (Phase::Post, &demo.post),
    ] {
        for p in &traj.points {
            writeln!(
                out,
                "{},{},{},{},{}",
                phase.as_str(),
                p.t,
                p.values[0],
                p.values[1],
                p.values[2]
            )
            .expect("string write");
        }
    }
    out
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let header_path = dir.join("header.toml");
    let header_text = fs::read_to_string(&header_path)?;
    let header: DatasetHeader =
        toml::from_str(&header_text).map_err(|e| DatasetError::Parse {
            path: header_path.clone(),
            reason: e.to_string(),
        })?;
    if header.version != DATASET_VERSION {
        return Err(DatasetError::Incompatible(format!(
            "dataset version {} (expected {DATASET_VERSION})",
            header.version
        )));
    }

    let contexts_path = dir.join("contexts.csv");
    let contexts_text = fs::read_to_string(&contexts_path)?;
    let mut demonstrations = Vec::with_capacity(header.n_demos);
    for (lineno, line) in contexts_text.lines().enumerate().skip(1) {
        let parse_err = |reason: String| DatasetError::Parse {
            path: contexts_path.clone(),
            reason: format!("line {}: {reason}", lineno + 1),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, got {}", fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|e| parse_err(format!("id: {e}")))?;
        let num = |s: &str| -> Result<f64, DatasetError> {
            s.parse().map_err(|e| parse_err(format!("number: {e}")))
        };
        let corridor_offset = num(fields[1])?;
        let kind = CorrectionKind::parse(fields[2])
            .ok_or_else(|| parse_err(format!("unknown kind {:?}", fields[2])))?;
        let after_pre_object = [num(fields[3])?, num(fields[4])?];
        let after_cor_object = [num(fields[5])?, num(fields[6])?];
        let success = fields[7] == "1";

        let (pre, cor, post) = load_demo_csv(&dir.join(format!("demos/demo_{id:04}.csv")))?;
        let after_pre_image = read_pgm(
            &dir.join(format!("images/demo_{id:04}_after_pre.pgm")),
            ImageTag::AfterPreMP,
        )?;
        let after_cor_image = read_pgm(
            &dir.join(format!("images/demo_{id:04}_after_cor.pgm")),
            ImageTag::AfterCorMP,
        )?;
        demonstrations.push(Demonstration {
            corridor_offset,
            object_x_after_cor: after_cor_object[0],
            correction_kind: kind,
            pre,
            cor,
            post,
            after_pre_image,
            after_cor_image,
            after_pre_object,
            after_cor_object,
            success,
        });
    }

    if demonstrations.len() != header.n_demos {
        return Err(DatasetError::Incompatible(format!(
            "header claims {} demonstrations, found {}",
            header.n_demos,
            demonstrations.len()
        )));
    }
    Ok(Dataset {
        header,
        demonstrations,
    })
}

fn load_demo_csv(path: &Path) -> Result<(Trajectory, Trajectory, Trajectory), DatasetError> {
    let text = fs::read_to_string(path)?;
    let mut trajs = [Trajectory::default(), Trajectory::default(), Trajectory::default()];
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let parse_err = |reason: String| DatasetError::Parse {
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", lineno + 1),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, got {}", fields.len())));
        }
        let phase = Phase::parse(fields[0])
            .ok_or_else(|| parse_err(format!("unknown phase {:?}", fields[0])))?;
        let mut nums = [0.0; 4];
        for (slot, s) in nums.iter_mut().zip(&fields[1..]) {
            *slot = s
                .parse()
                .map_err(|e| parse_err(format!("number {s:?}: {e}")))?;
        }
        let idx = Phase::ALL.iter().position(|p| *p == phase).unwrap();
        trajs[idx].points.push(TrajectoryPoint {
            t: nums[0],
            values: nums[1..].to_vec(),
        });
    }
    for (traj, phase) in trajs.iter().zip(Phase::ALL) {
        if traj.len() != POINTS_PER_PHASE {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                reason: format!(
                    "phase {} has {} points (expected {POINTS_PER_PHASE})",
                    phase.as_str(),
                    traj.len()
                ),
            });
        }
    }
    let [pre, cor, post] = trajs;
    Ok((pre, cor, post))
}

/// Writes a binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, image: &SceneImage) -> Result<(), DatasetError> {
    let mut bytes = format!("P5\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n").into_bytes();
    bytes.extend(
        image
            .pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path, tag: ImageTag) -> Result<SceneImage, DatasetError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let parse_err = |reason: &str| DatasetError::Parse {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let expected_header = format!("P5\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n");
    if bytes.len() != expected_header.len() + IMAGE_SIDE * IMAGE_SIDE
        || !bytes.starts_with(expected_header.as_bytes())
    {
        return Err(parse_err("not a 64x64 maxval-255 binary PGM"));
    }
    let pixels = bytes[expected_header.len()..]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(SceneImage { pixels, tag })
}

// ---------------------------------------------------------------------------
// Test contexts
// ---------------------------------------------------------------------------

/// An evaluation scene: an unseen corridor offset and the action it requires.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestContext {
    pub id: usize,
    pub corridor_offset: f64,
    pub required: CorrectionKind,
}

/// Builds the 25-trial evaluation suite: 9 push-requiring, 10 pull-requiring,
/// and 6 no-correction offsets, each kept at least [`TEST_SEPARATION`] away
/// from every training offset (the separation is halved, with a warning, in
/// the unlikely event a stratum has no room left).
pub fn build_test_contexts(
    config: &WorldConfig,
    seed: u64,
    train_offsets: &[f64],
) -> Vec<TestContext> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = config.dead_band;
    let r = config.offset_range;
    let strata: [(f64, f64, usize, CorrectionKind); 3] = [
        (tau + STRATUM_MARGIN, r, 9, CorrectionKind::Push),
        (-r, -tau - STRATUM_MARGIN, 10, CorrectionKind::Pull),
        (
            -(tau - STRATUM_MARGIN),
            tau - STRATUM_MARGIN,
            6,
            CorrectionKind::NoCorrection,
        ),
    ];

    let mut sorted_train = train_offsets.to_vec();
    sorted_train.sort_by(f64::total_cmp);

    let mut contexts = Vec::with_capacity(25);
    for (lo, hi, count, required) in strata {
        let mut separation = TEST_SEPARATION;
        let intervals = loop {
            let intervals = allowed_intervals(lo, hi, &sorted_train, separation);
            let total: f64 = intervals.iter().map(|(a, b)| b - a).sum();
            if total > 1e-5 {
                break intervals;
            }
            separation /= 2.0;
            eprintln!(
                "warning: no room for {} test offsets at full separation; relaxing to {separation}",
                required.as_str()
            );
            if separation < 1e-7 {
                break vec![(lo, hi)];
            }
        };
        let mut chosen: Vec<f64> = Vec::with_capacity(count);
        while chosen.len() < count {
            let x = sample_from_intervals(&intervals, &mut rng);
            // Keep the 25 offsets pairwise distinct by a visible margin.
            if chosen.iter().all(|c| (c - x).abs() > 1e-5) {
                chosen.push(x);
            }
        }
        for x in chosen {
            contexts.push(TestContext {
                id: contexts.len(),
                corridor_offset: x,
                required,
            });
        }
    }
    contexts
}

/// `[lo, hi]` minus a `separation`-neighborhood of every train offset.
fn allowed_intervals(lo: f64, hi: f64, sorted_train: &[f64], separation: f64) -> Vec<(f64, f64)> {
    let mut intervals = Vec::new();
    let mut cursor = lo;
    for &t in sorted_train {
        let (a, b) = (t - separation, t + separation);
        if b <= cursor {
            continue;
        }
        if a >= hi {
            break;
        }
        if a > cursor {
            intervals.push((cursor, a));
        }
        cursor = cursor.max(b);
    }
    if cursor < hi {
        intervals.push((cursor, hi));
    }
    intervals
}

fn sample_from_intervals(intervals: &[(f64, f64)], rng: &mut impl Rng) -> f64 {
    let total: f64 = intervals.iter().map(|(a, b)| b - a).sum();
    let mut u = rng.random_range(0.0..total);
    for &(a, b) in intervals {
        let len = b - a;
        if u <= len {
            return a + u;
        }
        u -= len;
    }
    intervals.last().map(|&(_, b)| b).unwrap()
}

/// Writes test contexts as `id,corridor_offset,required` CSV.
pub fn save_test_contexts(path: &Path, contexts: &[TestContext]) -> Result<(), DatasetError> {
    let mut out = String::from("id,corridor_offset,required\n");
    for c in contexts {
        writeln!(out, "{},{},{}", c.id, c.corridor_offset, c.required.as_str())
            .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_test_contexts(path: &Path) -> Result<Vec<TestContext>, DatasetError> {
    let text = fs::read_to_string(path)?;
    let mut contexts = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let parse_err = |reason: String| DatasetError::Parse {
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", lineno + 1),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
        }
        contexts.push(TestContext {
            id: fields[0].parse().map_err(|e| parse_err(format!("id: {e}")))?,
            corridor_offset: fields[1]
                .parse()
                .map_err(|e| parse_err(format!("offset: {e}")))?,
            required: CorrectionKind::parse(fields[2])
                .ok_or_else(|| parse_err(format!("unknown kind {:?}", fields[2])))?,
        });
    }
    Ok(contexts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{render, scene_with_offset, ImageTag};

    fn config() -> WorldConfig {
        WorldConfig::default()
    }

    fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                    files.push((rel, fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn same_seed_builds_byte_identical_dataset_directories() {
        let cfg = config();
        let tmp = tempfile::tempdir().unwrap();
        let (dir_a, dir_b) = (tmp.path().join("a"), tmp.path().join("b"));
        for dir in [&dir_a, &dir_b] {
            let ds = build_dataset(&cfg, 12, 99).unwrap();
            save_dataset(&ds, dir).unwrap();
        }
        assert_eq!(dir_digest(&dir_a), dir_digest(&dir_b));
    }

    #[test]
    fn save_load_save_round_trips_bytes_exactly() {
        let cfg = config();
        let tmp = tempfile::tempdir().unwrap();
        let (dir_a, dir_b) = (tmp.path().join("a"), tmp.path().join("b"));
        let ds = build_dataset(&cfg, 10, 5).unwrap();
        save_dataset(&ds, &dir_a).unwrap();
        let loaded = load_dataset(&dir_a).unwrap();
        save_dataset(&loaded, &dir_b).unwrap();
        assert_eq!(dir_digest(&dir_a), dir_digest(&dir_b));
        assert_eq!(loaded.header, ds.header);
        assert_eq!(loaded.demonstrations[3].cor, ds.demonstrations[3].cor);
    }

    #[test]
    fn full_scale_dataset_has_both_kinds_well_represented() {
        let cfg = config();
        let ds = build_dataset(&cfg, 200, 0).unwrap();
        assert_eq!(ds.demonstrations.len(), 200);
        assert_eq!(ds.train().len(), 100);
        assert_eq!(ds.validation().len(), 100);
        assert!(ds.header.counts.push >= 30, "push {}", ds.header.counts.push);
        assert!(ds.header.counts.pull >= 30, "pull {}", ds.header.counts.pull);
        assert_eq!(
            ds.header.counts.push + ds.header.counts.pull + ds.header.counts.none,
            200
        );
        assert!(ds.demonstrations.iter().all(|d| d.success));
    }

    #[test]
    fn stats_come_from_the_training_split_only() {
        let cfg = config();
        let ds = build_dataset(&cfg, 8, 3).unwrap();
        // Oracle: recompute the pre-phase x mean over the first 4 demos.
        let train = &ds.demonstrations[..4];
        let mut sum = 0.0;
        let mut count = 0;
        for d in train {
            for p in &d.pre.points {
                sum += p.values[0];
                count += 1;
            }
        }
        let expected = sum / count as f64;
        assert!((ds.header.stats.pre.mean[0] - expected).abs() < 1e-12);
        // And it must differ from the all-demos mean unless by coincidence;
        // check the validation demos would shift it.
        let mut sum_all = sum;
        let mut count_all = count;
        for d in &ds.demonstrations[4..] {
            for p in &d.pre.points {
                sum_all += p.values[0];
                count_all += 1;
            }
        }
        let all_mean = sum_all / count_all as f64;
        if (all_mean - expected).abs() > 1e-9 {
            assert!((ds.header.stats.pre.mean[0] - all_mean).abs() > 1e-12);
        }
    }

    #[test]
    fn degenerate_spread_falls_back_to_unit_std() {
        // The pre phase's x never varies (straight push along x = offset
        // column is constant at the object start x), so its std guard kicks
        // in when all offsets share a column. Construct directly instead.
        let traj = Trajectory {
            points: (0..5)
                .map(|i| TrajectoryPoint {
                    t: i as f64 / 4.0,
                    values: vec![0.25, i as f64],
                })
                .collect(),
        };
        let stats = phase_stats(std::iter::once(&traj));
        assert_eq!(stats.std[0], 1.0);
        assert!(stats.std[1] > 1.0);
        assert!((stats.mean[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn pgm_round_trip_preserves_exact_gray_levels() {
        let cfg = config();
        let scene = scene_with_offset(&cfg, 0.021);
        let image = render(&cfg, &scene, ImageTag::AfterPreMP);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("scene.pgm");
        write_pgm(&path, &image).unwrap();
        let loaded = read_pgm(&path, ImageTag::AfterPreMP).unwrap();
        assert_eq!(loaded.pixels, image.pixels);
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.pgm");
        fs::write(&path, b"P5\n64 64\n255\nshort").unwrap();
        assert!(matches!(
            read_pgm(&path, ImageTag::AfterPreMP),
            Err(DatasetError::Parse { .. })
        ));
    }

    #[test]
    fn loader_rejects_other_versions() {
        let cfg = config();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ds");
        let mut ds = build_dataset(&cfg, 4, 1).unwrap();
        ds.header.version = 917;
        save_dataset(&ds, &dir).unwrap();
        assert!(matches!(
            load_dataset(&dir),
            Err(DatasetError::Incompatible(_))
        ));
    }

    #[test]
    fn test_contexts_are_stratified_unseen_and_in_range() {
        let cfg = config();
        let ds = build_dataset(&cfg, 200, DEFAULT_DATASET_SEED).unwrap();
        let train_offsets = ds.train_offsets();
        let contexts = build_test_contexts(&cfg, DEFAULT_TEST_SEED, &train_offsets);
        assert_eq!(contexts.len(), 25);
        let count = |k: CorrectionKind| contexts.iter().filter(|c| c.required == k).count();
        assert_eq!(count(CorrectionKind::Push), 9);
        assert_eq!(count(CorrectionKind::Pull), 10);
        assert_eq!(count(CorrectionKind::NoCorrection), 6);
        for c in &contexts {
            assert!(c.corridor_offset.abs() <= cfg.offset_range);
            assert_eq!(
                CorrectionKind::required(c.corridor_offset, cfg.dead_band),
                c.required
            );
            let nearest = train_offsets
                .iter()
                .map(|t| (t - c.corridor_offset).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(
                nearest >= TEST_SEPARATION,
                "offset {} is only {nearest} from a training offset",
                c.corridor_offset
            );
        }
        // Determinism.
        let again = build_test_contexts(&cfg, DEFAULT_TEST_SEED, &train_offsets);
        assert_eq!(contexts, again);
    }

    #[test]
    fn test_context_csv_round_trips() {
        let cfg = config();
        let contexts = build_test_contexts(&cfg, 4, &[0.0, 0.01, -0.015]);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("test_contexts.csv");
        save_test_contexts(&path, &contexts).unwrap();
        let loaded = load_test_contexts(&path).unwrap();
        assert_eq!(contexts, loaded);
    }

    #[test]
    fn allowed_interval_subtraction_is_correct() {
        // [0, 10] minus 1-neighborhoods of {2, 3, 7}.
        let intervals = allowed_intervals(0.0, 10.0, &[2.0, 3.0, 7.0], 1.0);
        assert_eq!(intervals, vec![(0.0, 1.0), (4.0, 6.0), (8.0, 10.0)]);
        // Neighborhood clipped at both ends.
        let intervals = allowed_intervals(0.0, 1.0, &[-0.5, 1.4], 1.0);
        assert!(intervals.is_empty());
    }
}
