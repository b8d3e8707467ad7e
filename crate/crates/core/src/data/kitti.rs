//! KITTI odometry ground truth: pose files, traveled distance and window
//! indexing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Camera-to-world pose: rotation block and translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity_at(translation: [f64; 3]) -> Self {
        Pose { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation }
    }

    /// Largest deviation of `R R^T` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        worst
    }
}

/// Ordered poses of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTrajectory {
    poses: Vec<Pose>,
    /// Frames per second (KITTI: 10).
    pub frame_rate: f64,
}

pub const KITTI_FRAME_RATE: f64 = 10.0;
const ORTHONORMAL_TOLERANCE: f64 = 1e-3;

impl PoseTrajectory {
    pub fn new(poses: Vec<Pose>, frame_rate: f64) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::domain("trajectory has no poses"));
        }
        if let Some((i, _)) = poses.iter().enumerate().find(|(_, p)| p.orthonormality_error() > ORTHONORMAL_TOLERANCE) {
            return Err(Error::domain(format!("pose {i} rotation is not orthonormal")));
        }
        Ok(PoseTrajectory { poses, frame_rate })
    }

    /// Trajectory with identity rotations through the given positions.
    pub fn from_positions(positions: &[[f64; 3]]) -> Result<Self> {
        Self::new(positions.iter().map(|&t| Pose::identity_at(t)).collect(), KITTI_FRAME_RATE)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }
}

/// Parses a KITTI pose file: one row-major 3x4 matrix (12 numbers) per line.
pub fn parse_kitti_poses(text: &str) -> Result<PoseTrajectory> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| Error::Parse { line: line_no, msg: format!("not a number: {tok:?}") }))
            .collect::<Result<_>>()?;
        if values.len() != 12 {
            return Err(Error::Parse { line: line_no, msg: format!("expected 12 values, found {}", values.len()) });
        }
        let row = |r: usize| [values[4 * r], values[4 * r + 1], values[4 * r + 2]];
        let pose = Pose { rotation: [row(0), row(1), row(2)], translation: [values[3], values[7], values[11]] };
        if pose.orthonormality_error() > ORTHONORMAL_TOLERANCE {
            return Err(Error::Parse { line: line_no, msg: "rotation block is not orthonormal".into() });
        }
        poses.push(pose);
    }
    PoseTrajectory::new(poses, KITTI_FRAME_RATE).map_err(|_| Error::Parse { line: 0, msg: "pose file is empty".into() })
}

/// Arc length of the path between frames `first` and `last`.
pub fn traveled_distance(traj: &PoseTrajectory, first: usize, last: usize) -> Result<f64> {
    if first >= last || last >= traj.len() {
        return Err(Error::domain(format!("window {first}..={last} invalid for {} poses", traj.len())));
    }
    Ok(traj.poses[first..=last]
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].translation, w[1].translation);
            ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt()
        })
        .sum())
}

/// One training/evaluation window: frames `start..start + len`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowDescriptor {
    pub sequence: String,
    pub start: usize,
    pub gt_distance: f64,
    pub frame_paths: Vec<PathBuf>,
}

/// Windows produced from one trajectory plus how many exceed the codec range.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Windowing {
    pub windows: Vec<WindowDescriptor>,
    pub over_range: usize,
}

/// Cuts `window`-frame windows every `stride` frames.
pub fn make_windows(
    sequence: &str,
    traj: &PoseTrajectory,
    image_paths: &[PathBuf],
    window: usize,
    stride: usize,
    d_max: f64,
) -> Result<Windowing> {
    if image_paths.len() != traj.len() {
        return Err(Error::Ingest(format!(
            "sequence {sequence}: {} images but {} poses",
            image_paths.len(),
            traj.len()
        )));
    }
    if window < 2 || stride == 0 {
        return Err(Error::domain(format!("window {window} / stride {stride} invalid")));
    }
    let mut out = Windowing::default();
    if traj.len() < window {
        log::warn!("sequence {sequence}: {} frames is shorter than one {window}-frame window", traj.len());
        return Ok(out);
    }
    for start in (0..=traj.len() - window).step_by(stride) {
        let gt = traveled_distance(traj, start, start + window - 1)?;
        if gt > d_max {
            out.over_range += 1;
        }
        out.windows.push(WindowDescriptor {
            sequence: sequence.to_string(),
            start,
            gt_distance: gt,
            frame_paths: image_paths[start..start + window].to_vec(),
        });
    }
    if out.over_range > 0 {
        log::warn!("sequence {sequence}: {} windows exceed {d_max} m and will be clamped", out.over_range);
    }
    Ok(out)
}

/// Named train/test sequence presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPreset {
    /// Train 00, 02, 08, 09; test 03-07 and 10.
    PaperBig,
    /// Train 00, 02-08; test 09 and 10.
    PaperSmall,
}

impl std::str::FromStr for SplitPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-big" => Ok(SplitPreset::PaperBig),
            "paper-small" => Ok(SplitPreset::PaperSmall),
            other => Err(Error::config(format!("unknown split preset {other:?} (paper-big | paper-small)"))),
        }
    }
}

/// Disjoint train and test sequence ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn new(train: Vec<String>, test: Vec<String>) -> Result<Self> {
        if let Some(dup) = train.iter().find(|s| test.contains(s)) {
            return Err(Error::config(format!("sequence {dup} is in both train and test")));
        }
        Ok(DatasetSplit { train, test })
    }

    /// Sequence 01 (highway) is left out of both presets.
    pub fn preset(preset: SplitPreset) -> Self {
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match preset {
            SplitPreset::PaperBig => DatasetSplit {
                train: ids(&["00", "02", "08", "09"]),
                test: ids(&["03", "04", "05", "06", "07", "10"]),
            },
            SplitPreset::PaperSmall => DatasetSplit {
                train: ids(&["00", "02", "03", "04", "05", "06", "07", "08"]),
                test: ids(&["09", "10"]),
            },
        }
    }
}

pub fn pose_file(root: &Path, sequence: &str) -> PathBuf {
    root.join("poses").join(format!("{sequence}.txt"))
}

pub fn image_dir(root: &Path, sequence: &str) -> PathBuf {
    root.join("sequences").join(sequence).join("image_2")
}

/// Loads poses and sorted left-camera image paths of one sequence.
pub fn load_sequence(root: &Path, sequence: &str) -> Result<(PoseTrajectory, Vec<PathBuf>)> {
    let dir = image_dir(root, sequence);
    if !dir.is_dir() {
        return Err(Error::Ingest(format!("missing sequence directory {}", dir.display())));
    }
    let poses_path = pose_file(root, sequence);
    let text = fs::read_to_string(&poses_path)
        .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", poses_path.display())))?;
    let traj = parse_kitti_poses(&text)?;
    let mut images: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm")))
        .collect();
    images.sort();
    Ok((traj, images))
}

/// Windows of every listed sequence plus the whole-meter ground-truth histogram.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestSummary {
    pub windows: Vec<WindowDescriptor>,
    pub per_sequence: Vec<(String, usize)>,
    pub histogram: BTreeMap<usize, u64>,
    pub over_range: usize,
}

pub fn ingest_sequences(root: &Path, sequences: &[String], window: usize, stride: usize, d_max: f64) -> Result<IngestSummary> {
    let mut summary = IngestSummary::default();
    for seq in sequences {
        let (traj, images) = load_sequence(root, seq)?;
        let w = make_windows(seq, &traj, &images, window, stride, d_max)?;
        summary.per_sequence.push((seq.clone(), w.windows.len()));
        summary.over_range += w.over_range;
        for win in &w.windows {
            *summary.histogram.entry(crate::losses::meter_class(win.gt_distance)).or_default() += 1;
        }
        summary.windows.extend(w.windows);
    }
    Ok(summary)
}

/// `sequence,start,gt_distance` lines with a header.
pub fn window_index_text(windows: &[WindowDescriptor]) -> String {
    let mut s = String::from("sequence,start,gt_distance\n");
    for w in windows {
        let _ = writeln!(s, "{},{},{:?}", w.sequence, w.start, w.gt_distance);
    }
    s
}

/// Rebuilds window descriptors from an index file and a KITTI root.
pub fn parse_window_index(text: &str, root: &Path, window: usize) -> Result<Vec<WindowDescriptor>> {
    let mut cache: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(bad("expected sequence,start,gt_distance".into()));
        }
        let start: usize = parts[1].parse().map_err(|_| bad(format!("bad start {:?}", parts[1])))?;
        let gt: f64 = parts[2].parse().map_err(|_| bad(format!("bad distance {:?}", parts[2])))?;
        let seq = parts[0].to_string();
        if !cache.contains_key(&seq) {
            let (_, images) = load_sequence(root, &seq)?;
            cache.insert(seq.clone(), images);
        }
        let images = &cache[&seq];
        if start + window > images.len() {
            return Err(bad(format!("window at {start} exceeds {} frames of {seq}", images.len())));
        }
        out.push(WindowDescriptor { sequence: seq, start, gt_distance: gt, frame_paths: images[start..start + window].to_vec() });
    }
    Ok(out)
}
