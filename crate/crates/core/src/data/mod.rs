//! Trajectory files, fixed-length windows and coordinate normalization.
//!
//! Input files hold one record per line, `frame_id pedestrian_id x y`,
//! whitespace separated. Blank lines and lines starting with `#` are
//! skipped. Integral ids written as floats (`780.0`) are accepted.

mod synth;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use synth::{synth_generate, SynthKind};

pub const DEFAULT_FRAME_STRIDE: i64 = 10;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: duplicate record for frame {frame}, pedestrian {pedestrian}")]
    Duplicate {
        path: PathBuf,
        line: usize,
        frame: i64,
        pedestrian: i64,
    },
    #[error("invalid windowing options: {0}")]
    Options(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub frame_id: i64,
    pub pedestrian_id: i64,
    pub x: f64,
    pub y: f64,
}

/// One agent's contiguous path of `positions.len()` equally spaced samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    pub positions: Vec<[f64; 2]>,
    pub pedestrian_id: i64,
    pub scene: String,
    pub start_frame: i64,
}

impl TrajectoryWindow {
    pub fn observed(&self, obs_len: usize) -> &[[f64; 2]] {
        &self.positions[..obs_len]
    }

    pub fn future(&self, obs_len: usize) -> &[[f64; 2]] {
        &self.positions[obs_len..]
    }

    /// Translates so the last observed position becomes the origin.
    pub fn normalize(&self, obs_len: usize) -> NormalizedWindow {
        let origin = self.positions[obs_len - 1];
        NormalizedWindow {
            positions: self
                .positions
                .iter()
                .map(|p| [p[0] - origin[0], p[1] - origin[1]])
                .collect(),
            origin,
        }
    }
}

/// Window coordinates relative to `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWindow {
    pub positions: Vec<[f64; 2]>,
    pub origin: [f64; 2],
}

impl NormalizedWindow {
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] + self.origin[0], p[1] + self.origin[1]]
    }

    pub fn denormalize(&self) -> Vec<[f64; 2]> {
        self.positions.iter().map(|&p| self.to_world(p)).collect()
    }
}

fn parse_number(field: &str) -> Option<f64> {
    field.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_id(field: &str) -> Option<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Some(v);
    }
    parse_number(field)
        .filter(|v| v.fract() == 0.0 && v.abs() < 9.0e15)
        .map(|v| v as i64)
}

/// Parses a whole file body; `path` is only used in diagnostics.
pub fn parse_records(text: &str, path: &Path) -> Result<Vec<RawRecord>, DataError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let err = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if fields.len() < 4 {
            return Err(err(format!(
                "expected 4 fields, found {}: {trimmed:?}",
                fields.len()
            )));
        }
        let frame_id = parse_id(fields[0])
            .ok_or_else(|| err(format!("frame id {:?} is not an integer", fields[0])))?;
        let pedestrian_id = parse_id(fields[1])
            .ok_or_else(|| err(format!("pedestrian id {:?} is not an integer", fields[1])))?;
        let x = parse_number(fields[2])
            .ok_or_else(|| err(format!("x coordinate {:?} is not a number", fields[2])))?;
        let y = parse_number(fields[3])
            .ok_or_else(|| err(format!("y coordinate {:?} is not a number", fields[3])))?;
        if !seen.insert((frame_id, pedestrian_id)) {
            return Err(DataError::Duplicate {
                path: path.to_path_buf(),
                line,
                frame: frame_id,
                pedestrian: pedestrian_id,
            });
        }
        records.push(RawRecord {
            frame_id,
            pedestrian_id,
            x,
            y,
        });
    }
    records.sort_by_key(|r| (r.pedestrian_id, r.frame_id));
    Ok(records)
}

/// Reads a trajectory file, sorted by `(pedestrian_id, frame_id)`.
pub fn load_trajectory_file(path: &Path) -> Result<Vec<RawRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_records(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowOptions {
    pub window_len: usize,
    /// Frame-id spacing between consecutive samples of a run.
    pub frame_stride: i64,
    /// Samples to advance between consecutive windows.
    pub window_stride: usize,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self {
            window_len: 20,
            frame_stride: DEFAULT_FRAME_STRIDE,
            window_stride: 1,
        }
    }
}

/// Cuts every run of `window_len` consecutive samples into windows. Two
/// samples are consecutive when their frame ids differ by exactly
/// `frame_stride`; anything else breaks the run.
pub fn window_trajectories(
    records: &[RawRecord],
    scene: &str,
    opts: WindowOptions,
) -> Result<Vec<TrajectoryWindow>, DataError> {
    if opts.frame_stride <= 0 || opts.window_stride == 0 || opts.window_len == 0 {
        return Err(DataError::Options(format!("{opts:?}")));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.pedestrian_id, r.frame_id));
    let mut windows = Vec::new();
    let mut emit = |run: &[RawRecord]| {
        let mut start = 0;
        while start + opts.window_len <= run.len() {
            let slice = &run[start..start + opts.window_len];
            windows.push(TrajectoryWindow {
                positions: slice.iter().map(|r| [r.x, r.y]).collect(),
                pedestrian_id: slice[0].pedestrian_id,
                scene: scene.to_string(),
                start_frame: slice[0].frame_id,
            });
            start += opts.window_stride;
        }
    };
    let mut run_start = 0;
    for i in 1..=sorted.len() {
        let breaks = i == sorted.len()
            || sorted[i].pedestrian_id != sorted[i - 1].pedestrian_id
            || sorted[i].frame_id - sorted[i - 1].frame_id != opts.frame_stride;
        if breaks {
            emit(&sorted[run_start..i]);
            run_start = i;
        }
    }
    Ok(windows)
}

/// Loads and windows several files, tagging windows with each file stem.
pub fn load_windows(
    paths: &[PathBuf],
    opts: WindowOptions,
) -> Result<Vec<TrajectoryWindow>, DataError> {
    let mut out = Vec::new();
    for path in paths {
        let records = load_trajectory_file(path)?;
        let scene = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.extend(window_trajectories(&records, &scene, opts)?);
    }
    Ok(out)
}

/// Serializes windows in the input file format. Window `i` becomes
/// pedestrian `i` with frames `0, frame_stride, ...`.
pub fn format_windows(windows: &[TrajectoryWindow], frame_stride: i64) -> String {
    let mut out = String::from("# frame_id pedestrian_id x y\n");
    for (i, w) in windows.iter().enumerate() {
        for (t, p) in w.positions.iter().enumerate() {
            let _ = writeln!(
                out,
                "{} {} {:?} {:?}",
                t as i64 * frame_stride,
                i,
                p[0],
                p[1]
            );
        }
    }
    out
}

pub fn write_windows(
    windows: &[TrajectoryWindow],
    frame_stride: i64,
    path: &Path,
) -> Result<(), DataError> {
    std::fs::write(path, format_windows(windows, frame_stride)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
