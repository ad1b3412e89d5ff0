//! Two-step inference, Best-of-K metrics, reports and plots.

mod ablate;
mod plot;
mod report;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablate::{
    parse_variant, run_ablation, run_cell, AblationCell, AblationMatrix, AblationResult, DataSource,
};
pub use plot::{sweep_svg, trajectory_svg, write_sweep_plot, write_trajectory_plot, SweepSeries};
pub use report::{emit_report, read_report, ReportFormat};

use crate::backbone::{
    destination_forward, encode_calls, trajectory_forward, BackboneError, CheckpointError,
    EncoderParams, Stage, StageCheckpoint,
};
use crate::data::TrajectoryWindow;
use crate::tensor::{Tensor, TensorError};

/// Environment variable holding the evaluation worker count.
pub const THREADS_ENV: &str = "PPT_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("evaluation set is empty")]
    Empty,
    #[error("expected a stage {expected} checkpoint, got stage {found}")]
    WrongStage { expected: Stage, found: Stage },
    #[error("destination and trajectory checkpoints have different encoder configurations")]
    ConfigMismatch,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Predictions for one window, world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `K` destination candidates.
    pub destinations: Vec<[f64; 2]>,
    /// `K` trajectories of `pred_len` steps; trajectory `k` was conditioned
    /// on destination `k` but re-predicts its own final step.
    pub trajectories: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub scene: String,
    pub pedestrian_id: i64,
    pub start_frame: i64,
    pub observed: Vec<[f64; 2]>,
    #[serde(flatten)]
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub num_modes: usize,
    pub pred_len: usize,
    pub entries: Vec<PredictionEntry>,
}

/// Stage-III destination and trajectory predictors, read-only.
pub struct Predictor {
    dest: EncoderParams,
    traj: EncoderParams,
    config_hash: String,
    encoder_calls: AtomicU64,
}

impl Predictor {
    pub fn new(dest: &StageCheckpoint, traj: &StageCheckpoint) -> Result<Self> {
        for (ck, expected) in [
            (dest, Stage::DestinationPredictor),
            (traj, Stage::TrajectoryPredictor),
        ] {
            if ck.stage != expected {
                return Err(EvalError::WrongStage {
                    expected,
                    found: ck.stage,
                });
            }
        }
        if dest.params.config != traj.params.config {
            return Err(EvalError::ConfigMismatch);
        }
        Ok(Self {
            dest: dest.params.frozen(),
            traj: traj.params.frozen(),
            config_hash: traj.config_hash.clone(),
            encoder_calls: AtomicU64::new(0),
        })
    }

    /// Loads `stage3_dest.ckpt` and `stage3_traj.ckpt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let dest = StageCheckpoint::load(&Stage::DestinationPredictor.checkpoint_path(dir))?;
        let traj = StageCheckpoint::load(&Stage::TrajectoryPredictor.checkpoint_path(dir))?;
        Self::new(&dest, &traj)
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn obs_len(&self) -> usize {
        self.dest.config.obs_len
    }

    pub fn pred_len(&self) -> usize {
        self.dest.config.pred_len
    }

    pub fn num_modes(&self) -> usize {
        self.dest.config.num_modes
    }

    /// Encoder invocations made by this predictor so far.
    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    /// One destination pass yielding `K` candidates, then one trajectory
    /// pass batched over the `K` candidates.
    pub fn predict(&self, observed: &[[f64; 2]]) -> Result<Prediction> {
        let cfg = &self.dest.config;
        if observed.len() != cfg.obs_len {
            return Err(EvalError::Shape(format!(
                "observed has {} steps, expected {}",
                observed.len(),
                cfg.obs_len
            )));
        }
        let origin = observed[cfg.obs_len - 1];
        let rel: Vec<f32> = observed
            .iter()
            .flat_map(|p| [(p[0] - origin[0]) as f32, (p[1] - origin[1]) as f32])
            .collect();
        let k = cfg.num_modes;
        let before = encode_calls();

        let single = Tensor::constant(rel.clone(), &[1, cfg.obs_len, 2])?;
        let dest = destination_forward(&self.dest, &single)?;
        let candidates = dest.candidates.reshape(&[k, 2])?;
        let repeated = Tensor::constant(rel.repeat(k), &[k, cfg.obs_len, 2])?;
        let traj = trajectory_forward(&self.traj, &repeated, &candidates)?;

        self.encoder_calls
            .fetch_add(encode_calls() - before, Ordering::Relaxed);
        let world = |x: f32, y: f32| [x as f64 + origin[0], y as f64 + origin[1]];
        let destinations = candidates
            .data()
            .chunks(2)
            .map(|c| world(c[0], c[1]))
            .collect();
        let trajectories = traj
            .future
            .data()
            .chunks(cfg.pred_len * 2)
            .map(|t| t.chunks(2).map(|c| world(c[0], c[1])).collect())
            .collect();
        Ok(Prediction {
            destinations,
            trajectories,
        })
    }

    /// Predicts every window from its first `obs_len` positions.
    pub fn predict_set(&self, windows: &[TrajectoryWindow]) -> Result<PredictionSet> {
        let obs = self.obs_len();
        let entries = with_pool(|| {
            windows
                .par_iter()
                .map(|w| {
                    if w.positions.len() < obs {
                        return Err(EvalError::Shape(format!(
                            "window has {} positions, need {obs}",
                            w.positions.len()
                        )));
                    }
                    Ok(PredictionEntry {
                        scene: w.scene.clone(),
                        pedestrian_id: w.pedestrian_id,
                        start_frame: w.start_frame,
                        observed: w.observed(obs).to_vec(),
                        prediction: self.predict(w.observed(obs))?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(PredictionSet {
            num_modes: self.num_modes(),
            pred_len: self.pred_len(),
            entries,
        })
    }
}

/// Runs `f` on a pool sized by `PPT_THREADS`, or rayon's default.
fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Best-of-K errors over `K` candidate futures. The two minima are taken
/// independently.
pub fn min_ade_fde(predictions: &[Vec<[f64; 2]>], ground_truth: &[[f64; 2]]) -> Result<(f64, f64)> {
    if predictions.is_empty() || ground_truth.is_empty() {
        return Err(EvalError::Shape(
            "no candidates or empty ground truth".into(),
        ));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for (k, cand) in predictions.iter().enumerate() {
        if cand.len() != ground_truth.len() {
            return Err(EvalError::Shape(format!(
                "candidate {k} has {} steps, ground truth has {}",
                cand.len(),
                ground_truth.len()
            )));
        }
        let errors: Vec<f64> = cand
            .iter()
            .zip(ground_truth)
            .map(|(&p, &g)| dist(p, g))
            .collect();
        let ade = errors.iter().sum::<f64>() / errors.len() as f64;
        best.0 = best.0.min(ade);
        best.1 = best.1.min(errors[errors.len() - 1]);
    }
    Ok(best)
}

/// Sum in a fixed binary tree over `values` sorted ascending, so the
/// result depends only on the multiset of values.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    fn tree(v: &[f64]) -> f64 {
        match v.len() {
            0 => 0.0,
            1 => v[0],
            n => tree(&v[..n / 2]) + tree(&v[n / 2..]),
        }
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    tree(&sorted)
}

fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub index: usize,
    pub min_ade: f64,
    pub min_fde: f64,
}

/// Field names and CSV column order are part of the output format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub min_ade: f64,
    pub min_fde: f64,
    pub num_windows: usize,
    pub config_hash: String,
    pub wall_clock_s: f64,
    /// Last observed position repeated over the horizon.
    pub baseline_ade: f64,
    pub baseline_fde: f64,
    pub windows: Vec<WindowMetrics>,
}

impl MetricsReport {
    /// Aggregates per-window records. Empty input is rejected.
    pub fn from_windows(
        label: &str,
        config_hash: &str,
        windows: Vec<WindowMetrics>,
        baseline: (f64, f64),
        wall_clock_s: f64,
    ) -> Result<Self> {
        if windows.is_empty() {
            return Err(EvalError::Empty);
        }
        let ade: Vec<f64> = windows.iter().map(|w| w.min_ade).collect();
        let fde: Vec<f64> = windows.iter().map(|w| w.min_fde).collect();
        Ok(Self {
            label: label.to_string(),
            min_ade: mean(&ade),
            min_fde: mean(&fde),
            num_windows: windows.len(),
            config_hash: config_hash.to_string(),
            wall_clock_s,
            baseline_ade: baseline.0,
            baseline_fde: baseline.1,
            windows,
        })
    }

    /// The report with wall-clock zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }
}

/// Mean ADE/FDE of predicting the last observed position for every step.
pub fn zero_velocity_baseline(windows: &[TrajectoryWindow], obs_len: usize) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut ade = Vec::with_capacity(windows.len());
    let mut fde = Vec::with_capacity(windows.len());
    for w in windows {
        if w.positions.len() <= obs_len {
            return Err(EvalError::Shape(format!(
                "window has {} positions, need more than {obs_len}",
                w.positions.len()
            )));
        }
        let last = w.positions[obs_len - 1];
        let future = w.future(obs_len);
        let (a, f) = min_ade_fde(&[vec![last; future.len()]], future)?;
        ade.push(a);
        fde.push(f);
    }
    Ok((mean(&ade), mean(&fde)))
}

/// Predicts and scores every window. Window `i` keeps index `i` in the
/// per-window records.
pub fn evaluate(
    predictor: &Predictor,
    windows: &[TrajectoryWindow],
    label: &str,
) -> Result<MetricsReport> {
    Ok(evaluate_detailed(predictor, windows, label)?.0)
}

/// [`evaluate`], also returning the predictions in window order.
pub fn evaluate_detailed(
    predictor: &Predictor,
    windows: &[TrajectoryWindow],
    label: &str,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    if windows.is_empty() {
        return Err(EvalError::Empty);
    }
    let started = Instant::now();
    let obs = predictor.obs_len();
    let expected = obs + predictor.pred_len();
    let scored = with_pool(|| {
        windows
            .par_iter()
            .enumerate()
            .map(|(index, w)| {
                if w.positions.len() != expected {
                    return Err(EvalError::Shape(format!(
                        "window {index} has {} positions, expected {expected}",
                        w.positions.len()
                    )));
                }
                let pred = predictor.predict(w.observed(obs))?;
                let (min_ade, min_fde) = min_ade_fde(&pred.trajectories, w.future(obs))?;
                let metrics = WindowMetrics {
                    index,
                    min_ade,
                    min_fde,
                };
                Ok((metrics, pred))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (records, predictions): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    let baseline = zero_velocity_baseline(windows, obs)?;
    let report = MetricsReport::from_windows(
        label,
        predictor.config_hash(),
        records,
        baseline,
        started.elapsed().as_secs_f64(),
    )?;
    Ok((report, predictions))
}

/// Mean over windows of the mean pairwise distance between destination
/// candidates.
pub fn destination_spread(predictions: &[Prediction]) -> f64 {
    let per_window: Vec<f64> = predictions
        .iter()
        .map(|p| {
            let d = &p.destinations;
            let mut pairs = Vec::new();
            for i in 0..d.len() {
                for j in i + 1..d.len() {
                    pairs.push(dist(d[i], d[j]));
                }
            }
            if pairs.is_empty() {
                0.0
            } else {
                mean(&pairs)
            }
        })
        .collect();
    if per_window.is_empty() {
        0.0
    } else {
        mean(&per_window)
    }
}
