//! Grids of pipeline variants, destination-diversity weights and seeds.
//!
//! Matrix files use `key = value` lines with `#` comments:
//!
//! | key | meaning |
//! |-----|---------|
//! | `variants` | comma list of `task-I+II+III` (or `full`), `task-II+III`, `task-I+III`, `task-III`; suffix `-nokd` disables distillation |
//! | `lambda_d` | comma list of diversity weights; default the config value |
//! | `seeds` | comma list of seeds; default the config seed |
//! | `synth_kind`, `synth_train`, `synth_test`, `synth_seed` | train and test on synthetic windows instead of the config's files |
//! | `out_dir` | report directory, default `ablation` next to the matrix file |
//! | `report_format` | `json` (default) or `csv` |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{destination_spread, evaluate_detailed, MetricsReport, Predictor, ReportFormat};
use crate::data::{synth_generate, SynthKind, TrajectoryWindow};
use crate::pipeline::{PipelineError, PipelineVariant, TrainConfig, Trainer};

/// Where training and test windows come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    ConfigFiles,
    Synthetic {
        kind: SynthKind,
        train: usize,
        test: usize,
        seed: u64,
    },
}

impl DataSource {
    /// Train and test windows; synthetic test windows use the next seed.
    pub fn synth_windows(&self) -> Option<(Vec<TrajectoryWindow>, Vec<TrajectoryWindow>)> {
        match *self {
            DataSource::ConfigFiles => None,
            DataSource::Synthetic {
                kind,
                train,
                test,
                seed,
            } => Some((
                synth_generate(kind, train, seed),
                synth_generate(kind, test, seed.wrapping_add(1)),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationMatrix {
    pub variants: Vec<PipelineVariant>,
    pub lambda_d: Vec<f32>,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub out_dir: PathBuf,
    pub report_format: ReportFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: PipelineVariant,
    pub lambda_d: f32,
    pub seed: u64,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!("{}_ld{}_s{}", self.variant.name(), self.lambda_d, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub cell: AblationCell,
    pub report: MetricsReport,
    /// Mean pairwise distance between destination candidates.
    pub destination_spread: f64,
}

pub fn parse_variant(s: &str) -> Option<PipelineVariant> {
    let (body, distillation) = match s.strip_suffix("-nokd") {
        Some(b) => (b, false),
        None => (s, true),
    };
    let (next_position_task, destination_task) = match body {
        "full" | "task-I+II+III" => (true, true),
        "task-II+III" => (false, true),
        "task-I+III" => (true, false),
        "task-III" => (false, false),
        _ => return None,
    };
    Some(PipelineVariant {
        next_position_task,
        destination_task,
        distillation,
    })
}

fn list<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| format!("line {line}: bad {key} entry {s:?}"))
        })
        .collect()
}

impl AblationMatrix {
    /// `base` is the matrix file's directory; `config` supplies defaults.
    pub fn parse(text: &str, base: &Path, config: &TrainConfig) -> Result<Self, String> {
        let mut m = AblationMatrix {
            variants: vec![PipelineVariant::FULL],
            lambda_d: vec![config.weights.lambda_d],
            seeds: vec![config.seed],
            data: DataSource::ConfigFiles,
            out_dir: base.join("ablation"),
            report_format: ReportFormat::Json,
        };
        let (mut kind, mut train, mut test, mut synth_seed) = (None, 2000usize, 500usize, 0u64);
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| format!("line {line}: expected `key = value`"))?;
            let one = |v: &str| -> Result<u64, String> {
                v.parse()
                    .map_err(|_| format!("line {line}: bad {key} value {v:?}"))
            };
            match key {
                "variants" => {
                    m.variants = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            parse_variant(s)
                                .ok_or_else(|| format!("line {line}: unknown variant {s:?}"))
                        })
                        .collect::<Result<_, _>>()?
                }
                "lambda_d" => m.lambda_d = list(line, key, value)?,
                "seeds" => m.seeds = list(line, key, value)?,
                "synth_kind" => kind = Some(value.parse::<SynthKind>()?),
                "synth_train" => train = one(value)? as usize,
                "synth_test" => test = one(value)? as usize,
                "synth_seed" => synth_seed = one(value)?,
                "out_dir" => {
                    let p = PathBuf::from(value);
                    m.out_dir = if p.is_absolute() { p } else { base.join(p) };
                }
                "report_format" => {
                    m.report_format = match value {
                        "json" => ReportFormat::Json,
                        "csv" => ReportFormat::Csv,
                        other => {
                            return Err(format!("line {line}: unknown report_format {other:?}"))
                        }
                    }
                }
                other => return Err(format!("line {line}: unknown key {other:?}")),
            }
        }
        if let Some(kind) = kind {
            m.data = DataSource::Synthetic {
                kind,
                train,
                test,
                seed: synth_seed,
            };
        }
        if m.variants.is_empty() || m.lambda_d.is_empty() || m.seeds.is_empty() {
            return Err("variants, lambda_d and seeds must be non-empty".into());
        }
        Ok(m)
    }

    /// Every cell, variants outermost and seeds innermost.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut cells = Vec::new();
        for &variant in &self.variants {
            for &lambda_d in &self.lambda_d {
                for &seed in &self.seeds {
                    cells.push(AblationCell {
                        variant,
                        lambda_d,
                        seed,
                    });
                }
            }
        }
        cells
    }
}

/// Trains and evaluates one cell.
pub fn run_cell(
    base: &TrainConfig,
    cell: AblationCell,
    train: &[TrajectoryWindow],
    test: &[TrajectoryWindow],
) -> Result<AblationResult, PipelineError> {
    let mut config = base.clone();
    config.seed = cell.seed;
    config.weights.lambda_d = cell.lambda_d;
    let mut trainer = Trainer::new(config)?;
    let out = trainer.run(cell.variant, train)?;
    let eval_err = |e: super::EvalError| PipelineError::Eval(Box::new(e));
    let predictor = Predictor::new(&out.destination, &out.trajectory).map_err(eval_err)?;
    let (report, predictions) =
        evaluate_detailed(&predictor, test, &cell.label()).map_err(eval_err)?;
    Ok(AblationResult {
        cell,
        report,
        destination_spread: destination_spread(&predictions),
    })
}

/// Runs every cell of the grid in order.
pub fn run_ablation(
    base: &TrainConfig,
    matrix: &AblationMatrix,
    train: &[TrajectoryWindow],
    test: &[TrajectoryWindow],
) -> Result<Vec<AblationResult>, PipelineError> {
    matrix
        .cells()
        .into_iter()
        .map(|cell| run_cell(base, cell, train, test))
        .collect()
}
