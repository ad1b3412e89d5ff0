use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ppt_core::backbone::{Stage, StageCheckpoint};
use ppt_core::data::{
    load_windows, synth_generate, write_windows, SynthKind, TrajectoryWindow, WindowOptions,
    DEFAULT_FRAME_STRIDE,
};
use ppt_core::eval::{
    emit_report, evaluate_detailed, run_cell, write_sweep_plot, write_trajectory_plot,
    AblationMatrix, Predictor, ReportFormat, SweepSeries,
};
use ppt_core::pipeline::{TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "ppt",
    version,
    about = "Progressive pretext-task trajectory forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage; stages 2 and 3 read earlier checkpoints from the
    /// configured checkpoint directory.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
    },
    /// Predict K trajectories for every observed window of a trajectory file.
    Predict {
        #[arg(long)]
        checkpoint_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FRAME_STRIDE)]
        frame_stride: i64,
        #[arg(long, default_value_t = 1)]
        window_stride: usize,
    },
    /// Best-of-K evaluation against a trajectory file.
    Eval {
        #[arg(long)]
        checkpoint_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Defaults to the report file's extension.
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long, default_value_t = DEFAULT_FRAME_STRIDE)]
        frame_stride: i64,
        /// Also draw the candidates of one window as SVG.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        plot_window: usize,
    },
    /// Write seeded synthetic windows in the trajectory file format.
    Synth {
        #[arg(long)]
        kind: SynthKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FRAME_STRIDE)]
        frame_stride: i64,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
    },
}

type CliResult<T> = Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn report_format(explicit: Option<Format>, path: &Path) -> ReportFormat {
    match explicit {
        Some(Format::Json) => ReportFormat::Json,
        Some(Format::Csv) => ReportFormat::Csv,
        None => ReportFormat::from_path(path),
    }
}

fn load_prerequisite(dir: &Path, stage: Stage, needed_by: u8) -> CliResult<StageCheckpoint> {
    let path = stage.checkpoint_path(dir);
    if !path.exists() {
        let n = match stage {
            Stage::NextPosition => 1,
            _ => 2,
        };
        return Err(format!(
            "stage {needed_by} needs the stage {stage} checkpoint {}, which does not exist; run `ppt train --stage {n}` first",
            path.display()
        ));
    }
    StageCheckpoint::load(&path).map_err(err)
}

fn train_windows(config: &TrainConfig) -> CliResult<Vec<TrajectoryWindow>> {
    if config.train_files.is_empty() {
        return Err("configuration lists no train_files".into());
    }
    let windows = load_windows(&config.train_files, config.window_options()).map_err(err)?;
    if windows.is_empty() {
        return Err(format!(
            "no {}-step windows found in the train files",
            config.encoder.total_len()
        ));
    }
    Ok(windows)
}

fn save(ck: &StageCheckpoint, dir: &Path) -> CliResult<()> {
    let path = ck.stage.checkpoint_path(dir);
    ck.save(&path).map_err(err)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train(stage: u8, config_path: &Path) -> CliResult<()> {
    let config = TrainConfig::load(config_path).map_err(err)?;
    let dir = config.checkpoint_dir.clone();
    // Check prerequisites before the (slow) data loading.
    let stage1 = match stage {
        2 | 3 => Some(load_prerequisite(&dir, Stage::NextPosition, stage)?),
        _ => None,
    };
    let stage2 = match stage {
        3 => Some(load_prerequisite(&dir, Stage::Destination, stage)?),
        _ => None,
    };
    let windows = train_windows(&config)?;
    std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let log = config.log_path();
    let mut trainer = Trainer::new(config)
        .map_err(err)?
        .with_log_file(&log)
        .map_err(err)?;
    match (stage1, stage2) {
        (None, _) => save(&trainer.train_stage1(&windows).map_err(err)?, &dir),
        (Some(s1), None) => save(&trainer.train_stage2(&s1, &windows).map_err(err)?, &dir),
        (Some(s1), Some(s2)) => {
            let (d, t) = trainer.train_stage3(&s1, &s2, &windows).map_err(err)?;
            save(&d, &dir)?;
            save(&t, &dir)
        }
    }
}

fn predict(
    dir: &Path,
    input: &Path,
    out: &Path,
    frame_stride: i64,
    window_stride: usize,
) -> CliResult<()> {
    let predictor = Predictor::load(dir).map_err(err)?;
    let opts = WindowOptions {
        window_len: predictor.obs_len(),
        frame_stride,
        window_stride,
    };
    let windows = load_windows(&[input.to_path_buf()], opts).map_err(err)?;
    if windows.is_empty() {
        return Err(format!(
            "{}: no {}-step observed windows",
            input.display(),
            predictor.obs_len()
        ));
    }
    let set = predictor.predict_set(&windows).map_err(err)?;
    let json = serde_json::to_vec_pretty(&set).map_err(err)?;
    std::fs::write(out, json).map_err(|e| format!("{}: {e}", out.display()))?;
    println!(
        "wrote {} predictions to {}",
        set.entries.len(),
        out.display()
    );
    Ok(())
}

struct EvalArgs<'a> {
    dir: &'a Path,
    data: &'a Path,
    report: &'a Path,
    format: Option<Format>,
    frame_stride: i64,
    plot: Option<&'a Path>,
    plot_window: usize,
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let predictor = Predictor::load(a.dir).map_err(err)?;
    let opts = WindowOptions {
        window_len: predictor.obs_len() + predictor.pred_len(),
        frame_stride: a.frame_stride,
        window_stride: 1,
    };
    let windows = load_windows(&[a.data.to_path_buf()], opts).map_err(err)?;
    let label = a
        .data
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (report, predictions) = evaluate_detailed(&predictor, &windows, &label).map_err(err)?;
    emit_report(&report, a.report, report_format(a.format, a.report)).map_err(err)?;
    println!(
        "{} windows: minADE {:.4} minFDE {:.4} (zero-velocity {:.4} / {:.4})",
        report.num_windows,
        report.min_ade,
        report.min_fde,
        report.baseline_ade,
        report.baseline_fde
    );
    if let Some(plot) = a.plot {
        let i = a.plot_window;
        let (w, p) = windows
            .get(i)
            .zip(predictions.get(i))
            .ok_or_else(|| format!("--plot-window {i} out of range ({} windows)", windows.len()))?;
        let obs = predictor.obs_len();
        write_trajectory_plot(
            plot,
            &format!("{label} window {i}"),
            w.observed(obs),
            w.future(obs),
            &p.trajectories,
        )
        .map_err(err)?;
    }
    Ok(())
}

fn synth(kind: SynthKind, n: usize, seed: u64, out: &Path, frame_stride: i64) -> CliResult<()> {
    let windows = synth_generate(kind, n, seed);
    write_windows(&windows, frame_stride, out).map_err(err)?;
    println!("wrote {n} {kind} windows to {}", out.display());
    Ok(())
}

fn ablate(config_path: &Path, matrix_path: &Path) -> CliResult<()> {
    let config = TrainConfig::load(config_path).map_err(err)?;
    let text = std::fs::read_to_string(matrix_path)
        .map_err(|e| format!("{}: {e}", matrix_path.display()))?;
    let base = matrix_path.parent().unwrap_or(Path::new("."));
    let matrix = AblationMatrix::parse(&text, base, &config)
        .map_err(|e| format!("{}: {e}", matrix_path.display()))?;
    let (train, test) = match matrix.data.synth_windows() {
        Some(pair) => pair,
        None => {
            if config.test_files.is_empty() {
                return Err(
                    "configuration lists no test_files and the matrix names no synth_kind".into(),
                );
            }
            let test_opts = WindowOptions {
                window_stride: 1,
                ..config.window_options()
            };
            let test = load_windows(&config.test_files, test_opts).map_err(err)?;
            (train_windows(&config)?, test)
        }
    };
    std::fs::create_dir_all(&matrix.out_dir)
        .map_err(|e| format!("{}: {e}", matrix.out_dir.display()))?;
    let ext = match matrix.report_format {
        ReportFormat::Json => "json",
        ReportFormat::Csv => "csv",
    };
    let summary_path = matrix.out_dir.join("summary.csv");
    let mut summary = csv::Writer::from_path(&summary_path).map_err(err)?;
    summary
        .write_record([
            "label",
            "variant",
            "lambda_d",
            "seed",
            "min_ade",
            "min_fde",
            "destination_spread",
            "report",
        ])
        .map_err(err)?;
    let mut results = Vec::new();
    for cell in matrix.cells() {
        let result = run_cell(&config, cell, &train, &test).map_err(err)?;
        let path = matrix.out_dir.join(format!("{}.{ext}", cell.label()));
        emit_report(&result.report, &path, matrix.report_format).map_err(err)?;
        summary
            .write_record([
                cell.label(),
                cell.variant.name(),
                cell.lambda_d.to_string(),
                cell.seed.to_string(),
                result.report.min_ade.to_string(),
                result.report.min_fde.to_string(),
                result.destination_spread.to_string(),
                path.display().to_string(),
            ])
            .map_err(err)?;
        summary.flush().map_err(err)?;
        println!(
            "{}: minADE {:.4} minFDE {:.4} spread {:.4}",
            cell.label(),
            result.report.min_ade,
            result.report.min_fde,
            result.destination_spread
        );
        results.push(result);
    }
    if matrix.lambda_d.len() > 1 {
        for &variant in &matrix.variants {
            let mean_over_seeds = |metric: &dyn Fn(&ppt_core::eval::AblationResult) -> f64| {
                matrix
                    .lambda_d
                    .iter()
                    .map(|&ld| {
                        let vals: Vec<f64> = results
                            .iter()
                            .filter(|r| r.cell.variant == variant && r.cell.lambda_d == ld)
                            .map(metric)
                            .collect();
                        vals.iter().sum::<f64>() / vals.len() as f64
                    })
                    .collect::<Vec<f64>>()
            };
            let series = [
                SweepSeries {
                    name: "minADE".into(),
                    values: mean_over_seeds(&|r| r.report.min_ade),
                },
                SweepSeries {
                    name: "minFDE".into(),
                    values: mean_over_seeds(&|r| r.report.min_fde),
                },
            ];
            let sweep: Vec<f64> = matrix.lambda_d.iter().map(|&v| v as f64).collect();
            let path = matrix
                .out_dir
                .join(format!("{}_lambda_d.svg", variant.name()));
            write_sweep_plot(&path, &variant.name(), "lambda_d", &sweep, &series).map_err(err)?;
        }
    }
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { stage, config } => train(stage, &config),
        Command::Predict {
            checkpoint_dir,
            input,
            out,
            frame_stride,
            window_stride,
        } => predict(&checkpoint_dir, &input, &out, frame_stride, window_stride),
        Command::Eval {
            checkpoint_dir,
            data,
            report,
            format,
            frame_stride,
            plot,
            plot_window,
        } => eval(EvalArgs {
            dir: &checkpoint_dir,
            data: &data,
            report: &report,
            format,
            frame_stride,
            plot: plot.as_deref(),
            plot_window,
        }),
        Command::Synth {
            kind,
            n,
            seed,
            out,
            frame_stride,
        } => synth(kind, n, seed, &out, frame_stride),
        Command::Ablate { config, matrix } => ablate(&config, &matrix),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
