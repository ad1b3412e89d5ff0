use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, PipelineError, PreparedSet, Result, TrainConfig};
use crate::backbone::{
    destination_forward, is_destination_head, next_position_forward, replicate, trajectory_forward,
    EncoderParams, Stage, StageCheckpoint,
};
use crate::data::TrajectoryWindow;
use crate::objectives::{
    argmin_rows, destination_loss, kd_feature_loss, recon_loss, trajectory_total_loss, LossWeights,
};
use crate::tensor::{AdamConfig, AdamState, GradMap, Tensor};

/// Losses of one epoch, one JSON line in the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// `0` is the evaluation before any update.
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub wall_clock_s: f64,
}

/// Which pretext tasks precede the full-trajectory stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineVariant {
    pub next_position_task: bool,
    pub destination_task: bool,
    pub distillation: bool,
}

impl PipelineVariant {
    pub const FULL: Self = Self {
        next_position_task: true,
        destination_task: true,
        distillation: true,
    };
    pub const DESTINATION_ONLY: Self = Self {
        next_position_task: false,
        destination_task: true,
        distillation: true,
    };
    pub const SCRATCH: Self = Self {
        next_position_task: false,
        destination_task: false,
        distillation: false,
    };

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.next_position_task {
            parts.push("I");
        }
        if self.destination_task {
            parts.push("II");
        }
        parts.push("III");
        let mut s = format!("task-{}", parts.join("+"));
        if !self.distillation {
            s.push_str("-nokd");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub stage1: Option<StageCheckpoint>,
    pub stage2: Option<StageCheckpoint>,
    pub destination: StageCheckpoint,
    pub trajectory: StageCheckpoint,
}

/// Adam over the subset of parameters selected at construction.
struct ParamOptimizer {
    selected: Vec<bool>,
    state: AdamState,
}

impl ParamOptimizer {
    fn new(params: &EncoderParams, trainable: impl Fn(&str) -> bool) -> Self {
        let named = params.named();
        let selected: Vec<bool> = named.iter().map(|(n, _)| trainable(n)).collect();
        let tensors: Vec<&Tensor> = named
            .iter()
            .zip(&selected)
            .filter(|(_, s)| **s)
            .map(|((_, t), _)| *t)
            .collect();
        Self {
            state: AdamState::new(AdamConfig::default(), &tensors),
            selected,
        }
    }

    fn step(&mut self, params: &mut EncoderParams, grads: &GradMap, lr: f32) -> Result<()> {
        let mut handles: Vec<&mut Tensor> = params
            .tensors_mut()
            .into_iter()
            .zip(&self.selected)
            .filter(|(_, s)| **s)
            .map(|(t, _)| t)
            .collect();
        self.state.step(&mut handles, grads, lr)?;
        Ok(())
    }
}

fn stage1_trainable(name: &str) -> bool {
    !(name == "prompt_embeddings" || is_destination_head(name) || name.starts_with("kd_"))
}

fn stage2_trainable(name: &str) -> bool {
    !(name.starts_with("next_position.") || name.starts_with("kd_"))
}

fn dest_student_trainable(kd: bool) -> impl Fn(&str) -> bool {
    move |name| {
        !(name.starts_with("next_position.")
            || name.starts_with("kd_traj.")
            || (!kd && name.starts_with("kd_dest.")))
    }
}

fn traj_student_trainable(kd: bool) -> impl Fn(&str) -> bool {
    move |name| {
        !(is_destination_head(name)
            || name.starts_with("kd_dest.")
            || (!kd && name.starts_with("kd_traj.")))
    }
}

/// Candidate closest to the ground truth for each window, as constants:
/// `[batch, 2]`. Ties go to the lowest index.
pub fn closest_candidates(candidates: &Tensor, ground_truth: &Tensor) -> Result<Tensor> {
    let (b, k) = (candidates.shape()[0], candidates.shape()[1]);
    let c = candidates.data();
    let g = ground_truth.data();
    let dist: Vec<f32> = (0..b * k)
        .map(|i| {
            let (row, cand) = (i / k, i);
            let dx = c[cand * 2] - g[row * 2];
            let dy = c[cand * 2 + 1] - g[row * 2 + 1];
            (dx * dx + dy * dy).sqrt()
        })
        .collect();
    let best = argmin_rows(&dist, k);
    let data = best
        .iter()
        .enumerate()
        .flat_map(|(row, &j)| [c[(row * k + j) * 2], c[(row * k + j) * 2 + 1]])
        .collect();
    Ok(Tensor::constant(data, &[b, 2])?)
}

fn teacher_trajectory_features(next_teacher: &EncoderParams, batch: &Batch) -> Result<Tensor> {
    let cfg = &next_teacher.config;
    let (feats, _) = next_position_forward(next_teacher, &batch.teacher_forced_inputs())?;
    Ok(feats.slice(1, cfg.obs_len - 1, cfg.pred_len)?.detach())
}

fn teacher_destination_feature(dest_teacher: &EncoderParams, batch: &Batch) -> Result<Tensor> {
    Ok(destination_forward(dest_teacher, &batch.observed())?
        .feature
        .detach())
}

/// Distillation targets: future-slot features of the next-position teacher
/// run teacher-forced on the ground truth (`[batch, pred_len, d]`), and the
/// destination-slot feature of the destination teacher (`[batch, d]`).
pub fn teacher_features(
    next_teacher: &EncoderParams,
    dest_teacher: &EncoderParams,
    batch: &Batch,
) -> Result<(Tensor, Tensor)> {
    let next = next_teacher.frozen();
    let dest = dest_teacher.frozen();
    Ok((
        teacher_trajectory_features(&next, batch)?,
        teacher_destination_feature(&dest, batch)?,
    ))
}

fn weighted_add(acc: &mut BTreeMap<String, f64>, parts: &BTreeMap<String, f64>, w: f64) {
    for (k, v) in parts {
        *acc.entry(k.clone()).or_insert(0.0) += v * w;
    }
}

pub struct Trainer {
    config: TrainConfig,
    log: Option<BufWriter<File>>,
    history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            log: None,
            history: Vec::new(),
        })
    }

    /// Appends one JSON line per epoch to `path`.
    pub fn with_log_file(mut self, path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| PipelineError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        self.log = Some(BufWriter::new(file));
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    fn record(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some(log) = &mut self.log {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(log, "{line}")
                .and_then(|_| log.flush())
                .map_err(|source| PipelineError::Io {
                    path: self.config.log_path(),
                    source,
                })?;
        }
        self.history.push(rec);
        Ok(())
    }

    fn prepare(&self, windows: &[TrajectoryWindow]) -> Result<PreparedSet> {
        if windows.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        PreparedSet::new(windows, &self.config.encoder)
    }

    fn check_checkpoint(&self, ck: &StageCheckpoint, expected: Stage) -> Result<()> {
        if ck.stage != expected {
            return Err(PipelineError::WrongStage {
                expected,
                found: ck.stage,
            });
        }
        if ck.params.config != self.config.encoder {
            return Err(PipelineError::ConfigMismatch {
                what: format!("stage {} checkpoint", ck.stage),
            });
        }
        Ok(())
    }

    fn checkpoint(
        &self,
        stage: Stage,
        params: &EncoderParams,
        epoch: usize,
        metrics: BTreeMap<String, f64>,
    ) -> StageCheckpoint {
        StageCheckpoint {
            stage,
            params: params.deep_copy(),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            epoch,
            metrics,
        }
    }

    fn epoch_order(&self, stage: Stage, epoch: usize, n: usize) -> Vec<usize> {
        let tag = match stage {
            Stage::NextPosition => 1u64,
            Stage::Destination => 2,
            Stage::DestinationPredictor | Stage::TrajectoryPredictor => 3,
        };
        let seed = self.config.seed ^ (tag << 56) ^ ((epoch as u64) << 32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs `epochs` shuffled passes, calling `step` per batch; returns the
    /// batch-size weighted mean of the last epoch's loss parts.
    fn run_epochs(
        &mut self,
        stage: Stage,
        first_epoch: usize,
        epochs: usize,
        set: &PreparedSet,
        mut step: impl FnMut(&Batch) -> Result<BTreeMap<String, f64>>,
    ) -> Result<BTreeMap<String, f64>> {
        let mut last = BTreeMap::new();
        for epoch in first_epoch..first_epoch + epochs {
            let started = Instant::now();
            let order = self.epoch_order(stage, epoch, set.len());
            let mut acc = BTreeMap::new();
            for chunk in order.chunks(self.config.batch_size) {
                let batch = set.batch(chunk);
                let parts = step(&batch)?;
                weighted_add(&mut acc, &parts, chunk.len() as f64 / set.len() as f64);
            }
            self.record(EpochRecord {
                stage,
                epoch: epoch + 1,
                losses: acc.clone(),
                wall_clock_s: started.elapsed().as_secs_f64(),
            })?;
            last = acc;
        }
        Ok(last)
    }

    /// Mean next-position error of `params` over `set`, without updates.
    pub fn stage1_loss(&self, params: &EncoderParams, set: &PreparedSet) -> Result<f64> {
        let frozen = params.frozen();
        let mut total = 0.0;
        let indices: Vec<usize> = (0..set.len()).collect();
        for chunk in indices.chunks(self.config.batch_size) {
            let batch = set.batch(chunk);
            let (_, pred) = next_position_forward(&frozen, &batch.teacher_forced_inputs())?;
            let loss = recon_loss(&pred, &batch.next_targets())?;
            total += loss.item() as f64 * chunk.len() as f64 / set.len() as f64;
        }
        Ok(total)
    }

    /// Next-position pretraining on every prefix at once under the causal mask.
    pub fn train_stage1(&mut self, windows: &[TrajectoryWindow]) -> Result<StageCheckpoint> {
        let set = self.prepare(windows)?;
        let init = EncoderParams::init(&self.config.encoder, self.config.seed)?;
        let mut params = init.copy_with(stage1_trainable);
        let initial = self.stage1_loss(&params, &set)?;
        self.record(EpochRecord {
            stage: Stage::NextPosition,
            epoch: 0,
            losses: BTreeMap::from([("next_position".to_string(), initial)]),
            wall_clock_s: 0.0,
        })?;
        let mut opt = ParamOptimizer::new(&params, stage1_trainable);
        let lr = self.config.lr_stage1;
        let epochs = self.config.epochs_stage1;
        let metrics = self.run_epochs(Stage::NextPosition, 0, epochs, &set, |batch| {
            let (_, pred) = next_position_forward(&params, &batch.teacher_forced_inputs())?;
            let loss = recon_loss(&pred, &batch.next_targets())?;
            let grads = loss.backward()?;
            opt.step(&mut params, &grads, lr)?;
            Ok(BTreeMap::from([(
                "next_position".to_string(),
                loss.item() as f64,
            )]))
        })?;
        Ok(self.checkpoint(Stage::NextPosition, &params, epochs, metrics))
    }

    /// Destination pretraining continued from a next-position checkpoint.
    pub fn train_stage2(
        &mut self,
        stage1: &StageCheckpoint,
        windows: &[TrajectoryWindow],
    ) -> Result<StageCheckpoint> {
        self.check_checkpoint(stage1, Stage::NextPosition)?;
        self.stage2_from(stage1.params.clone(), windows)
    }

    /// Destination pretraining from a random initialization.
    pub fn train_stage2_from_scratch(
        &mut self,
        windows: &[TrajectoryWindow],
    ) -> Result<StageCheckpoint> {
        let init = EncoderParams::init(&self.config.encoder, self.config.seed)?;
        self.stage2_from(init, windows)
    }

    fn stage2_from(
        &mut self,
        init: EncoderParams,
        windows: &[TrajectoryWindow],
    ) -> Result<StageCheckpoint> {
        let set = self.prepare(windows)?;
        let weights = self.config.weights;
        let lr = self.config.lr_stage2;
        let warmup = self.config.warmup_epochs;
        let joint = self.config.epochs_stage2 - warmup;
        let step = |params: &mut EncoderParams, opt: &mut ParamOptimizer, batch: &Batch| {
            let out = destination_forward(params, &batch.observed())?;
            let des = destination_loss(&out.candidates, &batch.destination(), &weights)?;
            let grads = des.total.backward()?;
            opt.step(params, &grads, lr)?;
            Ok(BTreeMap::from([
                ("destination".to_string(), des.total.item() as f64),
                ("precision".to_string(), des.precision as f64),
                ("diversity".to_string(), des.diversity as f64),
            ]))
        };

        // Warm-up: only the destination MLP moves.
        let mut params = init.copy_with(is_destination_head);
        let mut opt = ParamOptimizer::new(&params, is_destination_head);
        let mut metrics = self.run_epochs(Stage::Destination, 0, warmup, &set, |batch| {
            step(&mut params, &mut opt, batch)
        })?;
        if joint > 0 {
            params = params.copy_with(stage2_trainable);
            let mut opt = ParamOptimizer::new(&params, stage2_trainable);
            metrics = self.run_epochs(Stage::Destination, warmup, joint, &set, |batch| {
                step(&mut params, &mut opt, batch)
            })?;
        }
        Ok(self.checkpoint(Stage::Destination, &params, warmup + joint, metrics))
    }

    /// Joint destination and trajectory training with distillation from the
    /// frozen stage I and II models.
    pub fn train_stage3(
        &mut self,
        stage1: &StageCheckpoint,
        stage2: &StageCheckpoint,
        windows: &[TrajectoryWindow],
    ) -> Result<(StageCheckpoint, StageCheckpoint)> {
        self.check_checkpoint(stage1, Stage::NextPosition)?;
        self.check_checkpoint(stage2, Stage::Destination)?;
        self.stage3_from(
            &stage2.params,
            Some(&stage1.params),
            Some(&stage2.params),
            windows,
        )
    }

    /// Stage III with students replicated from `init`. A missing teacher
    /// disables its distillation term, as does a zero weight.
    pub fn stage3_from(
        &mut self,
        init: &EncoderParams,
        next_teacher: Option<&EncoderParams>,
        dest_teacher: Option<&EncoderParams>,
        windows: &[TrajectoryWindow],
    ) -> Result<(StageCheckpoint, StageCheckpoint)> {
        for (what, p) in [
            ("student initialization", Some(init)),
            ("next-position teacher", next_teacher),
            ("destination teacher", dest_teacher),
        ] {
            if let Some(p) = p {
                if p.config != self.config.encoder {
                    return Err(PipelineError::ConfigMismatch { what: what.into() });
                }
            }
        }
        let set = self.prepare(windows)?;
        let weights: LossWeights = self.config.weights;
        let lr = self.config.lr_stage3;
        let next_teacher = next_teacher
            .filter(|_| weights.lambda_kd_traj > 0.0)
            .map(EncoderParams::frozen);
        let dest_teacher = dest_teacher
            .filter(|_| weights.lambda_kd_dest > 0.0)
            .map(EncoderParams::frozen);
        let traj_kd = next_teacher.is_some();
        let dest_kd = dest_teacher.is_some();

        let (dest_init, traj_init) = replicate(init);
        let mut dest = dest_init.copy_with(dest_student_trainable(dest_kd));
        let mut traj = traj_init.copy_with(traj_student_trainable(traj_kd));
        let mut dest_opt = ParamOptimizer::new(&dest, dest_student_trainable(dest_kd));
        let mut traj_opt = ParamOptimizer::new(&traj, traj_student_trainable(traj_kd));

        let epochs = self.config.epochs_stage3;
        let metrics = self.run_epochs(Stage::TrajectoryPredictor, 0, epochs, &set, |batch| {
            let observed = batch.observed();
            let gt_dest = batch.destination();
            let dest_out = destination_forward(&dest, &observed)?;
            let des = destination_loss(&dest_out.candidates, &gt_dest, &weights)?;
            let pseudo = closest_candidates(&dest_out.candidates, &gt_dest)?;
            let traj_out = trajectory_forward(&traj, &observed, &pseudo)?;
            let recon = recon_loss(&traj_out.future, &batch.future())?;
            let kd_traj = match &next_teacher {
                Some(t) => kd_feature_loss(
                    &teacher_trajectory_features(t, batch)?,
                    &traj_out.future_features,
                    &traj.kd_traj,
                )?,
                None => Tensor::scalar(0.0),
            };
            let kd_dest = match &dest_teacher {
                Some(t) => kd_feature_loss(
                    &teacher_destination_feature(t, batch)?,
                    &dest_out.feature,
                    &dest.kd_dest,
                )?,
                None => Tensor::scalar(0.0),
            };
            let traj_loss = trajectory_total_loss(&recon, &kd_traj, &kd_dest, &weights)?;
            let total = traj_loss.add(&des.total)?;
            let grads = total.backward()?;
            dest_opt.step(&mut dest, &grads, lr)?;
            traj_opt.step(&mut traj, &grads, lr)?;
            Ok(BTreeMap::from([
                ("total".to_string(), total.item() as f64),
                ("recon".to_string(), recon.item() as f64),
                ("kd_traj".to_string(), kd_traj.item() as f64),
                ("kd_dest".to_string(), kd_dest.item() as f64),
                ("destination".to_string(), des.total.item() as f64),
                ("precision".to_string(), des.precision as f64),
                ("diversity".to_string(), des.diversity as f64),
            ]))
        })?;
        Ok((
            self.checkpoint(Stage::DestinationPredictor, &dest, epochs, metrics.clone()),
            self.checkpoint(Stage::TrajectoryPredictor, &traj, epochs, metrics),
        ))
    }

    /// Trains every stage the variant asks for, in order.
    pub fn run(
        &mut self,
        variant: PipelineVariant,
        windows: &[TrajectoryWindow],
    ) -> Result<StageOutputs> {
        if !variant.distillation {
            self.config.weights.lambda_kd_traj = 0.0;
            self.config.weights.lambda_kd_dest = 0.0;
        }
        let stage1 = if variant.next_position_task {
            Some(self.train_stage1(windows)?)
        } else {
            None
        };
        let stage2 = match (variant.destination_task, &stage1) {
            (false, _) => None,
            (true, Some(s1)) => Some(self.train_stage2(s1, windows)?),
            (true, None) => Some(self.train_stage2_from_scratch(windows)?),
        };
        let (destination, trajectory) = match (&stage1, &stage2) {
            (_, Some(s2)) => self.stage3_from(
                &s2.params,
                stage1.as_ref().map(|s| &s.params),
                Some(&s2.params),
                windows,
            )?,
            (Some(s1), None) => self.stage3_from(&s1.params, Some(&s1.params), None, windows)?,
            (None, None) => {
                let init = EncoderParams::init(&self.config.encoder, self.config.seed)?;
                self.stage3_from(&init, None, None, windows)?
            }
        };
        Ok(StageOutputs {
            stage1,
            stage2,
            destination,
            trajectory,
        })
    }
}

/// Parameter names whose values differ between two parameter sets.
pub fn changed_parameters(a: &EncoderParams, b: &EncoderParams) -> HashSet<String> {
    a.named()
        .into_iter()
        .zip(b.named())
        .filter(|((_, x), (_, y))| {
            x.data()
                .iter()
                .map(|v| v.to_bits())
                .ne(y.data().iter().map(|v| v.to_bits()))
        })
        .map(|((n, _), _)| n)
        .collect()
}
