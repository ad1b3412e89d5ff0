//! Differentiable training objectives.
//!
//! All losses accept a leading batch dimension and average over it.

use serde::{Deserialize, Serialize};

use crate::backbone::Linear;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the diversity term in the destination loss.
    pub lambda_d: f32,
    /// Distance scale of the diversity kernel.
    pub sigma_s: f32,
    pub lambda_kd_traj: f32,
    pub lambda_kd_dest: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 100.0,
            sigma_s: 1.0,
            lambda_kd_traj: 5.0,
            lambda_kd_dest: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s > 0.0) {
            return Err(LossError::Invalid(format!(
                "sigma_s must be > 0, got {}",
                self.sigma_s
            )));
        }
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_kd_traj", self.lambda_kd_traj),
            ("lambda_kd_dest", self.lambda_kd_dest),
        ] {
            if !(v >= 0.0) {
                return Err(LossError::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `[K, 2]` is treated as a batch of one.
fn as_candidates(pred: &Tensor) -> Result<Tensor> {
    match pred.shape() {
        [k, 2] => Ok(pred.reshape(&[1, *k, 2])?),
        [_, _, 2] => Ok(pred.clone()),
        s => Err(LossError::Invalid(format!(
            "candidates must be [batch, K, 2] or [K, 2], got {s:?}"
        ))),
    }
}

/// Euclidean distance from each candidate to the ground truth: `[batch, K]`.
fn candidate_distances(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let batch = pred.shape()[0];
    let gt = match gt.shape() {
        [2] if batch == 1 => gt.reshape(&[1, 1, 2])?,
        [b, 2] if *b == batch => gt.reshape(&[batch, 1, 2])?,
        s => {
            return Err(LossError::Invalid(format!(
                "ground truth must be [{batch}, 2], got {s:?}"
            )))
        }
    };
    Ok(pred.sub(&gt)?.square().sum_last()?.sqrt())
}

/// Index of the smallest value in each row; ties go to the lowest index.
pub fn argmin_rows(values: &[f32], row_len: usize) -> Vec<usize> {
    values
        .chunks_exact(row_len)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Distance from the ground-truth destination to its closest candidate,
/// averaged over the batch. Only the closest candidate receives gradient.
pub fn precision_loss(predicted: &Tensor, ground_truth: &Tensor) -> Result<Tensor> {
    let pred = as_candidates(predicted)?;
    let (batch, k) = (pred.shape()[0], pred.shape()[1]);
    if k == 0 {
        return Err(LossError::Invalid(
            "precision loss needs at least one candidate".into(),
        ));
    }
    let dist = candidate_distances(&pred, ground_truth)?;
    let best = argmin_rows(dist.data(), k);
    let rows: Vec<usize> = best.iter().enumerate().map(|(b, &i)| b * k + i).collect();
    let picked = dist.reshape(&[batch * k, 1])?.gather_rows(&rows)?;
    Ok(picked.mean()?)
}

/// `[K(K-1), K]` matrix whose row for the ordered pair `(i, j)` is `e_i - e_j`.
fn pair_difference_matrix(k: usize) -> Tensor {
    let pairs = k * (k - 1);
    let mut data = vec![0.0; pairs * k];
    let mut row = 0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                data[row * k + i] = 1.0;
                data[row * k + j] = -1.0;
                row += 1;
            }
        }
    }
    Tensor::constant(data, &[pairs, k]).expect("pair matrix shape")
}

/// Mean over ordered pairs `i != j` of `exp(-|E_i - E_j|^2 / sigma_s)`,
/// averaged over the batch.
pub fn diversity_loss(predicted: &Tensor, sigma_s: f32) -> Result<Tensor> {
    let pred = as_candidates(predicted)?;
    let k = pred.shape()[1];
    if k < 2 {
        return Err(LossError::Invalid(format!(
            "diversity loss needs K >= 2, got {k}"
        )));
    }
    if !(sigma_s > 0.0) {
        return Err(LossError::Invalid(format!(
            "sigma_s must be > 0, got {sigma_s}"
        )));
    }
    let diffs = pair_difference_matrix(k).matmul(&pred)?;
    let sq = diffs.square().sum_last()?;
    Ok(sq.scale(-1.0 / sigma_s).exp().mean()?)
}

/// Value and parts of the destination objective.
#[derive(Debug, Clone)]
pub struct DestinationLoss {
    pub total: Tensor,
    pub precision: f32,
    pub diversity: f32,
}

pub fn destination_loss(
    predicted: &Tensor,
    ground_truth: &Tensor,
    weights: &LossWeights,
) -> Result<DestinationLoss> {
    let precision = precision_loss(predicted, ground_truth)?;
    let diversity = diversity_loss(predicted, weights.sigma_s)?;
    let total = precision.add(&diversity.scale(weights.lambda_d))?;
    Ok(DestinationLoss {
        precision: precision.item(),
        diversity: diversity.item(),
        total,
    })
}

/// Mean over batch and timesteps of the per-step Euclidean distance.
pub fn recon_loss(predicted: &Tensor, ground_truth: &Tensor) -> Result<Tensor> {
    if predicted.shape() != ground_truth.shape() || predicted.shape().last() != Some(&2) {
        return Err(TensorError::ShapeMismatch {
            op: "recon_loss",
            lhs: predicted.shape().to_vec(),
            rhs: ground_truth.shape().to_vec(),
        }
        .into());
    }
    Ok(predicted
        .sub(ground_truth)?
        .square()
        .sum_last()?
        .sqrt()
        .mean()?)
}

/// Per-sample Frobenius norm of `teacher - projector(student)`, averaged
/// over the leading batch axis. The teacher is detached.
pub fn kd_feature_loss(teacher: &Tensor, student: &Tensor, projector: &Linear) -> Result<Tensor> {
    let projected = student.matmul(&projector.weight)?.add(&projector.bias)?;
    if projected.shape() != teacher.shape() || teacher.rank() == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "kd_feature_loss",
            lhs: teacher.shape().to_vec(),
            rhs: projected.shape().to_vec(),
        }
        .into());
    }
    let batch = teacher.shape()[0];
    let diff = teacher.detach().sub(&projected)?;
    let per_sample = diff
        .square()
        .reshape(&[batch, teacher.len() / batch.max(1)])?;
    Ok(per_sample.sum_last()?.sqrt().mean()?)
}

/// Recon loss plus the two weighted distillation terms.
pub fn trajectory_total_loss(
    recon: &Tensor,
    kd_traj: &Tensor,
    kd_dest: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    Ok(recon
        .add(&kd_traj.scale(weights.lambda_kd_traj))?
        .add(&kd_dest.scale(weights.lambda_kd_dest))?)
}
