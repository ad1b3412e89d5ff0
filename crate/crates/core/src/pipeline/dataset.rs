use super::{PipelineError, Result};
use crate::backbone::EncoderConfig;
use crate::data::TrajectoryWindow;
use crate::tensor::Tensor;

/// Normalized windows packed as `f32`, ready for batching.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    total_len: usize,
    obs_len: usize,
    positions: Vec<f32>,
    origins: Vec<[f64; 2]>,
}

impl PreparedSet {
    pub fn new(windows: &[TrajectoryWindow], cfg: &EncoderConfig) -> Result<Self> {
        let total_len = cfg.total_len();
        let mut positions = Vec::with_capacity(windows.len() * total_len * 2);
        let mut origins = Vec::with_capacity(windows.len());
        for (index, w) in windows.iter().enumerate() {
            if w.positions.len() != total_len {
                return Err(PipelineError::WindowLength {
                    index,
                    found: w.positions.len(),
                    expected: total_len,
                });
            }
            let n = w.normalize(cfg.obs_len);
            positions.extend(n.positions.iter().flat_map(|p| [p[0] as f32, p[1] as f32]));
            origins.push(n.origin);
        }
        Ok(Self {
            total_len,
            obs_len: cfg.obs_len,
            positions,
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origin(&self, i: usize) -> [f64; 2] {
        self.origins[i]
    }

    /// Normalized positions of window `i`.
    pub fn window(&self, i: usize) -> &[f32] {
        let n = self.total_len * 2;
        &self.positions[i * n..(i + 1) * n]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(indices.len() * self.total_len * 2);
        for &i in indices {
            data.extend_from_slice(self.window(i));
        }
        Batch {
            positions: Tensor::constant(data, &[indices.len(), self.total_len, 2])
                .expect("batch shape"),
            obs_len: self.obs_len,
        }
    }
}

/// A stack of normalized windows, `[batch, total_len, 2]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub positions: Tensor,
    obs_len: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.positions.shape()[0]
    }

    fn total_len(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn observed(&self) -> Tensor {
        self.positions
            .slice(1, 0, self.obs_len)
            .expect("observed slice")
    }

    pub fn future(&self) -> Tensor {
        self.positions
            .slice(1, self.obs_len, self.total_len() - self.obs_len)
            .expect("future slice")
    }

    /// Ground-truth positions `0 .. total_len-1`, the teacher-forced input.
    pub fn teacher_forced_inputs(&self) -> Tensor {
        self.positions
            .slice(1, 0, self.total_len() - 1)
            .expect("input slice")
    }

    /// Positions `1 .. total_len`, the next-position targets.
    pub fn next_targets(&self) -> Tensor {
        self.positions
            .slice(1, 1, self.total_len() - 1)
            .expect("target slice")
    }

    /// Final position of each window, `[batch, 2]`.
    pub fn destination(&self) -> Tensor {
        let b = self.size();
        self.positions
            .slice(1, self.total_len() - 1, 1)
            .and_then(|t| t.reshape(&[b, 2]))
            .expect("destination slice")
    }
}
