//! Pre-norm transformer encoder over per-agent trajectory tokens.

mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError, MASK_VALUE};

pub use checkpoint::{CheckpointError, Stage, StageCheckpoint, CHECKPOINT_VERSION};
pub use params::{is_destination_head, EncoderParams, LayerParams, Linear, Norm};

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("invalid token layout: {0}")]
    Layout(String),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

/// Architecture and horizon sizes shared by every stage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden_dim: usize,
    pub dest_hidden_dim: usize,
    /// Observed steps.
    pub obs_len: usize,
    /// Future steps.
    pub pred_len: usize,
    /// Number of candidate destinations.
    pub num_modes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            model_dim: 128,
            num_heads: 8,
            mlp_hidden_dim: 512,
            dest_hidden_dim: 256,
            obs_len: 8,
            pred_len: 12,
            num_modes: 20,
        }
    }
}

impl EncoderConfig {
    pub fn total_len(&self) -> usize {
        self.obs_len + self.pred_len
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(BackboneError::Config(m.to_string()));
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 {
            return fail("layers, model_dim and heads must be positive");
        }
        if self.model_dim % self.num_heads != 0 {
            return fail("model_dim must be divisible by num_heads");
        }
        if self.mlp_hidden_dim == 0 || self.dest_hidden_dim == 0 {
            return fail("hidden sizes must be positive");
        }
        if self.obs_len == 0 || self.pred_len == 0 {
            return fail("obs_len and pred_len must be positive");
        }
        if self.num_modes < 2 {
            return fail("num_modes must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Observed,
    Prompt,
    PseudoDestination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMask {
    Causal,
    Full,
}

/// Embedded tokens for a batch of windows sharing one layout.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `[batch, len, model_dim]`
    pub tokens: Tensor,
    pub position_ids: Vec<usize>,
    pub kinds: Vec<TokenKind>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }
}

/// Token layout of one encoder input, independent of the batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub observed_ids: Vec<usize>,
    pub prompt_ids: Vec<usize>,
    pub destination_id: Option<usize>,
}

impl Layout {
    /// Next-position input: ground-truth positions at `0..len`.
    pub fn next_position(len: usize) -> Self {
        Self {
            observed_ids: (0..len).collect(),
            prompt_ids: Vec::new(),
            destination_id: None,
        }
    }

    /// Observed block plus one prompt in the destination slot.
    pub fn destination(cfg: &EncoderConfig) -> Self {
        Self {
            observed_ids: (0..cfg.obs_len).collect(),
            prompt_ids: vec![cfg.total_len() - 1],
            destination_id: None,
        }
    }

    /// Observed block, prompts for every intermediate future step and the
    /// pseudo destination in the last slot.
    pub fn trajectory(cfg: &EncoderConfig) -> Self {
        Self {
            observed_ids: (0..cfg.obs_len).collect(),
            prompt_ids: (cfg.obs_len..cfg.total_len() - 1).collect(),
            destination_id: Some(cfg.total_len() - 1),
        }
    }

    pub fn position_ids(&self) -> Vec<usize> {
        let mut ids = self.observed_ids.clone();
        ids.extend(&self.prompt_ids);
        ids.extend(self.destination_id);
        ids
    }

    pub fn len(&self) -> usize {
        self.observed_ids.len() + self.prompt_ids.len() + usize::from(self.destination_id.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let ids = self.position_ids();
        if ids.is_empty() {
            return Err(BackboneError::Layout("no tokens".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.total_len()) {
            return Err(BackboneError::Layout(format!(
                "timestep id {bad} outside [0, {})",
                cfg.total_len()
            )));
        }
        if let Some(&bad) = self.prompt_ids.iter().find(|&&i| i < cfg.obs_len) {
            return Err(BackboneError::Layout(format!(
                "prompt timestep {bad} precedes the first future step {}",
                cfg.obs_len
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(BackboneError::Layout(format!(
                "duplicate timestep id {}",
                w[0]
            )));
        }
        if sorted != ids {
            return Err(BackboneError::Layout(format!(
                "timestep ids must be increasing, got {ids:?}"
            )));
        }
        Ok(())
    }
}

fn linear(x: &Tensor, l: &Linear) -> Result<Tensor> {
    Ok(x.matmul(&l.weight)?.add(&l.bias)?)
}

/// Token embeddings for a batch.
///
/// `observed` is `[batch, observed_ids.len(), 2]`; `destination` is
/// `[batch, 2]` and must be present exactly when the layout has a
/// destination slot.
pub fn embed_inputs(
    params: &EncoderParams,
    layout: &Layout,
    observed: &Tensor,
    destination: Option<&Tensor>,
) -> Result<TokenSequence> {
    let cfg = &params.config;
    layout.validate(cfg)?;
    let n_obs = layout.observed_ids.len();
    if observed.rank() != 3 || observed.shape()[1] != n_obs || observed.shape()[2] != 2 {
        return Err(BackboneError::Layout(format!(
            "observed positions must be [batch, {n_obs}, 2], got {:?}",
            observed.shape()
        )));
    }
    let batch = observed.shape()[0];
    let d = cfg.model_dim;
    let mut parts = Vec::with_capacity(3);
    let mut kinds = Vec::with_capacity(layout.len());
    if n_obs > 0 {
        parts.push(linear(observed, &params.input_embedding)?);
        kinds.extend(std::iter::repeat_n(TokenKind::Observed, n_obs));
    }
    if !layout.prompt_ids.is_empty() {
        let rows: Vec<usize> = layout.prompt_ids.iter().map(|&i| i - cfg.obs_len).collect();
        let prompts = params.prompt_embeddings.gather_rows(&rows)?;
        let tiled = Tensor::zeros(&[batch, rows.len(), d]).add(&prompts)?;
        parts.push(tiled);
        kinds.extend(std::iter::repeat_n(TokenKind::Prompt, rows.len()));
    }
    match (layout.destination_id, destination) {
        (Some(_), Some(dest)) => {
            if dest.shape() != [batch, 2] {
                return Err(BackboneError::Layout(format!(
                    "pseudo destination must be [{batch}, 2], got {:?}",
                    dest.shape()
                )));
            }
            let dest = dest.reshape(&[batch, 1, 2])?;
            parts.push(linear(&dest, &params.input_embedding)?);
            kinds.push(TokenKind::PseudoDestination);
        }
        (None, None) => {}
        (Some(_), None) => {
            return Err(BackboneError::Layout(
                "layout expects a pseudo destination".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(BackboneError::Layout(
                "layout has no destination slot".into(),
            ))
        }
    }
    let ids = layout.position_ids();
    let tokens = Tensor::concat(&parts, 1)?.add(&params.positional_table.gather_rows(&ids)?)?;
    Ok(TokenSequence {
        tokens,
        position_ids: ids,
        kinds,
    })
}

/// `[len, len]` additive mask forbidding attention to later tokens.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASK_VALUE;
        }
    }
    Tensor::constant(data, &[len, len]).expect("square mask")
}

fn attention(
    x: &Tensor,
    layer: &LayerParams,
    cfg: &EncoderConfig,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let q = linear(x, &layer.query)?;
    let k = linear(x, &layer.key)?;
    let v = linear(x, &layer.value)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = q.slice(2, h * dh, dh)?;
        let kh = k.slice(2, h * dh, dh)?;
        let vh = v.slice(2, h * dh, dh)?;
        let scores = qh.matmul(&kh.transpose_last()?)?.scale(scale);
        let weights = scores.softmax_masked(mask)?;
        heads.push(weights.matmul(&vh)?);
    }
    linear(&Tensor::concat(&heads, 2)?, &layer.output)
}

thread_local! {
    static ENCODE_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of `encode` calls made so far on the current thread.
pub fn encode_calls() -> u64 {
    ENCODE_CALLS.with(|c| c.get())
}

/// Runs every transformer block and the final LayerNorm.
/// Returns `[batch, len, model_dim]` features.
pub fn encode(seq: &TokenSequence, params: &EncoderParams, mask: AttentionMask) -> Result<Tensor> {
    ENCODE_CALLS.with(|c| c.set(c.get() + 1));
    let cfg = &params.config;
    let mask = match mask {
        AttentionMask::Causal => Some(causal_mask(seq.len())),
        AttentionMask::Full => None,
    };
    let mut x = seq.tokens.clone();
    for layer in &params.layers {
        let normed = layer.attn_norm.apply(&x)?;
        x = x.add(&attention(&normed, layer, cfg, mask.as_ref())?)?;
        let normed = layer.mlp_norm.apply(&x)?;
        let hidden = linear(&normed, &layer.mlp_in)?.relu();
        x = x.add(&linear(&hidden, &layer.mlp_out)?)?;
    }
    params.final_norm.apply(&x)
}

/// Row `i` predicts the position one step after token `i`.
pub fn project_next_positions(features: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    linear(features, &params.next_position)
}

/// `[batch, model_dim]` destination-slot features to `[batch, K, 2]`.
pub fn regress_destinations(feature: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    let head = &params.destination_head;
    let hidden = linear(feature, &head.0)?.relu();
    let out = linear(&hidden, &head.1)?;
    let batch = feature.shape()[0];
    Ok(out.reshape(&[batch, params.config.num_modes, 2])?)
}

/// Two independent deep copies of `params`.
pub fn replicate(params: &EncoderParams) -> (EncoderParams, EncoderParams) {
    (params.deep_copy(), params.deep_copy())
}

/// Features of the token at sequence index `index`: `[batch, model_dim]`.
pub fn token_feature(features: &Tensor, index: usize) -> Result<Tensor> {
    let (b, _, d) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    Ok(features.slice(1, index, 1)?.reshape(&[b, d])?)
}


/// Outputs of the destination task: slot feature `[batch, d]` and
/// candidates `[batch, K, 2]`.
#[derive(Debug, Clone)]
pub struct DestinationOutput {
    pub feature: Tensor,
    pub candidates: Tensor,
}

/// Observed block plus the destination prompt, causal attention.
pub fn destination_forward(params: &EncoderParams, observed: &Tensor) -> Result<DestinationOutput> {
    let layout = Layout::destination(&params.config);
    let seq = embed_inputs(params, &layout, observed, None)?;
    let feats = encode(&seq, params, AttentionMask::Causal)?;
    let feature = token_feature(&feats, layout.len() - 1)?;
    let candidates = regress_destinations(&feature, params)?;
    Ok(DestinationOutput {
        feature,
        candidates,
    })
}

/// Outputs of the full-trajectory task.
#[derive(Debug, Clone)]
pub struct TrajectoryOutput {
    /// Features of the tokens that predict the future steps:
    /// `[batch, pred_len, d]`, sequence positions `obs_len-1 ..= total_len-2`.
    pub future_features: Tensor,
    /// `[batch, pred_len, 2]`
    pub future: Tensor,
}

/// Observed block, intermediate prompts and the pseudo destination under
/// full attention. Token `p` predicts timestep `p + 1`, so the future is
/// read from positions `obs_len-1 ..= total_len-2`; the output of the
/// destination token itself is unused.
pub fn trajectory_forward(
    params: &EncoderParams,
    observed: &Tensor,
    destination: &Tensor,
) -> Result<TrajectoryOutput> {
    let cfg = &params.config;
    let layout = Layout::trajectory(cfg);
    let seq = embed_inputs(params, &layout, observed, Some(destination))?;
    let feats = encode(&seq, params, AttentionMask::Full)?;
    let future_features = feats.slice(1, cfg.obs_len - 1, cfg.pred_len)?;
    let future = project_next_positions(&future_features, params)?;
    Ok(TrajectoryOutput {
        future_features,
        future,
    })
}

/// Teacher-forced next-position pass over ground-truth positions
/// `0 .. total_len-1`. Returns features `[batch, total_len-1, d]` and the
/// predictions for timesteps `1 .. total_len`.
pub fn next_position_forward(
    params: &EncoderParams,
    positions: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let len = positions.shape()[1];
    let seq = embed_inputs(params, &Layout::next_position(len), positions, None)?;
    let feats = encode(&seq, params, AttentionMask::Causal)?;
    let pred = project_next_positions(&feats, params)?;
    Ok((feats, pred))
}
