use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderConfig, Result};
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;
const EMBED_STD: f32 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::param(vec![1.0; d], &[d]).expect("shape"),
            bias: Tensor::param(vec![0.0; d], &[d]).expect("shape"),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(&self.gain, &self.bias, LN_EPS)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn_norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub mlp_norm: Norm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

/// All learnable state of one predictor.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub input_embedding: Linear,
    /// One row per absolute timestep.
    pub positional_table: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Norm,
    pub next_position: Linear,
    /// One row per future timestep, starting at `obs_len`.
    pub prompt_embeddings: Tensor,
    pub destination_head: (Linear, Linear),
    pub kd_traj: Linear,
    pub kd_dest: Linear,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Linear {
            weight: Tensor::param(w, &[fan_in, fan_out]).expect("shape"),
            bias: Tensor::param(vec![0.0; fan_out], &[fan_out]).expect("shape"),
        }
    }

    fn embedding(&mut self, rows: usize, d: usize) -> Tensor {
        let normal = Normal::new(0.0, EMBED_STD).expect("valid std");
        let data = (0..rows * d)
            .map(|_| normal.sample(&mut self.rng))
            .collect();
        Tensor::param(data, &[rows, d]).expect("shape")
    }
}

fn identity(d: usize) -> Linear {
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    Linear {
        weight: Tensor::param(w, &[d, d]).expect("shape"),
        bias: Tensor::param(vec![0.0; d], &[d]).expect("shape"),
    }
}

impl EncoderParams {
    /// Seeded initialization: uniform `±1/sqrt(fan_in)` weights, zero biases,
    /// `N(0, 0.02)` embeddings and prompts, identity KD projectors.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.model_dim;
        let input_embedding = init.linear(2, d);
        let positional_table = init.embedding(config.total_len(), d);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                attn_norm: Norm::new(d),
                query: init.linear(d, d),
                key: init.linear(d, d),
                value: init.linear(d, d),
                output: init.linear(d, d),
                mlp_norm: Norm::new(d),
                mlp_in: init.linear(d, config.mlp_hidden_dim),
                mlp_out: init.linear(config.mlp_hidden_dim, d),
            })
            .collect();
        let next_position = init.linear(d, 2);
        let prompt_embeddings = init.embedding(config.pred_len, d);
        let destination_head = (
            init.linear(d, config.dest_hidden_dim),
            init.linear(config.dest_hidden_dim, 2 * config.num_modes),
        );
        Ok(Self {
            config: config.clone(),
            input_embedding,
            positional_table,
            layers,
            final_norm: Norm::new(d),
            next_position,
            prompt_embeddings,
            destination_head,
            kd_traj: identity(d),
            kd_dest: identity(d),
        })
    }

    /// Every parameter with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        push_linear(&mut out, "input_embedding", &self.input_embedding);
        out.push(("positional_table".into(), &self.positional_table));
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            push_norm(&mut out, &format!("{p}.attn_norm"), &layer.attn_norm);
            push_linear(&mut out, &format!("{p}.query"), &layer.query);
            push_linear(&mut out, &format!("{p}.key"), &layer.key);
            push_linear(&mut out, &format!("{p}.value"), &layer.value);
            push_linear(&mut out, &format!("{p}.output"), &layer.output);
            push_norm(&mut out, &format!("{p}.mlp_norm"), &layer.mlp_norm);
            push_linear(&mut out, &format!("{p}.mlp_in"), &layer.mlp_in);
            push_linear(&mut out, &format!("{p}.mlp_out"), &layer.mlp_out);
        }
        push_norm(&mut out, "final_norm", &self.final_norm);
        push_linear(&mut out, "next_position", &self.next_position);
        out.push(("prompt_embeddings".into(), &self.prompt_embeddings));
        push_linear(
            &mut out,
            "destination_head.hidden",
            &self.destination_head.0,
        );
        push_linear(&mut out, "destination_head.out", &self.destination_head.1);
        push_linear(&mut out, "kd_traj", &self.kd_traj);
        push_linear(&mut out, "kd_dest", &self.kd_dest);
        out
    }

    /// Mutable handles in the same order as [`EncoderParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        push_linear_mut(&mut out, &mut self.input_embedding);
        out.push(&mut self.positional_table);
        for layer in &mut self.layers {
            push_norm_mut(&mut out, &mut layer.attn_norm);
            push_linear_mut(&mut out, &mut layer.query);
            push_linear_mut(&mut out, &mut layer.key);
            push_linear_mut(&mut out, &mut layer.value);
            push_linear_mut(&mut out, &mut layer.output);
            push_norm_mut(&mut out, &mut layer.mlp_norm);
            push_linear_mut(&mut out, &mut layer.mlp_in);
            push_linear_mut(&mut out, &mut layer.mlp_out);
        }
        push_norm_mut(&mut out, &mut self.final_norm);
        push_linear_mut(&mut out, &mut self.next_position);
        out.push(&mut self.prompt_embeddings);
        push_linear_mut(&mut out, &mut self.destination_head.0);
        push_linear_mut(&mut out, &mut self.destination_head.1);
        push_linear_mut(&mut out, &mut self.kd_traj);
        push_linear_mut(&mut out, &mut self.kd_dest);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Fresh leaves with copied values, so the result shares nothing with
    /// `self`. `requires_grad` is decided per parameter name.
    pub fn copy_with(&self, trainable: impl Fn(&str) -> bool) -> Self {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        let mut out = self.clone();
        for (name, t) in names.iter().zip(out.tensors_mut()) {
            *t = t.to_leaf(trainable(name));
        }
        out
    }

    pub fn deep_copy(&self) -> Self {
        self.copy_with(|_| true)
    }

    /// Copy with every parameter constant, for teachers and inference.
    pub fn frozen(&self) -> Self {
        self.copy_with(|_| false)
    }

    /// Bit patterns of every value, in parameter order.
    pub fn fingerprint(&self) -> Vec<u32> {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// True for parameters that belong to the destination regression MLP.
pub fn is_destination_head(name: &str) -> bool {
    name.starts_with("destination_head.")
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, l: &'a Linear) {
    out.push((format!("{name}.weight"), &l.weight));
    out.push((format!("{name}.bias"), &l.bias));
}

fn push_norm<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, n: &'a Norm) {
    out.push((format!("{name}.gain"), &n.gain));
    out.push((format!("{name}.bias"), &n.bias));
}

fn push_linear_mut<'a>(out: &mut Vec<&'a mut Tensor>, l: &'a mut Linear) {
    out.push(&mut l.weight);
    out.push(&mut l.bias);
}

fn push_norm_mut<'a>(out: &mut Vec<&'a mut Tensor>, n: &'a mut Norm) {
    out.push(&mut n.gain);
    out.push(&mut n.bias);
}
