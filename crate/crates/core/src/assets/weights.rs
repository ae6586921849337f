//! Seeded "pre-trained" weights for the toy denoiser.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Name mixed into every weight stream; bump when the initialization changes.
pub const GENERATOR: &str = "toy-unet-v1";

/// Input projection gain. A large skip path keeps the attention blocks a
/// perturbation of the latent and the timestep embedding a small bias.
pub const INPUT_GAIN: f64 = 4.0;

/// Cross-attention query gain (sharper concept-token maps).
pub const CROSS_QUERY_GAIN: f64 = 1.5;

/// Number of composer blocks: two at full resolution, one at half.
pub const BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Latent channels.
    pub channels: usize,
    pub d_model: usize,
    pub d_text: usize,
    pub heads: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            channels: 8,
            d_model: 32,
            d_text: 32,
            heads: 2,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.d_model == 0 || self.d_text == 0 || self.heads == 0 {
            return Err(Error::Configuration(format!(
                "zero model dimension in {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Configuration(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Projections of one attention layer, each stored `d_out x d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub out: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights {
    pub dims: ModelDims,
    /// `d_model x channels`
    pub input: Tensor,
    /// `channels x d_model`
    pub output: Tensor,
    pub blocks: Vec<BlockWeights>,
}

fn linear(seed: u64, name: &str, d_out: usize, d_in: usize, gain: f64) -> Tensor {
    let mut r = rng::stream(seed, &format!("{GENERATOR}/{name}"));
    rng::normal_tensor(&mut r, &[d_out, d_in], gain / (d_in as f64).sqrt())
}

fn attention(
    seed: u64,
    prefix: &str,
    d_model: usize,
    d_kv: usize,
    q_gain: f64,
) -> AttentionWeights {
    AttentionWeights {
        query: linear(seed, &format!("{prefix}.q"), d_model, d_model, q_gain),
        key: linear(seed, &format!("{prefix}.k"), d_model, d_kv, 1.0),
        value: linear(seed, &format!("{prefix}.v"), d_model, d_kv, 1.0),
        out: linear(seed, &format!("{prefix}.o"), d_model, d_model, 0.5),
    }
}

/// Moore-Penrose pseudo-inverse of a full-column-rank `m x n` matrix.
///
/// Used as the output projection so the untrained network predicts
/// `ε̂ ≈ z` plus the attention residuals, which keeps the latent's scale
/// bounded across the schedule.
fn left_inverse(w: &Tensor) -> Result<Tensor> {
    let (m, n) = w.dims2()?;
    let pinv = DMatrix::from_row_slice(m, n, w.data())
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Numeric(format!("pseudo-inverse failed: {e}")))?;
    let data = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| pinv[(i, j)])
        .collect();
    Tensor::new(vec![n, m], data)
}

impl BaseWeights {
    pub fn generate(seed: u64, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            channels,
            d_model,
            d_text,
            ..
        } = dims;
        let blocks = (0..BLOCKS)
            .map(|b| BlockWeights {
                self_attn: attention(seed, &format!("block{b}.self"), d_model, d_model, 1.0),
                cross_attn: attention(
                    seed,
                    &format!("block{b}.cross"),
                    d_model,
                    d_text,
                    CROSS_QUERY_GAIN,
                ),
            })
            .collect();
        let input = linear(seed, "input", d_model, channels, INPUT_GAIN);
        let output = left_inverse(&input)?;
        Ok(BaseWeights {
            dims,
            input,
            output,
            blocks,
        })
    }
}
