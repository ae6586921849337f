//! Concept bundles: a local prompt embedding, the concept-token position and
//! rank-r LoRA deltas for the cross-attention key/value projections.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{self, Entry};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{matmul, transpose, Tensor};

pub const CROSS_KEY: &str = "cross.W_K";
pub const CROSS_VALUE: &str = "cross.W_V";
pub const PROJECTIONS: [&str; 2] = [CROSS_KEY, CROSS_VALUE];

/// A low-rank update `scale · up · down` to a `d_out x d_in` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraDelta {
    /// `r x d_in`
    pub down: Tensor,
    /// `d_out x r`
    pub up: Tensor,
    pub scale: f64,
}

impl LoraDelta {
    pub fn new(down: Tensor, up: Tensor, scale: f64) -> Result<Self> {
        let (r, d_in) = down.dims2()?;
        let (d_out, r2) = up.dims2()?;
        if r != r2 {
            return Err(Error::Validation(format!(
                "LoRA down has rank {r} but up has rank {r2}"
            )));
        }
        if r > d_in.min(d_out) {
            return Err(Error::Validation(format!(
                "LoRA rank {r} exceeds min({d_in}, {d_out})"
            )));
        }
        if !scale.is_finite() {
            return Err(Error::Data("LoRA scale is not finite".into()));
        }
        Ok(LoraDelta { down, up, scale })
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.up.shape()[0]
    }

    /// Dense `scale · up · down`.
    pub fn dense(&self) -> Tensor {
        matmul(&self.up, &self.down)
            .expect("ranks validated on construction")
            .scale(self.scale)
    }
}

/// `x · (base + scale · up · down)ᵀ`, or exactly `x · baseᵀ` without a delta.
pub fn apply_projection(x: &Tensor, base: &Tensor, delta: Option<&LoraDelta>) -> Result<Tensor> {
    let (d_out, d_in) = base.dims2()?;
    let (_, xd) = x.dims2()?;
    if xd != d_in {
        return Err(Error::Dimension(format!(
            "projection input has {xd} features, weight expects {d_in}"
        )));
    }
    let weight = match delta {
        None => return matmul(x, &transpose(base)?),
        Some(d) => {
            if d.d_in() != d_in || d.d_out() != d_out {
                return Err(Error::Dimension(format!(
                    "LoRA delta {}x{} does not match base {d_out}x{d_in}",
                    d.d_out(),
                    d.d_in()
                )));
            }
            base.add(&d.dense())?
        }
    };
    matmul(x, &transpose(&weight)?)
}

/// Per-concept assets consumed at composition time.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBundle {
    pub id: String,
    /// Local prompt embedding, `tokens x d_text`.
    pub prompt_embed: Tensor,
    /// Row of `prompt_embed` holding the concept token.
    pub token_index: usize,
    /// Keyed by projection name ([`CROSS_KEY`], [`CROSS_VALUE`]).
    pub deltas: BTreeMap<String, LoraDelta>,
}

impl ConceptBundle {
    pub fn tokens(&self) -> usize {
        self.prompt_embed.shape()[0]
    }

    pub fn d_text(&self) -> usize {
        self.prompt_embed.shape()[1]
    }

    pub fn delta(&self, projection: &str) -> Option<&LoraDelta> {
        self.deltas.get(projection)
    }

    /// Checks the internal invariants of the bundle.
    pub fn validate(&self) -> Result<()> {
        let (tokens, d_text) = self.prompt_embed.dims2()?;
        if self.token_index >= tokens {
            return Err(Error::Validation(format!(
                "bundle {:?}: token index {} outside {tokens} tokens",
                self.id, self.token_index
            )));
        }
        for (name, d) in &self.deltas {
            if !PROJECTIONS.contains(&name.as_str()) {
                return Err(Error::Validation(format!(
                    "bundle {:?}: unknown projection {name:?}",
                    self.id
                )));
            }
            if d.d_in() != d_text {
                return Err(Error::Validation(format!(
                    "bundle {:?}: {name} expects {} input features, prompt has {d_text}",
                    self.id,
                    d.d_in()
                )));
            }
        }
        Ok(())
    }

    /// Checks that every delta fits a `d_model x d_text` key/value projection.
    pub fn validate_for(&self, d_model: usize, d_text: usize) -> Result<()> {
        if self.d_text() != d_text {
            return Err(Error::Configuration(format!(
                "bundle {:?} has d_text {} but the model expects {d_text}",
                self.id,
                self.d_text()
            )));
        }
        for (name, d) in &self.deltas {
            if d.d_out() != d_model || d.d_in() != d_text {
                return Err(Error::Configuration(format!(
                    "bundle {:?}: {name} is {}x{}, projection is {d_model}x{d_text}",
                    self.id,
                    d.d_out(),
                    d.d_in()
                )));
            }
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Result<Vec<Entry>> {
        let mut scale = None;
        let mut entries = vec![
            tensor_entry("prompt_embed", &self.prompt_embed),
            Entry::new("token_index", vec![1], vec![self.token_index as f64]),
        ];
        for name in PROJECTIONS {
            let d = self.deltas.get(name).ok_or_else(|| {
                Error::Validation(format!("bundle {:?} lacks a {name} delta", self.id))
            })?;
            match scale {
                None => scale = Some(d.scale),
                Some(s) if s != d.scale => {
                    return Err(Error::Validation(format!(
                        "bundle {:?}: deltas carry different scales",
                        self.id
                    )))
                }
                _ => {}
            }
            entries.push(tensor_entry(&format!("{name}.down"), &d.down));
            entries.push(tensor_entry(&format!("{name}.up"), &d.up));
        }
        entries.push(Entry::scalar("scale", scale.unwrap_or(1.0)));
        Ok(entries)
    }

    pub fn from_entries(id: impl Into<String>, entries: &[Entry]) -> Result<Self> {
        let id = id.into();
        let prompt_embed = entry_tensor(container::find(entries, "prompt_embed")?)?;
        if prompt_embed.shape().len() != 2 {
            return Err(Error::Validation(format!(
                "prompt_embed must be 2-D, got {:?}",
                prompt_embed.shape()
            )));
        }
        let token_index = single(container::find(entries, "token_index")?)?;
        if token_index < 0.0 || token_index.fract() != 0.0 {
            return Err(Error::Validation(format!(
                "token_index {token_index} is not a non-negative integer"
            )));
        }
        let scale = single(container::find(entries, "scale")?)?;
        let mut deltas = BTreeMap::new();
        for name in PROJECTIONS {
            let down = entry_tensor(container::find(entries, &format!("{name}.down"))?)?;
            let up = entry_tensor(container::find(entries, &format!("{name}.up"))?)?;
            deltas.insert(name.to_string(), LoraDelta::new(down, up, scale)?);
        }
        let bundle = ConceptBundle {
            id,
            prompt_embed,
            token_index: token_index as usize,
            deltas,
        };
        bundle.validate()?;
        let [k, v] = PROJECTIONS.map(|p| &bundle.deltas[p]);
        if k.down.shape() != v.down.shape() || k.up.shape() != v.up.shape() {
            return Err(Error::Validation(
                "key and value deltas have different shapes".into(),
            ));
        }
        Ok(bundle)
    }
}

fn tensor_entry(name: &str, t: &Tensor) -> Entry {
    Entry::new(name, t.shape().to_vec(), t.data().to_vec())
}

fn entry_tensor(e: &Entry) -> Result<Tensor> {
    if e.dims.is_empty() {
        return Err(Error::Validation(format!(
            "tensor {:?} must not be a scalar",
            e.name
        )));
    }
    Tensor::new(e.dims.clone(), e.values.clone())
        .map_err(|err| Error::Validation(format!("tensor {:?}: {err}", e.name)))
}

fn single(e: &Entry) -> Result<f64> {
    match e.values[..] {
        [v] => Ok(v),
        _ => Err(Error::Validation(format!(
            "tensor {:?} must hold exactly one value",
            e.name
        ))),
    }
}

/// Bundle id used for a file: its stem.
pub fn bundle_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "concept".to_string())
}

pub fn load_bundle(path: &Path) -> Result<ConceptBundle> {
    let entries = container::read(path)?;
    ConceptBundle::from_entries(bundle_id(path), &entries)
}

pub fn save_bundle(bundle: &ConceptBundle, path: &Path) -> Result<()> {
    container::write(path, &bundle.to_entries()?)
}

/// Sizes of a synthetic bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleDims {
    pub tokens: usize,
    pub d_text: usize,
    pub d_model: usize,
    pub rank: usize,
}

impl Default for BundleDims {
    fn default() -> Self {
        BundleDims {
            tokens: 4,
            d_text: 32,
            d_model: 32,
            rank: 4,
        }
    }
}

fn round_f32(t: Tensor) -> Tensor {
    t.map(|v| f64::from(v as f32))
}

/// Deterministic stand-in for a trained concept: seeded standard-normal
/// prompt embedding, deltas with `N(0, 1/r)` entries, concept token at 1.
///
/// Values are rounded to `f32` so the in-memory bundle equals what a
/// save/load cycle returns.
pub fn synthesize_bundle(id: &str, seed: u64, dims: BundleDims) -> Result<ConceptBundle> {
    let BundleDims {
        tokens,
        d_text,
        d_model,
        rank,
    } = dims;
    if tokens < 2 || d_text == 0 || d_model == 0 {
        return Err(Error::Argument(format!(
            "synthetic bundle needs tokens >= 2 and positive widths, got {dims:?}"
        )));
    }
    if rank == 0 || rank > d_text.min(d_model) {
        return Err(Error::Argument(format!(
            "rank {rank} must lie in 1..=min({d_text}, {d_model})"
        )));
    }
    let mut prompt_rng = rng::stream(seed, "bundle/prompt_embed");
    let prompt_embed = round_f32(rng::normal_tensor(&mut prompt_rng, &[tokens, d_text], 1.0));
    let std = 1.0 / (rank as f64).sqrt();
    let mut deltas = BTreeMap::new();
    for name in PROJECTIONS {
        let mut r = rng::stream(seed, &format!("bundle/{name}"));
        let down = round_f32(rng::normal_tensor(&mut r, &[rank, d_text], std));
        let up = round_f32(rng::normal_tensor(&mut r, &[d_model, rank], std));
        deltas.insert(name.to_string(), LoraDelta::new(down, up, 1.0)?);
    }
    Ok(ConceptBundle {
        id: id.to_string(),
        prompt_embed,
        token_index: 1,
        deltas,
    })
}

/// Writes a synthetic bundle to `path` (see [`synthesize_bundle`]).
pub fn gen_synthetic_bundle(seed: u64, dims: BundleDims, path: &Path) -> Result<ConceptBundle> {
    let bundle = synthesize_bundle(&bundle_id(path), seed, dims)?;
    save_bundle(&bundle, path)?;
    Ok(bundle)
}
