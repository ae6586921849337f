//! The composer attention block: layout masks, Gaussian box weights,
//! region-aware LoRA cross-attention and concept-isolating self-attention.
//!
//! The differentiable implementations live on a [`Tape`]; the plain-tensor
//! entry points wrap them with a throwaway tape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assets::{apply_projection, AttentionWeights, ConceptBundle, CROSS_KEY, CROSS_VALUE};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{transpose, Tensor};

/// A normalized layout box `[x0, y0, x1, y1]` with `x` along the width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct LayoutBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl LayoutBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite())
            && 0.0 <= x0
            && x0 < x1
            && x1 <= 1.0
            && 0.0 <= y0
            && y0 < y1
            && y1 <= 1.0;
        if !ok {
            return Err(Error::Argument(format!(
                "box [{x0}, {y0}, {x1}, {y1}] must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1"
            )));
        }
        Ok(LayoutBox { x0, y0, x1, y1 })
    }

    pub fn full() -> Self {
        LayoutBox {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }
}

impl TryFrom<[f64; 4]> for LayoutBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        LayoutBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<LayoutBox> for [f64; 4] {
    fn from(b: LayoutBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSpec {
    pub layout_box: LayoutBox,
    pub concept_id: String,
}

/// Global prompt plus the ordered concept regions.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutCondition {
    pub regions: Vec<RegionSpec>,
    /// The global prompt embedding, `tokens x d_text`.
    pub global_prompt_embed: Tensor,
}

impl LayoutCondition {
    pub fn new(regions: Vec<RegionSpec>, global_prompt_embed: Tensor) -> Result<Self> {
        for (i, r) in regions.iter().enumerate() {
            if regions[..i].iter().any(|o| o.concept_id == r.concept_id) {
                return Err(Error::Configuration(format!(
                    "concept {:?} appears twice in the layout",
                    r.concept_id
                )));
            }
        }
        global_prompt_embed.dims2()?;
        Ok(LayoutCondition {
            regions,
            global_prompt_embed,
        })
    }

    pub fn empty(global_prompt_embed: Tensor) -> Self {
        LayoutCondition {
            regions: Vec::new(),
            global_prompt_embed,
        }
    }
}

/// Attention maps captured from one composer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMaps<T> {
    /// `(h, w)` of the layer's pixel grid.
    pub resolution: (usize, usize),
    /// Concept-token cross-attention map per concept, `h x w`, in layout order.
    pub cross: Vec<(String, T)>,
    /// Self-attention probabilities, `(h·w) x (h·w)`, heads averaged.
    pub self_map: T,
}

/// Maps captured from every block of one denoiser forward.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttnRecord {
    pub layers: Vec<LayerMaps<Tensor>>,
}

impl AttnRecord {
    pub fn at_resolution(&self, h: usize, w: usize) -> impl Iterator<Item = &LayerMaps<Tensor>> {
        self.layers.iter().filter(move |l| l.resolution == (h, w))
    }

    /// Concept map averaged over all layers at `(h, w)`.
    pub fn mean_cross_map(&self, concept: usize, h: usize, w: usize) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        let mut n = 0;
        for l in self.at_resolution(h, w) {
            let m = &l.cross.get(concept)?.1;
            acc = Some(match acc {
                None => m.clone(),
                Some(a) => a.add(m).ok()?,
            });
            n += 1;
        }
        acc.map(|a| a.scale(1.0 / n as f64))
    }
}

/// Taped counterpart of [`LayerMaps`].
pub type TapedLayer = LayerMaps<Var>;

pub fn materialize(tape: &Tape, layers: &[TapedLayer]) -> AttnRecord {
    AttnRecord {
        layers: layers
            .iter()
            .map(|l| LayerMaps {
                resolution: l.resolution,
                cross: l
                    .cross
                    .iter()
                    .map(|(id, v)| (id.clone(), tape.value(*v).clone()))
                    .collect(),
                self_map: tape.value(l.self_map).clone(),
            })
            .collect(),
    }
}

/// Binary `h x w` mask of the pixels whose centers fall inside the box.
pub fn rasterize_mask(b: &LayoutBox, h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::Argument(format!("mask grid {h}x{w} is empty")));
    }
    let mut data = vec![0.0; h * w];
    let mut any = false;
    for i in 0..h {
        let cy = (i as f64 + 0.5) / h as f64;
        if !(b.y0 <= cy && cy < b.y1) {
            continue;
        }
        for j in 0..w {
            let cx = (j as f64 + 0.5) / w as f64;
            if b.x0 <= cx && cx < b.x1 {
                data[i * w + j] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask(format!(
            "box [{}, {}, {}, {}] covers no pixel center on a {h}x{w} grid",
            b.x0, b.y0, b.x1, b.y1
        )));
    }
    Ok(Tensor::from_parts(vec![h, w], data))
}

pub fn mask_bits(mask: &Tensor) -> Vec<bool> {
    mask.data().iter().map(|&v| v != 0.0).collect()
}

/// Pixel-space rectangle: top-left `(row, col)` and extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// Bounding box of the set pixels of an `h x w` mask.
pub fn mask_bbox(mask: &Tensor) -> Result<PixelBox> {
    let (h, w) = mask.dims2()?;
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for i in 0..h {
        for j in 0..w {
            if mask.at2(i, j) != 0.0 {
                r0 = r0.min(i);
                r1 = r1.max(i);
                c0 = c0.min(j);
                c1 = c1.max(j);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::EmptyMask("mask has no set pixels".into()));
    }
    Ok(PixelBox {
        row: r0,
        col: c0,
        height: r1 - r0 + 1,
        width: c1 - c0 + 1,
    })
}

/// Separable Gaussian centred on the box with `σ` equal to half the box
/// extent in pixels, normalized to an in-box maximum of exactly 1 and zero
/// outside the rasterized box.
pub fn gaussian_weight(b: &LayoutBox, h: usize, w: usize) -> Result<Tensor> {
    let mask = rasterize_mask(b, h, w)?;
    let cx = 0.5 * (b.x0 + b.x1) * w as f64;
    let cy = 0.5 * (b.y0 + b.y1) * h as f64;
    let sx = 0.5 * (b.x1 - b.x0) * w as f64;
    let sy = 0.5 * (b.y1 - b.y0) * h as f64;
    let mut data = vec![0.0; h * w];
    let mut peak: f64 = 0.0;
    for i in 0..h {
        let dy = i as f64 + 0.5 - cy;
        for j in 0..w {
            if mask.at2(i, j) == 0.0 {
                continue;
            }
            let dx = j as f64 + 0.5 - cx;
            let g = (-(dx * dx / (2.0 * sx * sx) + dy * dy / (2.0 * sy * sy))).exp();
            data[i * w + j] = g;
            peak = peak.max(g);
        }
    }
    if peak <= 0.0 {
        return Err(Error::Numeric(
            "Gaussian weight underflowed inside the box".into(),
        ));
    }
    for v in &mut data {
        *v /= peak;
    }
    Ok(Tensor::from_parts(vec![h, w], data))
}

/// One concept's inputs to the cross-attention block.
#[derive(Clone, Debug)]
pub struct ConceptInput<'a> {
    pub id: &'a str,
    pub layout_box: LayoutBox,
    pub bundle: &'a ConceptBundle,
}

/// Layout joined with its bundles, in layout order.
#[derive(Clone, Debug)]
pub struct Conditioning<'a> {
    pub global: &'a Tensor,
    pub concepts: Vec<ConceptInput<'a>>,
}

impl<'a> Conditioning<'a> {
    pub fn new(
        layout: &'a LayoutCondition,
        bundles: &'a BTreeMap<String, ConceptBundle>,
    ) -> Result<Self> {
        let concepts = layout
            .regions
            .iter()
            .map(|r| {
                let bundle = bundles.get(&r.concept_id).ok_or_else(|| {
                    Error::Configuration(format!("no bundle for concept {:?}", r.concept_id))
                })?;
                Ok(ConceptInput {
                    id: &r.concept_id,
                    layout_box: r.layout_box,
                    bundle,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Conditioning {
            global: &layout.global_prompt_embed,
            concepts,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Rasterized masks of every concept at `h x w`, in layout order.
    pub fn masks(&self, h: usize, w: usize) -> Result<Vec<Tensor>> {
        self.concepts
            .iter()
            .map(|c| rasterize_mask(&c.layout_box, h, w))
            .collect()
    }
}

fn check_heads(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Configuration(format!(
            "{d_model} features cannot be split into {heads} heads"
        )));
    }
    Ok(d_model / heads)
}

fn cols(t: &Tensor, start: usize, len: usize) -> Tensor {
    let (m, n) = t.dims2().expect("2-D");
    let mut out = Vec::with_capacity(m * len);
    for row in t.data().chunks(n) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Tensor::from_parts(vec![m, len], out)
}

/// Expands a per-pixel mask to a `pixels x channels` 0/1 matrix.
fn broadcast_mask(mask: &[bool], channels: usize) -> Tensor {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, channels))
        .collect();
    Tensor::from_parts(vec![mask.len(), channels], data)
}

/// Attention of `queries` against constant keys/values for every head.
///
/// Returns the concatenated head outputs and, when `token` is given, the
/// head-averaged attention column of that token as an `h x w` map.
#[allow(clippy::too_many_arguments)]
fn attend_constant_kv(
    tape: &mut Tape,
    queries: Var,
    keys: &Tensor,
    values: &Tensor,
    heads: usize,
    token: Option<usize>,
    h: usize,
    w: usize,
) -> Result<(Var, Option<Var>)> {
    let (pixels, d_model) = tape.value(queries).dims2()?;
    let d_head = check_heads(d_model, heads)?;
    let tokens = keys.dims2()?.0;
    let inv = 1.0 / (d_head as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut token_maps = Vec::with_capacity(heads);
    for hd in 0..heads {
        let q = tape.slice_cols(queries, hd * d_head, d_head)?;
        let kt = tape.leaf(transpose(&cols(keys, hd * d_head, d_head))?);
        let v = tape.leaf(cols(values, hd * d_head, d_head));
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, inv)?;
        let probs = tape.softmax_rows(logits)?;
        if let Some(c) = token {
            let col = tape.gather(probs, (0..pixels).map(|p| p * tokens + c).collect())?;
            token_maps.push(col);
        }
        outs.push(tape.matmul(probs, v)?);
    }
    let out = tape.concat_cols(&outs)?;
    let map = match token_maps.split_first() {
        None => None,
        Some((&first, rest)) => {
            let mut acc = first;
            for &m in rest {
                acc = tape.add(acc, m)?;
            }
            let acc = tape.scale(acc, 1.0 / heads as f64)?;
            Some(tape.reshape(acc, &[h, w])?)
        }
    };
    Ok((out, map))
}

fn linear(tape: &mut Tape, x: Var, weight: &Tensor) -> Result<Var> {
    let wt = tape.leaf(transpose(weight)?);
    tape.matmul(x, wt)
}

/// Region-aware cross-attention on the tape.
///
/// `x` is the `(h·w) x d_model` pixel-feature matrix. The global prompt
/// attends with unmasked queries; each concept attends with queries zeroed
/// outside its mask and keys/values projected through its LoRA deltas. The
/// per-region outputs are merged by [`Tape::compose`].
pub fn region_cross_attention_taped(
    tape: &mut Tape,
    x: Var,
    h: usize,
    w: usize,
    cond: &Conditioning<'_>,
    weights: &AttentionWeights,
    heads: usize,
) -> Result<(Var, Vec<(String, Var)>)> {
    let (pixels, d_model) = tape.value(x).dims2()?;
    if pixels != h * w {
        return Err(Error::Configuration(format!(
            "{pixels} pixel rows for a {h}x{w} grid"
        )));
    }
    let q = linear(tape, x, &weights.query)?;
    let k0 = apply_projection(cond.global, &weights.key, None)?;
    let v0 = apply_projection(cond.global, &weights.value, None)?;
    let (attn0, _) = attend_constant_kv(tape, q, &k0, &v0, heads, None, h, w)?;
    let h0 = linear(tape, attn0, &weights.out)?;

    let mut regional = Vec::with_capacity(cond.concepts.len());
    let mut maps = Vec::with_capacity(cond.concepts.len());
    let mut bits = Vec::with_capacity(cond.concepts.len());
    for c in &cond.concepts {
        let mask = mask_bits(&rasterize_mask(&c.layout_box, h, w)?);
        let m = tape.leaf(broadcast_mask(&mask, d_model));
        let qn = tape.mul(q, m)?;
        let prompt = &c.bundle.prompt_embed;
        let kn = apply_projection(prompt, &weights.key, c.bundle.delta(CROSS_KEY))?;
        let vn = apply_projection(prompt, &weights.value, c.bundle.delta(CROSS_VALUE))?;
        let (attn, map) =
            attend_constant_kv(tape, qn, &kn, &vn, heads, Some(c.bundle.token_index), h, w)?;
        regional.push(linear(tape, attn, &weights.out)?);
        maps.push((c.id.to_string(), map.expect("token map requested")));
        bits.push(mask);
    }
    let pairs: Vec<(Var, &[bool])> = regional
        .iter()
        .zip(&bits)
        .map(|(&v, b)| (v, b.as_slice()))
        .collect();
    let hidden = tape.compose(h0, &pairs)?;
    Ok((hidden, maps))
}

/// Self-attention key permissions for the given region masks.
///
/// A query may not attend to a key when both pixels lie in foreground
/// regions and share no region. Returns `None` when nothing is forbidden.
pub fn isolation_permissions(masks: &[Vec<bool>]) -> Result<Option<Vec<bool>>> {
    if masks.len() < 2 {
        return Ok(None);
    }
    if masks.len() > 64 {
        return Err(Error::Configuration(format!(
            "{} regions exceed the 64-region isolation limit",
            masks.len()
        )));
    }
    let pixels = masks[0].len();
    let member: Vec<u64> = (0..pixels)
        .map(|p| {
            masks
                .iter()
                .enumerate()
                .filter(|(_, m)| m[p])
                .fold(0u64, |acc, (i, _)| acc | (1 << i))
        })
        .collect();
    let mut permitted = vec![true; pixels * pixels];
    let mut any = false;
    for (q, &mq) in member.iter().enumerate() {
        if mq == 0 {
            continue;
        }
        for (k, &mk) in member.iter().enumerate() {
            if mk != 0 && mq & mk == 0 {
                permitted[q * pixels + k] = false;
                any = true;
            }
        }
    }
    Ok(any.then_some(permitted))
}

/// Concept-isolating self-attention on the tape; returns the projected
/// output and the head-averaged attention matrix.
pub fn masked_self_attention_taped(
    tape: &mut Tape,
    x: Var,
    masks: &[Vec<bool>],
    weights: &AttentionWeights,
    heads: usize,
) -> Result<(Var, Var)> {
    let (pixels, d_model) = tape.value(x).dims2()?;
    if let Some(bad) = masks.iter().find(|m| m.len() != pixels) {
        return Err(Error::Dimension(format!(
            "mask of {} pixels for {pixels} rows",
            bad.len()
        )));
    }
    let d_head = check_heads(d_model, heads)?;
    let permitted = isolation_permissions(masks)?;
    let q = linear(tape, x, &weights.query)?;
    let k = linear(tape, x, &weights.key)?;
    let v = linear(tape, x, &weights.value)?;
    let inv = 1.0 / (d_head as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut map: Option<Var> = None;
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * d_head, d_head)?;
        let kh = tape.slice_cols(k, hd * d_head, d_head)?;
        let vh = tape.slice_cols(v, hd * d_head, d_head)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, inv)?;
        let probs = tape.masked_softmax_rows(logits, permitted.as_deref())?;
        map = Some(match map {
            None => probs,
            Some(acc) => tape.add(acc, probs)?,
        });
        outs.push(tape.matmul(probs, vh)?);
    }
    let map = tape.scale(map.expect("at least one head"), 1.0 / heads as f64)?;
    let cat = tape.concat_cols(&outs)?;
    let out = linear(tape, cat, &weights.out)?;
    Ok((out, map))
}

/// Region-aware cross-attention on plain tensors.
///
/// Returns the composed hidden state and the concept-token map of each
/// concept in layout order.
pub fn region_cross_attention(
    z_flat: &Tensor,
    h: usize,
    w: usize,
    layout: &LayoutCondition,
    bundles: &BTreeMap<String, ConceptBundle>,
    weights: &AttentionWeights,
    heads: usize,
) -> Result<(Tensor, Vec<(String, Tensor)>)> {
    let cond = Conditioning::new(layout, bundles)?;
    let mut tape = Tape::new();
    let x = tape.leaf(z_flat.clone());
    let (hidden, maps) = region_cross_attention_taped(&mut tape, x, h, w, &cond, weights, heads)?;
    let maps = maps
        .into_iter()
        .map(|(id, v)| (id, tape.value(v).clone()))
        .collect();
    Ok((tape.value(hidden).clone(), maps))
}

/// Concept-isolating self-attention on plain tensors; masks are `h x w`
/// binary tensors (or any shape with one entry per pixel).
pub fn masked_self_attention(
    z_flat: &Tensor,
    masks: &[Tensor],
    weights: &AttentionWeights,
    heads: usize,
) -> Result<(Tensor, Tensor)> {
    let bits: Vec<Vec<bool>> = masks.iter().map(mask_bits).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(z_flat.clone());
    let (out, map) = masked_self_attention_taped(&mut tape, x, &bits, weights, heads)?;
    Ok((tape.value(out).clone(), tape.value(map).clone()))
}

/// Merges regional hidden states: uncovered pixels keep `h0`, covered
/// pixels take the mean of the hidden states of the masks covering them.
pub fn compose_hidden(h0: &Tensor, regional: &[(Tensor, Tensor)]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let base = tape.leaf(h0.clone());
    let bits: Vec<Vec<bool>> = regional.iter().map(|(m, _)| mask_bits(m)).collect();
    let vars: Vec<Var> = regional
        .iter()
        .map(|(_, hn)| tape.leaf(hn.clone()))
        .collect();
    let pairs: Vec<(Var, &[bool])> = vars
        .iter()
        .zip(&bits)
        .map(|(&v, b)| (v, b.as_slice()))
        .collect();
    let out = tape.compose(base, &pairs)?;
    Ok(tape.value(out).clone())
}
