//! Two-level toy denoiser: composer blocks at full and half resolution
//! joined by average pooling, nearest upsampling and a skip connection.

use std::collections::BTreeMap;

use crate::assets::{BaseWeights, BlockWeights, ConceptBundle};
use crate::attention::{
    mask_bits, masked_self_attention_taped, materialize, region_cross_attention_taped, AttnRecord,
    Conditioning, LayerMaps, LayoutCondition, TapedLayer,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Sinusoidal embedding of the timestep, `d` entries (sines then cosines).
pub fn timestep_embedding(t: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::from_parts(vec![d], out)
}

fn linear(tape: &mut Tape, x: Var, weight: &Tensor) -> Result<Var> {
    let wt = tape.leaf(crate::tensor::transpose(weight)?);
    tape.matmul(x, wt)
}

fn composer_block(
    tape: &mut Tape,
    x: Var,
    (h, w): (usize, usize),
    cond: &Conditioning<'_>,
    weights: &BlockWeights,
    heads: usize,
) -> Result<(Var, TapedLayer)> {
    let masks: Vec<Vec<bool>> = cond.masks(h, w)?.iter().map(mask_bits).collect();
    let normed = tape.layer_norm_rows(x, LN_EPS)?;
    let (sa, self_map) =
        masked_self_attention_taped(tape, normed, &masks, &weights.self_attn, heads)?;
    let x = tape.add(x, sa)?;
    let normed = tape.layer_norm_rows(x, LN_EPS)?;
    let (ca, cross) =
        region_cross_attention_taped(tape, normed, h, w, cond, &weights.cross_attn, heads)?;
    let x = tape.add(x, ca)?;
    Ok((
        x,
        LayerMaps {
            resolution: (h, w),
            cross,
            self_map,
        },
    ))
}

/// Noise prediction for a `C x h x w` latent on the tape, plus the maps of
/// every attention block in execution order.
pub fn denoiser_forward_taped(
    tape: &mut Tape,
    z: Var,
    t: usize,
    cond: &Conditioning<'_>,
    weights: &BaseWeights,
) -> Result<(Var, Vec<TapedLayer>)> {
    let dims = weights.dims;
    let [c, h, w] = tape.value(z).shape()[..] else {
        return Err(Error::Configuration(format!(
            "latent must be C x h x w, got {:?}",
            tape.value(z).shape()
        )));
    };
    if c != dims.channels || h % 2 != 0 || w % 2 != 0 || weights.blocks.len() < 3 {
        return Err(Error::Configuration(format!(
            "latent {c}x{h}x{w} does not fit a {}-channel two-level denoiser",
            dims.channels
        )));
    }
    let pixels = h * w;
    let flat = tape.reshape(z, &[c, pixels])?;
    let flat = tape.transpose(flat)?;
    let x = linear(tape, flat, &weights.input)?;
    let temb = tape.leaf(timestep_embedding(t, dims.d_model));
    let x = tape.add_row_bias(x, temb)?;

    let mut layers = Vec::with_capacity(3);
    let (x, l) = composer_block(tape, x, (h, w), cond, &weights.blocks[0], dims.heads)?;
    layers.push(l);
    let (skip, l) = composer_block(tape, x, (h, w), cond, &weights.blocks[1], dims.heads)?;
    layers.push(l);
    let down = tape.avg_pool2(skip, h, w)?;
    let (x, l) = composer_block(
        tape,
        down,
        (h / 2, w / 2),
        cond,
        &weights.blocks[2],
        dims.heads,
    )?;
    layers.push(l);
    let up = tape.upsample2(x, h / 2, w / 2)?;
    let x = tape.add(up, skip)?;

    let out = linear(tape, x, &weights.output)?;
    let out = tape.transpose(out)?;
    let eps = tape.reshape(out, &[c, h, w])?;
    Ok((eps, layers))
}

/// Plain-tensor forward pass.
pub fn denoiser_forward(
    z: &Tensor,
    t: usize,
    layout: &LayoutCondition,
    bundles: &BTreeMap<String, ConceptBundle>,
    weights: &BaseWeights,
) -> Result<(Tensor, AttnRecord)> {
    let cond = Conditioning::new(layout, bundles)?;
    forward_with(z, t, &cond, weights)
}

pub(crate) fn forward_with(
    z: &Tensor,
    t: usize,
    cond: &Conditioning<'_>,
    weights: &BaseWeights,
) -> Result<(Tensor, AttnRecord)> {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let (eps, layers) = denoiser_forward_taped(&mut tape, zv, t, cond, weights)?;
    Ok((tape.value(eps).clone(), materialize(&tape, &layers)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::ModelDims;
    use crate::rng;

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_output_weights_give_zero_noise() {
        let dims = ModelDims {
            channels: 4,
            ..ModelDims::default()
        };
        let mut weights = BaseWeights::generate(3, dims).unwrap();
        weights.output = Tensor::zeros(weights.output.shape());
        let mut r = rng::stream(3, "z");
        let z = rng::normal_tensor(&mut r, &[4, 8, 8], 1.0);
        let global = rng::normal_tensor(&mut r, &[4, 32], 1.0);
        let layout = LayoutCondition::empty(global);
        let (eps, record) = denoiser_forward(&z, 10, &layout, &BTreeMap::new(), &weights).unwrap();
        assert_eq!(eps.shape(), &[4, 8, 8]);
        assert!(eps.data().iter().all(|&v| v == 0.0));
        let res: Vec<_> = record.layers.iter().map(|l| l.resolution).collect();
        assert_eq!(res, vec![(8, 8), (8, 8), (4, 4)]);
    }

    #[test]
    fn wrong_channel_count_is_a_configuration_error() {
        let weights = BaseWeights::generate(3, ModelDims::default()).unwrap();
        let z = Tensor::zeros(&[3, 8, 8]);
        let layout = LayoutCondition::empty(Tensor::zeros(&[4, 32]));
        let err = denoiser_forward(&z, 1, &layout, &BTreeMap::new(), &weights).unwrap_err();
        assert!(matches!(err, Error::Configuration(_)));
    }
}
