use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::assets::{gen_synthetic_bundle, synthesize_bundle, BaseWeights, BundleDims, ModelDims};
use crate::attention::{LayoutBox, LayoutCondition, RegionSpec};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::rng;
use crate::tensor::Tensor;

use super::{
    save_prompt, LatentDims, ModelConfig, Pipeline, RegionConfig, RunConfig, SamplerSchedule,
};

/// Boxes of the two toy concepts: side by side, each a little under half
/// the width and half the height.
pub const TOY_BOXES: [[f64; 4]; 2] = [[0.0625, 0.25, 0.4375, 0.75], [0.5625, 0.25, 0.9375, 0.75]];
pub const TOY_CONCEPTS: [&str; 2] = ["concept_a", "concept_b"];
pub const GLOBAL_PROMPT_FILE: &str = "global_prompt.lcb";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug)]
pub struct ToyAssets {
    pub config_path: PathBuf,
    pub config: RunConfig,
}

/// Two-concept configuration over the toy asset file names, relative to
/// `base_dir`.
pub fn toy_config(seed: u64, latent: LatentDims, base_dir: impl Into<PathBuf>) -> RunConfig {
    RunConfig {
        seed,
        steps: 25,
        latent,
        guidance: GuidanceConfig::default(),
        global_prompt_embed: PathBuf::from(GLOBAL_PROMPT_FILE),
        regions: TOY_BOXES
            .iter()
            .zip(TOY_CONCEPTS)
            .map(|(b, id)| RegionConfig {
                layout_box: LayoutBox::new(b[0], b[1], b[2], b[3]).expect("valid toy box"),
                bundle: PathBuf::from(format!("{id}.lcb")),
            })
            .collect(),
        output_dir: PathBuf::from("out"),
        dump_attention: false,
        reinit: true,
        model: ModelConfig::default(),
        base_dir: base_dir.into(),
    }
}

/// Seeded `tokens x d_text` global prompt embedding, `f32`-exact.
pub fn toy_global_prompt(seed: u64, dims: BundleDims) -> Tensor {
    let mut r = rng::stream(seed, "toy/global_prompt");
    rng::normal_tensor(&mut r, &[dims.tokens, dims.d_text], 1.0).map(|v| f64::from(v as f32))
}

fn bundle_seed(seed: u64, n: usize) -> u64 {
    seed ^ ((n as u64 + 1) << 32)
}

/// The toy two-concept job built in memory, equal to what
/// [`make_toy_assets`] writes and [`Pipeline::from_config`] reads back.
pub fn toy_pipeline(seed: u64, latent: LatentDims) -> Result<Pipeline> {
    let dims = BundleDims::default();
    let global = toy_global_prompt(seed, dims);
    let mut bundles = BTreeMap::new();
    let mut regions = Vec::new();
    for (n, (id, b)) in TOY_CONCEPTS.iter().zip(TOY_BOXES).enumerate() {
        bundles.insert(
            id.to_string(),
            synthesize_bundle(id, bundle_seed(seed, n), dims)?,
        );
        regions.push(RegionSpec {
            layout_box: LayoutBox::new(b[0], b[1], b[2], b[3])?,
            concept_id: id.to_string(),
        });
    }
    let model = ModelConfig::default();
    let weights = BaseWeights::generate(
        seed,
        ModelDims {
            channels: latent.channels,
            d_model: model.d_model,
            d_text: dims.d_text,
            heads: model.heads,
        },
    )?;
    Pipeline::new(
        weights,
        LayoutCondition::new(regions, global)?,
        bundles,
        latent,
        SamplerSchedule::new(25)?,
        GuidanceConfig::default(),
    )
}

/// Writes two synthetic bundles, a global prompt and a ready-to-run
/// `config.json` into `dir`.
pub fn make_toy_assets(seed: u64, dir: &Path) -> Result<ToyAssets> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dims = BundleDims::default();
    save_prompt(
        &dir.join(GLOBAL_PROMPT_FILE),
        &toy_global_prompt(seed, dims),
    )?;
    for (n, id) in TOY_CONCEPTS.iter().enumerate() {
        gen_synthetic_bundle(bundle_seed(seed, n), dims, &dir.join(format!("{id}.lcb")))?;
    }
    let config = toy_config(seed, LatentDims::default(), dir);
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, config.to_json()).map_err(|e| Error::io(&config_path, e))?;
    Ok(ToyAssets {
        config_path,
        config,
    })
}
