#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use composer_core::assets::{ConceptBundle, LoraDelta, CROSS_KEY, CROSS_VALUE};
use composer_core::attention::{LayoutBox, LayoutCondition, RegionSpec};
use composer_core::pipeline::{LatentDims, Pipeline};
use composer_core::Tensor;

pub const SMALL: LatentDims = LatentDims {
    channels: 4,
    height: 8,
    width: 8,
};

pub fn reference_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/reference")
}

/// `p` with its layout replaced by one region whose bundle has zero deltas
/// and the global prompt as its local prompt.
pub fn neutral(p: &Pipeline, layout_box: LayoutBox) -> Pipeline {
    let global = p.layout.global_prompt_embed.clone();
    let (_, d_text) = global.dims2().unwrap();
    let d_model = p.weights.dims.d_model;
    let mut deltas = BTreeMap::new();
    for name in [CROSS_KEY, CROSS_VALUE] {
        let down = Tensor::zeros(&[4, d_text]);
        let up = Tensor::zeros(&[d_model, 4]);
        deltas.insert(name.to_string(), LoraDelta::new(down, up, 1.0).unwrap());
    }
    let bundle = ConceptBundle {
        id: "neutral".into(),
        prompt_embed: global.clone(),
        token_index: 1,
        deltas,
    };
    let mut q = p.clone();
    q.layout = LayoutCondition::new(
        vec![RegionSpec {
            layout_box,
            concept_id: "neutral".into(),
        }],
        global,
    )
    .unwrap();
    q.bundles = BTreeMap::from([("neutral".to_string(), bundle)]);
    q
}

/// `p` with no regions at all.
pub fn plain(p: &Pipeline) -> Pipeline {
    let mut q = p.clone();
    q.layout = LayoutCondition::empty(p.layout.global_prompt_embed.clone());
    q.bundles.clear();
    q
}
