//! Concept assets: bundles, LoRA deltas, base weights and the tensor container.

pub mod bundle;
pub mod container;
pub mod weights;

pub use bundle::{
    apply_projection, gen_synthetic_bundle, load_bundle, save_bundle, synthesize_bundle,
    BundleDims, ConceptBundle, LoraDelta, CROSS_KEY, CROSS_VALUE,
};
pub use weights::{AttentionWeights, BaseWeights, BlockWeights, ModelDims};
