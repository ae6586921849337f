//! Training-free multi-concept LoRA composition on a miniature latent
//! diffusion stack.

pub mod assets;
pub mod attention;
pub mod autodiff;
pub mod error;
pub mod guidance;
pub mod pipeline;
pub mod reinit;
pub mod rng;
pub mod tensor;

pub use assets::{BaseWeights, ConceptBundle, LoraDelta, ModelDims};
pub use attention::{AttnRecord, LayoutBox, LayoutCondition, RegionSpec};
pub use autodiff::{
    finite_difference_gradient, max_relative_error, max_relative_error_scaled, Tape, Var,
};
pub use error::{Error, Result};
pub use guidance::{GuidanceConfig, LossBreakdown, TraceRow};
pub use pipeline::{LatentDims, LatentState, Pipeline, RunConfig, SamplerSchedule};
pub use reinit::{Crop, CropResult};
pub use tensor::{Axis, Tensor};
