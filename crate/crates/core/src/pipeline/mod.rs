//! Toy denoiser, deterministic sampler and the composition job around them.

pub mod config;
pub mod denoiser;
pub mod gradcheck;
pub mod preview;
pub mod sampler;
pub mod schedule;
pub mod toy;

use std::collections::BTreeMap;

pub use config::{load_prompt, save_prompt, LatentDims, ModelConfig, RegionConfig, RunConfig};
pub use denoiser::{denoiser_forward, denoiser_forward_taped, timestep_embedding};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use preview::{decode_preview, GrayImage};
pub use sampler::{compose, in_box_mass, sample, trace_csv, ComposeReport, GuidedStep, SampleRun};
pub use schedule::{ddim_step_with, SamplerSchedule};
pub use toy::{make_toy_assets, toy_pipeline, ToyAssets};

use crate::assets::{load_bundle, BaseWeights, ConceptBundle, ModelDims};
use crate::attention::{materialize, AttnRecord, Conditioning, LayoutCondition, RegionSpec};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::guidance::{
    constraint_losses, Evaluation, GuidanceConfig, GuidanceObjective, LossTargets,
};
use crate::tensor::Tensor;

/// A latent at a timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

/// Everything a sampling run needs apart from the noise seed.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub weights: BaseWeights,
    pub layout: LayoutCondition,
    pub bundles: BTreeMap<String, ConceptBundle>,
    pub latent: LatentDims,
    pub schedule: SamplerSchedule,
    pub guidance: GuidanceConfig,
}

impl Pipeline {
    pub fn new(
        weights: BaseWeights,
        layout: LayoutCondition,
        bundles: BTreeMap<String, ConceptBundle>,
        latent: LatentDims,
        schedule: SamplerSchedule,
        guidance: GuidanceConfig,
    ) -> Result<Self> {
        latent.validate()?;
        guidance.validate()?;
        weights.dims.validate()?;
        if weights.dims.channels != latent.channels {
            return Err(Error::Configuration(format!(
                "weights expect {} channels, latent has {}",
                weights.dims.channels, latent.channels
            )));
        }
        let (_, d_text) = layout.global_prompt_embed.dims2()?;
        if d_text != weights.dims.d_text {
            return Err(Error::Configuration(format!(
                "global prompt width {d_text} differs from model text width {}",
                weights.dims.d_text
            )));
        }
        let p = Pipeline {
            weights,
            layout,
            bundles,
            latent,
            schedule,
            guidance,
        };
        let cond = p.conditioning()?;
        for c in &cond.concepts {
            c.bundle.validate_for(p.weights.dims.d_model, d_text)?;
        }
        let (h, w) = p.resolution();
        cond.masks(h, w)?;
        cond.masks(h / 2, w / 2)?;
        Ok(p)
    }

    /// Loads prompts and bundles named by `config` and generates the base
    /// weights from its seed.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let global = load_prompt(&config.resolve(&config.global_prompt_embed))?;
        let mut bundles = BTreeMap::new();
        let mut regions = Vec::with_capacity(config.regions.len());
        for r in &config.regions {
            let bundle = load_bundle(&config.resolve(&r.bundle))?;
            regions.push(RegionSpec {
                layout_box: r.layout_box,
                concept_id: bundle.id.clone(),
            });
            bundles.insert(bundle.id.clone(), bundle);
        }
        let layout = LayoutCondition::new(regions, global)?;
        let dims = ModelDims {
            channels: config.latent.channels,
            d_model: config.model.d_model,
            d_text: layout.global_prompt_embed.dims2()?.1,
            heads: config.model.heads,
        };
        let weights = BaseWeights::generate(config.seed, dims)?;
        Pipeline::new(
            weights,
            layout,
            bundles,
            config.latent,
            SamplerSchedule::new(config.steps)?,
            config.guidance,
        )
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.latent.shape()
    }

    /// The loss resolution: the latent's spatial extent.
    pub fn resolution(&self) -> (usize, usize) {
        (self.latent.height, self.latent.width)
    }

    pub fn conditioning(&self) -> Result<Conditioning<'_>> {
        Conditioning::new(&self.layout, &self.bundles)
    }

    pub fn loss_targets(&self) -> Result<LossTargets> {
        let (h, w) = self.resolution();
        LossTargets::new(&self.conditioning()?, h, w)
    }

    pub fn forward(&self, z: &Tensor, t: usize) -> Result<(Tensor, AttnRecord)> {
        denoiser::forward_with(z, t, &self.conditioning()?, &self.weights)
    }

    /// Constraint loss of `z` at `t` without the gradient.
    pub fn loss(&self, z: &Tensor, t: usize) -> Result<f64> {
        let cond = self.conditioning()?;
        let targets = self.loss_targets()?;
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let (_, layers) = denoiser_forward_taped(&mut tape, zv, t, &cond, &self.weights)?;
        let losses = constraint_losses(&mut tape, &layers, &targets, &self.guidance)?;
        tape.value(losses.total).item()
    }
}

impl GuidanceObjective for Pipeline {
    fn evaluate(&self, z: &Tensor, t: usize) -> Result<Evaluation> {
        let cond = self.conditioning()?;
        let targets = self.loss_targets()?;
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let (_, layers) = denoiser_forward_taped(&mut tape, zv, t, &cond, &self.weights)?;
        let losses = constraint_losses(&mut tape, &layers, &targets, &self.guidance)?;
        let grad = tape.grad(losses.total, zv)?;
        Ok(Evaluation {
            breakdown: losses.breakdown(&tape),
            grad,
            record: materialize(&tape, &layers),
        })
    }
}
