use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assets::container::{self, Entry};
use crate::attention::LayoutBox;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::tensor::Tensor;

/// Latent tensor extent, `channels x height x width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for LatentDims {
    fn default() -> Self {
        LatentDims {
            channels: 8,
            height: 16,
            width: 16,
        }
    }
}

impl LatentDims {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(2)
            || !self.width.is_multiple_of(2)
        {
            return Err(Error::Configuration(format!(
                "latent {}x{}x{} needs positive channels and even spatial sides",
                self.channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Denoiser width and head count. The text width comes from the prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    #[serde(rename = "box")]
    pub layout_box: LayoutBox,
    pub bundle: PathBuf,
}

fn default_true() -> bool {
    true
}

/// One composition job. Relative paths resolve against the directory of
/// the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub latent: LatentDims,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    pub global_prompt_embed: PathBuf,
    #[serde(default)]
    pub regions: Vec<RegionConfig>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dump_attention: bool,
    #[serde(default = "default_true")]
    pub reinit: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Configuration(format!("invalid config: {e}")))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Configuration("steps must be at least 1".into()));
        }
        self.latent.validate()?;
        self.guidance.validate()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }
}

pub const PROMPT_TENSOR: &str = "prompt_embed";

/// Reads a `tokens x d_text` prompt embedding stored as a container entry.
pub fn load_prompt(path: &Path) -> Result<Tensor> {
    let entries = container::read(path)?;
    let e = container::find(&entries, PROMPT_TENSOR)?;
    if e.dims.len() != 2 {
        return Err(Error::Validation(format!(
            "{PROMPT_TENSOR} in {} must be 2-D, got {:?}",
            path.display(),
            e.dims
        )));
    }
    Tensor::new(e.dims.clone(), e.values.clone())
}

pub fn save_prompt(path: &Path, prompt: &Tensor) -> Result<()> {
    container::write(
        path,
        &[Entry::new(
            PROMPT_TENSOR,
            prompt.shape().to_vec(),
            prompt.data().to_vec(),
        )],
    )
}
