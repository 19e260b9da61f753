//! Model architecture configuration and content hashing of configs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::DiscConfig;
use crate::crn::CrnConfig;
use crate::error::{Error, Result};
use crate::gcn::GcnConfig;
use crate::layoutnet::LayoutConfig;
use crate::losses::PerceptualExtractor;
use crate::sgraph::Vocabulary;

/// SHA-256 of the compact JSON form, hex encoded. Struct fields serialize
/// in declaration order, so equal values always hash equally.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize infallibly");
    hex::encode(Sha256::digest(bytes))
}

/// Everything that determines parameter names and shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocabulary: Vocabulary,
    #[serde(default)]
    pub gcn: GcnConfig,
    #[serde(default)]
    pub layout: LayoutConfig,
    #[serde(default)]
    pub crn: CrnConfig,
    #[serde(default)]
    pub disc: DiscConfig,
    #[serde(default = "default_perceptual_seed")]
    pub perceptual_seed: u64,
}

fn default_perceptual_seed() -> u64 {
    PerceptualExtractor::DEFAULT_SEED
}

impl ModelConfig {
    pub fn new(vocabulary: Vocabulary) -> Self {
        Self {
            vocabulary,
            gcn: GcnConfig::default(),
            layout: LayoutConfig::default(),
            crn: CrnConfig::default(),
            disc: DiscConfig::default(),
            perceptual_seed: default_perceptual_seed(),
        }
    }

    /// A 16x16 model with a few thousand parameters, small enough for tests
    /// and smoke runs. Pair it with 8x8 dataset masks.
    pub fn tiny(vocabulary: Vocabulary) -> Self {
        Self {
            vocabulary,
            gcn: GcnConfig { embed_dim: 8, num_layers: 1, hidden_dim: 16 },
            layout: LayoutConfig { mask_size: 8, box_hidden_dim: 16, mask_channels: 4 },
            crn: CrnConfig { output_resolution: 16, channels: vec![8, 8], ..CrnConfig::default() },
            disc: DiscConfig { image_channels: vec![8, 8], object_channels: vec![8, 8], crop_size: 8 },
            perceptual_seed: default_perceptual_seed(),
        }
    }

    pub fn image_size(&self) -> usize {
        self.crn.output_resolution
    }

    pub fn validate(&self) -> Result<()> {
        self.gcn.validate()?;
        self.layout.validate()?;
        self.crn.validate()?;
        self.disc.validate(self.image_size())?;
        if self.vocabulary.num_categories() == 0 {
            return Err(Error::validation("vocabulary has no object categories"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}
