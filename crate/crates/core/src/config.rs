//! One TOML document holding every configuration section.
//!
//! ```toml
//! spacing_um = 1.0
//!
//! [backbone.spec]
//! provider_id = "synthetic"
//! tap_layers = [3, 6, 9, 12]
//!
//! [fusion]
//! proj_dim = 64
//!
//! [decoder]
//! hidden_sizes = [256]
//! num_classes = 2
//!
//! [loss]
//! gamma = 2.0
//!
//! [train]
//! lr = 5e-4
//! epochs_full = 50
//!
//! [tile]
//! tile_size = 512
//! overlap = 0.5
//! ```
//!
//! Missing sections and keys take their defaults; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::loss::LossConfig;
use crate::tiler::TileConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkbenchConfig {
    /// Physical pixel size in micrometres, used for distance metrics.
    pub spacing_um: f64,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub tile: TileConfig,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        Self {
            spacing_um: 1.0,
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            tile: TileConfig::default(),
        }
    }
}

impl WorkbenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing_um > 0.0 && self.spacing_um.is_finite()) {
            return Err(Error::Config(format!("spacing_um must be positive, got {}", self.spacing_um)));
        }
        let spec = &self.backbone.spec;
        spec.validate()?;
        self.fusion.validate(spec)?;
        self.decoder.validate()?;
        self.loss.validate()?;
        self.train.validate(spec.patch_size)?;
        self.tile.validate()
    }
}
