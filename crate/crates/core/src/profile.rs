//! Size presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    pub fn dims(self) -> ModelDims {
        match self {
            Profile::Desk => ModelDims {
                side: 32,
                patch: 4,
                dim: 32,
                n_tokens: 64,
                layers: 2,
                heads: 1,
            },
            Profile::Paper => ModelDims {
                side: 112,
                patch: 16,
                dim: 64,
                n_tokens: 1024,
                layers: 2,
                heads: 1,
            },
        }
    }

    pub fn epochs(self) -> usize {
        match self {
            Profile::Desk => 30,
            Profile::Paper => 150,
        }
    }

    pub fn batch(self) -> usize {
        match self {
            Profile::Desk => 8,
            Profile::Paper => 16,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile `{s}` (desk|paper)"))),
        }
    }
}

/// Geometry and widths shared by the embedding, Condenser and backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Sub-image side `S`; the canvas is `2S`.
    pub side: usize,
    /// Patch side `P`.
    pub patch: usize,
    /// Feature width `D`.
    pub dim: usize,
    /// Codebook size `N_t`.
    pub n_tokens: usize,
    /// Backbone depth.
    pub layers: usize,
    /// Attention heads in the self-attention blocks.
    pub heads: usize,
}

impl ModelDims {
    /// Patches per quadrant side, `S / P`.
    pub fn grid(&self) -> usize {
        self.side / self.patch
    }

    pub fn quadrant_len(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.side == 0 || !self.side.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "side {} is not divisible by patch {}",
                self.side, self.patch
            )));
        }
        if self.dim < 2 || self.n_tokens < 2 || self.layers == 0 {
            return Err(Error::Config(format!("degenerate model dims {self:?}")));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}
