use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid model config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(String),
}

/// VGG-16 channel counts per block and the number of convolutions in it.
pub(crate) const VGG_BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
pub(crate) const SHARED_S_BASE: usize = 256;
pub(crate) const FC_BASE: usize = 1024;

/// Architecture hyper-parameters shared by all three stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Multiplier on every VGG channel count and fully connected width.
    pub channel_scale: f64,
    pub num_attributes: usize,
    pub num_landmarks: usize,
    /// Large, medium and small pyramid sides.
    pub input_sides: [usize; 3],
    /// Image channels (1 or 3).
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channel_scale: 0.125,
            num_attributes: 4,
            num_landmarks: 5,
            input_sides: [224, 112, 56],
            channels: 1,
        }
    }
}

impl ModelConfig {
    /// Full-width reference configuration with the CelebA attribute count.
    pub fn reference() -> Self {
        ModelConfig {
            channel_scale: 1.0,
            num_attributes: 40,
            ..Self::default()
        }
    }

    /// Pyramid sides `(side, side/2, side/4)`.
    pub fn with_side(mut self, side: usize) -> Self {
        self.input_sides = [side, side / 2, side / 4];
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.channel_scale.is_finite() && self.channel_scale > 0.0) {
            return bad(format!("channel_scale must be positive, got {}", self.channel_scale));
        }
        if self.num_attributes == 0 || self.num_landmarks == 0 {
            return bad("num_attributes and num_landmarks must be positive".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        let [l, m, s] = self.input_sides;
        if m * 2 != l || s * 2 != m {
            return bad(format!("input_sides {:?} must halve at each level", self.input_sides));
        }
        if l < 16 {
            return bad(format!("large side {l} is below the minimum of 16"));
        }
        if VGG_BLOCKS.iter().any(|&(c, _)| self.width(c) == 0) || self.width(FC_BASE) == 0 {
            return bad("a scaled channel count rounds to zero".into());
        }
        Ok(())
    }

    /// Scaled width of a layer whose reference width is `base`.
    pub fn width(&self, base: usize) -> usize {
        ((base as f64) * self.channel_scale).round().max(1.0) as usize
    }

    pub fn fc_width(&self) -> usize {
        self.width(FC_BASE)
    }

    /// Lengths of the S, M and L shared features.
    pub fn shared_lengths(&self) -> [usize; 3] {
        let s = self.width(SHARED_S_BASE);
        let m = self.fc_width() + s;
        let l = self.fc_width() + m;
        [s, m, l]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
