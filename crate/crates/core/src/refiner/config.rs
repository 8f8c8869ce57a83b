use serde::{Deserialize, Serialize};

use super::RefinerError;

/// Radar features per point: normalized column, normalized row, scaled range.
pub const RADAR_FEATURES: usize = 3;

/// Range normalization used for the third radar feature (meters).
pub const RANGE_SCALE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub feature_dim: usize,
    pub attention_dim: usize,
    pub num_attention_layers: usize,
    /// Layer widths of the radar MLP; the last entry must equal `feature_dim`.
    pub radar_mlp_widths: Vec<usize>,
    pub patch_size: usize,
    /// Side of the square cells each patch is split into; every cell becomes
    /// one image token.
    pub patch_cell: usize,
    pub patch_channels: usize,
    /// Layer widths of the per-token patch MLP; last entry must equal `feature_dim`.
    pub patch_encoder_widths: Vec<usize>,
    pub head_hidden: usize,
    pub lambda_conf: f64,
    pub lambda_disp: f64,
    pub conf_threshold: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_frames: usize,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            attention_dim: 16,
            num_attention_layers: 2,
            radar_mlp_widths: vec![32, 64],
            patch_size: 35,
            patch_cell: 7,
            patch_channels: 1,
            patch_encoder_widths: vec![32, 64],
            head_hidden: 32,
            lambda_conf: 1.0,
            lambda_disp: 1.0,
            conf_threshold: 0.5,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            batch_frames: 1,
            seed: 0,
        }
    }
}

impl RefinerConfig {
    pub fn grid_side(&self) -> usize {
        self.patch_size / self.patch_cell
    }

    pub fn image_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn token_dim(&self) -> usize {
        self.patch_channels * self.patch_cell * self.patch_cell
    }

    pub fn validate(&self) -> Result<(), RefinerError> {
        let bad = |m: &str| Err(RefinerError::InvalidConfig(m.to_string()));
        if self.feature_dim == 0 || self.attention_dim == 0 || self.head_hidden == 0 {
            return bad("feature_dim, attention_dim and head_hidden must be positive");
        }
        if self.radar_mlp_widths.last() != Some(&self.feature_dim)
            || self.patch_encoder_widths.last() != Some(&self.feature_dim)
        {
            return bad("last radar/patch encoder width must equal feature_dim");
        }
        if self.radar_mlp_widths.contains(&0) || self.patch_encoder_widths.contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.patch_size % 2 == 0 || self.patch_cell == 0 || self.patch_size % self.patch_cell != 0 {
            return bad("patch_size must be odd and divisible by patch_cell");
        }
        if self.patch_channels == 0 {
            return bad("patch_channels must be positive");
        }
        if !(self.lambda_conf >= 0.0 && self.lambda_disp >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return bad("conf_threshold must lie in (0, 1)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.batch_frames == 0 {
            return bad("batch_frames must be positive");
        }
        Ok(())
    }
}

/// Network input for one projected radar return.
pub fn radar_features(u: f64, v: f64, depth: f64, width: usize, height: usize) -> [f64; RADAR_FEATURES] {
    [
        2.0 * u / width as f64 - 1.0,
        2.0 * v / height as f64 - 1.0,
        depth / RANGE_SCALE,
    ]
}
