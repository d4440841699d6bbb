use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial reduction of the backbone: stem convolution, 2×2 max pool, two strided stages.
pub const BACKBONE_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Concat,
    Average,
    WeightedAverage,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Fusion::Average, Fusion::WeightedAverage, Fusion::Concat];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Concat => "concat",
            Fusion::Average => "average",
            Fusion::WeightedAverage => "weighted_average",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side in pixels; must be divisible by [`BACKBONE_STRIDE`].
    pub input_size: usize,
    /// `[3, stem, stage_a, stage_b]`; the last entry is the feature-map depth.
    pub backbone_channels: Vec<usize>,
    pub stem_kernel: usize,
    /// Output widths of the global-branch stages; the last one is the feature dimension.
    pub branch1_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub feature_dim: usize,
    /// Output width of the patch convolution (first glimpse layer).
    pub glimpse_channels: usize,
    /// Kernel of the patch convolution; `None` means a kernel covering the whole patch.
    pub glimpse_kernel: Option<usize>,
    pub policy_hidden: usize,
    pub patch_size: usize,
    pub steps: usize,
    pub fusion: Fusion,
    pub policy_sigma: f64,
    /// Standard deviation of the initial glimpse location prior.
    pub initial_location_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64×64 input, 8×8 feature map.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            backbone_channels: vec![3, 8, 8, 16],
            stem_kernel: 3,
            branch1_channels: vec![16, 32],
            blocks_per_stage: 1,
            feature_dim: 32,
            glimpse_channels: 16,
            glimpse_kernel: None,
            policy_hidden: 32,
            patch_size: 2,
            steps: 8,
            fusion: Fusion::Concat,
            policy_sigma: 0.1,
            initial_location_sigma: 0.25,
        }
    }

    /// Full-width layer plan: 256×256 input, 128×32×32 feature map, 512-d features.
    pub fn full_scale() -> Self {
        Self {
            input_size: 256,
            backbone_channels: vec![3, 64, 64, 128],
            stem_kernel: 7,
            branch1_channels: vec![256, 512],
            blocks_per_stage: 2,
            feature_dim: 512,
            glimpse_channels: 256,
            glimpse_kernel: None,
            policy_hidden: 512,
            patch_size: 8,
            steps: 8,
            fusion: Fusion::Concat,
            policy_sigma: 0.1,
            initial_location_sigma: 0.25,
        }
    }

    /// The small configuration used for finite-difference gradient checks.
    pub fn reduced() -> Self {
        Self {
            input_size: 16,
            backbone_channels: vec![3, 3, 4, 4],
            stem_kernel: 3,
            branch1_channels: vec![6, 8],
            blocks_per_stage: 1,
            feature_dim: 8,
            glimpse_channels: 4,
            glimpse_kernel: None,
            policy_hidden: 8,
            patch_size: 2,
            steps: 2,
            fusion: Fusion::Concat,
            policy_sigma: 0.1,
            initial_location_sigma: 0.25,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full_scale()),
            "reduced" => Ok(Self::reduced()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn feature_side(&self) -> usize {
        self.input_size / BACKBONE_STRIDE
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&0)
    }

    pub fn glimpse_kernel(&self) -> usize {
        self.glimpse_kernel.unwrap_or(self.patch_size)
    }

    pub fn fused_dim(&self) -> usize {
        match self.fusion {
            Fusion::Concat => 2 * self.feature_dim,
            Fusion::Average | Fusion::WeightedAverage => self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.input_size == 0 || self.input_size % BACKBONE_STRIDE != 0 {
            return fail(format!(
                "model.input_size {} must be a positive multiple of {BACKBONE_STRIDE}",
                self.input_size
            ));
        }
        if self.backbone_channels.len() != 4 || self.backbone_channels[0] != 3 {
            return fail("model.backbone_channels must be [3, stem, stage_a, stage_b]".into());
        }
        if self.backbone_channels.contains(&0) || self.branch1_channels.contains(&0) {
            return fail("channel widths must be positive".into());
        }
        if self.branch1_channels.is_empty() {
            return fail("model.branch1_channels must not be empty".into());
        }
        if *self.branch1_channels.last().unwrap() != self.feature_dim {
            return fail(format!(
                "model.feature_dim {} must equal the last branch1 width {}",
                self.feature_dim,
                self.branch1_channels.last().unwrap()
            ));
        }
        if self.feature_dim == 0 || self.feature_dim % 2 != 0 {
            return fail(format!("model.feature_dim {} must be even", self.feature_dim));
        }
        if self.stem_kernel % 2 == 0 {
            return fail("model.stem_kernel must be odd".into());
        }
        if self.blocks_per_stage == 0 || self.glimpse_channels == 0 || self.policy_hidden == 0 {
            return fail("block, glimpse and policy widths must be positive".into());
        }
        if self.patch_size == 0 || self.patch_size > self.feature_side() {
            return fail(format!(
                "model.patch_size {} must lie in 1..={} (feature-map side)",
                self.patch_size,
                self.feature_side()
            ));
        }
        let k = self.glimpse_kernel();
        if k == 0 || k > self.patch_size {
            return fail(format!("model.glimpse_kernel {k} must lie in 1..=patch_size"));
        }
        if self.steps == 0 {
            return fail("model.steps must be at least 1".into());
        }
        if !(self.policy_sigma > 1e-6 && self.policy_sigma.is_finite()) {
            return fail(format!("model.policy_sigma {} must exceed 1e-6", self.policy_sigma));
        }
        if !(self.initial_location_sigma >= 0.0 && self.initial_location_sigma.is_finite()) {
            return fail("model.initial_location_sigma must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in ["desk", "full", "reduced"] {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
        assert_eq!(ModelConfig::full_scale().feature_side(), 32);
        assert_eq!(ModelConfig::full_scale().fused_dim(), 1024);
    }

    #[test]
    fn rejects_oversized_patch_and_zero_steps() {
        let mut c = ModelConfig::desk();
        c.patch_size = 9;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.steps = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.policy_sigma = 1e-7;
        assert!(c.validate().is_err());
    }
}
