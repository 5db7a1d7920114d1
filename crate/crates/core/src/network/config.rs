use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Init;

/// Architecture description of the density-regression network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Residual blocks per encoder stage (five stages).
    pub stage_blocks: Vec<usize>,
    /// Output width of each encoder stage.
    pub stage_channels: Vec<usize>,
    /// Dilation of the stage-4 -> stage-5 transition and the stage-5 blocks.
    pub stage5_dilation: usize,
    /// Dilation of every 3x3 convolution in the decoder and the heads.
    pub decoder_dilation: usize,
    pub use_cbam: bool,
    pub use_segmentation_branch: bool,
    /// Bottleneck ratio of the channel-attention MLP.
    pub cbam_reduction: usize,
    pub cbam_spatial_kernel: usize,
    #[serde(default)]
    pub init: Init,
    /// Fixed divisor on the density head output, so the head works at O(1)
    /// magnitudes while the model emits densities in objects per pixel.
    #[serde(default = "default_density_scale")]
    pub density_scale: f64,
}

fn default_density_scale() -> f64 {
    100.0
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stage_blocks: vec![1, 1, 3, 1, 1],
            stage_channels: vec![32, 64, 128, 256, 512],
            stage5_dilation: 2,
            decoder_dilation: 2,
            use_cbam: true,
            use_segmentation_branch: true,
            cbam_reduction: 8,
            cbam_spatial_kernel: 7,
            init: Init::HeNormal,
            density_scale: default_density_scale(),
        }
    }
}

/// Depthwise kernel size of the encoder residual blocks.
pub const BLOCK_KERNEL: usize = 7;

/// Total down-sampling factor of the encoder.
pub const OUTPUT_STRIDE: usize = 8;

impl NetworkConfig {
    /// Narrow, shallow variant used for desk-scale training and gradient checks.
    pub fn toy() -> Self {
        Self {
            stage_blocks: vec![1, 1, 1, 1, 1],
            stage_channels: vec![8, 16, 32, 64, 128],
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, use_cbam: bool, use_segmentation_branch: bool) -> Self {
        self.use_cbam = use_cbam;
        self.use_segmentation_branch = use_segmentation_branch;
        self
    }

    /// Row label for ablation tables.
    pub fn variant_name(&self) -> String {
        let mut name = String::from("Mod.ConvNeXt-T");
        if self.use_cbam {
            name.push_str("+CBAM");
        }
        if self.use_segmentation_branch {
            name.push_str("+Seg.");
        }
        name
    }

    /// The four ablation variants, in table order.
    pub fn ablation_variants(&self) -> [NetworkConfig; 4] {
        [
            self.clone().with_ablation(false, false),
            self.clone().with_ablation(true, false),
            self.clone().with_ablation(false, true),
            self.clone().with_ablation(true, true),
        ]
    }

    /// Output widths of the four decoder levels, deepest first.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let c = &self.stage_channels;
        let mut out = Vec::with_capacity(4);
        let mut current = c[3];
        for skip in [c[3], c[2], c[1], c[0]] {
            current = (current + skip) / 2;
            out.push(current);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.len() != 5 {
            return Err(Error::Config(format!(
                "stage_blocks must list 5 stages, got {}",
                self.stage_blocks.len()
            )));
        }
        if self.stage_channels.len() != 5 {
            return Err(Error::Config(format!(
                "stage_channels must list 5 stages, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage_channels must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stage_channels must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        if !(self.density_scale > 0.0 && self.density_scale.is_finite()) {
            return Err(Error::Config(format!(
                "density_scale must be positive, got {}",
                self.density_scale
            )));
        }
        if self.stage5_dilation == 0 || self.decoder_dilation == 0 {
            return Err(Error::Config("dilation rates must be at least 1".into()));
        }
        if self.use_cbam {
            if self.cbam_reduction == 0 {
                return Err(Error::Config("cbam_reduction must be positive".into()));
            }
            if let Some(c) = self.stage_channels.iter().find(|&&c| c % self.cbam_reduction != 0) {
                return Err(Error::Config(format!(
                    "stage width {c} is not divisible by cbam_reduction {}",
                    self.cbam_reduction
                )));
            }
            if self.cbam_spatial_kernel % 2 == 0 {
                return Err(Error::Config("cbam_spatial_kernel must be odd".into()));
            }
        }
        let c = &self.stage_channels;
        let mut current = c[3];
        for skip in [c[3], c[2], c[1], c[0]] {
            if (current + skip) % 2 != 0 {
                return Err(Error::Config(format!(
                    "decoder concatenation width {} is odd and cannot be halved",
                    current + skip
                )));
            }
            current = (current + skip) / 2;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = NetworkConfig::default();
        assert_eq!(c.stage_blocks, [1, 1, 3, 1, 1]);
        assert_eq!(c.stage_channels, [32, 64, 128, 256, 512]);
        assert_eq!(c.decoder_dilation, 2);
        assert_eq!(c.cbam_spatial_kernel, 7);
        c.validate().unwrap();
        NetworkConfig::toy().validate().unwrap();
    }

    #[test]
    fn decoder_widths_halve_concatenation() {
        assert_eq!(NetworkConfig::default().decoder_channels(), [256, 192, 128, 80]);
        assert_eq!(NetworkConfig::toy().decoder_channels(), [64, 48, 32, 20]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = NetworkConfig::default();
        c.stage_channels = vec![32, 64, 128, 256];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = NetworkConfig::default();
        c.stage_channels = vec![32, 64, 64, 256, 512];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::default();
        c.stage_blocks = vec![1, 1, 1];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::toy();
        c.cbam_reduction = 3;
        assert!(c.validate().is_err());
        c.use_cbam = false;
        c.validate().unwrap();
    }

    #[test]
    fn ablation_names() {
        let names: Vec<String> = NetworkConfig::default()
            .ablation_variants()
            .iter()
            .map(NetworkConfig::variant_name)
            .collect();
        assert_eq!(
            names,
            ["Mod.ConvNeXt-T", "Mod.ConvNeXt-T+CBAM", "Mod.ConvNeXt-T+Seg.", "Mod.ConvNeXt-T+CBAM+Seg."]
        );
    }
}
