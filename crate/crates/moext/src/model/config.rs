use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters for the full network family.
///
/// `full()` is the reference instantiation; `reduced()` scales widths and
/// resolution down for CPU-sized experiments while keeping the same wiring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side length of the square input image fed to the network.
    pub input_size: usize,
    /// Output channels of each backbone stage (Conv block + 2x max pool).
    pub backbone_channels: Vec<usize>,
    /// Channels of the single Conv block inside each branch.
    pub branch_channels: usize,
    /// Dimension of shape / texture / motion embeddings.
    pub feature_dim: usize,
    /// Channels of the upsample-conv stages in the reconstructor, after the
    /// fixed 1x1 -> 8x8 -> 7x7 head. Spatial size doubles per stage.
    pub recon_stage_channels: Vec<usize>,
    /// Channels of the repeated Conv blocks near the reconstructor output.
    pub recon_block_channels: usize,
    /// Number of those Conv blocks.
    pub recon_num_blocks: usize,
    /// Classifier output classes.
    pub num_classes: usize,
}

impl ModelConfig {
    /// Full-size architecture: 224x224 input, 512-d features, the exact
    /// reconstruction stack of the reference design.
    pub fn full(num_classes: usize) -> Self {
        Self {
            input_size: 224,
            backbone_channels: vec![64, 128, 256, 512],
            branch_channels: 512,
            feature_dim: 512,
            recon_stage_channels: vec![512, 256, 128, 64],
            recon_block_channels: 32,
            recon_num_blocks: 5,
            num_classes,
        }
    }

    /// Narrow instantiation for CPU training and gradient checks.
    pub fn reduced(num_classes: usize) -> Self {
        Self {
            input_size: 28,
            backbone_channels: vec![8, 16],
            branch_channels: 16,
            feature_dim: 32,
            recon_stage_channels: vec![16],
            recon_block_channels: 8,
            recon_num_blocks: 2,
            num_classes,
        }
    }

    /// Smallest wiring that still exercises every component; for tests.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            input_size: 28,
            backbone_channels: vec![2, 3],
            branch_channels: 3,
            feature_dim: 4,
            recon_stage_channels: vec![3],
            recon_block_channels: 2,
            recon_num_blocks: 1,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.backbone_channels.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        let pool_factor = 1usize << self.backbone_channels.len();
        if self.input_size % pool_factor != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by backbone pooling factor {}",
                self.input_size, pool_factor
            )));
        }
        let recon_out = 7usize << (self.recon_stage_channels.len() + 1);
        if recon_out != self.input_size {
            return Err(Error::Config(format!(
                "reconstructor output {}x{} does not match input_size {}",
                recon_out, recon_out, self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial size of the backbone output feature map.
    pub fn backbone_out_size(&self) -> usize {
        self.input_size >> self.backbone_channels.len()
    }

    /// Expected (channels, height, width) trace of the reconstructor, one
    /// entry per architecture row (the repeated Conv blocks are one row).
    pub fn recon_trace(&self) -> Vec<(usize, usize, usize)> {
        let f = self.feature_dim;
        let mut trace = vec![(2 * f, 1, 1), (f, 8, 8), (f, 7, 7)];
        let mut size = 7;
        for &ch in &self.recon_stage_channels {
            size *= 2;
            trace.push((ch, size, size));
        }
        trace.push((self.recon_block_channels, size, size));
        trace.push((self.recon_block_channels, 2 * size, 2 * size));
        trace.push((3, 2 * size, 2 * size));
        trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_matches_reference_trace() {
        let cfg = ModelConfig::full(5);
        cfg.validate().unwrap();
        assert_eq!(
            cfg.recon_trace(),
            vec![
                (1024, 1, 1),
                (512, 8, 8),
                (512, 7, 7),
                (512, 14, 14),
                (256, 28, 28),
                (128, 56, 56),
                (64, 112, 112),
                (32, 112, 112),
                (32, 224, 224),
                (3, 224, 224),
            ]
        );
    }

    #[test]
    fn reduced_config_is_consistent() {
        ModelConfig::reduced(3).validate().unwrap();
        ModelConfig::tiny(2).validate().unwrap();
    }

    #[test]
    fn single_class_rejected() {
        assert!(ModelConfig::tiny(1).validate().is_err());
    }
}
