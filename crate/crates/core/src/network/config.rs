use crate::error::{Error, Result};
use crate::lsk::{validate_branches, Branch, LskConfig};
use crate::tksa::{KeepRatio, TksaConfig};

#[derive(Clone, PartialEq, Debug)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output widths of the four encoder stages.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub decoder_channels: usize,
    pub heads: usize,
    pub k_ratios: Vec<KeepRatio>,
    pub lsk_branches: Vec<Branch>,
    pub mask_kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let lsk = LskConfig::new(32);
        let tksa = TksaConfig::new(32);
        NetworkConfig {
            in_channels: 3,
            num_classes: 4,
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            decoder_channels: 32,
            heads: tksa.heads,
            k_ratios: tksa.k_ratios,
            lsk_branches: lsk.branches,
            mask_kernel: lsk.mask_kernel,
        }
    }
}

impl NetworkConfig {
    /// Encoder widths of the ResNet18 family with a 64-wide decoder.
    pub fn full_scale(num_classes: usize) -> Self {
        NetworkConfig {
            num_classes,
            stage_channels: vec![64, 128, 256, 512],
            decoder_channels: 64,
            ..Self::default()
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn reduced() -> Self {
        NetworkConfig {
            num_classes: 3,
            stage_channels: vec![4, 4, 8, 8],
            blocks_per_stage: 1,
            decoder_channels: 8,
            ..Self::default()
        }
    }

    pub fn lsk(&self) -> LskConfig {
        LskConfig {
            channels: self.decoder_channels,
            branches: self.lsk_branches.clone(),
            mask_kernel: self.mask_kernel,
        }
    }

    pub fn tksa(&self) -> TksaConfig {
        TksaConfig {
            channels: self.decoder_channels,
            heads: self.heads,
            k_ratios: self.k_ratios.clone(),
            lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4 {
            return Err(Error::config(format!(
                "encoder needs exactly 4 stage widths, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("each stage needs at least one block"));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config(format!(
                "num_classes {} outside 2..=255",
                self.num_classes
            )));
        }
        validate_branches(&self.lsk_branches)?;
        self.lsk().validate()?;
        self.tksa().validate()
    }
}
