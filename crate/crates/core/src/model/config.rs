use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ConvSpec;

/// Architecture hyperparameters. Defaults are the published configuration
/// for a 64-channel, 1-second (128-sample) decision window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub window_len: usize,
    pub d_depth: usize,
    pub k0: usize,
    pub mste_kernels: Vec<usize>,
    pub dilation: usize,
    pub groups: usize,
    pub use_mste: bool,
    pub use_cna: bool,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            window_len: 128,
            d_depth: 16,
            k0: 8,
            mste_kernels: vec![1, 2, 3, 5],
            dilation: 1,
            groups: 8,
            use_mste: true,
            use_cna: true,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn with_input(channels: usize, window_len: usize) -> Self {
        Self {
            channels,
            window_len,
            ..Self::default()
        }
    }

    /// Config scaled down for `d_depth`, keeping the cross-attention group
    /// count at `floor(d_depth / 2)`.
    pub fn with_depth(mut self, d_depth: usize) -> Self {
        self.d_depth = d_depth;
        self.groups = d_depth / 2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.channels == 0 || self.window_len == 0 || self.d_depth == 0 || self.k0 == 0 {
            return fail(format!("extents must be positive: {self:?}"));
        }
        if self.num_classes != 2 {
            return fail(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.mste_kernels.is_empty() || self.mste_kernels.contains(&0) || self.dilation == 0 {
            return fail("mste kernels and dilation must be positive".into());
        }
        if self.d_depth % self.mste_kernels.len() != 0 {
            return fail(format!(
                "d_depth {} not divisible by {} multi-scale branches",
                self.d_depth,
                self.mste_kernels.len()
            ));
        }
        if self.groups == 0 || self.d_depth % self.groups != 0 {
            return fail(format!(
                "d_depth {} not divisible by attention groups {}",
                self.d_depth, self.groups
            ));
        }
        let needed = (self.k0 - 1) + (self.max_kernel() - 1) * self.dilation;
        if self.window_len <= needed {
            return fail(format!(
                "window_len {} too short: need more than {needed} samples",
                self.window_len
            ));
        }
        if self.use_cna && self.channels < self.d_depth {
            return fail(format!(
                "depth alignment needs channels ({}) >= d_depth ({})",
                self.channels, self.d_depth
            ));
        }
        Ok(())
    }

    pub fn max_kernel(&self) -> usize {
        self.mste_kernels.iter().copied().max().unwrap_or(1)
    }

    /// Time extent after the temporal depthwise conv.
    pub fn t_prime(&self) -> usize {
        self.window_len + 1 - self.k0
    }

    /// Common time extent of the multi-scale branches after truncation.
    pub fn t_min(&self) -> usize {
        self.t_prime() - (self.max_kernel() - 1) * self.dilation
    }

    pub fn branch_width(&self) -> usize {
        self.d_depth / self.mste_kernels.len()
    }

    /// Depths per attention group.
    pub fn group_depth(&self) -> usize {
        self.d_depth / self.groups
    }

    pub fn temporal_pointwise(&self) -> ConvSpec {
        ConvSpec::pointwise(1, self.d_depth)
    }

    pub fn temporal_depthwise(&self) -> ConvSpec {
        ConvSpec::depthwise(self.d_depth, (1, self.k0))
    }

    pub fn spatial_pointwise(&self) -> ConvSpec {
        ConvSpec::pointwise(self.d_depth, self.d_depth)
    }

    pub fn spatial_depthwise(&self) -> ConvSpec {
        ConvSpec::depthwise(self.d_depth, (self.channels, 1))
    }

    pub fn mste_branch(&self, k: usize) -> ConvSpec {
        ConvSpec::dilated(self.d_depth, self.branch_width(), k, self.dilation)
    }

    pub fn mste_skip(&self) -> ConvSpec {
        ConvSpec::depthwise(self.d_depth, (self.channels, 1))
    }

    pub fn cna_fuse(&self) -> ConvSpec {
        ConvSpec::pointwise(self.d_depth + 1, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_derived_extents() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.t_prime(), 121);
        assert_eq!(c.t_min(), 117);
        assert_eq!(c.branch_width(), 4);
        assert_eq!(c.group_depth(), 2);
        assert_eq!(c.groups, c.d_depth / 2);
    }

    #[test]
    fn rejects_bad_configs() {
        let short = ModelConfig::with_input(64, 11);
        assert!(matches!(short.validate(), Err(Error::Config(_))));
        ModelConfig::with_input(64, 12).validate().unwrap();
        let odd = ModelConfig {
            d_depth: 10,
            groups: 5,
            channels: 64,
            ..ModelConfig::default()
        };
        assert!(odd.validate().is_err());
        let narrow = ModelConfig::with_input(8, 128);
        assert!(narrow.validate().is_err());
        let narrow_no_cna = ModelConfig {
            use_cna: false,
            ..narrow
        };
        narrow_no_cna.validate().unwrap();
    }
}
