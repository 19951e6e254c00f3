//! Multiply-accumulate accounting for one forward pass at batch size 1.
//! Activations, norms and pooling are not counted.

use serde::Serialize;

use super::config::ModelConfig;
use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MacBreakdown {
    pub stde: u64,
    pub mste: u64,
    pub cna: u64,
    pub classifier: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.stde + self.mste + self.cna + self.classifier
    }
}

pub fn mac_breakdown(config: &ModelConfig) -> Result<MacBreakdown> {
    config.validate()?;
    let c = config.channels;
    let t = config.window_len;
    let tp = config.t_prime();
    let d = config.d_depth as u64;

    let stde = config.temporal_pointwise().macs(c, t)?
        + config.temporal_depthwise().macs(c, t)?
        + config.spatial_pointwise().macs(c, tp)?
        + config.spatial_depthwise().macs(c, tp)?;

    let mste = if config.use_mste {
        let mut m = config.mste_skip().macs(c, config.t_min())?;
        for &k in &config.mste_kernels {
            m += config.mste_branch(k).macs(c, tp)?;
        }
        m
    } else {
        0
    };

    let cna = if config.use_cna {
        let g = config.groups as u64;
        let per_group = config.group_depth() as u64;
        let tp = tp as u64;
        // (1 x c)(c x T') and (1 x c)(c x D*T') per group, plus the fusion conv.
        g * (per_group * tp + per_group * d * tp) + g * config.cna_fuse().macs(1, tp as usize)?
    } else {
        0
    };

    Ok(MacBreakdown {
        stde,
        mste,
        cna,
        classifier: d * config.num_classes as u64,
    })
}

pub fn count_macs(config: &ModelConfig) -> Result<u64> {
    Ok(mac_breakdown(config)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_breakdown_matches_layer_table() {
        let b = mac_breakdown(&ModelConfig::default()).unwrap();
        // 1->16 pointwise, (1,8) depthwise, 16->16 pointwise, (64,1) depthwise.
        assert_eq!(b.stde, 131_072 + 991_232 + 1_982_464 + 123_904);
        // Four dilated branches plus the (64,1) skip on 117 steps.
        assert_eq!(b.mste, 495_616 + 983_040 + 1_462_272 + 2_396_160 + 119_808);
        assert_eq!(b.cna, 1_936 + 30_976 + 16_456);
        assert_eq!(b.classifier, 32);
        assert_eq!(b.total(), 8_734_968);
    }

    #[test]
    fn macs_scale_roughly_linearly_in_time() {
        let short = count_macs(&ModelConfig::with_input(64, 256)).unwrap() as f64;
        let long = count_macs(&ModelConfig::with_input(64, 512)).unwrap() as f64;
        let ratio = long / short;
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn ablations_remove_their_cost() {
        let full = mac_breakdown(&ModelConfig::default()).unwrap();
        let no_mste = mac_breakdown(&ModelConfig {
            use_mste: false,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_eq!(no_mste.mste, 0);
        assert_eq!(no_mste.stde, full.stde);
    }
}
