use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sapm::Normalization;

/// Detector shape and ablation switches. Serialized field names are the
/// on-disk config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub d: usize,
    pub q: usize,
    pub m: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub scales: usize,
    pub roi_size: usize,
    pub sacq_global: bool,
    pub sacq_local: bool,
    pub normalization: Normalization,
    pub amp_depth: usize,
    pub tau: f64,
    /// Channel reweighting inside both pooling modules.
    pub channel_reweight: bool,
    /// Conv depth of the shared local attention projection.
    pub local_amp_depth: usize,
    pub gn_groups: usize,
    pub ffn_dim: usize,
    /// Output widths of the three stride-2 backbone blocks.
    pub backbone_channels: [usize; 3],
}

impl Default for DetectorConfig {
    /// Toy scale: 64-wide features, 20 queries, 3 classes, one scale.
    fn default() -> Self {
        DetectorConfig {
            d: 64,
            q: 20,
            m: 3,
            encoder_layers: 2,
            decoder_layers: 3,
            heads: 4,
            scales: 1,
            roi_size: 7,
            sacq_global: true,
            sacq_local: true,
            normalization: Normalization::Softmax,
            amp_depth: 3,
            tau: 1.2,
            channel_reweight: true,
            local_amp_depth: 1,
            gn_groups: 32,
            ffn_dim: 128,
            backbone_channels: [32, 64, 64],
        }
    }
}

impl DetectorConfig {
    pub fn baseline() -> Self {
        DetectorConfig {
            sacq_global: false,
            sacq_local: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.d == 0 || !self.d.is_multiple_of(4) {
            return fail(format!("d = {} must be a positive multiple of 4", self.d));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d = {} not divisible by {} heads", self.d, self.heads));
        }
        if self.q == 0 {
            return fail("q must be positive".into());
        }
        if self.m < 2 {
            return fail(format!("m = {} classes; at least 2 are needed", self.m));
        }
        if self.decoder_layers == 0 {
            return fail("decoder_layers must be at least 1".into());
        }
        if !(1..=3).contains(&self.scales) {
            return fail(format!("scales = {} outside 1..=3", self.scales));
        }
        if self.roi_size == 0 {
            return fail("roi_size must be at least 1".into());
        }
        if !(1..=5).contains(&self.amp_depth) || !(1..=5).contains(&self.local_amp_depth) {
            return fail("AMP depth must lie in 1..=5".into());
        }
        if !(self.tau > 0.0) {
            return fail("tau must be positive".into());
        }
        if self.gn_groups == 0 || !self.d.is_multiple_of(self.gn_groups) {
            return fail(format!("d = {} not divisible into {} norm groups", self.d, self.gn_groups));
        }
        if self.backbone_channels.iter().any(|&c| c == 0 || c % 4 != 0) {
            return fail("backbone widths must be positive multiples of 4".into());
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_field_names_are_stable() {
        let c = DetectorConfig::default();
        let v = serde_json::to_value(&c).unwrap();
        for key in [
            "d",
            "q",
            "m",
            "encoder_layers",
            "decoder_layers",
            "heads",
            "scales",
            "roi_size",
            "sacq_global",
            "sacq_local",
            "normalization",
            "amp_depth",
            "tau",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["normalization"], "softmax");
        let back: DetectorConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: DetectorConfig = serde_json::from_str(r#"{"sacq_global":false,"sacq_local":false}"#).unwrap();
        assert_eq!(c, DetectorConfig::baseline());
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = [
            DetectorConfig { decoder_layers: 0, ..Default::default() },
            DetectorConfig { roi_size: 0, ..Default::default() },
            DetectorConfig { heads: 3, ..Default::default() },
            DetectorConfig { amp_depth: 6, ..Default::default() },
            DetectorConfig { m: 1, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(DetectorConfig::default().validate().is_ok());
    }
}
