//! Model configuration. Serialized as TOML into every checkpoint so a saved
//! model is self-describing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model size. Selects the cost-volume scale and the aggregation channel
/// parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    S,
    M,
    L,
}

impl Variant {
    /// Downsampling factor of the cost volume.
    pub fn volume_scale(self) -> usize {
        match self {
            Variant::S => 16,
            Variant::M => 8,
            Variant::L => 4,
        }
    }

    /// Aggregation channel parameter `j`.
    pub fn channel_param(self) -> usize {
        match self {
            Variant::S => 4,
            Variant::M => 8,
            Variant::L => 16,
        }
    }

    /// Top-k used by disparity regression: 1 at 1/16 and 1/8, 2 at 1/4.
    pub fn default_top_k(self) -> usize {
        match self {
            Variant::S | Variant::M => 1,
            Variant::L => 2,
        }
    }

    /// Number of ×2 upsampling stages needed to reach full resolution.
    pub fn esm_stages(self) -> usize {
        self.volume_scale().trailing_zeros() as usize
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::S => "S",
            Variant::M => "M",
            Variant::L => "L",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S" => Ok(Variant::S),
            "M" => Ok(Variant::M),
            "L" => Ok(Variant::L),
            _ => Err(Error::Config(format!("unknown variant {s:?}, expected S, M or L"))),
        }
    }
}

/// Cost-volume construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeKind {
    /// Group-wise correlation, `N_g` channels.
    #[serde(rename = "gwc")]
    Gwc,
    /// Normalized (cosine) correlation, one channel.
    #[serde(rename = "nc")]
    NormCorr,
}

impl fmt::Display for VolumeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VolumeKind::Gwc => "gwc",
            VolumeKind::NormCorr => "nc",
        })
    }
}

impl FromStr for VolumeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gwc" => Ok(VolumeKind::Gwc),
            "nc" | "norm_corr" => Ok(VolumeKind::NormCorr),
            _ => Err(Error::Config(format!("unknown cost volume kind {s:?}, expected gwc or nc"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels of the four stride-2 encoder stages (1/2 .. 1/16).
    pub encoder: [usize; 4],
    /// Decoder output channels at 1/4, 1/8, 1/16.
    pub feats_4: usize,
    pub feats_8: usize,
    pub feats_16: usize,
    /// Guidance stem channels at 1/2 and 1/1.
    pub guide_2: usize,
    pub guide_1: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { encoder: [16, 24, 32, 48], feats_4: 48, feats_8: 64, feats_16: 96, guide_2: 8, guide_1: 4 }
    }
}

impl BackboneConfig {
    /// Feature channels at scale 4, 8 or 16.
    pub fn feats(&self, scale: usize) -> usize {
        match scale {
            4 => self.feats_4,
            8 => self.feats_8,
            16 => self.feats_16,
            _ => panic!("no feature map at scale {scale}"),
        }
    }

    /// Left-image guidance channels at any scale in {1, 2, 4, 8, 16}.
    pub fn guide(&self, scale: usize) -> usize {
        match scale {
            1 => self.guide_1,
            2 => self.guide_2,
            s => self.feats(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsmConfig {
    /// Mixing channels `C_m` for a stage whose input is at 1/16, 1/8, 1/4, 1/2.
    pub mix_16: usize,
    pub mix_8: usize,
    pub mix_4: usize,
    pub mix_2: usize,
}

impl Default for EsmConfig {
    fn default() -> Self {
        EsmConfig { mix_16: 32, mix_8: 32, mix_4: 24, mix_2: 16 }
    }
}

impl EsmConfig {
    pub fn mix(&self, in_scale: usize) -> usize {
        match in_scale {
            16 => self.mix_16,
            8 => self.mix_8,
            4 => self.mix_4,
            2 => self.mix_2,
            _ => panic!("no ESM stage starts at scale {in_scale}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub kind: VolumeKind,
    /// Maximum disparity at full resolution, in pixels.
    pub d_max: usize,
    /// Aggregation base channel parameter `i`.
    pub base_channels: usize,
    /// Aggregation channel parameter `j`.
    pub volume_channels: usize,
    /// Group count `N_g` of the group-wise correlation volume.
    pub groups: usize,
    pub top_k: usize,
    /// Encoder stages of the 3D hourglass.
    pub hourglass_levels: usize,
    pub backbone: BackboneConfig,
    pub esm: EsmConfig,
    /// Loss weight per supervised output, finest first. Coarser outputs beyond
    /// the list reuse the last entry.
    pub loss_weights: Vec<f64>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Input images are scaled to [0, 1] with no mean/std whitening.
    pub image_normalization: String,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, kind: VolumeKind, d_max: usize) -> Self {
        ModelConfig {
            variant,
            kind,
            d_max,
            base_channels: 8,
            volume_channels: variant.channel_param(),
            groups: 8,
            top_k: variant.default_top_k(),
            hourglass_levels: 3,
            backbone: BackboneConfig::default(),
            esm: EsmConfig::default(),
            loss_weights: vec![1.0, 1.0 / 6.0, 1.0 / 10.0],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            image_normalization: "unit".into(),
            seed: 0,
        }
    }

    /// Desk-scale preset: maximum disparity 32.
    pub fn desk(variant: Variant, kind: VolumeKind) -> Self {
        Self::new(variant, kind, 32)
    }

    /// Full-scale preset: maximum disparity 192.
    pub fn full(variant: Variant, kind: VolumeKind) -> Self {
        Self::new(variant, kind, 192)
    }

    /// `ESMStereo-<variant>-<kind>`.
    pub fn name(&self) -> String {
        format!("ESMStereo-{}-{}", self.variant, self.kind)
    }

    pub fn volume_scale(&self) -> usize {
        self.variant.volume_scale()
    }

    /// Disparity bins of the cost volume.
    pub fn volume_disparities(&self) -> usize {
        self.d_max / self.volume_scale()
    }

    /// Cost-volume channels: `N_g` for gwc, 1 for norm correlation.
    pub fn volume_channels_in(&self) -> usize {
        match self.kind {
            VolumeKind::Gwc => self.groups,
            VolumeKind::NormCorr => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_max == 0 || self.d_max % 16 != 0 {
            return Err(Error::Config(format!("d_max must be a positive multiple of 16, got {}", self.d_max)));
        }
        let nc = self.backbone.feats(self.volume_scale());
        if self.kind == VolumeKind::Gwc && (self.groups == 0 || nc % self.groups != 0) {
            return Err(Error::Config(format!("feature channels {nc} not divisible by groups {}", self.groups)));
        }
        let d = self.volume_disparities();
        if self.top_k == 0 || self.top_k > d {
            return Err(Error::Config(format!("top_k {} must lie in 1..={d}", self.top_k)));
        }
        if self.hourglass_levels == 0 {
            return Err(Error::Config("hourglass_levels must be positive".into()));
        }
        for s in [16, 8, 4, 2] {
            if self.esm.mix(s) % 4 != 0 || self.esm.mix(s) < 8 {
                return Err(Error::Config(format!("ESM mix channels at 1/{s} must be a multiple of 4 and at least 8")));
            }
        }
        if self.loss_weights.is_empty() || self.loss_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_geometry() {
        assert_eq!(Variant::S.esm_stages(), 4);
        assert_eq!(Variant::M.esm_stages(), 3);
        assert_eq!(Variant::L.esm_stages(), 2);
        assert_eq!(Variant::S.channel_param(), 4);
        assert_eq!(Variant::L.default_top_k(), 2);
    }

    #[test]
    fn names_follow_variant_and_kind() {
        assert_eq!(ModelConfig::desk(Variant::S, VolumeKind::Gwc).name(), "ESMStereo-S-gwc");
        assert_eq!(ModelConfig::desk(Variant::L, VolumeKind::NormCorr).name(), "ESMStereo-L-nc");
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ModelConfig::desk(Variant::M, VolumeKind::NormCorr);
        let back = ModelConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validation() {
        let mut cfg = ModelConfig::desk(Variant::S, VolumeKind::Gwc);
        assert!(cfg.validate().is_ok());
        cfg.d_max = 40;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(Variant::S, VolumeKind::Gwc);
        cfg.groups = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(Variant::S, VolumeKind::Gwc);
        cfg.top_k = 3;
        assert!(cfg.validate().is_err());
        assert_eq!(cfg.volume_disparities(), 2);
    }

    #[test]
    fn parses_names() {
        assert_eq!("s".parse::<Variant>().unwrap(), Variant::S);
        assert_eq!("nc".parse::<VolumeKind>().unwrap(), VolumeKind::NormCorr);
        assert!("x".parse::<Variant>().is_err());
    }
}
