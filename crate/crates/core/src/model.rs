//! The full network: features, cost volume, 3D aggregation, regression and
//! the stack of upsampling stages.

use esm_tensor::{Element, Tensor};

use crate::aggregate::{regress_disparity, DisparityMap, Hourglass3d};
use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::costvol::{build_volume, CostVolume};
use crate::error::{Error, Result};
use crate::esm::{EsmStage, EsmStageConfig};
use crate::nn::{seeded_rng, Builder, Ctx, ParamStore};

/// Parameter name prefixes, one per checkpoint segment.
pub const BACKBONE: &str = "backbone";
pub const AGGREGATE: &str = "aggregate3d";

pub fn stage_prefix(n: usize) -> String {
    format!("esm.stage{n}")
}

#[derive(Clone, Debug)]
pub struct EsmStereo {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub aggregate: Hourglass3d,
    pub stages: Vec<EsmStage>,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Element> {
    pub volume: CostVolume<T>,
    /// Coarse to fine; the last map is at full resolution and clamped to
    /// `[0, d_max]`.
    pub preds: Vec<DisparityMap<T>>,
}

impl<T: Element> ForwardOutput<T> {
    pub fn final_map(&self) -> &DisparityMap<T> {
        self.preds.last().expect("at least one prediction")
    }
}

impl EsmStereo {
    /// Builds the network and its freshly initialized parameters.
    pub fn build<T: Element>(config: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(config.seed);
        let backbone = Backbone::new(&mut Builder::new(&mut store, &mut rng, BACKBONE), &config.backbone);
        let aggregate = Hourglass3d::new(
            &mut Builder::new(&mut store, &mut rng, AGGREGATE),
            config.volume_channels_in(),
            config.base_channels,
            config.volume_channels,
            config.hourglass_levels,
        );
        let mut stages = Vec::new();
        let mut s = config.volume_scale();
        while s > 1 {
            let cfg = EsmStageConfig {
                in_scale: s,
                mix: config.esm.mix(s),
                guide_in: config.backbone.guide(s),
                guide_out: config.backbone.guide(s / 2),
            };
            let n = stages.len();
            stages.push(EsmStage::new(&mut Builder::new(&mut store, &mut rng, &stage_prefix(n)), cfg, config.d_max));
            s /= 2;
        }
        Ok((EsmStereo { config: config.clone(), backbone, aggregate, stages }, store))
    }

    /// `left`, `right`: `[B, 3, H, W]` in `[0, 1]`.
    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, left: &Tensor<T>, right: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let (pl, pr) = self.backbone.extract_features(ctx, left, right)?;
        let scale = cfg.volume_scale();
        let volume = build_volume(
            cfg.kind,
            pl.feats(scale).expect("volume scale has features"),
            pr.feats(scale).expect("volume scale has features"),
            cfg.volume_disparities(),
            cfg.groups,
            scale,
        )?;
        let agg = self.aggregate.forward(ctx, &volume.data)?;
        let mut preds = vec![regress_disparity(&agg, cfg.top_k, scale)?];
        for stage in &self.stages {
            let s = stage.config.in_scale;
            let missing = |s: usize| Error::Shape(format!("no guidance at 1/{s}"));
            let g_in = pl.guide(s).ok_or_else(|| missing(s))?;
            let g_out = pl.guide(s / 2).ok_or_else(|| missing(s / 2))?;
            let next = stage.forward(ctx, preds.last().expect("initial map"), g_in, g_out)?;
            preds.push(next);
        }
        let last = preds.pop().expect("final map");
        let clamped = last.data.clamp(0.0, cfg.d_max as f64);
        preds.push(DisparityMap::prediction(clamped, last.scale));
        Ok(ForwardOutput { volume, preds })
    }

    /// Zeroes the output conv of every refinement network so each stage
    /// reduces to scaled bilinear upsampling.
    pub fn zero_refinement_heads<T: Element>(&self, store: &mut ParamStore<T>) {
        for n in 0..self.stages.len() {
            store.zero_prefix(&format!("{}.refine.out.", stage_prefix(n)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Variant, VolumeKind};

    #[test]
    fn prediction_chain_per_variant() {
        for (variant, scales) in [(Variant::S, vec![16, 8, 4, 2, 1]), (Variant::M, vec![8, 4, 2, 1]), (Variant::L, vec![4, 2, 1])] {
            let cfg = ModelConfig::desk(variant, VolumeKind::Gwc);
            let (net, store) = EsmStereo::build::<f32>(&cfg).unwrap();
            assert_eq!(net.stages.len(), variant.esm_stages());
            let x = Tensor::<f32>::full(&[1, 3, 32, 64], 0.5).unwrap();
            let out = net.forward(&Ctx::eval(&store), &x, &x).unwrap();
            let got: Vec<usize> = out.preds.iter().map(|p| p.scale).collect();
            assert_eq!(got, scales);
            let last = out.final_map();
            assert_eq!(last.data.shape(), &[1, 32, 64]);
            assert!(last.data.data().iter().all(|&v| (0.0..=32.0).contains(&v)));
        }
    }

    #[test]
    fn segments_are_named() {
        let cfg = ModelConfig::desk(Variant::M, VolumeKind::NormCorr);
        let (_, store) = EsmStereo::build::<f32>(&cfg).unwrap();
        for prefix in ["backbone.", "aggregate3d.", "esm.stage0.", "esm.stage2."] {
            assert!(store.with_prefix(prefix).count() > 0, "{prefix}");
        }
        assert_eq!(store.with_prefix("esm.stage3.").count(), 0);
    }
}
