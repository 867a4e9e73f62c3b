//! Shared-weight encoder-decoder producing feature maps at 1/4, 1/8 and 1/16,
//! plus a shallow left-image stem for guidance at 1/2 and full resolution.

use esm_tensor::{Element, Tensor};

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{Act, Builder, ConvBlock, Ctx, DeconvBlock};

#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Element> {
    pub feats_4: Tensor<T>,
    pub feats_8: Tensor<T>,
    pub feats_16: Tensor<T>,
    /// Left view only.
    pub guide_2: Option<Tensor<T>>,
    pub guide_1: Option<Tensor<T>>,
}

impl<T: Element> FeaturePyramid<T> {
    pub fn feats(&self, scale: usize) -> Option<&Tensor<T>> {
        match scale {
            4 => Some(&self.feats_4),
            8 => Some(&self.feats_8),
            16 => Some(&self.feats_16),
            _ => None,
        }
    }

    /// Guidance at any scale in {1, 2, 4, 8, 16}.
    pub fn guide(&self, scale: usize) -> Option<&Tensor<T>> {
        match scale {
            1 => self.guide_1.as_ref(),
            2 => self.guide_2.as_ref(),
            s => self.feats(s),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    encoder: [ConvBlock; 4],
    head_16: ConvBlock,
    up_8: DeconvBlock,
    head_8: ConvBlock,
    up_4: DeconvBlock,
    head_4: ConvBlock,
    stem_1: ConvBlock,
    stem_2: ConvBlock,
}

impl Backbone {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cfg: &BackboneConfig) -> Self {
        let e = cfg.encoder;
        let enc = |b: &mut Builder<'_, T>, n: usize, cin: usize| {
            ConvBlock::new(&mut b.sub(&format!("enc{n}")), 2, cin, e[n], 3, 2, true, Act::Gelu)
        };
        let encoder = [enc(b, 0, 3), enc(b, 1, e[0]), enc(b, 2, e[1]), enc(b, 3, e[2])];
        Backbone {
            encoder,
            head_16: ConvBlock::new(&mut b.sub("head16"), 2, e[3], cfg.feats_16, 3, 1, true, Act::Gelu),
            up_8: DeconvBlock::new(&mut b.sub("up8"), 2, cfg.feats_16, e[2], true, Act::Gelu),
            head_8: ConvBlock::new(&mut b.sub("head8"), 2, 2 * e[2], cfg.feats_8, 3, 1, true, Act::Gelu),
            up_4: DeconvBlock::new(&mut b.sub("up4"), 2, cfg.feats_8, e[1], true, Act::Gelu),
            head_4: ConvBlock::new(&mut b.sub("head4"), 2, 2 * e[1], cfg.feats_4, 3, 1, true, Act::Gelu),
            stem_1: ConvBlock::new(&mut b.sub("stem1"), 2, 3, cfg.guide_1, 3, 1, false, Act::Gelu),
            stem_2: ConvBlock::new(&mut b.sub("stem2"), 2, cfg.guide_1, cfg.guide_2, 3, 2, false, Act::Gelu),
        }
    }

    fn pyramid<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        let x1 = self.encoder[0].forward(ctx, x)?;
        let x2 = self.encoder[1].forward(ctx, &x1)?;
        let x3 = self.encoder[2].forward(ctx, &x2)?;
        let x4 = self.encoder[3].forward(ctx, &x3)?;
        let f16 = self.head_16.forward(ctx, &x4)?;
        let u8 = self.up_8.forward(ctx, &f16, &x3.shape()[2..])?;
        let f8 = self.head_8.forward(ctx, &Tensor::concat(&[u8, x3], 1)?)?;
        let u4 = self.up_4.forward(ctx, &f8, &x2.shape()[2..])?;
        let f4 = self.head_4.forward(ctx, &Tensor::concat(&[u4, x2], 1)?)?;
        Ok([f4, f8, f16])
    }

    /// Runs both views through the same weights in one batch.
    pub fn extract_features<T: Element>(
        &self,
        ctx: &Ctx<'_, T>,
        left: &Tensor<T>,
        right: &Tensor<T>,
    ) -> Result<(FeaturePyramid<T>, FeaturePyramid<T>)> {
        let s = left.shape();
        if s.len() != 4 || s[1] != 3 || left.shape() != right.shape() {
            return Err(Error::Shape(format!(
                "backbone expects two [B, 3, H, W] images of equal shape, got {:?} and {:?}",
                left.shape(),
                right.shape()
            )));
        }
        if s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(Error::Shape(format!("image height and width must be divisible by 16, got {}x{}", s[2], s[3])));
        }
        let b = s[0];
        let both = Tensor::concat(&[left.clone(), right.clone()], 0)?;
        let [f4, f8, f16] = self.pyramid(ctx, &both)?;
        let half = |t: &Tensor<T>, i: usize| t.narrow(0, i * b, b);
        let g1 = self.stem_1.forward(ctx, left)?;
        let g2 = self.stem_2.forward(ctx, &g1)?;
        let l = FeaturePyramid {
            feats_4: half(&f4, 0)?,
            feats_8: half(&f8, 0)?,
            feats_16: half(&f16, 0)?,
            guide_2: Some(g2),
            guide_1: Some(g1),
        };
        let r = FeaturePyramid {
            feats_4: half(&f4, 1)?,
            feats_8: half(&f8, 1)?,
            feats_16: half(&f16, 1)?,
            guide_2: None,
            guide_1: None,
        };
        Ok((l, r))
    }
}
