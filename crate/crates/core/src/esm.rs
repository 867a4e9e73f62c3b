//! Shuffle-mixer upsampling stages.
//!
//! One stage takes a disparity map at scale `s` and returns one at `s / 2`:
//!
//! ```text
//! fused = fuse(disp, guide_s)                       C_m channels at s
//! mixed = fm_block(fm_block(fused))
//! up    = pixel_shuffle(mixed, 2)                   C_m / 4 channels at s / 2
//! out   = bilinear(2 * disp) + refine(up, guide_{s/2})
//! ```

use esm_tensor::{Element, ResizeMode, Tensor};

use crate::aggregate::DisparityMap;
use crate::error::{Error, Result};
use crate::nn::{Act, Builder, Conv, ConvBlock, Ctx, DeconvBlock};

fn check_spatial<T: Element>(what: &str, t: &Tensor<T>, h: usize, w: usize) -> Result<()> {
    if t.rank() != 4 || t.shape()[2] != h || t.shape()[3] != w {
        return Err(Error::Shape(format!("{what}: expected spatial size {h}x{w}, got {:?}", t.shape())));
    }
    Ok(())
}

/// Lifts a one-channel disparity map to features and merges it with guidance.
#[derive(Clone, Debug)]
pub struct Fuse {
    disp: Vec<ConvBlock>,
    mix: [ConvBlock; 2],
    /// Disparities are divided by this before the first conv.
    norm: f64,
}

impl Fuse {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, guide: usize, mix: usize, norm: f64) -> Self {
        let half = mix / 2;
        let disp = (0..4)
            .map(|n| ConvBlock::new(&mut b.sub(&format!("disp{n}")), 2, if n == 0 { 1 } else { half }, half, 3, 1, false, Act::Gelu))
            .collect();
        let mix = [
            ConvBlock::new(&mut b.sub("mix0"), 2, half + guide, mix, 3, 1, false, Act::Gelu),
            ConvBlock::new(&mut b.sub("mix1"), 2, mix, mix, 3, 1, false, Act::Gelu),
        ];
        Fuse { disp, mix, norm }
    }

    /// `disp [B, H, W]`, `guide [B, C_g, H, W]` → `[B, C_m, H, W]`.
    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, disp: &Tensor<T>, guide: &Tensor<T>) -> Result<Tensor<T>> {
        let s = disp.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("fuse: disparity must be [B, H, W], got {s:?}")));
        }
        check_spatial("fuse guidance", guide, s[1], s[2])?;
        let mut x = disp.reshape(&[s[0], 1, s[1], s[2]])?.mul_scalar(1.0 / self.norm);
        for c in &self.disp {
            x = c.forward(ctx, &x)?;
        }
        let x = self.mix[0].forward(ctx, &Tensor::concat(&[x, guide.clone()], 1)?)?;
        self.mix[1].forward(ctx, &x)
    }
}

/// Split, pointwise transform of one half, channel shuffle, depthwise 3×3,
/// residual.
#[derive(Clone, Debug)]
pub struct FmBlock {
    pub pointwise: Conv,
    pub depthwise: Conv,
}

impl FmBlock {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        assert!(channels % 2 == 0, "fm block needs an even channel count");
        let half = channels / 2;
        FmBlock {
            pointwise: Conv::new(&mut b.sub("pw"), 2, half, half, 1, 1, 1, true),
            depthwise: Conv::new(&mut b.sub("dw"), 2, channels, channels, 3, 1, channels, true),
        }
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = x.shape()[1];
        if c % 2 != 0 {
            return Err(Error::Shape(format!("fm block: channel count {c} is odd")));
        }
        let (a, b) = x.split_channels(c / 2)?;
        let a = self.pointwise.forward(ctx, &a)?.gelu();
        let y = Tensor::concat(&[a, b], 1)?.channel_shuffle(2)?;
        Ok(x.add(&self.depthwise.forward(ctx, &y)?)?)
    }
}

/// Two-level 2D hourglass producing a one-channel residual.
#[derive(Clone, Debug)]
pub struct Refine2d {
    enc: [ConvBlock; 3],
    dec: [DeconvBlock; 2],
    pub out: Conv,
}

impl Refine2d {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, in_channels: usize) -> Self {
        let c = in_channels;
        Refine2d {
            enc: [
                ConvBlock::new(&mut b.sub("enc0"), 2, c, c, 3, 1, false, Act::Gelu),
                ConvBlock::new(&mut b.sub("enc1"), 2, c, 2 * c, 3, 2, false, Act::Gelu),
                ConvBlock::new(&mut b.sub("enc2"), 2, 2 * c, 2 * c, 3, 2, false, Act::Gelu),
            ],
            dec: [
                DeconvBlock::new(&mut b.sub("dec1"), 2, 2 * c, 2 * c, false, Act::Gelu),
                DeconvBlock::new(&mut b.sub("dec0"), 2, 4 * c, c, false, Act::Gelu),
            ],
            out: Conv::new(&mut b.sub("out"), 2, 2 * c, 1, 3, 1, 1, true),
        }
    }

    /// `[B, C, H, W]` → `[B, 1, H, W]`.
    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x0 = self.enc[0].forward(ctx, x)?;
        let x1 = self.enc[1].forward(ctx, &x0)?;
        let x2 = self.enc[2].forward(ctx, &x1)?;
        let u1 = self.dec[0].forward(ctx, &x2, &x1.shape()[2..])?;
        let y1 = Tensor::concat(&[x1, u1], 1)?;
        let u0 = self.dec[1].forward(ctx, &y1, &x0.shape()[2..])?;
        let y0 = Tensor::concat(&[x0, u0], 1)?;
        self.out.forward(ctx, &y0)
    }
}

/// Channel layout of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EsmStageConfig {
    pub in_scale: usize,
    pub mix: usize,
    pub guide_in: usize,
    pub guide_out: usize,
}

impl EsmStageConfig {
    pub fn out_scale(&self) -> usize {
        self.in_scale / 2
    }
}

#[derive(Clone, Debug)]
pub struct EsmStage {
    pub config: EsmStageConfig,
    pub fuse: Fuse,
    pub fm: [FmBlock; 2],
    pub refine: Refine2d,
}

impl EsmStage {
    /// `d_max` is the full-resolution maximum disparity, used to normalize the
    /// fused disparity input.
    pub fn new<T: Element>(b: &mut Builder<'_, T>, config: EsmStageConfig, d_max: usize) -> Self {
        assert!(config.mix % 4 == 0, "pixel shuffle needs mix channels divisible by 4");
        let norm = d_max as f64 / config.in_scale as f64;
        EsmStage {
            config,
            fuse: Fuse::new(&mut b.sub("fuse"), config.guide_in, config.mix, norm),
            fm: [FmBlock::new(&mut b.sub("fm0"), config.mix), FmBlock::new(&mut b.sub("fm1"), config.mix)],
            refine: Refine2d::new(&mut b.sub("refine"), config.mix / 4 + config.guide_out),
        }
    }

    /// Doubles the resolution (and the disparity values) of `disp`.
    pub fn forward<T: Element>(
        &self,
        ctx: &Ctx<'_, T>,
        disp: &DisparityMap<T>,
        guide_in: &Tensor<T>,
        guide_out: &Tensor<T>,
    ) -> Result<DisparityMap<T>> {
        if disp.scale != self.config.in_scale {
            return Err(Error::Shape(format!(
                "esm stage expects a map at 1/{}, got 1/{}",
                self.config.in_scale, disp.scale
            )));
        }
        let (b, h, w) = (disp.batch(), disp.height(), disp.width());
        check_spatial("esm output guidance", guide_out, 2 * h, 2 * w)?;
        let x = self.fuse.forward(ctx, &disp.data, guide_in)?;
        let x = self.fm[1].forward(ctx, &self.fm[0].forward(ctx, &x)?)?;
        let x = x.pixel_shuffle(2)?;
        let residual = self.refine.forward(ctx, &Tensor::concat(&[x, guide_out.clone()], 1)?)?;
        let up = upsample_disparity(&disp.data)?;
        let out = up.add(&residual.reshape(&[b, 2 * h, 2 * w])?)?;
        Ok(DisparityMap::prediction(out, self.config.out_scale()))
    }
}

/// Bilinear ×2 upsampling of `[B, H, W]` with values doubled.
pub fn upsample_disparity<T: Element>(disp: &Tensor<T>) -> Result<Tensor<T>> {
    let s = disp.shape();
    let x = disp.reshape(&[s[0], 1, s[1], s[2]])?.mul_scalar(2.0);
    Ok(x.resize(2 * s[1], 2 * s[2], ResizeMode::Bilinear)?.reshape(&[s[0], 2 * s[1], 2 * s[2]])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{seeded_rng, ParamStore};

    fn stage(store: &mut ParamStore<f64>) -> EsmStage {
        let mut rng = seeded_rng(2);
        let cfg = EsmStageConfig { in_scale: 4, mix: 8, guide_in: 3, guide_out: 2 };
        EsmStage::new(&mut Builder::new(store, &mut rng, "esm.stage0"), cfg, 32)
    }

    #[test]
    fn zero_weight_fm_block_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(1);
        let fm = FmBlock::new(&mut Builder::new(&mut store, &mut rng, "fm"), 4);
        store.zero_prefix("fm");
        let x = Tensor::<f64>::from_f64(&(0..48).map(|v| v as f64 * 0.1).collect::<Vec<_>>(), &[1, 4, 3, 4]).unwrap();
        assert_eq!(fm.forward(&Ctx::eval(&store), &x).unwrap().to_vec(), x.to_vec());
        let odd = Tensor::<f64>::zeros(&[1, 3, 2, 2]).unwrap();
        assert!(fm.forward(&Ctx::eval(&store), &odd).is_err());
    }

    #[test]
    fn zeroed_head_gives_pure_bilinear() {
        let mut store = ParamStore::<f64>::new();
        let st = stage(&mut store);
        store.zero_prefix("esm.stage0.refine.out");
        let d = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 2, 3]).unwrap();
        let g_in = Tensor::<f64>::full(&[1, 3, 2, 3], 0.5).unwrap();
        let g_out = Tensor::<f64>::full(&[1, 2, 4, 6], 0.5).unwrap();
        let out = st.forward(&Ctx::eval(&store), &DisparityMap::prediction(d.clone(), 4), &g_in, &g_out).unwrap();
        assert_eq!(out.scale, 2);
        assert_eq!(out.data.to_vec(), upsample_disparity(&d).unwrap().to_vec());
        let c = Tensor::<f64>::full(&[1, 2, 3], 1.5).unwrap();
        assert!(upsample_disparity(&c).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn scale_mismatch_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let st = stage(&mut store);
        let d = Tensor::<f64>::zeros(&[1, 2, 3]).unwrap();
        let g_in = Tensor::<f64>::zeros(&[1, 3, 2, 3]).unwrap();
        let g_out = Tensor::<f64>::zeros(&[1, 2, 4, 6]).unwrap();
        let ctx = Ctx::eval(&store);
        assert!(st.forward(&ctx, &DisparityMap::prediction(d.clone(), 8), &g_in, &g_out).is_err());
        let bad = Tensor::<f64>::zeros(&[1, 2, 2, 6]).unwrap();
        assert!(st.forward(&ctx, &DisparityMap::prediction(d, 4), &g_in, &bad).is_err());
    }
}
