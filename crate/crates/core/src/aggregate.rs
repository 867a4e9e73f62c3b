//! 3D hourglass aggregation of the cost volume and top-k soft-argmax
//! regression of the initial disparity map.

use esm_tensor::{Element, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Act, Builder, ConvBlock, Ctx, Deconv, DeconvBlock};

/// Per-pixel disparity in pixels of its own resolution.
#[derive(Clone, Debug)]
pub struct DisparityMap<T: Element> {
    /// `[B, H, W]`.
    pub data: Tensor<T>,
    /// Downsampling factor relative to the input images.
    pub scale: usize,
    /// Per-pixel validity, same layout as `data`.
    pub valid: Vec<bool>,
}

impl<T: Element> DisparityMap<T> {
    /// A network output: every pixel valid.
    pub fn prediction(data: Tensor<T>, scale: usize) -> Self {
        let valid = vec![true; data.numel()];
        DisparityMap { data, scale, valid }
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Channel plan of an `levels`-stage hourglass: `j, i + j, i + 2j, i + 4j, ...`.
pub fn channel_plan(i: usize, j: usize, levels: usize) -> Vec<usize> {
    let mut c = vec![j];
    c.extend((1..=levels).map(|l| i + (1 << (l - 1)) * j));
    c
}

#[derive(Clone, Debug)]
pub struct Hourglass3d {
    stem: ConvBlock,
    /// Per level: stride-2 conv then stride-1 conv.
    down: Vec<(ConvBlock, ConvBlock)>,
    /// Per decoder level, deepest first: upsampling deconv then fusing conv.
    up: Vec<(DeconvBlock, ConvBlock)>,
    head: Deconv,
}

impl Hourglass3d {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, in_channels: usize, i: usize, j: usize, levels: usize) -> Self {
        assert!(levels >= 1, "hourglass needs at least one level");
        let c = channel_plan(i, j, levels);
        let stem = ConvBlock::new(&mut b.sub("stem"), 3, in_channels, c[0], 3, 1, true, Act::Gelu);
        let down = (1..=levels)
            .map(|l| {
                let mut s = b.sub(&format!("down{l}"));
                (
                    ConvBlock::new(&mut s.sub("a"), 3, c[l - 1], c[l], 3, 2, true, Act::Gelu),
                    ConvBlock::new(&mut s.sub("b"), 3, c[l], c[l], 3, 1, true, Act::Gelu),
                )
            })
            .collect();
        let up = (2..=levels)
            .rev()
            .map(|l| {
                let mut s = b.sub(&format!("up{l}"));
                (
                    DeconvBlock::new(&mut s.sub("a"), 3, c[l], c[l - 1], true, Act::Gelu),
                    ConvBlock::new(&mut s.sub("b"), 3, 2 * c[l - 1], c[l - 1], 3, 1, true, Act::Gelu),
                )
            })
            .collect();
        let head = Deconv::new(&mut b.sub("head"), 3, c[1], 1, 2, true);
        Hourglass3d { stem, down, up, head }
    }

    pub fn levels(&self) -> usize {
        self.down.len()
    }

    /// `[B, C_v, D, H, W]` → `[B, 1, D, H, W]`.
    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, volume: &Tensor<T>) -> Result<Tensor<T>> {
        if volume.rank() != 5 {
            return Err(Error::Shape(format!("hourglass expects [B, C, D, H, W], got {:?}", volume.shape())));
        }
        let spatial = &volume.shape()[2..];
        if spatial.iter().any(|&n| n < 2) {
            return Err(Error::Shape(format!(
                "cost volume {spatial:?} too small for a {}-level hourglass: D, H and W must each be at least 2",
                self.levels()
            )));
        }
        let mut skips = vec![self.stem.forward(ctx, volume)?];
        for (a, b) in &self.down {
            let x = b.forward(ctx, &a.forward(ctx, skips.last().expect("stem"))?)?;
            skips.push(x);
        }
        let mut x = skips.pop().expect("deepest level");
        for (a, b) in &self.up {
            let skip = skips.pop().expect("skip per decoder level");
            let u = a.forward(ctx, &x, &skip.shape()[2..])?;
            x = b.forward(ctx, &Tensor::concat(&[skip, u], 1)?)?;
        }
        let target = skips.pop().expect("stem output");
        self.head.forward(ctx, &x, &target.shape()[2..])
    }
}

/// Top-k soft-argmax along the disparity axis of `[B, 1, D, H, W]`: the `k`
/// largest bins are softmax-weighted and their indices averaged.
pub fn regress_disparity<T: Element>(agg: &Tensor<T>, k: usize, scale: usize) -> Result<DisparityMap<T>> {
    let s = agg.shape();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::Shape(format!("regression expects [B, 1, D, H, W], got {s:?}")));
    }
    let (b, d, h, w) = (s[0], s[2], s[3], s[4]);
    if k == 0 || k > d {
        return Err(Error::Invalid(format!("top-k {k} must lie in 1..={d}")));
    }
    let x = agg.reshape(&[b, d, h, w])?;
    let (values, idx) = x.topk(1, k)?;
    let weights = values.softmax(1)?;
    let idx = Tensor::new(idx.into_iter().map(|i| T::from_f64c(i as f64)).collect(), weights.shape())?;
    let disp = weights.mul(&idx)?.sum_axis(1)?;
    Ok(DisparityMap::prediction(disp, scale))
}
