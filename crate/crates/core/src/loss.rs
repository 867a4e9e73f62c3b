//! Multi-scale smooth-L1 training loss.

use esm_tensor::{resize_taps, Element, ResizeMode, Tensor};

use crate::aggregate::DisparityMap;
use crate::error::{Error, Result};

/// `x² / 2` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.unary(
        "smooth_l1",
        |v| {
            let a = v.abs();
            if a < T::one() {
                v * v * T::from_f64c(0.5)
            } else {
                a - T::from_f64c(0.5)
            }
        },
        |v, _| v.max(-T::one()).min(T::one()),
    )
}

/// Weight per supervised output, finest first; outputs beyond the list reuse
/// the last weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights(pub Vec<f64>);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights(vec![1.0, 1.0 / 6.0, 1.0 / 10.0])
    }
}

impl LossWeights {
    /// Weights for `n` outputs listed coarse to fine.
    pub fn coarse_to_fine(&self, n: usize) -> Vec<f64> {
        let last = *self.0.last().expect("non-empty weights");
        let mut w: Vec<f64> = (0..n).map(|i| self.0.get(i).copied().unwrap_or(last)).collect();
        w.reverse();
        w
    }
}

/// Ground truth brought to a prediction's resolution: bilinear resampling
/// with values divided by the scale. A resampled pixel is valid only if every
/// source pixel it reads is valid.
pub fn downscale_ground_truth<T: Element>(gt: &DisparityMap<T>, h: usize, w: usize) -> Result<DisparityMap<T>> {
    let (b, gh, gw) = (gt.batch(), gt.height(), gt.width());
    if gh == h && gw == w {
        return Ok(gt.clone());
    }
    if gh % h != 0 || gw % w != 0 || gh / h != gw / w {
        return Err(Error::Shape(format!("cannot bring {gh}x{gw} ground truth to {h}x{w}")));
    }
    let s = gh / h;
    let ty = resize_taps(gh, h, ResizeMode::Bilinear);
    let tx = resize_taps(gw, w, ResizeMode::Bilinear);
    let src = gt.data.data();
    let mut data = vec![T::zero(); b * h * w];
    let mut valid = vec![false; b * h * w];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut ok = true;
                for &(sy, wy) in &ty[y] {
                    for &(sx, wx) in &tx[x] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let i = (bi * gh + sy) * gw + sx;
                        ok &= gt.valid[i];
                        acc += wgt * src[i].as_f64();
                    }
                }
                let o = (bi * h + y) * w + x;
                data[o] = T::from_f64c(acc / s as f64);
                valid[o] = ok;
            }
        }
    }
    Ok(DisparityMap { data: Tensor::new(data, &[b, h, w])?, scale: gt.scale * s, valid })
}

#[derive(Clone, Debug)]
pub struct LossOutput<T: Element> {
    pub total: Tensor<T>,
    /// Unweighted per-output terms, coarse to fine.
    pub terms: Vec<f64>,
    /// Outputs skipped because no ground-truth pixel was valid at their scale.
    pub empty_scales: usize,
}

/// Mean smooth-L1 over the valid pixels of each prediction, weighted and summed.
pub fn multiscale_loss<T: Element>(
    preds: &[DisparityMap<T>],
    gt: &DisparityMap<T>,
    weights: &LossWeights,
) -> Result<LossOutput<T>> {
    if preds.is_empty() {
        return Err(Error::Invalid("loss needs at least one prediction".into()));
    }
    let lambdas = weights.coarse_to_fine(preds.len());
    let mut total: Option<Tensor<T>> = None;
    let mut terms = Vec::with_capacity(preds.len());
    let mut empty_scales = 0;
    for (pred, &lambda) in preds.iter().zip(&lambdas) {
        let target = downscale_ground_truth(gt, pred.height(), pred.width())?;
        if target.data.shape() != pred.data.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.data.shape(),
                target.data.shape()
            )));
        }
        let count = target.valid.iter().filter(|&&v| v).count();
        if count == 0 {
            empty_scales += 1;
            terms.push(0.0);
            continue;
        }
        let mask = Tensor::new(
            target.valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect(),
            pred.data.shape(),
        )?;
        // the target values at invalid pixels are arbitrary; mask before the loss
        let diff = pred.data.sub(&target.data)?.mul(&mask)?;
        let term = smooth_l1(&diff).sum().mul_scalar(1.0 / count as f64);
        terms.push(term.item().as_f64());
        let weighted = term.mul_scalar(lambda);
        total = Some(match total {
            None => weighted,
            Some(t) => t.add(&weighted)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => Tensor::scalar(T::zero()),
    };
    Ok(LossOutput { total, terms, empty_scales })
}
