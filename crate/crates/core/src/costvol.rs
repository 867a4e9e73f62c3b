//! Matching-cost volumes between left and right feature maps.
//!
//! Both builders take `[B, C, H, W]` features and return `[B, C_v, D, H, W]`.
//! Entry `(d, y, x)` compares left pixel `x` with right pixel `x - d`; entries
//! with `x < d` have no partner and hold [`FILL`].

use esm_tensor::{BackwardCtx, BackwardFn, Element, Tensor};

use crate::config::VolumeKind;
use crate::error::{Error, Result};

/// Value stored where the right-image partner falls outside the image.
pub const FILL: f64 = 0.0;

/// Guard added to the norm product of the normalized correlation.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CostVolume<T: Element> {
    /// `[B, C_v, D, H, W]`.
    pub data: Tensor<T>,
    /// Downsampling factor of the features the volume was built from.
    pub scale: usize,
    pub kind: VolumeKind,
}

impl<T: Element> CostVolume<T> {
    pub fn disparities(&self) -> usize {
        self.data.shape()[2]
    }
}

fn check_pair<T: Element>(op: &str, f_l: &Tensor<T>, f_r: &Tensor<T>, d: usize) -> Result<[usize; 4]> {
    if f_l.rank() != 4 || f_l.shape() != f_r.shape() {
        return Err(Error::Shape(format!(
            "{op}: features must share a [B, C, H, W] shape, got {:?} and {:?}",
            f_l.shape(),
            f_r.shape()
        )));
    }
    if d == 0 {
        return Err(Error::Invalid(format!("{op}: disparity count must be at least 1")));
    }
    let s = f_l.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

/// Group-wise correlation: channels are split into `groups` groups and each
/// group contributes the mean of the channel-wise products.
pub fn build_gwc_volume<T: Element>(
    f_l: &Tensor<T>,
    f_r: &Tensor<T>,
    disparities: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = check_pair("gwc volume", f_l, f_r, disparities)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Invalid(format!("gwc volume: {c} channels not divisible by {groups} groups")));
    }
    let cg = c / groups;
    let dn = disparities;
    let scale = T::from_f64c(1.0 / cg as f64);
    let (l, r) = (f_l.data(), f_r.data());
    let plane = h * w;
    let mut out = vec![T::from_f64c(FILL); b * groups * dn * plane];
    for bi in 0..b {
        for g in 0..groups {
            for d in 0..dn.min(w) {
                let o_base = ((bi * groups + g) * dn + d) * plane;
                let o = &mut out[o_base..o_base + plane];
                for x in o.iter_mut() {
                    *x = T::zero();
                }
                for ci in 0..cg {
                    let ch = (bi * c + g * cg + ci) * plane;
                    for y in 0..h {
                        let lr = &l[ch + y * w..ch + y * w + w];
                        let rr = &r[ch + y * w..ch + y * w + w];
                        let orow = &mut o[y * w..y * w + w];
                        for x in d..w {
                            orow[x] = orow[x] + lr[x] * rr[x - d];
                        }
                    }
                }
                for y in 0..h {
                    for x in 0..w {
                        o[y * w + x] = if x < d { T::from_f64c(FILL) } else { o[y * w + x] * scale };
                    }
                }
            }
        }
    }
    let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
        let (l, r) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let gy = ctx.grad;
        let mut gl = vec![T::zero(); l.len()];
        let mut gr = vec![T::zero(); r.len()];
        for bi in 0..b {
            for g in 0..groups {
                for d in 0..dn.min(w) {
                    let go = &gy[((bi * groups + g) * dn + d) * plane..][..plane];
                    for ci in 0..cg {
                        let ch = (bi * c + g * cg + ci) * plane;
                        for y in 0..h {
                            let row = ch + y * w;
                            for x in d..w {
                                let gv = go[y * w + x] * scale;
                                gl[row + x] = gl[row + x] + gv * r[row + x - d];
                                gr[row + x - d] = gr[row + x - d] + gv * l[row + x];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gl), Some(gr)]
    });
    Ok(Tensor::from_op("gwc_volume", out, &[b, groups, dn, h, w], vec![f_l.clone(), f_r.clone()], backward)?)
}

fn pixel_norms<T: Element>(f: &[T], b: usize, c: usize, plane: usize) -> Vec<T> {
    let mut n = vec![T::zero(); b * plane];
    for bi in 0..b {
        for ci in 0..c {
            let ch = &f[(bi * c + ci) * plane..][..plane];
            for (acc, &v) in n[bi * plane..(bi + 1) * plane].iter_mut().zip(ch) {
                *acc = *acc + v * v;
            }
        }
    }
    n.iter_mut().for_each(|v| *v = v.sqrt());
    n
}

/// Cosine similarity of full feature vectors, one output channel.
pub fn build_norm_corr_volume<T: Element>(f_l: &Tensor<T>, f_r: &Tensor<T>, disparities: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = check_pair("norm correlation volume", f_l, f_r, disparities)?;
    let dn = disparities;
    let plane = h * w;
    let eps = T::from_f64c(NORM_EPS);
    let (l, r) = (f_l.data(), f_r.data());
    let nl = pixel_norms(l, b, c, plane);
    let nr = pixel_norms(r, b, c, plane);
    // raw inner products, kept for the backward pass
    let mut dots = vec![T::zero(); b * dn * plane];
    for bi in 0..b {
        for d in 0..dn.min(w) {
            let o = &mut dots[(bi * dn + d) * plane..][..plane];
            for ci in 0..c {
                let ch = (bi * c + ci) * plane;
                for y in 0..h {
                    for x in d..w {
                        o[y * w + x] = o[y * w + x] + l[ch + y * w + x] * r[ch + y * w + x - d];
                    }
                }
            }
        }
    }
    let mut out = vec![T::from_f64c(FILL); dots.len()];
    for bi in 0..b {
        for d in 0..dn.min(w) {
            for y in 0..h {
                for x in d..w {
                    let p = y * w + x;
                    let den = nl[bi * plane + p] * nr[bi * plane + p - d] + eps;
                    out[(bi * dn + d) * plane + p] = dots[(bi * dn + d) * plane + p] / den;
                }
            }
        }
    }
    let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
        let (l, r) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let gy = ctx.grad;
        let mut gl = vec![T::zero(); l.len()];
        let mut gr = vec![T::zero(); r.len()];
        for bi in 0..b {
            for d in 0..dn.min(w) {
                for y in 0..h {
                    for x in d..w {
                        let p = y * w + x;
                        let q = p - d;
                        let g = gy[(bi * dn + d) * plane + p];
                        if g == T::zero() {
                            continue;
                        }
                        let (a, bn) = (nl[bi * plane + p], nr[bi * plane + q]);
                        let den = a * bn + eps;
                        let dot = dots[(bi * dn + d) * plane + p];
                        // d/dl = r / den - dot * bn * (l / a) / den^2, zero-norm terms dropped
                        let cl = if a > T::zero() { dot * bn / (a * den * den) } else { T::zero() };
                        let cr = if bn > T::zero() { dot * a / (bn * den * den) } else { T::zero() };
                        for ci in 0..c {
                            let ch = (bi * c + ci) * plane;
                            let (lv, rv) = (l[ch + p], r[ch + q]);
                            gl[ch + p] = gl[ch + p] + g * (rv / den - cl * lv);
                            gr[ch + q] = gr[ch + q] + g * (lv / den - cr * rv);
                        }
                    }
                }
            }
        }
        vec![Some(gl), Some(gr)]
    });
    Ok(Tensor::from_op("norm_corr_volume", out, &[b, 1, dn, h, w], vec![f_l.clone(), f_r.clone()], backward)?)
}

/// Builds the volume selected by `kind` and tags it with its scale.
pub fn build_volume<T: Element>(
    kind: VolumeKind,
    f_l: &Tensor<T>,
    f_r: &Tensor<T>,
    disparities: usize,
    groups: usize,
    scale: usize,
) -> Result<CostVolume<T>> {
    let data = match kind {
        VolumeKind::Gwc => build_gwc_volume(f_l, f_r, disparities, groups)?,
        VolumeKind::NormCorr => build_norm_corr_volume(f_l, f_r, disparities)?,
    };
    Ok(CostVolume { data, scale, kind })
}
