//! Pure data-movement ops: permutations, slicing and concatenation.

use crate::element::Element;
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{BackwardCtx, BackwardFn, Tensor};

/// `out[i] = input[src[i]]` where `src` is a permutation; the gradient is the
/// inverse permutation.
fn permute<T: Element>(name: &'static str, x: &Tensor<T>, src: Vec<usize>, shape: &[usize]) -> Result<Tensor<T>> {
    let xd = x.data();
    let data = src.iter().map(|&i| xd[i]).collect();
    let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
        let mut g = vec![T::zero(); ctx.grad.len()];
        for (o, &i) in src.iter().enumerate() {
            g[i] = ctx.grad[o];
        }
        vec![Some(g)]
    });
    Tensor::from_op(name, data, shape, vec![x.clone()], backward)
}

fn rank4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(shape_err(op, format!("expected [B, C, H, W], got {shape:?}"))),
    }
}

impl<T: Element> Tensor<T> {
    /// `[B, C·r², H, W] -> [B, C, H·r, W·r]`; channel `c·r² + i·r + j` lands at
    /// sub-pixel offset `(i, j)`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        const OP: &str = "pixel_shuffle";
        let [b, cr, h, w] = rank4(OP, self.shape())?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(shape_err(OP, format!("channel axis: {cr} not divisible by r²={}", r * r)));
        }
        let c = cr / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut src = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let ch = ci * r * r + (y % r) * r + (x % r);
                        src.push(((bi * cr + ch) * h + y / r) * w + x / r);
                    }
                }
            }
        }
        permute(OP, self, src, &[b, c, oh, ow])
    }

    /// Inverse of [`Tensor::pixel_shuffle`]: `[B, C, H·r, W·r] -> [B, C·r², H, W]`.
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        const OP: &str = "pixel_unshuffle";
        let [b, c, oh, ow] = rank4(OP, self.shape())?;
        if r == 0 || oh % r != 0 || ow % r != 0 {
            return Err(shape_err(OP, format!("spatial axes {oh}x{ow} not divisible by r={r}")));
        }
        let (h, w, cr) = (oh / r, ow / r, c * r * r);
        let mut src = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for ch in 0..cr {
                let (ci, i, j) = (ch / (r * r), (ch / r) % r, ch % r);
                for y in 0..h {
                    for x in 0..w {
                        src.push(((bi * c + ci) * oh + y * r + i) * ow + x * r + j);
                    }
                }
            }
        }
        permute(OP, self, src, &[b, cr, h, w])
    }

    /// Reshape channels to `(groups, C/groups)`, transpose, flatten.
    pub fn channel_shuffle(&self, groups: usize) -> Result<Tensor<T>> {
        const OP: &str = "channel_shuffle";
        let [b, c, h, w] = rank4(OP, self.shape())?;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err(OP, format!("channel axis: {c} not divisible by groups={groups}")));
        }
        let per = c / groups;
        let plane = h * w;
        let mut src = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for oc in 0..c {
                // output channel oc = j * groups + g reads input channel g * per + j
                let (j, g) = (oc / groups, oc % groups);
                let ic = g * per + j;
                let base = (bi * c + ic) * plane;
                src.extend(base..base + plane);
            }
        }
        permute(OP, self, src, &[b, c, h, w])
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        const OP: &str = "narrow";
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(arg_err(OP, format!("axis {axis} out of range for {shape:?}")));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err(OP, format!("axis {axis}: range {start}..{} exceeds length {}", start + len, shape[axis])));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let xd = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&xd[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let mut g = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                g[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        });
        Tensor::from_op(OP, data, &out_shape, vec![self.clone()], backward)
    }

    /// Splits channels (axis 1) into `[0, at)` and `[at, C)`.
    pub fn split_channels(&self, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        if self.rank() < 2 {
            return Err(shape_err("split_channels", format!("need a channel axis, got {:?}", self.shape())));
        }
        let c = self.shape()[1];
        if at == 0 || at >= c {
            return Err(shape_err("split_channels", format!("channel axis: split point {at} must lie in 1..{c}")));
        }
        Ok((self.narrow(1, 0, at)?, self.narrow(1, at, c - at)?))
    }

    /// Concatenates along `axis`; every other axis must agree.
    pub fn concat(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        const OP: &str = "concat";
        let first = tensors.first().ok_or_else(|| arg_err(OP, "no tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(arg_err(OP, format!("axis {axis} out of range for rank {rank}")));
        }
        for t in tensors {
            if t.rank() != rank {
                return Err(shape_err(OP, format!("rank mismatch: {:?} vs {:?}", first.shape(), t.shape())));
            }
            for ax in (0..rank).filter(|&a| a != axis) {
                if t.shape()[ax] != first.shape()[ax] {
                    return Err(shape_err(OP, format!("axis {ax}: {:?} vs {:?}", first.shape(), t.shape())));
                }
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &l) in tensors.iter().zip(&lens) {
                data.extend_from_slice(&t.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &l) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&ctx.grad[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        });
        Tensor::from_op(OP, data, &out_shape, tensors.to_vec(), backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn pixel_shuffle_definition() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 4, 1, 1]);
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_f64_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(t(&[1.0; 6], &[1, 6, 1, 1]).pixel_shuffle(2).is_err());
    }

    #[test]
    fn channel_shuffle_order() {
        let x = t(&[0.0, 1.0, 2.0, 3.0], &[1, 4, 1, 1]);
        let y = x.channel_shuffle(2).unwrap();
        assert_eq!(y.to_f64_vec(), vec![0.0, 2.0, 1.0, 3.0]);
        assert!(x.channel_shuffle(3).is_err());
    }

    #[test]
    fn split_concat_round_trip() {
        let x = t(&(0..16).map(f64::from).collect::<Vec<_>>(), &[1, 4, 2, 2]);
        let (a, b) = x.split_channels(2).unwrap();
        assert_eq!(a.shape(), &[1, 2, 2, 2]);
        assert_eq!(b.shape(), &[1, 2, 2, 2]);
        let y = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn concat_volumes_along_disparity() {
        let a = Tensor::<f64>::zeros(&[1, 1, 2, 4, 4]).unwrap();
        let b = Tensor::<f64>::full(&[1, 1, 2, 4, 4], 1.0).unwrap();
        let y = Tensor::concat(&[a, b.clone()], 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
        let c = Tensor::<f64>::zeros(&[1, 2, 2, 4, 4]).unwrap();
        assert!(Tensor::concat(&[b, c], 2).is_err());
    }
}
