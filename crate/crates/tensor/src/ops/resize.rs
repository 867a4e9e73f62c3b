//! Spatial resampling of `[B, C, H, W]` maps.
//!
//! Bilinear sampling follows the `align_corners = false` convention: output
//! pixel `o` samples source coordinate `(o + 0.5) * in / out - 0.5`, clamped
//! to the valid range.

use crate::element::Element;
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{BackwardCtx, BackwardFn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

/// Per output index, the (source index, weight) taps along one axis.
fn axis_taps(input: usize, output: usize, mode: ResizeMode) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| match mode {
            ResizeMode::Nearest => {
                let i = ((o as f64 * scale).floor() as usize).min(input - 1);
                vec![(i, 1.0)]
            }
            ResizeMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let l = src - i0 as f64;
                if i0 == i1 || l == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - l), (i1, l)]
                }
            }
        })
        .collect()
}

/// Bilinear/nearest taps along one axis, exposed for masks and test oracles.
pub fn resize_taps(input: usize, output: usize, mode: ResizeMode) -> Vec<Vec<(usize, f64)>> {
    axis_taps(input, output, mode)
}

impl<T: Element> Tensor<T> {
    /// Resamples `[B, C, H, W]` to `[B, C, out_h, out_w]`.
    pub fn resize(&self, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor<T>> {
        const OP: &str = "resize";
        let &[b, c, h, w] = self.shape() else {
            return Err(shape_err(OP, format!("expected [B, C, H, W], got {:?}", self.shape())));
        };
        if out_h == 0 || out_w == 0 {
            return Err(arg_err(OP, format!("target size {out_h}x{out_w} must be positive")));
        }
        let rows = axis_taps(h, out_h, mode);
        let cols = axis_taps(w, out_w, mode);
        let x = self.data();
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for p in 0..b * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for rt in &rows {
                for ct in &cols {
                    let mut acc = 0.0;
                    for &(r, wr) in rt {
                        for &(cc, wc) in ct {
                            acc += wr * wc * plane[r * w + cc].as_f64();
                        }
                    }
                    out.push(T::from_f64c(acc));
                }
            }
        }
        let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let mut g = vec![T::zero(); b * c * h * w];
            let mut k = 0;
            for p in 0..b * c {
                let plane = &mut g[p * h * w..(p + 1) * h * w];
                for rt in &rows {
                    for ct in &cols {
                        let up = ctx.grad[k].as_f64();
                        k += 1;
                        for &(r, wr) in rt {
                            for &(cc, wc) in ct {
                                let v = &mut plane[r * w + cc];
                                *v = *v + T::from_f64c(wr * wc * up);
                            }
                        }
                    }
                }
            }
            vec![Some(g)]
        });
        Tensor::from_op(OP, out, &[b, c, out_h, out_w], vec![self.clone()], backward)
    }

    /// Resamples by a positive factor; the target size is `floor(in * scale)`.
    pub fn resize_scale(&self, scale: f64, mode: ResizeMode) -> Result<Tensor<T>> {
        if !(scale > 0.0) {
            return Err(arg_err("resize", format!("scale must be positive, got {scale}")));
        }
        let &[_, _, h, w] = self.shape() else {
            return Err(shape_err("resize", format!("expected [B, C, H, W], got {:?}", self.shape())));
        };
        let oh = (h as f64 * scale).floor() as usize;
        let ow = (w as f64 * scale).floor() as usize;
        self.resize(oh, ow, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_doubles_into_blocks() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = x.resize_scale(2.0, ResizeMode::Nearest).unwrap();
        assert_eq!(
            y.to_f64_vec(),
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 5], 2.5).unwrap();
        for (oh, ow) in [(6, 10), (2, 3), (7, 4)] {
            let y = x.resize(oh, ow, ResizeMode::Bilinear).unwrap();
            assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn bilinear_row_upsample() {
        // src coords for 4 outputs from 2 inputs: -0.25 (clamped), 0.25, 0.75, 1.25
        let x = Tensor::<f64>::from_f64(&[0.0, 1.0], &[1, 1, 1, 2]).unwrap();
        let y = x.resize_scale(2.0, ResizeMode::Bilinear).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        let row = [0.0, 0.25, 0.75, 1.0];
        for (i, v) in y.to_f64_vec().iter().enumerate() {
            assert!((v - row[i % 4]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_empty_target() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(x.resize(0, 2, ResizeMode::Bilinear).is_err());
        assert!(x.resize_scale(0.1, ResizeMode::Nearest).is_err());
        assert!(x.resize_scale(-1.0, ResizeMode::Nearest).is_err());
    }
}
