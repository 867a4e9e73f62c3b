use crate::element::Element;
use crate::error::{arg_err, Result};
use crate::tensor::{BackwardCtx, BackwardFn, Tensor};

/// `(outer, len, inner)` factorization of a shape around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Element> Tensor<T> {
    /// Softmax along `axis`, computed after subtracting the per-slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(arg_err("softmax", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, len, inner) = around(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| x[at(a)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (x[at(a)] - max).exp();
                    out[at(a)] = e;
                    total = total + e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / total;
                }
            }
        }
        let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (y, gy) = (ctx.output, ctx.grad);
            let mut g = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: T = (0..len).map(|a| gy[at(a)] * y[at(a)]).sum();
                    for a in 0..len {
                        g[at(a)] = y[at(a)] * (gy[at(a)] - dot);
                    }
                }
            }
            vec![Some(g)]
        });
        Tensor::from_op("softmax", out, self.shape(), vec![self.clone()], backward)
    }

    /// The `k` largest entries along `axis`, sorted descending; ties go to the
    /// lowest index. Returns the values (differentiable, axis length `k`) and
    /// their source indices along `axis` in the same layout.
    pub fn topk(&self, axis: usize, k: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        if axis >= self.rank() {
            return Err(arg_err("topk", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, len, inner) = around(self.shape(), axis);
        if k == 0 || k > len {
            return Err(arg_err("topk", format!("k={k} must lie in 1..={len}")));
        }
        let x = self.data();
        let mut values = vec![T::zero(); outer * k * inner];
        let mut indices = vec![0usize; outer * k * inner];
        let mut order: Vec<usize> = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                order.clear();
                order.extend(0..len);
                let at = |a: usize| (o * len + a) * inner + i;
                // stable sort keeps lower indices first among equal values
                order.sort_by(|&p, &q| x[at(q)].partial_cmp(&x[at(p)]).unwrap_or(std::cmp::Ordering::Equal));
                for (r, &a) in order.iter().take(k).enumerate() {
                    let dst = (o * k + r) * inner + i;
                    values[dst] = x[at(a)];
                    indices[dst] = a;
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = k;
        let idx = indices.clone();
        let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let mut g = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for r in 0..k {
                    for i in 0..inner {
                        let src = (o * k + r) * inner + i;
                        let dst = (o * len + idx[src]) * inner + i;
                        g[dst] = g[dst] + ctx.grad[src];
                    }
                }
            }
            vec![Some(g)]
        });
        let values = Tensor::from_op("topk", values, &out_shape, vec![self.clone()], backward)?;
        Ok((values, indices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_and_stable() {
        let x = Tensor::<f64>::from_f64(&[0.0, 0.0], &[2]).unwrap();
        assert_eq!(x.softmax(0).unwrap().to_f64_vec(), vec![0.5, 0.5]);
        let x = Tensor::<f64>::from_f64(&[1000.0, 0.0], &[2]).unwrap();
        let y = x.softmax(0).unwrap().to_f64_vec();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 1.0).abs() < 1e-12 && y[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::from_f64(&[1.0, -2.0, 0.5, 3.0, 3.0, -1.0], &[2, 3]).unwrap();
        let y = x.softmax(1).unwrap().to_f64_vec();
        assert!((y[0] + y[1] + y[2] - 1.0).abs() < 1e-12);
        assert!((y[3] + y[4] + y[5] - 1.0).abs() < 1e-12);
        let y0 = x.softmax(0).unwrap().to_f64_vec();
        assert!((y0[0] + y0[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_values_and_indices() {
        let x = Tensor::<f64>::from_f64(&[1.0, 5.0, 3.0], &[3]).unwrap();
        let (v, i) = x.topk(0, 2).unwrap();
        assert_eq!(v.to_f64_vec(), vec![5.0, 3.0]);
        assert_eq!(i, vec![1, 2]);
        assert!(x.topk(0, 4).is_err());
        assert!(x.topk(0, 0).is_err());
    }

    #[test]
    fn topk_ties_prefer_lowest_index() {
        let x = Tensor::<f64>::from_f64(&[2.0, 7.0, 7.0, 7.0], &[4]).unwrap();
        let (_, i) = x.topk(0, 2).unwrap();
        assert_eq!(i, vec![1, 2]);
    }
}
