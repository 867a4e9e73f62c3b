//! Broadcasting arithmetic, activations and reductions.
//!
//! Broadcasting only stretches singleton axes of tensors of equal rank.

use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::tensor::{BackwardCtx, BackwardFn, Tensor};

/// `sqrt(2/pi)`, the tanh-GELU input scale.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, format!("rank {} vs rank {} ({a:?} vs {b:?})", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, format!("axis {axis}: {x} vs {y} ({a:?} vs {b:?})"))),
        })
        .collect()
}

/// For every output element, the flat index into an input of `shape`
/// broadcast to `out_shape`.
fn broadcast_index(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    if shape == out_shape {
        return (0..n).collect();
    }
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if shape[ax] == 1 { 0 } else { s };
        s *= shape[ax];
    }
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(n);
    let mut flat = 0usize;
    for _ in 0..n {
        out.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, kind: BinOp) -> Result<Tensor<T>> {
    let name = match kind {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
        BinOp::Div => "div",
    };
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let ia = broadcast_index(a.shape(), &out_shape);
    let ib = broadcast_index(b.shape(), &out_shape);
    let (da, db) = (a.data(), b.data());
    let data: Vec<T> = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| match kind {
            BinOp::Add => da[i] + db[j],
            BinOp::Sub => da[i] - db[j],
            BinOp::Mul => da[i] * db[j],
            BinOp::Div => da[i] / db[j],
        })
        .collect();
    let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
        let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
        let (da, db) = (a.data(), b.data());
        let ga = a.requires_grad().then(|| {
            let mut g = vec![T::zero(); a.numel()];
            for (k, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                let up = ctx.grad[k];
                g[i] = g[i]
                    + match kind {
                        BinOp::Add | BinOp::Sub => up,
                        BinOp::Mul => up * db[j],
                        BinOp::Div => up / db[j],
                    };
            }
            g
        });
        let gb = b.requires_grad().then(|| {
            let mut g = vec![T::zero(); b.numel()];
            for (k, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                let up = ctx.grad[k];
                g[j] = g[j]
                    + match kind {
                        BinOp::Add => up,
                        BinOp::Sub => -up,
                        BinOp::Mul => up * da[i],
                        BinOp::Div => -up * da[i] / (db[j] * db[j]),
                    };
            }
            g
        });
        vec![ga, gb]
    });
    Tensor::from_op(name, data, &out_shape, vec![a.clone(), b.clone()], backward)
}

fn gelu_fwd(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Div)
    }

    /// Elementwise map with a caller-supplied derivative `df(x, y)`, where
    /// `y = f(x)`.
    pub fn unary<F, D>(&self, name: &'static str, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let x = ctx.inputs[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x)
                .zip(ctx.output)
                .map(|((&up, &x), &y)| up * df(x, y))
                .collect();
            vec![Some(g)]
        });
        Tensor::from_op(name, data, self.shape(), vec![self.clone()], backward).expect("same shape")
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64c(s);
        self.unary("mul_scalar", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64c(s);
        self.unary("add_scalar", move |x| x + s, |_, _| T::one())
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary("abs", |x| x.abs(), |x, _| if x < T::zero() { -T::one() } else { T::one() })
    }

    /// tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor<T> {
        self.unary(
            "gelu",
            |x| T::from_f64c(gelu_fwd(x.as_f64())),
            |x, _| T::from_f64c(gelu_grad(x.as_f64())),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let s = T::from_f64c(slope);
        self.unary(
            "leaky_relu",
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::from_f64c(lo), T::from_f64c(hi));
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| if x < lo || x > hi { T::zero() } else { T::one() },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.numel();
        let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| vec![Some(vec![ctx.grad[0]; n])]);
        Tensor::from_op("sum", vec![total], &[1], vec![self.clone()], backward).expect("scalar")
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum along `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &s)| s).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let mut g = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    g[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(g)]
        });
        Tensor::from_op("sum_axis", data, &out_shape, vec![self.clone()], backward)
    }

    /// Inner product of all elements with `other`, shape `[1]`.
    pub fn dot(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(shape_err("dot", format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(self.mul(other)?.sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn gelu_reference_points() {
        let x = t(&[0.0, 10.0], &[2]).gelu();
        assert_eq!(x.data()[0], 0.0);
        assert!((x.data()[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        let eps = 1e-6;
        let num = (gelu_fwd(0.5 + eps) - gelu_fwd(0.5 - eps)) / (2.0 * eps);
        let x = Tensor::<f64>::param(vec![0.5], &[1]).unwrap();
        x.gelu().sum().backward().unwrap();
        let ana = x.grad().unwrap()[0];
        assert!(((ana - num) / num).abs() <= 1e-4, "{ana} vs {num}");
    }

    #[test]
    fn broadcasting_over_singleton_axes() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0], &[2, 1]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_f64_vec(), vec![11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let r = t(&[1.0, 0.0, -1.0], &[1, 3]);
        let d = b.mul(&r).unwrap();
        assert_eq!(d.to_f64_vec(), vec![10.0, 0.0, -10.0, 20.0, 0.0, -20.0]);
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let a = t(&[1.0; 6], &[2, 3]);
        let b = t(&[1.0; 4], &[2, 2]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
        assert!(a.add(&t(&[1.0; 6], &[6])).is_err());
    }

    #[test]
    fn broadcast_gradient_sums_over_stretched_axes() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::<f64>::param(vec![10.0, 20.0], &[2, 1]).unwrap();
        a.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![6.0, 15.0]);
        assert_eq!(a.grad().unwrap(), vec![10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn sum_axis_and_gradient() {
        let a = Tensor::<f64>::param((1..=6).map(f64::from).collect(), &[2, 3]).unwrap();
        let s = a.sum_axis(1).unwrap();
        assert_eq!(s.to_f64_vec(), vec![6.0, 15.0]);
        let w = t(&[1.0, 2.0], &[2]);
        s.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let s0 = a.sum_axis(0).unwrap();
        assert_eq!(s0.to_f64_vec(), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn activations() {
        let x = t(&[-2.0, 0.0, 3.0], &[3]);
        assert_eq!(x.leaky_relu(0.1).to_f64_vec(), vec![-0.2, 0.0, 3.0]);
        let s = x.sigmoid().to_f64_vec();
        assert!((s[1] - 0.5).abs() < 1e-15);
        assert_eq!(x.clamp(-1.0, 1.0).to_f64_vec(), vec![-1.0, 0.0, 1.0]);
    }
}
