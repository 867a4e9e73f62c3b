//! 2D/3D convolution and transposed convolution via im2col + GEMM.
//!
//! Convolution uses cross-correlation semantics (the kernel is not flipped).
//! 2D tensors run through the 3D path with a unit depth axis.

use crate::element::Element;
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{BackwardCtx, BackwardFn, Tensor};

/// Hyper-parameters of a convolution. Stride and padding apply to every
/// spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub dims: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(dims: usize) -> Self {
        ConvSpec { dims, stride: 1, padding: 0, groups: 1 }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Hyper-parameters of a transposed convolution. `output_padding` (< stride)
/// extends the trailing edge of each spatial axis so an upsampled map can
/// match a skip connection; entries are `[depth, height, width]`, the depth
/// entry is ignored for 2D.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvSpec {
    pub dims: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: [usize; 3],
}

impl DeconvSpec {
    pub fn new(dims: usize) -> Self {
        DeconvSpec { dims, stride: 1, padding: 0, output_padding: [0; 3] }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Same output padding on every spatial axis.
    pub fn output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = [output_padding; 3];
        self
    }

    /// Per-axis output padding for the trailing `dims` spatial axes.
    pub fn output_padding_axes(mut self, pads: &[usize]) -> Self {
        let mut op = [0; 3];
        op[3 - pads.len()..].copy_from_slice(pads);
        self.output_padding = op;
        self
    }
}

/// Output length of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = (input + 2 * padding).checked_sub(kernel)?;
    Some(span / stride + 1)
}

/// Output length of a transposed convolution along one axis.
pub fn deconv_out_len(input: usize, kernel: usize, stride: usize, padding: usize, output_padding: usize) -> Option<usize> {
    ((input - 1) * stride + kernel + output_padding).checked_sub(2 * padding).filter(|&n| n > 0)
}

/// Geometry of a (forward) convolution from `input` to `output` spatial size.
#[derive(Clone, Debug)]
struct Geometry {
    batch: usize,
    /// Channels on the im2col (input) side.
    c_in: usize,
    /// Channels on the GEMM (output) side.
    c_out: usize,
    groups: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Geometry {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn c_in_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn c_out_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of the column matrix for one group.
    fn col_rows(&self) -> usize {
        self.c_in_g() * self.k_vol()
    }

    /// `src` holds `c_in_g` channels of one batch item; writes the
    /// `[c_in_g * k_vol, out_plane]` column matrix into `col`.
    fn im2col<T: Element>(&self, src: &[T], col: &mut [T]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let plane = self.in_plane();
        let opl = self.out_plane();
        let mut row = 0;
        for c in 0..self.c_in_g() {
            let chan = &src[c * plane..(c + 1) * plane];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dst = &mut col[row * opl..(row + 1) * opl];
                        let mut o = 0;
                        for oz in 0..od {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            for oy in 0..oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let line = &mut dst[o..o + ow];
                                o += ow;
                                if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                    line.fill(T::zero());
                                    continue;
                                }
                                let base = (iz as usize * ih + iy as usize) * iw;
                                for (ox, v) in line.iter_mut().enumerate() {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    *v = if ix < 0 || ix >= iw as isize { T::zero() } else { chan[base + ix as usize] };
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters-adds `col` into `dst` (`c_in_g` channels).
    fn col2im<T: Element>(&self, col: &[T], dst: &mut [T]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let plane = self.in_plane();
        let opl = self.out_plane();
        let mut row = 0;
        for c in 0..self.c_in_g() {
            let chan = &mut dst[c * plane..(c + 1) * plane];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let src = &col[row * opl..(row + 1) * opl];
                        let mut o = 0;
                        for oz in 0..od {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            for oy in 0..oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let line = &src[o..o + ow];
                                o += ow;
                                if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let base = (iz as usize * ih + iy as usize) * iw;
                                for (ox, &v) in line.iter().enumerate() {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if ix >= 0 && ix < iw as isize {
                                        chan[base + ix as usize] = chan[base + ix as usize] + v;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// out[b] = W · im2col(x[b]) for each group. `x` is the im2col side,
    /// `out` the GEMM side.
    fn forward<T: Element>(&self, x: &[T], w: &[T], out: &mut [T]) {
        let (cig, cog, opl, rows) = (self.c_in_g(), self.c_out_g(), self.out_plane(), self.col_rows());
        let mut col = vec![T::zero(); rows * opl];
        for b in 0..self.batch {
            for g in 0..self.groups {
                let xs = &x[(b * self.c_in + g * cig) * self.in_plane()..][..cig * self.in_plane()];
                self.im2col(xs, &mut col);
                let wg = &w[g * cog * rows..(g + 1) * cog * rows];
                let os = &mut out[(b * self.c_out + g * cog) * opl..][..cog * opl];
                T::gemm(cog, rows, opl, T::one(), wg, &col, T::zero(), os);
            }
        }
    }

    /// dx[b] += col2im(Wᵀ · gy[b]): the adjoint of `forward` in `x`.
    fn adjoint<T: Element>(&self, gy: &[T], w: &[T], dx: &mut [T]) {
        let (cig, cog, opl, rows) = (self.c_in_g(), self.c_out_g(), self.out_plane(), self.col_rows());
        let mut col = vec![T::zero(); rows * opl];
        for b in 0..self.batch {
            for g in 0..self.groups {
                let wg = &w[g * cog * rows..(g + 1) * cog * rows];
                let gs = &gy[(b * self.c_out + g * cog) * opl..][..cog * opl];
                T::gemm_tn(rows, cog, opl, T::one(), wg, gs, T::zero(), &mut col);
                let ds = &mut dx[(b * self.c_in + g * cig) * self.in_plane()..][..cig * self.in_plane()];
                self.col2im(&col, ds);
            }
        }
    }

    /// dW += gy[b] · im2col(x[b])ᵀ.
    fn weight_grad<T: Element>(&self, x: &[T], gy: &[T], dw: &mut [T]) {
        let (cig, cog, opl, rows) = (self.c_in_g(), self.c_out_g(), self.out_plane(), self.col_rows());
        let mut col = vec![T::zero(); rows * opl];
        for b in 0..self.batch {
            for g in 0..self.groups {
                let xs = &x[(b * self.c_in + g * cig) * self.in_plane()..][..cig * self.in_plane()];
                self.im2col(xs, &mut col);
                let gs = &gy[(b * self.c_out + g * cog) * opl..][..cog * opl];
                let dwg = &mut dw[g * cog * rows..(g + 1) * cog * rows];
                T::gemm_nt(cog, opl, rows, T::one(), gs, &col, T::one(), dwg);
            }
        }
    }
}

fn spatial3(op: &'static str, dims: usize, shape: &[usize], what: &str) -> Result<[usize; 3]> {
    let s = &shape[shape.len() - dims..];
    match dims {
        2 => Ok([1, s[0], s[1]]),
        3 => Ok([s[0], s[1], s[2]]),
        _ => Err(arg_err(op, format!("{what}: dims must be 2 or 3, got {dims}"))),
    }
}

fn lift(dims: usize, v: usize, unit: usize) -> [usize; 3] {
    if dims == 2 {
        [unit, v, v]
    } else {
        [v, v, v]
    }
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], batch: usize, channels: usize, plane: usize) {
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate().take(channels) {
            out[(b * channels + c) * plane..][..plane].iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn bias_grad<T: Element>(gy: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut g = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = *gc + gy[(b * channels + c) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    g
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(shape_err(op, format!("bias shape {:?}, expected [{channels}]", b.shape())));
        }
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    /// Cross-correlation of `self: [B, C_in, *spatial]` with
    /// `weight: [C_out, C_in / groups, *kernel]`.
    pub fn conv(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
        const OP: &str = "conv";
        let ConvSpec { dims, stride, padding, groups } = spec;
        if dims != 2 && dims != 3 {
            return Err(arg_err(OP, format!("dims must be 2 or 3, got {dims}")));
        }
        if stride == 0 || groups == 0 {
            return Err(arg_err(OP, "stride and groups must be positive"));
        }
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != dims + 2 {
            return Err(shape_err(OP, format!("input rank {} but dims={dims} needs rank {} (shape {xs:?})", xs.len(), dims + 2)));
        }
        if ws.len() != dims + 2 {
            return Err(shape_err(OP, format!("weight rank {} but dims={dims} needs rank {} (shape {ws:?})", ws.len(), dims + 2)));
        }
        let (batch, c_in, c_out) = (xs[0], xs[1], ws[0]);
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(shape_err(OP, format!("channel axis: C_in={c_in}, C_out={c_out} not divisible by groups={groups}")));
        }
        if ws[1] != c_in / groups {
            return Err(shape_err(OP, format!("channel axis: weight expects {} input channels per group, input has {c_in}/{groups}", ws[1])));
        }
        check_bias(OP, bias, c_out)?;
        let input = spatial3(OP, dims, xs, "input")?;
        let kernel = spatial3(OP, dims, ws, "kernel")?;
        let stride3 = lift(dims, stride, 1);
        let pad3 = lift(dims, padding, 0);
        let mut output = [0; 3];
        for ax in 0..3 {
            output[ax] = conv_out_len(input[ax], kernel[ax], stride3[ax], pad3[ax]).ok_or_else(|| {
                shape_err(OP, format!("spatial axis {}: kernel {} exceeds padded input {}", ax + 3 - dims, kernel[ax], input[ax] + 2 * pad3[ax]))
            })?;
        }
        let geo = Geometry { batch, c_in, c_out, groups, input, kernel, output, stride: stride3, pad: pad3 };
        let mut out = vec![T::zero(); batch * c_out * geo.out_plane()];
        geo.forward(self.data(), weight.data(), &mut out);
        if let Some(b) = bias {
            add_bias(&mut out, b.data(), batch, c_out, geo.out_plane());
        }
        let mut out_shape = vec![batch, c_out];
        out_shape.extend_from_slice(&output[3 - dims..]);

        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (x, w) = (&ctx.inputs[0], &ctx.inputs[1]);
            let gx = x.requires_grad().then(|| {
                let mut dx = vec![T::zero(); x.numel()];
                geo.adjoint(ctx.grad, w.data(), &mut dx);
                dx
            });
            let gw = w.requires_grad().then(|| {
                let mut dw = vec![T::zero(); w.numel()];
                geo.weight_grad(x.data(), ctx.grad, &mut dw);
                dw
            });
            let mut grads = vec![gx, gw];
            if let Some(b) = ctx.inputs.get(2) {
                grads.push(b.requires_grad().then(|| bias_grad(ctx.grad, geo.batch, geo.c_out, geo.out_plane())));
            }
            grads
        });
        Tensor::from_op(OP, out, &out_shape, inputs, backward)
    }

    /// Transposed convolution of `self: [B, C_in, *spatial]` with
    /// `weight: [C_in, C_out, *kernel]`; the adjoint of `conv` with the same
    /// weight, stride and padding.
    pub fn deconv(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: DeconvSpec) -> Result<Tensor<T>> {
        const OP: &str = "deconv";
        let DeconvSpec { dims, stride, padding, output_padding } = spec;
        if dims != 2 && dims != 3 {
            return Err(arg_err(OP, format!("dims must be 2 or 3, got {dims}")));
        }
        if stride == 0 {
            return Err(arg_err(OP, "stride must be positive"));
        }
        let op3 = if dims == 2 { [0, output_padding[1], output_padding[2]] } else { output_padding };
        if op3.iter().any(|&p| p >= stride) {
            return Err(arg_err(OP, format!("output_padding {op3:?} must be smaller than stride {stride}")));
        }
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != dims + 2 {
            return Err(shape_err(OP, format!("input rank {} but dims={dims} needs rank {} (shape {xs:?})", xs.len(), dims + 2)));
        }
        if ws.len() != dims + 2 {
            return Err(shape_err(OP, format!("weight rank {} but dims={dims} needs rank {} (shape {ws:?})", ws.len(), dims + 2)));
        }
        let (batch, c_in, c_out) = (xs[0], xs[1], ws[1]);
        if ws[0] != c_in {
            return Err(shape_err(OP, format!("channel axis: weight expects {} input channels, input has {c_in}", ws[0])));
        }
        check_bias(OP, bias, c_out)?;
        let small = spatial3(OP, dims, xs, "input")?;
        let kernel = spatial3(OP, dims, ws, "kernel")?;
        let stride3 = lift(dims, stride, 1);
        let pad3 = lift(dims, padding, 0);
        let mut large = [0; 3];
        for ax in 0..3 {
            large[ax] = deconv_out_len(small[ax], kernel[ax], stride3[ax], pad3[ax], op3[ax])
                .ok_or_else(|| shape_err(OP, format!("spatial axis {}: output would be empty", ax + 3 - dims)))?;
        }
        // The conv this deconv is the adjoint of: large -> small.
        let geo = Geometry { batch, c_in: c_out, c_out: c_in, groups: 1, input: large, kernel, output: small, stride: stride3, pad: pad3 };
        let mut out = vec![T::zero(); batch * c_out * geo.in_plane()];
        geo.adjoint(self.data(), weight.data(), &mut out);
        if let Some(b) = bias {
            add_bias(&mut out, b.data(), batch, c_out, geo.in_plane());
        }
        let mut out_shape = vec![batch, c_out];
        out_shape.extend_from_slice(&large[3 - dims..]);

        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (x, w) = (&ctx.inputs[0], &ctx.inputs[1]);
            let gx = x.requires_grad().then(|| {
                let mut dx = vec![T::zero(); x.numel()];
                geo.forward(ctx.grad, w.data(), &mut dx);
                dx
            });
            let gw = w.requires_grad().then(|| {
                let mut dw = vec![T::zero(); w.numel()];
                geo.weight_grad(ctx.grad, x.data(), &mut dw);
                dw
            });
            let mut grads = vec![gx, gw];
            if let Some(b) = ctx.inputs.get(2) {
                grads.push(b.requires_grad().then(|| bias_grad(ctx.grad, geo.batch, geo.c_in, geo.in_plane())));
            }
            grads
        });
        Tensor::from_op(OP, out, &out_shape, inputs, backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let w = t(&[1.0], &[1, 1, 1, 1]);
        let y = x.conv(&w, None, ConvSpec::new(2)).unwrap();
        assert_eq!(y.to_f64_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sum_kernel() {
        let x = t(&[1.0; 9], &[1, 1, 3, 3]);
        let w = t(&[1.0; 9], &[1, 1, 3, 3]);
        let y = x.conv(&w, None, ConvSpec::new(2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn output_size_formula() {
        let x = Tensor::<f64>::zeros(&[1, 1, 7, 8]).unwrap();
        let w = Tensor::<f64>::zeros(&[2, 1, 3, 3]).unwrap();
        let y = x.conv(&w, None, ConvSpec::new(2).stride(2).padding(1)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
    }

    #[test]
    fn deconv_stamps_blocks() {
        let x = t(&[1.0; 4], &[1, 1, 2, 2]);
        let w = t(&[1.0; 4], &[1, 1, 2, 2]);
        let y = x.deconv(&w, None, DeconvSpec::new(2).stride(2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deconv_output_length() {
        assert_eq!(deconv_out_len(4, 3, 2, 1, 0), Some(7));
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]).unwrap();
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]).unwrap();
        let y = x.deconv(&w, None, DeconvSpec::new(2).stride(2).padding(1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 7, 7]);
        let y = x.deconv(&w, None, DeconvSpec::new(2).stride(2).padding(1).output_padding(1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn errors_name_the_axis() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]).unwrap();
        let w = Tensor::<f64>::zeros(&[2, 2, 3, 3]).unwrap();
        let e = x.conv(&w, None, ConvSpec::new(2)).unwrap_err().to_string();
        assert!(e.contains("channel axis"), "{e}");
        let w = Tensor::<f64>::zeros(&[2, 3, 5, 5]).unwrap();
        let e = x.conv(&w, None, ConvSpec::new(2)).unwrap_err().to_string();
        assert!(e.contains("spatial axis"), "{e}");
        let e = x.conv(&w, None, ConvSpec::new(3)).unwrap_err().to_string();
        assert!(e.contains("rank"), "{e}");
        let w = Tensor::<f64>::zeros(&[4, 1, 3, 3]).unwrap();
        assert!(x.conv(&w, None, ConvSpec::new(2).groups(2)).is_err());
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = t(&[1.0, 2.0], &[1, 1, 1, 2]);
        let w = t(&[1.0, 2.0], &[2, 1, 1, 1]);
        let b = t(&[10.0, 20.0], &[2]);
        let y = x.conv(&w, Some(&b), ConvSpec::new(2)).unwrap();
        assert_eq!(y.to_f64_vec(), vec![11.0, 12.0, 22.0, 24.0]);
    }
}
