//! Strided 2-D convolution and its transpose, lowered to matrix products via
//! im2col / col2im. Batch items are processed sequentially so the summation
//! order is fixed for a given build.

use super::scalar::{gemm, MatRef};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Geometry of a convolution layer.
///
/// For a forward convolution the weights are `(out_channels, in_channels,
/// kernel_h, kernel_w)`; for a transposed convolution they are
/// `(in_channels, out_channels, kernel_h, kernel_w)`, so that the same weight
/// tensor serves a convolution and its adjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub transposed: bool,
}

impl ConvSpec {
    /// Square kernel, equal stride and padding in both directions.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
            transposed: false,
        }
    }

    /// Transposed counterpart of `new`: maps `in_channels` to `out_channels`
    /// by scattering through the kernel.
    pub fn transposed(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            transposed: true,
            ..Self::new(in_channels, out_channels, kernel, stride, pad)
        }
    }

    /// The same geometry with the channel roles and the `transposed` flag
    /// flipped; an operator and its adjoint share weights under this pairing.
    pub fn adjoint(&self) -> Self {
        ConvSpec {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            transposed: !self.transposed,
            ..*self
        }
    }

    /// Kernel dims cover at least one stride, so neighbouring windows touch
    /// or overlap.
    pub fn is_overlapping(&self) -> bool {
        self.kernel_h >= self.stride_h && self.kernel_w >= self.stride_w
    }

    pub fn weight_shape(&self) -> Shape {
        if self.transposed {
            Shape::new(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w)
        } else {
            Shape::new(self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
        }
    }

    fn check_basic(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::config(format!("degenerate convolution {self:?}")));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::config("convolution stride must be >= 1"));
        }
        Ok(())
    }

    /// Output spatial size for an input of `h x w`.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.check_basic()?;
        if self.transposed {
            let oh = transposed_len(h, self.kernel_h, self.stride_h, self.pad_h)?;
            let ow = transposed_len(w, self.kernel_w, self.stride_w, self.pad_w)?;
            Ok((oh, ow))
        } else {
            let oh = conv_len(h, self.kernel_h, self.stride_h, self.pad_h)?;
            let ow = conv_len(w, self.kernel_w, self.stride_w, self.pad_w)?;
            Ok((oh, ow))
        }
    }
}

fn conv_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < kernel {
        return Err(Error::geometry(format!(
            "input length {len} with padding {pad} is smaller than kernel {kernel}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::geometry(format!(
            "(length {len} + 2*pad {pad} - kernel {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn transposed_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let full = (len - 1) * stride + kernel;
    if full <= 2 * pad {
        return Err(Error::geometry(format!(
            "transposed convolution of length {len} leaves no output after padding {pad}"
        )));
    }
    Ok(full - 2 * pad)
}

/// Geometry of one image plane stack as seen through a convolution window.
/// `h x w` is the "image" side and `oh x ow` the "window grid" side; for a
/// transposed convolution the roles of input and output are swapped.
#[derive(Clone, Copy, Debug)]
struct Lowering {
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Gathers windows of `image` (`channels x h x w`) into a
    /// `(channels*kh*kw) x (oh*ow)` matrix.
    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back onto `image`; adjoint of `im2col`.
    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Validated geometry of a (possibly transposed) convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvPlan {
    pub spec: ConvSpec,
    pub input: Shape,
    pub output: Shape,
    lowering: Lowering,
}

impl ConvPlan {
    pub fn new<T: Scalar>(
        spec: &ConvSpec,
        input: &Tensor<T>,
        weights: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Self> {
        spec.check_basic()?;
        let is = input.shape();
        if is.c != spec.in_channels {
            return Err(Error::shape(format!(
                "input has {} channels, convolution expects {}",
                is.c, spec.in_channels
            )));
        }
        let ws = spec.weight_shape();
        if weights.shape() != ws {
            return Err(Error::shape(format!(
                "weights have shape {}, convolution expects {ws}",
                weights.shape()
            )));
        }
        if let Some(b) = bias {
            if b.numel() != spec.out_channels {
                return Err(Error::shape(format!(
                    "bias has {} elements, convolution has {} output channels",
                    b.numel(),
                    spec.out_channels
                )));
            }
        }
        let (oh, ow) = spec.output_size(is.h, is.w)?;
        let output = Shape::new(is.n, spec.out_channels, oh, ow);
        // The lowered side is always the larger "image" plane.
        let lowering = if spec.transposed {
            Lowering {
                channels: spec.out_channels,
                h: oh,
                w: ow,
                oh: is.h,
                ow: is.w,
                kh: spec.kernel_h,
                kw: spec.kernel_w,
                sh: spec.stride_h,
                sw: spec.stride_w,
                ph: spec.pad_h,
                pw: spec.pad_w,
            }
        } else {
            Lowering {
                channels: spec.in_channels,
                h: is.h,
                w: is.w,
                oh,
                ow,
                kh: spec.kernel_h,
                kw: spec.kernel_w,
                sh: spec.stride_h,
                sw: spec.stride_w,
                ph: spec.pad_h,
                pw: spec.pad_w,
            }
        };
        Ok(ConvPlan {
            spec: *spec,
            input: is,
            output,
            lowering,
        })
    }

    /// Weight matrix as `(C_grid) x (C_image*kh*kw)` where `C_grid` is the
    /// channel count on the window-grid side.
    fn weight_mat<'a, T>(&self, w: &'a [T]) -> MatRef<'a, T> {
        let grid_c = if self.spec.transposed {
            self.spec.in_channels
        } else {
            self.spec.out_channels
        };
        MatRef::new(w, grid_c, self.lowering.rows())
    }

    pub fn forward<T: Scalar>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
        let l = self.lowering;
        let mut out = vec![T::zero(); self.output.numel()];
        let in_per = self.input.c * self.input.plane();
        let out_per = self.output.c * self.output.plane();
        let mut cols = vec![T::zero(); l.rows() * l.cols()];
        let wm = self.weight_mat(w);
        for b in 0..self.input.n {
            let xb = &x[b * in_per..(b + 1) * in_per];
            let ob = &mut out[b * out_per..(b + 1) * out_per];
            if self.spec.transposed {
                // cols = W^T * x, then scatter onto the output plane.
                gemm(wm.t(), MatRef::new(xb, self.input.c, self.input.plane()), T::zero(), &mut cols);
                l.col2im(&cols, ob);
            } else {
                l.im2col(xb, &mut cols);
                gemm(wm, MatRef::new(&cols, l.rows(), l.cols()), T::zero(), ob);
            }
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias, self.output);
        }
        out
    }

    /// Gradient with respect to the input.
    pub fn backward_input<T: Scalar>(&self, dy: &[T], w: &[T]) -> Vec<T> {
        let l = self.lowering;
        let mut dx = vec![T::zero(); self.input.numel()];
        let in_per = self.input.c * self.input.plane();
        let out_per = self.output.c * self.output.plane();
        let mut cols = vec![T::zero(); l.rows() * l.cols()];
        let wm = self.weight_mat(w);
        for b in 0..self.input.n {
            let dyb = &dy[b * out_per..(b + 1) * out_per];
            let dxb = &mut dx[b * in_per..(b + 1) * in_per];
            if self.spec.transposed {
                l.im2col(dyb, &mut cols);
                gemm(wm, MatRef::new(&cols, l.rows(), l.cols()), T::zero(), dxb);
            } else {
                gemm(wm.t(), MatRef::new(dyb, self.output.c, self.output.plane()), T::zero(), &mut cols);
                l.col2im(&cols, dxb);
            }
        }
        dx
    }

    /// Gradient with respect to the weights, summed over the batch.
    pub fn backward_weights<T: Scalar>(&self, x: &[T], dy: &[T]) -> Vec<T> {
        let l = self.lowering;
        let ws = self.spec.weight_shape();
        let mut dw = vec![T::zero(); ws.numel()];
        let in_per = self.input.c * self.input.plane();
        let out_per = self.output.c * self.output.plane();
        let mut cols = vec![T::zero(); l.rows() * l.cols()];
        for b in 0..self.input.n {
            let xb = &x[b * in_per..(b + 1) * in_per];
            let dyb = &dy[b * out_per..(b + 1) * out_per];
            // Grid-side activations times image-side columns, transposed.
            let (grid, image) = if self.spec.transposed { (xb, dyb) } else { (dyb, xb) };
            let grid_c = if self.spec.transposed {
                self.input.c
            } else {
                self.output.c
            };
            l.im2col(image, &mut cols);
            gemm(
                MatRef::new(grid, grid_c, l.cols()),
                MatRef::new(&cols, l.rows(), l.cols()).t(),
                T::one(),
                &mut dw,
            );
        }
        dw
    }

    pub fn backward_bias<T: Scalar>(&self, dy: &[T]) -> Vec<T> {
        let s = self.output;
        let plane = s.plane();
        let mut db = vec![T::zero(); s.c];
        for b in 0..s.n {
            for (c, acc) in db.iter_mut().enumerate() {
                let start = (b * s.c + c) * plane;
                *acc = dy[start..start + plane].iter().fold(*acc, |a, &v| a + v);
            }
        }
        db
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], shape: Shape) {
    let plane = shape.plane();
    for b in 0..shape.n {
        for (c, &bv) in bias.iter().enumerate() {
            let start = (b * shape.c + c) * plane;
            out[start..start + plane].iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

/// Forward convolution outside of any autodiff graph.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    if spec.transposed {
        return Err(Error::Contract("conv2d called with a transposed spec".into()));
    }
    let plan = ConvPlan::new(spec, input, weights, bias)?;
    Ok(Tensor::from_parts(
        plan.output,
        plan.forward(input.data(), weights.data(), bias.map(|b| b.data())),
    ))
}

/// Transposed convolution outside of any autodiff graph.
pub fn conv2d_transposed<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if !spec.transposed {
        return Err(Error::Contract("conv2d_transposed called with a forward spec".into()));
    }
    let plan = ConvPlan::new(spec, input, weights, bias)?;
    Ok(Tensor::from_parts(
        plan.output,
        plan.forward(input.data(), weights.data(), bias.map(|b| b.data())),
    ))
}
