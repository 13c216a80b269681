//! 2D convolution and transposed convolution on `[C, H, W]` tensors via
//! im2col and a single matrix product.

use super::gemm::{gemm, Layout};
use super::graph::{BackwardCtx, Graph, Op, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of a cross-correlation from an `h x w` image to `oh x ow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output extent of a convolution, `floor((n + 2p - k) / s) + 1`.
    pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        if k == 0 || stride == 0 || n + 2 * pad < k {
            return None;
        }
        Some((n + 2 * pad - k) / stride + 1)
    }

    /// Output extent of a transposed convolution, `(n - 1) s - 2p + k`.
    pub fn deconv_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        if n == 0 || k == 0 || stride == 0 {
            return None;
        }
        ((n - 1) * stride + k).checked_sub(2 * pad).filter(|&o| o >= 1)
    }

    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<R: Real>(x: &[R], g: &ConvGeom) -> Vec<R> {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let mut col = vec![R::zero(); g.rows() * g.cols()];
    for c in 0..g.channels {
        let img = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &img[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<R: Real>(col: &[R], g: &ConvGeom, out: &mut [R]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    for c in 0..g.channels {
        let img = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. Kernel layout `[C_out, C_in, k, k]`.
struct Conv2d {
    stride: usize,
    pad: usize,
}

fn conv_geom<R: Real>(op: &'static str, x: &Tensor<R>, kernel: &Tensor<R>, stride: usize, pad: usize, transposed: bool) -> Result<(ConvGeom, usize)> {
    let &[cx, h, w] = x.shape() else {
        return Err(Error::shape(op, format!("input must be [C,H,W], got {:?}", x.shape())));
    };
    let &[k0, k1, kh, kw] = kernel.shape() else {
        return Err(Error::shape(op, format!("kernel must be 4-d, got {:?}", kernel.shape())));
    };
    if kh != kw {
        return Err(Error::shape(op, format!("square kernels only, got {kh}x{kw}")));
    }
    let (c_in, c_out) = if transposed { (k0, k1) } else { (k1, k0) };
    if c_in != cx {
        return Err(Error::shape(op, format!("input has {cx} channels, kernel expects {c_in}")));
    }
    if transposed {
        let oh = ConvGeom::deconv_out(h, kh, stride, pad);
        let ow = ConvGeom::deconv_out(w, kh, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Geometry { op, detail: format!("{h}x{w} with k={kh} s={stride} p={pad}") });
        };
        // The geometry of the adjoint convolution: output image -> input grid.
        Ok((ConvGeom { channels: c_out, h: oh, w: ow, k: kh, stride, pad, oh: h, ow: w }, c_out))
    } else {
        let oh = ConvGeom::conv_out(h, kh, stride, pad);
        let ow = ConvGeom::conv_out(w, kh, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Geometry { op, detail: format!("{h}x{w} with k={kh} s={stride} p={pad}") });
        };
        Ok((ConvGeom { channels: c_in, h, w, k: kh, stride, pad, oh, ow }, c_out))
    }
}

impl<R: Real> Op<R> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let (g, c_out) = conv_geom("conv2d", x, kernel, self.stride, self.pad, false)?;
        let col = im2col(x.data(), &g);
        let mut out = vec![R::zero(); c_out * g.cols()];
        gemm(
            R::one(),
            kernel.data(),
            Layout::row_major(c_out, g.rows()),
            &col,
            Layout::row_major(g.rows(), g.cols()),
            R::zero(),
            &mut out,
            Layout::row_major(c_out, g.cols()),
        );
        Tensor::new([c_out, g.oh, g.ow], out)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Result<Vec<Option<Vec<R>>>> {
        let (x, kernel) = (ctx.inputs[0], ctx.inputs[1]);
        let (g, c_out) = conv_geom("conv2d", x, kernel, self.stride, self.pad, false)?;
        let dout = ctx.grad;
        let dx = ctx.needs[0].then(|| {
            let mut dcol = vec![R::zero(); g.rows() * g.cols()];
            gemm(
                R::one(),
                kernel.data(),
                Layout::row_major(c_out, g.rows()).t(),
                dout,
                Layout::row_major(c_out, g.cols()),
                R::zero(),
                &mut dcol,
                Layout::row_major(g.rows(), g.cols()),
            );
            let mut dx = vec![R::zero(); x.numel()];
            col2im(&dcol, &g, &mut dx);
            dx
        });
        let dk = ctx.needs[1].then(|| {
            let col = im2col(x.data(), &g);
            let mut dk = vec![R::zero(); kernel.numel()];
            gemm(
                R::one(),
                dout,
                Layout::row_major(c_out, g.cols()),
                &col,
                Layout::row_major(g.rows(), g.cols()).t(),
                R::zero(),
                &mut dk,
                Layout::row_major(c_out, g.rows()),
            );
            dk
        });
        Ok(vec![dx, dk])
    }
}

/// Transposed convolution, the adjoint of [`Conv2d`] with the same
/// parameters. Kernel layout `[C_in, C_out, k, k]`.
struct Deconv2d {
    stride: usize,
    pad: usize,
}

impl<R: Real> Op<R> for Deconv2d {
    fn name(&self) -> &'static str {
        "deconv2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let (g, c_out) = conv_geom("deconv2d", x, kernel, self.stride, self.pad, true)?;
        let c_in = x.shape()[0];
        let mut col = vec![R::zero(); g.rows() * g.cols()];
        gemm(
            R::one(),
            kernel.data(),
            Layout::row_major(c_in, g.rows()).t(),
            x.data(),
            Layout::row_major(c_in, g.cols()),
            R::zero(),
            &mut col,
            Layout::row_major(g.rows(), g.cols()),
        );
        let mut out = vec![R::zero(); c_out * g.h * g.w];
        col2im(&col, &g, &mut out);
        Tensor::new([c_out, g.h, g.w], out)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Result<Vec<Option<Vec<R>>>> {
        let (x, kernel) = (ctx.inputs[0], ctx.inputs[1]);
        let (g, _) = conv_geom("deconv2d", x, kernel, self.stride, self.pad, true)?;
        let c_in = x.shape()[0];
        let dcol = im2col(ctx.grad, &g);
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![R::zero(); x.numel()];
            gemm(
                R::one(),
                kernel.data(),
                Layout::row_major(c_in, g.rows()),
                &dcol,
                Layout::row_major(g.rows(), g.cols()),
                R::zero(),
                &mut dx,
                Layout::row_major(c_in, g.cols()),
            );
            dx
        });
        let dk = ctx.needs[1].then(|| {
            let mut dk = vec![R::zero(); kernel.numel()];
            gemm(
                R::one(),
                x.data(),
                Layout::row_major(c_in, g.cols()),
                &dcol,
                Layout::row_major(g.rows(), g.cols()).t(),
                R::zero(),
                &mut dk,
                Layout::row_major(c_in, g.rows()),
            );
            dk
        });
        Ok(vec![dx, dk])
    }
}

impl<R: Real> Graph<R> {
    /// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Conv2d { stride, pad: padding }, &[x, kernel])
    }

    /// Transposed convolution of `[C_in, H, W]` with `[C_in, C_out, k, k]`.
    pub fn deconv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Deconv2d { stride, pad: padding }, &[x, kernel])
    }
}
