//! Differentiable operations other than convolutions.

use super::gemm::{gemm, Layout};
use super::graph::{BackwardCtx, Graph, Op, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

type Grads<R> = Result<Vec<Option<Vec<R>>>>;

/// Tags accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Softplus,
    Add,
    Mul,
    Scale(f64),
}

#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<R: Real>(x: R) -> R {
    if x > R::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn relu<R: Real>(x: R) -> R {
    if x > R::zero() {
        x
    } else {
        R::zero()
    }
}

// ---------------------------------------------------------------------------
// Unary

#[derive(Clone, Copy, Debug)]
enum UnaryKind<R> {
    Relu,
    Sigmoid,
    Softplus,
    Scale(R),
}

struct Unary<R> {
    kind: UnaryKind<R>,
}

impl<R: Real> Op<R> for Unary<R> {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Scale(_) => "scale",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let x = inputs[0];
        let f: fn(R, R) -> R = match self.kind {
            UnaryKind::Relu => |x, _| relu(x),
            UnaryKind::Sigmoid => |x, _| sigmoid(x),
            UnaryKind::Softplus => |x, _| softplus(x),
            UnaryKind::Scale(_) => |x, c| x * c,
        };
        let c = match self.kind {
            UnaryKind::Scale(c) => c,
            _ => R::zero(),
        };
        Tensor::new(x.shape(), x.data().iter().map(|&v| f(v, c)).collect())
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Grads<R> {
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let g = ctx.grad;
        let dx: Vec<R> = match self.kind {
            // subgradient 0 at exactly 0
            UnaryKind::Relu => x
                .iter()
                .zip(g)
                .map(|(&x, &g)| if x > R::zero() { g } else { R::zero() })
                .collect(),
            UnaryKind::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (R::one() - y)).collect(),
            UnaryKind::Softplus => x.iter().zip(g).map(|(&x, &g)| g * sigmoid(x)).collect(),
            UnaryKind::Scale(c) => g.iter().map(|&g| g * c).collect(),
        };
        Ok(vec![Some(dx)])
    }
}

// ---------------------------------------------------------------------------
// Binary with broadcasting

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

struct Binary {
    kind: BinaryKind,
}

impl<R: Real> Op<R> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let (a, b) = (inputs[0], inputs[1]);
        let f = |x: R, y: R| match self.kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(a.shape(), data);
        }
        let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(Op::<R>::name(self), format!("{:?} vs {:?}", a.shape(), b.shape()))
        })?;
        let sa = broadcast_strides(a.shape(), &out);
        let sb = broadcast_strides(b.shape(), &out);
        let mut data = vec![R::zero(); out.iter().product()];
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
        Tensor::new(out, data)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Grads<R> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad;
        let mut ga = ctx.needs[0].then(|| vec![R::zero(); a.numel()]);
        let mut gb = ctx.needs[1].then(|| vec![R::zero(); b.numel()]);
        let out = ctx.output.shape();
        let sa = broadcast_strides(a.shape(), out);
        let sb = broadcast_strides(b.shape(), out);
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
            let go = g[o];
            if let Some(ga) = ga.as_mut() {
                ga[ia] += match self.kind {
                    BinaryKind::Add | BinaryKind::Sub => go,
                    BinaryKind::Mul => go * bd[ib],
                };
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += match self.kind {
                    BinaryKind::Add => go,
                    BinaryKind::Sub => -go,
                    BinaryKind::Mul => go * ad[ia],
                };
            }
        });
        Ok(vec![ga, gb])
    }
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

struct Sum;

impl<R: Real> Op<R> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        Ok(Tensor::scalar(inputs[0].data().iter().copied().sum()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Grads<R> {
        Ok(vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])])
    }
}

struct Reshape {
    shape: Vec<usize>,
}

impl<R: Real> Op<R> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        Tensor::new(self.shape.clone(), inputs[0].data().to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {:?}", inputs[0].shape(), self.shape)))
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Grads<R> {
        Ok(vec![Some(ctx.grad.to_vec())])
    }
}

// ---------------------------------------------------------------------------
// Matrix product

struct MatMul;

impl<R: Real> Op<R> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::shape("matmul", format!("{:?} x {:?}: operands must be 2-d", a.shape(), b.shape())));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let mut c = vec![R::zero(); m * n];
        gemm(
            R::one(),
            a.data(),
            Layout::row_major(m, k),
            b.data(),
            Layout::row_major(k, n),
            R::zero(),
            &mut c,
            Layout::row_major(m, n),
        );
        Tensor::new([m, n], c)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Grads<R> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let dc = ctx.grad;
        let da = ctx.needs[0].then(|| {
            let mut da = vec![R::zero(); m * k];
            gemm(
                R::one(),
                dc,
                Layout::row_major(m, n),
                b.data(),
                Layout::row_major(k, n).t(),
                R::zero(),
                &mut da,
                Layout::row_major(m, k),
            );
            da
        });
        let db = ctx.needs[1].then(|| {
            let mut db = vec![R::zero(); k * n];
            gemm(
                R::one(),
                a.data(),
                Layout::row_major(m, k).t(),
                dc,
                Layout::row_major(m, n),
                R::zero(),
                &mut db,
                Layout::row_major(k, n),
            );
            db
        });
        Ok(vec![da, db])
    }
}

// ---------------------------------------------------------------------------
// Layout and gather ops

/// `[C, H, W] -> [H, W, C]`.
struct ChwToHwc;

impl<R: Real> Op<R> for ChwToHwc {
    fn name(&self) -> &'static str {
        "chw_to_hwc"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let x = inputs[0];
        let &[c, h, w] = x.shape() else {
            return Err(Error::shape("chw_to_hwc", format!("expected [C,H,W], got {:?}", x.shape())));
        };
        let src = x.data();
        let mut out = vec![R::zero(); c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                out[p * c + ch] = src[ch * h * w + p];
            }
        }
        Tensor::new([h, w, c], out)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Grads<R> {
        let &[c, h, w] = ctx.inputs[0].shape() else { unreachable!() };
        let mut dx = vec![R::zero(); c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                dx[ch * h * w + p] = ctx.grad[p * c + ch];
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Channels `[start, start + len)` of a `[C, H, W]` tensor.
struct ChannelSlice {
    start: usize,
    len: usize,
}

impl<R: Real> Op<R> for ChannelSlice {
    fn name(&self) -> &'static str {
        "channel_slice"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let x = inputs[0];
        let &[c, h, w] = x.shape() else {
            return Err(Error::shape("channel_slice", format!("expected [C,H,W], got {:?}", x.shape())));
        };
        if self.start + self.len > c {
            return Err(Error::shape(
                "channel_slice",
                format!("channels {}..{} of {c}", self.start, self.start + self.len),
            ));
        }
        let plane = h * w;
        let data = x.data()[self.start * plane..(self.start + self.len) * plane].to_vec();
        Tensor::new([self.len, h, w], data)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Grads<R> {
        let x = ctx.inputs[0];
        let plane = x.shape()[1] * x.shape()[2];
        let mut dx = vec![R::zero(); x.numel()];
        dx[self.start * plane..(self.start + self.len) * plane].copy_from_slice(ctx.grad);
        Ok(vec![Some(dx)])
    }
}

/// Gathers rows of a `[rows, cols]` matrix.
struct SelectRows {
    rows: Vec<usize>,
}

impl<R: Real> Op<R> for SelectRows {
    fn name(&self) -> &'static str {
        "select_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let x = inputs[0];
        let &[n, cols] = x.shape() else {
            return Err(Error::shape("select_rows", format!("expected 2-d, got {:?}", x.shape())));
        };
        let mut out = Vec::with_capacity(self.rows.len() * cols);
        for &r in &self.rows {
            if r >= n {
                return Err(Error::OutOfRange { what: "row", index: r, len: n });
            }
            out.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
        }
        Tensor::new([self.rows.len(), cols], out)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Grads<R> {
        let x = ctx.inputs[0];
        let cols = x.shape()[1];
        let mut dx = vec![R::zero(); x.numel()];
        for (i, &r) in self.rows.iter().enumerate() {
            for c in 0..cols {
                dx[r * cols + c] += ctx.grad[i * cols + c];
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Bilinear taps of a unit-square coordinate on an `h x w` texel grid whose
/// texel centers sit at `(i + 0.5) / extent`. Coordinates are clamped.
#[inline]
pub fn bilinear_taps<R: Real>(u: R, v: R, h: usize, w: usize) -> [(usize, R); 4] {
    let axis = |x: R, n: usize| -> (usize, usize, R) {
        let x = x.max(R::zero()).min(R::one());
        let t = (x * R::lit(n as f64) - R::lit(0.5)).max(R::zero()).min(R::lit((n - 1) as f64));
        let i0 = t.floor().to_usize().unwrap_or(0).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, t - R::lit(i0 as f64))
    };
    let (y0, y1, fy) = axis(u, h);
    let (x0, x1, fx) = axis(v, w);
    let one = R::one();
    [
        (y0 * w + x0, (one - fy) * (one - fx)),
        (y0 * w + x1, (one - fy) * fx),
        (y1 * w + x0, fy * (one - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// Samples a `[C, H, W]` map at `[N, 2]` unit-square coordinates (first
/// coordinate along H), producing `[N, C]`.
struct BilinearGather<R> {
    coords: Vec<[R; 2]>,
}

impl<R: Real> Op<R> for BilinearGather<R> {
    fn name(&self) -> &'static str {
        "bilinear_gather"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let x = inputs[0];
        let &[c, h, w] = x.shape() else {
            return Err(Error::shape("bilinear_gather", format!("expected [C,H,W], got {:?}", x.shape())));
        };
        if h == 0 || w == 0 {
            return Err(Error::shape("bilinear_gather", "empty map"));
        }
        let src = x.data();
        let plane = h * w;
        let mut out = vec![R::zero(); self.coords.len() * c];
        for (n, &[u, v]) in self.coords.iter().enumerate() {
            let taps = bilinear_taps(u, v, h, w);
            let row = &mut out[n * c..(n + 1) * c];
            for (ch, o) in row.iter_mut().enumerate() {
                let base = ch * plane;
                *o = taps.iter().map(|&(i, wt)| wt * src[base + i]).sum();
            }
        }
        Tensor::new([self.coords.len(), c], out)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Grads<R> {
        let x = ctx.inputs[0];
        let &[c, h, w] = x.shape() else { unreachable!() };
        let plane = h * w;
        let mut dx = vec![R::zero(); x.numel()];
        for (n, &[u, v]) in self.coords.iter().enumerate() {
            let taps = bilinear_taps(u, v, h, w);
            for ch in 0..c {
                let g = ctx.grad[n * c + ch];
                for &(i, wt) in &taps {
                    dx[ch * plane + i] += wt * g;
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

impl<R: Real> Graph<R> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Unary { kind: UnaryKind::Relu }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Unary { kind: UnaryKind::Sigmoid }, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Unary { kind: UnaryKind::Softplus }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: R) -> Result<Var> {
        self.apply(Unary { kind: UnaryKind::Scale(c) }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary { kind: BinaryKind::Add }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary { kind: BinaryKind::Sub }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary { kind: BinaryKind::Mul }, &[a, b])
    }

    /// Dispatches an elementwise op by tag; binary tags take two operands.
    pub fn elementwise(&mut self, tag: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match tag {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{tag:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match tag {
            Elementwise::Relu => self.relu(operands[0]),
            Elementwise::Sigmoid => self.sigmoid(operands[0]),
            Elementwise::Softplus => self.softplus(operands[0]),
            Elementwise::Scale(c) => self.scale(operands[0], R::lit(c)),
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Mul => self.mul(operands[0], operands[1]),
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Sum, &[x])
    }

    /// `sum(x * x)`.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Reshape { shape: shape.into() }, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(MatMul, &[a, b])
    }

    pub fn chw_to_hwc(&mut self, x: Var) -> Result<Var> {
        self.apply(ChwToHwc, &[x])
    }

    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(ChannelSlice { start, len }, &[x])
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        self.apply(SelectRows { rows }, &[x])
    }

    pub fn bilinear_gather(&mut self, map: Var, coords: Vec<[R; 2]>) -> Result<Var> {
        self.apply(BilinearGather { coords }, &[map])
    }
}
