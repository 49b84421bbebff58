//! Strided 3D convolution and its transpose via im2col + GEMM.
//!
//! 2D convolutions are 3D convolutions with a depth-1 kernel over a depth-1
//! map; fully connected layers are 1x1x1 convolutions over a 1x1x1 map.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Geometry of a convolution mapping an `input` grid onto an `output` grid.
/// `pad` is the implicit zero padding before index 0 on each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Stride 1, centred odd kernel, output grid equals input grid.
    pub fn same(input: [usize; 3], kernel: [usize; 3]) -> Self {
        ConvGeom {
            kernel,
            stride: [1; 3],
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
            input,
            output: input,
        }
    }

    pub fn pointwise(input: [usize; 3]) -> Self {
        Self::same(input, [1, 1, 1])
    }

    /// "same" padding with stride: `out = ceil(in / stride)`, surplus padding
    /// placed after the data.
    pub fn strided_same(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let mut output = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            output[a] = input[a].div_ceil(stride[a]);
            let total = ((output[a] - 1) * stride[a] + kernel[a]).saturating_sub(input[a]);
            pad[a] = total / 2;
        }
        ConvGeom { kernel, stride, pad, input, output }
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3] && self.input == self.output
    }

    fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 || self.input[a] == 0 || self.output[a] == 0 {
                return Err(Error::Geometry(format!("degenerate geometry {self:?}")));
            }
            // The last window must start inside the padded input.
            let last = (self.output[a] - 1) * self.stride[a];
            if last >= self.input[a] + self.pad[a] + self.kernel[a] {
                return Err(Error::Geometry(format!("output overruns input on axis {a}: {self:?}")));
            }
        }
        Ok(())
    }
}

/// Output columns `[lo, hi)` whose unit-stride tap `xo + e - pad` lands
/// inside `[0, len)`.
#[inline]
fn unit_stride_span(e: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(e).min(out);
    let hi = (len + pad).saturating_sub(e).min(out).max(lo);
    (lo, hi)
}

/// Unfold one item `x[c, input]` into `col[c * K, out_len]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], channels: usize, g: &ConvGeom, col: &mut [T]) {
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let p = od * oh * ow;
    let in_len = id * ih * iw;
    debug_assert_eq!(col.len(), channels * g.kernel_len() * p);
    let mut row = 0;
    for ch in 0..channels {
        let xc = &x[ch * in_len..(ch + 1) * in_len];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    row += 1;
                    let mut o = 0;
                    for zo in 0..od {
                        let zi = (zo * sd + a) as isize - pd as isize;
                        if zi < 0 || zi >= id as isize {
                            dst[o..o + oh * ow].fill(T::zero());
                            o += oh * ow;
                            continue;
                        }
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            let seg = &mut dst[o..o + ow];
                            o += ow;
                            if yi < 0 || yi >= ih as isize {
                                seg.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(zi as usize * ih + yi as usize) * iw..][..iw];
                            if sw == 1 {
                                let (lo, hi) = unit_stride_span(e, pw, iw, ow);
                                seg[..lo].fill(T::zero());
                                seg[hi..].fill(T::zero());
                                if lo < hi {
                                    seg[lo..hi].copy_from_slice(&src[lo + e - pw..hi + e - pw]);
                                }
                                continue;
                            }
                            for (xo, v) in seg.iter_mut().enumerate() {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                *v = if xi >= 0 && xi < iw as isize { src[xi as usize] } else { T::zero() };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back onto `x`.
pub(crate) fn col2im<T: Scalar>(col: &[T], channels: usize, g: &ConvGeom, x: &mut [T]) {
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let p = od * oh * ow;
    let in_len = id * ih * iw;
    let mut row = 0;
    for ch in 0..channels {
        let xc = &mut x[ch * in_len..(ch + 1) * in_len];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    row += 1;
                    let mut o = 0;
                    for zo in 0..od {
                        let zi = (zo * sd + a) as isize - pd as isize;
                        if zi < 0 || zi >= id as isize {
                            o += oh * ow;
                            continue;
                        }
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            let seg = &src[o..o + ow];
                            o += ow;
                            if yi < 0 || yi >= ih as isize {
                                continue;
                            }
                            let dst = &mut xc[(zi as usize * ih + yi as usize) * iw..][..iw];
                            if sw == 1 {
                                let (lo, hi) = unit_stride_span(e, pw, iw, ow);
                                if lo < hi {
                                    let d = &mut dst[lo + e - pw..hi + e - pw];
                                    d.iter_mut().zip(&seg[lo..hi]).for_each(|(d, &v)| *d += v);
                                }
                                continue;
                            }
                            for (xo, &v) in seg.iter().enumerate() {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                if xi >= 0 && xi < iw as isize {
                                    dst[xi as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y[n] = W x[n] + b`; weight `[c_out, c_in, kd, kh, kw]`.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (cin, cout) = (ws.c, ws.n);
    let ck = cin * g.kernel_len();
    let p = g.out_len();
    let mut y = Tensor::zeros(Shape::new(xs.n, cout, g.output[0], g.output[1], g.output[2]));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * p] };
    for n in 0..xs.n {
        let xi = x.item(n);
        let yi = y.item_mut(n);
        let bmat: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, cin, g, &mut col);
            &col
        };
        T::gemm(cout, ck, p, T::one(), w.data(), ck as isize, 1, bmat, p as isize, 1, T::zero(), yi, p as isize, 1);
        if let Some(b) = b {
            for (co, row) in yi.chunks_mut(p).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

struct ConvGrads<T> {
    dx: Option<Tensor<T>>,
    dw: Option<Tensor<T>>,
    db: Option<Tensor<T>>,
}

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (cin, cout) = (ws.c, ws.n);
    let ck = cin * g.kernel_len();
    let p = g.out_len();
    let pointwise = g.is_pointwise();
    let mut dx = need[0].then(|| Tensor::zeros(xs));
    let mut dw = need[1].then(|| Tensor::zeros(ws));
    let mut db = need[2].then(|| Tensor::zeros(Shape::vector(1, cout)));
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); ck * p] };
    for n in 0..xs.n {
        let dyi = dy.item(n);
        if let Some(dw) = dw.as_mut() {
            let bmat: &[T] = if pointwise {
                x.item(n)
            } else {
                im2col(x.item(n), cin, g, &mut col);
                &col
            };
            // dW[cout, ck] += dY[cout, p] * col[ck, p]^T
            T::gemm(cout, p, ck, T::one(), dyi, p as isize, 1, bmat, 1, p as isize, T::one(), dw.data_mut(), ck as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = dx.item_mut(n);
            if pointwise {
                T::gemm(ck, cout, p, T::one(), w.data(), 1, ck as isize, dyi, p as isize, 1, T::zero(), dxi, p as isize, 1);
            } else {
                T::gemm(ck, cout, p, T::one(), w.data(), 1, ck as isize, dyi, p as isize, 1, T::zero(), &mut col, p as isize, 1);
                col2im(&col, cin, g, dxi);
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in dyi.chunks(p).enumerate() {
                db.data_mut()[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution: the adjoint of a convolution with geometry `g`
/// (which maps the large grid `g.input` onto the small grid `g.output`).
/// Input `[n, c_small, g.output]`, weight `[c_small, c_large, kd, kh, kw]`,
/// output `[n, c_large, g.input]`.
pub fn conv_transpose_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (cs, cl) = (ws.n, ws.c);
    let ck = cl * g.kernel_len();
    let ps = g.out_len();
    let pl = g.in_len();
    let mut y = Tensor::zeros(Shape::new(xs.n, cl, g.input[0], g.input[1], g.input[2]));
    let mut col = vec![T::zero(); ck * ps];
    for n in 0..xs.n {
        T::gemm(ck, cs, ps, T::one(), w.data(), 1, ck as isize, x.item(n), ps as isize, 1, T::zero(), &mut col, ps as isize, 1);
        let yi = y.item_mut(n);
        col2im(&col, cl, g, yi);
        if let Some(b) = b {
            for (c, row) in yi.chunks_mut(pl).enumerate() {
                let bv = b.data()[c];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

fn conv_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (cs, cl) = (ws.n, ws.c);
    let ck = cl * g.kernel_len();
    let ps = g.out_len();
    let pl = g.in_len();
    let mut dx = need[0].then(|| Tensor::zeros(xs));
    let mut dw = need[1].then(|| Tensor::zeros(ws));
    let mut db = need[2].then(|| Tensor::zeros(Shape::vector(1, cl)));
    let mut col = vec![T::zero(); ck * ps];
    for n in 0..xs.n {
        let dyi = dy.item(n);
        if need[0] || need[1] {
            im2col(dyi, cl, g, &mut col);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(cs, ck, ps, T::one(), w.data(), ck as isize, 1, &col, ps as isize, 1, T::zero(), dx.item_mut(n), ps as isize, 1);
        }
        if let Some(dw) = dw.as_mut() {
            T::gemm(cs, ps, ck, T::one(), x.item(n), ps as isize, 1, &col, 1, ps as isize, T::one(), dw.data_mut(), ck as isize, 1);
        }
        if let Some(db) = db.as_mut() {
            for (c, row) in dyi.chunks(pl).enumerate() {
                db.data_mut()[c] += row.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

impl<T: Scalar> Graph<T> {
    pub fn conv(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, g: ConvGeom) -> Result<Var<T>> {
        let xs = x.shape();
        let ws = w.shape();
        g.validate()?;
        if xs.dims() != g.input || ws.c != xs.c || ws.dims() != g.kernel {
            return Err(Error::ShapeMismatch(format!("conv: input {xs}, weight {ws}, geometry {g:?}")));
        }
        if let Some(b) = b {
            if b.shape() != Shape::vector(1, ws.n) {
                return Err(Error::ShapeMismatch(format!("conv bias {}", b.shape())));
            }
        }
        let y = conv_forward(x.value(), w.value(), b.map(|b| b.value()), &g);
        let (xa, wa) = (x.shared(), w.shared());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(y, &inputs, move |dy, need| {
            let need_b = need.get(2).copied().unwrap_or(false);
            let gr = conv_backward(&xa, &wa, dy, &g, [need[0], need[1], need_b]);
            let mut out = vec![gr.dx, gr.dw];
            if need.len() == 3 {
                out.push(gr.db);
            }
            out
        }))
    }

    pub fn conv_transpose(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, g: ConvGeom) -> Result<Var<T>> {
        let xs = x.shape();
        let ws = w.shape();
        g.validate()?;
        if xs.dims() != g.output || ws.n != xs.c || ws.dims() != g.kernel {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose: input {xs}, weight {ws}, geometry {g:?}"
            )));
        }
        if let Some(b) = b {
            if b.shape() != Shape::vector(1, ws.c) {
                return Err(Error::ShapeMismatch(format!("conv_transpose bias {}", b.shape())));
            }
        }
        let y = conv_transpose_forward(x.value(), w.value(), b.map(|b| b.value()), &g);
        let (xa, wa) = (x.shared(), w.shared());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(y, &inputs, move |dy, need| {
            let need_b = need.get(2).copied().unwrap_or(false);
            let gr = conv_transpose_backward(&xa, &wa, dy, &g, [need[0], need[1], need_b]);
            let mut out = vec![gr.dx, gr.dw];
            if need.len() == 3 {
                out.push(gr.db);
            }
            out
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, g.output[0], g.output[1], g.output[2]));
        for n in 0..xs.n {
            for co in 0..ws.n {
                for zo in 0..g.output[0] {
                    for yo in 0..g.output[1] {
                        for xo in 0..g.output[2] {
                            let mut acc = 0.0;
                            for ci in 0..ws.c {
                                for a in 0..g.kernel[0] {
                                    for b in 0..g.kernel[1] {
                                        for e in 0..g.kernel[2] {
                                            let zi = (zo * g.stride[0] + a) as isize - g.pad[0] as isize;
                                            let yi = (yo * g.stride[1] + b) as isize - g.pad[1] as isize;
                                            let xi = (xo * g.stride[2] + e) as isize - g.pad[2] as isize;
                                            if zi < 0 || yi < 0 || xi < 0 {
                                                continue;
                                            }
                                            let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                            if zi >= xs.d || yi >= xs.h || xi >= xs.w {
                                                continue;
                                            }
                                            acc += x.at(n, ci, zi, yi, xi) * w.at(co, ci, a, b, e);
                                        }
                                    }
                                }
                            }
                            *y.at_mut(n, co, zo, yo, xo) = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: Shape, k: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64) * k).sin())
    }

    #[test]
    fn same_conv_matches_naive() {
        let x = ramp(Shape::new(2, 3, 4, 5, 6), 0.37);
        let w = ramp(Shape::new(4, 3, 3, 3, 3), 0.11);
        let g = ConvGeom::same([4, 5, 6], [3, 3, 3]);
        let y = conv_forward(&x, &w, None, &g);
        let want = naive(&x, &w, &g);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_same_conv_matches_naive() {
        let x = ramp(Shape::new(1, 2, 1, 8, 8), 0.21);
        let w = ramp(Shape::new(3, 2, 1, 3, 3), 0.5);
        let g = ConvGeom::strided_same([1, 8, 8], [1, 3, 3], [1, 2, 2]);
        assert_eq!(g.output, [1, 4, 4]);
        assert_eq!(g.pad, [0, 0, 0]);
        let y = conv_forward(&x, &w, None, &g);
        let want = naive(&x, &w, &g);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        // <conv(x), y> == <x, conv_transpose(y)>
        let g = ConvGeom::strided_same([1, 8, 8], [1, 3, 3], [1, 2, 2]);
        let x = ramp(Shape::new(1, 2, 1, 8, 8), 0.3);
        let w = ramp(Shape::new(3, 2, 1, 3, 3), 0.7);
        let y = ramp(Shape::new(1, 3, 1, 4, 4), 0.9);
        let cx = conv_forward(&x, &w, None, &g);
        let ty = conv_transpose_forward(&y, &w, None, &g);
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
