//! Forward and backward kernels, independent of the tape.
//!
//! These are plain functions over [`Tensor`] values. The tape calls them when
//! recording and when replaying in reverse; the data pipeline calls the
//! forward halves directly for resampling images.

use super::{lit, Scalar, Shape, Tensor, TensorError};

/// Stride, zero-padding and dilation of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1, no padding, no dilation.
    pub const fn unit() -> Self {
        ConvGeom::new(1, 0, 1)
    }

    /// Output extent along one axis, or `None` when it would be non-positive.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

fn conv_out_shape<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: ConvGeom,
) -> Result<Shape, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            detail: format!("stride {} and dilation {} must be >= 1", geom.stride, geom.dilation),
        });
    }
    if ws.h() % 2 == 0 || ws.w() % 2 == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            detail: format!("kernel extents must be odd, got {}x{}", ws.h(), ws.w()),
        });
    }
    if xs.c() != ws.c() {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: xs,
            right: ws,
        });
    }
    let oh = geom.out_extent(xs.h(), ws.h());
    let ow = geom.out_extent(xs.w(), ws.w());
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape::new(xs.n(), ws.n(), oh, ow)),
        _ => Err(TensorError::EmptyOutput {
            op: "conv2d",
            input: xs,
        }),
    }
}

fn is_pointwise(ws: Shape, geom: ConvGeom) -> bool {
    ws.h() == 1 && ws.w() == 1 && geom.stride == 1 && geom.padding == 0
}

/// Unfold one batch item into a `[cin*kh*kw, oh*ow]` column matrix.
fn im2col<T: Scalar>(
    x: &[T],
    in_shape: Shape,
    kernel: (usize, usize),
    geom: ConvGeom,
    out_hw: (usize, usize),
    cols: &mut [T],
) {
    let (cin, h, w) = (in_shape.c(), in_shape.h(), in_shape.w());
    let (kh, kw) = kernel;
    let (oh, ow) = out_hw;
    let p = oh * ow;
    let pad = geom.padding as isize;
    let (s, d) = (geom.stride as isize, geom.dilation as isize);
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize * d - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize * d - pad;
                        *v = if ix < 0 || ix >= w as isize {
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

/// Fold a column matrix back, accumulating into `dx`.
fn col2im<T: Scalar>(
    cols: &[T],
    in_shape: Shape,
    kernel: (usize, usize),
    geom: ConvGeom,
    out_hw: (usize, usize),
    dx: &mut [T],
) {
    let (cin, h, w) = (in_shape.c(), in_shape.h(), in_shape.w());
    let (kh, kw) = kernel;
    let (oh, ow) = out_hw;
    let p = oh * ow;
    let pad = geom.padding as isize;
    let (s, d) = (geom.stride as isize, geom.dilation as isize);
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize * d - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * s + kx as isize * d - pad;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `weight` is `[cout, cin, kh, kw]`,
/// `bias` is `[cout, 1, 1, 1]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>, TensorError> {
    let out_shape = conv_out_shape(x, weight, geom)?;
    let ws = weight.shape();
    let xs = x.shape();
    if let Some(b) = bias {
        if b.numel() != ws.n() {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d(bias)",
                left: ws,
                right: b.shape(),
            });
        }
    }
    let (cout, k) = (ws.n(), ws.c() * ws.h() * ws.w());
    let (oh, ow) = (out_shape.h(), out_shape.w());
    let p = oh * ow;
    let in_per = xs.c() * xs.plane();
    let mut out = vec![T::zero(); out_shape.numel()];
    let pointwise = is_pointwise(ws, geom);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };

    for b in 0..xs.n() {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let colm: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, xs, (ws.h(), ws.w()), geom, (oh, ow), &mut cols);
            &cols
        };
        let ob = &mut out[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for (o, row) in ob.chunks_mut(p).enumerate() {
                row.fill(bias.data()[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        // SAFETY: slices are sized exactly m*k, k*n and m*n with row-major strides.
        unsafe {
            T::gemm(
                cout,
                k,
                p,
                T::one(),
                weight.data().as_ptr(),
                k as isize,
                1,
                colm.as_ptr(),
                p as isize,
                1,
                beta,
                ob.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeom,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let ws = weight.shape();
    let (cout, k) = (ws.n(), ws.c() * ws.h() * ws.w());
    let (oh, ow) = (dy.shape().h(), dy.shape().w());
    let p = oh * ow;
    let in_per = xs.c() * xs.plane();
    let pointwise = is_pointwise(ws, geom);

    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let mut db = Tensor::zeros(Shape::new(cout, 1, 1, 1));
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if need_dx { vec![T::zero(); k * p] } else { Vec::new() };

    for b in 0..xs.n() {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let dyb = &dy.data()[b * cout * p..(b + 1) * cout * p];
        for (o, row) in dyb.chunks(p).enumerate() {
            db.data_mut()[o] += row.iter().copied().sum::<T>();
        }
        let colm: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, xs, (ws.h(), ws.w()), geom, (oh, ow), &mut cols);
            &cols
        };
        // SAFETY: dims match the buffers; transposes expressed through strides.
        unsafe {
            // dW[cout,k] += dY[cout,p] * cols^T[p,k]
            T::gemm(
                cout,
                p,
                k,
                T::one(),
                dyb.as_ptr(),
                p as isize,
                1,
                colm.as_ptr(),
                1,
                p as isize,
                T::one(),
                dw.data_mut().as_mut_ptr(),
                k as isize,
                1,
            );
        }
        if !need_dx {
            continue;
        }
        // SAFETY: as above.
        unsafe {
            // dcols[k,p] = W^T[k,cout] * dY[cout,p]
            T::gemm(
                k,
                cout,
                p,
                T::one(),
                weight.data().as_ptr(),
                1,
                k as isize,
                dyb.as_ptr(),
                p as isize,
                1,
                T::zero(),
                dcols.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        let dxb = &mut dx.data_mut()[b * in_per..(b + 1) * in_per];
        if pointwise {
            for (d, &c) in dxb.iter_mut().zip(&dcols) {
                *d += c;
            }
        } else {
            col2im(&dcols, xs, (ws.h(), ws.w()), geom, (oh, ow), dxb);
        }
    }
    (need_dx.then_some(dx), dw, db)
}

fn pool_out_shape(xs: Shape, k: usize, stride: usize, padding: usize) -> Result<Shape, TensorError> {
    if k == 0 || stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "avg_pool2d",
            detail: format!("kernel {k} and stride {stride} must be >= 1"),
        });
    }
    let g = ConvGeom::new(stride, padding, 1);
    match (g.out_extent(xs.h(), k), g.out_extent(xs.w(), k)) {
        (Some(oh), Some(ow)) => Ok(Shape::new(xs.n(), xs.c(), oh, ow)),
        _ => Err(TensorError::EmptyOutput {
            op: "avg_pool2d",
            input: xs,
        }),
    }
}

/// Mean over each `k x k` window of the zero-padded input. The divisor is
/// always `k*k`, padded cells included.
pub fn avg_pool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let xs = x.shape();
    let os = pool_out_shape(xs, k, stride, padding)?;
    let (h, w, oh, ow) = (xs.h(), xs.w(), os.h(), os.w());
    let inv = T::one() / lit::<T>((k * k) as f64);
    let mut out = Vec::with_capacity(os.numel());
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - padding as isize;
            let ys = y0.max(0) as usize..((y0 + k as isize).min(h as isize)).max(0) as usize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - padding as isize;
                let xr = x0.max(0) as usize..((x0 + k as isize).min(w as isize)).max(0) as usize;
                let mut acc = T::zero();
                for iy in ys.clone() {
                    for ix in xr.clone() {
                        acc += plane[iy * w + ix];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub fn avg_pool2d_backward<T: Scalar>(
    in_shape: Shape,
    k: usize,
    stride: usize,
    padding: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (h, w, oh, ow) = (in_shape.h(), in_shape.w(), dy.shape().h(), dy.shape().w());
    let inv = T::one() / lit::<T>((k * k) as f64);
    let mut dx = Tensor::zeros(in_shape);
    for (plane, gplane) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(oh * ow)) {
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - padding as isize;
            let ys = y0.max(0) as usize..((y0 + k as isize).min(h as isize)).max(0) as usize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - padding as isize;
                let xr = x0.max(0) as usize..((x0 + k as isize).min(w as isize)).max(0) as usize;
                let g = gplane[oy * ow + ox] * inv;
                for iy in ys.clone() {
                    for ix in xr.clone() {
                        plane[iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let xs = x.shape();
    if xs.plane() == 0 {
        return Err(TensorError::EmptyOutput {
            op: "global_avg_pool",
            input: xs,
        });
    }
    let inv = T::one() / lit::<T>(xs.plane() as f64);
    let data = x
        .data()
        .chunks(xs.plane())
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(Shape::new(xs.n(), xs.c(), 1, 1), data)
}

pub fn global_avg_pool_backward<T: Scalar>(in_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let inv = T::one() / lit::<T>(in_shape.plane() as f64);
    let mut dx = Tensor::zeros(in_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(in_shape.plane()).zip(dy.data()) {
        plane.fill(g * inv);
    }
    dx
}

/// Source taps along one axis: `(lo, hi, weight_of_hi)` per output index.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Half-pixel-center bilinear resampling with edge clamping.
pub fn bilinear_resize_forward<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, TensorError> {
    let xs = x.shape();
    if out_h == 0 || out_w == 0 || xs.plane() == 0 {
        return Err(TensorError::InvalidArgument {
            op: "bilinear_resize",
            detail: format!("cannot resize {xs} to {out_h}x{out_w}"),
        });
    }
    let ty = bilinear_taps(xs.h(), out_h);
    let tx: Vec<(usize, usize, T, T)> = bilinear_taps(xs.w(), out_w)
        .into_iter()
        .map(|(l, h, f)| (l, h, lit(1.0 - f), lit(f)))
        .collect();
    let w = xs.w();
    let os = Shape::new(xs.n(), xs.c(), out_h, out_w);
    let mut out = Vec::with_capacity(os.numel());
    for plane in x.data().chunks(xs.plane()) {
        for &(y0, y1, fy) in &ty {
            let (wy0, wy1) = (lit::<T>(1.0 - fy), lit::<T>(fy));
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, wx0, wx1) in &tx {
                let top = wx0 * r0[x0] + wx1 * r0[x1];
                let bot = wx0 * r1[x0] + wx1 * r1[x1];
                out.push(wy0 * top + wy1 * bot);
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub fn bilinear_resize_backward<T: Scalar>(in_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (dy.shape().h(), dy.shape().w());
    let ty = bilinear_taps(in_shape.h(), oh);
    let tx: Vec<(usize, usize, T, T)> = bilinear_taps(in_shape.w(), ow)
        .into_iter()
        .map(|(l, h, f)| (l, h, lit(1.0 - f), lit(f)))
        .collect();
    let w = in_shape.w();
    let mut dx = Tensor::zeros(in_shape);
    for (plane, gplane) in dx
        .data_mut()
        .chunks_mut(in_shape.plane())
        .zip(dy.data().chunks(oh * ow))
    {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (lit::<T>(1.0 - fy), lit::<T>(fy));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = gplane[oy * ow + ox];
                plane[y0 * w + x0] += g * wy0 * wx0;
                plane[y0 * w + x1] += g * wy0 * wx1;
                plane[y1 * w + x0] += g * wy1 * wx0;
                plane[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    dx
}

/// Nearest-neighbour resampling on the same half-pixel grid. Not
/// differentiable; used for label masks.
pub fn nearest_resize<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, TensorError> {
    let xs = x.shape();
    if out_h == 0 || out_w == 0 || xs.plane() == 0 {
        return Err(TensorError::InvalidArgument {
            op: "nearest_resize",
            detail: format!("cannot resize {xs} to {out_h}x{out_w}"),
        });
    }
    let pick = |input: usize, output: usize| -> Vec<usize> {
        let scale = input as f64 / output as f64;
        (0..output)
            .map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(input - 1))
            .collect()
    };
    let (py, px) = (pick(xs.h(), out_h), pick(xs.w(), out_w));
    let os = Shape::new(xs.n(), xs.c(), out_h, out_w);
    let mut out = Vec::with_capacity(os.numel());
    for plane in x.data().chunks(xs.plane()) {
        for &sy in &py {
            for &sx in &px {
                out.push(plane[sy * xs.w() + sx]);
            }
        }
    }
    Tensor::from_vec(os, out)
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Clamp bound applied to probabilities inside the BCE loss.
pub const BCE_EPS: f64 = 1e-7;
