//! Forward and adjoint kernels on plain tensors.
//!
//! Convolutions use cross-correlation semantics (the kernel is not flipped):
//! `out[o, y, x] = bias[o] + sum_{c, i, j} w[o, c, i, j] * in[c, y*s + i - p, x*s + j - p]`.

use rayon::prelude::*;

use super::{gemm, MatLayout, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PadMode {
    /// Mirror without repeating the edge sample (`-1 -> 1`).
    Reflect,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Padding {
    pub mode: PadMode,
    pub size: usize,
}

impl Padding {
    pub const fn reflect(size: usize) -> Self {
        Padding { mode: PadMode::Reflect, size }
    }

    pub const fn zero(size: usize) -> Self {
        Padding { mode: PadMode::Zero, size }
    }

    pub const fn none() -> Self {
        Padding { mode: PadMode::Zero, size: 0 }
    }
}

/// Maps an out-of-range index back into `[0, len)` by repeated mirroring.
#[inline]
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

const ZERO_TAP: usize = usize::MAX;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if weight.c != input.c {
            return Err(Error::ShapeMismatch { op: "conv2d", left: input, right: weight });
        }
        if weight.h == 0 || weight.w == 0 || weight.n == 0 {
            return Err(Error::invalid("conv2d", format!("empty kernel {weight}")));
        }
        let (hp, wp) = (input.h + 2 * pad.size, input.w + 2 * pad.size);
        if hp < weight.h || wp < weight.w {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {}x{} larger than padded input {hp}x{wp}", weight.h, weight.w),
            ));
        }
        Ok(ConvGeometry {
            input,
            out_c: weight.n,
            kh: weight.h,
            kw: weight.w,
            stride,
            pad,
            out_h: (hp - weight.h) / stride + 1,
            out_w: (wp - weight.w) / stride + 1,
        })
    }

    /// Geometry of the conv whose adjoint maps `out_shape`-sized tensors back
    /// to the default input size `(H - 1) * s + k - 2p`.
    pub fn for_transpose(out_shape: Shape, weight: Shape, stride: usize, pad: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d_transpose", "stride must be at least 1"));
        }
        if weight.n != out_shape.c {
            return Err(Error::ShapeMismatch { op: "conv2d_transpose", left: out_shape, right: weight });
        }
        let full_h = (out_shape.h - 1) * stride + weight.h;
        let full_w = (out_shape.w - 1) * stride + weight.w;
        if full_h <= 2 * pad.size || full_w <= 2 * pad.size {
            return Err(Error::invalid("conv2d_transpose", "padding crops the whole output"));
        }
        let input = Shape::new(out_shape.n, weight.c, full_h - 2 * pad.size, full_w - 2 * pad.size);
        let geom = ConvGeometry::new(input, weight, stride, pad)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (out_shape.h, out_shape.w));
        Ok(geom)
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.input.n, self.out_c, self.out_h, self.out_w)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_c, self.input.c, self.kh, self.kw)
    }

    fn patch_len(&self) -> usize {
        self.input.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad.size == 0
    }

    /// Source index along one axis for every (kernel tap, output position).
    fn axis_map(&self, len: usize, k: usize, out: usize) -> Vec<usize> {
        let p = self.pad.size as isize;
        let mut map = Vec::with_capacity(k * out);
        for t in 0..k {
            for o in 0..out {
                map.push(self.source_index((o * self.stride + t) as isize - p, len));
            }
        }
        map
    }

    /// Input index for a possibly out-of-range coordinate, or `ZERO_TAP`.
    #[inline]
    fn source_index(&self, i: isize, len: usize) -> usize {
        if i >= 0 && (i as usize) < len {
            i as usize
        } else {
            match self.pad.mode {
                PadMode::Zero => ZERO_TAP,
                PadMode::Reflect => reflect_index(i, len),
            }
        }
    }

    /// Thin convolutions run faster as shifted row updates than as im2col products.
    fn prefers_direct(&self) -> bool {
        self.stride == 1 && self.input.c.min(self.out_c) <= 4
    }

    fn rows_per_chunk(&self) -> usize {
        const TARGET: usize = 1 << 18;
        let per_row = (self.patch_len() * self.out_w).max(1);
        (TARGET / per_row).clamp(1, self.out_h.max(1))
    }

    fn chunks(&self) -> Vec<(usize, usize, usize)> {
        let rows = self.rows_per_chunk();
        let mut out = Vec::new();
        for n in 0..self.input.n {
            let mut y = 0;
            while y < self.out_h {
                let y1 = (y + rows).min(self.out_h);
                out.push((n, y, y1));
                y = y1;
            }
        }
        out
    }
}

struct AxisMaps {
    ymap: Vec<usize>,
    xmap: Vec<usize>,
}

impl AxisMaps {
    fn new(g: &ConvGeometry) -> Self {
        AxisMaps {
            ymap: g.axis_map(g.input.h, g.kh, g.out_h),
            xmap: g.axis_map(g.input.w, g.kw, g.out_w),
        }
    }
}

/// Fills `cols` (K × P, row-major, P = rows·out_w) with input patches.
fn im2col<T: Scalar>(g: &ConvGeometry, maps: &AxisMaps, x: &[T], y0: usize, y1: usize, cols: &mut [T]) {
    let (h, w) = (g.input.h, g.input.w);
    let p = (y1 - y0) * g.out_w;
    for c in 0..g.input.c {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                let xm = &maps.xmap[kx * g.out_w..(kx + 1) * g.out_w];
                for (i, oy) in (y0..y1).enumerate() {
                    let dst = &mut row[i * g.out_w..(i + 1) * g.out_w];
                    let iy = maps.ymap[ky * g.out_h + oy];
                    if iy == ZERO_TAP {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy * w..(iy + 1) * w];
                    for (d, &ix) in dst.iter_mut().zip(xm) {
                        *d = if ix == ZERO_TAP { T::zero() } else { src[ix] };
                    }
                }
            }
        }
    }
}

/// Padded input rows feeding output rows `[y0, y1)` of a stride-1 conv,
/// laid out as `C × (rows + kh - 1) × (out_w + kw - 1)`.
fn padded_slab<T: Scalar>(g: &ConvGeometry, x: &[T], y0: usize, y1: usize) -> Vec<T> {
    let (h, w) = (g.input.h, g.input.w);
    let (sh, sw) = (y1 - y0 + g.kh - 1, g.out_w + g.kw - 1);
    let p = g.pad.size as isize;
    let xmap: Vec<usize> = (0..sw).map(|j| g.source_index(j as isize - p, w)).collect();
    let mut slab = vec![T::zero(); g.input.c * sh * sw];
    for c in 0..g.input.c {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for r in 0..sh {
            let iy = g.source_index((y0 + r) as isize - p, h);
            if iy == ZERO_TAP {
                continue;
            }
            let src = &plane[iy * w..(iy + 1) * w];
            let dst = &mut slab[(c * sh + r) * sw..(c * sh + r + 1) * sw];
            for (d, &ix) in dst.iter_mut().zip(&xmap) {
                if ix != ZERO_TAP {
                    *d = src[ix];
                }
            }
        }
    }
    slab
}

/// Scatter-adds `cols` back into an input-shaped plane set (adjoint of im2col).
fn col2im<T: Scalar>(g: &ConvGeometry, maps: &AxisMaps, cols: &[T], y0: usize, y1: usize, dx: &mut [T]) {
    let (h, w) = (g.input.h, g.input.w);
    let p = (y1 - y0) * g.out_w;
    for c in 0..g.input.c {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &cols[r * p..(r + 1) * p];
                let xm = &maps.xmap[kx * g.out_w..(kx + 1) * g.out_w];
                for (i, oy) in (y0..y1).enumerate() {
                    let iy = maps.ymap[ky * g.out_h + oy];
                    if iy == ZERO_TAP {
                        continue;
                    }
                    let src = &row[i * g.out_w..(i + 1) * g.out_w];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    for (&v, &ix) in src.iter().zip(xm) {
                        if ix != ZERO_TAP {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
// SAFETY: used only to hand disjoint output regions to worker threads.
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// 2-D cross-correlation with optional bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.out_c {
            return Err(Error::ShapeMismatch { op: "conv2d bias", left: weight.shape(), right: b.shape() });
        }
    }
    let out_shape = g.output_shape();
    let plane_out = g.out_h * g.out_w;
    let k = g.patch_len();
    let mut out = vec![T::zero(); out_shape.numel()];
    let in_per = g.input.c * g.input.plane();
    let out_per = g.out_c * plane_out;
    let wl = MatLayout::row_major(g.out_c, k);
    let wdata = weight.data();
    let xdata = x.data();

    if g.is_pointwise() {
        out.par_chunks_mut(out_per.max(1)).enumerate().for_each(|(n, o)| {
            let xs = &xdata[n * in_per..(n + 1) * in_per];
            gemm(
                T::one(),
                wdata,
                wl,
                xs,
                MatLayout::row_major(k, plane_out),
                T::zero(),
                o,
                MatLayout::row_major(g.out_c, plane_out),
            );
        });
    } else if g.prefers_direct() {
        let base = SendPtr(out.as_mut_ptr());
        let total = out.len();
        g.chunks().par_iter().for_each(|&(n, y0, y1)| {
            let base = base;
            let xs = &xdata[n * in_per..(n + 1) * in_per];
            let slab = padded_slab(&g, xs, y0, y1);
            let (sh, sw) = (y1 - y0 + g.kh - 1, g.out_w + g.kw - 1);
            for o in 0..g.out_c {
                for y in y0..y1 {
                    let offset = n * out_per + o * plane_out + y * g.out_w;
                    assert!(offset + g.out_w <= total);
                    // SAFETY: each chunk owns rows [y0, y1) of every output
                    // channel of sample n; chunks never overlap and the bound is checked.
                    let dst = unsafe { std::slice::from_raw_parts_mut(base.0.add(offset), g.out_w) };
                    for c in 0..g.input.c {
                        for ky in 0..g.kh {
                            let r = (c * sh + y - y0 + ky) * sw;
                            let src = &slab[r..r + sw];
                            let taps = &wdata[((o * g.input.c + c) * g.kh + ky) * g.kw..][..g.kw];
                            for (kx, &wv) in taps.iter().enumerate() {
                                for (d, &v) in dst.iter_mut().zip(&src[kx..kx + g.out_w]) {
                                    *d = *d + wv * v;
                                }
                            }
                        }
                    }
                }
            }
        });
    } else {
        let maps = AxisMaps::new(&g);
        let chunks = g.chunks();
        let base = SendPtr(out.as_mut_ptr());
        let total = out.len();
        chunks.par_iter().for_each(|&(n, y0, y1)| {
            let base = base;
            let p = (y1 - y0) * g.out_w;
            let mut cols = vec![T::zero(); k * p];
            im2col(&g, &maps, &xdata[n * in_per..(n + 1) * in_per], y0, y1, &mut cols);
            let offset = n * out_per + y0 * g.out_w;
            let lc = MatLayout { rows: g.out_c, cols: p, row_stride: plane_out, col_stride: 1 };
            assert!(offset + lc.max_index() < total);
            // SAFETY: each chunk owns columns [y0*W, y1*W) of every output
            // channel of sample n; chunks never overlap and the bound is checked.
            unsafe {
                T::gemm_raw(
                    g.out_c,
                    k,
                    p,
                    T::one(),
                    wdata.as_ptr(),
                    k as isize,
                    1,
                    cols.as_ptr(),
                    p as isize,
                    1,
                    T::zero(),
                    base.0.add(offset),
                    plane_out as isize,
                    1,
                );
            }
        });
    }

    if let Some(b) = bias {
        let bd = b.data();
        out.par_chunks_mut(plane_out.max(1)).enumerate().for_each(|(i, plane)| {
            let bv = bd[i % g.out_c];
            if bv != T::zero() {
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        });
    }
    Ok(Tensor::from_vec_unchecked(out_shape, out))
}

/// Gradient of `conv2d` with respect to its input; equivalently the
/// transposed convolution of `grad_out` onto the geometry's input shape.
pub fn conv2d_backward_input<T: Scalar>(g: &ConvGeometry, grad_out: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != g.output_shape() {
        return Err(Error::ShapeMismatch { op: "conv2d_backward_input", left: g.output_shape(), right: grad_out.shape() });
    }
    if weight.shape() != g.weight_shape() {
        return Err(Error::ShapeMismatch { op: "conv2d_backward_input", left: g.weight_shape(), right: weight.shape() });
    }
    let plane_out = g.out_h * g.out_w;
    let k = g.patch_len();
    let in_per = g.input.c * g.input.plane();
    let out_per = g.out_c * plane_out;
    let wt = MatLayout::row_major(g.out_c, k).transposed();
    let mut dx = vec![T::zero(); g.input.numel()];
    let gd = grad_out.data();
    let wdata = weight.data();

    if g.is_pointwise() {
        dx.par_chunks_mut(in_per.max(1)).enumerate().for_each(|(n, d)| {
            gemm(
                T::one(),
                wdata,
                wt,
                &gd[n * out_per..(n + 1) * out_per],
                MatLayout::row_major(g.out_c, plane_out),
                T::zero(),
                d,
                MatLayout::row_major(k, plane_out),
            );
        });
    } else {
        let maps = AxisMaps::new(&g.clone());
        let rows = g.rows_per_chunk();
        dx.par_chunks_mut(in_per.max(1)).enumerate().for_each(|(n, d)| {
            let mut y0 = 0;
            let mut cols = Vec::new();
            while y0 < g.out_h {
                let y1 = (y0 + rows).min(g.out_h);
                let p = (y1 - y0) * g.out_w;
                cols.resize(k * p, T::zero());
                let go = &gd[n * out_per + y0 * g.out_w..];
                gemm(
                    T::one(),
                    wdata,
                    wt,
                    go,
                    MatLayout { rows: g.out_c, cols: p, row_stride: plane_out, col_stride: 1 },
                    T::zero(),
                    &mut cols,
                    MatLayout::row_major(k, p),
                );
                col2im(g, &maps, &cols, y0, y1, d);
                y0 = y1;
            }
        });
    }
    Ok(Tensor::from_vec_unchecked(g.input, dx))
}

/// Gradient of `conv2d` with respect to the weight. Accumulates over samples
/// and row chunks in a fixed order.
pub fn conv2d_backward_weight<T: Scalar>(g: &ConvGeometry, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != g.input {
        return Err(Error::ShapeMismatch { op: "conv2d_backward_weight", left: g.input, right: x.shape() });
    }
    if grad_out.shape() != g.output_shape() {
        return Err(Error::ShapeMismatch { op: "conv2d_backward_weight", left: g.output_shape(), right: grad_out.shape() });
    }
    let plane_out = g.out_h * g.out_w;
    let k = g.patch_len();
    let in_per = g.input.c * g.input.plane();
    let out_per = g.out_c * plane_out;
    let mut dw = vec![T::zero(); g.out_c * k];
    let lw = MatLayout::row_major(g.out_c, k);
    let gd = grad_out.data();
    let xd = x.data();

    if g.is_pointwise() {
        for n in 0..g.input.n {
            gemm(
                T::one(),
                &gd[n * out_per..(n + 1) * out_per],
                MatLayout::row_major(g.out_c, plane_out),
                &xd[n * in_per..(n + 1) * in_per],
                MatLayout::row_major(k, plane_out).transposed(),
                T::one(),
                &mut dw,
                lw,
            );
        }
    } else {
        let maps = AxisMaps::new(g);
        let mut cols = Vec::new();
        for (n, y0, y1) in g.chunks() {
            let p = (y1 - y0) * g.out_w;
            cols.resize(k * p, T::zero());
            im2col(g, &maps, &xd[n * in_per..(n + 1) * in_per], y0, y1, &mut cols);
            gemm(
                T::one(),
                &gd[n * out_per + y0 * g.out_w..],
                MatLayout { rows: g.out_c, cols: p, row_stride: plane_out, col_stride: 1 },
                &cols,
                MatLayout::row_major(k, p).transposed(),
                T::one(),
                &mut dw,
                lw,
            );
        }
    }
    Ok(Tensor::from_vec_unchecked(g.weight_shape(), dw))
}

/// Per-output-channel sum of a gradient (bias gradient).
pub fn channel_sums<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let plane = s.plane();
    let mut sums = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, acc) in sums.iter_mut().enumerate() {
            let start = (n * s.c + c) * plane;
            *acc = grad_out.data()[start..start + plane].iter().fold(*acc, |a, &v| a + v);
        }
    }
    Tensor::from_vec_unchecked(Shape::new(s.c, 1, 1, 1), sums)
}

/// Transposed convolution: the exact adjoint of `conv2d(., weight, stride, pad)`.
/// `weight` uses the forward layout `outC × inC × kh × kw`; the input here has
/// `outC` channels and the result has `inC` channels of size `(H-1)s + k - 2p`.
pub fn conv2d_transpose<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: Padding) -> Result<Tensor<T>> {
    let g = ConvGeometry::for_transpose(x.shape(), weight.shape(), stride, pad)?;
    conv2d_backward_input(&g, x, weight)
}

/// A linear operator on 1-D signals stored as sparse taps per output sample.
#[derive(Clone, Debug)]
pub struct LineOp<T: Scalar> {
    pub in_len: usize,
    pub out_len: usize,
    taps: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> LineOp<T> {
    pub fn from_taps(in_len: usize, taps: Vec<Vec<(usize, T)>>) -> Self {
        debug_assert!(taps.iter().flatten().all(|&(i, _)| i < in_len));
        LineOp { in_len, out_len: taps.len(), taps }
    }

    /// Adjoint operator (matrix transpose). Taps are merged per index.
    pub fn transpose(&self) -> Self {
        let mut taps: Vec<Vec<(usize, T)>> = vec![Vec::new(); self.in_len];
        for (o, row) in self.taps.iter().enumerate() {
            for &(i, c) in row {
                match taps[i].iter_mut().find(|(j, _)| *j == o) {
                    Some(slot) => slot.1 = slot.1 + c,
                    None => taps[i].push((o, c)),
                }
            }
        }
        LineOp { in_len: self.out_len, out_len: self.in_len, taps }
    }

    fn apply_line(&self, src: &[T], dst: &mut [T]) {
        for (d, row) in dst.iter_mut().zip(&self.taps) {
            *d = row.iter().fold(T::zero(), |acc, &(i, c)| acc + c * src[i]);
        }
    }

    /// Reflect-extends (or truncates) a signal to `out_len` samples.
    pub fn reflect_resize(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len).map(|i| vec![(reflect_index(i as isize, in_len), T::one())]).collect();
        Self::from_taps(in_len, taps)
    }

    /// Filter with an odd symmetric kernel under reflect padding, then keep
    /// every second sample starting at index 0.
    pub fn filter_decimate(in_len: usize, kernel: &[T]) -> Self {
        let r = (kernel.len() / 2) as isize;
        let taps = (0..in_len / 2)
            .map(|k| {
                let mut row: Vec<(usize, T)> = Vec::new();
                for (t, &c) in kernel.iter().enumerate() {
                    let i = reflect_index(2 * k as isize + t as isize - r, in_len);
                    push_tap(&mut row, i, c);
                }
                row
            })
            .collect();
        Self::from_taps(in_len, taps)
    }

    /// Zero-insertion upsampling by 2 followed by the kernel under reflect
    /// padding of the zero-inserted signal.
    pub fn expand_filter(in_len: usize, kernel: &[T]) -> Self {
        let r = (kernel.len() / 2) as isize;
        let up = 2 * in_len;
        let taps = (0..up)
            .map(|j| {
                let mut row: Vec<(usize, T)> = Vec::new();
                for (t, &c) in kernel.iter().enumerate() {
                    let i = reflect_index(j as isize + t as isize - r, up);
                    if i % 2 == 0 {
                        push_tap(&mut row, i / 2, c);
                    }
                }
                row
            })
            .collect();
        Self::from_taps(in_len, taps)
    }

    /// Half-pixel-centre bilinear upsampling by 2 with edge clamping.
    pub fn bilinear_up2(in_len: usize) -> Self {
        let q = T::of(0.25);
        let tq = T::of(0.75);
        let last = in_len - 1;
        let taps = (0..2 * in_len)
            .map(|j| {
                let k = j / 2;
                let mut row = Vec::new();
                if j % 2 == 0 {
                    push_tap(&mut row, k.saturating_sub(1), q);
                    push_tap(&mut row, k, tq);
                } else {
                    push_tap(&mut row, k, tq);
                    push_tap(&mut row, (k + 1).min(last), q);
                }
                row
            })
            .collect();
        Self::from_taps(in_len, taps)
    }

    /// Half-pixel-centre bilinear downsampling by 2 (pairwise average).
    pub fn bilinear_down2(in_len: usize) -> Self {
        let half = T::of(0.5);
        let taps = (0..in_len / 2).map(|k| vec![(2 * k, half), (2 * k + 1, half)]).collect();
        Self::from_taps(in_len, taps)
    }

    /// Keeps the first `out_len` samples.
    pub fn truncate(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len).map(|i| vec![(i, T::one())]).collect();
        Self::from_taps(in_len, taps)
    }
}

fn push_tap<T: Scalar>(row: &mut Vec<(usize, T)>, i: usize, c: T) {
    match row.iter_mut().find(|(j, _)| *j == i) {
        Some(slot) => slot.1 = slot.1 + c,
        None => row.push((i, c)),
    }
}

/// Applies `rows_op` along H and `cols_op` along W to every plane.
pub fn apply_separable<T: Scalar>(x: &Tensor<T>, rows_op: &LineOp<T>, cols_op: &LineOp<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if rows_op.in_len != s.h || cols_op.in_len != s.w {
        return Err(Error::invalid(
            "separable",
            format!("operator expects {}x{} planes, got {s}", rows_op.in_len, cols_op.in_len),
        ));
    }
    let (oh, ow) = (rows_op.out_len, cols_op.out_len);
    let out_shape = s.with_hw(oh, ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    let in_plane = s.plane();
    out.par_chunks_mut((oh * ow).max(1)).enumerate().for_each(|(p, dst)| {
        let src = &x.data()[p * in_plane..(p + 1) * in_plane];
        // W pass into an H × ow scratch plane.
        let mut tmp = vec![T::zero(); s.h * ow];
        for y in 0..s.h {
            cols_op.apply_line(&src[y * s.w..(y + 1) * s.w], &mut tmp[y * ow..(y + 1) * ow]);
        }
        // H pass as weighted row combinations.
        for (oy, row) in rows_op.taps.iter().enumerate() {
            let d = &mut dst[oy * ow..(oy + 1) * ow];
            for &(iy, c) in row {
                let srow = &tmp[iy * ow..(iy + 1) * ow];
                for (dv, &sv) in d.iter_mut().zip(srow) {
                    *dv = *dv + c * sv;
                }
            }
        }
    });
    Ok(Tensor::from_vec_unchecked(out_shape, out))
}

/// Bilinear resize factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Resize {
    Up2,
    Down2,
}

fn resize_ops<T: Scalar>(s: Shape, scale: Resize) -> Result<(LineOp<T>, LineOp<T>)> {
    match scale {
        Resize::Up2 => {
            if s.h == 0 || s.w == 0 {
                return Err(Error::invalid("bilinear_resize", "empty input"));
            }
            Ok((LineOp::bilinear_up2(s.h), LineOp::bilinear_up2(s.w)))
        }
        Resize::Down2 => {
            if s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0 {
                return Err(Error::invalid(
                    "bilinear_resize",
                    format!("downscale by 2 needs even, non-zero height and width, got {}x{}", s.h, s.w),
                ));
            }
            Ok((LineOp::bilinear_down2(s.h), LineOp::bilinear_down2(s.w)))
        }
    }
}

/// Half-pixel-centre bilinear resize by a factor of 2 or 1/2.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, scale: Resize) -> Result<Tensor<T>> {
    let (r, c) = resize_ops(x.shape(), scale)?;
    apply_separable(x, &r, &c)
}

/// Adjoint of [`bilinear_resize`] for an input of shape `input`.
pub fn bilinear_resize_adjoint<T: Scalar>(grad: &Tensor<T>, input: Shape, scale: Resize) -> Result<Tensor<T>> {
    let (r, c) = resize_ops::<T>(input, scale)?;
    apply_separable(grad, &r.transpose(), &c.transpose())
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

/// Spatial mean and `1/sqrt(var + eps)` per (sample, channel), biased variance.
pub fn instance_stats<T: Scalar>(x: &Tensor<T>, eps: f64) -> Vec<(f64, f64)> {
    let s = x.shape();
    let plane = s.plane();
    x.data()
        .chunks(plane)
        .map(|p| {
            let mean = p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
            let var = p.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / plane as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

fn check_norm_args<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let s = x.shape();
    if s.plane() < 2 {
        return Err(Error::invalid("instance_norm", format!("needs at least 2 pixels per channel, got {}x{}", s.h, s.w)));
    }
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::ShapeMismatch { op: "instance_norm", left: s, right: gamma.shape() });
    }
    Ok(())
}

pub fn instance_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    check_norm_args(x, gamma, beta)?;
    let s = x.shape();
    let stats = instance_stats(x, eps);
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.numel());
    for (i, p) in x.data().chunks(plane).enumerate() {
        let c = i % s.c;
        let (mean, inv) = stats[i];
        let (g, b) = (gamma.data()[c].as_f64(), beta.data()[c].as_f64());
        out.extend(p.iter().map(|v| T::of(g * (v.as_f64() - mean) * inv + b)));
    }
    Ok(Tensor::from_vec_unchecked(s, out))
}

/// Returns `(d input, d gamma, d beta)`.
pub fn instance_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_norm_args(x, gamma, beta)?;
    let s = x.shape();
    let plane = s.plane();
    let stats = instance_stats(x, eps);
    let mut dx = Vec::with_capacity(s.numel());
    let mut dgamma = vec![0.0f64; s.c];
    let mut dbeta = vec![0.0f64; s.c];
    for (i, (p, gp)) in x.data().chunks(plane).zip(grad.data().chunks(plane)).enumerate() {
        let c = i % s.c;
        let (mean, inv) = stats[i];
        let gam = gamma.data()[c].as_f64();
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for (v, g) in p.iter().zip(gp) {
            let xhat = (v.as_f64() - mean) * inv;
            let g = g.as_f64();
            sum_g += g;
            sum_gx += g * xhat;
        }
        dgamma[c] += sum_gx;
        dbeta[c] += sum_g;
        let m_g = gam * sum_g / plane as f64;
        let m_gx = gam * sum_gx / plane as f64;
        dx.extend(p.iter().zip(gp).map(|(v, g)| {
            let xhat = (v.as_f64() - mean) * inv;
            T::of(inv * (gam * g.as_f64() - m_g - xhat * m_gx))
        }));
    }
    let cshape = gamma.shape();
    Ok((
        Tensor::from_vec_unchecked(s, dx),
        Tensor::from_vec_unchecked(cshape, dgamma.into_iter().map(T::of).collect()),
        Tensor::from_vec_unchecked(beta.shape(), dbeta.into_iter().map(T::of).collect()),
    ))
}

/// Multiplies every channel of `x` by the single-channel mask `m`.
pub fn mul_mask<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let (s, ms) = (x.shape(), m.shape());
    if ms.c != 1 || ms.n != s.n || ms.h != s.h || ms.w != s.w {
        return Err(Error::ShapeMismatch { op: "mul_mask", left: s, right: ms });
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.numel());
    for (i, p) in x.data().chunks(plane).enumerate() {
        let n = i / s.c;
        let mp = &m.data()[n * plane..(n + 1) * plane];
        out.extend(p.iter().zip(mp).map(|(&a, &b)| a * b));
    }
    Ok(Tensor::from_vec_unchecked(s, out))
}

/// Sum over channels of `a * b`, producing `N×1×H×W` (mask gradient).
pub fn channel_dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let s = a.shape();
    if b.shape() != s {
        return Err(Error::ShapeMismatch { op: "channel_dot", left: s, right: b.shape() });
    }
    let plane = s.plane();
    let mut out = vec![T::zero(); s.n * plane];
    for n in 0..s.n {
        let dst = &mut out[n * plane..(n + 1) * plane];
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            let (pa, pb) = (&a.data()[start..start + plane], &b.data()[start..start + plane]);
            for ((d, &x), &y) in dst.iter_mut().zip(pa).zip(pb) {
                *d = *d + x * y;
            }
        }
    }
    Ok(Tensor::from_vec_unchecked(s.with_c(1), out))
}

pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?.shape();
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::ShapeMismatch { op: "concat_channels", left: first, right: s });
        }
    }
    let c: usize = xs.iter().map(|t| t.shape().c).sum();
    let out_shape = first.with_c(c);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in xs {
            let per = t.shape().c * first.plane();
            out.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Ok(Tensor::from_vec_unchecked(out_shape, out))
}

/// Splits along channels into pieces with the given channel counts.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, counts: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    if counts.iter().sum::<usize>() != s.c {
        return Err(Error::invalid("split_channels", format!("counts {counts:?} do not sum to {}", s.c)));
    }
    let plane = s.plane();
    let mut parts: Vec<Vec<T>> = counts.iter().map(|&c| Vec::with_capacity(s.n * c * plane)).collect();
    for n in 0..s.n {
        let mut c0 = 0;
        for (part, &c) in parts.iter_mut().zip(counts) {
            let start = (n * s.c + c0) * plane;
            part.extend_from_slice(&x.data()[start..start + c * plane]);
            c0 += c;
        }
    }
    Ok(parts
        .into_iter()
        .zip(counts)
        .map(|(d, &c)| Tensor::from_vec_unchecked(s.with_c(c), d))
        .collect())
}

/// Keeps the top-left `h × w` window.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h > s.h || w > s.w || h == 0 || w == 0 {
        return Err(Error::invalid("crop", format!("cannot crop {s} to {h}x{w}")));
    }
    if (h, w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    apply_separable(x, &LineOp::truncate(s.h, h), &LineOp::truncate(s.w, w))
}

/// Adjoint of [`crop`]: zero-extends to `h × w`.
pub fn uncrop<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = g.shape();
    if (h, w) == (s.h, s.w) {
        return Ok(g.clone());
    }
    let rows = LineOp::<T>::truncate(h, s.h).transpose();
    let cols = LineOp::<T>::truncate(w, s.w).transpose();
    apply_separable(g, &rows, &cols)
}

/// Reflect-pads the bottom and right edges up to `h × w`.
pub fn pad_reflect_br<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h < s.h || w < s.w {
        return Err(Error::invalid("pad", format!("cannot pad {s} down to {h}x{w}")));
    }
    if (h, w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    apply_separable(x, &LineOp::reflect_resize(s.h, h), &LineOp::reflect_resize(s.w, w))
}

/// Copies the `h × w` window whose top-left corner is `(top, left)`.
pub fn crop_at<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h == 0 || w == 0 || top + h > s.h || left + w > s.w {
        return Err(Error::invalid("crop", format!("window {h}x{w} at ({top}, {left}) does not fit {s}")));
    }
    let mut out = Vec::with_capacity(s.n * s.c * h * w);
    for plane in x.data().chunks(s.plane()) {
        for y in top..top + h {
            out.extend_from_slice(&plane[y * s.w + left..y * s.w + left + w]);
        }
    }
    Ok(Tensor::from_vec_unchecked(s.with_hw(h, w), out))
}
