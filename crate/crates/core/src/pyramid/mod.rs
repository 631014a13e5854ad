//! Closed-form Laplacian pyramid.
//!
//! `decompose` iterates `I_{l+1} = pyr_down(I_l)` and `h_l = I_l - pyr_up(I_{l+1})`;
//! `reconstruct` runs the mirror recursion `I_l = pyr_up(I_{l+1}) + h_l`.
//! Images whose sides are not multiples of `2^L` are reflect-padded on the
//! bottom/right first and cropped back after reconstruction.

pub mod kernel;

pub use kernel::{pyr_down, pyr_up, PyramidKernel};

use crate::error::{Error, Result};
use crate::tensor::kernels::{crop, pad_reflect_br};
use crate::tensor::{Scalar, Tensor};

/// Number of histogram bins used by [`band_stats`].
pub const HIST_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPyramid<T: Scalar = f32> {
    /// Band-pass residuals `h_0 .. h_{L-1}`, finest first.
    pub highs: Vec<Tensor<T>>,
    /// Low-frequency residual `I_L`.
    pub low: Tensor<T>,
    /// `(height, width)` before padding.
    pub original_size: (usize, usize),
}

/// Smallest `m`-multiple that is `>= n`.
pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Largest level count whose residual `I_L` keeps at least 2 pixels per
/// side once the image is padded to a multiple of `2^L`.
pub fn max_levels(h: usize, w: usize) -> usize {
    let mut l = 0;
    while l < 30 && h.div_ceil(1 << (l + 1)) >= 2 && w.div_ceil(1 << (l + 1)) >= 2 {
        l += 1;
    }
    l
}

pub fn check_levels(levels: usize, h: usize, w: usize) -> Result<()> {
    let max = max_levels(h, w);
    if levels == 0 || levels > max {
        return Err(Error::TooManyLevels { levels, height: h, width: w, max });
    }
    Ok(())
}

/// Reflect-pads bottom/right to the next multiple of `m`; returns the
/// padded tensor and the original `(height, width)`.
pub fn pad_to_multiple<T: Scalar>(img: &Tensor<T>, m: usize) -> Result<(Tensor<T>, (usize, usize))> {
    if m == 0 {
        return Err(Error::invalid("pad_to_multiple", "multiple must be positive"));
    }
    let s = img.shape();
    let padded = pad_reflect_br(img, round_up(s.h, m), round_up(s.w, m))?;
    Ok((padded, (s.h, s.w)))
}

impl<T: Scalar> LaplacianPyramid<T> {
    pub fn levels(&self) -> usize {
        self.highs.len()
    }

    /// Decomposes `img` into `levels` band-pass residuals and a low band.
    pub fn decompose(img: &Tensor<T>, levels: usize) -> Result<Self> {
        let s = img.shape();
        check_levels(levels, s.h, s.w)?;
        let (padded, original_size) = pad_to_multiple(img, 1 << levels)?;
        let mut highs = Vec::with_capacity(levels);
        let mut current = padded;
        for _ in 0..levels {
            let down = pyr_down(&current)?;
            let up = pyr_up(&down)?;
            highs.push(current.sub(&up)?);
            current = down;
        }
        Ok(LaplacianPyramid { highs, low: current, original_size })
    }

    pub fn validate(&self) -> Result<()> {
        if self.highs.is_empty() {
            return Err(Error::invalid("reconstruct", "pyramid has no band-pass levels"));
        }
        let mut below = self.low.shape();
        for (l, h) in self.highs.iter().enumerate().rev() {
            let s = h.shape();
            if (s.n, s.c) != (below.n, below.c) || s.h != 2 * below.h || s.w != 2 * below.w {
                return Err(Error::invalid(
                    "reconstruct",
                    format!("level {l} has shape {s}, expected twice the spatial size of {below}"),
                ));
            }
            below = s;
        }
        let (oh, ow) = self.original_size;
        if oh > below.h || ow > below.w || oh == 0 || ow == 0 {
            return Err(Error::invalid(
                "reconstruct",
                format!("original size {oh}x{ow} does not fit level-0 size {}x{}", below.h, below.w),
            ));
        }
        Ok(())
    }

    /// Mirror recursion back to level 0, cropped to the original size.
    pub fn reconstruct(&self) -> Result<Tensor<T>> {
        self.validate()?;
        let mut current = self.low.clone();
        for h in self.highs.iter().rev() {
            current = pyr_up(&current)?.add(h)?;
        }
        crop(&current, self.original_size.0, self.original_size.1)
    }

    pub fn map_bands(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        LaplacianPyramid {
            highs: self.highs.iter().map(&f).collect(),
            low: f(&self.low),
            original_size: self.original_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    High(usize),
    Low,
}

/// Per-band comparison of two pyramids.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStat {
    pub band: Band,
    pub mse: f64,
    pub hist_a: [u64; HIST_BINS],
    pub hist_b: [u64; HIST_BINS],
}

/// Histogram of values over `[-1, 1]`; values outside land in the edge bins.
pub fn histogram<T: Scalar>(t: &Tensor<T>) -> [u64; HIST_BINS] {
    let mut hist = [0u64; HIST_BINS];
    for v in t.data() {
        let pos = (v.as_f64() + 1.0) / 2.0 * HIST_BINS as f64;
        let bin = if pos.is_nan() { 0 } else { pos.floor().clamp(0.0, (HIST_BINS - 1) as f64) as usize };
        hist[bin] += 1;
    }
    hist
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "band_stats", left: a.shape(), right: b.shape() });
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(sum / a.len().max(1) as f64)
}

/// MSE and intensity histograms per band: `h_0 .. h_{L-1}` then the low band.
pub fn band_stats<T: Scalar>(a: &LaplacianPyramid<T>, b: &LaplacianPyramid<T>) -> Result<Vec<BandStat>> {
    if a.levels() != b.levels() {
        return Err(Error::invalid("band_stats", format!("level counts differ: {} vs {}", a.levels(), b.levels())));
    }
    let mut out = Vec::with_capacity(a.levels() + 1);
    for (l, (ha, hb)) in a.highs.iter().zip(&b.highs).enumerate() {
        out.push(BandStat { band: Band::High(l), mse: mse(ha, hb)?, hist_a: histogram(ha), hist_b: histogram(hb) });
    }
    out.push(BandStat { band: Band::Low, mse: mse(&a.low, &b.low)?, hist_a: histogram(&a.low), hist_b: histogram(&b.low) });
    Ok(out)
}
