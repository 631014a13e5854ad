//! Independent 64-bit reference implementations used as test oracles.
//! Everything here is written as explicit loops, separate from the
//! production kernels.

#![allow(dead_code)]

use lptn::tensor::kernels::{PadMode, Padding};
use lptn::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_, _, _, _| r.gen_range(lo..hi))
}

pub fn random32(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f32> {
    random(shape, seed, lo, hi).cast()
}

/// Mirror index without edge repetition, by explicit bouncing.
pub fn mirror(mut i: i64, len: usize) -> usize {
    let n = len as i64;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Padded read of x[n, c, y, x] under the given mode; `None` for a zero pad.
pub fn padded_at(x: &Tensor<f64>, n: usize, c: usize, y: i64, xx: i64, mode: PadMode) -> f64 {
    let s = x.shape();
    let inside = y >= 0 && xx >= 0 && (y as usize) < s.h && (xx as usize) < s.w;
    if inside {
        return x.at(n, c, y as usize, xx as usize);
    }
    match mode {
        PadMode::Zero => 0.0,
        PadMode::Reflect => x.at(n, c, mirror(y, s.h), mirror(xx, s.w)),
    }
}

/// Explicit loop-nest cross-correlation.
pub fn conv2d_loops(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: Padding) -> Tensor<f64> {
    let (s, ws) = (x.shape(), w.shape());
    let oh = (s.h + 2 * pad.size - ws.h) / stride + 1;
    let ow = (s.w + 2 * pad.size - ws.w) / stride + 1;
    Tensor::from_fn(Shape::new(s.n, ws.n, oh, ow), |n, o, oy, ox| {
        let mut acc = b.map(|b| b.data()[o]).unwrap_or(0.0);
        for c in 0..s.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let y = (oy * stride + ky) as i64 - pad.size as i64;
                    let xx = (ox * stride + kx) as i64 - pad.size as i64;
                    acc += w.at(o, c, ky, kx) * padded_at(x, n, c, y, xx, pad.mode);
                }
            }
        }
        acc
    })
}

/// Normwise relative error `max|a - b| / max(max|a|, max|b|)`.
pub fn rel_err<A: lptn::Scalar, B: lptn::Scalar>(a: &Tensor<A>, b: &Tensor<B>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff = diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub const K1D: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Gaussian-pyramid reduce by explicit 5x5 weighted averaging.
pub fn pyr_down_loops(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(s.with_hw(s.h / 2, s.w / 2), |n, c, i, j| {
        let mut acc = 0.0;
        for a in 0..5 {
            for b in 0..5 {
                let y = 2 * i as i64 + a as i64 - 2;
                let xx = 2 * j as i64 + b as i64 - 2;
                acc += K1D[a] * K1D[b] * padded_at(x, n, c, y, xx, PadMode::Reflect);
            }
        }
        acc
    })
}

/// Expand: zero-insert to 2H x 2W, mirror-pad that signal, convolve with 4*k2d.
pub fn pyr_up_loops(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let up = Tensor::from_fn(s.with_hw(2 * s.h, 2 * s.w), |n, c, y, xx| {
        if y % 2 == 0 && xx % 2 == 0 {
            x.at(n, c, y / 2, xx / 2)
        } else {
            0.0
        }
    });
    Tensor::from_fn(up.shape(), |n, c, i, j| {
        let mut acc = 0.0;
        for a in 0..5 {
            for b in 0..5 {
                let y = i as i64 + a as i64 - 2;
                let xx = j as i64 + b as i64 - 2;
                acc += 4.0 * K1D[a] * K1D[b] * padded_at(&up, n, c, y, xx, PadMode::Reflect);
            }
        }
        acc
    })
}

/// Half-pixel bilinear sample with edge clamping.
pub fn bilinear_at(x: &Tensor<f64>, n: usize, c: usize, sy: f64, sx: f64) -> f64 {
    let s = x.shape();
    let clamp = |v: f64, len: usize| v.max(0.0).min((len - 1) as f64);
    let (sy, sx) = (clamp(sy, s.h), clamp(sx, s.w));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let top = x.at(n, c, y0, x0) * (1.0 - fx) + x.at(n, c, y0, x1) * fx;
    let bot = x.at(n, c, y1, x0) * (1.0 - fx) + x.at(n, c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

pub fn resize_loops(x: &Tensor<f64>, factor: f64) -> Tensor<f64> {
    let s = x.shape();
    let (oh, ow) = ((s.h as f64 * factor) as usize, (s.w as f64 * factor) as usize);
    Tensor::from_fn(s.with_hw(oh, ow), |n, c, i, j| {
        let sy = (i as f64 + 0.5) / factor - 0.5;
        let sx = (j as f64 + 0.5) / factor - 0.5;
        bilinear_at(x, n, c, sy, sx)
    })
}
