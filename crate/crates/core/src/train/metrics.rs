//! PSNR and SSIM for images in `[-1, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Value range of `[-1, 1]` images.
pub const PEAK: f64 = 2.0;
/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
}

fn check<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, left: a.shape(), right: b.shape() });
    }
    Ok(())
}

pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check(a, b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>()
        / a.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" Gaussian filter of one `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * p[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and batch with an 11x11 Gaussian window
/// (sigma 1.5) and `C1 = (0.01 * 2)^2`, `C2 = (0.03 * 2)^2`.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check(a, b, "ssim")?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let c1 = (0.01 * PEAK).powi(2);
    let c2 = (0.03 * PEAK).powi(2);
    let k = gaussian_window();
    let plane = s.plane();
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.data().chunks(plane).zip(b.data().chunks(plane)) {
        let x: Vec<f64> = pa.iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = pb.iter().map(|v| v.as_f64()).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mx = filter_valid(&x, s.h, s.w, &k);
        let my = filter_valid(&y, s.h, s.w, &k);
        let sxx = filter_valid(&prod(&x, &x), s.h, s.w, &k);
        let syy = filter_valid(&prod(&y, &y), s.h, s.w, &k);
        let sxy = filter_valid(&prod(&x, &y), s.h, s.w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Average PSNR and SSIM over `(output, reference)` pairs.
pub fn eval_metrics<T: Scalar>(pairs: &[(Tensor<T>, Tensor<T>)]) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(Error::invalid("eval_metrics", "no image pairs"));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (a, b) in pairs {
        p += psnr(a, b)?;
        s += ssim(a, b)?;
    }
    let n = pairs.len() as f64;
    Ok(Metrics { psnr: p / n, ssim: s / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn ramp() -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, 3, 24, 20), |_, c, y, x| ((c * 7 + y * 3 + x) as f64 * 0.13).sin() * 0.8)
    }

    #[test]
    fn identical_images() {
        let a = ramp();
        let m = eval_metrics(&[(a.clone(), a)]).unwrap();
        assert_eq!(m.psnr, PSNR_CAP);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_psnr() {
        let a = ramp();
        let b = a.map(|v| v + 0.1);
        let expected = 10.0 * (4.0f64 / 0.01).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 26.0206).abs() < 1e-4);
    }

    #[test]
    fn ssim_drops_with_noise_and_rejects_small() {
        let a = ramp();
        let b = a.zip_map(&Tensor::from_fn(a.shape(), |_, c, y, x| ((c + y * 31 + x * 17) % 7) as f64 * 0.05), "t", |p, q| p + q).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.99 && s > 0.0);
        let tiny = Tensor::<f64>::zeros(Shape::new(1, 1, 8, 8));
        assert!(ssim(&tiny, &tiny).is_err());
        assert!(psnr(&a, &tiny).is_err());
    }
}
