//! The fixed 5-tap binomial low-pass kernel and the two resampling operators
//! built from it.

use crate::error::{Error, Result};
use crate::tensor::kernels::{apply_separable, LineOp};
use crate::tensor::{Scalar, Shape, Tensor};

/// Integer stencil of the 1-D kernel; the normalised kernel divides by 16.
pub const STENCIL: [u32; 5] = [1, 4, 6, 4, 1];
pub const STENCIL_SUM: u32 = 16;

/// The pyramid low-pass kernel in its separable and 2-D forms.
#[derive(Clone, Copy, Debug)]
pub struct PyramidKernel;

impl PyramidKernel {
    /// `[1, 4, 6, 4, 1] / 16`.
    pub fn k1d<T: Scalar>() -> [T; 5] {
        STENCIL.map(|v| T::of(v as f64 / STENCIL_SUM as f64))
    }

    /// 1-D factor of the expansion kernel: `2 * k1d`, so the 2-D kernel is `4 * k2d`.
    pub fn up1d<T: Scalar>() -> [T; 5] {
        STENCIL.map(|v| T::of(2.0 * v as f64 / STENCIL_SUM as f64))
    }

    /// Integer numerators of `k2d`; the denominator is 256.
    pub fn k2d_numerators() -> [[u32; 5]; 5] {
        let mut k = [[0; 5]; 5];
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = STENCIL[i] * STENCIL[j];
            }
        }
        k
    }

    pub fn k2d<T: Scalar>() -> [[T; 5]; 5] {
        Self::k2d_numerators().map(|row| row.map(|v| T::of(v as f64 / 256.0)))
    }

    pub fn up2d<T: Scalar>() -> [[T; 5]; 5] {
        Self::k2d_numerators().map(|row| row.map(|v| T::of(4.0 * v as f64 / 256.0)))
    }
}

fn down_ops<T: Scalar>(s: Shape) -> Result<(LineOp<T>, LineOp<T>)> {
    if s.h % 2 != 0 || s.w % 2 != 0 || s.h < 2 || s.w < 2 {
        return Err(Error::invalid("pyr_down", format!("needs even height and width, got {}x{}", s.h, s.w)));
    }
    let k = PyramidKernel::k1d::<T>();
    Ok((LineOp::filter_decimate(s.h, &k), LineOp::filter_decimate(s.w, &k)))
}

fn up_ops<T: Scalar>(s: Shape) -> Result<(LineOp<T>, LineOp<T>)> {
    if s.h == 0 || s.w == 0 {
        return Err(Error::invalid("pyr_up", "empty input"));
    }
    let k = PyramidKernel::up1d::<T>();
    Ok((LineOp::expand_filter(s.h, &k), LineOp::expand_filter(s.w, &k)))
}

/// Blur with `k2d` under reflect padding, then keep even rows and columns.
pub fn pyr_down<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = down_ops(x.shape())?;
    apply_separable(x, &r, &c)
}

/// Insert zeros to double the size, then blur with `4 * k2d` under reflect padding.
pub fn pyr_up<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = up_ops(x.shape())?;
    apply_separable(x, &r, &c)
}

pub fn pyr_down_adjoint<T: Scalar>(g: &Tensor<T>, input: Shape) -> Result<Tensor<T>> {
    let (r, c) = down_ops::<T>(input)?;
    apply_separable(g, &r.transpose(), &c.transpose())
}

pub fn pyr_up_adjoint<T: Scalar>(g: &Tensor<T>, input: Shape) -> Result<Tensor<T>> {
    let (r, c) = up_ops::<T>(input)?;
    apply_separable(g, &r.transpose(), &c.transpose())
}
