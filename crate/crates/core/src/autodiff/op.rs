//! Operation definitions shared by the recording tape and eager execution.

use std::fmt;

use crate::error::{Error, Result};
use crate::pyramid::kernel as pyr;
use crate::tensor::kernels::{self, ConvGeometry, Padding, Resize};
use crate::tensor::{Scalar, Tensor};

/// Operation tag with its static parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// inputs: x, weight, [bias]
    Conv2d { stride: usize, pad: Padding },
    /// inputs: x, weight
    Conv2dTranspose { stride: usize, pad: Padding },
    Resize(Resize),
    LeakyRelu { slope: f64 },
    Tanh,
    /// inputs: x, gamma, beta
    InstanceNorm { eps: f64 },
    Add,
    Sub,
    Mul,
    /// inputs: x (N×C×H×W), mask (N×1×H×W)
    MulMask,
    ConcatChannels,
    PyrDown,
    PyrUp,
    Crop { h: usize, w: usize },
    Scale(f64),
    AddScalar(f64),
    Square,
    Mean,
    Sum,
}

/// Coarse op family, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv2d,
    Conv2dTranspose,
    Resize,
    LeakyRelu,
    Tanh,
    InstanceNorm,
    Add,
    Sub,
    Mul,
    MulMask,
    ConcatChannels,
    PyrDown,
    PyrUp,
    Crop,
    Scale,
    AddScalar,
    Square,
    Mean,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Conv2d,
        OpKind::Conv2dTranspose,
        OpKind::Resize,
        OpKind::LeakyRelu,
        OpKind::Tanh,
        OpKind::InstanceNorm,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::MulMask,
        OpKind::ConcatChannels,
        OpKind::PyrDown,
        OpKind::PyrUp,
        OpKind::Crop,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Square,
        OpKind::Mean,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Conv2dTranspose => "conv2d_transpose",
            OpKind::Resize => "bilinear_resize",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Tanh => "tanh",
            OpKind::InstanceNorm => "instance_norm",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MulMask => "broadcast_mul_mask",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::PyrDown => "pyr_down",
            OpKind::PyrUp => "pyr_up",
            OpKind::Crop => "crop",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Square => "square",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Conv2dTranspose { .. } => OpKind::Conv2dTranspose,
            Op::Resize(_) => OpKind::Resize,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Tanh => OpKind::Tanh,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::MulMask => OpKind::MulMask,
            Op::ConcatChannels => OpKind::ConcatChannels,
            Op::PyrDown => OpKind::PyrDown,
            Op::PyrUp => OpKind::PyrUp,
            Op::Crop { .. } => OpKind::Crop,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Square => OpKind::Square,
            Op::Mean => OpKind::Mean,
            Op::Sum => OpKind::Sum,
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Op::Conv2d { .. } => n == 2 || n == 3,
            Op::Conv2dTranspose { .. } => n == 2,
            Op::InstanceNorm { .. } => n == 3,
            Op::Add | Op::Sub | Op::Mul | Op::MulMask => n == 2,
            Op::ConcatChannels => n >= 1,
            _ => n == 1,
        }
    }
}

/// Evaluates `op` on concrete values.
pub fn forward<T: Scalar>(op: &Op, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if !op.arity_ok(xs.len()) {
        return Err(Error::Internal(format!("{} called with {} inputs", op.kind(), xs.len())));
    }
    match op {
        Op::Conv2d { stride, pad } => kernels::conv2d(xs[0], xs[1], xs.get(2).copied(), *stride, *pad),
        Op::Conv2dTranspose { stride, pad } => kernels::conv2d_transpose(xs[0], xs[1], *stride, *pad),
        Op::Resize(r) => kernels::bilinear_resize(xs[0], *r),
        Op::LeakyRelu { slope } => {
            if !(*slope > 0.0 && *slope < 1.0) {
                return Err(Error::invalid("leaky_relu", format!("slope {slope} outside (0, 1)")));
            }
            Ok(kernels::leaky_relu(xs[0], T::of(*slope)))
        }
        Op::Tanh => Ok(xs[0].map(|v| v.tanh())),
        Op::InstanceNorm { eps } => kernels::instance_norm(xs[0], xs[1], xs[2], *eps),
        Op::Add => xs[0].add(xs[1]),
        Op::Sub => xs[0].sub(xs[1]),
        Op::Mul => xs[0].mul(xs[1]),
        Op::MulMask => kernels::mul_mask(xs[0], xs[1]),
        Op::ConcatChannels => kernels::concat_channels(xs),
        Op::PyrDown => pyr::pyr_down(xs[0]),
        Op::PyrUp => pyr::pyr_up(xs[0]),
        Op::Crop { h, w } => kernels::crop(xs[0], *h, *w),
        Op::Scale(k) => Ok(xs[0].scale(T::of(*k))),
        Op::AddScalar(k) => {
            let k = T::of(*k);
            Ok(xs[0].map(|v| v + k))
        }
        Op::Square => Ok(xs[0].map(|v| v * v)),
        Op::Mean => Ok(Tensor::scalar(T::of(xs[0].mean()))),
        Op::Sum => Ok(Tensor::scalar(T::of(xs[0].sum()))),
    }
}

/// Vector-Jacobian product: gradients for each input given the output
/// gradient. `wanted[i]` false skips the (possibly expensive) computation.
pub fn backward<T: Scalar>(
    op: &Op,
    xs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    wanted: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; xs.len()];
    match op {
        Op::Conv2d { stride, pad } => {
            let geom = ConvGeometry::new(xs[0].shape(), xs[1].shape(), *stride, *pad)?;
            if want(0) {
                grads[0] = Some(kernels::conv2d_backward_input(&geom, g, xs[1])?);
            }
            if want(1) {
                grads[1] = Some(kernels::conv2d_backward_weight(&geom, xs[0], g)?);
            }
            if xs.len() == 3 && want(2) {
                grads[2] = Some(kernels::channel_sums(g).reshape(xs[2].shape())?);
            }
        }
        Op::Conv2dTranspose { stride, pad } => {
            // out = A^T x where A is conv2d(., w); d x = A g, d w = dW(conv of g with cotangent x).
            let geom = ConvGeometry::for_transpose(xs[0].shape(), xs[1].shape(), *stride, *pad)?;
            if want(0) {
                grads[0] = Some(kernels::conv2d(g, xs[1], None, *stride, *pad)?);
            }
            if want(1) {
                grads[1] = Some(kernels::conv2d_backward_weight(&geom, g, xs[0])?);
            }
        }
        Op::Resize(r) => {
            if want(0) {
                grads[0] = Some(kernels::bilinear_resize_adjoint(g, xs[0].shape(), *r)?);
            }
        }
        Op::LeakyRelu { slope } => {
            let s = T::of(*slope);
            grads[0] = Some(xs[0].zip_map(g, "leaky_relu", |x, g| if x >= T::zero() { g } else { s * g })?);
        }
        Op::Tanh => {
            grads[0] = Some(out.zip_map(g, "tanh", |y, g| g * (T::one() - y * y))?);
        }
        Op::InstanceNorm { eps } => {
            let (dx, dg, db) = kernels::instance_norm_backward(xs[0], xs[1], xs[2], *eps, g)?;
            grads = vec![Some(dx), Some(dg), Some(db)];
        }
        Op::Add => {
            grads = vec![Some(g.clone()), Some(g.clone())];
        }
        Op::Sub => {
            grads = vec![Some(g.clone()), Some(g.scale(-T::one()))];
        }
        Op::Mul => {
            if want(0) {
                grads[0] = Some(g.mul(xs[1])?);
            }
            if want(1) {
                grads[1] = Some(g.mul(xs[0])?);
            }
        }
        Op::MulMask => {
            if want(0) {
                grads[0] = Some(kernels::mul_mask(g, xs[1])?);
            }
            if want(1) {
                grads[1] = Some(kernels::channel_dot(g, xs[0])?);
            }
        }
        Op::ConcatChannels => {
            let counts: Vec<usize> = xs.iter().map(|t| t.shape().c).collect();
            grads = kernels::split_channels(g, &counts)?.into_iter().map(Some).collect();
        }
        Op::PyrDown => grads[0] = Some(pyr::pyr_down_adjoint(g, xs[0].shape())?),
        Op::PyrUp => grads[0] = Some(pyr::pyr_up_adjoint(g, xs[0].shape())?),
        Op::Crop { .. } => {
            let s = xs[0].shape();
            grads[0] = Some(kernels::uncrop(g, s.h, s.w)?);
        }
        Op::Scale(k) => grads[0] = Some(g.scale(T::of(*k))),
        Op::AddScalar(_) => grads[0] = Some(g.clone()),
        Op::Square => {
            let two = T::of(2.0);
            grads[0] = Some(xs[0].zip_map(g, "square", |x, g| two * x * g)?);
        }
        Op::Mean => {
            let v = g.item()? / T::of(xs[0].len() as f64);
            grads[0] = Some(Tensor::full(xs[0].shape(), v));
        }
        Op::Sum => grads[0] = Some(Tensor::full(xs[0].shape(), g.item()?)),
    }
    for (i, gr) in grads.iter_mut().enumerate() {
        if !want(i) {
            *gr = None;
        }
    }
    Ok(grads)
}

