//! Multi-scale patch discriminator.
//!
//! Each scale runs the same stack of stride-2 4x4 convolutions followed by a
//! one-channel 4x4 convolution that scores overlapping patches. Scale `s`
//! sees the image average-pooled `s` times by a factor of two.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::kernels::{Padding, Resize};
use crate::tensor::{Scalar, Shape, Tensor};

use super::generator::NORM_EPS;
use super::params::{conv_specs, norm_specs, Bound, Fill, ParamSet, ParamSpec};

pub const KERNEL: usize = 4;
const FINAL_PAD: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub image_channels: usize,
    /// Width of the first layer; each later layer doubles it up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    pub num_layers: usize,
    pub num_scales: usize,
    pub leaky_slope: f64,
    /// Instance norm on every layer except the first.
    pub use_instance_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            image_channels: 3,
            base_channels: 64,
            max_channels: 512,
            num_layers: 4,
            num_scales: 3,
            leaky_slope: 0.2,
            use_instance_norm: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_channels == 0 || self.max_channels == 0 {
            return Err(Error::invalid("discriminator config", "channel counts must be at least 1"));
        }
        if self.num_layers == 0 || self.num_scales == 0 {
            return Err(Error::invalid("discriminator config", "num_layers and num_scales must be at least 1"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("discriminator config", format!("leaky_slope {} outside (0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn layer_channels(&self, i: usize) -> usize {
        (self.base_channels << i.min(30)).min(self.max_channels)
    }

    /// Smallest admissible side length. The coarsest scale must still have
    /// at least 2x2 activations after the last stride-2 layer when instance
    /// norm is on (1x1 otherwise), and every pooling step needs an even side.
    pub fn min_side(&self) -> usize {
        let last = if self.use_instance_norm && self.num_layers > 1 { 2 } else { 1 };
        last << (self.num_layers + self.num_scales - 1)
    }

    pub fn check_input(&self, s: Shape) -> Result<()> {
        let min = self.min_side();
        let pool = 1 << (self.num_scales - 1);
        if s.c != self.image_channels {
            return Err(Error::invalid(
                "discriminator",
                format!("input has {} channels, expected {}", s.c, self.image_channels),
            ));
        }
        if s.h < min || s.w < min {
            return Err(Error::invalid(
                "discriminator",
                format!("input {}x{} is below the minimum {min}x{min}", s.h, s.w),
            ));
        }
        if s.h % pool != 0 || s.w % pool != 0 {
            return Err(Error::invalid("discriminator", format!("input sides must be multiples of {pool}")));
        }
        Ok(())
    }

    /// Patch-map shape at every scale for an `h x w` input.
    pub fn output_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..self.num_scales)
            .map(|s| {
                let (mut a, mut b) = (h >> s, w >> s);
                for _ in 0..self.num_layers {
                    a = (a + 2 - KERNEL) / 2 + 1;
                    b = (b + 2 - KERNEL) / 2 + 1;
                }
                (a + 2 * FINAL_PAD + 1 - KERNEL, b + 2 * FINAL_PAD + 1 - KERNEL)
            })
            .collect()
    }
}

pub fn discriminator_layout(cfg: &DiscriminatorConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut s = Vec::new();
    for scale in 0..cfg.num_scales {
        let mut c_in = cfg.image_channels;
        for i in 0..cfg.num_layers {
            let c_out = cfg.layer_channels(i);
            let fan = c_in * KERNEL * KERNEL;
            conv_specs(&mut s, &format!("scales.{scale}.layers.{i}"), c_in, c_out, KERNEL, Fill::FanIn(fan), Fill::FanIn(fan));
            if cfg.use_instance_norm && i > 0 {
                norm_specs(&mut s, &format!("scales.{scale}.layers.{i}.norm"), c_out);
            }
            c_in = c_out;
        }
        let fan = c_in * KERNEL * KERNEL;
        conv_specs(&mut s, &format!("scales.{scale}.out"), c_in, 1, KERNEL, Fill::FanIn(fan), Fill::FanIn(fan));
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Scalar = f32> {
    pub config: DiscriminatorConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let layout = discriminator_layout(&config)?;
        Ok(Discriminator { params: ParamSet::init(&layout, seed), config })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamSet<T>) -> Result<Self> {
        params.check_layout(&discriminator_layout(&config)?)?;
        Ok(Discriminator { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator { config: self.config.clone(), params: self.params.cast() }
    }

    /// Value-only patch maps, one per scale.
    pub fn patch_maps(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = crate::autodiff::Eager;
        let p = self.params.bind(&mut g, false);
        d_forward_multiscale(&mut g, &p, &self.config, img)
    }
}

fn conv_layer<T: Scalar, G: Graph<T>>(
    g: &mut G,
    p: &Bound<G::Node>,
    name: &str,
    x: &G::Node,
    stride: usize,
    pad: usize,
) -> Result<G::Node> {
    let w = p.get(&format!("{name}.weight"))?.clone();
    let b = p.get(&format!("{name}.bias"))?.clone();
    g.conv2d(x, &w, Some(&b), stride, Padding::zero(pad))
}

/// Patch maps at every scale, finest first.
pub fn d_forward_multiscale<T: Scalar, G: Graph<T>>(
    g: &mut G,
    p: &Bound<G::Node>,
    cfg: &DiscriminatorConfig,
    img: &G::Node,
) -> Result<Vec<G::Node>> {
    cfg.check_input(g.value(img).shape())?;
    let mut maps = Vec::with_capacity(cfg.num_scales);
    let mut x = img.clone();
    for scale in 0..cfg.num_scales {
        if scale > 0 {
            x = g.resize(&x, Resize::Down2)?;
        }
        let mut h = x.clone();
        for i in 0..cfg.num_layers {
            let name = format!("scales.{scale}.layers.{i}");
            h = conv_layer(g, p, &name, &h, 2, 1)?;
            if cfg.use_instance_norm && i > 0 {
                let gamma = p.get(&format!("{name}.norm.gamma"))?.clone();
                let beta = p.get(&format!("{name}.norm.beta"))?.clone();
                h = g.instance_norm(&h, &gamma, &beta, NORM_EPS)?;
            }
            h = g.leaky_relu(&h, cfg.leaky_slope)?;
        }
        maps.push(conv_layer(g, p, &format!("scales.{scale}.out"), &h, 1, FINAL_PAD)?);
    }
    Ok(maps)
}
