//! The translation generator.
//!
//! A small residual network translates the low band `I_L`. A second,
//! narrower network looks at `[up(I_L), up(Î_L), h_{L-1}]` and predicts a
//! one-channel mask for the coarsest high band. Finer masks come from
//! bilinear upsampling, optionally followed by a two-conv correction block.
//! The output is the pyramid reconstruction of `Î_L` and the masked highs.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::pyramid::{check_levels, LaplacianPyramid};
use crate::tensor::kernels::{Padding, Resize};
use crate::tensor::{Scalar, Shape, Tensor};

use super::params::{conv_specs, norm_specs, Bound, Fill, ParamSet, ParamSpec};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub levels: usize,
    pub image_channels: usize,
    pub low_channels: usize,
    pub mask_channels: usize,
    pub num_res_blocks: usize,
    pub leaky_slope: f64,
    pub use_instance_norm: bool,
    pub refine_high: bool,
    /// Indexed by level `l` in `0..levels-1`.
    pub finetune_enabled: Vec<bool>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::with_levels(3)
    }
}

impl GeneratorConfig {
    pub fn with_levels(levels: usize) -> Self {
        GeneratorConfig {
            levels,
            image_channels: 3,
            low_channels: 64,
            mask_channels: 16,
            num_res_blocks: 5,
            leaky_slope: 0.2,
            use_instance_norm: true,
            refine_high: true,
            finetune_enabled: vec![true; levels.saturating_sub(1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("generator config", reason));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.image_channels == 0 || self.low_channels == 0 || self.mask_channels == 0 {
            return bad("channel counts must be at least 1".into());
        }
        if self.num_res_blocks == 0 {
            return bad("num_res_blocks must be at least 1".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        if self.finetune_enabled.len() != self.levels - 1 {
            return bad(format!(
                "finetune_enabled has {} entries, expected {}",
                self.finetune_enabled.len(),
                self.levels - 1
            ));
        }
        Ok(())
    }
}

/// Starting point for generator weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Residual branches, mask weights and finetune output convs start at
    /// zero and mask biases at one, so the generator maps `x` to
    /// `reconstruct(tanh(I_L), h)`.
    Identity,
    /// Fan-in uniform everywhere except the mask bias (one) and the finetune
    /// output conv (zero).
    Random,
}

fn res_block_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, norm: bool) {
    let fan = c * 9;
    for conv in ["conv1", "conv2"] {
        conv_specs(out, &format!("{prefix}.{conv}"), c, c, 3, Fill::FanIn(fan), Fill::FanIn(fan));
        if norm {
            let n = if conv == "conv1" { "norm1" } else { "norm2" };
            norm_specs(out, &format!("{prefix}.{n}"), c);
        }
    }
}

/// Every generator tensor with its shape and initial fill.
pub fn generator_layout(cfg: &GeneratorConfig, scheme: InitScheme) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let identity = scheme == InitScheme::Identity;
    let c = cfg.image_channels;
    let (lc, mc) = (cfg.low_channels, cfg.mask_channels);
    let mut s = Vec::new();

    conv_specs(&mut s, "low_net.expand", c, lc, 1, Fill::FanIn(c), Fill::FanIn(c));
    for b in 0..cfg.num_res_blocks {
        res_block_specs(&mut s, &format!("low_net.res_blocks.{b}"), lc, true);
    }
    let reduce = if identity { Fill::Zeros } else { Fill::FanIn(lc) };
    conv_specs(&mut s, "low_net.reduce", lc, c, 1, reduce, reduce);

    conv_specs(&mut s, "mask_net.expand", 3 * c, mc, 1, Fill::FanIn(3 * c), Fill::FanIn(3 * c));
    for b in 0..cfg.num_res_blocks {
        res_block_specs(&mut s, &format!("mask_net.res_blocks.{b}"), mc, false);
    }
    let to_mask = if identity { Fill::Zeros } else { Fill::FanIn(mc) };
    conv_specs(&mut s, "mask_net.to_mask", mc, 1, 1, to_mask, Fill::Ones);

    for l in (0..cfg.levels - 1).rev() {
        let p = format!("finetune_blocks.{l}");
        conv_specs(&mut s, &format!("{p}.conv1"), 1, mc, 3, Fill::FanIn(9), Fill::FanIn(9));
        conv_specs(&mut s, &format!("{p}.conv2"), mc, 1, 3, Fill::Zeros, Fill::Zeros);
    }
    Ok(s)
}

/// Generator configuration and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Scalar = f32> {
    pub config: GeneratorConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, scheme: InitScheme, seed: u64) -> Result<Self> {
        let layout = generator_layout(&config, scheme)?;
        Ok(Generator { params: ParamSet::init(&layout, seed), config })
    }

    /// Wraps existing weights after checking them against the config.
    pub fn from_params(config: GeneratorConfig, params: ParamSet<T>) -> Result<Self> {
        params.check_layout(&generator_layout(&config, InitScheme::Random)?)?;
        Ok(Generator { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator { config: self.config.clone(), params: self.params.cast() }
    }

    /// Value-only forward pass.
    pub fn translate(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = crate::autodiff::Eager;
        let p = self.params.bind(&mut g, false);
        let pyr = decompose_input(img, &self.config)?;
        Ok(generator_forward(&mut g, &p, &self.config, &pyr)?.image)
    }
}

/// Decomposes `img` with the config's level count.
pub fn decompose_input<T: Scalar>(img: &Tensor<T>, cfg: &GeneratorConfig) -> Result<LaplacianPyramid<T>> {
    let s = img.shape();
    if s.c != cfg.image_channels {
        return Err(Error::invalid(
            "generator_forward",
            format!("image has {} channels, config expects {}", s.c, cfg.image_channels),
        ));
    }
    check_levels(cfg.levels, s.h, s.w)?;
    LaplacianPyramid::decompose(img, cfg.levels)
}

fn conv<T: Scalar, G: Graph<T>>(g: &mut G, p: &Bound<G::Node>, name: &str, x: &G::Node, pad: Padding) -> Result<G::Node> {
    let w = p.get(&format!("{name}.weight"))?.clone();
    let b = p.get(&format!("{name}.bias"))?.clone();
    let ws = g.value(&w).shape();
    let xs = g.value(x).shape();
    if ws.c != xs.c {
        return Err(Error::invalid("generator", format!("`{name}` expects {} input channels, got {}", ws.c, xs.c)));
    }
    g.conv2d(x, &w, Some(&b), 1, pad)
}

fn res_block<T: Scalar, G: Graph<T>>(
    g: &mut G,
    p: &Bound<G::Node>,
    prefix: &str,
    x: &G::Node,
    norm: bool,
    slope: f64,
) -> Result<G::Node> {
    let mut h = x.clone();
    for (conv_name, norm_name) in [("conv1", "norm1"), ("conv2", "norm2")] {
        h = conv(g, p, &format!("{prefix}.{conv_name}"), &h, Padding::reflect(1))?;
        if norm {
            let gamma = p.get(&format!("{prefix}.{norm_name}.gamma"))?.clone();
            let beta = p.get(&format!("{prefix}.{norm_name}.beta"))?.clone();
            h = g.instance_norm(&h, &gamma, &beta, NORM_EPS)?;
        }
        h = g.leaky_relu(&h, slope)?;
    }
    g.add(x, &h)
}

/// `Î_L = tanh(reduce(res_blocks(expand(I_L))) + I_L)`.
pub fn translate_low<T: Scalar, G: Graph<T>>(
    g: &mut G,
    p: &Bound<G::Node>,
    cfg: &GeneratorConfig,
    low: &G::Node,
) -> Result<G::Node> {
    let mut h = conv(g, p, "low_net.expand", low, Padding::none())?;
    for b in 0..cfg.num_res_blocks {
        h = res_block(g, p, &format!("low_net.res_blocks.{b}"), &h, cfg.use_instance_norm, cfg.leaky_slope)?;
    }
    let r = conv(g, p, "low_net.reduce", &h, Padding::none())?;
    let s = g.add(&r, low)?;
    g.tanh(&s)
}

/// One-channel mask for `h_{L-1}` from `[up(I_L), up(Î_L), h_{L-1}]`.
pub fn compute_base_mask<T: Scalar, G: Graph<T>>(
    g: &mut G,
    p: &Bound<G::Node>,
    cfg: &GeneratorConfig,
    h_top: &G::Node,
    low: &G::Node,
    low_translated: &G::Node,
) -> Result<G::Node> {
    let up_low = g.resize(low, Resize::Up2)?;
    let up_tr = g.resize(low_translated, Resize::Up2)?;
    let (a, b) = (g.value(&up_low).shape(), g.value(h_top).shape());
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::ShapeMismatch { op: "compute_base_mask", left: a, right: b });
    }
    let x = g.concat_channels(&[&up_low, &up_tr, h_top])?;
    let mut h = conv(g, p, "mask_net.expand", &x, Padding::none())?;
    for b in 0..cfg.num_res_blocks {
        h = res_block(g, p, &format!("mask_net.res_blocks.{b}"), &h, false, cfg.leaky_slope)?;
    }
    conv(g, p, "mask_net.to_mask", &h, Padding::none())
}

/// `ĥ_l = h_l ⊗ M_l`, broadcasting the mask over channels.
pub fn refine_level<T: Scalar, G: Graph<T>>(g: &mut G, high: &G::Node, mask: &G::Node) -> Result<G::Node> {
    g.mul_mask(high, mask)
}

/// `M_l` from `M_{l+1}`: bilinear x2, then the level's finetune block if enabled.
pub fn propagate_mask<T: Scalar, G: Graph<T>>(
    g: &mut G,
    p: &Bound<G::Node>,
    cfg: &GeneratorConfig,
    mask: &G::Node,
    level: usize,
) -> Result<G::Node> {
    if level + 1 >= cfg.levels {
        return Err(Error::invalid("propagate_mask", format!("level {level} has no coarser mask with L={}", cfg.levels)));
    }
    let up = g.resize(mask, Resize::Up2)?;
    if !cfg.finetune_enabled[level] {
        return Ok(up);
    }
    let prefix = format!("finetune_blocks.{level}");
    let h = conv(g, p, &format!("{prefix}.conv1"), &up, Padding::reflect(1))?;
    let h = g.leaky_relu(&h, cfg.leaky_slope)?;
    let d = conv(g, p, &format!("{prefix}.conv2"), &h, Padding::reflect(1))?;
    g.add(&up, &d)
}

/// Result of a generator pass. Band vectors are indexed by level, finest first.
#[derive(Clone, Debug)]
pub struct GeneratorOutput<N> {
    pub image: N,
    pub low_translated: N,
    /// Empty when high-band refinement is disabled.
    pub masks: Vec<N>,
    pub highs_refined: Vec<N>,
}

/// Full pass over a decomposed input. The pyramid enters the graph as
/// constants; gradients flow to the parameters in `p`.
pub fn generator_forward<T: Scalar, G: Graph<T>>(
    g: &mut G,
    p: &Bound<G::Node>,
    cfg: &GeneratorConfig,
    pyr: &LaplacianPyramid<T>,
) -> Result<GeneratorOutput<G::Node>> {
    let levels = cfg.levels;
    if pyr.levels() != levels {
        return Err(Error::invalid("generator_forward", format!("pyramid has {} levels, config {levels}", pyr.levels())));
    }
    let low = g.constant(pyr.low.clone());
    let highs: Vec<G::Node> = pyr.highs.iter().map(|h| g.constant(h.clone())).collect();
    let low_translated = translate_low(g, p, cfg, &low)?;

    let mut masks = Vec::new();
    let highs_refined = if cfg.refine_high {
        let mut refined = vec![None; levels];
        let mut mask = compute_base_mask(g, p, cfg, &highs[levels - 1], &low, &low_translated)?;
        refined[levels - 1] = Some(refine_level(g, &highs[levels - 1], &mask)?);
        masks.push(mask.clone());
        for l in (0..levels - 1).rev() {
            mask = propagate_mask(g, p, cfg, &mask, l)?;
            refined[l] = Some(refine_level(g, &highs[l], &mask)?);
            masks.push(mask.clone());
        }
        masks.reverse();
        refined.into_iter().map(|r| r.expect("every level refined")).collect()
    } else {
        highs
    };

    let image = reconstruct_nodes(g, &low_translated, &highs_refined, pyr.original_size)?;
    Ok(GeneratorOutput { image, low_translated, masks, highs_refined })
}

/// Pyramid reconstruction on graph nodes, cropped to `size`.
pub fn reconstruct_nodes<T: Scalar, G: Graph<T>>(
    g: &mut G,
    low: &G::Node,
    highs: &[G::Node],
    size: (usize, usize),
) -> Result<G::Node> {
    let mut cur = low.clone();
    for h in highs.iter().rev() {
        let up = g.pyr_up(&cur)?;
        cur = g.add(&up, h)?;
    }
    let s: Shape = g.value(&cur).shape();
    if (s.h, s.w) == size {
        Ok(cur)
    } else {
        g.crop(&cur, size.0, size.1)
    }
}
