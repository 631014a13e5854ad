//! Training configuration and its flat `key = value` form, used both for
//! command-line overrides and for the snapshot stored in checkpoints.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::{DiscriminatorConfig, GeneratorConfig, InitScheme};

use super::adam::AdamConfig;
use super::loss::LossWeights;
use super::toy::ToyDomainSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub batch_size: usize,
    /// Side of the random square crops taken from folder images.
    pub crop: usize,
    pub init: InitScheme,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub eval_images: usize,
    /// Present when training on the synthetic domain pair.
    pub toy: Option<ToyDomainSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            batch_size: 4,
            crop: 256,
            init: InitScheme::Identity,
            seed: 0,
            checkpoint_every: 100,
            eval_every: 50,
            eval_images: 4,
            toy: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e: T::Err| Error::config(key, format!("`{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::config(key, format!("`{other}` is not a boolean"))),
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?;
    parts.try_into().map_err(|_| Error::config(key, "expected three comma-separated numbers"))
}

fn triple(v: [f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

impl TrainConfig {
    /// The toy-run defaults: 128x128 images on the synthetic pair, random
    /// init and a quarter-width discriminator.
    pub fn toy() -> Self {
        TrainConfig {
            crop: 128,
            init: InitScheme::Random,
            discriminator: DiscriminatorConfig { base_channels: 16, max_channels: 64, ..DiscriminatorConfig::default() },
            toy: Some(ToyDomainSpec::default()),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.generator.image_channels != self.discriminator.image_channels {
            return Err(Error::config("discriminator.image_channels", "must match generator.image_channels"));
        }
        let side = match &self.toy {
            Some(t) => {
                t.validate()?;
                if self.crop > t.size {
                    return Err(Error::config("train.crop", format!("{} exceeds toy.size {}", self.crop, t.size)));
                }
                self.crop
            }
            None => self.crop,
        };
        self.discriminator
            .check_input(crate::tensor::Shape::new(1, self.discriminator.image_channels, side, side))
            .map_err(|e| Error::config("train.crop", e.to_string()))?;
        crate::pyramid::check_levels(self.generator.levels, side, side)
            .map_err(|e| Error::config("generator.levels", e.to_string()))?;
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("adam", "lr and eps must be positive and betas in [0, 1)"));
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let g = &self.generator;
        let d = &self.discriminator;
        let mut v: Vec<(&str, String)> = vec![
            ("generator.levels", g.levels.to_string()),
            ("generator.image_channels", g.image_channels.to_string()),
            ("generator.low_channels", g.low_channels.to_string()),
            ("generator.mask_channels", g.mask_channels.to_string()),
            ("generator.num_res_blocks", g.num_res_blocks.to_string()),
            ("generator.leaky_slope", g.leaky_slope.to_string()),
            ("generator.use_instance_norm", g.use_instance_norm.to_string()),
            ("generator.refine_high", g.refine_high.to_string()),
            (
                "generator.finetune_enabled",
                g.finetune_enabled.iter().map(|b| if *b { "1" } else { "0" }).collect::<Vec<_>>().join(","),
            ),
            ("discriminator.image_channels", d.image_channels.to_string()),
            ("discriminator.base_channels", d.base_channels.to_string()),
            ("discriminator.max_channels", d.max_channels.to_string()),
            ("discriminator.num_layers", d.num_layers.to_string()),
            ("discriminator.num_scales", d.num_scales.to_string()),
            ("discriminator.leaky_slope", d.leaky_slope.to_string()),
            ("discriminator.use_instance_norm", d.use_instance_norm.to_string()),
            ("adam.lr", self.adam.lr.to_string()),
            ("adam.beta1", self.adam.beta1.to_string()),
            ("adam.beta2", self.adam.beta2.to_string()),
            ("adam.eps", self.adam.eps.to_string()),
            ("loss.recon", self.loss.recon.to_string()),
            ("loss.adv", self.loss.adv.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.crop", self.crop.to_string()),
            ("train.init", if self.init == InitScheme::Identity { "identity" } else { "random" }.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.eval_every", self.eval_every.to_string()),
            ("train.eval_images", self.eval_images.to_string()),
        ];
        if let Some(t) = &self.toy {
            v.extend([
                ("toy.size", t.size.to_string()),
                ("toy.count", t.count.to_string()),
                ("toy.seed", t.seed.to_string()),
                ("toy.gain", triple(t.tone.gain)),
                ("toy.gamma", triple(t.tone.gamma)),
                ("toy.offset", triple(t.tone.offset)),
            ]);
        }
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies one `key = value` setting. Changing `generator.levels`
    /// resets `generator.finetune_enabled` to all-enabled.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.generator;
        let d = &mut self.discriminator;
        if key.starts_with("toy.") && self.toy.is_none() {
            self.toy = Some(ToyDomainSpec::default());
        }
        match key {
            "generator.levels" => {
                g.levels = parse(key, value)?;
                g.finetune_enabled = vec![true; g.levels.saturating_sub(1)];
            }
            "generator.image_channels" => g.image_channels = parse(key, value)?,
            "generator.low_channels" => g.low_channels = parse(key, value)?,
            "generator.mask_channels" => g.mask_channels = parse(key, value)?,
            "generator.num_res_blocks" => g.num_res_blocks = parse(key, value)?,
            "generator.leaky_slope" => g.leaky_slope = parse(key, value)?,
            "generator.use_instance_norm" => g.use_instance_norm = parse_bool(key, value)?,
            "generator.refine_high" => g.refine_high = parse_bool(key, value)?,
            "generator.finetune_enabled" => {
                g.finetune_enabled = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse_bool(key, v)).collect::<Result<_>>()?
                }
            }
            "discriminator.image_channels" => d.image_channels = parse(key, value)?,
            "discriminator.base_channels" => d.base_channels = parse(key, value)?,
            "discriminator.max_channels" => d.max_channels = parse(key, value)?,
            "discriminator.num_layers" => d.num_layers = parse(key, value)?,
            "discriminator.num_scales" => d.num_scales = parse(key, value)?,
            "discriminator.leaky_slope" => d.leaky_slope = parse(key, value)?,
            "discriminator.use_instance_norm" => d.use_instance_norm = parse_bool(key, value)?,
            "adam.lr" => self.adam.lr = parse(key, value)?,
            "adam.beta1" => self.adam.beta1 = parse(key, value)?,
            "adam.beta2" => self.adam.beta2 = parse(key, value)?,
            "adam.eps" => self.adam.eps = parse(key, value)?,
            "loss.recon" => self.loss.recon = parse(key, value)?,
            "loss.adv" => self.loss.adv = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.crop" => self.crop = parse(key, value)?,
            "train.init" => {
                self.init = match value.trim() {
                    "identity" => InitScheme::Identity,
                    "random" => InitScheme::Random,
                    other => return Err(Error::config(key, format!("`{other}` is not `identity` or `random`"))),
                }
            }
            "train.seed" => self.seed = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "train.eval_every" => self.eval_every = parse(key, value)?,
            "train.eval_images" => self.eval_images = parse(key, value)?,
            "toy.size" => self.toy.as_mut().expect("set above").size = parse(key, value)?,
            "toy.count" => self.toy.as_mut().expect("set above").count = parse(key, value)?,
            "toy.seed" => self.toy.as_mut().expect("set above").seed = parse(key, value)?,
            "toy.gain" => self.toy.as_mut().expect("set above").tone.gain = parse_triple(key, value)?,
            "toy.gamma" => self.toy.as_mut().expect("set above").tone.gamma = parse_triple(key, value)?,
            "toy.offset" => self.toy.as_mut().expect("set above").tone.offset = parse_triple(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::config(kv, "expected key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}
