//! Unpaired adversarial training.
//!
//! Each step draws a batch from each domain, updates the discriminator on
//! `(real B, G(A))`, then updates the generator against the freshly updated
//! discriminator. Batches come from a ChaCha stream keyed by `(seed, step)`,
//! so a resumed run replays exactly what an uninterrupted run would do.

pub mod adam;
pub mod config;
pub mod loss;
pub mod metrics;
pub mod toy;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{AdamConfig, AdamState};
pub use config::TrainConfig;
pub use loss::{d_adv_loss, g_adv_loss, recon_loss, total_g_loss, LossWeights};
pub use metrics::{eval_metrics, psnr, ssim, Metrics};
pub use toy::{Domain, ToneMap, ToyDomainSpec};

use crate::autodiff::{Gradients, Graph, Tape, Var};
use crate::error::{Error, Result};
use crate::net::{d_forward_multiscale, decompose_input, generator_forward, Bound, Discriminator, Generator, ParamSet};
use crate::tensor::kernels::crop_at;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "step,loss_g,loss_d,loss_recon,loss_adv,psnr_val";

const TAG_GENERATOR: u64 = 0x47;
const TAG_DISCRIMINATOR: u64 = 0x44;
const TAG_BATCH: u64 = 0x42;

fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.gen()
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator.clone(), config.init, derive_seed(config.seed, TAG_GENERATOR))?;
        let discriminator = Discriminator::new(config.discriminator.clone(), derive_seed(config.seed, TAG_DISCRIMINATOR))?;
        Ok(TrainState {
            adam_g: AdamState::zeros_like(&generator.params),
            adam_d: AdamState::zeros_like(&discriminator.params),
            config,
            generator,
            discriminator,
            step: 0,
        })
    }
}

/// Training images, already mapped to `[-1, 1]`.
#[derive(Clone, Debug)]
pub enum TrainData {
    Toy(ToyDomainSpec),
    Images { a: Vec<Tensor>, b: Vec<Tensor> },
}

impl TrainData {
    pub fn validate(&self, crop: usize) -> Result<()> {
        match self {
            TrainData::Toy(spec) => spec.validate(),
            TrainData::Images { a, b } => {
                for (name, set) in [("A", a), ("B", b)] {
                    if set.is_empty() {
                        return Err(Error::invalid("train", format!("domain {name} has no images")));
                    }
                    if let Some(img) = set.iter().find(|t| t.shape().h < crop || t.shape().w < crop || t.shape().n != 1) {
                        return Err(Error::invalid(
                            "train",
                            format!("domain {name} image of shape {} is smaller than the {crop}x{crop} crop", img.shape()),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    fn count(&self, domain: Domain) -> usize {
        match (self, domain) {
            (TrainData::Toy(s), _) => s.count,
            (TrainData::Images { a, .. }, Domain::A) => a.len(),
            (TrainData::Images { b, .. }, Domain::B) => b.len(),
        }
    }

    fn image(&self, domain: Domain, i: usize) -> Tensor {
        match (self, domain) {
            (TrainData::Toy(s), d) => s.image(d, i),
            (TrainData::Images { a, .. }, Domain::A) => a[i].clone(),
            (TrainData::Images { b, .. }, Domain::B) => b[i].clone(),
        }
    }

    /// A batch of random crops from `domain`.
    pub fn sample(&self, domain: Domain, batch: usize, crop: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut imgs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let img = self.image(domain, rng.gen_range(0..self.count(domain)));
            let s = img.shape();
            let y = rng.gen_range(0..=s.h - crop);
            let x = rng.gen_range(0..=s.w - crop);
            imgs.push(if (s.h, s.w) == (crop, crop) { img } else { crop_at(&img, y, x, crop, crop)? });
        }
        Tensor::stack(&imgs)
    }

    /// Paired `(input, reference)` validation images, when the data has them.
    pub fn validation_pairs(&self, n: usize) -> Vec<(Tensor, Tensor)> {
        match self {
            TrainData::Toy(s) => (0..n).map(|i| s.validation_pair(i)).collect(),
            TrainData::Images { .. } => Vec::new(),
        }
    }
}

/// Losses of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_recon: f64,
    pub loss_adv: f64,
    pub psnr_val: Option<f64>,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let psnr = self.psnr_val.map(|p| p.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.step, self.loss_g, self.loss_d, self.loss_recon, self.loss_adv, psnr)
    }
}

fn collect_grads(grads: &Gradients<f32>, bound: &Bound<Var>, tape: &Tape<f32>) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, v) in bound.iter() {
        out.insert(name, grads.get_or_zeros(*v, tape));
    }
    out
}

fn finite(step: u64, which: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { step, which })
    }
}

/// Runs one D update and one G update. On error the state may hold a
/// discriminator update without the matching generator update.
pub fn train_step(state: &mut TrainState, data: &TrainData) -> Result<StepLog> {
    let cfg = state.config.clone();
    let step = state.step + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_BATCH));
    rng.set_stream(step);
    let real_a = data.sample(Domain::A, cfg.batch_size, cfg.crop, &mut rng)?;
    let real_b = data.sample(Domain::B, cfg.batch_size, cfg.crop, &mut rng)?;
    let pyr = decompose_input(&real_a, &cfg.generator)?;

    let mut gt = Tape::<f32>::new();
    let gp = state.generator.params.bind(&mut gt, true);
    let out = generator_forward(&mut gt, &gp, &cfg.generator, &pyr)?;
    let fake_value = gt.get(out.image).clone();

    let loss_d = {
        let mut dt = Tape::<f32>::new();
        let dp = state.discriminator.params.bind(&mut dt, true);
        let real = dt.constant(real_b);
        let fake = dt.constant(fake_value);
        let real_maps = d_forward_multiscale(&mut dt, &dp, &cfg.discriminator, &real)?;
        let fake_maps = d_forward_multiscale(&mut dt, &dp, &cfg.discriminator, &fake)?;
        let loss = d_adv_loss(&mut dt, &real_maps, &fake_maps)?;
        let value = finite(step, "discriminator", dt.get(loss).item()? as f64)?;
        let grads = collect_grads(&dt.backward(loss)?, &dp, &dt);
        state.adam_d.step(&cfg.adam, &mut state.discriminator.params, &grads)?;
        value
    };

    let dp = state.discriminator.params.bind(&mut gt, false);
    let maps = d_forward_multiscale(&mut gt, &dp, &cfg.discriminator, &out.image)?;
    let adv = g_adv_loss(&mut gt, &maps)?;
    let input = gt.constant(real_a);
    let recon = recon_loss(&mut gt, &out.image, &input)?;
    let total = total_g_loss(&mut gt, cfg.loss, &recon, &adv)?;
    let loss_g = finite(step, "generator", gt.get(total).item()? as f64)?;
    let grads = collect_grads(&gt.backward(total)?, &gp, &gt);
    state.adam_g.step(&cfg.adam, &mut state.generator.params, &grads)?;
    state.step = step;

    Ok(StepLog {
        step,
        loss_g,
        loss_d,
        loss_recon: gt.get(recon).item()? as f64,
        loss_adv: gt.get(adv).item()? as f64,
        psnr_val: None,
    })
}

/// Mean PSNR of `G(input)` against the reference over validation pairs.
pub fn validation_psnr(generator: &Generator, pairs: &[(Tensor, Tensor)]) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += psnr(&generator.translate(a)?, b)?;
    }
    Ok(Some(total / pairs.len() as f64))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Train until this many steps are complete.
    pub steps: u64,
    pub csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Opens the metrics log. A fresh run truncates it; a resumed run keeps
/// only the rows up to the resumed step.
fn open_csv(path: &Path, resumed_at: u64) -> Result<fs::File> {
    let mut keep = vec![CSV_HEADER.to_string()];
    if resumed_at > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s <= resumed_at) {
                    keep.push(line.to_string());
                }
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in keep {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Trains until `opts.steps` steps are complete, logging every step and
/// writing checkpoints every `checkpoint_every` steps and at the end.
pub fn run(
    state: &mut TrainState,
    data: &TrainData,
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    state.config.validate()?;
    data.validate(state.config.crop)?;
    let mut csv = match &opts.csv {
        Some(p) => Some((open_csv(p, state.step)?, p.clone())),
        None => None,
    };
    let pairs = data.validation_pairs(state.config.eval_images);
    let mut logs = Vec::new();
    while state.step < opts.steps {
        let mut log = train_step(state, data)?;
        let every = state.config.eval_every;
        if (every > 0 && log.step % every == 0) || log.step == opts.steps {
            log.psnr_val = validation_psnr(&state.generator, &pairs)?;
        }
        if let Some((f, p)) = &mut csv {
            writeln!(f, "{}", log.csv_row()).map_err(|e| Error::io(&*p, e))?;
        }
        on_step(&log);
        logs.push(log);
        let ck = state.config.checkpoint_every;
        if let Some(path) = &opts.checkpoint {
            if (ck > 0 && log.step % ck == 0) || log.step == opts.steps {
                crate::io::save_checkpoint(state, path)?;
            }
        }
    }
    if let Some((f, p)) = &mut csv {
        f.flush().map_err(|e| Error::io(&*p, e))?;
    }
    Ok(logs)
}
