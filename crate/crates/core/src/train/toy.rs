//! Synthetic unpaired domain pair for desk-scale training.
//!
//! Domain A images are smooth: a base colour, a few low-frequency
//! sinusoids and soft-edged discs. Domain B images are drawn from the same
//! family with an independent stream and pushed through a fixed per-channel
//! tone curve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-channel `u -> offset + gain * u^gamma` on `u = (x + 1) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToneMap {
    pub gain: [f64; 3],
    pub gamma: [f64; 3],
    pub offset: [f64; 3],
}

impl Default for ToneMap {
    fn default() -> Self {
        // Red lifted by 0.22 in [-1, 1] units; green and blue unchanged.
        ToneMap { gain: [1.0; 3], gamma: [1.0; 3], offset: [0.11, 0.0, 0.0] }
    }
}

impl ToneMap {
    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            if !(self.gain[c] > 0.0 && self.gamma[c] > 0.0) || !self.offset[c].is_finite() {
                return Err(Error::invalid("tone map", "gain and gamma must be positive"));
            }
        }
        Ok(())
    }

    pub fn apply_value(&self, c: usize, x: f64) -> f64 {
        let u = ((x + 1.0) / 2.0).clamp(0.0, 1.0);
        2.0 * (self.offset[c] + self.gain[c] * u.powf(self.gamma[c])) - 1.0
    }

    pub fn invert_value(&self, c: usize, y: f64) -> f64 {
        let u = (((y + 1.0) / 2.0 - self.offset[c]) / self.gain[c]).max(0.0).powf(1.0 / self.gamma[c]);
        2.0 * u - 1.0
    }

    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        if img.shape().c != 3 {
            return Err(Error::invalid("tone map", "expects 3 channels"));
        }
        Ok(Tensor::from_fn(img.shape(), |n, c, y, x| self.apply_value(c, img.at(n, c, y, x) as f64) as f32))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDomainSpec {
    pub size: usize,
    /// Images per domain.
    pub count: usize,
    pub seed: u64,
    pub tone: ToneMap,
}

impl Default for ToyDomainSpec {
    fn default() -> Self {
        ToyDomainSpec { size: 128, count: 500, seed: 0, tone: ToneMap::default() }
    }
}

const STREAM_A: u64 = 0xA;
const STREAM_B: u64 = 0xB;
const STREAM_VAL: u64 = 0xC;

impl ToyDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || self.count == 0 {
            return Err(Error::invalid("toy domain", "size must be at least 8 and count at least 1"));
        }
        self.tone.validate()
    }

    fn content(&self, stream: u64, index: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng.set_word_pos(index as u128 * 1024);
        render_smooth(&mut rng, self.size)
    }

    /// Image `index` of a domain as a `1x3xSxS` tensor.
    pub fn image(&self, domain: Domain, index: usize) -> Tensor {
        match domain {
            Domain::A => self.content(STREAM_A, index),
            Domain::B => self.tone.apply(&self.content(STREAM_B, index)).expect("3-channel content"),
        }
    }

    /// Held-out `(A, tone(A))` pairs, disjoint from both training streams.
    pub fn validation_pair(&self, index: usize) -> (Tensor, Tensor) {
        let a = self.content(STREAM_VAL, index);
        let b = self.tone.apply(&a).expect("3-channel content");
        (a, b)
    }

    /// Stacks images `indices` of `domain` into one batch.
    pub fn batch(&self, domain: Domain, indices: &[usize]) -> Result<Tensor> {
        let imgs: Vec<Tensor> = indices.iter().map(|&i| self.image(domain, i % self.count)).collect();
        Tensor::stack(&imgs)
    }

    /// Per-channel means over the first `n` images of `domain`.
    pub fn domain_means(&self, domain: Domain, n: usize) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for i in 0..n {
            for (a, m) in acc.iter_mut().zip(self.image(domain, i).channel_means()) {
                *a += m / n as f64;
            }
        }
        acc
    }
}

/// Smooth random content in roughly `[-0.9, 0.9]`.
fn render_smooth(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.15..0.05));
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let fx = rng.gen_range(-2.0..2.0);
            let fy = rng.gen_range(-2.0..2.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.15..0.15));
            (fx, fy, phase, amp)
        })
        .collect();
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..2)
        .map(|_| {
            let cx = rng.gen_range(0.1..0.9);
            let cy = rng.gen_range(0.1..0.9);
            let r = rng.gen_range(0.08..0.25);
            let col: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.2..0.2));
            (cx, cy, r, col)
        })
        .collect();
    let inv = 1.0 / size as f64;
    Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
        let (u, v) = ((x as f64 + 0.5) * inv, (y as f64 + 0.5) * inv);
        let mut val = base[c];
        for (fx, fy, phase, amp) in &waves {
            val += amp[c] * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
        }
        for (cx, cy, r, col) in &discs {
            let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            // Soft edge about 2% of the image wide.
            let t = (1.0 - (d - r) / 0.02).clamp(0.0, 1.0);
            val += col[c] * t * t * (3.0 - 2.0 * t);
        }
        val.clamp(-0.9, 0.9) as f32
    })
}
