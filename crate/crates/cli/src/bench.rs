//! Per-stage inference timing on synthetic inputs.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use lptn::autodiff::{Eager, Graph};
use lptn::net::{
    compute_base_mask, decompose_input, propagate_mask, reconstruct_nodes, refine_level, translate_low, Generator,
    GeneratorConfig, InitScheme,
};
use lptn::{Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CSV_HEADER: &str = "label,height,width,levels,stage,seconds,pixels_per_second";
pub const MIN_RUNS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Resolution {
    pub label: String,
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl FromStr for Resolution {
    type Err = String;

    /// Named sizes (`480p`, `720p`, `1080p`, `2K`, `4K`) or `WxH`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let named = |label: &str, width, height| Resolution { label: label.into(), height, width };
        Ok(match s.to_ascii_lowercase().as_str() {
            "480p" => named("480p", 854, 480),
            "720p" => named("720p", 1280, 720),
            "1080p" => named("1080p", 1920, 1080),
            "2k" => named("2K", 2560, 1440),
            "4k" => named("4K", 3840, 2160),
            other => {
                let (w, h) = other.split_once('x').ok_or_else(|| format!("unknown resolution `{s}`"))?;
                let width: usize = w.parse().map_err(|_| format!("bad width in `{s}`"))?;
                let height: usize = h.parse().map_err(|_| format!("bad height in `{s}`"))?;
                if width == 0 || height == 0 {
                    return Err(format!("empty resolution `{s}`"));
                }
                Resolution { label: format!("{width}x{height}"), height, width }
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Decompose,
    LowTranslate,
    Mask,
    Reconstruct,
    Total,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Decompose, Stage::LowTranslate, Stage::Mask, Stage::Reconstruct, Stage::Total];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Decompose => "decompose",
            Stage::LowTranslate => "low_translate",
            Stage::Mask => "mask",
            Stage::Reconstruct => "reconstruct",
            Stage::Total => "total",
        }
    }

    /// Stages that run network weights.
    pub fn is_learned(self) -> bool {
        matches!(self, Stage::LowTranslate | Stage::Mask)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub resolution: Resolution,
    pub levels: usize,
    pub stage: Stage,
    /// Median over the timed runs.
    pub seconds: f64,
}

impl BenchRow {
    pub fn pixels_per_second(&self) -> f64 {
        self.resolution.pixels() as f64 / self.seconds
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.1}",
            self.resolution.label,
            self.resolution.height,
            self.resolution.width,
            self.levels,
            self.stage,
            self.seconds,
            self.pixels_per_second()
        )
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub resolutions: Vec<Resolution>,
    pub levels: Vec<usize>,
    pub runs: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Network shape; `levels` is overridden per case.
    pub generator: GeneratorConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            resolutions: vec!["1080p".parse().expect("named"), "4K".parse().expect("named")],
            levels: vec![3, 4, 5],
            runs: MIN_RUNS,
            warmup: 3,
            seed: 0,
            generator: GeneratorConfig::default(),
        }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Wall time of each stage for one inference pass.
fn time_pass(gen: &Generator, img: &Tensor) -> Result<[f64; 5]> {
    let cfg = &gen.config;
    let mut g = Eager;
    let p = gen.params.bind(&mut g, false);
    let start = Instant::now();

    let pyr = decompose_input(img, cfg)?;
    let t_decompose = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let low = g.constant(pyr.low.clone());
    let low_translated = translate_low(&mut g, &p, cfg, &low)?;
    let t_low = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let levels = cfg.levels;
    let highs: Vec<Tensor> = pyr.highs.clone();
    let refined = if cfg.refine_high {
        let mut refined = highs.clone();
        let mut mask = compute_base_mask(&mut g, &p, cfg, &highs[levels - 1], &low, &low_translated)?;
        refined[levels - 1] = refine_level(&mut g, &highs[levels - 1], &mask)?;
        for l in (0..levels - 1).rev() {
            mask = propagate_mask(&mut g, &p, cfg, &mask, l)?;
            refined[l] = refine_level(&mut g, &highs[l], &mask)?;
        }
        refined
    } else {
        highs
    };
    let t_mask = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let out = reconstruct_nodes(&mut g, &low_translated, &refined, pyr.original_size)?;
    let t_reconstruct = t.elapsed().as_secs_f64();
    let total = start.elapsed().as_secs_f64();
    std::hint::black_box(out);
    Ok([t_decompose, t_low, t_mask, t_reconstruct, total])
}

/// Keeps freed heap memory mapped. Full-resolution passes allocate and drop
/// buffers of hundreds of megabytes; returning them to the OS after every op
/// makes page faults a large share of the measured time. Process-wide and
/// idempotent.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts glibc malloc parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 1 << 28);
    }
}

/// Times every `(resolution, levels)` case. Rows are emitted in case order,
/// one per stage, as soon as each case finishes.
pub fn run_bench(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    if cfg.runs < MIN_RUNS {
        return Err(lptn::Error::config("runs", format!("at least {MIN_RUNS} timed runs are required, got {}", cfg.runs)));
    }
    tune_allocator();
    let mut rows = Vec::new();
    for res in &cfg.resolutions {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shape = Shape::new(1, cfg.generator.image_channels, res.height, res.width);
        let img = Tensor::new(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        for &levels in &cfg.levels {
            let gcfg = GeneratorConfig { levels, finetune_enabled: vec![true; levels.saturating_sub(1)], ..cfg.generator.clone() };
            let gen = Generator::new(gcfg, InitScheme::Random, cfg.seed)?;
            lptn::pyramid::check_levels(levels, res.height, res.width)?;
            for _ in 0..cfg.warmup {
                time_pass(&gen, &img)?;
            }
            let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.runs); Stage::ALL.len()];
            for _ in 0..cfg.runs {
                for (s, t) in samples.iter_mut().zip(time_pass(&gen, &img)?) {
                    s.push(t);
                }
            }
            for (stage, mut s) in Stage::ALL.into_iter().zip(samples) {
                let row = BenchRow { resolution: res.clone(), levels, stage, seconds: median(&mut s) };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Sum of the learned-stage medians for one case.
pub fn learned_seconds(rows: &[BenchRow], label: &str, levels: usize) -> Option<f64> {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.resolution.label == label && r.levels == levels && r.stage.is_learned())
        .map(|r| r.seconds)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum())
}

pub fn stage_seconds(rows: &[BenchRow], label: &str, levels: usize, stage: Stage) -> Option<f64> {
    rows.iter().find(|r| r.resolution.label == label && r.levels == levels && r.stage == stage).map(|r| r.seconds)
}
