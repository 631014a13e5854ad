//! Command-line front end for `lptn`: pyramid tools, translation, training,
//! gradient checks and the runtime benchmark.

pub mod bench;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lptn::autodiff::OpKind;
use lptn::gradcheck::{run_suite, GradcheckOptions, GradcheckReport};
use lptn::io::{self, image::band_to_display};
use lptn::net::InitScheme;
use lptn::pyramid::{band_stats, max_levels, Band, LaplacianPyramid, HIST_BINS};
use lptn::train::{self, LossWeights, RunOptions, TrainConfig, TrainData, TrainState};
use lptn::Tensor;

use bench::{BenchConfig, Resolution};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const THREADS_ENV: &str = "LPTN_THREADS";

pub const PYRAMID_FILE: &str = "pyramid.lptn";
pub const CHECKPOINT_FILE: &str = "checkpoint.lptn";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(lptn::Error),
}

impl From<lptn::Error> for CliError {
    fn from(e: lptn::Error) -> Self {
        match e {
            lptn::Error::Config { .. } | lptn::Error::TooManyLevels { .. } => CliError::Usage(e.to_string()),
            e => CliError::Core(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(_) => EXIT_RUNTIME,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` does not exist", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "lptn", version, about = "Laplacian pyramid translation on the CPU")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split an image into Laplacian bands.
    Decompose(DecomposeArgs),
    /// Rebuild an image from a saved pyramid.
    Reconstruct(ReconstructArgs),
    /// Run a trained generator on an image.
    Translate(TranslateArgs),
    /// Time each inference stage on synthetic inputs.
    Bench(BenchArgs),
    /// Compare two images band by band.
    Stats(StatsArgs),
    /// Train on the toy domain pair or on two image folders.
    Train(TrainArgs),
    /// Check every gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a freshly initialised checkpoint.
    Init(InitArgs),
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub levels: usize,
    /// Output directory for the pyramid archive and band previews.
    #[arg(long)]
    pub out: PathBuf,
    /// Preview gain for the signed high bands.
    #[arg(long, default_value_t = 4.0)]
    pub band_gain: f32,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// A pyramid archive, or a directory written by `decompose`.
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Must match the checkpoint (default: the stored value).
    #[arg(long)]
    pub levels: Option<usize>,
    /// Keep the input's high bands unchanged.
    #[arg(long)]
    pub no_refine_high: bool,
    /// Skip instance normalisation in the low-band network.
    #[arg(long)]
    pub no_instance_norm: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated: 480p, 720p, 1080p, 2K, 4K or WxH.
    #[arg(long, value_delimiter = ',', default_value = "1080p,4K")]
    pub resolutions: Vec<Resolution>,
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    pub levels: Vec<usize>,
    #[arg(long, default_value_t = bench::MIN_RUNS)]
    pub runs: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Configuration override, repeatable: `--set generator.levels=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Loss weights as `recon:adv`.
    #[arg(long)]
    pub ratio: Option<String>,
    /// Seed for initialisation and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pyramid levels of the generator.
    #[arg(long)]
    pub levels: Option<usize>,
}

impl ConfigArgs {
    pub fn apply(&self, cfg: &mut TrainConfig) -> CliResult<()> {
        if let Some(l) = self.levels {
            cfg.set("generator.levels", &l.to_string())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = &self.ratio {
            cfg.loss = LossWeights::parse_ratio(r).map_err(|e| usage(e.to_string()))?;
        }
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Use the synthetic domain pair.
    #[arg(long, conflicts_with_all = ["data_a", "data_b"])]
    pub toy: bool,
    /// Folder of domain-A images (.ppm or .png).
    #[arg(long, requires = "data_b")]
    pub data_a: Option<PathBuf>,
    /// Folder of domain-B images (.ppm or .png).
    #[arg(long, requires = "data_a")]
    pub data_b: Option<PathBuf>,
    /// Total steps to reach (a resumed run continues from its stored step).
    #[arg(long)]
    pub steps: u64,
    /// Directory for the checkpoint and the metrics log.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flip the sign of one op's gradient (test fixture).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// `identity` or `random`.
    #[arg(long, default_value = "identity")]
    pub init: String,
    /// Start from the toy-run defaults.
    #[arg(long)]
    pub toy: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Configures the global thread pool once; later calls keep the first size.
pub fn set_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    set_threads(cli.threads)?;
    bench::tune_allocator();
    match cli.command {
        Command::Decompose(a) => cmd_decompose(&a, out),
        Command::Reconstruct(a) => cmd_reconstruct(&a, out),
        Command::Translate(a) => cmd_translate(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Stats(a) => cmd_stats(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Init(a) => cmd_init(&a, out),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(lptn::Error::io(path, e))
}

fn write_out(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> CliResult<()> {
    out.write_fmt(text).map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn load_input(path: &Path) -> CliResult<Tensor> {
    require_exists(path, "input image")?;
    Ok(io::load_image(path)?)
}

fn check_levels_usage(levels: usize, img: &Tensor) -> CliResult<()> {
    let s = img.shape();
    let max = max_levels(s.h, s.w);
    if levels == 0 || levels > max {
        return Err(usage(format!("--levels {levels} is not admissible for a {}x{} image (1..={max})", s.w, s.h)));
    }
    Ok(())
}

pub fn cmd_decompose(a: &DecomposeArgs, out: &mut dyn Write) -> CliResult<()> {
    let img = load_input(&a.input)?;
    check_levels_usage(a.levels, &img)?;
    let pyr = LaplacianPyramid::decompose(&img, a.levels)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    io::save_pyramid(&pyr, a.out.join(PYRAMID_FILE))?;
    for (l, h) in pyr.highs.iter().enumerate() {
        io::save_image(&band_to_display(h, a.band_gain), a.out.join(format!("high_{l}.ppm")))?;
    }
    io::save_image(&pyr.low, a.out.join("low.ppm"))?;
    write_out(out, format_args!("wrote {} bands to {}\n", a.levels + 1, a.out.display()))
}

pub fn cmd_reconstruct(a: &ReconstructArgs, out: &mut dyn Write) -> CliResult<()> {
    require_exists(&a.input, "pyramid")?;
    let path = if a.input.is_dir() { a.input.join(PYRAMID_FILE) } else { a.input.clone() };
    let img = io::load_pyramid(&path)?.reconstruct()?;
    io::save_image(&img, &a.out)?;
    write_out(out, format_args!("wrote {}\n", a.out.display()))
}

pub fn cmd_translate(a: &TranslateArgs, out: &mut dyn Write) -> CliResult<()> {
    let img = load_input(&a.input)?;
    require_exists(&a.checkpoint, "checkpoint")?;
    let mut cfg = io::read_checkpoint_config(&a.checkpoint)?;
    if let Some(l) = a.levels {
        cfg.set("generator.levels", &l.to_string())?;
    }
    cfg.generator.refine_high &= !a.no_refine_high;
    cfg.generator.use_instance_norm &= !a.no_instance_norm;
    check_levels_usage(cfg.generator.levels, &img)?;
    let state = io::load_checkpoint(&a.checkpoint, Some(&cfg))?;
    let result = state.generator.translate(&img)?;
    io::save_image(&result, &a.out)?;
    write_out(out, format_args!("wrote {}\n", a.out.display()))
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.runs < bench::MIN_RUNS {
        return Err(usage(format!("--runs must be at least {}, got {}", bench::MIN_RUNS, a.runs)));
    }
    let cfg = BenchConfig {
        resolutions: a.resolutions.clone(),
        levels: a.levels.clone(),
        runs: a.runs,
        warmup: a.warmup,
        seed: a.seed,
        ..Default::default()
    };
    for r in &cfg.resolutions {
        for &l in &cfg.levels {
            let max = max_levels(r.height, r.width);
            if l == 0 || l > max {
                return Err(usage(format!("--levels {l} is not admissible at {} (1..={max})", r.label)));
            }
        }
    }
    let mut file = match &a.csv {
        Some(p) => Some(fs::File::create(p).map_err(|e| io_err(p, e))?),
        None => None,
    };
    let sink: &mut dyn Write = match &mut file {
        Some(f) => f,
        None => out,
    };
    let target = a.csv.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    writeln!(sink, "{}", bench::CSV_HEADER).map_err(|e| io_err(&target, e))?;
    let mut write_err = None;
    bench::run_bench(&cfg, |row| {
        if let Err(e) = writeln!(sink, "{}", row.csv_row()).and_then(|_| sink.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    match write_err {
        Some(e) => Err(io_err(&target, e)),
        None => Ok(()),
    }
}

pub fn cmd_stats(a: &StatsArgs, out: &mut dyn Write) -> CliResult<()> {
    let ia = load_input(&a.a)?;
    let ib = load_input(&a.b)?;
    check_levels_usage(a.levels, &ia)?;
    check_levels_usage(a.levels, &ib)?;
    let pa = LaplacianPyramid::decompose(&ia, a.levels)?;
    let pb = LaplacianPyramid::decompose(&ib, a.levels)?;
    if pa.low.shape() != pb.low.shape() {
        return Err(usage(format!(
            "images differ in size after padding: {} vs {}",
            pa.low.shape(),
            pb.low.shape()
        )));
    }
    let stats = band_stats(&pa, &pb)?;
    write_out(out, format_args!("band,mse,hist_a,hist_b\n"))?;
    for s in &stats {
        let band = match s.band {
            Band::High(l) => format!("high_{l}"),
            Band::Low => "low".to_string(),
        };
        let hist = |h: &[u64; HIST_BINS]| h.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
        write_out(out, format_args!("{band},{:.6e},{},{}\n", s.mse, hist(&s.hist_a), hist(&s.hist_b)))?;
    }
    Ok(())
}

/// Images in `dir` with a `.ppm` or `.png` extension, sorted by name.
pub fn load_folder(dir: &Path) -> CliResult<Vec<Tensor>> {
    require_exists(dir, "image folder")?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no .ppm or .png images in `{}`", dir.display())));
    }
    paths.iter().map(|p| Ok(io::load_image(p)?)).collect()
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let (mut state, data) = match &a.resume {
        Some(ck) => {
            require_exists(ck, "checkpoint")?;
            let mut cfg = io::read_checkpoint_config(ck)?;
            a.config.apply(&mut cfg)?;
            let state = io::load_checkpoint(ck, Some(&cfg))?;
            let data = train_data(a, &state.config)?;
            (state, data)
        }
        None => {
            let mut cfg = if a.toy { TrainConfig::toy() } else { TrainConfig::default() };
            a.config.apply(&mut cfg)?;
            let data = train_data(a, &cfg)?;
            (TrainState::new(cfg)?, data)
        }
    };
    if a.steps <= state.step && a.resume.is_some() {
        return Err(usage(format!("--steps {} does not exceed the checkpoint's step {}", a.steps, state.step)));
    }
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let opts = RunOptions {
        steps: a.steps,
        csv: Some(a.out.join(METRICS_FILE)),
        checkpoint: Some(a.out.join(CHECKPOINT_FILE)),
    };
    let quiet = a.quiet;
    let mut progress = |log: &train::StepLog| {
        if !quiet && (log.step % 10 == 0 || log.psnr_val.is_some()) {
            eprintln!(
                "step {:>6}  loss_g {:.4}  loss_d {:.4}  recon {:.5}  adv {:.4}",
                log.step, log.loss_g, log.loss_d, log.loss_recon, log.loss_adv
            );
        }
    };
    train::run(&mut state, &data, &opts, &mut progress)?;
    write_out(out, format_args!("trained to step {}; outputs in {}\n", state.step, a.out.display()))
}

fn train_data(a: &TrainArgs, cfg: &TrainConfig) -> CliResult<TrainData> {
    match (&a.data_a, &a.data_b) {
        (Some(da), Some(db)) => Ok(TrainData::Images { a: load_folder(da)?, b: load_folder(db)? }),
        _ => match &cfg.toy {
            Some(spec) => Ok(TrainData::Toy(spec.clone())),
            None => Err(usage("pass --toy or both --data-a and --data-b")),
        },
    }
}

pub fn format_report(report: &GradcheckReport) -> String {
    let mut s = format!("{:<20} {:>14}  {:<6} worst\n", "check", "max_rel_error", "status");
    for r in &report.rows {
        let status = if r.passed { "ok" } else { "FAIL" };
        s.push_str(&format!("{:<20} {:>14.3e}  {:<6} {}\n", r.name, r.max_rel_error, status, r.worst));
    }
    s
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| usage(format!("unknown op `{name}`")))?),
        None => None,
    };
    let opts = GradcheckOptions { seed: a.seed, fault, ..Default::default() };
    let report = run_suite(&opts)?;
    write_out(out, format_args!("{}", format_report(&report)))?;
    let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Core(lptn::Error::Internal(format!("gradient check failed for: {}", failed.join(", ")))))
    }
}

pub fn cmd_init(a: &InitArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = if a.toy { TrainConfig::toy() } else { TrainConfig::default() };
    cfg.init = match a.init.as_str() {
        "identity" => InitScheme::Identity,
        "random" => InitScheme::Random,
        other => return Err(usage(format!("--init must be `identity` or `random`, got `{other}`"))),
    };
    a.config.apply(&mut cfg)?;
    let state = TrainState::new(cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    io::save_checkpoint(&state, &a.out)?;
    write_out(out, format_args!("wrote {}\n", a.out.display()))
}
