//! Finite-difference verification of reverse-mode gradients.
//!
//! Analytic gradients come from a 32-bit tape, exactly as in training.
//! Numeric gradients are central differences of a 64-bit replay of the same
//! computation. The error of one tensor is normwise:
//! `max |a - n| / max(|a|_inf, |n|_inf)` over the probed entries. A tensor
//! whose replayed gradient is zero to roundoff (a bias feeding an instance
//! norm) is instead scored as `|a|_inf` over the largest replayed gradient
//! of the whole objective, since the tape then reports pure 32-bit noise.
//! The full-network replays hold every leaky ReLU on the piece active at the
//! unperturbed point (see [`FrozenKinks`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{op, Eager, Graph, Op, OpKind, Tape};
use crate::error::Result;
use crate::net::{
    d_forward_multiscale, decompose_input, generator_forward, Discriminator, DiscriminatorConfig, Generator,
    GeneratorConfig, InitScheme, ParamSet,
};
use crate::tensor::kernels::{Padding, Resize};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::train::{d_adv_loss, g_adv_loss, recon_loss, total_g_loss, LossWeights};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Entries probed per tensor in the full-network checks.
    pub probes_per_tensor: usize,
    /// Test fixture: sign-flip the backward of one op family.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { seed: 0, step: 1e-3, tolerance: 1e-3, probes_per_tensor: 6, fault: None }
    }
}

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    /// Op name, or `generator_loss` / `discriminator_loss`.
    pub name: String,
    pub max_rel_error: f64,
    /// Tensor with the largest error.
    pub worst: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.passed)
    }
}

/// Replayed gradients below this are zero up to 64-bit roundoff.
const ROUNDOFF_ZERO: f64 = 1e-9;

fn normwise(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale
}

fn random(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec_unchecked(shape, (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Values bounded away from zero, so kinks are never straddled.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec_unchecked(
        shape,
        (0..shape.numel())
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
}

struct OpCase {
    op: Op,
    inputs: Vec<Tensor<f64>>,
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let s = |n, c, h, w| Shape::new(n, c, h, w);
    let mut r = |shape: Shape| random(shape, rng, -1.0, 1.0);
    let mut cases = vec![
        OpCase {
            op: Op::Conv2d { stride: 1, pad: Padding::reflect(1) },
            inputs: vec![r(s(2, 2, 5, 6)), r(s(3, 2, 3, 3)), r(s(3, 1, 1, 1))],
        },
        OpCase { op: Op::Conv2d { stride: 2, pad: Padding::zero(1) }, inputs: vec![r(s(1, 2, 8, 7)), r(s(2, 2, 4, 4))] },
        OpCase { op: Op::Conv2dTranspose { stride: 2, pad: Padding::zero(1) }, inputs: vec![r(s(1, 2, 4, 3)), r(s(2, 3, 3, 3))] },
        OpCase { op: Op::Resize(Resize::Up2), inputs: vec![r(s(1, 2, 3, 4))] },
        OpCase { op: Op::Resize(Resize::Down2), inputs: vec![r(s(1, 2, 6, 4))] },
        OpCase { op: Op::Tanh, inputs: vec![r(s(1, 2, 3, 3)).scale(2.0)] },
        OpCase {
            op: Op::InstanceNorm { eps: 1e-5 },
            inputs: vec![r(s(2, 3, 4, 3)), r(s(3, 1, 1, 1)), r(s(3, 1, 1, 1))],
        },
        OpCase { op: Op::Add, inputs: vec![r(s(1, 2, 3, 3)), r(s(1, 2, 3, 3))] },
        OpCase { op: Op::Sub, inputs: vec![r(s(1, 2, 3, 3)), r(s(1, 2, 3, 3))] },
        OpCase { op: Op::Mul, inputs: vec![r(s(1, 2, 3, 3)), r(s(1, 2, 3, 3))] },
        OpCase { op: Op::MulMask, inputs: vec![r(s(2, 3, 3, 4)), r(s(2, 1, 3, 4))] },
        OpCase { op: Op::ConcatChannels, inputs: vec![r(s(1, 2, 3, 3)), r(s(1, 1, 3, 3)), r(s(1, 3, 3, 3))] },
        OpCase { op: Op::PyrDown, inputs: vec![r(s(1, 2, 8, 6))] },
        OpCase { op: Op::PyrUp, inputs: vec![r(s(1, 2, 3, 4))] },
        OpCase { op: Op::Crop { h: 3, w: 2 }, inputs: vec![r(s(1, 2, 5, 4))] },
        OpCase { op: Op::Scale(-1.7), inputs: vec![r(s(1, 2, 3, 3))] },
        OpCase { op: Op::AddScalar(0.3), inputs: vec![r(s(1, 2, 3, 3))] },
        OpCase { op: Op::Square, inputs: vec![r(s(1, 2, 3, 3))] },
        OpCase { op: Op::Mean, inputs: vec![r(s(1, 2, 3, 3))] },
        OpCase { op: Op::Sum, inputs: vec![r(s(1, 2, 3, 3))] },
    ];
    cases.push(OpCase { op: Op::LeakyRelu { slope: 0.2 }, inputs: vec![away_from_zero(s(1, 2, 4, 4), rng)] });
    cases
}

/// `sum(out * proj)` on any graph, with `proj` fixed.
fn projected<T: Scalar, G: Graph<T>>(g: &mut G, out: &G::Node, proj: &Tensor<f64>) -> Result<G::Node> {
    let p = g.constant(proj.cast());
    let prod = g.mul(out, &p)?;
    g.sum(&prod)
}

fn check_op(case: &OpCase, rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<CheckRow> {
    let refs: Vec<&Tensor<f64>> = case.inputs.iter().collect();
    let out = op::forward(&case.op, &refs)?;
    let proj = random(out.shape(), rng, -1.0, 1.0);

    let mut tape = Tape::<f32>::new();
    tape.inject_fault(opts.fault);
    let vars: Vec<_> = case.inputs.iter().map(|t| tape.parameter(t.cast())).collect();
    let var_refs: Vec<_> = vars.iter().collect();
    let y = tape.apply(case.op.clone(), &var_refs)?;
    let loss = projected(&mut tape, &y, &proj)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
        let y = op::forward(&case.op, &refs)?;
        Ok(projected(&mut Eager, &y, &proj)?.item()?)
    };
    let (mut worst, mut worst_err) = (String::new(), 0.0);
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads.get_or_zeros(*v, &tape).data().iter().map(|&a| a as f64).collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let mut plus = case.inputs.clone();
            let mut minus = case.inputs.clone();
            plus[i] = bump(&plus[i], j, opts.step);
            minus[i] = bump(&minus[i], j, -opts.step);
            numeric.push((eval(&plus)? - eval(&minus)?) / (2.0 * opts.step));
        }
        let err = normwise(&analytic, &numeric);
        if err >= worst_err {
            worst_err = err;
            worst = format!("input {i}");
        }
    }
    Ok(CheckRow {
        name: case.op.kind().name().to_string(),
        max_rel_error: worst_err,
        worst,
        passed: worst_err < opts.tolerance,
    })
}

fn bump(t: &Tensor<f64>, j: usize, delta: f64) -> Tensor<f64> {
    let mut d = t.to_vec();
    d[j] += delta;
    Tensor::from_vec_unchecked(t.shape(), d)
}

/// Small networks used for the end-to-end check on a 32x32 input.
pub fn small_networks(seed: u64) -> Result<(Generator<f64>, Discriminator<f64>)> {
    let gcfg = GeneratorConfig { low_channels: 4, mask_channels: 3, num_res_blocks: 1, ..GeneratorConfig::with_levels(3) };
    let dcfg = DiscriminatorConfig { base_channels: 3, max_channels: 6, num_layers: 2, ..Default::default() };
    let mut gen = Generator::<f64>::new(gcfg, InitScheme::Random, seed)?;
    let mut disc = Discriminator::<f64>::new(dcfg, seed + 1)?;
    // Perturb everything so no tensor sits at an exactly-zero or unit init.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for set in [&mut gen.params, &mut disc.params] {
        for (_, t) in set.iter_mut() {
            *t = t.zip_map(&random(t.shape(), &mut rng, -0.2, 0.2), "perturb", |a, b| a + b)?;
        }
    }
    Ok((gen, disc))
}

/// Value-only graph that keeps every leaky ReLU on one linear piece: the
/// first pass records which inputs are positive, later passes reuse that
/// selection. Near the recording point the result equals the true loss to
/// first order, so central differences of it are not spoilt by kinks that a
/// finite step would otherwise cross.
#[derive(Default)]
struct FrozenKinks {
    masks: Vec<Vec<bool>>,
    replay: bool,
    cursor: usize,
}

impl FrozenKinks {
    fn replaying(masks: &[Vec<bool>]) -> Self {
        FrozenKinks { masks: masks.to_vec(), replay: true, cursor: 0 }
    }
}

impl Graph<f64> for FrozenKinks {
    type Node = Tensor<f64>;

    fn constant(&mut self, t: Tensor<f64>) -> Tensor<f64> {
        t
    }

    fn value<'a>(&'a self, n: &'a Tensor<f64>) -> &'a Tensor<f64> {
        n
    }

    fn apply(&mut self, op: Op, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        let Op::LeakyRelu { slope } = op else { return op::forward(&op, inputs) };
        let x = inputs[0];
        if !self.replay {
            self.masks.push(x.data().iter().map(|&v| v > 0.0).collect());
            return op::forward(&op, inputs);
        }
        let mask = self.masks.get(self.cursor).filter(|m| m.len() == x.len());
        let mask = mask.ok_or_else(|| crate::Error::Internal("leaky ReLU replay diverged from the recording".into()))?;
        self.cursor += 1;
        let data = x.data().iter().zip(mask).map(|(&v, &pos)| if pos { v } else { slope * v }).collect();
        Tensor::new(x.shape(), data)
    }
}

#[derive(Clone, Copy)]
enum Objective {
    Generator,
    Discriminator,
}

/// Loss of the small networks on fixed inputs, on any graph.
fn network_loss<T: Scalar, G: Graph<T>>(
    g: &mut G,
    obj: Objective,
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    real_a: &Tensor<T>,
    real_b: &Tensor<T>,
) -> Result<(G::Node, Vec<(String, G::Node)>)> {
    let gp = gen.params.bind(g, true);
    let dp = disc.params.bind(g, true);
    let pyr = decompose_input(real_a, &gen.config)?;
    let out = generator_forward(g, &gp, &gen.config, &pyr)?;
    let fake_maps = d_forward_multiscale(g, &dp, &disc.config, &out.image)?;
    let loss = match obj {
        Objective::Generator => {
            let adv = g_adv_loss(g, &fake_maps)?;
            let a = g.constant(real_a.clone());
            let r = recon_loss(g, &out.image, &a)?;
            total_g_loss(g, LossWeights::default(), &r, &adv)?
        }
        Objective::Discriminator => {
            let b = g.constant(real_b.clone());
            let real_maps = d_forward_multiscale(g, &dp, &disc.config, &b)?;
            d_adv_loss(g, &real_maps, &fake_maps)?
        }
    };
    let mut vars: Vec<(String, G::Node)> = gp.iter().map(|(k, v)| (format!("generator.{k}"), v.clone())).collect();
    vars.extend(dp.iter().map(|(k, v)| (format!("discriminator.{k}"), v.clone())));
    Ok((loss, vars))
}

fn check_network(obj: Objective, opts: &GradcheckOptions) -> Result<CheckRow> {
    let (gen, disc) = small_networks(opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x51);
    let real_a = random(Shape::new(1, 3, 32, 32), &mut rng, -0.9, 0.9);
    let real_b = random(Shape::new(1, 3, 32, 32), &mut rng, -0.9, 0.9);

    let (gen32, disc32) = (gen.cast::<f32>(), disc.cast::<f32>());
    let mut tape = Tape::<f32>::new();
    tape.inject_fault(opts.fault);
    let (loss, vars) = network_loss(&mut tape, obj, &gen32, &disc32, &real_a.cast(), &real_b.cast())?;
    let grads = tape.backward(loss)?;

    let mut recorder = FrozenKinks::default();
    network_loss(&mut recorder, obj, &gen, &disc, &real_a, &real_b)?;
    let eval = |gen: &Generator<f64>, disc: &Discriminator<f64>| -> Result<f64> {
        let (l, _) = network_loss(&mut FrozenKinks::replaying(&recorder.masks), obj, gen, disc, &real_a, &real_b)?;
        l.item()
    };
    let mut probed = Vec::new();
    for (name, v) in &vars {
        let analytic_full = grads.get_or_zeros(*v, &tape);
        let n = analytic_full.len();
        let probes: Vec<usize> = if n <= opts.probes_per_tensor {
            (0..n).collect()
        } else {
            (0..opts.probes_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        let (is_gen, key) = match name.strip_prefix("generator.") {
            Some(k) => (true, k),
            None => (false, name.strip_prefix("discriminator.").expect("prefixed")),
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &j in &probes {
            let mut lp = [0.0; 2];
            for (slot, sign) in [(0, 1.0), (1, -1.0)] {
                let (mut g2, mut d2) = (gen.clone(), disc.clone());
                let set: &mut ParamSet<f64> = if is_gen { &mut g2.params } else { &mut d2.params };
                let t = set.get_mut(key)?;
                *t = bump(t, j, sign * opts.step);
                lp[slot] = eval(&g2, &d2)?;
            }
            analytic.push(analytic_full.data()[j] as f64);
            numeric.push((lp[0] - lp[1]) / (2.0 * opts.step));
        }
        probed.push((name.clone(), analytic, numeric));
    }
    let objective_scale = probed.iter().flat_map(|(_, _, n)| n).fold(0.0f64, |m, v| m.max(v.abs()));
    let (mut worst, mut worst_err) = (String::new(), 0.0);
    for (name, analytic, numeric) in &probed {
        let replay_zero = numeric.iter().all(|v| v.abs() < ROUNDOFF_ZERO);
        let err = if replay_zero && objective_scale > 0.0 {
            analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())) / objective_scale
        } else {
            normwise(analytic, numeric)
        };
        if err >= worst_err {
            worst_err = err;
            worst = name.clone();
        }
    }
    let label = match obj {
        Objective::Generator => "generator_loss",
        Objective::Discriminator => "discriminator_loss",
    };
    Ok(CheckRow { name: label.into(), max_rel_error: worst_err, worst, passed: worst_err < opts.tolerance })
}

/// Every differentiable op on small random inputs, then the full generator
/// and discriminator objectives on a 32x32 three-level instance.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport::default();
    let cases = op_cases(&mut rng);
    for case in &cases {
        let row = check_op(case, &mut rng, opts)?;
        match report.rows.iter_mut().find(|r| r.name == row.name) {
            Some(existing) if existing.max_rel_error >= row.max_rel_error => existing.passed &= row.passed,
            Some(existing) => {
                let passed = existing.passed && row.passed;
                *existing = CheckRow { passed, ..row };
            }
            None => report.rows.push(row),
        }
    }
    report.rows.push(check_network(Objective::Generator, opts)?);
    report.rows.push(check_network(Objective::Discriminator, opts)?);
    Ok(report)
}
