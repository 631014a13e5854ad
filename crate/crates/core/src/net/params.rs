use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// How a freshly built parameter tensor is filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fill {
    /// Uniform in `±1/sqrt(fan_in)`, where fan-in is `C·kh·kw` of the weight
    /// (biases reuse their weight's fan-in).
    FanIn(usize),
    Zeros,
    Ones,
}

/// Name, shape and initial fill of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub fill: Fill,
}

/// Named tensors in a stable order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { tensors: IndexMap::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fills every spec in order from one ChaCha stream seeded by `seed`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for spec in specs {
            let t = match spec.fill {
                Fill::Zeros => Tensor::zeros(spec.shape),
                Fill::Ones => Tensor::ones(spec.shape),
                Fill::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let data = (0..spec.shape.numel()).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
                    Tensor::from_vec_unchecked(spec.shape, data)
                }
            };
            set.insert(spec.name.clone(), t);
        }
        set
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Checks names and shapes against `specs`. Missing, unexpected and
    /// mis-shaped tensors are reported by the first offending name.
    pub fn check_layout(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape {
                return Err(Error::ShapeMismatch { op: "parameter layout", left: t.shape(), right: spec.shape });
            }
        }
        if let Some(extra) = self.names().find(|n| !specs.iter().any(|s| s.name == *n)) {
            return Err(Error::invalid("parameter layout", format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Places every tensor on `g`, as trainable leaves or as constants.
    pub fn bind<G: Graph<T>>(&self, g: &mut G, trainable: bool) -> Bound<G::Node> {
        let nodes = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let n = if trainable { g.parameter(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), n)
            })
            .collect();
        Bound { nodes }
    }
}

/// Parameters placed on a graph, looked up by name.
#[derive(Clone, Debug)]
pub struct Bound<N> {
    nodes: IndexMap<String, N>,
}

impl<N> Bound<N> {
    pub fn get(&self, name: &str) -> Result<&N> {
        self.nodes.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &N)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Pushes the weight and bias specs of a `c_in -> c_out` convolution.
pub(crate) fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, c_in: usize, c_out: usize, k: usize, weight: Fill, bias: Fill) {
    out.push(ParamSpec { name: format!("{prefix}.weight"), shape: Shape::new(c_out, c_in, k, k), fill: weight });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: Shape::new(c_out, 1, 1, 1), fill: bias });
}

pub(crate) fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec { name: format!("{prefix}.gamma"), shape: Shape::new(c, 1, 1, 1), fill: Fill::Ones });
    out.push(ParamSpec { name: format!("{prefix}.beta"), shape: Shape::new(c, 1, 1, 1), fill: Fill::Zeros });
}
