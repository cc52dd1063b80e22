//! Learnable parameters keyed by dotted path.
//!
//! Every tensor is initialized from its own random stream derived from the
//! run seed and the path, so adding or removing a component (for example
//! the anchoring head) leaves every other parameter bit-identical.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vega_autodiff::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` where `fan_in` is the first dimension.
    KaimingUniform,
    Zeros,
    Ones,
    Normal { std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(path: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            path: path.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Weight `[d_in, d_out]` and bias `[d_out]` for an affine map.
pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.w"), [d_in, d_out], Init::KaimingUniform),
        ParamSpec::new(format!("{prefix}.b"), [d_out], Init::Zeros),
    ]
}

/// Sum of parameter counts over specs whose path starts with `prefix`.
pub fn count_params(specs: &[ParamSpec], prefix: &str) -> usize {
    specs
        .iter()
        .filter(|s| s.path.starts_with(prefix))
        .map(ParamSpec::numel)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// FNV-1a, used only to derive a stable per-path seed.
fn path_hash(path: &str) -> u64 {
    path.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn initialize(spec: &ParamSpec, seed: u64) -> Vec<f32> {
    let n = spec.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ path_hash(&spec.path));
    match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::KaimingUniform => {
            let fan_in = spec.shape.first().copied().unwrap_or(1).max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
        }
        Init::Normal { std } => {
            let dist = Normal::new(0.0, std).expect("std is a finite positive constant");
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let params = specs
            .iter()
            .map(|s| {
                (
                    s.path.clone(),
                    Param {
                        shape: s.shape.clone(),
                        values: initialize(s, seed),
                    },
                )
            })
            .collect();
        Self { params }
    }

    pub fn from_params(params: BTreeMap<String, Param>) -> Self {
        Self { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.params.get_mut(path)
    }

    /// Overwrites the values of an existing parameter.
    pub fn set(&mut self, path: &str, values: Vec<f32>) -> Result<()> {
        let p = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))?;
        if values.len() != p.values.len() {
            return Err(Error::Argument(format!(
                "{path}: {} values for shape {:?}",
                values.len(),
                p.shape
            )));
        }
        p.values = values;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.values.len())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.count("")
    }

    /// Keeps only parameters whose path satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (path, p) in &self.params {
            let v = g.param(Tensor::from_f32(p.shape.clone(), &p.values)?);
            vars.insert(path.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Parameters as `f64` tensors in path order, for gradient checking.
    pub fn to_f64_tensors(&self) -> Result<Vec<Tensor<f64>>> {
        self.params
            .values()
            .map(|p| Ok(Tensor::from_f32(p.shape.clone(), &p.values)?))
            .collect()
    }
}

/// Graph handles for each bound parameter.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Pairs `paths` with already-created graph variables.
    pub fn from_vars<'a>(paths: impl IntoIterator<Item = &'a str>, vars: &[Var]) -> Self {
        Self {
            vars: paths.into_iter().map(str::to_string).zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.vars.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_count() {
        let specs = linear_specs("x", 3, 2);
        assert_eq!(count_params(&specs, ""), 8);
    }

    #[test]
    fn init_depends_only_on_seed_and_path() {
        let a = ParamStore::initialize(&[ParamSpec::new("enc.w", [4, 3], Init::KaimingUniform)], 7);
        let b = ParamStore::initialize(
            &[
                ParamSpec::new("vega.w", [5, 5], Init::KaimingUniform),
                ParamSpec::new("enc.w", [4, 3], Init::KaimingUniform),
            ],
            7,
        );
        assert_eq!(a.get("enc.w"), b.get("enc.w"));
        let bound = 0.5;
        assert!(a.get("enc.w").unwrap().values.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn zeros_and_ones() {
        let s = ParamStore::initialize(
            &[
                ParamSpec::new("b", [3], Init::Zeros),
                ParamSpec::new("g", [3], Init::Ones),
            ],
            1,
        );
        assert_eq!(s.get("b").unwrap().values, vec![0.0; 3]);
        assert_eq!(s.get("g").unwrap().values, vec![1.0; 3]);
        assert_eq!(s.total(), 6);
    }
}
