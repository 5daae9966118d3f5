//! Named parameters and the small building-block layers shared by the
//! attention blocks and the network.
//!
//! Layers never own tensors. Each layer knows the paths of its parameters and
//! can describe them as [`ParamSpec`]s; a [`ParamStore`] materialises those
//! specs, and [`ParamStore::bind`] lifts every stored tensor onto a tape so a
//! forward pass can look parameters up by path.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};
use crate::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Path-ordered map of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { tensors: BTreeMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every spec in order from `rng`.
    pub fn from_specs<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let tensor = match spec.init {
                Init::Uniform(bound) => Tensor::uniform(spec.shape.clone(), bound, rng),
                Init::Const(v) => Tensor::full(spec.shape.clone(), T::from_f64(v)),
            };
            if store.tensors.insert(spec.path.clone(), tensor).is_some() {
                return Err(Error::Config(format!("duplicate parameter path {}", spec.path)));
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(path.into(), tensor)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.tensors.get(path)
    }

    /// Replaces an existing tensor, keeping its shape.
    pub fn set(&mut self, path: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(path)
            .ok_or_else(|| Error::CheckpointMismatch(format!("no parameter named {path}")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape("set_param", slot.shape(), tensor.shape()));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn map(&self, f: impl Fn(&str, &Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), f(k, v))).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that the store holds exactly the parameters described by `specs`.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.tensors.get(&spec.path) {
                None => return Err(Error::CheckpointMismatch(format!("missing parameter {}", spec.path))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::CheckpointMismatch(format!(
                        "parameter {} has shape {:?}, model expects {:?}",
                        spec.path,
                        t.shape(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let expected: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.path.as_str()).collect();
            if let Some(extra) = self.tensors.keys().find(|k| !expected.contains(k.as_str())) {
                return Err(Error::CheckpointMismatch(format!("unexpected parameter {extra}")));
            }
        }
        Ok(())
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        Bindings { vars }
    }
}

/// Parameter path → tape variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::CheckpointMismatch(format!("parameter {path} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of all bound parameters; parameters the loss did not reach get zeros.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> ParamStore<T> {
        let tensors = self
            .vars
            .iter()
            .map(|(k, &v)| {
                let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()));
                (k.clone(), g)
            })
            .collect();
        ParamStore { tensors }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// `y = x · w (+ b)` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(prefix: &str, cin: usize, cout: usize, bias: bool) -> Self {
        Self {
            w: join(prefix, "w"),
            b: bias.then(|| join(prefix, "b")),
            cin,
            cout,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let bound = fan_in_bound(self.cin);
        out.push(ParamSpec {
            path: self.w.clone(),
            shape: vec![self.cin, self.cout],
            init: Init::Uniform(bound),
        });
        if let Some(b) = &self.b {
            out.push(ParamSpec {
                path: b.clone(),
                shape: vec![self.cout],
                init: Init::Uniform(bound),
            });
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let w = p.get(&self.w)?;
        let b = self.b.as_deref().map(|b| p.get(b)).transpose()?;
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub c: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(prefix: &str, c: usize) -> Self {
        Self {
            gamma: join(prefix, "gamma"),
            beta: join(prefix, "beta"),
            c,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            path: self.gamma.clone(),
            shape: vec![self.c],
            init: Init::Const(1.0),
        });
        out.push(ParamSpec {
            path: self.beta.clone(),
            shape: vec![self.c],
            init: Init::Const(0.0),
        });
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let (g, b) = (p.get(&self.gamma)?, p.get(&self.beta)?);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// `linear(C → rC) → GELU → linear(rC → C)`
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(prefix: &str, c: usize, ratio: usize) -> Self {
        Self {
            fc1: Linear::new(&join(prefix, "fc1"), c, c * ratio, true),
            fc2: Linear::new(&join(prefix, "fc2"), c * ratio, c, true),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.fc1.specs(out);
        self.fc2.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}
