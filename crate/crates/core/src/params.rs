//! Named parameter storage, seeded initialization and freeze policy.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{contract, Result};
use crate::tensor::{Grads, Tape, Tensor, Var};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Stable 64-bit value derived from a seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Ordered map of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initializes every spec from its own stream derived from `(seed, name)`,
    /// so values do not depend on declaration order.
    pub fn init_group(&mut self, specs: &[ParamSpec], seed: u64) {
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Const(c) => vec![c; n],
                Init::Normal(std) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &spec.name));
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            self.tensors.insert(
                spec.name.clone(),
                Tensor::from_parts(spec.shape.clone(), data),
            );
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// SHA-256 over names, shapes and value bits of every parameter whose
    /// name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Which parameters the optimizer may touch.
#[derive(Clone, Debug, Default)]
pub struct FreezePolicy {
    frozen_prefixes: Vec<String>,
}

impl FreezePolicy {
    pub fn new<S: Into<String>>(frozen_prefixes: impl IntoIterator<Item = S>) -> Self {
        Self {
            frozen_prefixes: frozen_prefixes.into_iter().map(Into::into).collect(),
        }
    }

    /// A policy that trains everything.
    pub fn all_trainable() -> Self {
        Self::default()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen_prefixes.iter().any(|p| name.starts_with(p))
    }

    pub fn frozen_prefixes(&self) -> &[String] {
        &self.frozen_prefixes
    }
}

/// A tape plus lazily bound parameters. Trainable parameters become
/// gradient-tracked leaves; frozen ones become constants.
pub struct Graph<'a> {
    tape: Tape,
    params: &'a ParamStore,
    policy: &'a FreezePolicy,
    bound: BTreeMap<String, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore, policy: &'a FreezePolicy) -> Self {
        Self {
            tape: Tape::new(),
            params,
            policy,
            bound: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.params.get(name)?.clone();
        let v = if self.policy.is_trainable(name) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Records a data input (never differentiated).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    /// Gradients of every trainable parameter used by this graph.
    pub fn param_grads(&self, grads: &Grads) -> GradMap {
        self.bound
            .iter()
            .filter(|(_, v)| self.tape.requires_grad(**v))
            .map(|(name, v)| (name.clone(), grads.get(*v)))
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
