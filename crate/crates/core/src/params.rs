//! Named parameter storage and seeded initialization.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Arc<Tensor>,
    gradient: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn gradient(&self) -> &Tensor {
        &self.gradient
    }

    pub fn gradient_mut(&mut self) -> &mut Tensor {
        &mut self.gradient
    }
}

/// Initialization scheme for [`seeded_init`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform on `[-bound, bound]`.
    UniformRange(f64),
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, fan-in being the last dimension.
    FanIn,
    Zeros,
}

/// Deterministic initialization: identical `(shape, seed, scheme)` give bit-identical tensors.
pub fn seeded_init(shape: &[usize], seed: u64, scheme: InitScheme) -> Tensor {
    let bound = match scheme {
        InitScheme::Zeros => return Tensor::zeros(shape),
        InitScheme::UniformRange(b) => b.abs(),
        InitScheme::FanIn => {
            let fan_in = shape.last().copied().unwrap_or(1).max(1);
            1.0 / (fan_in as f64).sqrt()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if bound == 0.0 {
                0.0
            } else {
                rng.gen_range(-bound..=bound)
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("product of shape")
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let gradient = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value: Arc::new(value),
            gradient,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Adds a parameter initialized with a per-parameter seed derived from `seed`.
    pub fn add_init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        seed: u64,
        scheme: InitScheme,
    ) -> Result<ParamId> {
        let local = mix_seed(seed, self.params.len() as u64);
        self.add(name, seeded_init(shape, local, scheme))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// SplitMix64 finalizer over `seed + stream`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
