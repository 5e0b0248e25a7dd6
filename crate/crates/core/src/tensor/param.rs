use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Seed for parameter initialization. Each parameter draws from its own
/// generator keyed by its name, so a parameter's initial value does not
/// depend on which other parameters exist.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng_for(&self, name: &str) -> Xoshiro256StarStar {
        // FNV-1a: stable across platforms and toolchains
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Xoshiro256StarStar::seed_from_u64(self.seed ^ h)
    }
}

/// Registry of named trainable tensors and their gradient buffers.
///
/// Registration order is stable and defines checkpoint record order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        id
    }

    /// Uniform initialization in `[-s, s]` with `s = sqrt(1 / fan_in)`,
    /// drawn from a generator keyed by `(init.seed, name)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, init: Init) -> ParamId {
        let name = name.into();
        let mut rng = init.rng_for(&name);
        let bound = (1.0 / fan_in as f64).sqrt();
        let value = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                detail: format!("{}: expected {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, grad: &[f64]) {
        let g = self.params[id.0].grad.data_mut();
        g.iter_mut().zip(grad).for_each(|(a, b)| *a += b);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies values of same-named, same-shaped parameters from `other`.
    /// Returns how many parameters were copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(id) = other.get(&p.name) {
                let src = other.value(id);
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
