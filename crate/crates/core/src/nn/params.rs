use indexmap::IndexMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Initialization rule attached to a parameter at registration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-b, b]` with `b = sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Constant(f64),
}

impl Init {
    pub fn kaiming_bound(fan_in: usize) -> f64 {
        (6.0 / fan_in as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub init: Init,
}

/// Ordered store of learnable parameters plus non-learnable buffers (running
/// statistics). Iteration follows registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T> {
    params: IndexMap<String, ParamEntry<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    /// Registers a parameter holding zeros until [`ParamRegistry::init_params`] runs.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (index, _) = self.params.insert_full(
            name.to_string(),
            ParamEntry {
                value: Tensor::zeros(shape),
                init,
            },
        );
        Ok(ParamId(index))
    }

    pub fn register_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        let (index, _) = self.buffers.insert_full(name.to_string(), value);
        Ok(BufferId(index))
    }

    /// Kaiming-uniform kernels, constants elsewhere. Draws happen in
    /// registration order, so the result depends only on the seed.
    pub fn init_params(&mut self, rng: &mut Rng) {
        for entry in self.params.values_mut() {
            match entry.init {
                Init::KaimingUniform { fan_in } => {
                    let b = Init::kaiming_bound(fan_in);
                    for v in entry.value.data_mut() {
                        *v = T::of(rng.uniform_range(-b, b));
                    }
                }
                Init::Constant(c) => entry.value.data_mut().fill(T::of(c)),
            }
        }
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), &mut v.value))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Looks up a parameter or buffer by name for overwriting.
    pub fn slot_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if let Some(p) = self.params.get_mut(name) {
            return Some(&mut p.value);
        }
        self.buffers.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.buffers.contains_key(name)
    }

    /// Records every parameter on `tape`; as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .params
            .values()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape, in registry order.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients in registry order.
    pub fn grads(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
