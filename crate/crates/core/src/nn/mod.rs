//! Parameterised layers and the spatial rearrangements the network uses.
//!
//! Layers only hold [`ParamId`]s into a [`ParamStore`]. A forward pass binds
//! the store once (to a tape for training, or as constants for inference)
//! and hands the resulting [`Bound`] to every layer.

mod checkpoint;
mod layers;
mod spatial;

pub use checkpoint::{load_params, save_params, CHECKPOINT_MAGIC};
pub use layers::{Conv3x3, Ffn, LayerNorm, Linear, RelativePositionBias, LN_EPS};
pub use spatial::{
    avg_pool_downscale, crop, pad_reflect, pad_to_multiple, pixel_shuffle, pixel_unshuffle,
    reflect_index, window_merge, window_order, window_partition,
};

use crate::tensor::{Element, Gradients, Tape, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors. The order is the registration order,
/// which is also the checkpoint record order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Copies every parameter of `other` whose name and shape match one
    /// here. Returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for (name, value) in other.iter() {
            if let Some(id) = self.find(name) {
                if self.values[id.0].shape() == value.shape() {
                    self.values[id.0] = value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Same parameters in another precision.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Wraps every parameter as a trainable leaf on `tape`, or as a constant
    /// when `tape` is `None`.
    pub fn bind(&self, tape: Option<&Tape<T>>) -> Bound<T> {
        let vars = self
            .values
            .iter()
            .map(|v| match tape {
                Some(t) => t.leaf(v.clone()),
                None => Var::constant(v.clone()),
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters wrapped as variables for one forward pass.
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T: Element> Bound<T> {
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    /// Gradients in store order; parameters the loss did not reach get zeros.
    pub fn grads(&self, g: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}
