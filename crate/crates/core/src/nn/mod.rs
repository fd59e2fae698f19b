//! Parameterized layers shared by both backbones.
//!
//! Layers are stateless descriptions (names + hyperparameters). Their tensors
//! live in a [`ParamStore`]; a forward pass binds the store onto a tape and
//! threads a [`Forward`] context through the layers.

mod layers;
mod store;

pub use layers::{BatchNorm2d, Conv2d, LayerNorm, Linear, Mhsa, Mlp, PatchEmbed};
pub use store::{Binding, ParamEntry, ParamStore};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal { std: f32 },
    /// `N(0, 2/fan_in)`.
    Kaiming,
    /// `N(0, 1/fan_in)`.
    FanIn,
    Zeros,
    Ones,
}

impl Init {
    pub fn sample(self, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
            Init::TruncNormal { std } => Tensor::from_fn(shape.to_vec(), |_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break (z * std as f64) as f32;
                }
            }),
            Init::Kaiming | Init::FanIn => {
                let gain = if self == Init::Kaiming { 2.0 } else { 1.0 };
                let std = (gain / fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (z * std) as f32
                })
            }
        }
    }
}

/// A pending write to a non-trainable buffer, applied after the step.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferUpdate {
    pub name: String,
    pub value: Tensor,
}

/// Everything a layer needs during one forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub binding: &'a Binding,
    pub store: &'a ParamStore,
    pub train: bool,
    pub updates: Vec<BufferUpdate>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, binding: &'a Binding, store: &'a ParamStore, train: bool) -> Self {
        Forward {
            tape,
            binding,
            store,
            train,
            updates: Vec::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.binding.var(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor> {
        self.store.get(name)
    }
}

/// Apply buffer writes collected during a forward pass.
pub fn apply_updates(store: &mut ParamStore, updates: Vec<BufferUpdate>) -> Result<()> {
    for u in updates {
        store.set(&u.name, u.value)?;
    }
    Ok(())
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
