//! Named parameter storage shared by every model component.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Transformer encoder weights (frozen under LoRA).
    Encoder,
    /// LoRA factors attached to encoder matrices.
    Adapter,
    /// Bi-LSTM and position heads.
    Head,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
    /// Whether AdamW applies decoupled weight decay.
    pub decay: bool,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        group: ParamGroup,
        decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor,
            group,
            decay,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Param> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Binds a parameter onto a tape without copying it.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, id: ParamId) -> Var {
        tape.param(id, &self.params[id.0].tensor)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].tensor.requires_grad = trainable;
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds `scale * g` into each listed parameter's gradient accumulator.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<f64>)], scale: f64) {
        for (id, g) in grads {
            self.params[id.0].tensor.accumulate_grad(g, scale);
        }
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
    /// LSTM bias laid out as `[i, f, g, o]`: uniform in `±bound`, forget
    /// quarter set to `forget`.
    GateBias { bound: f64, forget: f64 },
}

/// Everything needed to create one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub group: ParamGroup,
    pub decay: bool,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Receives parameter declarations from model constructors.
///
/// [`Initializer`] allocates real tensors; [`ShapeRecorder`] only records
/// the declarations, which is how paper-scale models are counted without
/// allocating them.
pub trait ParamSink {
    fn declare(&mut self, spec: ParamSpec) -> Result<ParamId>;
}

pub struct Initializer<'s, R: Rng> {
    pub store: &'s mut ParamStore,
    pub rng: R,
}

impl<R: Rng> ParamSink for Initializer<'_, R> {
    fn declare(&mut self, spec: ParamSpec) -> Result<ParamId> {
        let tensor = match spec.init {
            Init::Normal(std) => Tensor::randn(&spec.shape, std, &mut self.rng),
            Init::Uniform(bound) => Tensor::uniform(&spec.shape, bound, &mut self.rng),
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::filled(&spec.shape, 1.0),
            Init::GateBias { bound, forget } => {
                let mut t = Tensor::uniform(&spec.shape, bound, &mut self.rng);
                let h = t.numel() / 4;
                t.data_mut()[h..2 * h].fill(forget);
                t
            }
        };
        self.store.add(
            spec.name,
            tensor.with_requires_grad(spec.trainable),
            spec.group,
            spec.decay,
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct ShapeRecorder {
    pub specs: Vec<ParamSpec>,
}

impl ParamSink for ShapeRecorder {
    fn declare(&mut self, spec: ParamSpec) -> Result<ParamId> {
        self.specs.push(spec);
        Ok(ParamId(self.specs.len() - 1))
    }
}

/// Sums per-example gradient lists in the order given.
pub fn sum_grads(lists: impl IntoIterator<Item = Vec<(ParamId, Vec<f64>)>>) -> Vec<(ParamId, Vec<f64>)> {
    let mut acc: Vec<(ParamId, Vec<f64>)> = Vec::new();
    let mut index: HashMap<ParamId, usize> = HashMap::new();
    for list in lists {
        for (id, g) in list {
            match index.get(&id) {
                Some(&i) => {
                    for (a, b) in acc[i].1.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => {
                    index.insert(id, acc.len());
                    acc.push((id, g));
                }
            }
        }
    }
    acc.sort_by_key(|(id, _)| *id);
    acc
}
