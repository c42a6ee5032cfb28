//! Small building blocks shared by the encoder and the QA head.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{Init, ParamGroup, ParamId, ParamSink, ParamSpec, ParamStore};
use crate::tape::{Tape, Var};

/// BERT initializer range.
pub const INIT_STD: f64 = 0.02;

/// Which parameters are optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Frozen encoder; adapters, Bi-LSTM and heads train.
    #[default]
    Lora,
    /// Everything trains.
    Full,
}

impl TrainMode {
    pub fn trainable(self, group: ParamGroup) -> bool {
        match self {
            TrainMode::Full => true,
            TrainMode::Lora => group != ParamGroup::Encoder,
        }
    }
}

pub(crate) struct Declarer<'s, S: ParamSink + ?Sized> {
    pub sink: &'s mut S,
    pub mode: TrainMode,
}

impl<S: ParamSink + ?Sized> Declarer<'_, S> {
    pub fn param(
        &mut self,
        name: String,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
        decay: bool,
    ) -> Result<ParamId> {
        self.sink.declare(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            group,
            decay,
            trainable: self.mode.trainable(group),
        })
    }

    pub fn linear(&mut self, prefix: &str, out: usize, inp: usize, init: Init, group: ParamGroup) -> Result<Linear> {
        Ok(Linear {
            weight: self.param(format!("{prefix}.weight"), &[out, inp], init, group, true)?,
            bias: self.param(format!("{prefix}.bias"), &[out], Init::Zeros, group, false)?,
        })
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize, group: ParamGroup) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gamma: self.param(format!("{prefix}.gamma"), &[d], Init::Ones, group, false)?,
            beta: self.param(format!("{prefix}.beta"), &[d], Init::Zeros, group, false)?,
        })
    }
}

/// `y = x · Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.weight);
        let b = store.bind(tape, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, eps: f64) -> Result<Var> {
        let g = store.bind(tape, self.gamma);
        let b = store.bind(tape, self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}
