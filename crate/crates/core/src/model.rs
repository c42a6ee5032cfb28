//! The full span-extraction model: encoder (optionally LoRA-adapted),
//! residual Bi-LSTM and enhanced position heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_on_tape, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradReport};
use crate::lora::{count_specs, count_store, LoraConfig, ParamBudget};
use crate::nn::{Declarer, TrainMode};
use crate::params::{Initializer, ParamId, ParamSink, ParamSpec, ParamStore, ShapeRecorder};
use crate::qa_head::{
    bilstm_encode, decode_span, position_logits, qa_loss, BiLstmWeights, PositionHeadWeights, SpanPrediction,
    DEFAULT_END_WEIGHT, DEFAULT_MAX_ANSWER_LEN,
};
use crate::tape::{Tape, Var};
use crate::tokenizer::PackedInput;

fn default_end_weight() -> f64 {
    DEFAULT_END_WEIGHT
}

fn default_max_answer_len() -> usize {
    DEFAULT_MAX_ANSWER_LEN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Per-direction Bi-LSTM width; `None` means `d_model / 2`, which makes
    /// the residual add direct. Other values add a projection.
    #[serde(default)]
    pub lstm_hidden: Option<usize>,
    /// Adapters on every layer's query and value projections.
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default = "default_end_weight")]
    pub end_weight: f64,
    #[serde(default = "default_max_answer_len")]
    pub max_answer_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    PaperScale,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self::with_encoder(EncoderConfig::toy(vocab_size))
    }

    pub fn paper_scale() -> Self {
        Self::with_encoder(EncoderConfig::paper_scale())
    }

    pub fn preset(preset: Preset, vocab_size: usize) -> Self {
        match preset {
            Preset::Toy => Self::toy(vocab_size),
            Preset::PaperScale => {
                let mut c = Self::paper_scale();
                c.encoder.vocab_size = c.encoder.vocab_size.max(vocab_size);
                c
            }
        }
    }

    pub fn with_encoder(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            lstm_hidden: None,
            lora: Some(LoraConfig::default()),
            mode: TrainMode::Lora,
            end_weight: DEFAULT_END_WEIGHT,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
        }
    }

    pub fn lstm_hidden_size(&self) -> Result<usize> {
        match self.lstm_hidden {
            Some(h) => Ok(h),
            None if self.encoder.d_model % 2 == 0 => Ok(self.encoder.d_model / 2),
            None => Err(Error::Config(format!(
                "d_model {} is odd; set lstm_hidden explicitly",
                self.encoder.d_model
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct QaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderWeights,
    pub bilstm: BiLstmWeights,
    pub heads: PositionHeadWeights,
}

type Parts = (EncoderWeights, BiLstmWeights, PositionHeadWeights);

fn declare_all<S: ParamSink + ?Sized>(sink: &mut S, config: &ModelConfig) -> Result<Parts> {
    if config.max_answer_len == 0 {
        return Err(Error::Config("max_answer_len must be >= 1".into()));
    }
    let mut decl = Declarer {
        sink,
        mode: config.mode,
    };
    let encoder = EncoderWeights::declare(&mut decl, &config.encoder, config.lora.as_ref())?;
    let bilstm = BiLstmWeights::declare(&mut decl, config.encoder.d_model, config.lstm_hidden_size()?)?;
    let heads = PositionHeadWeights::declare(&mut decl, config.encoder.d_model, config.end_weight)?;
    Ok((encoder, bilstm, heads))
}

/// Parameter declarations of a model, without allocating it.
pub fn layout(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    let mut rec = ShapeRecorder::default();
    declare_all(&mut rec, config)?;
    Ok(rec.specs)
}

/// Parameter accounting straight from a configuration.
pub fn count_params_for(config: &ModelConfig, mode: TrainMode) -> Result<ParamBudget> {
    Ok(count_specs(&layout(config)?, mode))
}

impl QaModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Initializer {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (encoder, bilstm, heads) = declare_all(&mut init, &config)?;
        Ok(Self {
            config,
            store,
            encoder,
            bilstm,
            heads,
        })
    }

    pub fn count_params(&self, mode: TrainMode) -> ParamBudget {
        count_store(&self.store, mode)
    }

    /// Start and end logits (`[L_real, 1]` each). Trailing padding is
    /// dropped before the forward pass, so it never reaches the Bi-LSTM.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, packed: &PackedInput) -> Result<(Var, Var)> {
        self.forward_with(&self.store, tape, packed)
    }

    /// [`forward`](Self::forward) reading parameter values from `store`,
    /// which must share this model's layout.
    pub fn forward_with<'a>(
        &self,
        store: &'a ParamStore,
        tape: &mut Tape<'a>,
        packed: &PackedInput,
    ) -> Result<(Var, Var)> {
        let real = packed.real_len();
        let trimmed;
        let packed = if real < packed.len() {
            trimmed = packed.with_len(real)?;
            &trimmed
        } else {
            packed
        };
        let h = encode_on_tape(tape, store, &self.encoder, &self.config.encoder, packed)?;
        let h = bilstm_encode(tape, store, &self.bilstm, h)?;
        position_logits(tape, store, &self.heads, h)
    }

    pub fn loss<'a>(&'a self, tape: &mut Tape<'a>, packed: &PackedInput, span: (usize, usize)) -> Result<Var> {
        self.loss_with(&self.store, tape, packed, span)
    }

    pub fn loss_with<'a>(
        &self,
        store: &'a ParamStore,
        tape: &mut Tape<'a>,
        packed: &PackedInput,
        span: (usize, usize),
    ) -> Result<Var> {
        let (s, e) = self.forward_with(store, tape, packed)?;
        qa_loss(
            tape,
            s,
            e,
            span.0,
            span.1,
            packed.context_token_range.clone(),
            self.heads.end_weight,
        )
    }

    /// Loss and parameter gradients for one example. `dropout_seed`
    /// switches on training-mode dropout.
    pub fn example_grads(
        &self,
        packed: &PackedInput,
        span: (usize, usize),
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
        let mut tape = match dropout_seed {
            Some(seed) => Tape::train(seed),
            None => Tape::eval(),
        };
        let loss = self.loss(&mut tape, packed, span)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss ({value})")));
        }
        Ok((value, tape.backward(loss)?.into_param_grads()))
    }

    /// Finite-difference check of the eval-mode loss gradient for one
    /// example against the tape's analytic gradient.
    pub fn check_gradients(
        &mut self,
        packed: &PackedInput,
        span: (usize, usize),
        opts: &GradCheckOptions,
    ) -> Result<GradReport> {
        let mut store = std::mem::take(&mut self.store);
        let this: &QaModel = self;
        let loss = |s: &ParamStore| -> Result<f64> {
            let mut tape = Tape::eval();
            let l = this.loss_with(s, &mut tape, packed, span)?;
            Ok(tape.value(l).data()[0])
        };
        let grads = |s: &ParamStore| -> Result<Vec<(ParamId, Vec<f64>)>> {
            let mut tape = Tape::eval();
            let l = this.loss_with(s, &mut tape, packed, span)?;
            Ok(tape.backward(l)?.into_param_grads())
        };
        let report = grad_check(&mut store, opts, loss, grads);
        self.store = store;
        report
    }

    pub fn logits(&self, packed: &PackedInput) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::eval();
        let (s, e) = self.forward(&mut tape, packed)?;
        Ok((tape.value(s).data().to_vec(), tape.value(e).data().to_vec()))
    }

    pub fn predict(&self, packed: &PackedInput) -> Result<SpanPrediction> {
        let (s, e) = self.logits(packed)?;
        decode_span(&s, &e, packed.context_token_range.clone(), self.config.max_answer_len)
    }

    /// A copy with every adapter folded into its base weight and removed.
    pub fn merged(&self) -> Result<QaModel> {
        let mut config = self.config.clone();
        config.lora = None;
        let mut out = QaModel::new(config, 0)?;
        let ids: Vec<ParamId> = out.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = out.store.get(id).name.clone();
            let src = self.store.by_name(&name)?;
            let p = out.store.get_mut(id);
            p.tensor.data_mut().copy_from_slice(src.tensor.data());
            p.tensor.requires_grad = src.tensor.requires_grad;
        }
        for (layer, merged_layer) in self.encoder.layers.iter().zip(&out.encoder.layers) {
            for (adapter, src, dst) in [
                (&layer.query_adapter, layer.query, merged_layer.query),
                (&layer.value_adapter, layer.value, merged_layer.value),
            ] {
                if let Some(ad) = adapter {
                    let w = ad.merged_weight(&self.store, self.store.tensor(src.weight))?;
                    out.store.tensor_mut(dst.weight).data_mut().copy_from_slice(w.data());
                }
            }
        }
        Ok(out)
    }

    /// Copies every tensor value from `other` (same layout required).
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for ((_, dst), (_, src)) in self.store.iter_mut().zip(other.iter()) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Config(format!("layout mismatch at `{}`", dst.name)));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}
