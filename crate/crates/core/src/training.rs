//! AdamW with parameter groups, gradient accumulation, the epoch loop and
//! early stopping.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_model, CheckpointKind};
use crate::data::{batch_examples, encode_examples, Batch, Example, QaRecord};
use crate::error::{Error, Result};
use crate::inference::evaluate_examples;
use crate::metrics::MetricsReport;
use crate::model::QaModel;
use crate::params::{sum_grads, ParamGroup, ParamStore};
use crate::tokenizer::{Vocab, DEFAULT_MAX_LEN};

/// Learning-rate multiplier as a function of the optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear ramp from `1/warmup_steps` to 1, then constant.
    LinearWarmup { warmup_steps: usize },
}

impl LrSchedule {
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::LinearWarmup { warmup_steps } if warmup_steps > 0 => {
                ((step + 1) as f64 / warmup_steps as f64).min(1.0)
            }
            LrSchedule::LinearWarmup { .. } => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// LoRA factors (and the encoder itself under full fine-tuning).
    pub lr_encoder_side: f64,
    /// Bi-LSTM and position heads.
    pub lr_heads: f64,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps_adam: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub max_len: usize,
    /// Share of records used for training; the rest is validation.
    pub train_fraction: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder_side: 2e-5,
            lr_heads: 1e-4,
            micro_batch: 16,
            accumulation_steps: 4,
            epochs: 8,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps_adam: 1e-8,
            early_stop_patience: 2,
            seed: 42,
            max_len: DEFAULT_MAX_LEN,
            train_fraction: 0.9,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Learning rates and batch size for the toy preset (effective batch 8).
    pub fn toy() -> Self {
        Self {
            lr_encoder_side: 5e-3,
            lr_heads: 3e-3,
            micro_batch: 8,
            accumulation_steps: 1,
            ..Self::default()
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.micro_batch == 0 || self.accumulation_steps == 0 || self.epochs == 0 {
            return bad("micro_batch, accumulation_steps and epochs must be >= 1");
        }
        for (name, lr) in [("lr_encoder_side", self.lr_encoder_side), ("lr_heads", self.lr_heads)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps_adam > 0.0) {
            return bad("eps_adam must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.max_len < 5 {
            return bad("max_len must be >= 5");
        }
        Ok(())
    }

    /// Reads JSON or TOML, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)?,
            _ => serde_json::from_str(&text)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder | ParamGroup::Adapter => self.lr_encoder_side,
            ParamGroup::Head => self.lr_heads,
        }
    }
}

// ---------------------------------------------------------------------------
// AdamW

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    step: usize,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// One update of every trainable parameter from `grad_scale * grad`
    /// (a missing gradient counts as zero). Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig, grad_scale: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.trainable() {
                continue;
            }
            if let Some(g) = &p.tensor.grad {
                if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !(*v * grad_scale).is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: p.name.clone(),
                        index,
                        value,
                    });
                }
            }
        }
        let t = (self.step + 1) as i32;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let factor = cfg.lr_schedule.factor(self.step);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            if !p.trainable() {
                continue;
            }
            let lr = cfg.lr_for(p.group) * factor;
            let n = p.tensor.numel();
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = if p.decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            let grad = p.tensor.grad.take();
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i] * grad_scale);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] *= decay;
                data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps_adam);
            }
        }
        self.step += 1;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Early stopping

/// Tracks the best `(primary, tiebreak)` pair, compared lexicographically.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns whether it improved on the best so far.
    pub fn observe(&mut self, primary: f64, tiebreak: f64) -> bool {
        let better = match self.best {
            None => true,
            Some((p, t)) => primary > p || (primary == p && tiebreak > t),
        };
        if better {
            self.best = Some((primary, tiebreak));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(f64, f64)> {
        self.best
    }
}

// ---------------------------------------------------------------------------
// Trainer

/// Dropout seed for one example: a splitmix64 mix of the run seed, the
/// epoch and the example's position in the epoch. Independent of how the
/// epoch is cut into micro-batches.
pub fn dropout_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    let mut z = seed ^ ((epoch as u64) << 40) ^ position as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Accumulates per-example gradients and applies averaged AdamW steps.
pub struct Trainer<'m> {
    pub model: &'m mut QaModel,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    /// Whether dropout is active during training.
    pub dropout: bool,
    pending: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut QaModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.store.zero_grads();
        Ok(Self {
            model,
            config,
            optimizer: AdamW::new(),
            dropout: true,
            pending: 0,
        })
    }

    /// Adds the summed gradients of `batch` to the pending window and
    /// returns the summed loss. `first_position` numbers the batch's first
    /// example within the epoch for dropout seeding.
    pub fn accumulate(&mut self, batch: &Batch, epoch: usize, first_position: usize) -> Result<f64> {
        let model: &QaModel = self.model;
        let seed = self.config.seed;
        let dropout = self.dropout;
        let results: Vec<(f64, Vec<_>)> = batch
            .inputs
            .par_iter()
            .zip(&batch.spans)
            .enumerate()
            .map(|(i, (packed, span))| {
                let ds = dropout.then(|| dropout_seed(seed, epoch, first_position + i));
                model.example_grads(packed, *span, ds)
            })
            .collect::<Result<_>>()?;
        let loss: f64 = results.iter().map(|(l, _)| l).sum();
        let grads = sum_grads(results.into_iter().map(|(_, g)| g));
        self.model.store.accumulate(&grads, 1.0);
        self.pending += batch.len();
        Ok(loss)
    }

    /// Number of examples accumulated since the last step.
    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Averaged gradients of the pending window, by parameter name.
    pub fn pending_gradients(&self) -> Vec<(String, Vec<f64>)> {
        let scale = 1.0 / self.pending.max(1) as f64;
        self.model
            .store
            .iter()
            .filter_map(|(_, p)| {
                p.tensor
                    .grad
                    .as_ref()
                    .map(|g| (p.name.clone(), g.iter().map(|x| x * scale).collect()))
            })
            .collect()
    }

    /// Steps on the mean gradient of the pending window. No-op when empty.
    pub fn step(&mut self) -> Result<()> {
        if self.pending == 0 {
            return Ok(());
        }
        let scale = 1.0 / self.pending as f64;
        let out = self.optimizer.step(&mut self.model.store, &self.config, scale);
        self.model.store.zero_grads();
        self.pending = 0;
        out
    }

    /// One pass over `batches`, stepping every `accumulation_steps`
    /// micro-batches and once more for a trailing partial window. Returns
    /// the mean per-example loss.
    pub fn train_epoch(&mut self, batches: &[Batch], epoch: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut seen = 0;
        for (i, batch) in batches.iter().enumerate() {
            total += self.accumulate(batch, epoch, seen)?;
            seen += batch.len();
            if (i + 1) % self.config.accumulation_steps == 0 {
                self.step()?;
            }
        }
        self.step()?;
        Ok(total / seen.max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: MetricsReport,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochReport>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    /// Checkpoint file of the best epoch, when checkpoints were written.
    pub best_checkpoint: Option<String>,
    pub best_validation: MetricsReport,
    pub optimizer_steps: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub dropped_train: usize,
    pub dropped_val: usize,
    pub wall_time_secs: f64,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt-epoch{epoch}.dqaw")
}

/// Trains with per-epoch validation and early stopping on validation
/// end-position accuracy (Span F1 breaks ties), then restores the best
/// weights. With `out_dir`,
/// each improving epoch is saved as `ckpt-epochN.dqaw`.
pub fn fit(
    model: &mut QaModel,
    vocab: &Vocab,
    train: &[QaRecord],
    val: &[QaRecord],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainingReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set"));
    }
    let started = Instant::now();
    let (train_ex, train_dropped) = encode_examples(train, vocab, cfg.max_len)?;
    let (val_ex, val_dropped) = encode_examples(val, vocab, cfg.max_len)?;
    if train_ex.is_empty() {
        return Err(Error::EmptyDataset("every training record was dropped"));
    }
    if val_ex.is_empty() {
        return Err(Error::EmptyDataset("every validation record was dropped"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, ParamStore, MetricsReport)> = None;
    let mut best_checkpoint = None;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    for epoch in 1..=cfg.epochs {
        let shuffle = dropout_seed(cfg.seed, epoch, usize::MAX);
        let batches = batch_examples(&train_ex, cfg.micro_batch, shuffle)?;
        let train_loss = trainer.train_epoch(&batches, epoch)?;
        let (validation, _) = evaluate_examples(trainer.model, vocab, &val_ex)?;
        let improved = stopper.observe(validation.end_accuracy, validation.span_f1);
        log::info!(
            "epoch {epoch}: loss {train_loss:.4}, val end acc {:.4}, span f1 {:.4}{}",
            validation.end_accuracy,
            validation.span_f1,
            if improved { " *" } else { "" }
        );
        if improved {
            best = Some((epoch, trainer.model.store.clone(), validation.clone()));
            if let Some(dir) = out_dir {
                let name = checkpoint_name(epoch);
                save_model(&dir.join(&name), trainer.model, vocab, CheckpointKind::Full)?;
                best_checkpoint = Some(name);
            }
        }
        epochs.push(EpochReport {
            epoch,
            train_loss,
            validation,
            improved,
        });
        if stopper.should_stop() {
            break;
        }
    }
    let optimizer_steps = trainer.optimizer.steps();
    let (best_epoch, best_store, best_validation) = best.expect("first epoch always improves");
    model.copy_values_from(&best_store)?;
    Ok(TrainingReport {
        stopped_epoch: epochs.len(),
        epochs,
        best_epoch,
        best_checkpoint,
        best_validation,
        optimizer_steps,
        n_train: train_ex.len(),
        n_val: val_ex.len(),
        dropped_train: train_dropped.len(),
        dropped_val: val_dropped.len(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Packed examples and micro-batches for a record set, as `fit` builds them.
pub fn prepare(records: &[QaRecord], vocab: &Vocab, cfg: &TrainConfig, shuffle_seed: u64) -> Result<(Vec<Example>, Vec<Batch>)> {
    let (ex, _) = encode_examples(records, vocab, cfg.max_len)?;
    let batches = batch_examples(&ex, cfg.micro_batch, shuffle_seed)?;
    Ok((ex, batches))
}
