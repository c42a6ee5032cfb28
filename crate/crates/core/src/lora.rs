//! Low-rank adaptation: `W = W0 + (alpha / r) · B · A`.
//!
//! `W0: [d, k]` stays frozen; `A: [r, k]` starts as `N(0, 0.02)` and
//! `B: [d, r]` starts at zero, so a fresh adapter leaves the base output
//! untouched. The scale `alpha / r` is applied at forward time and in
//! [`merge`], never folded into `B`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Declarer, TrainMode, INIT_STD};
use crate::params::{Init, ParamGroup, ParamId, ParamSink, ParamSpec, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_rate: f64,
    /// Name of the wrapped base weight.
    pub target_id: String,
}

impl LoraAdapter {
    /// Declares `{prefix}.A: [r, k]` and `{prefix}.B: [d, r]` for a base
    /// weight of shape `[d, k]`.
    pub(crate) fn declare<S: ParamSink + ?Sized>(
        decl: &mut Declarer<'_, S>,
        prefix: &str,
        target_id: &str,
        d: usize,
        k: usize,
        cfg: &LoraConfig,
    ) -> Result<Self> {
        if cfg.rank == 0 || cfg.rank > d.min(k) {
            return Err(Error::Config(format!(
                "LoRA rank {} must be in 1..={}",
                cfg.rank,
                d.min(k)
            )));
        }
        let a = decl.param(
            format!("{prefix}.A"),
            &[cfg.rank, k],
            Init::Normal(INIT_STD),
            ParamGroup::Adapter,
            true,
        )?;
        let b = decl.param(format!("{prefix}.B"), &[d, cfg.rank], Init::Zeros, ParamGroup::Adapter, true)?;
        Ok(Self {
            a,
            b,
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout_rate: cfg.dropout,
            target_id: target_id.to_string(),
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `x · W0ᵀ + (alpha/r) · (dropout(x) · Aᵀ) · Bᵀ` on a tape.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, base_w: Var) -> Result<Var> {
        let a = store.bind(tape, self.a);
        let b = store.bind(tape, self.b);
        lora_forward(tape, x, base_w, a, b, self.scaling(), self.dropout_rate)
    }

    pub fn merged_weight(&self, store: &ParamStore, base_w: &Tensor) -> Result<Tensor> {
        merge(base_w, store.tensor(self.a), store.tensor(self.b), self.scaling())
    }
}

/// Row-vector LoRA projection. `base_w` receives gradient only if it was
/// bound as trainable, which LoRA mode never does.
pub fn lora_forward(
    tape: &mut Tape<'_>,
    x: Var,
    base_w: Var,
    a: Var,
    b: Var,
    scaling: f64,
    dropout_rate: f64,
) -> Result<Var> {
    let (d, k) = tape.value(base_w).dims2();
    let (r, ka) = tape.value(a).dims2();
    let (db, rb) = tape.value(b).dims2();
    if r != rb || ka != k || db != d {
        return Err(Error::Shape {
            op: "lora_forward (rank mismatch)",
            lhs: vec![db, rb],
            rhs: vec![r, ka],
        });
    }
    let base = tape.matmul_nt(x, base_w)?;
    let xd = tape.dropout(x, dropout_rate)?;
    let down = tape.matmul_nt(xd, a)?;
    let up = tape.matmul_nt(down, b)?;
    let up = tape.scale(up, scaling);
    tape.add(base, up)
}

/// `W0 + scaling · B · A`.
pub fn merge(base_w: &Tensor, a: &Tensor, b: &Tensor, scaling: f64) -> Result<Tensor> {
    let delta = tensor::matmul(b, a)?.scale(scaling);
    base_w.add(&delta)
}

/// `W - scaling · B · A`; inverse of [`merge`] up to rounding.
pub fn unmerge(merged: &Tensor, a: &Tensor, b: &Tensor, scaling: f64) -> Result<Tensor> {
    let delta = tensor::matmul(b, a)?.scale(scaling);
    merged.sub(&delta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
    /// Parameter counts per component (`encoder`, `lora`, `bilstm`,
    /// `head.start`, `head.end`).
    pub breakdown: BTreeMap<String, usize>,
    /// Trainable counts per component.
    pub trainable_breakdown: BTreeMap<String, usize>,
}

fn component(name: &str) -> &str {
    if let Some(rest) = name.strip_prefix("head.") {
        return if rest.starts_with("start") {
            "head.start"
        } else {
            "head.end"
        };
    }
    name.split('.').next().unwrap_or(name)
}

/// Counts parameters over a list of declarations under a training mode.
pub fn count_specs(specs: &[ParamSpec], mode: TrainMode) -> ParamBudget {
    let mut breakdown = BTreeMap::new();
    let mut trainable_breakdown = BTreeMap::new();
    let (mut total, mut trainable) = (0, 0);
    for spec in specs {
        let n = spec.numel();
        total += n;
        *breakdown.entry(component(&spec.name).to_string()).or_insert(0) += n;
        if mode.trainable(spec.group) {
            trainable += n;
            *trainable_breakdown
                .entry(component(&spec.name).to_string())
                .or_insert(0) += n;
        }
    }
    ParamBudget {
        total,
        trainable,
        fraction: if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        },
        breakdown,
        trainable_breakdown,
    }
}

/// Counts the parameters held in a store under a training mode.
pub fn count_store(store: &ParamStore, mode: TrainMode) -> ParamBudget {
    let specs: Vec<ParamSpec> = store
        .iter()
        .map(|(_, p)| ParamSpec {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            init: Init::Zeros,
            group: p.group,
            decay: p.decay,
            trainable: p.trainable(),
        })
        .collect();
    count_specs(&specs, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Initializer, ShapeRecorder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_lora(x: &Tensor, w0: &Tensor, a: &Tensor, b: &Tensor, scaling: f64, train: Option<u64>) -> Tensor {
        let mut t = match train {
            Some(seed) => Tape::train(seed),
            None => Tape::eval(),
        };
        let (xv, wv, av, bv) = (
            t.constant(x.clone()),
            t.constant(w0.clone()),
            t.constant(a.clone()),
            t.constant(b.clone()),
        );
        let y = lora_forward(&mut t, xv, wv, av, bv, scaling, 0.1).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn hand_product() {
        let b = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let y = run_lora(&x, &Tensor::zeros(&[2, 2]), &a, &b, 1.0, None);
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_b_is_identity_and_eval_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let w0 = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let a = Tensor::randn(&[2, 6], 0.02, &mut rng);
        let zero_b = Tensor::zeros(&[4, 2]);
        let base = tensor::matmul_nt(&x, &w0).unwrap();
        assert_eq!(run_lora(&x, &w0, &a, &zero_b, 8.0, Some(1)), base);
        assert_eq!(merge(&w0, &a, &zero_b, 8.0).unwrap(), w0);

        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        assert_eq!(run_lora(&x, &w0, &a, &b, 8.0, None), run_lora(&x, &w0, &a, &b, 8.0, None));
    }

    #[test]
    fn merge_matches_unmerged_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let w0 = Tensor::randn(&[8, 8], 0.02, &mut rng);
        let a = Tensor::randn(&[4, 8], 0.5, &mut rng);
        let b = Tensor::randn(&[8, 4], 0.5, &mut rng);
        let merged = merge(&w0, &a, &b, 8.0).unwrap();
        let via_merge = tensor::matmul_nt(&x, &merged).unwrap();
        let unmerged = run_lora(&x, &w0, &a, &b, 8.0, None);
        assert!(via_merge.max_abs_diff(&unmerged) < 1e-5);
        let back = unmerge(&merged, &a, &b, 8.0).unwrap();
        assert!(back.max_abs_diff(&w0) <= 1e-7);
    }

    #[test]
    fn rank_mismatch_is_an_error() {
        let mut t = Tape::eval();
        let x = t.constant(Tensor::zeros(&[1, 2]));
        let w = t.constant(Tensor::zeros(&[2, 2]));
        let a = t.constant(Tensor::zeros(&[1, 2]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        assert!(lora_forward(&mut t, x, w, a, b, 1.0, 0.0).is_err());
    }

    #[test]
    fn adapter_declares_expected_shapes_and_count() {
        let mut rec = ShapeRecorder::default();
        let mut decl = Declarer {
            sink: &mut rec,
            mode: TrainMode::Lora,
        };
        LoraAdapter::declare(&mut decl, "lora.0.q", "w", 768, 768, &LoraConfig::default()).unwrap();
        assert_eq!(rec.specs[0].shape, vec![4, 768]);
        assert_eq!(rec.specs[1].shape, vec![768, 4]);
        let budget = count_specs(&rec.specs, TrainMode::Lora);
        assert_eq!(budget.trainable, 6144);
        assert_eq!(budget.breakdown["lora"], 6144);

        let mut decl = Declarer {
            sink: &mut rec,
            mode: TrainMode::Lora,
        };
        let bad = LoraConfig {
            rank: 5,
            ..Default::default()
        };
        assert!(LoraAdapter::declare(&mut decl, "x", "w", 4, 8, &bad).is_err());
    }

    #[test]
    fn fresh_adapter_init() {
        let mut store = ParamStore::new();
        let mut init = Initializer {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        let mut decl = Declarer {
            sink: &mut init,
            mode: TrainMode::Lora,
        };
        let ad = LoraAdapter::declare(&mut decl, "lora.0.v", "w", 8, 8, &LoraConfig::default()).unwrap();
        assert!(store.tensor(ad.b).data().iter().all(|&v| v == 0.0));
        assert!(store.tensor(ad.a).data().iter().any(|&v| v != 0.0));
        assert!(store.get(ad.a).trainable() && store.get(ad.b).trainable());
        assert_eq!(ad.scaling(), 8.0);
    }
}
