//! Residual Bi-LSTM, windowed start/end position heads, the span loss and
//! constrained span decoding.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Declarer, Linear, INIT_STD};
use crate::params::{Init, ParamGroup, ParamId, ParamSink, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

pub const DEFAULT_END_WEIGHT: f64 = 3.0;
pub const DEFAULT_MAX_ANSWER_LEN: usize = 64;

/// One LSTM direction. Gate order in the stacked matrices is
/// input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmWeights {
    pub forward: LstmCell,
    pub backward: LstmCell,
    /// Maps `[→h; ←h]` back to `d_model` when the per-direction width is
    /// not `d_model / 2`.
    pub projection: Option<Linear>,
}

/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 2.0;

impl BiLstmWeights {
    pub(crate) fn declare<S: ParamSink + ?Sized>(decl: &mut Declarer<'_, S>, d_model: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("lstm hidden size must be >= 1".into()));
        }
        let g = ParamGroup::Head;
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut cell = |dir: &str| -> Result<LstmCell> {
            Ok(LstmCell {
                w_ih: decl.param(format!("bilstm.{dir}.w_ih"), &[4 * hidden, d_model], Init::Uniform(bound), g, true)?,
                w_hh: decl.param(format!("bilstm.{dir}.w_hh"), &[4 * hidden, hidden], Init::Uniform(bound), g, true)?,
                bias: decl.param(format!("bilstm.{dir}.bias"), &[4 * hidden], Init::GateBias { bound, forget: FORGET_BIAS }, g, false)?,
                hidden,
            })
        };
        let forward = cell("fwd")?;
        let backward = cell("bwd")?;
        let projection = if 2 * hidden == d_model {
            None
        } else {
            Some(decl.linear("bilstm.proj", d_model, 2 * hidden, Init::Normal(INIT_STD), g)?)
        };
        Ok(Self {
            forward,
            backward,
            projection,
        })
    }
}

fn run_direction<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    cell: &LstmCell,
    x: Var,
    reverse: bool,
) -> Result<Vec<Var>> {
    let l = tape.value(x).rows();
    let hs = cell.hidden;
    let w_ih = store.bind(tape, cell.w_ih);
    let w_hh = store.bind(tape, cell.w_hh);
    let bias = store.bind(tape, cell.bias);
    // Input contributions for every step at once: [L, 4h].
    let xw = tape.linear(x, w_ih, Some(bias))?;
    let mut h = tape.constant(Tensor::zeros(&[1, hs]));
    let mut c = tape.constant(Tensor::zeros(&[1, hs]));
    let mut out = vec![h; l];
    let order: Vec<usize> = if reverse {
        (0..l).rev().collect()
    } else {
        (0..l).collect()
    };
    for t in order {
        let xt = tape.slice_rows(xw, t, t + 1)?;
        let hw = tape.matmul_nt(h, w_hh)?;
        let gates = tape.add(xt, hw)?;
        let i = tape.slice_cols(gates, 0, hs)?;
        let f = tape.slice_cols(gates, hs, 2 * hs)?;
        let g = tape.slice_cols(gates, 2 * hs, 3 * hs)?;
        let o = tape.slice_cols(gates, 3 * hs, 4 * hs)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
        out[t] = h;
    }
    Ok(out)
}

/// `[→h_t; ←h_t]` for every position, `[L, 2·hidden]`.
pub fn bilstm_states<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, w: &BiLstmWeights, x: Var) -> Result<Var> {
    if tape.value(x).rows() == 0 {
        return Err(Error::EmptyAxis("bilstm"));
    }
    let fwd = run_direction(tape, store, &w.forward, x, false)?;
    let bwd = run_direction(tape, store, &w.backward, x, true)?;
    let f = tape.concat_rows(&fwd)?;
    let b = tape.concat_rows(&bwd)?;
    tape.concat_cols(&[f, b])
}

/// Bi-LSTM with a residual connection: `h_bert + [→h; ←h]` (projected
/// back to `d_model` when the widths differ).
pub fn bilstm_encode<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, w: &BiLstmWeights, h_bert: Var) -> Result<Var> {
    let states = bilstm_states(tape, store, w, h_bert)?;
    let states = match &w.projection {
        Some(p) => p.forward(tape, store, states)?,
        None => states,
    };
    tape.add(h_bert, states)
}

/// Two-layer scorer over a width-3 window of neighbouring states.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionHead {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionHeadWeights {
    pub start: PositionHead,
    pub end: PositionHead,
    pub end_weight: f64,
}

impl PositionHeadWeights {
    pub(crate) fn declare<S: ParamSink + ?Sized>(decl: &mut Declarer<'_, S>, d_model: usize, end_weight: f64) -> Result<Self> {
        if end_weight <= 0.0 {
            return Err(Error::Config(format!("end_weight must be > 0, got {end_weight}")));
        }
        let g = ParamGroup::Head;
        let init = Init::Normal(INIT_STD);
        let mut head = |which: &str| -> Result<PositionHead> {
            Ok(PositionHead {
                hidden: decl.linear(&format!("head.{which}.hidden"), d_model, 3 * d_model, init, g)?,
                out: decl.linear(&format!("head.{which}.out"), 1, d_model, init, g)?,
            })
        };
        let start = head("start")?;
        let end = head("end")?;
        Ok(Self {
            start,
            end,
            end_weight,
        })
    }
}

/// `[h_{i-1}, h_i, h_{i+1}]` per row with zero rows past either boundary.
pub fn window3(tape: &mut Tape<'_>, h: Var) -> Result<Var> {
    let (l, d) = tape.value(h).dims2();
    let zero = tape.constant(Tensor::zeros(&[1, d]));
    if l == 1 {
        return tape.concat_cols(&[zero, h, zero]);
    }
    let head = tape.slice_rows(h, 0, l - 1)?;
    let tail = tape.slice_rows(h, 1, l)?;
    let prev = tape.concat_rows(&[zero, head])?;
    let next = tape.concat_rows(&[tail, zero])?;
    tape.concat_cols(&[prev, h, next])
}

fn head_logits<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, head: &PositionHead, window: Var) -> Result<Var> {
    let z = head.hidden.forward(tape, store, window)?;
    let z = tape.tanh(z);
    head.out.forward(tape, store, z)
}

/// Start and end logits, each `[L, 1]`.
pub fn position_logits<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    w: &PositionHeadWeights,
    h: Var,
) -> Result<(Var, Var)> {
    if tape.value(h).rows() == 0 {
        return Err(Error::EmptyAxis("position_logits"));
    }
    let win = window3(tape, h)?;
    let s = head_logits(tape, store, &w.start, win)?;
    let e = head_logits(tape, store, &w.end, win)?;
    Ok((s, e))
}

/// `CE(start | context) + end_weight · CE(end | context)` with both
/// softmaxes restricted to the context zone.
pub fn qa_loss(
    tape: &mut Tape<'_>,
    start_logits: Var,
    end_logits: Var,
    true_start: usize,
    true_end: usize,
    context: Range<usize>,
    end_weight: f64,
) -> Result<Var> {
    for idx in [true_start, true_end] {
        if !context.contains(&idx) {
            return Err(Error::Index {
                what: "gold position outside context zone",
                index: idx,
                len: context.end,
            });
        }
    }
    let s = tape.slice_rows(start_logits, context.start, context.end)?;
    let e = tape.slice_rows(end_logits, context.start, context.end)?;
    let ls = tape.cross_entropy(s, true_start - context.start)?;
    let le = tape.cross_entropy(e, true_end - context.start)?;
    let le = tape.scale(le, end_weight);
    tape.add(ls, le)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    /// `log P_start(start) + log P_end(end)`.
    pub score: f64,
}

/// Best `(s, e)` with `s <= e < s + max_answer_len` inside `context`, by
/// joint log-probability. Ties go to the smallest `s`, then smallest `e`.
///
/// Pairs are ranked by the raw logit sum, which differs from the joint
/// log-probability by a constant and keeps exact ties exact.
pub fn decode_span(
    start_logits: &[f64],
    end_logits: &[f64],
    context: Range<usize>,
    max_answer_len: usize,
) -> Result<SpanPrediction> {
    if context.is_empty() || context.end > start_logits.len() || context.end > end_logits.len() {
        return Err(Error::EmptyAxis("decode_span context"));
    }
    if max_answer_len == 0 {
        return Err(Error::Config("max_answer_len must be >= 1".into()));
    }
    let ls = &start_logits[context.clone()];
    let le = &end_logits[context.clone()];
    let n = ls.len();
    let (mut best_s, mut best_e) = (0, 0);
    let mut best = f64::NEG_INFINITY;
    for s in 0..n {
        let last = (s + max_answer_len).min(n);
        for e in s..last {
            let score = ls[s] + le[e];
            if score > best {
                best = score;
                (best_s, best_e) = (s, e);
            }
        }
    }
    if !best.is_finite() {
        return Err(Error::NonFinite("decode_span logits".into()));
    }
    let score = tensor::log_softmax(ls)?[best_s] + tensor::log_softmax(le)?[best_e];
    Ok(SpanPrediction {
        start: context.start + best_s,
        end: context.start + best_e,
        score,
    })
}
