//! Batch prediction and evaluation over QA records.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_examples, Example, QaRecord};
use crate::error::Result;
use crate::metrics::{evaluate_spans, MetricsReport, Span};
use crate::model::QaModel;
use crate::tokenizer::{encode_pair, PackedInput, Vocab};

/// One line of a predictions file. `start`/`end` are inclusive token
/// indices into the packed input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub score: f64,
    pub text: String,
}

/// Answer text for an inclusive token span of `packed`.
pub fn span_text(packed: &PackedInput, vocab: &Vocab, start: usize, end: usize) -> String {
    vocab.decode(&packed.token_ids[start..=end])
}

pub fn predict_packed(model: &QaModel, vocab: &Vocab, id: &str, packed: &PackedInput) -> Result<Prediction> {
    let p = model.predict(packed)?;
    Ok(Prediction {
        id: id.to_string(),
        start: p.start,
        end: p.end,
        score: p.score,
        text: span_text(packed, vocab, p.start, p.end),
    })
}

/// Predictions for every record, in input order. Records whose gold answer
/// would be truncated are still predicted.
pub fn predict_records(model: &QaModel, vocab: &Vocab, records: &[QaRecord], max_len: usize) -> Result<Vec<Prediction>> {
    records
        .par_iter()
        .map(|r| {
            let packed = encode_pair(&r.question, &r.context, vocab, max_len)?;
            predict_packed(model, vocab, &r.id, &packed)
        })
        .collect()
}

/// Metrics over already-packed examples. BLEU compares predicted and gold
/// answers character by character.
pub fn evaluate_examples(model: &QaModel, vocab: &Vocab, examples: &[Example]) -> Result<(MetricsReport, Vec<Prediction>)> {
    let preds: Vec<Prediction> = examples
        .par_iter()
        .map(|e| predict_packed(model, vocab, &e.id, &e.packed))
        .collect::<Result<_>>()?;
    let pred_spans: Vec<Span> = preds.iter().map(|p| Span::new(p.start, p.end)).collect();
    let gold_spans: Vec<Span> = examples.iter().map(|e| Span::new(e.span.0, e.span.1)).collect();
    let pred_chars: Vec<Vec<char>> = preds.iter().map(|p| p.text.chars().collect()).collect();
    let gold_chars: Vec<Vec<char>> = examples.iter().map(|e| e.answer_text.chars().collect()).collect();
    let report = evaluate_spans(&pred_spans, &gold_spans, &pred_chars, &gold_chars)?;
    Ok((report, preds))
}

/// Packs, drops unrepresentable answers and evaluates. Returns the report,
/// the predictions and the number of dropped records.
pub fn evaluate(
    model: &QaModel,
    vocab: &Vocab,
    records: &[QaRecord],
    max_len: usize,
) -> Result<(MetricsReport, Vec<Prediction>, usize)> {
    let (examples, dropped) = encode_examples(records, vocab, max_len)?;
    let (report, preds) = evaluate_examples(model, vocab, &examples)?;
    Ok((report, preds, dropped.len()))
}
