//! Span-extraction metrics: start/end position accuracy, token-position
//! Span F1, Exact Match and corpus BLEU with a brevity penalty.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive token span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub start_accuracy: f64,
    pub end_accuracy: f64,
    pub span_f1: f64,
    pub exact_match: f64,
    pub bleu: f64,
    pub n_examples: usize,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "start_accuracy,end_accuracy,span_f1,exact_match,bleu,n_examples"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.start_accuracy, self.end_accuracy, self.span_f1, self.exact_match, self.bleu, self.n_examples
        )
    }
}

fn check_pairs(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::EmptyDataset(what));
    }
    if a != b {
        return Err(Error::Shape {
            op: what,
            lhs: vec![a],
            rhs: vec![b],
        });
    }
    Ok(())
}

/// `(start accuracy, end accuracy)`: fraction of exact index matches.
pub fn position_accuracy(preds: &[Span], golds: &[Span]) -> Result<(f64, f64)> {
    check_pairs("position_accuracy", preds.len(), golds.len())?;
    let n = preds.len() as f64;
    let starts = preds.iter().zip(golds).filter(|(p, g)| p.start == g.start).count();
    let ends = preds.iter().zip(golds).filter(|(p, g)| p.end == g.end).count();
    Ok((starts as f64 / n, ends as f64 / n))
}

/// F1 over the token positions covered by each span; 0 when they share
/// no position.
pub fn span_f1(pred: Span, gold: Span) -> f64 {
    let lo = pred.start.max(gold.start);
    let hi = pred.end.min(gold.end);
    if hi < lo || pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let precision = overlap / pred.len() as f64;
    let recall = overlap / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Macro-averaged [`span_f1`].
pub fn mean_span_f1(preds: &[Span], golds: &[Span]) -> Result<f64> {
    check_pairs("span_f1", preds.len(), golds.len())?;
    let total: f64 = preds.iter().zip(golds).map(|(p, g)| span_f1(*p, *g)).sum();
    Ok(total / preds.len() as f64)
}

pub fn exact_match(preds: &[Span], golds: &[Span]) -> Result<f64> {
    check_pairs("exact_match", preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with clipped, corpus-pooled n-gram precisions and uniform
/// weights.
///
/// The highest order is `min(4, longest candidate)`, so short extractive
/// answers are not forced to zero by orders they cannot contain. Any
/// pooled precision of zero gives 0 (no smoothing). The brevity penalty is
/// `1` when `c > r`, else `exp(1 - r/c)`, which is 0 for an all-empty
/// candidate corpus.
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Shape {
            op: "bleu",
            lhs: vec![candidates.len()],
            rhs: vec![references.len()],
        });
    }
    if references.is_empty() {
        return Err(Error::EmptyDataset("bleu references"));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::EmptyAxis("bleu reference"));
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let max_order = candidates.iter().map(Vec::len).max().unwrap_or(0).min(4);
    if c == 0 || max_order == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let (mut matched, mut total) = (0usize, 0usize);
        for (cand, reference) in candidates.iter().zip(references) {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                total += count;
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln() / max_order as f64;
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * log_sum.exp())
}

/// All metrics at once. `pred_tokens`/`gold_tokens` feed BLEU.
pub fn evaluate_spans<T: Eq + Hash>(
    preds: &[Span],
    golds: &[Span],
    pred_tokens: &[Vec<T>],
    gold_tokens: &[Vec<T>],
) -> Result<MetricsReport> {
    let (start_accuracy, end_accuracy) = position_accuracy(preds, golds)?;
    Ok(MetricsReport {
        start_accuracy,
        end_accuracy,
        span_f1: mean_span_f1(preds, golds)?,
        exact_match: exact_match(preds, golds)?,
        bleu: bleu(pred_tokens, gold_tokens)?,
        n_examples: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(a: usize, b: usize) -> Span {
        Span::new(a, b)
    }

    #[test]
    fn position_accuracy_cases() {
        let g = vec![s(1, 2), s(3, 5), s(0, 0), s(4, 9)];
        assert_eq!(position_accuracy(&g, &g).unwrap(), (1.0, 1.0));
        let p = vec![s(0, 2), s(3, 6), s(1, 1), s(5, 8)];
        assert_eq!(position_accuracy(&p, &g).unwrap().1, 0.25);
        let p: Vec<Span> = g.iter().map(|x| s(x.start, x.end + 1)).collect();
        assert_eq!(position_accuracy(&p, &g).unwrap(), (1.0, 0.0));
        assert!(position_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn span_f1_cases() {
        assert_eq!(span_f1(s(2, 4), s(2, 4)), 1.0);
        assert!((span_f1(s(2, 4), s(3, 5)) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(span_f1(s(0, 1), s(5, 6)), 0.0);
    }

    #[test]
    fn exact_match_cases() {
        let g = vec![s(1, 2), s(3, 5), s(0, 0), s(4, 9), s(2, 2)];
        assert_eq!(exact_match(&g, &g).unwrap(), 1.0);
        let p: Vec<Span> = g.iter().map(|x| s(x.start, x.end + 1)).collect();
        assert_eq!(exact_match(&p, &g).unwrap(), 0.0);
        let mut p = g.clone();
        p[1] = s(0, 0);
        p[2] = s(1, 1);
        p[3] = s(4, 8);
        assert!((exact_match(&p, &g).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn bleu_cases() {
        let r = vec![vec!['a', 'b', 'c', 'd', 'e']];
        assert!((bleu(&r, &r).unwrap() - 1.0).abs() < 1e-12);

        let cand = vec![vec!["w1", "w2"]];
        let refs = vec![vec!["w1", "w2", "w3", "w4"]];
        let v = bleu(&cand, &refs).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-9, "{v}");

        let cand = vec![vec![1, 2, 3, 4, 5]];
        let refs = vec![vec![1, 2, 3, 9, 5]];
        assert_eq!(bleu(&cand, &refs).unwrap(), 0.0);

        let cand: Vec<Vec<u8>> = vec![vec![]];
        assert_eq!(bleu(&cand, &[vec![1u8]]).unwrap(), 0.0);
        assert!(bleu(&[vec![1u8]], &[vec![]]).is_err());
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        let cand = vec![vec!['x', 'x', 'x', 'x']];
        let refs = vec![vec!['x', 'y', 'z', 'w']];
        assert_eq!(bleu(&cand, &refs).unwrap(), 0.0);
    }

    #[test]
    fn csv_row_has_all_fields() {
        let m = MetricsReport {
            start_accuracy: 1.0,
            end_accuracy: 0.5,
            span_f1: 0.75,
            exact_match: 0.5,
            bleu: 0.25,
            n_examples: 4,
        };
        assert_eq!(m.to_csv_row().split(',').count(), MetricsReport::csv_header().split(',').count());
        let json = serde_json::to_string(&m).unwrap();
        for f in MetricsReport::csv_header().split(',') {
            assert!(json.contains(&format!("\"{f}\"")));
        }
    }
}
