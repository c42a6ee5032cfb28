//! Span metrics on hand-made predictions.
//!
//!     cargo run --example metrics_suite

use disaqa::metrics::{bleu, evaluate_spans, span_f1, Span};

fn main() -> disaqa::Result<()> {
    let gold = [Span::new(10, 13), Span::new(4, 4), Span::new(20, 27), Span::new(7, 9)];
    let pred = [Span::new(10, 13), Span::new(4, 5), Span::new(22, 27), Span::new(0, 2)];
    for (p, g) in pred.iter().zip(&gold) {
        println!("pred {:>2}..={:<2} gold {:>2}..={:<2}  f1 {:.3}", p.start, p.end, g.start, g.end, span_f1(*p, *g));
    }

    let pred_text: Vec<Vec<char>> = ["震度6強", "熊本県阿", "午後3時15分", "高台"].iter().map(|s| s.chars().collect()).collect();
    let gold_text: Vec<Vec<char>> = ["震度6強", "熊本県", "午前11時3時15分", "海岸"].iter().map(|s| s.chars().collect()).collect();
    let report = evaluate_spans(&pred, &gold, &pred_text, &gold_text)?;
    println!("{}", disaqa::metrics::MetricsReport::csv_header());
    println!("{}", report.to_csv_row());

    // Half-length candidate with perfect precision: brevity penalty e^-1.
    let b = bleu(&[vec!["w1", "w2"]], &[vec!["w1", "w2", "w3", "w4"]])?;
    println!("bleu of a perfect half-length candidate: {b:.6} (e^-1 = {:.6})", (-1.0f64).exp());
    Ok(())
}
