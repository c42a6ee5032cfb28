use std::path::Path;
use std::process::{Command, Output};

use disaqa::checkpoint::{save_model, CheckpointKind};
use disaqa::data::{encode_examples, generate_synthetic, save_dataset, TemplateSet};
use disaqa::inference::Prediction;
use disaqa::metrics::MetricsReport;
use disaqa::tokenizer::Vocab;
use disaqa::{ModelConfig, QaModel};

fn disaqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disaqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn disaqa")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    let out = disaqa(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(disaqa(&[]).status.code(), Some(1));
    assert_eq!(disaqa(&["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(disaqa(&["--help"]).status.code(), Some(0));
    assert_eq!(disaqa(&["eval", "--data", "x.jsonl"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_2() {
    let out = disaqa(&["eval", "--data", "/nonexistent/file.jsonl", "--ckpt", "/nonexistent.dqaw"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":\"x\"}\n").unwrap();
    assert_eq!(disaqa(&["predict", "--data", path(&bad), "--ckpt", path(&bad)]).status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic() {
    let a = disaqa(&["gen-data", "--n", "25", "--seed", "3"]);
    let b = disaqa(&["gen-data", "--n", "25", "--seed", "3"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8_lossy(&a.stdout).lines().count(), 25);
    assert_ne!(a.stdout, disaqa(&["gen-data", "--n", "25", "--seed", "4"]).stdout);
}

#[test]
fn count_params_reports_budget() {
    let out = disaqa(&["count-params", "--preset", "paper-scale"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let fraction = v["fraction"].as_f64().unwrap();
    assert!((0.04..=0.08).contains(&fraction), "{fraction}");
    assert!(v["breakdown"]["lora"].as_u64().unwrap() > 0);

    let full: serde_json::Value =
        serde_json::from_slice(&disaqa(&["count-params", "--mode", "full"]).stdout).unwrap();
    assert_eq!(full["fraction"].as_f64(), Some(1.0));
}

#[test]
fn eval_with_gold_predictions_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let records = generate_synthetic(30, 8, &TemplateSet::disaster_bulletins()).unwrap();
    save_dataset(&data, &records).unwrap();
    let texts: Vec<&str> = records.iter().flat_map(|r| [r.question.as_str(), r.context.as_str()]).collect();
    let vocab = Vocab::build(&texts, 1).unwrap();
    let (examples, _) = encode_examples(&records, &vocab, 384).unwrap();
    let preds: Vec<Prediction> = examples
        .iter()
        .map(|e| Prediction {
            id: e.id.clone(),
            start: e.span.0,
            end: e.span.1,
            score: 0.0,
            text: e.answer_text.clone(),
        })
        .collect();
    let pred_path = dir.path().join("p.jsonl");
    let lines: Vec<String> = preds
        .iter()
        .map(|p| serde_json::json!({"id": p.id, "start": p.start, "end": p.end, "text": p.text}).to_string())
        .collect();
    std::fs::write(&pred_path, lines.join("\n") + "\n").unwrap();

    let out = disaqa(&["eval", "--data", path(&data), "--predictions", path(&pred_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: MetricsReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(
        (m.start_accuracy, m.end_accuracy, m.span_f1, m.exact_match, m.n_examples),
        (1.0, 1.0, 1.0, 1.0, 30)
    );
    assert!((m.bleu - 1.0).abs() < 1e-12);

    std::fs::write(&pred_path, lines[1..].join("\n")).unwrap();
    assert_eq!(
        disaqa(&["eval", "--data", path(&data), "--predictions", path(&pred_path)]).status.code(),
        Some(2)
    );
}

#[test]
fn predict_then_eval_matches_checkpoint_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let records = generate_synthetic(12, 2, &TemplateSet::disaster_bulletins()).unwrap();
    save_dataset(&data, &records).unwrap();
    let texts: Vec<&str> = records.iter().flat_map(|r| [r.question.as_str(), r.context.as_str()]).collect();
    let vocab = Vocab::build(&texts, 1).unwrap();
    let model = QaModel::new(ModelConfig::toy(vocab.len()), 4).unwrap();
    let ckpt = dir.path().join("m.dqaw");
    save_model(&ckpt, &model, &vocab, CheckpointKind::Full).unwrap();

    let preds = dir.path().join("p.jsonl");
    let out = disaqa(&["predict", "--data", path(&data), "--ckpt", path(&ckpt), "--out", path(&preds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let via_preds = disaqa(&["eval", "--data", path(&data), "--predictions", path(&preds)]);
    let via_ckpt = disaqa(&["eval", "--data", path(&data), "--ckpt", path(&ckpt)]);
    assert!(via_preds.status.success() && via_ckpt.status.success());
    let a: MetricsReport = serde_json::from_slice(&via_preds.stdout).unwrap();
    let b: MetricsReport = serde_json::from_slice(&via_ckpt.stdout).unwrap();
    assert_eq!(a, b);

    let report = dir.path().join("budget.json");
    assert!(disaqa(&["count-params", "--ckpt", path(&ckpt), "--out", path(&report)]).status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["total"].as_u64().unwrap() as usize, model.store.total_count());
}

#[test]
fn grad_check_subcommand_passes_on_toy() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("grad.json");
    let out = disaqa(&["grad-check", "--entries", "2", "--out", path(&out_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["frozen_max_abs_grad"].as_f64(), Some(0.0));
}
