//! Command-line front end. Exit status: 0 success, 1 usage error,
//! 2 runtime or validation error.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::checkpoint::{load_model, save_model, CheckpointKind};
use crate::data::{encode_examples, generate_synthetic, load_dataset, read_jsonl, save_dataset, split, QaRecord, TemplateSet};
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckOptions;
use crate::inference::{evaluate, predict_records, Prediction};
use crate::metrics::{evaluate_spans, Span};
use crate::model::{count_params_for, ModelConfig, Preset, QaModel};
use crate::nn::TrainMode;
use crate::params::ParamGroup;
use crate::tokenizer::{encode_pair, Vocab, DEFAULT_MAX_LEN};
use crate::training::{fit, TrainConfig};

pub const THREADS_ENV: &str = "DISAQA_THREADS";
/// Vocabulary size assumed by `count-params --preset toy`.
pub const TOY_VOCAB_SIZE: usize = 512;

#[derive(Parser, Debug)]
#[command(name = "disaqa", version, about = "Extractive disaster-manual QA with LoRA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic disaster-bulletin QA dataset (JSONL).
    GenData {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a dataset, writing checkpoints and reports into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training configuration (JSON or TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = PresetArg::Toy)]
        preset: PresetArg,
        /// Overrides the config max_len.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score a checkpoint, or a predictions file, against a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        ckpt: Option<PathBuf>,
        /// Predictions JSONL ({"id", "start", "end", "text"}).
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write span predictions for a dataset as JSONL.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report total and trainable parameter counts.
    CountParams {
        #[arg(long, value_enum, default_value_t = PresetArg::Toy)]
        preset: PresetArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Lora)]
        mode: ModeArg,
        /// Read the configuration from a checkpoint instead of a preset.
        #[arg(long, conflicts_with = "preset")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the QA loss.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, value_enum, default_value_t = PresetArg::Toy)]
    preset: PresetArg,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Entries sampled per tensor; 0 checks every entry.
    #[arg(long, default_value_t = 4)]
    entries: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Relative-error threshold for a passing check.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Lora)]
    mode: ModeArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Toy,
    PaperScale,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Toy => Preset::Toy,
            PresetArg::PaperScale => Preset::PaperScale,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Lora,
    Full,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lora => TrainMode::Lora,
            ModeArg::Full => TrainMode::Full,
        }
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialised");
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { n, seed, out } => {
            let records = generate_synthetic(n, seed, &TemplateSet::disaster_bulletins())?;
            match out {
                Some(path) => save_dataset(&path, &records),
                None => {
                    let mut stdout = std::io::stdout().lock();
                    crate::data::write_jsonl(&mut stdout, &records)?;
                    Ok(stdout.flush()?)
                }
            }
        }
        Command::Train {
            data,
            out,
            config,
            seed,
            preset,
            max_len,
        } => train(&data, &out, config.as_deref(), seed, preset.into(), max_len),
        Command::Eval {
            data,
            ckpt,
            predictions,
            max_len,
            out,
        } => {
            let records = load_dataset(&data)?;
            let report = match (ckpt, predictions) {
                (Some(ckpt), _) => {
                    let (model, vocab) = load_model(&ckpt)?;
                    evaluate(&model, &vocab, &records, max_len)?.0
                }
                (None, Some(preds)) => {
                    let preds: Vec<Prediction> = read_jsonl(&preds)?;
                    score_predictions(&records, &preds, max_len)?
                }
                (None, None) => unreachable!("clap requires one of --ckpt/--predictions"),
            };
            emit_json(out.as_deref(), &report)
        }
        Command::Predict {
            data,
            ckpt,
            max_len,
            out,
        } => {
            let records = load_dataset(&data)?;
            let (model, vocab) = load_model(&ckpt)?;
            let preds = predict_records(&model, &vocab, &records, max_len)?;
            match out {
                Some(path) => {
                    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
                    crate::data::write_jsonl(&mut w, &preds)?;
                    Ok(w.flush()?)
                }
                None => {
                    let mut stdout = std::io::stdout().lock();
                    crate::data::write_jsonl(&mut stdout, &preds)?;
                    Ok(stdout.flush()?)
                }
            }
        }
        Command::CountParams { preset, mode, ckpt, out } => {
            let config = match ckpt {
                Some(path) => crate::checkpoint::Checkpoint::load(&path)?.config,
                None => ModelConfig::preset(preset.into(), TOY_VOCAB_SIZE),
            };
            emit_json(out.as_deref(), &count_params_for(&config, mode.into())?)
        }
        Command::GradCheck(args) => grad_check(args),
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    preset: Preset,
    max_len: Option<usize>,
) -> Result<()> {
    let mut cfg = match (config, preset) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Preset::Toy) => TrainConfig::toy(),
        (None, Preset::PaperScale) => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(max_len) = max_len {
        cfg.max_len = max_len;
    }
    cfg.validate()?;
    let records = load_dataset(data)?;
    if records.is_empty() {
        return Err(Error::EmptyDataset("training data file"));
    }
    let (train_set, val_set) = split(&records, cfg.train_fraction, cfg.seed);
    let vocab = Vocab::build(&corpus(&train_set), 1)?;
    let mut model = QaModel::new(ModelConfig::preset(preset, vocab.len()), cfg.seed)?;

    std::fs::create_dir_all(out)?;
    vocab.save(&out.join("vocab.json"))?;
    let report = fit(&mut model, &vocab, &train_set, &val_set, &cfg, Some(out))?;
    save_model(&out.join("model.dqaw"), &model, &vocab, CheckpointKind::Full)?;
    save_model(&out.join("adapters.dqaw"), &model, &vocab, CheckpointKind::Adapters)?;
    emit_json(Some(&out.join("training_report.json")), &report)?;
    emit_json(Some(&out.join("metrics.json")), &report.best_validation)?;
    emit_json(Some(&out.join("train_config.json")), &cfg)?;
    println!("{}", serde_json::to_string_pretty(&report.best_validation)?);
    Ok(())
}

fn corpus(records: &[QaRecord]) -> Vec<&str> {
    records
        .iter()
        .flat_map(|r| [r.question.as_str(), r.context.as_str()])
        .collect()
}

/// Metrics for a predictions file. Token positions of a character
/// tokenizer do not depend on the vocabulary, so gold spans are aligned
/// with one built from the dataset itself.
pub fn score_predictions(
    records: &[QaRecord],
    preds: &[Prediction],
    max_len: usize,
) -> Result<crate::metrics::MetricsReport> {
    let vocab = Vocab::build(&corpus(records), 1)?;
    let (examples, _) = encode_examples(records, &vocab, max_len)?;
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut pred_spans = Vec::new();
    let mut gold_spans = Vec::new();
    let mut pred_text = Vec::new();
    let mut gold_text = Vec::new();
    for e in &examples {
        let p = by_id.get(e.id.as_str()).ok_or_else(|| Error::Validation {
            id: e.id.clone(),
            reason: "no prediction for this record".into(),
        })?;
        pred_spans.push(Span::new(p.start, p.end));
        gold_spans.push(Span::new(e.span.0, e.span.1));
        pred_text.push(p.text.chars().collect::<Vec<_>>());
        gold_text.push(e.answer_text.chars().collect::<Vec<_>>());
    }
    evaluate_spans(&pred_spans, &gold_spans, &pred_text, &gold_text)
}

fn grad_check(args: GradCheckArgs) -> Result<()> {
    let records = generate_synthetic(1, args.seed, &TemplateSet::disaster_bulletins())?;
    let r = &records[0];
    let vocab = Vocab::build(&corpus(&records), 1)?;
    let mut config = ModelConfig::preset(args.preset.into(), vocab.len());
    config.mode = args.mode.into();
    let mut model = QaModel::new(config, args.seed)?;
    // B starts at zero, which would leave A's gradient identically zero.
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0xB);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    for (_, p) in model.store.iter_mut() {
        if p.group == ParamGroup::Adapter && p.name.ends_with(".B") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    let max_len = model.config.encoder.max_position.min(DEFAULT_MAX_LEN);
    let packed = encode_pair(&r.question, &r.context, &vocab, max_len)?;
    let span = crate::tokenizer::align_span(&r.context, r.answer_start_char, r.answer_char_end(), &packed)?;
    let opts = GradCheckOptions {
        eps: args.eps,
        max_entries_per_param: (args.entries > 0).then_some(args.entries),
        seed: args.seed,
    };
    let report = model.check_gradients(&packed, span, &opts)?;
    emit_json(args.out.as_deref(), &report)?;
    if report.passes(args.tol) {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "max relative error {:.3e} at `{}`, frozen max |grad| {:.3e}",
            report.max_rel_error, report.worst_param, report.frozen_max_abs_grad
        )))
    }
}
