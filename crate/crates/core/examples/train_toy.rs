//! Train the toy preset on 1000 synthetic bulletins and report validation
//! metrics per epoch.
//!
//!     cargo run --release --example train_toy -- [n_records] [seed]

use disaqa::data::{generate_synthetic, split, TemplateSet};
use disaqa::tokenizer::Vocab;
use disaqa::training::{fit, TrainConfig};
use disaqa::{ModelConfig, QaModel};

fn main() -> disaqa::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(1000, |a| a.parse().expect("n_records"));
    let seed: u64 = args.next().map_or(42, |a| a.parse().expect("seed"));

    let records = generate_synthetic(n, seed, &TemplateSet::disaster_bulletins())?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::toy()
    };
    let (train, val) = split(&records, cfg.train_fraction, seed);
    let texts: Vec<&str> = train
        .iter()
        .flat_map(|r| [r.question.as_str(), r.context.as_str()])
        .collect();
    let vocab = Vocab::build(&texts, 1)?;
    let mut model = QaModel::new(ModelConfig::toy(vocab.len()), seed)?;

    let report = fit(&mut model, &vocab, &train, &val, &cfg, None)?;
    for e in &report.epochs {
        println!(
            "epoch {:>2}  loss {:>8.4}  start {:.3}  end {:.3}  f1 {:.3}  em {:.3}{}",
            e.epoch,
            e.train_loss,
            e.validation.start_accuracy,
            e.validation.end_accuracy,
            e.validation.span_f1,
            e.validation.exact_match,
            if e.improved { "  *" } else { "" }
        );
    }
    println!(
        "best epoch {} ({} steps, {:.1}s)",
        report.best_epoch, report.optimizer_steps, report.wall_time_secs
    );
    Ok(())
}
