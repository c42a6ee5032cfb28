//! Fit the toy model to a handful of bulletins and extract answers.
//!
//!     cargo run --example quickstart

use disaqa::data::{generate_synthetic, make_batches, TemplateSet};
use disaqa::inference::predict_records;
use disaqa::tokenizer::Vocab;
use disaqa::training::{TrainConfig, Trainer};
use disaqa::{ModelConfig, QaModel};

fn main() -> disaqa::Result<()> {
    let records = generate_synthetic(8, 1, &TemplateSet::disaster_bulletins())?;
    let texts: Vec<&str> = records.iter().flat_map(|r| [r.question.as_str(), r.context.as_str()]).collect();
    let vocab = Vocab::build(&texts, 1)?;
    let mut model = QaModel::new(ModelConfig::toy(vocab.len()), 1)?;

    let cfg = TrainConfig {
        micro_batch: 8,
        accumulation_steps: 1,
        ..TrainConfig::toy()
    };
    let batches = make_batches(&records, &vocab, cfg.max_len, cfg.micro_batch, 0)?.batches;
    let mut trainer = Trainer::new(&mut model, cfg)?;
    trainer.dropout = false;
    for step in 1..=200 {
        let loss = trainer.train_epoch(&batches, step)?;
        if step % 25 == 0 {
            println!("step {step:>3}  loss {loss:.4}");
        }
    }

    for (r, p) in records.iter().zip(predict_records(&model, &vocab, &records, 384)?) {
        println!("Q: {}\n   predicted {:?}, gold {:?}", r.question, p.text, r.answer_text);
    }
    Ok(())
}
