//! LoRA adapters: zero-initialised B leaves the base model untouched, and
//! folding the adapters into the base weights gives the same predictions.
//!
//!     cargo run --example lora_merge

use disaqa::data::{generate_synthetic, TemplateSet};
use disaqa::params::ParamGroup;
use disaqa::tokenizer::{encode_pair, Vocab};
use disaqa::{ModelConfig, QaModel};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> disaqa::Result<()> {
    let records = generate_synthetic(3, 7, &TemplateSet::disaster_bulletins())?;
    let texts: Vec<&str> = records.iter().flat_map(|r| [r.question.as_str(), r.context.as_str()]).collect();
    let vocab = Vocab::build(&texts, 1)?;
    let config = ModelConfig::toy(vocab.len());

    let adapted = QaModel::new(config.clone(), 1)?;
    let mut base_config = config.clone();
    base_config.lora = None;
    let mut base = QaModel::new(base_config, 0)?;
    for (_, p) in base.store.iter_mut() {
        let src = adapted.store.by_name(&p.name)?;
        p.tensor.data_mut().copy_from_slice(src.tensor.data());
    }

    let packed = encode_pair(&records[0].question, &records[0].context, &vocab, 384)?;
    let (s_lora, _) = adapted.logits(&packed)?;
    let (s_base, _) = base.logits(&packed)?;
    println!("B = 0:    max |lora - base| = {:.2e}", max_diff(&s_lora, &s_base));

    // Give the adapters a non-trivial update, then fold them in.
    let mut trained = adapted.clone();
    for (i, (_, p)) in trained.store.iter_mut().enumerate() {
        if p.group == ParamGroup::Adapter {
            for (j, v) in p.tensor.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((i * 31 + j) as f64).sin();
            }
        }
    }
    let merged = trained.merged()?;
    for r in &records {
        let packed = encode_pair(&r.question, &r.context, &vocab, 384)?;
        let (a, b) = (trained.logits(&packed)?, merged.logits(&packed)?);
        println!(
            "{}: max |unmerged - merged| = {:.2e}",
            r.id,
            max_diff(&a.0, &b.0).max(max_diff(&a.1, &b.1))
        );
    }
    println!(
        "parameters: {} with adapters, {} merged",
        trained.store.total_count(),
        merged.store.total_count()
    );
    Ok(())
}
