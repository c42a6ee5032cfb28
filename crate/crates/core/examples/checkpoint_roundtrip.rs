//! Save a model as a full checkpoint and as adapters only, reload both and
//! confirm identical predictions.
//!
//!     cargo run --example checkpoint_roundtrip

use disaqa::checkpoint::{load_model, save_model, Checkpoint, CheckpointKind};
use disaqa::data::{generate_synthetic, TemplateSet};
use disaqa::tokenizer::{encode_pair, Vocab};
use disaqa::{ModelConfig, QaModel};

fn main() -> disaqa::Result<()> {
    let records = generate_synthetic(4, 9, &TemplateSet::disaster_bulletins())?;
    let texts: Vec<&str> = records.iter().flat_map(|r| [r.question.as_str(), r.context.as_str()]).collect();
    let vocab = Vocab::build(&texts, 1)?;
    let model = QaModel::new(ModelConfig::toy(vocab.len()), 5)?;

    let dir = std::env::temp_dir().join("disaqa-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let full = dir.join("model.dqaw");
    let adapters = dir.join("adapters.dqaw");
    save_model(&full, &model, &vocab, CheckpointKind::Full)?;
    save_model(&adapters, &model, &vocab, CheckpointKind::Adapters)?;
    println!(
        "full: {} bytes, adapters: {} bytes",
        std::fs::metadata(&full)?.len(),
        std::fs::metadata(&adapters)?.len()
    );

    let (restored, restored_vocab) = load_model(&full)?;
    assert_eq!(restored_vocab, vocab);
    let mut rebased = QaModel::new(model.config.clone(), 5)?;
    Checkpoint::load(&adapters)?.apply(&mut rebased, true)?;

    for r in &records {
        let packed = encode_pair(&r.question, &r.context, &vocab, 384)?;
        let (a, b, c) = (model.predict(&packed)?, restored.predict(&packed)?, rebased.predict(&packed)?);
        assert_eq!(a, b);
        assert_eq!(a, c);
        println!("{}: span {}..={} score {:.4}", r.id, a.start, a.end, a.score);
    }
    Ok(())
}
