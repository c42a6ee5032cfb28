//! Generate synthetic disaster bulletins, write them as JSONL, reload with
//! span validation and split 90/10.
//!
//!     cargo run --example synthetic_dataset -- [n] [seed]

use disaqa::data::{generate_synthetic, load_dataset, save_dataset, split, TemplateSet};

fn main() -> disaqa::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(20, |a| a.parse().expect("n"));
    let seed: u64 = args.next().map_or(42, |a| a.parse().expect("seed"));

    let records = generate_synthetic(n, seed, &TemplateSet::disaster_bulletins())?;
    for r in records.iter().take(5) {
        println!("[{}] Q: {}", r.id, r.question);
        println!("      C: {}", r.context);
        println!("      A: {} (char {})", r.answer_text, r.answer_start_char);
    }

    let path = std::env::temp_dir().join(format!("disaqa-synthetic-{seed}.jsonl"));
    save_dataset(&path, &records)?;
    let reloaded = load_dataset(&path)?;
    assert_eq!(reloaded, records);

    let (train, val) = split(&reloaded, 0.9, seed);
    println!("wrote {} records to {}", reloaded.len(), path.display());
    println!("split: {} train / {} validation", train.len(), val.len());
    Ok(())
}
