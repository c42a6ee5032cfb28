//! Parameter accounting for both presets without allocating the weights.
//!
//!     cargo run --example parameter_budget

use disaqa::model::count_params_for;
use disaqa::nn::TrainMode;
use disaqa::ModelConfig;

fn main() -> disaqa::Result<()> {
    for (name, config) in [("toy", ModelConfig::toy(512)), ("paper-scale", ModelConfig::paper_scale())] {
        for mode in [TrainMode::Lora, TrainMode::Full] {
            let b = count_params_for(&config, mode)?;
            println!(
                "{name:<12} {mode:<5?} total {:>11}  trainable {:>10}  ({:.2}%)",
                b.total,
                b.trainable,
                100.0 * b.fraction
            );
            if mode == TrainMode::Lora {
                for (component, n) in &b.breakdown {
                    let t = b.trainable_breakdown.get(component).copied().unwrap_or(0);
                    println!("    {component:<11} {n:>11}  trainable {t:>10}");
                }
            }
        }
    }
    Ok(())
}
