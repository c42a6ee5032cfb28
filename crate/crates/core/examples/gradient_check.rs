//! Finite-difference check of the full model's loss gradient: encoder,
//! LoRA, Bi-LSTM, position heads and the weighted start/end loss.
//!
//!     cargo run --example gradient_check

use disaqa::data::{generate_synthetic, TemplateSet};
use disaqa::encoder::EncoderConfig;
use disaqa::gradcheck::GradCheckOptions;
use disaqa::nn::TrainMode;
use disaqa::params::ParamGroup;
use disaqa::tokenizer::{align_span, encode_pair, Vocab};
use disaqa::{ModelConfig, QaModel};

fn main() -> disaqa::Result<()> {
    let records = generate_synthetic(1, 3, &TemplateSet::disaster_bulletins())?;
    let r = &records[0];
    let vocab = Vocab::build(&[r.question.as_str(), r.context.as_str()], 1)?;

    let mut enc = EncoderConfig::toy(vocab.len());
    enc.d_model = 8;
    enc.n_heads = 2;
    enc.d_ffn = 16;
    enc.n_layers = 2;
    enc.max_position = 128;
    for mode in [TrainMode::Lora, TrainMode::Full] {
        let mut config = ModelConfig::with_encoder(enc.clone());
        config.mode = mode;
        let mut model = QaModel::new(config, 11)?;
        for (_, p) in model.store.iter_mut() {
            if p.group == ParamGroup::Adapter && p.name.ends_with(".B") {
                for (j, v) in p.tensor.data_mut().iter_mut().enumerate() {
                    *v = 0.1 * ((j as f64) * 0.7).cos();
                }
            }
        }
        let packed = encode_pair(&r.question, &r.context, &vocab, 128)?;
        let span = align_span(&r.context, r.answer_start_char, r.answer_char_end(), &packed)?;
        let opts = GradCheckOptions {
            max_entries_per_param: Some(6),
            ..GradCheckOptions::default()
        };
        let report = model.check_gradients(&packed, span, &opts)?;
        println!(
            "{mode:?}: {} entries, max relative error {:.2e} at `{}`, frozen max |grad| {}",
            report.entries_checked, report.max_rel_error, report.worst_param, report.frozen_max_abs_grad
        );
        assert!(report.passes(1e-4));
    }
    Ok(())
}
