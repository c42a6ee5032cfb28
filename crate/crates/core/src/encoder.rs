//! BERT-style post-norm transformer encoder.
//!
//! Embeddings (token + learned position + segment) go through a layer norm,
//! then each layer applies `LN(x + Attn(x))` followed by
//! `LN(x + FFN(x))` with a GELU feed-forward block. Attention costs
//! O(L²·d) per layer, the feed-forward O(L·d·d_ffn).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::nn::{Declarer, LayerNormParams, Linear, INIT_STD};
use crate::params::{Init, ParamGroup, ParamId, ParamSink, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::PackedInput;

const SEGMENTS: usize = 2;

fn default_ln_eps() -> f64 {
    1e-12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_position: usize,
    pub dropout_rate: f64,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// 2 layers, d=64, 4 heads, no dropout.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            max_position: 512,
            dropout_rate: 0.0,
            layer_norm_eps: default_ln_eps(),
        }
    }

    /// BERT-base dimensions with a 32768-entry vocabulary.
    pub fn paper_scale() -> Self {
        Self {
            vocab_size: 32768,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ffn: 3072,
            max_position: 512,
            dropout_rate: 0.1,
            layer_norm_eps: default_ln_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_position", self.max_position),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("bad dropout_rate or layer_norm_eps".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_ln: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_ln: LayerNormParams,
    pub query_adapter: Option<LoraAdapter>,
    pub value_adapter: Option<LoraAdapter>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub segment_embedding: ParamId,
    pub embedding_ln: LayerNormParams,
    pub layers: Vec<LayerWeights>,
}

impl EncoderWeights {
    /// Declares every encoder tensor; with `lora` set, also attaches
    /// adapters to the query and value projections of every layer.
    pub(crate) fn declare<S: ParamSink + ?Sized>(
        decl: &mut Declarer<'_, S>,
        cfg: &EncoderConfig,
        lora: Option<&LoraConfig>,
    ) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Encoder;
        let d = cfg.d_model;
        let normal = Init::Normal(INIT_STD);
        let token_embedding = decl.param("encoder.embeddings.token".into(), &[cfg.vocab_size, d], normal, g, true)?;
        let position_embedding =
            decl.param("encoder.embeddings.position".into(), &[cfg.max_position, d], normal, g, true)?;
        let segment_embedding = decl.param("encoder.embeddings.segment".into(), &[SEGMENTS, d], normal, g, true)?;
        let embedding_ln = decl.layer_norm("encoder.embeddings.ln", d, g)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("encoder.layer.{l}");
            let query = decl.linear(&format!("{p}.attn.query"), d, d, normal, g)?;
            let key = decl.linear(&format!("{p}.attn.key"), d, d, normal, g)?;
            let value = decl.linear(&format!("{p}.attn.value"), d, d, normal, g)?;
            let output = decl.linear(&format!("{p}.attn.output"), d, d, normal, g)?;
            let attn_ln = decl.layer_norm(&format!("{p}.attn_ln"), d, g)?;
            let ffn_in = decl.linear(&format!("{p}.ffn.in"), cfg.d_ffn, d, normal, g)?;
            let ffn_out = decl.linear(&format!("{p}.ffn.out"), d, cfg.d_ffn, normal, g)?;
            let ffn_ln = decl.layer_norm(&format!("{p}.ffn_ln"), d, g)?;
            let (query_adapter, value_adapter) = match lora {
                Some(lc) => (
                    Some(LoraAdapter::declare(
                        decl,
                        &format!("lora.{l}.q"),
                        &format!("{p}.attn.query.weight"),
                        d,
                        d,
                        lc,
                    )?),
                    Some(LoraAdapter::declare(
                        decl,
                        &format!("lora.{l}.v"),
                        &format!("{p}.attn.value.weight"),
                        d,
                        d,
                        lc,
                    )?),
                ),
                None => (None, None),
            };
            layers.push(LayerWeights {
                query,
                key,
                value,
                output,
                attn_ln,
                ffn_in,
                ffn_out,
                ffn_ln,
                query_adapter,
                value_adapter,
            });
        }
        Ok(Self {
            token_embedding,
            position_embedding,
            segment_embedding,
            embedding_ln,
            layers,
        })
    }
}

fn project<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    x: Var,
    lin: &Linear,
    adapter: Option<&LoraAdapter>,
) -> Result<Var> {
    match adapter {
        None => lin.forward(tape, store, x),
        Some(ad) => {
            let w = store.bind(tape, lin.weight);
            let b = store.bind(tape, lin.bias);
            let y = ad.forward(tape, store, x, w)?;
            tape.add_row(y, b)
        }
    }
}

/// Scaled dot-product attention over `n_heads` heads, concatenated and
/// projected by `W_o`. Keys with `key_mask[j] == false` get zero weight.
pub fn multi_head_attention<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    layer: &LayerWeights,
    cfg: &EncoderConfig,
    h: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let (l, d) = tape.value(h).dims2();
    if let Some(m) = key_mask {
        if m.len() != l {
            return Err(Error::Shape {
                op: "multi_head_attention mask",
                lhs: vec![l, d],
                rhs: vec![m.len()],
            });
        }
    }
    let q = project(tape, store, h, &layer.query, layer.query_adapter.as_ref())?;
    let k = project(tape, store, h, &layer.key, None)?;
    let v = project(tape, store, h, &layer.value, layer.value_adapter.as_ref())?;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for i in 0..cfg.n_heads {
        let (s, e) = (i * hd, (i + 1) * hd);
        let qh = tape.slice_cols(q, s, e)?;
        let kh = tape.slice_cols(k, s, e)?;
        let vh = tape.slice_cols(v, s, e)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores, key_mask)?;
        let probs = tape.dropout(probs, cfg.dropout_rate)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    layer.output.forward(tape, store, ctx)
}

/// Embeds a packed input and runs every layer. Returns `[L, d_model]`.
pub fn encode_on_tape<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    weights: &EncoderWeights,
    cfg: &EncoderConfig,
    packed: &PackedInput,
) -> Result<Var> {
    let l = packed.len();
    if l == 0 {
        return Err(Error::EmptyAxis("encode"));
    }
    if l > cfg.max_position {
        return Err(Error::Index {
            what: "position",
            index: l - 1,
            len: cfg.max_position,
        });
    }
    let ids: Vec<usize> = packed.token_ids.iter().map(|&t| t as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Index {
            what: "token id",
            index: bad,
            len: cfg.vocab_size,
        });
    }
    let segs: Vec<usize> = packed.segment_ids.iter().map(|&s| s as usize).collect();
    if let Some(&bad) = segs.iter().find(|&&s| s >= SEGMENTS) {
        return Err(Error::Index {
            what: "segment id",
            index: bad,
            len: SEGMENTS,
        });
    }
    let positions: Vec<usize> = (0..l).collect();
    let key_mask = packed.key_mask();
    let mask = if key_mask.iter().all(|&m| m) {
        None
    } else {
        Some(key_mask.as_slice())
    };

    let tok_table = store.bind(tape, weights.token_embedding);
    let pos_table = store.bind(tape, weights.position_embedding);
    let seg_table = store.bind(tape, weights.segment_embedding);
    let tok = tape.embedding(tok_table, &ids)?;
    let pos = tape.embedding(pos_table, &positions)?;
    let seg = tape.embedding(seg_table, &segs)?;
    let x = tape.add(tok, pos)?;
    let x = tape.add(x, seg)?;
    let x = weights.embedding_ln.forward(tape, store, x, cfg.layer_norm_eps)?;
    let mut h = tape.dropout(x, cfg.dropout_rate)?;

    for layer in &weights.layers {
        let attn = multi_head_attention(tape, store, layer, cfg, h, mask)?;
        let attn = tape.dropout(attn, cfg.dropout_rate)?;
        let res = tape.add(h, attn)?;
        let h1 = layer.attn_ln.forward(tape, store, res, cfg.layer_norm_eps)?;
        let ff = layer.ffn_in.forward(tape, store, h1)?;
        let ff = tape.gelu(ff);
        let ff = layer.ffn_out.forward(tape, store, ff)?;
        let ff = tape.dropout(ff, cfg.dropout_rate)?;
        let res = tape.add(h1, ff)?;
        h = layer.ffn_ln.forward(tape, store, res, cfg.layer_norm_eps)?;
    }
    Ok(h)
}

/// Inference-mode encoding.
pub fn encode(store: &ParamStore, weights: &EncoderWeights, cfg: &EncoderConfig, packed: &PackedInput) -> Result<Tensor> {
    let mut tape = Tape::eval();
    let h = encode_on_tape(&mut tape, store, weights, cfg, packed)?;
    Ok(tape.value(h).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TrainMode;
    use crate::params::Initializer;
    use crate::tensor;
    use crate::tokenizer::{encode_pair, Vocab};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 16,
            max_position: 32,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore, EncoderWeights) {
        let mut store = ParamStore::new();
        let mut init = Initializer {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut decl = Declarer {
            sink: &mut init,
            mode: TrainMode::Full,
        };
        let w = EncoderWeights::declare(&mut decl, cfg, None).unwrap();
        (store, w)
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in store.iter_mut() {
            let t = Tensor::randn(p.tensor.shape(), 0.5, &mut rng);
            p.tensor.data_mut().copy_from_slice(t.data());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(10);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 0;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::paper_scale().validate().is_ok());
    }

    #[test]
    fn single_position_closed_form() {
        let cfg = tiny(10);
        let (mut store, w) = build(&cfg, 1);
        randomize(&mut store, 2);
        let layer = &w.layers[0];
        let h0 = Tensor::from_rows(&[vec![0.3, -0.1, 0.7, 0.2, -0.5, 0.9, 0.0, 0.4]]).unwrap();
        let mut tape = Tape::eval();
        let hv = tape.constant(h0.clone());
        let out = multi_head_attention(&mut tape, &store, layer, &cfg, hv, None).unwrap();
        let got = tape.value(out).clone();

        let lin = |x: &Tensor, l: &Linear| {
            let y = tensor::matmul_nt(x, store.tensor(l.weight)).unwrap();
            y.add(&store.tensor(l.bias).clone().reshape(vec![1, 8]).unwrap()).unwrap()
        };
        let expected = lin(&lin(&h0, &layer.value), &layer.output);
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn diagonal_attention_and_row_sums() {
        // With a single unmasked key, every query row must put all weight
        // there; rows always sum to one over unmasked keys.
        let scores = Tensor::from_rows(&[vec![0.4, 2.0, -1.0], vec![3.0, 0.1, 0.2]]).unwrap();
        let p = tensor::softmax_rows(&scores, Some(&[false, true, false])).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let p = tensor::softmax_rows(&scores, Some(&[true, true, false])).unwrap();
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let cfg = tiny(10);
        let (mut store, w) = build(&cfg, 3);
        randomize(&mut store, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mask = [true, true, false, true];
        let perm = [2usize, 0, 3, 1];
        let run = |x: &Tensor, m: &[bool]| {
            let mut tape = Tape::eval();
            let v = tape.constant(x.clone());
            let o = multi_head_attention(&mut tape, &store, &w.layers[0], &cfg, v, Some(m)).unwrap();
            tape.value(o).clone()
        };
        let base = run(&h, &mask);
        let ph = Tensor::from_rows(&perm.iter().map(|&i| h.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let pm: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let out = run(&ph, &pm);
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((out.get(r, c) - base.get(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_does_not_leak() {
        let vocab = Vocab::build(&["地震が発生しました。どこで？"], 1).unwrap();
        let cfg = tiny(vocab.len());
        let (mut store, w) = build(&cfg, 6);
        randomize(&mut store, 7);
        let p = encode_pair("どこで？", "地震が発生しました。", &vocab, 32).unwrap();
        let real = p.real_len();
        let trimmed = p.with_len(real).unwrap();
        let a = encode(&store, &w, &cfg, &p).unwrap();
        let b = encode(&store, &w, &cfg, &trimmed).unwrap();
        assert_eq!(a.shape(), &[32, 8]);
        for r in 0..real {
            for c in 0..8 {
                assert!((a.get(r, c) - b.get(r, c)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn toy_run_is_finite_and_normalized() {
        let vocab = Vocab::build(&["abcdefg"], 1).unwrap();
        let cfg = tiny(vocab.len());
        let (store, w) = build(&cfg, 8);
        let p = encode_pair("ab", "cdefg", &vocab, 16).unwrap();
        let h = encode(&store, &w, &cfg, &p).unwrap();
        assert!(h.is_finite());
        for r in 0..h.rows() {
            let mean = h.row(r).iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-7);
        }
    }

    #[test]
    fn overflow_errors() {
        let vocab = Vocab::build(&["abc"], 1).unwrap();
        let mut cfg = tiny(vocab.len());
        let (store, w) = build(&cfg, 9);
        let mut p = encode_pair("a", "bc", &vocab, 8).unwrap();
        p.token_ids[1] = 99;
        assert!(matches!(encode(&store, &w, &cfg, &p), Err(Error::Index { .. })));
        cfg.max_position = 4;
        let p = encode_pair("a", "bc", &vocab, 8).unwrap();
        assert!(encode(&store, &w, &cfg, &p).is_err());
    }
}
