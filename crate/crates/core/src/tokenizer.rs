//! Character-level tokenizer and `[CLS] q [SEP] c [SEP]` packing.
//!
//! One token per Unicode scalar value, so character offsets in the context
//! map onto token positions by a constant shift.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const DEFAULT_MAX_LEN: usize = 384;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<char, u32>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    min_freq: usize,
}

impl Vocab {
    /// Specials first, then characters by descending frequency, ties broken
    /// by codepoint. Characters seen fewer than `min_freq` times are left
    /// out and encode to `[UNK]`.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be >= 1".into()));
        }
        let mut counts: HashMap<char, usize> = HashMap::new();
        for text in corpus {
            for ch in text.as_ref().chars() {
                *counts.entry(ch).or_default() += 1;
            }
        }
        let mut chars: Vec<(char, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_freq).collect();
        chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(chars.into_iter().map(|(c, _)| c.to_string()))
            .collect();
        Self::from_tokens(tokens, min_freq)
    }

    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Config("vocab must start with [PAD] [UNK] [CLS] [SEP]".into()));
        }
        let mut token_to_id = HashMap::new();
        for (i, tok) in tokens.iter().enumerate().skip(SPECIALS.len()) {
            let mut it = tok.chars();
            let (Some(ch), None) = (it.next(), it.next()) else {
                return Err(Error::Config(format!("vocab token `{tok}` is not a single character")));
            };
            if token_to_id.insert(ch, i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocab token `{tok}`")));
            }
        }
        Ok(Self {
            id_to_token: tokens,
            token_to_id,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id(&self, ch: char) -> u32 {
        self.token_to_id.get(&ch).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Concatenates token strings, skipping `[PAD]`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK as usize]))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VocabFile {
            tokens: self.id_to_token.clone(),
            min_freq: self.min_freq,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        Self::from_tokens(f.tokens, f.min_freq)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PackedInput {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// Half-open token range of the (possibly truncated) context.
    pub context_token_range: Range<usize>,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-padding tokens.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Pads with `[PAD]` (mask 0) or drops trailing padding to reach `len`.
    /// Never removes real tokens.
    pub fn with_len(&self, len: usize) -> Result<Self> {
        let real = self.real_len();
        if len < real {
            return Err(Error::Capacity {
                needed: real,
                max_len: len,
            });
        }
        let mut out = self.clone();
        out.token_ids.resize(len, PAD);
        out.segment_ids.resize(len, 0);
        out.attention_mask.resize(len, 0);
        Ok(out)
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|&m| m == 1).collect()
    }
}

/// Packs `[CLS] q [SEP] c [SEP]` and pads to `max_len`. Over-long contexts
/// are cut from the right; the question is always kept whole.
pub fn encode_pair(question: &str, context: &str, vocab: &Vocab, max_len: usize) -> Result<PackedInput> {
    let q = vocab.encode(question);
    let c = vocab.encode(context);
    let needed = q.len() + 4;
    if needed > max_len {
        return Err(Error::Capacity { needed, max_len });
    }
    let kept = c.len().min(max_len - q.len() - 3);
    let real = q.len() + kept + 3;

    let mut token_ids = Vec::with_capacity(max_len);
    token_ids.push(CLS);
    token_ids.extend_from_slice(&q);
    token_ids.push(SEP);
    let ctx_start = token_ids.len();
    token_ids.extend_from_slice(&c[..kept]);
    let ctx_end = token_ids.len();
    token_ids.push(SEP);
    token_ids.resize(max_len, PAD);

    let mut segment_ids = vec![0u8; max_len];
    segment_ids[ctx_start..real].iter_mut().for_each(|s| *s = 1);
    let mut attention_mask = vec![0u8; max_len];
    attention_mask[..real].iter_mut().for_each(|m| *m = 1);

    Ok(PackedInput {
        token_ids,
        segment_ids,
        attention_mask,
        context_token_range: ctx_start..ctx_end,
    })
}

/// Maps a character span `[char_start, char_end)` of the context onto an
/// inclusive token span of the packed sequence.
pub fn align_span(context: &str, char_start: usize, char_end: usize, packed: &PackedInput) -> Result<(usize, usize)> {
    let n_chars = context.chars().count();
    if char_start >= char_end || char_end > n_chars {
        return Err(Error::Index {
            what: "align_span char_end",
            index: char_end,
            len: n_chars,
        });
    }
    let range = &packed.context_token_range;
    let kept = range.len();
    if char_end > kept {
        return Err(Error::UnrepresentableSpan {
            char_start,
            char_end,
            kept,
        });
    }
    Ok((range.start + char_start, range.start + char_end - 1))
}
