//! QA records, JSONL I/O with span validation, the synthetic disaster-QA
//! generator and seeded batching.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{align_span, encode_pair, PackedInput, Vocab};

/// One extractive QA example. `answer_start_char` counts Unicode scalar
/// values, not bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answer_text: String,
    pub answer_start_char: usize,
}

impl QaRecord {
    pub fn answer_char_end(&self) -> usize {
        self.answer_start_char + self.answer_text.chars().count()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Validation {
                id: self.id.clone(),
                reason,
            })
        };
        if self.answer_text.is_empty() {
            return fail("empty answer_text".into());
        }
        let slice: String = self
            .context
            .chars()
            .skip(self.answer_start_char)
            .take(self.answer_text.chars().count())
            .collect();
        if slice != self.answer_text {
            return fail(format!(
                "context[{}..{}] is {:?}, expected {:?}",
                self.answer_start_char,
                self.answer_char_end(),
                slice,
                self.answer_text
            ));
        }
        Ok(())
    }
}

pub fn save_dataset(path: &Path, records: &[QaRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<W: Write, T: Serialize>(w: &mut W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses one JSON object per non-blank line. Errors carry the 1-based
/// line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Loads and validates a dataset. An empty file is an empty dataset.
pub fn load_dataset(path: &Path) -> Result<Vec<QaRecord>> {
    let records: Vec<QaRecord> = read_jsonl(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// Seeded disjoint split; the first part gets `round(len * train_fraction)`
/// records.
pub fn split(records: &[QaRecord], train_fraction: f64, seed: u64) -> (Vec<QaRecord>, Vec<QaRecord>) {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((records.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.min(records.len());
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect();
    (pick(&idx[..n_train]), pick(&idx[n_train..]))
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Disaster,
    Location,
    Level,
    Instruction,
    Time,
}

impl Slot {
    pub const ALL: [Slot; 5] = [Slot::Disaster, Slot::Location, Slot::Level, Slot::Instruction, Slot::Time];

    fn placeholder(self) -> &'static str {
        match self {
            Slot::Disaster => "{dis}",
            Slot::Location => "{loc}",
            Slot::Level => "{lvl}",
            Slot::Instruction => "{ins}",
            Slot::Time => "{time}",
        }
    }
}

/// A disaster type with the severity phrasings and instructions that fit it.
#[derive(Clone, Debug)]
pub struct DisasterKind {
    pub name: &'static str,
    pub levels: Vec<String>,
    pub instructions: &'static [&'static str],
}

/// Slot values plus context and question templates. Every context template
/// contains each placeholder exactly once; question templates may mention
/// any slot other than the one they ask about.
#[derive(Clone, Debug)]
pub struct TemplateSet {
    pub disasters: Vec<DisasterKind>,
    pub locations: &'static [&'static str],
    pub contexts: &'static [&'static str],
    pub fillers: &'static [&'static str],
    pub questions: Vec<(Slot, &'static [&'static str])>,
}

impl TemplateSet {
    /// Japanese disaster bulletins: earthquakes, tsunami, floods, typhoons,
    /// volcanic eruptions, landslides and heavy rain.
    pub fn disaster_bulletins() -> Self {
        let shindo = ["5弱", "5強", "6弱", "6強", "7"].iter().map(|s| format!("震度{s}")).collect();
        let tsunami = [1, 3, 5, 10].iter().map(|m| format!("高さ{m}メートル")).collect();
        let flood = (3..=5).map(|n| format!("警戒レベル{n}")).collect();
        let typhoon = [935, 945, 955, 965, 975].iter().map(|p| format!("中心気圧{p}ヘクトパスカル")).collect();
        let volcano = (2..=5).map(|n| format!("噴火警戒レベル{n}")).collect();
        let landslide = vec!["土砂災害警戒情報".to_string(), "大雨警報".to_string()];
        let rain = [50, 80, 100, 120].iter().map(|m| format!("1時間に{m}ミリ")).collect();
        Self {
            disasters: vec![
                DisasterKind {
                    name: "地震",
                    levels: shindo,
                    instructions: &["机の下に身を隠す", "火の元を確認する", "倒れやすい家具から離れる"],
                },
                DisasterKind {
                    name: "津波",
                    levels: tsunami,
                    instructions: &["高台へ避難する", "海岸から離れる", "津波避難ビルへ向かう"],
                },
                DisasterKind {
                    name: "洪水",
                    levels: flood,
                    instructions: &["指定避難所へ移動する", "建物の二階以上へ垂直避難する", "川に近づかない"],
                },
                DisasterKind {
                    name: "台風",
                    levels: typhoon,
                    instructions: &["不要な外出を控える", "窓を補強する", "飛ばされやすい物を屋内に入れる"],
                },
                DisasterKind {
                    name: "噴火",
                    levels: volcano,
                    instructions: &["火口周辺に近づかない", "防じんマスクを着用する", "噴石に警戒して屋内に入る"],
                },
                DisasterKind {
                    name: "土砂災害",
                    levels: landslide,
                    instructions: &["崖から離れた建物へ移る", "早めに避難所へ移動する"],
                },
                DisasterKind {
                    name: "大雨",
                    levels: rain,
                    instructions: &["低い土地から離れる", "地下室から退避する", "側溝に近づかない"],
                },
            ],
            locations: &[
                "熊本県阿蘇市",
                "静岡県",
                "宮城県仙台市",
                "北海道札幌市",
                "広島県",
                "長野県",
                "鹿児島県",
                "高知県",
                "新潟県",
                "岩手県釜石市",
                "大分県",
                "福岡県",
                "東京都",
                "沖縄県",
                "石川県輪島市",
                "兵庫県神戸市",
                "和歌山県",
                "福島県",
                "愛知県名古屋市",
                "山形県",
            ],
            contexts: &[
                "{time}ごろ、{loc}で{dis}が発生しました。観測された規模は{lvl}です。住民の皆さんは{ins}ようにしてください。",
                "{loc}では{time}に{dis}が起きました。気象庁によると{lvl}が観測されています。安全のため{ins}ことが求められています。",
                "気象庁は{time}、{loc}に{dis}に関する情報を発表しました。現在の状況は{lvl}です。直ちに{ins}必要があります。",
                "【緊急】{dis}発生。場所は{loc}、時刻は{time}です。{lvl}に達しています。{ins}ことを最優先にしてください。",
                "{dis}の情報です。{time}の時点で{loc}は{lvl}となっています。自治体は{ins}よう呼びかけています。",
            ],
            fillers: &[
                "",
                "今後の情報に注意してください。",
                "詳しくは自治体の発表を確認してください。",
                "一部の地域で停電が発生しています。",
                "交通機関に乱れが出ています。",
            ],
            questions: vec![
                (
                    Slot::Disaster,
                    &[
                        "何が発生しましたか？",
                        "{loc}で発生した災害は何ですか？",
                        "{time}ごろに起きた災害の種類を教えてください。",
                    ],
                ),
                (
                    Slot::Location,
                    &[
                        "{dis}はどこで発生しましたか？",
                        "{dis}の発生場所はどこですか？",
                        "{time}に{dis}が起きたのはどの地域ですか？",
                    ],
                ),
                (
                    Slot::Level,
                    &[
                        "{dis}の規模はどのくらいですか？",
                        "観測された{dis}の強さを教えてください。",
                        "{loc}の{dis}の状況はどうですか？",
                    ],
                ),
                (
                    Slot::Instruction,
                    &[
                        "住民は何をすべきですか？",
                        "{dis}の際にとるべき行動は何ですか？",
                        "{loc}の住民に求められている行動は何ですか？",
                    ],
                ),
                (
                    Slot::Time,
                    &[
                        "{dis}はいつ発生しましたか？",
                        "{loc}で{dis}が起きた時刻は？",
                        "発生時刻を教えてください。",
                    ],
                ),
            ],
        }
    }

    fn questions_for(&self, slot: Slot) -> &[&'static str] {
        self.questions
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, q)| *q)
            .unwrap_or(&[])
    }
}

fn random_time(rng: &mut ChaCha8Rng) -> String {
    let month = rng.random_range(1..=12);
    let day = rng.random_range(1..=28);
    let half = if rng.random_bool(0.5) { "午前" } else { "午後" };
    let hour = rng.random_range(1..=11);
    let minute = rng.random_range(0..60);
    format!("{month}月{day}日{half}{hour}時{minute}分")
}

/// Fills `template`, returning the text and the char offset of `answer`'s
/// placeholder when requested.
fn fill(template: &str, values: &[(Slot, String)], answer: Option<Slot>) -> (String, Option<usize>) {
    let mut out = String::new();
    let mut answer_at = None;
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').expect("balanced template");
        let key = &rest[open..=close];
        let (slot, value) = values
            .iter()
            .find(|(s, _)| s.placeholder() == key)
            .expect("known placeholder");
        if Some(*slot) == answer {
            answer_at = Some(out.chars().count());
        }
        out.push_str(value);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    (out, answer_at)
}

/// `n` records whose answers are slot values. Slots rotate so each is asked
/// equally often; templates, phrasings and values are drawn from a stream
/// seeded by `seed`.
pub fn generate_synthetic(n: usize, seed: u64, templates: &TemplateSet) -> Result<Vec<QaRecord>> {
    if n == 0 {
        return Err(Error::Config("generate_synthetic needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let slot = Slot::ALL[i % Slot::ALL.len()];
        let context_t = templates.contexts[(i / Slot::ALL.len()) % templates.contexts.len()];
        let kind = templates.disasters.choose(&mut rng).expect("disasters");
        let values = vec![
            (Slot::Disaster, kind.name.to_string()),
            (Slot::Location, templates.locations.choose(&mut rng).expect("locations").to_string()),
            (Slot::Level, kind.levels.choose(&mut rng).expect("levels").clone()),
            (Slot::Instruction, kind.instructions.choose(&mut rng).expect("instructions").to_string()),
            (Slot::Time, random_time(&mut rng)),
        ];
        let before = *templates.fillers.choose(&mut rng).expect("fillers");
        let after = *templates.fillers.choose(&mut rng).expect("fillers");
        let question_t = *templates.questions_for(slot).choose(&mut rng).expect("questions");

        let (body, at) = fill(context_t, &values, Some(slot));
        let answer_start_char = before.chars().count() + at.expect("slot in context");
        let context = format!("{before}{body}{after}");
        let (question, _) = fill(question_t, &values, None);
        let answer_text = values.iter().find(|(s, _)| *s == slot).expect("slot").1.clone();
        let rec = QaRecord {
            id: format!("syn-{seed}-{i:05}"),
            question,
            context,
            answer_text,
            answer_start_char,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batching

/// A record packed for the model, with its inclusive gold token span.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub packed: PackedInput,
    pub span: (usize, usize),
    pub answer_text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Padded to the longest real length in the batch.
    pub inputs: Vec<PackedInput>,
    pub spans: Vec<(usize, usize)>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Packs records, dropping those whose answer lies in truncated context.
/// Returns the kept examples and the dropped ids.
pub fn encode_examples(records: &[QaRecord], vocab: &Vocab, max_len: usize) -> Result<(Vec<Example>, Vec<String>)> {
    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = Vec::new();
    for r in records {
        let packed = encode_pair(&r.question, &r.context, vocab, max_len)?;
        match align_span(&r.context, r.answer_start_char, r.answer_char_end(), &packed) {
            Ok(span) => {
                let real = packed.real_len();
                kept.push(Example {
                    id: r.id.clone(),
                    packed: packed.with_len(real)?,
                    span,
                    answer_text: r.answer_text.clone(),
                })
            }
            Err(Error::UnrepresentableSpan { .. }) => dropped.push(r.id.clone()),
            Err(e) => return Err(e),
        }
    }
    if !dropped.is_empty() {
        log::info!("dropped {} record(s) with answers in truncated context", dropped.len());
    }
    Ok((kept, dropped))
}

/// Seeded shuffle into micro-batches of `micro_batch` (last one may be
/// shorter).
pub fn batch_examples(examples: &[Example], micro_batch: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if micro_batch == 0 {
        return Err(Error::Config("micro_batch must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    order
        .chunks(micro_batch)
        .map(|chunk| {
            let width = chunk.iter().map(|&i| examples[i].packed.real_len()).max().unwrap_or(0);
            Ok(Batch {
                inputs: chunk
                    .iter()
                    .map(|&i| examples[i].packed.with_len(width))
                    .collect::<Result<_>>()?,
                spans: chunk.iter().map(|&i| examples[i].span).collect(),
                ids: chunk.iter().map(|&i| examples[i].id.clone()).collect(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batches {
    pub batches: Vec<Batch>,
    pub dropped: usize,
}

pub fn make_batches(
    records: &[QaRecord],
    vocab: &Vocab,
    max_len: usize,
    micro_batch: usize,
    shuffle_seed: u64,
) -> Result<Batches> {
    if micro_batch == 0 {
        return Err(Error::Config("micro_batch must be >= 1".into()));
    }
    let (examples, dropped) = encode_examples(records, vocab, max_len)?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset("every record was dropped"));
    }
    Ok(Batches {
        batches: batch_examples(&examples, micro_batch, shuffle_seed)?,
        dropped: dropped.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn corpus_vocab(records: &[QaRecord]) -> Vocab {
        let texts: Vec<&str> = records
            .iter()
            .flat_map(|r| [r.question.as_str(), r.context.as_str()])
            .collect();
        Vocab::build(&texts, 1).unwrap()
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        let t = TemplateSet::disaster_bulletins();
        let a = generate_synthetic(200, 42, &t).unwrap();
        let b = generate_synthetic(200, 42, &t).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(200, 43, &t).unwrap());
        assert!(a.iter().all(|r| r.validate().is_ok()));
        let full = generate_synthetic(1000, 1, &t).unwrap();
        assert_eq!(full.len(), 1000);
        let ids: HashSet<_> = full.iter().map(|r| &r.id).collect();
        assert_eq!(ids.len(), 1000);
        assert!(generate_synthetic(0, 1, &t).is_err());
    }

    #[test]
    fn generator_balances_slots_and_covers_disasters() {
        let t = TemplateSet::disaster_bulletins();
        let recs = generate_synthetic(500, 7, &t).unwrap();
        for kind in ["地震", "洪水", "台風", "噴火"] {
            assert!(recs.iter().any(|r| r.context.contains(kind)));
        }
        let disaster_answers = recs
            .iter()
            .filter(|r| t.disasters.iter().any(|d| d.name == r.answer_text))
            .count();
        assert_eq!(disaster_answers, 100);
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = generate_synthetic(12, 3, &TemplateSet::disaster_bulletins()).unwrap();
        save_dataset(&path, &recs).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), recs);

        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());

        let mut bad = recs[0].clone();
        bad.id = "broken-7".into();
        bad.answer_text = "違う".into();
        save_dataset(&path, &[recs[1].clone(), bad]).unwrap();
        match load_dataset(&path) {
            Err(Error::Validation { id, .. }) => assert_eq!(id, "broken-7"),
            other => panic!("{other:?}"),
        }

        std::fs::write(&path, format!("{}\n{{not json\n", serde_json::to_string(&recs[0]).unwrap())).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let recs = generate_synthetic(100, 5, &TemplateSet::disaster_bulletins()).unwrap();
        let (tr, va) = split(&recs, 0.9, 11);
        assert_eq!((tr.len(), va.len()), (90, 10));
        let a: HashSet<_> = tr.iter().map(|r| r.id.clone()).collect();
        let b: HashSet<_> = va.iter().map(|r| r.id.clone()).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 100);
        assert_eq!(split(&recs, 0.9, 11), (tr, va));
    }

    #[test]
    fn batch_sizes_and_order() {
        let recs = generate_synthetic(10, 9, &TemplateSet::disaster_bulletins()).unwrap();
        let v = corpus_vocab(&recs);
        let b = make_batches(&recs, &v, 384, 4, 1).unwrap();
        assert_eq!(b.batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b.dropped, 0);
        assert_eq!(b, make_batches(&recs, &v, 384, 4, 1).unwrap());
        for batch in &b.batches {
            let width = batch.inputs.iter().map(PackedInput::real_len).max().unwrap();
            assert!(batch.inputs.iter().all(|p| p.len() == width));
            for (p, span) in batch.inputs.iter().zip(&batch.spans) {
                assert!(p.context_token_range.contains(&span.0));
                assert!(p.context_token_range.contains(&span.1));
            }
        }
    }

    #[test]
    fn gold_spans_decode_to_answers() {
        let recs = generate_synthetic(60, 2, &TemplateSet::disaster_bulletins()).unwrap();
        let v = corpus_vocab(&recs);
        let (ex, dropped) = encode_examples(&recs, &v, 384).unwrap();
        assert!(dropped.is_empty());
        for (e, r) in ex.iter().zip(&recs) {
            assert_eq!(v.decode(&e.packed.token_ids[e.span.0..=e.span.1]), r.answer_text);
        }
    }

    #[test]
    fn truncated_answers_are_dropped() {
        let mut recs = generate_synthetic(5, 4, &TemplateSet::disaster_bulletins()).unwrap();
        let long = QaRecord {
            id: "long".into(),
            question: "どこ？".into(),
            context: format!("{}熊本県", "あ".repeat(500)),
            answer_text: "熊本県".into(),
            answer_start_char: 500,
        };
        recs.push(long.clone());
        let mut texts: Vec<&QaRecord> = recs.iter().collect();
        texts.push(&long);
        let v = corpus_vocab(&recs);
        let b = make_batches(&recs, &v, 384, 4, 0).unwrap();
        assert_eq!(b.dropped, 1);
        assert_eq!(b.batches.iter().map(Batch::len).sum::<usize>(), 5);
        assert!(matches!(
            make_batches(&[long], &v, 384, 4, 0),
            Err(Error::EmptyDataset(_))
        ));
    }
}
