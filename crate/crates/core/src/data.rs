//! Tokenization, TSV datasets, synthetic tasks and batching.
//!
//! TSV files are UTF-8, tab-delimited and start with a header row:
//!
//! | task | columns |
//! |------|---------|
//! | sst  | `id  sentence  sentiment` (integer 0–4) |
//! | para | `id  sentence1  sentence2  is_duplicate` (0 or 1) |
//! | sts  | `id  sentence1  sentence2  similarity` (real in \[0, 5\]) |

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    pack_pair_concat_first, pack_pair_embed_first, pack_single, PackedInput, SeqBatch, TokenSequence, CLS,
    NUM_RESERVED, PAD, UNK,
};
use crate::error::{Error, Result};
use crate::heads::Labels;
use crate::model::{PairPacking, ParaHead};
use crate::task::TaskKind;

const RESERVED: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercase, split on whitespace, strip punctuation from both ends of each
/// token and drop tokens that end up empty.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.to_lowercase()
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// A vocabulary holding only the four reserved entries.
    pub fn reserved() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect()).expect("reserved entries are valid")
    }

    /// Rebuild from an id-ordered token list whose first entries are the reserved ones.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED {
            return Err(Error::Data("vocabulary must start with [PAD] [UNK] [CLS] [SEP]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Tokens seen at least `min_count` times get ids from 4 upward, most frequent
/// first, ties broken lexicographically.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, min_count: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocab::from_tokens(tokens).expect("unique tokens")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub id: String,
    pub kind: TaskKind,
    pub sentence_a: String,
    pub sentence_b: Option<String>,
    /// Class index for sst and para, similarity for sts.
    pub label: f64,
}

impl TaskExample {
    pub fn validate(&self) -> Result<()> {
        if self.kind.is_pair() != self.sentence_b.is_some() {
            return Err(Error::Data(format!(
                "example {}: {} {} a second sentence",
                self.id,
                self.kind,
                if self.kind.is_pair() { "needs" } else { "must not have" }
            )));
        }
        check_label(self.kind, self.label).map_err(|m| Error::Data(format!("example {}: {m}", self.id)))
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.sentence_a.as_str()).chain(self.sentence_b.as_deref())
    }
}

fn check_label(kind: TaskKind, label: f64) -> std::result::Result<(), String> {
    let ok = match kind {
        TaskKind::Sst => label.fract() == 0.0 && (0.0..=4.0).contains(&label),
        TaskKind::Para => label == 0.0 || label == 1.0,
        TaskKind::Sts => (0.0..=5.0).contains(&label),
    };
    if ok {
        Ok(())
    } else {
        Err(format!(
            "label {label} out of range for {kind} ({})",
            match kind {
                TaskKind::Sst => "integer 0-4",
                TaskKind::Para => "0 or 1",
                TaskKind::Sts => "real in [0, 5]",
            }
        ))
    }
}

fn header(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Sst => "id\tsentence\tsentiment",
        TaskKind::Para => "id\tsentence1\tsentence2\tis_duplicate",
        TaskKind::Sts => "id\tsentence1\tsentence2\tsimilarity",
    }
}

pub fn load_tsv(path: &Path, kind: TaskKind) -> Result<Vec<TaskExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let columns = if kind.is_pair() { 4 } else { 3 };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.split('\t').count() == columns => {}
        _ => {
            return Err(Error::Data(format!(
                "{}: missing header row with {columns} columns ({})",
                path.display(),
                header(kind).replace('\t', ", ")
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::Data(format!("{}:{}: {msg}", path.display(), i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns {
            return Err(at(format!("expected {columns} columns, found {}", fields.len())));
        }
        let raw = fields[columns - 1].trim();
        let label: f64 = raw.parse().map_err(|_| at(format!("label {raw:?} is not a number")))?;
        check_label(kind, label).map_err(at)?;
        out.push(TaskExample {
            id: fields[0].to_string(),
            kind,
            sentence_a: fields[1].to_string(),
            sentence_b: kind.is_pair().then(|| fields[2].to_string()),
            label,
        });
    }
    Ok(out)
}

fn format_label(kind: TaskKind, label: f64) -> String {
    match kind {
        TaskKind::Sst | TaskKind::Para => format!("{}", label as u64),
        TaskKind::Sts => format!("{label}"),
    }
}

pub fn write_tsv(path: &Path, kind: TaskKind, examples: &[TaskExample]) -> Result<()> {
    let mut out = String::from(header(kind));
    out.push('\n');
    for ex in examples {
        if ex.kind != kind {
            return Err(Error::Data(format!("example {} is {}, not {kind}", ex.id, ex.kind)));
        }
        ex.validate()?;
        let fields: Vec<&str> = std::iter::once(ex.id.as_str()).chain(ex.texts()).collect();
        if fields.iter().any(|f| f.contains(['\t', '\n', '\r'])) {
            return Err(Error::Data(format!("example {} contains a tab or line break", ex.id)));
        }
        out.push_str(&fields.join("\t"));
        out.push('\t');
        out.push_str(&format_label(kind, ex.label));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---- synthetic tasks -------------------------------------------------------

/// Sentiment keyword families, one per class.
pub const SENTIMENT_FAMILIES: [[&str; 6]; 5] = [
    ["awful", "terrible", "dreadful", "horrible", "abysmal", "atrocious"],
    ["dull", "weak", "bland", "tedious", "mediocre", "clumsy"],
    ["okay", "average", "passable", "decent", "moderate", "fair"],
    ["good", "solid", "enjoyable", "pleasant", "likable", "nice"],
    [
        "brilliant",
        "superb",
        "masterful",
        "stunning",
        "outstanding",
        "wonderful",
    ],
];

const FILLER: [&str; 24] = [
    "the", "movie", "film", "plot", "actors", "story", "scenes", "was", "is", "a", "with", "and", "its", "director",
    "script", "music", "ending", "cast", "really", "quite", "this", "overall", "very", "camera",
];

const CONTENT: [&str; 48] = [
    "apple", "river", "stone", "cloud", "tiger", "window", "garden", "pencil", "violin", "rocket", "forest", "candle",
    "mirror", "bridge", "castle", "desert", "engine", "feather", "glacier", "harbor", "island", "jungle", "kettle",
    "lantern", "meadow", "needle", "orchard", "planet", "quartz", "saddle", "temple", "umbrella", "valley", "wagon",
    "yacht", "zebra", "anchor", "basket", "cactus", "dragon", "falcon", "ginger", "hammer", "igloo", "jacket",
    "ladder", "magnet", "nutmeg",
];

/// Similarity implied by token overlap: `5 · |A ∩ B| / max(|A|, |B|)` over distinct tokens.
pub fn overlap_similarity(a: &str, b: &str) -> f64 {
    let ta: BTreeSet<String> = tokenize(a).into_iter().collect();
    let tb: BTreeSet<String> = tokenize(b).into_iter().collect();
    let longest = ta.len().max(tb.len());
    if longest == 0 {
        return 0.0;
    }
    5.0 * ta.intersection(&tb).count() as f64 / longest as f64
}

/// The planted sentiment class of a sentence, if exactly one family occurs in it.
pub fn planted_sentiment(sentence: &str) -> Option<usize> {
    let tokens = tokenize(sentence);
    let found: BTreeSet<usize> = tokens
        .iter()
        .filter_map(|t| SENTIMENT_FAMILIES.iter().position(|f| f.contains(&t.as_str())))
        .collect();
    (found.len() == 1).then(|| *found.iter().next().expect("one element"))
}

/// Whether `b` is a reordering of `a`.
pub fn is_permutation(a: &str, b: &str) -> bool {
    let mut ta = tokenize(a);
    let mut tb = tokenize(b);
    ta.sort();
    tb.sort();
    ta == tb
}

fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn sample_distinct<'a>(pool: &[&'a str], k: usize, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    pool.choose_multiple(rng, k).copied().collect()
}

/// Deterministic synthetic data whose labels follow from a simple rule:
/// sst plants one keyword of its class family among filler words; para pairs
/// a sentence with a shuffled copy (1) or an unrelated sentence (0); sts
/// labels a pair by its token overlap.
pub fn synth_task(kind: TaskKind, n: usize, seed: u64) -> Result<Vec<TaskExample>> {
    if n < 10 {
        return Err(Error::Config(format!("synthetic tasks need n >= 10, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind.index() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut out = Vec::with_capacity(n);
    match kind {
        TaskKind::Sst => {
            for (i, label) in balanced_labels(n, 5, &mut rng).into_iter().enumerate() {
                let len = rng.random_range(4..=9);
                let mut words: Vec<&str> = (0..len).map(|_| *FILLER.choose(&mut rng).expect("filler")).collect();
                let keyword = *SENTIMENT_FAMILIES[label].choose(&mut rng).expect("family");
                words.insert(rng.random_range(0..=len), keyword);
                out.push(TaskExample {
                    id: format!("sst-{i}"),
                    kind,
                    sentence_a: words.join(" "),
                    sentence_b: None,
                    label: label as f64,
                });
            }
        }
        TaskKind::Para => {
            for (i, label) in balanced_labels(n, 2, &mut rng).into_iter().enumerate() {
                let len = rng.random_range(5..=8);
                let a = sample_distinct(&CONTENT, len, &mut rng);
                let b = if label == 1 {
                    let mut b = a.clone();
                    b.shuffle(&mut rng);
                    b
                } else {
                    loop {
                        let b = sample_distinct(&CONTENT, rng.random_range(5..=8), &mut rng);
                        if !is_permutation(&a.join(" "), &b.join(" ")) {
                            break b;
                        }
                    }
                };
                out.push(TaskExample {
                    id: format!("para-{i}"),
                    kind,
                    sentence_a: a.join(" "),
                    sentence_b: Some(b.join(" ")),
                    label: label as f64,
                });
            }
        }
        TaskKind::Sts => {
            for i in 0..n {
                let len = rng.random_range(5..=8);
                let shared = rng.random_range(0..=len);
                let a = sample_distinct(&CONTENT, len, &mut rng);
                let rest: Vec<&str> = CONTENT.iter().copied().filter(|w| !a.contains(w)).collect();
                let mut b: Vec<&str> = a[..shared].to_vec();
                b.extend(sample_distinct(&rest, len - shared, &mut rng));
                b.shuffle(&mut rng);
                let (a, b) = (a.join(" "), b.join(" "));
                let label = overlap_similarity(&a, &b);
                out.push(TaskExample {
                    id: format!("sts-{i}"),
                    kind,
                    sentence_a: a,
                    sentence_b: Some(b),
                    label,
                });
            }
        }
    }
    Ok(out)
}

// ---- batching ----------------------------------------------------------------

/// One batch of a single task, ready for the encoder.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub task: TaskKind,
    pub input: PackedInput,
    pub labels: Labels,
    pub ids: Vec<String>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Turns examples into encoder inputs according to the model's packing choices.
#[derive(Clone, Copy, Debug)]
pub struct Packer<'a> {
    pub vocab: &'a Vocab,
    pub max_len: usize,
    pub pair_packing: PairPacking,
    pub para_head: ParaHead,
}

impl Packer<'_> {
    pub fn pack(&self, task: TaskKind, examples: &[&TaskExample]) -> Result<PackedInput> {
        let encode = |s: &str| self.vocab.encode(s);
        if !task.is_pair() {
            let seqs: Vec<TokenSequence> = examples
                .iter()
                .map(|e| pack_single(&encode(&e.sentence_a), self.max_len))
                .collect();
            return Ok(PackedInput::Single(SeqBatch::from_sequences(&seqs)?));
        }
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = examples
            .iter()
            .map(|e| {
                let b = e
                    .sentence_b
                    .as_deref()
                    .ok_or_else(|| Error::Data(format!("example {} lacks a second sentence", e.id)))?;
                Ok((encode(&e.sentence_a), encode(b)))
            })
            .collect::<Result<_>>()?;
        if task == TaskKind::Para && self.para_head == ParaHead::Cosine {
            let mut seqs: Vec<TokenSequence> = pairs.iter().map(|(a, _)| pack_single(a, self.max_len)).collect();
            seqs.extend(pairs.iter().map(|(_, b)| pack_single(b, self.max_len)));
            return Ok(PackedInput::Siamese(SeqBatch::from_sequences(&seqs)?));
        }
        match self.pair_packing {
            PairPacking::ConcatFirst => {
                let seqs: Vec<TokenSequence> = pairs
                    .iter()
                    .map(|(a, b)| pack_pair_concat_first(a, b, self.max_len))
                    .collect();
                Ok(PackedInput::Single(SeqBatch::from_sequences(&seqs)?))
            }
            PairPacking::EmbedFirst => {
                let (sa, sb): (Vec<_>, Vec<_>) = pairs
                    .iter()
                    .map(|(a, b)| pack_pair_embed_first(a, b, self.max_len))
                    .unzip();
                Ok(PackedInput::EmbedFirst {
                    a: SeqBatch::from_sequences(&sa)?,
                    b: SeqBatch::from_sequences(&sb)?,
                })
            }
        }
    }
}

pub fn labels_of(task: TaskKind, examples: &[&TaskExample]) -> Labels {
    if task.is_regression() {
        Labels::Scores(examples.iter().map(|e| e.label).collect())
    } else {
        Labels::Classes(examples.iter().map(|e| e.label as usize).collect())
    }
}

/// Split `examples` into batches of `batch_size` (last one may be smaller),
/// shuffled by `shuffle_seed` when given.
pub fn make_batches(
    examples: &[TaskExample],
    batch_size: usize,
    packer: &Packer<'_>,
    shuffle_seed: Option<u64>,
) -> Result<Vec<TaskBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let Some(first) = examples.first() else {
        return Ok(Vec::new());
    };
    let task = first.kind;
    if let Some(bad) = examples.iter().find(|e| e.kind != task) {
        return Err(Error::Data(format!(
            "example {} is {}, batch is {task}",
            bad.id, bad.kind
        )));
    }
    let mut order: Vec<&TaskExample> = examples.iter().collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            Ok(TaskBatch {
                task,
                input: packer.pack(task, chunk)?,
                labels: labels_of(task, chunk),
                ids: chunk.iter().map(|e| e.id.clone()).collect(),
            })
        })
        .collect()
}

/// Scan a packed batch for padding violations: every masked position must hold `[PAD]`.
pub fn padding_is_clean(input: &PackedInput) -> bool {
    let ok = |s: &SeqBatch| {
        s.ids
            .iter()
            .zip(&s.mask)
            .zip(&s.segments)
            .all(|((&id, &m), &seg)| m || (id == PAD && seg == 0))
            && s.ids.chunks(s.len).all(|row| row[0] == CLS || row[0] == PAD)
    };
    match input {
        PackedInput::Single(s) | PackedInput::Siamese(s) => ok(s),
        PackedInput::EmbedFirst { a, b } => ok(a) && ok(b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Good movie!"), vec!["good", "movie"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  \"Don't\"  stop... "), vec!["don't", "stop"]);
    }

    #[test]
    fn vocab_ordering() {
        let v = build_vocab(["a a b"], 1);
        assert_eq!((v.id("a"), v.id("b")), (4, 5));
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(build_vocab(["a a b"], 3), Vocab::reserved());
        let again = build_vocab(["a a b"], 1);
        assert_eq!(v, again);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }

    #[test]
    fn tsv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sst.tsv");
        fs::write(&p, "id\tsentence\tsentiment\na\tfine film\t3\nb\tbad\t0\nc\tok\t2\n").unwrap();
        assert_eq!(load_tsv(&p, TaskKind::Sst).unwrap().len(), 3);
        fs::write(&p, "id\tsentence\tsentiment\na\tfine\t3\nb\tbad\t7\n").unwrap();
        let err = load_tsv(&p, TaskKind::Sst).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        let s = dir.path().join("sts.tsv");
        fs::write(&s, "id\tsentence1\tsentence2\tsimilarity\nx\ta b\tb c\t2.6\n").unwrap();
        assert_eq!(load_tsv(&s, TaskKind::Sts).unwrap()[0].label, 2.6);
        fs::write(&s, "id\tsentence1\tsentence2\tsimilarity\nx\ta b\t2.6\n").unwrap();
        assert!(load_tsv(&s, TaskKind::Sts).unwrap_err().to_string().contains("columns"));
        assert!(matches!(
            load_tsv(&dir.path().join("missing.tsv"), TaskKind::Sst),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn synthetic_rules_hold() {
        let sst = synth_task(TaskKind::Sst, 103, 1).unwrap();
        for c in 0..5 {
            let count = sst.iter().filter(|e| e.label as usize == c).count();
            assert!((20..=21).contains(&count));
        }
        assert!(sst
            .iter()
            .all(|e| planted_sentiment(&e.sentence_a) == Some(e.label as usize)));

        let para = synth_task(TaskKind::Para, 100, 1).unwrap();
        assert_eq!(para.iter().filter(|e| e.label == 1.0).count(), 50);
        for e in &para {
            let perm = is_permutation(&e.sentence_a, e.sentence_b.as_ref().unwrap());
            assert_eq!(perm, e.label == 1.0);
        }

        let sts = synth_task(TaskKind::Sts, 200, 1).unwrap();
        for e in &sts {
            assert_eq!(
                e.label,
                overlap_similarity(&e.sentence_a, e.sentence_b.as_ref().unwrap())
            );
        }
        assert!(sts.iter().any(|e| e.label == 5.0));
        assert_eq!(overlap_similarity("a b c", "c b a"), 5.0);
        assert!(synth_task(TaskKind::Sst, 9, 1).is_err());
    }

    #[test]
    fn batching_sizes_and_order() {
        let ex = synth_task(TaskKind::Sst, 10, 2).unwrap();
        let vocab = build_vocab(ex.iter().map(|e| e.sentence_a.as_str()), 1);
        let packer = Packer {
            vocab: &vocab,
            max_len: 32,
            pair_packing: PairPacking::ConcatFirst,
            para_head: ParaHead::Logit,
        };
        let batches = make_batches(&ex, 4, &packer, Some(3)).unwrap();
        assert_eq!(batches.iter().map(TaskBatch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let again = make_batches(&ex, 4, &packer, Some(3)).unwrap();
        assert_eq!(
            batches.iter().flat_map(|b| b.ids.clone()).collect::<Vec<_>>(),
            again.iter().flat_map(|b| b.ids.clone()).collect::<Vec<_>>()
        );
        assert!(batches.iter().all(|b| padding_is_clean(&b.input)));
    }

    #[test]
    fn pair_packings_are_clean() {
        let ex = synth_task(TaskKind::Para, 30, 2).unwrap();
        let vocab = build_vocab(ex.iter().flat_map(|e| e.texts()), 1);
        for (pair_packing, para_head) in [
            (PairPacking::ConcatFirst, ParaHead::Logit),
            (PairPacking::EmbedFirst, ParaHead::Logit),
            (PairPacking::ConcatFirst, ParaHead::Cosine),
        ] {
            let packer = Packer {
                vocab: &vocab,
                max_len: 32,
                pair_packing,
                para_head,
            };
            for b in make_batches(&ex, 7, &packer, Some(1)).unwrap() {
                assert!(padding_is_clean(&b.input));
                assert_eq!(b.input.num_examples(), b.len());
            }
        }
    }

    fn example(kind: TaskKind) -> impl Strategy<Value = TaskExample> {
        let word = "[a-z]{1,6}";
        let sentence = prop::collection::vec(word, 1..6).prop_map(|w| w.join(" "));
        let label = match kind {
            TaskKind::Sst => (0u8..5).prop_map(f64::from).boxed(),
            TaskKind::Para => (0u8..2).prop_map(f64::from).boxed(),
            TaskKind::Sts => (0.0f64..=5.0).boxed(),
        };
        ("[a-z0-9]{1,8}", sentence.clone(), sentence, label).prop_map(move |(id, a, b, label)| TaskExample {
            id,
            kind,
            sentence_a: a,
            sentence_b: kind.is_pair().then_some(b),
            label,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn tsv_round_trip(
            (kind, examples) in prop::sample::select(TaskKind::ALL.to_vec())
                .prop_flat_map(|k| (Just(k), prop::collection::vec(example(k), 0..8)))
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.tsv");
            write_tsv(&p, kind, &examples).unwrap();
            prop_assert_eq!(load_tsv(&p, kind).unwrap(), examples);
        }

        #[test]
        fn tokenize_is_idempotent(text in "[A-Za-z!?.,' \t]{0,40}") {
            let once = tokenize(&text);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }

        #[test]
        fn encoded_ids_are_in_range(text in "[a-z ]{0,40}") {
            let vocab = build_vocab(["the a movie"], 1);
            prop_assert!(vocab.encode(&text).iter().all(|&id| id < vocab.len()));
        }
    }
}
