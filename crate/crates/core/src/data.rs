//! Tokenisation, vocabularies, TSV datasets and the synthetic easy/hard
//! generator.
//!
//! TSV rows are `label<TAB>text` or `label<TAB>text1<TAB>text2`, optionally
//! followed by a trailing `#meta: name=value name=value` column. Blank lines
//! and lines starting with `#` are ignored. Label ids follow lexicographic
//! order of the label strings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{PAD_ID, START_ID};
use crate::error::{Error, Result};
use crate::multi_exit::Example;

pub const UNK_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const RESERVED: [&str; 4] = ["[pad]", "[start]", "[unk]", "[sep]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// The fixed vocabulary of [`gen_synthetic`]: reserved ids then `w4..w199`.
    pub fn synthetic() -> Self {
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain((RESERVED.len()..synth::VOCAB).map(|i| format!("w{i}")))
            .collect();
        Vocab::from_tokens(tokens).expect("distinct names")
    }

    /// One token per line in id order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::InvalidInput(format!(
                "{} does not start with the reserved tokens",
                path.display()
            )));
        }
        Vocab::from_tokens(tokens)
    }
}

/// Lowercases, splits on whitespace and makes every punctuation character a
/// token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() || ch == '_' {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_lowercase().collect());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Keeps the most frequent tokens, ties broken lexicographically, so that the
/// whole vocabulary (reserved ids included) holds at most `max_size` entries.
pub fn build_vocab<'a, I>(corpus: I, max_size: usize) -> Vocab
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for t in tokenize(line) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = max_size.saturating_sub(RESERVED.len());
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().take(room).map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens).expect("counts keys are distinct")
}

/// `[start, ids(text)...]`, truncated to `max_seq_len`.
pub fn encode_text(text: &str, vocab: &Vocab, max_seq_len: usize) -> Vec<usize> {
    encode_segments(&[text], vocab, max_seq_len)
}

/// `[start, ids(a)..., sep, ids(b)...]`, truncated to `max_seq_len`.
pub fn encode_pair(a: &str, b: &str, vocab: &Vocab, max_seq_len: usize) -> Vec<usize> {
    encode_segments(&[a, b], vocab, max_seq_len)
}

fn encode_segments(segments: &[&str], vocab: &Vocab, max_seq_len: usize) -> Vec<usize> {
    let mut ids = vec![START_ID];
    for (i, seg) in segments.iter().enumerate() {
        if i > 0 {
            ids.push(SEP_ID);
        }
        ids.extend(tokenize(seg).iter().map(|t| vocab.id(t).unwrap_or(UNK_ID)));
    }
    ids.truncate(max_seq_len.max(1));
    ids
}

/// Token strings of an encoded sequence, dropping the start token.
pub fn decode(ids: &[usize], vocab: &Vocab) -> Vec<String> {
    ids.iter()
        .filter(|&&i| i != START_ID && i != PAD_ID)
        .map(|&i| vocab.token(i).unwrap_or(RESERVED[UNK_ID]).to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<usize>,
    pub label: usize,
    pub meta: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub labels: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn examples(&self) -> Vec<Example> {
        self.instances
            .iter()
            .map(|i| Example { tokens: i.tokens.clone(), gold: i.label })
            .collect()
    }

    pub fn golds(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    /// Deterministic shuffle-and-cut into train/val/test.
    pub fn partition(&self, ratios: SplitRatios, seed: u64) -> Result<Splits> {
        let order = partition_order(self.instances.len(), seed);
        let (n_train, n_val) = ratios.counts(self.instances.len())?;
        let take = |range: &[usize], split| Dataset {
            instances: range.iter().map(|&i| self.instances[i].clone()).collect(),
            labels: self.labels.clone(),
            split,
        };
        Ok(Splits {
            train: take(&order[..n_train], Split::Train),
            val: take(&order[n_train..n_train + n_val], Split::Val),
            test: take(&order[n_train + n_val..], Split::Test),
        })
    }
}

fn partition_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, val: 0.1 }
    }
}

impl SplitRatios {
    fn counts(&self, n: usize) -> Result<(usize, usize)> {
        if self.train < 0.0 || self.val < 0.0 || self.train + self.val > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!("split ratios {self:?}")));
        }
        let n_train = ((n as f64) * self.train).round() as usize;
        let n_val = (((n as f64) * self.val).round() as usize).min(n - n_train.min(n));
        Ok((n_train.min(n), n_val))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsvRow {
    pub line: usize,
    pub label: String,
    pub texts: Vec<String>,
    pub meta: BTreeMap<String, f64>,
}

pub fn parse_tsv(text: &str, source: &str) -> Result<Vec<TsvRow>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| Error::Parse { path: source.to_string(), line, msg };
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let mut cols: Vec<&str> = raw.split('\t').collect();
        let mut meta = BTreeMap::new();
        if let Some(last) = cols.last() {
            if let Some(spec) = last.trim_start().strip_prefix("#meta:") {
                for pair in spec.split_whitespace() {
                    let (k, v) = pair
                        .split_once('=')
                        .ok_or_else(|| err(format!("metadata entry {pair:?} is not name=value")))?;
                    let v: f64 = v
                        .parse()
                        .map_err(|_| err(format!("metadata {k} has non-numeric value {v:?}")))?;
                    meta.insert(k.to_string(), v);
                }
                cols.pop();
            }
        }
        if !(2..=3).contains(&cols.len()) {
            return Err(err(format!("expected 2 or 3 tab-separated columns, found {}", cols.len())));
        }
        let label = cols[0].trim();
        if label.is_empty() {
            return Err(err("empty label".into()));
        }
        rows.push(TsvRow {
            line,
            label: label.to_string(),
            texts: cols[1..].iter().map(|s| s.to_string()).collect(),
            meta,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub enum VocabSource {
    /// Built from the training rows.
    Build { max_size: usize },
    Given(Vocab),
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub vocab: VocabSource,
    /// Fixed label set; rows with other labels are rejected.
    pub labels: Option<Vec<String>>,
    pub ratios: SplitRatios,
    pub seed: u64,
    pub max_seq_len: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            vocab: VocabSource::Build { max_size: 5000 },
            labels: None,
            ratios: SplitRatios::default(),
            seed: 0,
            max_seq_len: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub splits: Splits,
    pub vocab: Vocab,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn label_set(rows: &[&TsvRow], fixed: &Option<Vec<String>>, source: &str) -> Result<Vec<String>> {
    match fixed {
        Some(labels) => {
            for r in rows {
                if !labels.contains(&r.label) {
                    return Err(Error::Parse {
                        path: source.to_string(),
                        line: r.line,
                        msg: format!("unknown label {:?}", r.label),
                    });
                }
            }
            Ok(labels.clone())
        }
        None => Ok(rows.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect()),
    }
}

fn encode_rows(rows: &[&TsvRow], labels: &[String], vocab: &Vocab, max_seq_len: usize, split: Split, source: &str) -> Result<Dataset> {
    let instances = rows
        .iter()
        .map(|r| {
            let label = labels.iter().position(|l| *l == r.label).ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: r.line,
                msg: format!("unknown label {:?}", r.label),
            })?;
            let tokens = match r.texts.as_slice() {
                [a] => encode_text(a, vocab, max_seq_len),
                [a, b] => encode_pair(a, b, vocab, max_seq_len),
                _ => unreachable!("parse_tsv enforces 1 or 2 texts"),
            };
            Ok(Instance { id: format!("{}-{}", split.name(), r.line), tokens, label, meta: r.meta.clone() })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { instances, labels: labels.to_vec(), split })
}

fn resolve_vocab(source: &VocabSource, train_rows: &[&TsvRow]) -> Vocab {
    match source {
        VocabSource::Given(v) => v.clone(),
        VocabSource::Build { max_size } => {
            build_vocab(train_rows.iter().flat_map(|r| r.texts.iter().map(String::as_str)), *max_size)
        }
    }
}

/// Loads one TSV file and partitions it deterministically under `options.seed`.
pub fn load_tsv(path: &Path, options: &LoadOptions) -> Result<Loaded> {
    let source = path.display().to_string();
    let rows = parse_tsv(&read(path)?, &source)?;
    let all: Vec<&TsvRow> = rows.iter().collect();
    let labels = label_set(&all, &options.labels, &source)?;
    let order = partition_order(rows.len(), options.seed);
    let (n_train, n_val) = options.ratios.counts(rows.len())?;
    let pick = |r: &[usize]| r.iter().map(|&i| &rows[i]).collect::<Vec<_>>();
    let (train, val, test) = (
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    );
    let vocab = resolve_vocab(&options.vocab, &train);
    let enc = |r: &[&TsvRow], s| encode_rows(r, &labels, &vocab, options.max_seq_len, s, &source);
    let splits = Splits { train: enc(&train, Split::Train)?, val: enc(&val, Split::Val)?, test: enc(&test, Split::Test)? };
    Ok(Loaded { splits, vocab })
}

/// Loads user-supplied `train`, `val` and `test` files.
pub fn load_tsv_splits(train: &Path, val: &Path, test: &Path, options: &LoadOptions) -> Result<Loaded> {
    let parsed: Vec<(String, Vec<TsvRow>)> = [train, val, test]
        .iter()
        .map(|p| {
            let s = p.display().to_string();
            parse_tsv(&read(p)?, &s).map(|r| (s, r))
        })
        .collect::<Result<_>>()?;
    let all: Vec<&TsvRow> = parsed.iter().flat_map(|(_, r)| r.iter()).collect();
    let labels = label_set(&all, &options.labels, &parsed[0].0)?;
    let refs = |i: usize| parsed[i].1.iter().collect::<Vec<_>>();
    let vocab = resolve_vocab(&options.vocab, &refs(0));
    let enc = |i: usize, s| encode_rows(&refs(i), &labels, &vocab, options.max_seq_len, s, &parsed[i].0);
    let splits = Splits { train: enc(0, Split::Train)?, val: enc(1, Split::Val)?, test: enc(2, Split::Test)? };
    Ok(Loaded { splits, vocab })
}

/// Renders a dataset back into the TSV format.
pub fn to_tsv(dataset: &Dataset, vocab: &Vocab) -> String {
    let mut out = String::new();
    for inst in &dataset.instances {
        out.push_str(&dataset.labels[inst.label]);
        for seg in inst.tokens.split(|&t| t == SEP_ID) {
            out.push('\t');
            out.push_str(&decode(seg, vocab).join(" "));
        }
        if !inst.meta.is_empty() {
            out.push_str("\t#meta:");
            for (k, v) in &inst.meta {
                let _ = write!(out, " {k}={v}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_tsv(dataset: &Dataset, vocab: &Vocab, path: &Path) -> Result<()> {
    fs::write(path, to_tsv(dataset, vocab)).map_err(|e| Error::io(path, e))
}

/// Token layout of the synthetic task.
pub mod synth {
    use std::ops::Range;

    pub const VOCAB: usize = 200;
    /// Class-c markers: a single one decides an easy instance.
    pub const MARKERS: [Range<usize>; 2] = [4..8, 8..12];
    /// Pattern group A, split by class.
    pub const GROUP_A: [Range<usize>; 2] = [12..20, 20..28];
    /// Pattern group B, split by class.
    pub const GROUP_B: [Range<usize>; 2] = [28..36, 36..44];
    pub const NOISE: Range<usize> = 44..VOCAB;
    /// Sequence lengths, start token included.
    pub const LENGTHS: std::ops::RangeInclusive<usize> = 8..=16;

    pub fn marker_class(token: usize) -> Option<usize> {
        MARKERS.iter().position(|r| r.contains(&token))
    }
}

/// Binary task where easy instances carry one class marker among noise and
/// hard instances carry none: their label is the XOR of the classes of one
/// group-A and one group-B pattern token.
///
/// Each pattern token's presence is independent of the label, so no rule
/// based on a single token's presence beats chance on the hard part.
pub fn gen_synthetic(n_per_class: usize, easy_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&easy_fraction) {
        return Err(Error::InvalidArgument(format!("easy_fraction {easy_fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_easy = (n_per_class as f64 * easy_fraction).round() as usize;
    let mut plan: Vec<(usize, bool)> = (0..2)
        .flat_map(|y| (0..n_per_class).map(move |i| (y, i < n_easy)))
        .collect();
    plan.shuffle(&mut rng);

    let instances = plan
        .into_iter()
        .enumerate()
        .map(|(idx, (label, easy))| {
            let len = rng.gen_range(synth::LENGTHS);
            let special: Vec<usize> = if easy {
                vec![rng.gen_range(synth::MARKERS[label].clone())]
            } else {
                let ca = rng.gen_range(0..2);
                let cb = ca ^ label;
                vec![rng.gen_range(synth::GROUP_A[ca].clone()), rng.gen_range(synth::GROUP_B[cb].clone())]
            };
            let mut body: Vec<usize> =
                (0..len - 1 - special.len()).map(|_| rng.gen_range(synth::NOISE)).collect();
            for t in special {
                let at = rng.gen_range(0..=body.len());
                body.insert(at, t);
            }
            let mut tokens = Vec::with_capacity(len);
            tokens.push(START_ID);
            tokens.extend(body);
            let meta = BTreeMap::from([
                ("is_easy".to_string(), if easy { 1.0 } else { 0.0 }),
                ("length".to_string(), len as f64),
            ]);
            Instance { id: format!("syn-{idx}"), tokens, label, meta }
        })
        .collect();
    Ok(Dataset { instances, labels: vec!["0".into(), "1".into()], split: Split::All })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_frequency_then_lexicographic() {
        let v = build_vocab(["a b", "a c"], 10);
        let (a, b, c) = (v.id("a").unwrap(), v.id("b").unwrap(), v.id("c").unwrap());
        assert!(a < b && a < c);
        assert!(b < c);
        assert_eq!(v.len(), 7);
        let small = build_vocab(["a b", "a c", "c"], 6);
        assert!(small.id("b").is_none());
        assert!(small.id("a").is_some() && small.id("c").is_some());
        assert_eq!(build_vocab(["x y z", "y"], 50), build_vocab(["x y z", "y"], 50));
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
    }

    #[test]
    fn encode_examples() {
        let v = build_vocab(["w"], 10);
        assert_eq!(encode_text("", &v, 8), vec![START_ID]);
        assert_eq!(encode_text("w", &v, 8), vec![START_ID, v.id("w").unwrap()]);
        assert_eq!(encode_text("w zz", &v, 8), vec![START_ID, v.id("w").unwrap(), UNK_ID]);
        let w = v.id("w").unwrap();
        assert_eq!(encode_pair("w w", "w", &v, 8), vec![START_ID, w, w, SEP_ID, w]);
        assert_eq!(encode_text("w w w w", &v, 3).len(), 3);
    }

    #[test]
    fn decode_round_trips_known_tokens() {
        let v = build_vocab(["the cat sat", "on the mat"], 50);
        let ids = encode_text("the cat sat on the mat", &v, 32);
        assert_eq!(decode(&ids, &v).join(" "), "the cat sat on the mat");
    }

    #[test]
    fn tsv_rows() {
        let text = "pos\thello there\nneg\tpremise\thypothesis\t#meta: agree=0.8 length=3\n\n# comment\n";
        let rows = parse_tsv(text, "mem").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].texts.len(), 2);
        assert_eq!(rows[1].meta["agree"], 0.8);
        assert!(matches!(parse_tsv("justone\n", "mem"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_tsv("a\tb\n\nx\ty\t#meta: k\n", "f"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn load_assigns_lexicographic_labels_and_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        fs::write(&p, "pos\thello\nneg\tbad movie\nneg\ta\tb\n").unwrap();
        let opts = LoadOptions { ratios: SplitRatios { train: 1.0, val: 0.0 }, ..Default::default() };
        let loaded = load_tsv(&p, &opts).unwrap();
        let train = &loaded.splits.train;
        assert_eq!(train.labels, vec!["neg", "pos"]);
        let hello = train.instances.iter().find(|i| i.id == "train-1").unwrap();
        assert_eq!(hello.label, 1);
        let pair = train.instances.iter().find(|i| i.id == "train-3").unwrap();
        assert!(pair.tokens.contains(&SEP_ID));

        let fixed = LoadOptions { labels: Some(vec!["neg".into()]), ..opts };
        assert!(matches!(load_tsv(&p, &fixed), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn partitions_are_deterministic_disjoint_exhaustive() {
        let d = gen_synthetic(50, 0.5, 3).unwrap();
        let a = d.partition(SplitRatios::default(), 9).unwrap();
        let b = d.partition(SplitRatios::default(), 9).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<&str> = [&a.train, &a.val, &a.test]
            .iter()
            .flat_map(|s| s.instances.iter().map(|i| i.id.as_str()))
            .collect();
        assert_eq!(ids.len(), 100);
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (80, 10, 10));
    }

    #[test]
    fn synthetic_construction() {
        let all_easy = gen_synthetic(40, 1.0, 1).unwrap();
        assert!(all_easy
            .instances
            .iter()
            .all(|i| i.tokens.iter().any(|&t| synth::marker_class(t) == Some(i.label))));
        let d = gen_synthetic(40, 0.5, 2).unwrap();
        assert_eq!(d, gen_synthetic(40, 0.5, 2).unwrap());
        assert_ne!(d, gen_synthetic(40, 0.5, 3).unwrap());
        for i in &d.instances {
            assert_eq!(i.tokens[0], START_ID);
            assert!(synth::LENGTHS.contains(&i.tokens.len()));
            assert_eq!(i.meta["length"], i.tokens.len() as f64);
            let markers = i.tokens.iter().filter(|&&t| synth::marker_class(t).is_some()).count();
            assert_eq!(markers, if i.meta["is_easy"] == 1.0 { 1 } else { 0 });
        }
        assert_eq!(d.instances.iter().filter(|i| i.meta["is_easy"] == 1.0).count(), 40);
    }

    #[test]
    fn synthetic_tsv_export_reloads_identically() {
        let d = gen_synthetic(10, 0.5, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        write_tsv(&d, &Vocab::synthetic(), &p).unwrap();
        let opts = LoadOptions {
            vocab: VocabSource::Given(Vocab::synthetic()),
            ratios: SplitRatios { train: 1.0, val: 0.0 },
            ..Default::default()
        };
        let back = load_tsv(&p, &opts).unwrap().splits.train;
        let mut a: Vec<_> = d.instances.iter().map(|i| (i.tokens.clone(), i.label, i.meta.clone())).collect();
        let mut b: Vec<_> = back.instances.iter().map(|i| (i.tokens.clone(), i.label, i.meta.clone())).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = build_vocab(["one two two"], 20);
        v.write(&p).unwrap();
        assert_eq!(Vocab::read(&p).unwrap(), v);
    }
}
