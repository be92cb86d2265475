//! Canonical corpus records and split-level bookkeeping.
//!
//! On disk a corpus is JSON Lines, one object per sample:
//!
//! ```text
//! {"id":"t1","text":"love the traffic","image_ref":"t1.jpg","label":1,"split":"train"}
//! ```
//!
//! `label` is `1` (sarcastic), `0` (not sarcastic) or `null` for samples that
//! are still waiting on annotation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hash::derive_seed;
use crate::{Error, Result};

/// Binary sarcasm label. Serialized as the integers `1` / `0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    NotSarcastic,
    Sarcastic,
}

impl Label {
    pub fn from_index(index: usize) -> Option<Label> {
        match index {
            0 => Some(Label::NotSarcastic),
            1 => Some(Label::Sarcastic),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Label::NotSarcastic => 0,
            Label::Sarcastic => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Sarcastic
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, Self::Error> {
        Label::from_index(value as usize)
            .ok_or_else(|| format!("label must be 0 or 1, got {value}"))
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label.index() as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// On-disk shape of one corpus line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    text: String,
    image_ref: String,
    label: Option<Label>,
    split: Split,
}

/// One text/image pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Record", into = "Record")]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub image_ref: String,
    pub label: Option<Label>,
    pub split: Split,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        image_ref: impl Into<String>,
        label: Option<Label>,
        split: Split,
    ) -> Sample {
        let text = text.into();
        Sample {
            id: id.into(),
            tokens: tokenize(&text),
            text,
            image_ref: image_ref.into(),
            label,
            split,
        }
    }

    /// Replaces the token list and rewrites `text` as the single-space join.
    pub fn with_tokens(mut self, tokens: Vec<String>) -> Sample {
        self.text = tokens.join(" ");
        self.tokens = tokens;
        self
    }
}

impl From<Record> for Sample {
    fn from(r: Record) -> Sample {
        Sample::new(r.id, r.text, r.image_ref, r.label, r.split)
    }
}

impl From<Sample> for Record {
    fn from(s: Sample) -> Record {
        Record {
            id: s.id,
            text: s.text,
            image_ref: s.image_ref,
            label: s.label,
            split: s.split,
        }
    }
}

/// Whitespace tokenization after trimming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// An ordered collection of samples with unique ids.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corpus {
    samples: Vec<Sample>,
    split_index: BTreeMap<Split, Vec<String>>,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>) -> Result<Corpus> {
        let mut seen = HashSet::with_capacity(samples.len());
        let mut split_index: BTreeMap<Split, Vec<String>> = BTreeMap::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id {:?}", s.id)));
            }
            split_index.entry(s.split).or_default().push(s.id.clone());
        }
        Ok(Corpus {
            samples,
            split_index,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample ids of one split, in corpus order.
    pub fn split_ids(&self, split: Split) -> &[String] {
        self.split_index
            .get(&split)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Applies `f` to every sample; ids and splits must be preserved by `f`.
    pub fn map_samples(&self, f: impl FnMut(&Sample) -> Sample) -> Result<Corpus> {
        Corpus::new(self.samples.iter().map(f).collect())
    }

    pub(crate) fn require_labeled<'a>(samples: impl Iterator<Item = &'a Sample>) -> Result<()> {
        let missing: Vec<String> = samples
            .filter(|s| s.label.is_none())
            .map(|s| s.id.clone())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Unlabeled(missing))
        }
    }
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Corpus> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Corpus::new(samples)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file))
}

pub fn write_jsonl(corpus: &Corpus, mut writer: impl Write) -> std::io::Result<()> {
    for s in corpus.samples() {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(corpus, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub sentences: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Per-split sentence and class counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub splits: BTreeMap<Split, SplitStats>,
}

impl StatsReport {
    pub fn get(&self, split: Split) -> SplitStats {
        self.splits.get(&split).copied().unwrap_or_default()
    }

    /// Three-row table: Sentences / Positive / Negative by split.
    pub fn render_table(&self) -> String {
        let header = ["", "Train", "Validation", "Test"];
        type Column = (&'static str, fn(SplitStats) -> usize);
        let rows: [Column; 3] = [
            ("Sentences", |s| s.sentences),
            ("Positive", |s| s.positive),
            ("Negative", |s| s.negative),
        ];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for (name, pick) in rows {
            let mut row = vec![name.to_string()];
            row.extend(
                Split::ALL
                    .iter()
                    .map(|&sp| group_thousands(pick(self.get(sp)))),
            );
            cells.push(row);
        }
        render_aligned(&cells)
    }
}

pub fn corpus_stats(corpus: &Corpus) -> Result<StatsReport> {
    Corpus::require_labeled(corpus.samples().iter())?;
    let mut splits: BTreeMap<Split, SplitStats> = Split::ALL
        .iter()
        .map(|&s| (s, SplitStats::default()))
        .collect();
    for s in corpus.samples() {
        let entry = splits.get_mut(&s.split).expect("all splits present");
        entry.sentences += 1;
        match s.label {
            Some(Label::Sarcastic) => entry.positive += 1,
            Some(Label::NotSarcastic) => entry.negative += 1,
            None => unreachable!("checked above"),
        }
    }
    Ok(StatsReport { splits })
}

/// Number kept from a class of `size` at `fraction`: `ceil(fraction * size)`.
///
/// The product is nudged down by a tiny amount first so that values such as
/// `0.1 * 30 = 3.0000000000000004` round to 3, not 4.
pub fn stratum_quota(fraction: f64, size: usize) -> usize {
    let raw = fraction * size as f64;
    let quota = (raw - 1e-9).ceil().max(0.0) as usize;
    quota.min(size)
}

/// Class-stratified reduction of the train split; other splits pass through.
pub fn subsample(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    Corpus::require_labeled(corpus.split(Split::Train))?;

    let mut keep: HashSet<&str> = HashSet::new();
    for label in [Label::NotSarcastic, Label::Sarcastic] {
        let mut ids: Vec<&str> = corpus
            .split(Split::Train)
            .filter(|s| s.label == Some(label))
            .map(|s| s.id.as_str())
            .collect();
        let quota = stratum_quota(fraction, ids.len());
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("subsample/{}", label.index())));
        ids.shuffle(&mut rng);
        keep.extend(ids.into_iter().take(quota));
    }

    let samples = corpus
        .samples()
        .iter()
        .filter(|s| s.split != Split::Train || keep.contains(s.id.as_str()))
        .cloned()
        .collect();
    Corpus::new(samples)
}

pub(crate) fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Left-aligned plain-text table; the first row is treated as the header.
pub fn render_aligned(cells: &[Vec<String>]) -> String {
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            cells
                .iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{:<width$}", s, width = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
