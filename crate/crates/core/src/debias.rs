//! Removal of lexical shortcut cues: hashtag words and emoji words.
//!
//! A hashtag word is any token whose first character is `#`. An emoji word is
//! an `emoji_<digits>` placeholder token, or any token listed in an optional
//! lexicon (for corpora that store literal emoji). Both are deleted whole.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, Sample, Split};
use crate::{Error, Result};

/// Extra tokens to treat as emoji words.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EmojiLexicon {
    words: HashSet<String>,
}

impl EmojiLexicon {
    pub fn new<I, S>(words: I) -> EmojiLexicon
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        EmojiLexicon {
            words: words.into_iter().map(Into::into).collect(),
        }
    }

    /// One token per line; blank lines are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<EmojiLexicon> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(EmojiLexicon::new(
            text.lines().map(str::trim).filter(|l| !l.is_empty()),
        ))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub fn is_hashtag(token: &str) -> bool {
    token.starts_with('#')
}

pub fn is_emoji_placeholder(token: &str) -> bool {
    token
        .strip_prefix("emoji_")
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

pub fn detect_hashtags<S: AsRef<str>>(tokens: &[S]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| is_hashtag(t.as_ref()))
        .map(|(i, _)| i)
        .collect()
}

pub fn detect_emoji_words<S: AsRef<str>>(
    tokens: &[S],
    lexicon: Option<&EmojiLexicon>,
) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let t = t.as_ref();
            is_emoji_placeholder(t) || lexicon.is_some_and(|lx| lx.contains(t))
        })
        .map(|(i, _)| i)
        .collect()
}

/// Cue positions within one token list. Hashtag detection wins when a
/// lexicon entry also starts with `#`, so the two sets never overlap.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueSpans {
    pub hashtag_indices: Vec<usize>,
    pub emoji_indices: Vec<usize>,
}

impl CueSpans {
    pub fn detect<S: AsRef<str>>(tokens: &[S], lexicon: Option<&EmojiLexicon>) -> CueSpans {
        let hashtag_indices = detect_hashtags(tokens);
        let emoji_indices = detect_emoji_words(tokens, lexicon)
            .into_iter()
            .filter(|i| hashtag_indices.binary_search(i).is_err())
            .collect();
        CueSpans {
            hashtag_indices,
            emoji_indices,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.hashtag_indices.is_empty() && self.emoji_indices.is_empty()
    }
}

/// Copy of `sample` with every hashtag and emoji token removed.
pub fn strip_spurious(sample: &Sample, lexicon: Option<&EmojiLexicon>) -> Sample {
    let spans = CueSpans::detect(&sample.tokens, lexicon);
    if spans.is_empty() {
        // Still normalize whitespace so the output text is the token join.
        return sample.clone().with_tokens(sample.tokens.clone());
    }
    let drop: HashSet<usize> = spans
        .hashtag_indices
        .iter()
        .chain(&spans.emoji_indices)
        .copied()
        .collect();
    let kept = sample
        .tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, t)| t.clone())
        .collect();
    sample.clone().with_tokens(kept)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HashtagCell {
    pub samples: usize,
    pub hashtags: usize,
    /// `hashtags / samples`, or 0 for an empty cell.
    pub mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitHashtags {
    pub positive: HashtagCell,
    pub negative: HashtagCell,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmojiSummary {
    pub vocabulary: usize,
    pub in_both_classes: usize,
    pub in_one_class: usize,
    /// `None` when the vocabulary is empty.
    pub both_fraction: Option<f64>,
    pub single_fraction: Option<f64>,
}

/// Class-conditional cue statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub hashtags: BTreeMap<Split, SplitHashtags>,
    pub emoji: EmojiSummary,
}

impl BiasReport {
    pub fn hashtag_mean(&self, split: Split, label: Label) -> f64 {
        let cell = self.hashtags.get(&split).cloned().unwrap_or_default();
        match label {
            Label::Sarcastic => cell.positive.mean,
            Label::NotSarcastic => cell.negative.mean,
        }
    }
}

pub fn bias_report(corpus: &Corpus, lexicon: Option<&EmojiLexicon>) -> Result<BiasReport> {
    Corpus::require_labeled(corpus.samples().iter())?;

    let mut hashtags: BTreeMap<Split, SplitHashtags> = Split::ALL
        .iter()
        .map(|&s| (s, SplitHashtags::default()))
        .collect();
    let mut emoji_pos: BTreeSet<&str> = BTreeSet::new();
    let mut emoji_neg: BTreeSet<&str> = BTreeSet::new();

    for s in corpus.samples() {
        let spans = CueSpans::detect(&s.tokens, lexicon);
        let label = s.label.expect("checked above");
        let split = hashtags.get_mut(&s.split).expect("all splits present");
        let cell = if label.is_positive() {
            &mut split.positive
        } else {
            &mut split.negative
        };
        cell.samples += 1;
        cell.hashtags += spans.hashtag_indices.len();

        let bucket = if label.is_positive() {
            &mut emoji_pos
        } else {
            &mut emoji_neg
        };
        bucket.extend(spans.emoji_indices.iter().map(|&i| s.tokens[i].as_str()));
    }

    for split in hashtags.values_mut() {
        for cell in [&mut split.positive, &mut split.negative] {
            cell.mean = if cell.samples == 0 {
                0.0
            } else {
                cell.hashtags as f64 / cell.samples as f64
            };
        }
    }

    let vocabulary = emoji_pos.union(&emoji_neg).count();
    let in_both_classes = emoji_pos.intersection(&emoji_neg).count();
    let in_one_class = vocabulary - in_both_classes;
    let (both_fraction, single_fraction) = if vocabulary == 0 {
        (None, None)
    } else {
        let v = vocabulary as f64;
        (
            Some(in_both_classes as f64 / v),
            Some(in_one_class as f64 / v),
        )
    };

    Ok(BiasReport {
        hashtags,
        emoji: EmojiSummary {
            vocabulary,
            in_both_classes,
            in_one_class,
            both_fraction,
            single_fraction,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DebiasOutcome {
    pub corpus: Corpus,
    pub before: BiasReport,
    pub after: BiasReport,
    /// Samples whose text became empty; they are kept for their image.
    pub emptied: Vec<String>,
}

pub fn debias_corpus(corpus: &Corpus, lexicon: Option<&EmojiLexicon>) -> Result<DebiasOutcome> {
    let before = bias_report(corpus, lexicon)?;
    let mut emptied = Vec::new();
    let cleaned = corpus.map_samples(|s| {
        let out = strip_spurious(s, lexicon);
        if out.tokens.is_empty() && !s.tokens.is_empty() {
            emptied.push(s.id.clone());
        }
        out
    })?;
    let after = bias_report(&cleaned, lexicon)?;
    Ok(DebiasOutcome {
        corpus: cleaned,
        before,
        after,
        emptied,
    })
}
