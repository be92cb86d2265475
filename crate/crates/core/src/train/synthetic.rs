//! Text-separable synthetic corpus for end-to-end checks.
//!
//! Each sentence is three words drawn from its class's five-word vocabulary,
//! so `t_CLS` minus the shared offset is an average of that class's table
//! rows. With the ten rows affinely independent (almost sure for random
//! rows when ten ≤ d + 1), the two class hulls are disjoint and a linear
//! classifier on `t_CLS` separates the data. Image refs carry no label
//! information.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Label, Sample, Split};
use crate::Result;

pub const POSITIVE_WORDS: [&str; 5] = ["wonderful", "love", "totally", "brilliant", "thrilled"];
pub const NEGATIVE_WORDS: [&str; 5] = ["rain", "meeting", "train", "report", "garden"];
pub const WORDS_PER_SENTENCE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SyntheticSizes {
    fn default() -> Self {
        SyntheticSizes {
            train: 200,
            validation: 50,
            test: 50,
        }
    }
}

/// Classes alternate within each split, so every split is balanced to
/// within one sample.
pub fn separable_corpus(sizes: SyntheticSizes, seed: u64) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (split, n) in [
        (Split::Train, sizes.train),
        (Split::Validation, sizes.validation),
        (Split::Test, sizes.test),
    ] {
        for i in 0..n {
            let label = if i % 2 == 0 {
                Label::Sarcastic
            } else {
                Label::NotSarcastic
            };
            let vocab = if label.is_positive() {
                &POSITIVE_WORDS
            } else {
                &NEGATIVE_WORDS
            };
            let words: Vec<&str> = (0..WORDS_PER_SENTENCE)
                .map(|_| *vocab.choose(&mut rng).expect("non-empty vocabulary"))
                .collect();
            let image = format!("img/{:06}.jpg", rng.gen_range(0..1_000_000));
            samples.push(Sample::new(
                format!("{}-{i:04}", split.as_str()),
                words.join(" "),
                image,
                Some(label),
                split,
            ));
        }
    }
    Corpus::new(samples)
}
