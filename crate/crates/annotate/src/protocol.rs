//! Stateless pieces of the re-annotation protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarcasm_core::corpus::{Corpus, Label};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// What an annotator may answer. Serialized exactly as the UI shows it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnnLabel {
    Sarcasm,
    NotSarcasm,
    Undecided,
}

impl AnnLabel {
    pub const ALL: [AnnLabel; 3] = [AnnLabel::Sarcasm, AnnLabel::NotSarcasm, AnnLabel::Undecided];

    pub fn as_str(self) -> &'static str {
        match self {
            AnnLabel::Sarcasm => "Sarcasm",
            AnnLabel::NotSarcasm => "NotSarcasm",
            AnnLabel::Undecided => "Undecided",
        }
    }

    /// The binary corpus label, or `None` for `Undecided`.
    pub fn binary(self) -> Option<Label> {
        match self {
            AnnLabel::Sarcasm => Some(Label::Sarcastic),
            AnnLabel::NotSarcasm => Some(Label::NotSarcastic),
            AnnLabel::Undecided => None,
        }
    }
}

impl From<Label> for AnnLabel {
    fn from(l: Label) -> AnnLabel {
        match l {
            Label::Sarcastic => AnnLabel::Sarcasm,
            Label::NotSarcastic => AnnLabel::NotSarcasm,
        }
    }
}

impl fmt::Display for AnnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnnLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnnLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown label {s:?}; expected Sarcasm, NotSarcasm or Undecided"
                ))
            })
    }
}

/// Onboarding pass mark as a ratio: 85 %, inclusive.
pub const PASS_NUMERATOR: usize = 17;
pub const PASS_DENOMINATOR: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnboardingGrade {
    pub correct: usize,
    pub total: usize,
    pub score: f64,
    pub passed: bool,
}

impl OnboardingGrade {
    pub fn from_counts(correct: usize, total: usize) -> Result<OnboardingGrade> {
        if total == 0 || correct > total {
            return Err(Error::Argument(format!(
                "cannot grade {correct} of {total}"
            )));
        }
        Ok(OnboardingGrade {
            correct,
            total,
            score: correct as f64 / total as f64,
            // Integer comparison, so 85 of 100 is not lost to rounding.
            passed: PASS_DENOMINATOR * correct >= PASS_NUMERATOR * total,
        })
    }
}

/// Exact-match grading against the gold answers.
pub fn grade_onboarding(answers: &[AnnLabel], gold: &[AnnLabel]) -> Result<OnboardingGrade> {
    if answers.len() != gold.len() {
        return Err(Error::Argument(format!(
            "{} answers for {} onboarding items",
            answers.len(),
            gold.len()
        )));
    }
    let correct = answers.iter().zip(gold).filter(|(a, g)| a == g).count();
    OnboardingGrade::from_counts(correct, gold.len())
}

/// Ids of the samples to re-annotate: every sample originally labeled
/// negative, in corpus order.
pub fn select_candidates(corpus: &Corpus) -> Vec<String> {
    corpus
        .samples()
        .iter()
        .filter(|s| s.label == Some(Label::NotSarcastic))
        .map(|s| s.id.clone())
        .collect()
}

/// Majority of exactly three binary expert votes.
pub fn resolve_majority(votes: &[AnnLabel]) -> Result<Label> {
    if votes.len() != 3 {
        return Err(Error::Argument(format!(
            "expert resolution needs 3 labels, got {}",
            votes.len()
        )));
    }
    let mut positive = 0;
    for v in votes {
        match v.binary() {
            Some(Label::Sarcastic) => positive += 1,
            Some(Label::NotSarcastic) => {}
            None => {
                return Err(Error::Argument(
                    "Undecided is not allowed at the expert stage".into(),
                ))
            }
        }
    }
    Ok(if positive >= 2 {
        Label::Sarcastic
    } else {
        Label::NotSarcastic
    })
}

/// Seeded uniform sample of `n` ids without replacement, returned sorted.
pub fn sample_double_check(population: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    if n > population.len() {
        return Err(Error::Argument(format!(
            "cannot sample {n} of {} labeled items",
            population.len()
        )));
    }
    let mut sorted = population.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<String> = index::sample(&mut rng, sorted.len(), n)
        .into_iter()
        .map(|i| sorted[i].clone())
        .collect();
    picked.sort();
    Ok(picked)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub n_items: usize,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    pub kappa: f64,
}

/// Cohen's κ for two binary annotations of the same items.
pub fn cohen_kappa(a: &[Label], b: &[Label]) -> Result<KappaReport> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "label lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Argument("kappa needs at least one item".into()));
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count();
    let p_o = agree as f64 / n;
    let pos = |xs: &[Label]| xs.iter().filter(|l| l.is_positive()).count() as f64 / n;
    let (pa, pb) = (pos(a), pos(b));
    let p_e = pa * pb + (1.0 - pa) * (1.0 - pb);
    let kappa = if p_e >= 1.0 {
        // Both annotators used one and the same class throughout.
        1.0
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(KappaReport {
        n_items: a.len(),
        observed_agreement: p_o,
        expected_agreement: p_e,
        kappa,
    })
}

/// Applies re-annotated labels to the candidates. Every candidate must have
/// a resolution; originally positive samples are carried through as is.
pub fn export_corrected(corpus: &Corpus, resolved: &BTreeMap<String, Label>) -> Result<Corpus> {
    let candidates = select_candidates(corpus);
    let missing: Vec<String> = candidates
        .iter()
        .filter(|id| !resolved.contains_key(*id))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Unresolved(missing));
    }
    let candidate_set: BTreeSet<&String> = candidates.iter().collect();
    if let Some(stray) = resolved.keys().find(|id| !candidate_set.contains(id)) {
        return Err(Error::Argument(format!(
            "{stray:?} was not a re-annotation candidate"
        )));
    }
    Ok(corpus.map_samples(|s| {
        let mut s = s.clone();
        if let Some(&label) = resolved.get(&s.id) {
            s.label = Some(label);
        }
        s
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use AnnLabel::*;

    #[test]
    fn labels_round_trip_as_strings() {
        for l in AnnLabel::ALL {
            assert_eq!(l.as_str().parse::<AnnLabel>().unwrap(), l);
            assert_eq!(serde_json::to_string(&l).unwrap(), format!("\"{l}\""));
        }
        assert!("Not Sarcasm".parse::<AnnLabel>().is_err());
    }

    #[test]
    fn majority_votes() {
        assert_eq!(
            resolve_majority(&[Sarcasm, Sarcasm, NotSarcasm]).unwrap(),
            Label::Sarcastic
        );
        assert_eq!(
            resolve_majority(&[NotSarcasm, NotSarcasm, NotSarcasm]).unwrap(),
            Label::NotSarcastic
        );
        assert!(resolve_majority(&[Sarcasm, NotSarcasm, Undecided]).is_err());
        assert!(resolve_majority(&[Sarcasm, Sarcasm]).is_err());
        assert!(resolve_majority(&[Sarcasm; 4]).is_err());
    }

    #[test]
    fn grade_rejects_length_mismatch() {
        assert!(matches!(
            grade_onboarding(&[Sarcasm], &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn double_check_edge_sizes() {
        let pop: Vec<String> = (0..5).map(|i| format!("t{i}")).collect();
        assert!(sample_double_check(&pop, 0, 1).unwrap().is_empty());
        assert_eq!(sample_double_check(&pop, 5, 1).unwrap(), pop);
        assert!(sample_double_check(&pop, 6, 1).is_err());
    }
}
