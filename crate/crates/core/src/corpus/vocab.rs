use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::text::normalize_text;
use super::Dataset;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Review-token vocabulary; ids 0..4 are the special markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&id) if id >= SPECIALS.len() => id,
            _ => UNK,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id(token) != UNK
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Tokens with frequency >= `min_freq`, ordered by frequency descending then
/// lexicographically.
pub fn build_vocab(train: &Dataset, min_freq: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for record in train.iter() {
        for tok in normalize_text(&record.review) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// Normalized aspect terms of the training split, lexicographically ordered.
/// The id one past the last term is the reserved NONE padding aspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AspectVocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
}

impl AspectVocabulary {
    pub fn from_terms(terms: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = terms.into_iter().filter(|t| !t.is_empty()).collect();
        let terms: Vec<String> = set.into_iter().collect();
        let index = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        AspectVocabulary { terms, index }
    }

    pub fn build(train: &Dataset) -> Self {
        Self::from_terms(train.iter().flat_map(|r| r.aspects.iter().cloned()))
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn term(&self, id: usize) -> Option<&str> {
        self.terms.get(id).map(String::as_str)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// Number of real aspects; logits range over these.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn none_id(&self) -> usize {
        self.terms.len()
    }
}

impl From<Vec<String>> for AspectVocabulary {
    fn from(terms: Vec<String>) -> Self {
        AspectVocabulary::from_terms(terms)
    }
}

impl From<AspectVocabulary> for Vec<String> {
    fn from(v: AspectVocabulary) -> Self {
        v.terms
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Provenance, ReviewRecord};

    fn ds(reviews: &[&str]) -> Dataset {
        Dataset::new(
            reviews
                .iter()
                .map(|r| ReviewRecord {
                    user_id: "u".into(),
                    item_id: "i".into(),
                    rating: 3.0,
                    review: r.to_string(),
                    aspects: vec!["b".into()],
                })
                .collect(),
            Provenance::Ingested,
        )
    }

    #[test]
    fn min_freq_filters() {
        let v = build_vocab(&ds(&["a a b", "b c"]), 2);
        assert!(v.contains("a") && v.contains("b"));
        assert_eq!(v.id("c"), UNK);
        let v1 = build_vocab(&ds(&["a a b", "b c"]), 1);
        assert!(v1.contains("c"));
        assert_eq!(v1.len(), 7);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab(&ds(&["b a b a"]), 1);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
    }

    #[test]
    fn special_names_are_not_addressable_tokens() {
        let v = build_vocab(&ds(&["x"]), 1);
        assert_eq!(v.id("<bos>"), UNK);
        assert_eq!(v.token(BOS), Some("<bos>"));
    }

    #[test]
    fn aspect_vocab_is_sorted_with_none_after() {
        let av = AspectVocabulary::from_terms(vec!["room".into(), "bed".into(), "room".into()]);
        assert_eq!(av.terms(), &["bed".to_string(), "room".to_string()]);
        assert_eq!(av.none_id(), 2);
        assert_eq!(av.id("room"), Some(1));
    }
}
