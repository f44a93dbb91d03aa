use super::vocab::{Vocabulary, BOS, EOS};

/// Lowercases, replaces punctuation with spaces and splits on whitespace.
pub fn normalize_text(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Lowercase, strip leading/trailing punctuation, collapse internal whitespace.
/// Multi-word terms stay a single string.
pub fn normalize_aspect(term: &str) -> String {
    let lower = term.to_lowercase();
    let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `[BOS, tokens.., EOS]` truncated to `max_len`. When truncation bites the
/// EOS is the part that is dropped.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(normalize_text(text).iter().map(|t| vocab.id(t)));
    ids.push(EOS);
    ids.truncate(max_len);
    ids
}
