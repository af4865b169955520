//! Word-level tokenizer and corpus-derived vocabulary.

use std::collections::HashMap;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace and ASCII punctuation; each
/// punctuation character becomes its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() || ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if ch.is_ascii_punctuation() {
                out.push(ch.to_string());
            }
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Joins words with single spaces, attaching punctuation to the preceding
/// word. Inverse of [`split_words`] on normalised text.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    for w in words {
        let w = w.as_ref();
        let punct = w.chars().count() == 1 && w.chars().all(|c| c.is_ascii_punctuation());
        if !out.is_empty() && !punct {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

/// Normal form of a text: lowercase, single-spaced, punctuation attached.
pub fn normalize(text: &str) -> String {
    join_words(&split_words(text))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("vocabulary line {line}: {detail}")]
    Malformed { line: usize, detail: String },
}

impl Vocabulary {
    /// Builds from a corpus: reserved tokens first, then words by
    /// descending frequency with lexicographic tie-break.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(VocabError::Malformed {
                    line: i + 1,
                    detail: format!("expected reserved token {r}"),
                });
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(VocabError::Malformed {
                    line: i + 1,
                    detail: format!("invalid token {t:?}"),
                });
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::Malformed {
                    line: i + 1,
                    detail: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens, index })
    }

    /// One token per line; line index is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
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

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Word ids of `text`, truncated to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        split_words(text).iter().take(max_len).map(|w| self.id(w)).collect()
    }

    /// Inverse of [`tokenize`](Self::tokenize); stops at `eos`, skips other
    /// reserved ids except `unk`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i == UNK || i >= RESERVED.len())
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect();
        join_words(&words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_keeps_punctuation() {
        assert_eq!(split_words("Turn left."), ["turn", "left", "."]);
        assert_eq!(split_words("  a,b  ?"), ["a", ",", "b", "?"]);
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = Vocabulary::build(["turn left ."]);
        assert_eq!(v.tokenize("Turn right.", 32), [v.id("turn"), UNK, v.id(".")]);
    }

    #[test]
    fn order_is_frequency_then_lexicographic() {
        let v = Vocabulary::build(["b a c", "c b", "c"]);
        assert_eq!(&v.tokens()[4..], ["c", "b", "a"]);
        let w = Vocabulary::build(["z y x"]);
        assert_eq!(&w.tokens()[4..], ["x", "y", "z"]);
    }

    #[test]
    fn truncation() {
        let v = Vocabulary::build(["a b c d"]);
        assert_eq!(v.tokenize("a b c d", 2).len(), 2);
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(["there is one car, one cone to the back left."]);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("<pad>\n<bos>\n").is_err());
        assert!(Vocabulary::from_text("<pad>\n<bos>\n<eos>\n<unk>\na\na\n").is_err());
    }
}
