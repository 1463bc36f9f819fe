use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const START_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MASK_TOKEN: &str = "[MASK]";

/// Reserved tokens occupy ids `0..RESERVED.len()` in this order.
pub const RESERVED: [&str; 5] = [PAD_TOKEN, UNK_TOKEN, START_TOKEN, SEP_TOKEN, MASK_TOKEN];

/// Word-level vocabulary with dense ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Frequency-ranked word vocabulary (ties broken lexicographically),
    /// capped at `max_size` entries including the reserved tokens.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            bail!(Argument, "cannot build a vocabulary from an empty corpus");
        }
        if max_size < RESERVED.len() {
            bail!(
                Argument,
                "max_size {max_size} is smaller than the {} reserved tokens",
                RESERVED.len()
            );
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for word in split_words(text.as_ref()) {
                if !RESERVED.contains(&word.as_str()) {
                    *counts.entry(word).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .take(max_size)
            .collect();
        Ok(Self::from(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn unk_id(&self) -> u32 {
        1
    }
    pub fn start_id(&self) -> u32 {
        2
    }
    pub fn sep_id(&self) -> u32 {
        3
    }
    pub fn mask_id(&self) -> u32 {
        4
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        (id as usize) < RESERVED.len()
    }

    /// Ids that may be drawn as random replacement tokens.
    pub fn regular_ids(&self) -> std::ops::Range<u32> {
        RESERVED.len() as u32..self.tokens.len() as u32
    }

    /// Whitespace split, lowercase, unknown words to the unknown id.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let ids = split_words(text)
            .map(|w| self.id(&w).unwrap_or(self.unk_id()))
            .collect();
        TokenSequence {
            ids,
            start_id: self.start_id(),
            sep_id: self.sep_id(),
        }
    }

    /// Space-joined tokens for the given ids.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Token ids of one text, without the start and boundary tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub start_id: u32,
    pub sep_id: u32,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>, vocab: &Vocabulary) -> Self {
        Self {
            ids,
            start_id: vocab.start_id(),
            sep_id: vocab.sep_id(),
        }
    }

    /// Number of content tokens (M).
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `[start, ids..., boundary]`, length M + 2.
    pub fn with_specials(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.ids.len() + 2);
        v.push(self.start_id);
        v.extend_from_slice(&self.ids);
        v.push(self.sep_id);
        v
    }

    /// Keeps at most `max_tokens` content tokens; the boundary is re-added by
    /// [`with_specials`](Self::with_specials).
    pub fn truncated(&self, max_tokens: usize) -> Self {
        let mut s = self.clone();
        s.ids.truncate(max_tokens);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_corpus_vocab() {
        let v = Vocabulary::build(&["a b", "a c"], 8).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(&v.tokens()[..5], &RESERVED.map(String::from));
        assert_eq!(&v.tokens()[5..], ["a", "b", "c"]);
    }

    #[test]
    fn cap_and_errors() {
        assert_eq!(
            Vocabulary::build(&["a b", "a c"], 6).unwrap().tokens()[5],
            "a"
        );
        assert!(Vocabulary::build::<&str>(&[], 8).is_err());
        assert!(Vocabulary::build(&["a"], 4).is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::build(&["opacity in left lung", "Opacity"], 32).unwrap();
        let empty = v.tokenize("");
        assert_eq!(empty.with_specials(), vec![v.start_id(), v.sep_id()]);
        let s = v.tokenize("opacity in LEFT lung");
        let expected: Vec<u32> = ["opacity", "in", "left", "lung"]
            .iter()
            .map(|w| v.id(w).unwrap())
            .collect();
        assert_eq!(s.ids, expected);
        assert_eq!(s.with_specials().len(), 6);
        let unk = v.tokenize("zzzz").with_specials();
        assert_eq!(unk, vec![v.start_id(), v.unk_id(), v.sep_id()]);
    }

    #[test]
    fn tokenize_is_idempotent_through_detokenize() {
        let v = Vocabulary::build(&["the cat sat", "on the mat"], 32).unwrap();
        let s = v.tokenize("the mat sat on a cat");
        let again = v.tokenize(&v.detokenize(&s.ids));
        assert_eq!(s, again);
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let v = Vocabulary::build(&["x y z"], 16).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("y"), v.id("y"));
    }
}
