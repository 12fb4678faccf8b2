//! Word-level vocabulary and per-step decoding outcomes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// One decoding step: a vocabulary word, or a copy of copyable object
/// `object` in inflected form `form`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenEvent {
    Word(u32),
    Copy { object: usize, form: usize },
}

impl TokenEvent {
    pub fn is_copy(&self) -> bool {
        matches!(self, TokenEvent::Copy { .. })
    }
}

/// Closed word list. Ids 0 and 1 are the reserved begin/end markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let mut v = Self { words: Vec::new(), index: HashMap::new() };
        v.insert(BOS);
        v.insert(EOS);
        for w in words {
            v.insert(&w);
        }
        v
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Builds from caption token streams plus extra words (label forms),
    /// ordering words by first appearance.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, extra: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::from(Vec::new());
        for c in captions {
            for w in tokenize(c) {
                v.insert(&w);
            }
        }
        for w in extra {
            v.insert(w);
        }
        v
    }

    fn insert(&mut self, w: &str) -> u32 {
        if let Some(&id) = self.index.get(w) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(w.to_string());
        self.index.insert(w.to_string(), id);
        id
    }

    pub fn id(&self, w: &str) -> Option<u32> {
        self.index.get(w).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn bos(&self) -> u32 {
        0
    }

    pub fn eos(&self) -> u32 {
        1
    }
}

/// Lowercases and splits on whitespace, trimming surrounding punctuation.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_order() {
        let v = Vocabulary::build(["A dog runs.", "a cat"], ["dogs"]);
        assert_eq!(v.word(v.bos()), BOS);
        assert_eq!(v.word(v.eos()), EOS);
        assert_eq!(&v.words()[2..], &["a", "dog", "runs", "cat", "dogs"]);
        assert_eq!(v.id("cat"), Some(5));
        assert_eq!(v.id("bird"), None);
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build(["two hamburgers on a table"], ["hamburger"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(tokenize("  Two Hamburgers, on a table! "), vec!["two", "hamburgers", "on", "a", "table"]);
    }
}
