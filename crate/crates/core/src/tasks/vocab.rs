// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed word-level vocabulary shared by every template family.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;

/// Singular/plural noun pairs.
pub const NOUNS: [(&str, &str); 20] = [
    ("key", "keys"),
    ("cabinet", "cabinets"),
    ("dog", "dogs"),
    ("cat", "cats"),
    ("student", "students"),
    ("teacher", "teachers"),
    ("author", "authors"),
    ("senator", "senators"),
    ("boy", "boys"),
    ("girl", "girls"),
    ("book", "books"),
    ("box", "boxes"),
    ("painting", "paintings"),
    ("farmer", "farmers"),
    ("doctor", "doctors"),
    ("car", "cars"),
    ("house", "houses"),
    ("tree", "trees"),
    ("pilot", "pilots"),
    ("guard", "guards"),
];

/// Singular/plural verb inflections.
pub const VERBS: [(&str, &str); 3] = [("is", "are"), ("was", "were"), ("has", "have")];
pub const ADJECTIVES: [&str; 5] = ["old", "red", "small", "new", "happy"];
pub const PARTICIPLES: [&str; 3] = ["arrived", "left", "won"];
/// Male/female names, paired by index.
pub const NAMES: [(&str, &str); 5] = [
    ("john", "jane"),
    ("tom", "mary"),
    ("bill", "anna"),
    ("peter", "lisa"),
    ("james", "emma"),
];
pub const GENDER_VERBS: [&str; 4] = ["walked", "smiled", "laughed", "waited"];
pub const PREPOSITIONS: [&str; 10] = ["of", "in", "with", "by", "to", "on", "near", "behind", "under", "at"];
pub const BARE_VERBS: [&str; 3] = ["leave", "run", "sing"];
const OTHER: [&str; 22] = [
    "because", "he", "she", "tired", "the", "a", "no", "any", "some", "seen", "what", "did", "saw",
    "i", "know", "that", "who", "yesterday", ".", "was", "were", "walked",
];

/// Bidirectional word/id table. Ids 0..4 are `<pad> <bos> <eos> [MASK]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self { words: Vec::new(), ids: HashMap::new() };
        for w in ["<pad>", "<bos>", "<eos>", "[MASK]"] {
            v.insert(w);
        }
        for w in words {
            v.insert(&w.into());
        }
        v
    }

    fn insert(&mut self, w: &str) {
        if !self.ids.contains_key(w) {
            self.ids.insert(w.to_string(), self.words.len());
            self.words.push(w.to_string());
        }
    }

    /// The fixed template vocabulary.
    pub fn standard() -> Self {
        let mut words: Vec<&str> = Vec::new();
        for (s, p) in NOUNS {
            words.extend([s, p]);
        }
        for (s, p) in VERBS {
            words.extend([s, p]);
        }
        words.extend(ADJECTIVES);
        words.extend(PARTICIPLES);
        for (m, f) in NAMES {
            words.extend([m, f]);
        }
        words.extend(GENDER_VERBS);
        words.extend(PREPOSITIONS);
        words.extend(BARE_VERBS);
        words.extend(OTHER);
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::Input(format!("word `{word}` is not in the vocabulary")))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("token id {id} out of range")))
    }

    /// Whitespace tokenization.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Like [`Vocab::encode`] but drops a trailing `[MASK]`.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = self.encode(text)?;
        if ids.last() == Some(&MASK) {
            ids.pop();
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_and_roundtrip() {
        let v = Vocab::standard();
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<bos>").unwrap(), BOS);
        assert_eq!(v.id("<eos>").unwrap(), EOS);
        assert_eq!(v.id("[MASK]").unwrap(), MASK);
        assert!(v.len() > 100 && v.len() <= 130, "{}", v.len());
        let ids = v.encode("the keys to the cabinet are old .").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "the keys to the cabinet are old .");
        assert_eq!(v.encode_prompt("the keys [MASK]").unwrap().len(), 2);
        assert!(matches!(v.encode("the zebra"), Err(Error::Input(_))));
    }
}
