//! Closed word vocabulary over the instruction grammar.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::simworld::grammar::{FUNCTION_WORDS, PERIOD};
use crate::simworld::{Landmark, CATEGORY_NAMES, COLOR_NAMES};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const END: usize = 2;
pub const SEP: usize = 3;
/// Control token that switches the decoder to landmark drafting.
pub const LANDMARK_MODE: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<end>", "<sep>", "<lm>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Specials, then ".", function words, colors and categories.
    pub fn new() -> Self {
        let words: Vec<String> = SPECIALS
            .iter()
            .chain(std::iter::once(&PERIOD))
            .chain(FUNCTION_WORDS.iter())
            .chain(COLOR_NAMES.iter())
            .chain(CATEGORY_NAMES.iter())
            .map(|s| s.to_string())
            .collect();
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.id(w.as_ref())
                    .ok_or_else(|| Error::Invalid(format!("word '{}' is not in the vocabulary", w.as_ref())))
            })
            .collect()
    }

    /// Words of non-special ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !self.is_special(i))
            .map(|&i| self.words[i].clone())
            .collect()
    }

    /// Ids allowed while drafting landmarks: colors, categories, `<sep>`
    /// and `<end>`.
    pub fn landmark_ids(&self) -> Vec<usize> {
        let mut v = vec![SEP, END];
        v.extend(COLOR_NAMES.iter().chain(CATEGORY_NAMES.iter()).map(|w| self.ids[*w]));
        v
    }

    /// `c1 k1 <sep> c2 k2 ...` without a trailing separator.
    pub fn draft_ids(&self, landmarks: &[Landmark]) -> Vec<usize> {
        let mut v = Vec::new();
        for (i, l) in landmarks.iter().enumerate() {
            if i > 0 {
                v.push(SEP);
            }
            v.extend(l.words().iter().map(|w| self.ids[*w]));
        }
        v
    }

    /// Landmarks of a draft; malformed phrases are skipped.
    pub fn parse_draft(&self, ids: &[usize]) -> Vec<Landmark> {
        ids.split(|&i| i == SEP || i == END)
            .filter_map(|chunk| match chunk {
                [c, k] => Landmark::parse(&self.words[*c], &self.words[*k]),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_round_trip() {
        let v = Vocabulary::new();
        assert_eq!(v.len(), 5 + 1 + 11 + 4 + 8);
        assert!(v.len() <= 128);
        for i in 0..v.len() {
            assert_eq!(v.id(v.word(i)), Some(i));
        }
        let words = ["walk", "forward", ".", "stop", "at", "the", "red", "sofa", "."];
        let ids = v.encode(&words).unwrap();
        assert_eq!(v.decode(&ids), words);
        assert!(v.encode(&["fly"]).is_err());
    }

    #[test]
    fn drafts_round_trip() {
        let v = Vocabulary::new();
        let lms = [Landmark { color: 0, category: 2 }, Landmark { color: 3, category: 7 }];
        let ids = v.draft_ids(&lms);
        assert_eq!(ids[2], SEP);
        assert_eq!(v.decode(&ids), ["red", "sofa", "yellow", "lamp"]);
        assert_eq!(v.parse_draft(&ids), lms);
        assert!(v.draft_ids(&[]).is_empty());
    }
}
