//! Character vocabulary with `<PAD>`, `<EOQ>` and `<UNK>` specials.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

pub const PAD: usize = 0;
/// End-of-query. Also fed as the first input of every sequence.
pub const EOQ: usize = 1;
pub const UNK: usize = 2;
pub const NUM_SPECIALS: usize = 3;

pub const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<PAD>", "<EOQ>", "<UNK>"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("character {0:?} is not in the vocabulary")]
    OutOfVocabulary(char),
    #[error("vocabulary line {line}: expected a single character or special, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("vocabulary must start with {:?}", SPECIAL_NAMES)]
    MissingSpecials,
    #[error("duplicate vocabulary entry {0:?}")]
    Duplicate(char),
    #[error("character {0:?} cannot be stored in a line-oriented vocabulary file")]
    Unwritable(char),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    /// Builds a vocabulary from every character in `texts`, in code point
    /// order after the specials.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::from_chars(set.into_iter().collect()).expect("set has no duplicates")
    }

    pub fn from_chars(chars: Vec<char>) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i + NUM_SPECIALS).is_some() {
                return Err(VocabError::Duplicate(c));
            }
        }
        Ok(Self { chars, index })
    }

    pub fn len(&self) -> usize {
        self.chars.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(NUM_SPECIALS).and_then(|i| self.chars.get(i).copied())
    }

    /// Strict encoding; fails on the first unknown character.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        text.chars()
            .map(|c| self.id(c).ok_or(VocabError::OutOfVocabulary(c)))
            .collect()
    }

    /// Encoding that maps unknown characters to `<UNK>`.
    pub fn encode_lossy(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c).unwrap_or(UNK)).collect()
    }

    /// Query tokens followed by `<EOQ>`, unknown characters mapped to `<UNK>`.
    pub fn encode_query(&self, text: &str) -> Vec<usize> {
        let mut ids = self.encode_lossy(text);
        ids.push(EOQ);
        ids
    }

    /// Decodes character ids; specials are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.char_of(i)).collect()
    }

    /// Ids the decoder may emit: every real character plus `<EOQ>`.
    pub fn generation_ids(&self) -> Vec<usize> {
        std::iter::once(EOQ).chain(NUM_SPECIALS..self.len()).collect()
    }

    /// One entry per id, specials first.
    pub fn symbols(&self) -> Vec<String> {
        SPECIAL_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(self.chars.iter().map(|c| c.to_string()))
            .collect()
    }

    pub fn from_symbols<S: AsRef<str>>(symbols: &[S]) -> Result<Self, VocabError> {
        if symbols.len() < NUM_SPECIALS
            || symbols[..NUM_SPECIALS]
                .iter()
                .zip(SPECIAL_NAMES)
                .any(|(a, b)| a.as_ref() != b)
        {
            return Err(VocabError::MissingSpecials);
        }
        let mut chars = Vec::with_capacity(symbols.len() - NUM_SPECIALS);
        for (i, s) in symbols.iter().enumerate().skip(NUM_SPECIALS) {
            let s = s.as_ref();
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(VocabError::BadLine {
                        line: i + 1,
                        text: s.to_string(),
                    })
                }
            }
        }
        Self::from_chars(chars)
    }

    /// Vocabulary file: one symbol per line, line order = id.
    pub fn to_file_string(&self) -> Result<String, VocabError> {
        if let Some(&c) = self.chars.iter().find(|&&c| c == '\n' || c == '\r') {
            return Err(VocabError::Unwritable(c));
        }
        let mut out = String::new();
        for s in self.symbols() {
            out.push_str(&s);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_file_string(text: &str) -> Result<Self, VocabError> {
        let lines: Vec<&str> = text.split('\n').collect();
        let lines = match lines.last() {
            Some(&"") => &lines[..lines.len() - 1],
            _ => &lines[..],
        };
        Self::from_symbols(lines)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let v = Vocab::from_corpus(["ba", "c a"]);
        assert_eq!(v.len(), NUM_SPECIALS + 4);
        assert_eq!(v.symbols()[..3], SPECIAL_NAMES.map(String::from));
        assert_eq!(v.id(' '), Some(3));
        assert_eq!(v.id('a'), Some(4));
        assert_eq!(v.encode_lossy("az"), vec![4, UNK]);
        assert_eq!(v.encode("az"), Err(VocabError::OutOfVocabulary('z')));
        assert_eq!(v.decode(&[EOQ, 5, 4, UNK, EOQ]), "ba");
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::from_corpus(["wine bottle on table"]);
        let text = v.to_file_string().unwrap();
        assert!(text.starts_with("<PAD>\n<EOQ>\n<UNK>\n \n"));
        assert_eq!(Vocab::from_file_string(&text).unwrap(), v);
        assert_eq!(Vocab::from_file_string("a\nb\n"), Err(VocabError::MissingSpecials));
    }

    #[test]
    fn generation_ids_skip_pad_and_unk() {
        let v = Vocab::from_corpus(["ab"]);
        assert_eq!(v.generation_ids(), vec![EOQ, 3, 4]);
    }
}
