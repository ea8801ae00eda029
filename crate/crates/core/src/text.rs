//! Character-level front end.
//!
//! The vocabulary is the file `assets/vocab.txt` (version 1): one entry per
//! line, index = line number. Line 0 is `<pad>`, line 1 is `<unk>`, lines
//! 2..97 are the printable ASCII characters 0x20..=0x7E in order (line 2 is a
//! single space).

use std::collections::HashMap;
use std::sync::OnceLock;

pub const VOCAB_FILE: &str = include_str!("../assets/vocab.txt");
pub const VOCAB_VERSION: u32 = 1;
pub const VOCAB_SIZE: usize = 97;
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
/// Emitted by [`detokenize`] for unknown characters.
pub const REPLACEMENT: char = '\u{FFFD}';

#[derive(Debug)]
pub struct Vocab {
    chars: Vec<Option<char>>,
    index: HashMap<char, u32>,
}

impl Vocab {
    pub fn parse(src: &str) -> Self {
        let mut chars = Vec::new();
        let mut index = HashMap::new();
        for (i, line) in src.lines().enumerate() {
            let entry = match line {
                "<pad>" | "<unk>" => None,
                l => {
                    let mut it = l.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => Some(c),
                        _ => None,
                    }
                }
            };
            if let Some(c) = entry {
                index.insert(c, i as u32);
            }
            chars.push(entry);
        }
        Self { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(UNK_ID)
    }
}

pub fn vocab() -> &'static Vocab {
    static VOCAB: OnceLock<Vocab> = OnceLock::new();
    VOCAB.get_or_init(|| Vocab::parse(VOCAB_FILE))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharacterSequence {
    pub ids: Vec<u32>,
}

impl CharacterSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(text: &str) -> CharacterSequence {
    let v = vocab();
    CharacterSequence {
        ids: text.chars().map(|c| v.id(c)).collect(),
    }
}

/// Inverse of [`tokenize`]; UNK becomes U+FFFD and PAD is dropped.
pub fn detokenize(seq: &CharacterSequence) -> String {
    let v = vocab();
    seq.ids
        .iter()
        .filter(|&&id| id != PAD_ID)
        .map(|&id| match v.chars.get(id as usize) {
            Some(Some(c)) => *c,
            _ => REPLACEMENT,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_file_layout() {
        let v = vocab();
        assert_eq!(v.len(), VOCAB_SIZE);
        assert_eq!(v.id(' '), 2);
        assert_eq!(v.id('~'), 96);
        assert_eq!(v.id('\''), 2 + (b'\'' - 0x20) as u32);
        assert_eq!(v.id('-'), 2 + (b'-' - 0x20) as u32);
    }

    #[test]
    fn abc_round_trip() {
        let seq = tokenize("abc");
        let v = vocab();
        assert_eq!(seq.ids, vec![v.id('a'), v.id('b'), v.id('c')]);
        assert_eq!(detokenize(&seq), "abc");
    }

    #[test]
    fn empty_string() {
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize(&tokenize("")), "");
    }

    #[test]
    fn out_of_vocab_maps_to_unk() {
        let seq = tokenize("a\u{00e9}b");
        assert_eq!(seq.ids[1], UNK_ID);
        assert_eq!(detokenize(&seq), "a\u{FFFD}b");
    }

    proptest! {
        #[test]
        fn printable_ascii_round_trips(s in "[ -~]{0,64}") {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }
    }
}
