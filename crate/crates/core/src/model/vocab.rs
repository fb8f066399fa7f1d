//! Character-level vocabulary with five special tokens.

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const IMG: usize = 3;
pub const SEP: usize = 4;
pub const SPECIALS: [&str; 5] = ["<bos>", "<eos>", "<pad>", "<img>", "<sep>"];

const PUNCTUATION: &str = ".,:()=+-/?!";

/// Maps printable characters to ids after the specials.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    chars: Vec<char>,
    lookup: [Option<u16>; 128],
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let chars: Vec<char> = ['\n', ' ']
            .into_iter()
            .chain('A'..='Z')
            .chain('a'..='z')
            .chain('0'..='9')
            .chain(PUNCTUATION.chars())
            .collect();
        let mut lookup = [None; 128];
        for (i, &c) in chars.iter().enumerate() {
            lookup[c as usize] = Some((SPECIALS.len() + i) as u16);
        }
        Vocabulary { chars, lookup }
    }

    pub fn size(&self) -> usize {
        SPECIALS.len() + self.chars.len()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.lookup.get(c as usize).copied().flatten().map(usize::from)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|c| self.id(c).ok_or(Error::Tokenize(c))).collect()
    }

    /// Specials decode to nothing; out-of-range ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| i.checked_sub(SPECIALS.len()).and_then(|j| self.chars.get(j)))
            .collect()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.chars
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn size_and_specials() {
        let v = Vocabulary::new();
        assert_eq!(v.size(), 80);
        assert_eq!(v.encode("A").unwrap(), vec![7]);
        assert_eq!(v.decode(&[BOS, 7, EOS]), "A");
    }

    #[test]
    fn unknown_character_is_named() {
        match Vocabulary::new().encode("angle θ") {
            Err(Error::Tokenize(c)) => assert_eq!(c, 'θ'),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn round_trip(idx in proptest::collection::vec(0usize..75, 0..60)) {
            let v = Vocabulary::new();
            let s: String = idx.iter().map(|&i| v.alphabet()[i]).collect();
            prop_assert_eq!(v.decode(&v.encode(&s).unwrap()), s);
        }
    }
}
