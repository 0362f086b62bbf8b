//! The fixed hand-built token vocabulary shared by the data generator and
//! the model.

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

pub const SYS: &str = "<sys>";
pub const IMG_START: &str = "<img_start>";
pub const IMG: &str = "<img>";
pub const IMG_END: &str = "<img_end>";
pub const ASSISTANT: &str = "<assistant>";

pub const COLOR_NAMES: [&str; 10] = [
    "red", "blue", "green", "yellow", "orange", "purple", "pink", "cyan", "brown", "gray",
];

pub const SHAPE_NAMES: [&str; 8] = [
    "triangle", "square", "pentagon", "hexagon", "octagon", "circle", "star", "diamond",
];

pub const NUMBER_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

#[cfg(test)]
const TEMPLATE_WORDS: [&str; 22] = [
    "what", "is", "the", "number", "of", "dots", "colorful", "polygons", "in", "image", "?",
    "answer", "with", "only", "there", "are", ",", "or", "color", "shape", "name", "object",
];

const TOKENS: [&str; 68] = [
    SYS, IMG_START, IMG, IMG_END, ASSISTANT,
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "yes", "no",
    "red", "blue", "green", "yellow", "orange", "purple", "pink", "cyan", "brown", "gray", "black",
    "triangle", "square", "pentagon", "hexagon", "octagon", "circle", "star", "diamond",
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "what", "is", "the", "number", "of", "dots", "colorful", "polygons", "in", "image", "?",
    "answer", "with", "only", "there", "are", ",", "or", "color", "shape", "name", "object",
];

/// Largest count that has a single answer token.
pub const MAX_DIGIT: usize = 9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    pub fn len(&self) -> usize {
        TOKENS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        TOKENS.iter().position(|t| *t == token)
    }

    /// Like [`Vocab::id`] for tokens that are known to exist.
    pub fn expect(&self, token: &str) -> TokenId {
        self.id(token)
            .unwrap_or_else(|| panic!("token {token:?} is not in the vocabulary"))
    }

    pub fn token(&self, id: TokenId) -> &'static str {
        TOKENS[id]
    }

    pub fn tokens(&self) -> &'static [&'static str] {
        &TOKENS
    }

    pub fn digit(&self, n: usize) -> Option<TokenId> {
        (n <= MAX_DIGIT).then(|| 5 + n)
    }

    /// Inverse of [`Vocab::digit`].
    pub fn digit_value(&self, id: TokenId) -> Option<usize> {
        (5..=5 + MAX_DIGIT).contains(&id).then(|| id - 5)
    }

    pub fn yes(&self) -> TokenId {
        15
    }

    pub fn no(&self) -> TokenId {
        16
    }

    /// Whitespace tokenizer over the fixed vocabulary.
    pub fn encode(&self, text: &str) -> Option<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Named token groups used by the head scoring metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicons {
    pub counting: Vec<String>,
    pub visual: Vec<String>,
    pub awareness: Vec<String>,
}

impl Default for Lexicons {
    fn default() -> Self {
        let digits = (0..=MAX_DIGIT).map(|d| d.to_string());
        let words = NUMBER_WORDS.iter().map(|w| w.to_string());
        let visual = COLOR_NAMES
            .iter()
            .chain(std::iter::once(&"black"))
            .chain(SHAPE_NAMES.iter())
            .map(|s| s.to_string());
        Self {
            counting: digits.chain(words).collect(),
            visual: visual.collect(),
            awareness: vec!["yes".into(), "no".into()],
        }
    }
}

/// Token-id form of [`Lexicons`], as membership masks over the vocabulary.
#[derive(Debug, Clone)]
pub struct LexiconMasks {
    pub counting: Vec<bool>,
    pub visual: Vec<bool>,
    pub awareness: Vec<bool>,
}

impl Lexicons {
    pub fn resolve(&self, vocab: &Vocab) -> crate::Result<LexiconMasks> {
        let mask = |words: &[String]| -> crate::Result<Vec<bool>> {
            let mut m = vec![false; vocab.len()];
            for w in words {
                let id = vocab
                    .id(w)
                    .ok_or_else(|| crate::Error::Config(format!("lexicon token {w:?} not in vocabulary")))?;
                m[id] = true;
            }
            Ok(m)
        };
        let masks = LexiconMasks {
            counting: mask(&self.counting)?,
            visual: mask(&self.visual)?,
            awareness: mask(&self.awareness)?,
        };
        let overlap = masks
            .counting
            .iter()
            .zip(&masks.visual)
            .any(|(a, b)| *a && *b);
        if overlap {
            return Err(crate::Error::Config(
                "counting and visual lexicons must be disjoint".into(),
            ));
        }
        Ok(masks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_are_unique() {
        let mut seen = std::collections::HashSet::new();
        for t in TOKENS {
            assert!(seen.insert(t), "duplicate token {t}");
        }
        for w in TEMPLATE_WORDS {
            assert!(Vocab.id(w).is_some());
        }
    }

    #[test]
    fn digits_round_trip() {
        let v = Vocab;
        for n in 0..=MAX_DIGIT {
            let id = v.digit(n).unwrap();
            assert_eq!(v.token(id), n.to_string());
            assert_eq!(v.digit_value(id), Some(n));
        }
        assert_eq!(v.digit(10), None);
        assert_eq!(v.token(v.yes()), "yes");
        assert_eq!(v.token(v.no()), "no");
    }

    #[test]
    fn default_lexicons_are_disjoint() {
        Lexicons::default().resolve(&Vocab).unwrap();
    }
}
