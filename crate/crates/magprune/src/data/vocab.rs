//! Whitespace + lowercase vocabulary with reserved special tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;
pub const NUM_RESERVED: usize = 5;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Most-frequent lowercased whitespace tokens up to `cap` total ids
    /// (reserved tokens included in the cap). Frequency ties break
    /// lexicographically.
    pub fn build(corpus: &str, cap: usize) -> Result<Vocab> {
        if corpus.split_whitespace().next().is_none() {
            return Err(Error::InvalidInput("empty corpus".into()));
        }
        if cap <= NUM_RESERVED {
            return Err(Error::InvalidInput(format!(
                "vocab cap {cap} leaves no room beyond the {NUM_RESERVED} reserved tokens"
            )));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for token in corpus.split_whitespace() {
            *counts.entry(token.to_lowercase()).or_default() += 1;
        }
        let mut order: Vec<(&String, &usize)> = counts.iter().collect();
        order.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for (token, _) in order.into_iter().take(cap - NUM_RESERVED) {
            id_to_token.push(token.clone());
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a token, lowercased, falling back to [UNK].
    pub fn id(&self, token: &str) -> usize {
        let lower = token.to_lowercase();
        self.token_to_id.get(&lower).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(&token.to_lowercase())
    }

    /// `[CLS] tokens... [SEP]`, truncated to exactly `max_seq_len` ids
    /// with [SEP] last when the text overflows.
    pub fn tokenize(&self, text: &str, max_seq_len: usize) -> Vec<usize> {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.tokenize_words(&words, max_seq_len)
    }

    pub fn tokenize_words<S: AsRef<str>>(&self, words: &[S], max_seq_len: usize) -> Vec<usize> {
        debug_assert!(max_seq_len >= 2);
        let budget = max_seq_len.saturating_sub(2);
        let mut ids = Vec::with_capacity(words.len().min(budget) + 2);
        ids.push(CLS_ID);
        for w in words.iter().take(budget) {
            ids.push(self.id(w.as_ref()));
        }
        ids.push(SEP_ID);
        ids
    }

    /// Inverse of `tokenize` for in-vocab text: reserved ids are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= NUM_RESERVED)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("vocab serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("vocab file {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_reserves_and_ranks_by_frequency() {
        let v = Vocab::build("a a b", 7).unwrap();
        assert_eq!(v.len(), 7);
        for (i, tok) in RESERVED_TOKENS.iter().enumerate() {
            assert_eq!(v.token(i), *tok);
        }
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
    }

    #[test]
    fn beyond_cap_maps_to_unk() {
        let v = Vocab::build("x x x y y z", 7).unwrap();
        assert_eq!(v.id("x"), 5);
        assert_eq!(v.id("y"), 6);
        assert_eq!(v.id("z"), UNK_ID);
    }

    #[test]
    fn build_is_deterministic_with_lexicographic_ties() {
        let a = Vocab::build("pear apple pear apple plum", 20).unwrap();
        let b = Vocab::build("pear apple pear apple plum", 20).unwrap();
        assert_eq!(a, b);
        // apple and pear tie at 2; apple sorts first.
        assert_eq!(a.id("apple"), 5);
        assert_eq!(a.id("pear"), 6);
        assert_eq!(a.id("plum"), 7);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocab::build("   ", 10).is_err());
    }

    #[test]
    fn tokenize_frames_and_truncates() {
        let v = Vocab::build("a b c d e f g h", 20).unwrap();
        assert_eq!(v.tokenize("", 8), vec![CLS_ID, SEP_ID]);
        assert_eq!(v.tokenize("a b", 8), vec![CLS_ID, v.id("a"), v.id("b"), SEP_ID]);
        let long = v.tokenize("a b c d e f g h", 5);
        assert_eq!(long.len(), 5);
        assert_eq!(long[0], CLS_ID);
        assert_eq!(*long.last().unwrap(), SEP_ID);
    }

    #[test]
    fn tokenize_detokenize_roundtrip_for_in_vocab_text() {
        let v = Vocab::build("red green blue cyan", 20).unwrap();
        let text = "blue red cyan";
        let ids = v.tokenize(text, 16);
        assert_eq!(v.detokenize(&ids), text);
    }

    #[test]
    fn tokenize_is_case_insensitive() {
        let v = Vocab::build("hello world", 10).unwrap();
        assert_eq!(v.id("HELLO"), v.id("hello"));
    }
}
