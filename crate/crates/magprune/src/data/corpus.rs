//! Packing plain text (one document per line) into fixed-length MLM
//! training sequences.

use crate::data::vocab::{Vocab, CLS_ID, PAD_ID, SEP_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct MlmCorpus {
    /// Fixed-length sequences: [CLS] ids... [SEP] with PAD fill.
    pub train: Vec<Vec<usize>>,
    pub held_out: Vec<Vec<usize>>,
    pub seq_len: usize,
}

impl MlmCorpus {
    pub fn total_sequences(&self) -> usize {
        self.train.len() + self.held_out.len()
    }
}

/// Concatenate document token ids and chunk them into sequences of
/// exactly `seq_len` ids. Every 20th sequence goes to the held-out slice.
pub fn pack_mlm_corpus(text: &str, vocab: &Vocab, seq_len: usize) -> MlmCorpus {
    assert!(seq_len >= 4, "seq_len too small for [CLS]/[SEP] framing");
    let mut ids = Vec::new();
    for line in text.lines() {
        for word in line.split_whitespace() {
            ids.push(vocab.id(word));
        }
    }
    let body = seq_len - 2;
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for (i, chunk) in ids.chunks(body).enumerate() {
        let mut seq = Vec::with_capacity(seq_len);
        seq.push(CLS_ID);
        seq.extend_from_slice(chunk);
        seq.push(SEP_ID);
        seq.resize(seq_len, PAD_ID);
        if i % 20 == 19 {
            held_out.push(seq);
        } else {
            train.push(seq);
        }
    }
    MlmCorpus {
        train,
        held_out,
        seq_len,
    }
}

/// Pad mask for a packed sequence: true at every non-PAD position.
pub fn pad_mask_of(seq: &[usize]) -> Vec<bool> {
    seq.iter().map(|&id| id != PAD_ID).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packs_fixed_length_sequences() {
        let v = Vocab::build("a b c d e f g", 20).unwrap();
        let text = "a b c d e f g\na b c d e f g\n";
        let corpus = pack_mlm_corpus(text, &v, 8);
        assert!(corpus.total_sequences() >= 2);
        for seq in corpus.train.iter().chain(&corpus.held_out) {
            assert_eq!(seq.len(), 8);
            assert_eq!(seq[0], CLS_ID);
            assert!(seq.contains(&SEP_ID));
        }
    }

    #[test]
    fn held_out_is_every_twentieth() {
        let v = Vocab::build("w", 6).unwrap();
        let text = "w ".repeat(6 * 40);
        let corpus = pack_mlm_corpus(&text, &v, 8);
        assert_eq!(corpus.total_sequences(), 40);
        assert_eq!(corpus.held_out.len(), 2);
    }

    #[test]
    fn pad_mask_marks_fill() {
        let v = Vocab::build("a", 6).unwrap();
        let corpus = pack_mlm_corpus("a a a", &v, 8);
        let seq = &corpus.train[0];
        let mask = pad_mask_of(seq);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 5); // CLS a a a SEP
    }
}
