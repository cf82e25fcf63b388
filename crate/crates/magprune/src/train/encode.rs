//! Encoding task examples into model input sequences and targets.

use std::collections::BTreeMap;

use crate::data::vocab::{Vocab, CLS_ID, PAD_ID, SEP_ID};
use crate::data::{ErExample, QaExample, ReExample};
use crate::train::mlm::IGNORE_INDEX;

/// One encoded sequence with its training target.
#[derive(Debug, Clone)]
pub struct EncodedSeq {
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
    pub target: SeqTarget,
    /// For span QA: sequence position of each context word with its byte
    /// range in the context string.
    pub ctx_spans: Vec<(usize, (usize, usize))>,
}

#[derive(Debug, Clone)]
pub enum SeqTarget {
    /// Per-position labels, `IGNORE_INDEX` where untagged.
    Token(Vec<usize>),
    /// Single class for the sequence.
    Seq(usize),
    /// Start/end positions; `IGNORE_INDEX` when the answer does not fit.
    Span { start: usize, end: usize },
}

/// Byte ranges of whitespace-delimited words.
pub fn word_offsets(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = None;
    for (i, &b) in bytes.iter().enumerate() {
        if b.is_ascii_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, bytes.len()));
    }
    out
}

pub fn encode_er(
    ex: &ErExample,
    vocab: &Vocab,
    tag_to_id: &BTreeMap<String, usize>,
    max_seq_len: usize,
) -> EncodedSeq {
    let ids = vocab.tokenize_words(&ex.tokens, max_seq_len);
    let body = ids.len() - 2;
    let mut labels = vec![IGNORE_INDEX; ids.len()];
    for i in 0..body {
        labels[1 + i] = tag_to_id[&ex.tags[i]];
    }
    let pad = vec![true; ids.len()];
    EncodedSeq {
        ids,
        pad,
        target: SeqTarget::Token(labels),
        ctx_spans: Vec::new(),
    }
}

pub fn encode_re(
    ex: &ReExample,
    vocab: &Vocab,
    label_to_id: &BTreeMap<String, usize>,
    max_seq_len: usize,
) -> EncodedSeq {
    let ids = vocab.tokenize(&ex.text, max_seq_len);
    let pad = vec![true; ids.len()];
    EncodedSeq {
        ids,
        pad,
        target: SeqTarget::Seq(label_to_id[&ex.label]),
        ctx_spans: Vec::new(),
    }
}

/// `[CLS] question [SEP] context [SEP]`; the question is kept whole and
/// the context truncated to fit.
fn qa_frame(question: &str, context: &str, vocab: &Vocab, max_seq_len: usize) -> (Vec<usize>, Vec<(usize, (usize, usize))>) {
    let q_words: Vec<&str> = question.split_whitespace().collect();
    let ctx_offsets = word_offsets(context);
    let mut ids = vec![CLS_ID];
    for w in &q_words {
        ids.push(vocab.id(w));
    }
    ids.push(SEP_ID);
    let mut ctx_spans = Vec::new();
    let budget = max_seq_len.saturating_sub(1); // room for final [SEP]
    for &(s, e) in &ctx_offsets {
        if ids.len() >= budget {
            break;
        }
        ctx_spans.push((ids.len(), (s, e)));
        ids.push(vocab.id(&context[s..e]));
    }
    ids.push(SEP_ID);
    (ids, ctx_spans)
}

pub fn encode_qa_label(
    context: &str,
    question: &str,
    label_id: usize,
    vocab: &Vocab,
    max_seq_len: usize,
) -> EncodedSeq {
    let (ids, _) = qa_frame(question, context, vocab, max_seq_len);
    let pad = vec![true; ids.len()];
    EncodedSeq {
        ids,
        pad,
        target: SeqTarget::Seq(label_id),
        ctx_spans: Vec::new(),
    }
}

pub fn encode_qa_span(ex: &QaExample, vocab: &Vocab, max_seq_len: usize) -> EncodedSeq {
    let QaExample::Span {
        context,
        question,
        answers,
    } = ex
    else {
        panic!("encode_qa_span on a label-style example");
    };
    let (ids, ctx_spans) = qa_frame(question, context, vocab, max_seq_len);
    let pad = vec![true; ids.len()];
    // Map the first gold answer to sequence positions, when it fits.
    let (mut start, mut end) = (IGNORE_INDEX, IGNORE_INDEX);
    if let Some(ans) = answers.first() {
        let a_start = ans.start;
        let a_end = ans.start + ans.text.len();
        let covered: Vec<usize> = ctx_spans
            .iter()
            .filter(|(_, (s, e))| *s < a_end && a_start < *e)
            .map(|(pos, _)| *pos)
            .collect();
        if let (Some(&first), Some(&last)) = (covered.first(), covered.last()) {
            start = first;
            end = last;
        }
    }
    EncodedSeq {
        ids,
        pad,
        target: SeqTarget::Span { start, end },
        ctx_spans,
    }
}

/// Pad a batch of encoded sequences in place to a common length.
pub fn pad_to_common_length(batch: &mut [EncodedSeq]) -> usize {
    let max_len = batch.iter().map(|e| e.ids.len()).max().unwrap_or(0);
    for e in batch.iter_mut() {
        e.ids.resize(max_len, PAD_ID);
        e.pad.resize(max_len, false);
        if let SeqTarget::Token(labels) = &mut e.target {
            labels.resize(max_len, IGNORE_INDEX);
        }
    }
    max_len
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SpanAnswer;

    fn vocab() -> Vocab {
        Vocab::build("alpha beta gamma delta epsilon what boosts", 30).unwrap()
    }

    #[test]
    fn word_offsets_track_bytes() {
        let offs = word_offsets(" alpha  beta ");
        assert_eq!(offs, vec![(1, 6), (8, 12)]);
    }

    #[test]
    fn er_labels_align_with_tokens() {
        let v = vocab();
        let ex = ErExample {
            tokens: vec!["alpha".into(), "beta".into()],
            tags: vec!["B-AGT".into(), "O".into()],
        };
        let mut map = BTreeMap::new();
        map.insert("B-AGT".to_string(), 0usize);
        map.insert("O".to_string(), 1usize);
        let enc = encode_er(&ex, &v, &map, 16);
        assert_eq!(enc.ids.len(), 4);
        match enc.target {
            SeqTarget::Token(labels) => {
                assert_eq!(labels, vec![IGNORE_INDEX, 0, 1, IGNORE_INDEX]);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn span_encoding_finds_answer_positions() {
        let v = vocab();
        let context = "alpha boosts beta . gamma delta".to_string();
        let ex = QaExample::Span {
            question: "what boosts beta".into(),
            answers: vec![SpanAnswer {
                text: "alpha".into(),
                start: 0,
            }],
            context,
        };
        let enc = encode_qa_span(&ex, &v, 32);
        // [CLS] what boosts beta [SEP] -> context starts at position 5.
        match enc.target {
            SeqTarget::Span { start, end } => {
                assert_eq!(start, 5);
                assert_eq!(end, 5);
            }
            _ => panic!(),
        }
        assert_eq!(enc.ctx_spans[0], (5, (0, 5)));
    }

    #[test]
    fn span_that_does_not_fit_is_marked_ignore() {
        let v = vocab();
        let context = "alpha ".repeat(60) + "beta";
        let start = context.len() - 4;
        let ex = QaExample::Span {
            question: "what".into(),
            answers: vec![SpanAnswer {
                text: "beta".into(),
                start,
            }],
            context,
        };
        let enc = encode_qa_span(&ex, &v, 16);
        match enc.target {
            SeqTarget::Span { start, end } => {
                assert_eq!(start, IGNORE_INDEX);
                assert_eq!(end, IGNORE_INDEX);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn padding_extends_ids_and_masks() {
        let v = vocab();
        let mut batch = vec![
            encode_re(
                &ReExample {
                    text: "alpha beta gamma".into(),
                    label: "x".into(),
                },
                &v,
                &BTreeMap::from([("x".to_string(), 0usize)]),
                16,
            ),
            encode_re(
                &ReExample {
                    text: "alpha".into(),
                    label: "x".into(),
                },
                &v,
                &BTreeMap::from([("x".to_string(), 0usize)]),
                16,
            ),
        ];
        let len = pad_to_common_length(&mut batch);
        assert_eq!(len, 5);
        assert_eq!(batch[1].ids.len(), 5);
        assert_eq!(batch[1].pad, vec![true, true, true, false, false]);
    }
}
