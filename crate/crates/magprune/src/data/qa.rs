//! JSONL loaders for question answering and relation extraction.
//!
//! QA lines are either span records
//! `{"context": ..., "question": ..., "answers": [{"text": ..., "start": ...}]}`
//! or classification records `{"context": ..., "question": ..., "label": ...}`.
//! A file must not mix the two. RE lines are `{"text": ..., "label": ...}`.

use std::path::Path;

use serde::Deserialize;

use crate::data::{QaExample, ReExample, SpanAnswer};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanAnswerJson {
    text: String,
    start: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QaSpanJson {
    context: String,
    question: String,
    answers: Vec<SpanAnswerJson>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QaLabelJson {
    context: String,
    question: String,
    label: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum QaJson {
    Span(QaSpanJson),
    Label(QaLabelJson),
}

/// Load QA examples; returns the examples and whether they are span
/// style. Span answers are validated against the context; mixed files are
/// rejected.
pub fn load_qa_jsonl(path: &Path) -> Result<(Vec<QaExample>, bool)> {
    let text = std::fs::read_to_string(path)?;
    parse_qa_jsonl(&text, &path.display().to_string())
}

pub fn parse_qa_jsonl(text: &str, origin: &str) -> Result<(Vec<QaExample>, bool)> {
    let mut examples = Vec::new();
    let mut span_style: Option<bool> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: QaJson = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno + 1,
            msg: format!("invalid QA record: {e}"),
        })?;
        let (example, is_span) = match parsed {
            QaJson::Span(rec) => {
                let mut answers = Vec::with_capacity(rec.answers.len());
                for ans in rec.answers {
                    let end = ans.start + ans.text.len();
                    let found = rec.context.get(ans.start..end);
                    if found != Some(ans.text.as_str()) {
                        return Err(Error::Parse {
                            path: origin.to_string(),
                            line: lineno + 1,
                            msg: format!(
                                "answer {:?} not found at offset {} of context",
                                ans.text, ans.start
                            ),
                        });
                    }
                    answers.push(SpanAnswer {
                        text: ans.text,
                        start: ans.start,
                    });
                }
                (
                    QaExample::Span {
                        context: rec.context,
                        question: rec.question,
                        answers,
                    },
                    true,
                )
            }
            QaJson::Label(rec) => (
                QaExample::Label {
                    context: rec.context,
                    question: rec.question,
                    label: rec.label,
                },
                false,
            ),
        };
        match span_style {
            None => span_style = Some(is_span),
            Some(style) if style != is_span => {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: lineno + 1,
                    msg: "file mixes span-style and label-style QA records".into(),
                });
            }
            _ => {}
        }
        examples.push(example);
    }
    Ok((examples, span_style.unwrap_or(false)))
}

pub fn write_qa_jsonl(examples: &[QaExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let line = match ex {
            QaExample::Span {
                context,
                question,
                answers,
            } => serde_json::json!({
                "context": context,
                "question": question,
                "answers": answers.iter().map(|a| serde_json::json!({
                    "text": a.text,
                    "start": a.start,
                })).collect::<Vec<_>>(),
            }),
            QaExample::Label {
                context,
                question,
                label,
            } => serde_json::json!({
                "context": context,
                "question": question,
                "label": label,
            }),
        };
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReJson {
    text: String,
    label: String,
}

pub fn load_re_jsonl(path: &Path) -> Result<Vec<ReExample>> {
    let text = std::fs::read_to_string(path)?;
    parse_re_jsonl(&text, &path.display().to_string())
}

pub fn parse_re_jsonl(text: &str, origin: &str) -> Result<Vec<ReExample>> {
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReJson = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno + 1,
            msg: format!("invalid RE record: {e}"),
        })?;
        examples.push(ReExample {
            text: rec.text,
            label: rec.label,
        });
    }
    Ok(examples)
}

pub fn write_re_jsonl(examples: &[ReExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(
            &serde_json::json!({ "text": ex.text, "label": ex.label }).to_string(),
        );
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_span_record_accepted() {
        let line = r#"{"context": "the heart attack case", "question": "what happened", "answers": [{"text": "heart attack", "start": 4}]}"#;
        let (examples, span) = parse_qa_jsonl(line, "t").unwrap();
        assert!(span);
        assert_eq!(examples.len(), 1);
    }

    #[test]
    fn span_beyond_context_errors_with_line() {
        let line = r#"{"context": "short", "question": "q", "answers": [{"text": "nope", "start": 100}]}"#;
        let err = parse_qa_jsonl(line, "qa.jsonl").unwrap_err();
        assert!(err.to_string().contains("qa.jsonl:1"), "{err}");
    }

    #[test]
    fn span_text_mismatch_is_a_data_error() {
        let line = r#"{"context": "alpha beta", "question": "q", "answers": [{"text": "beta", "start": 0}]}"#;
        assert!(parse_qa_jsonl(line, "t").is_err());
    }

    #[test]
    fn label_style_file_detected() {
        let text = concat!(
            r#"{"context": "c1", "question": "q1", "label": "yes"}"#,
            "\n",
            r#"{"context": "c2", "question": "q2", "label": "no"}"#,
            "\n"
        );
        let (examples, span) = parse_qa_jsonl(text, "t").unwrap();
        assert!(!span);
        assert_eq!(examples.len(), 2);
    }

    #[test]
    fn mixed_styles_rejected() {
        let text = concat!(
            r#"{"context": "c", "question": "q", "label": "yes"}"#,
            "\n",
            r#"{"context": "c x", "question": "q", "answers": [{"text": "c", "start": 0}]}"#,
            "\n"
        );
        let err = parse_qa_jsonl(text, "t").unwrap_err();
        assert!(err.to_string().contains("mixes"), "{err}");
    }

    #[test]
    fn qa_roundtrip() {
        let text = concat!(
            r#"{"context": "a b c", "question": "which", "answers": [{"text": "b", "start": 2}]}"#,
            "\n"
        );
        let (examples, _) = parse_qa_jsonl(text, "t").unwrap();
        let written = write_qa_jsonl(&examples);
        let (back, span) = parse_qa_jsonl(&written, "t").unwrap();
        assert!(span);
        assert_eq!(back, examples);
    }

    #[test]
    fn re_records_roundtrip() {
        let text = concat!(
            r#"{"text": "x affects y", "label": "boosts"}"#,
            "\n",
            r#"{"text": "x meets y", "label": "none"}"#,
            "\n"
        );
        let examples = parse_re_jsonl(text, "t").unwrap();
        assert_eq!(examples.len(), 2);
        let back = parse_re_jsonl(&write_re_jsonl(&examples), "t").unwrap();
        assert_eq!(back, examples);
    }
}
