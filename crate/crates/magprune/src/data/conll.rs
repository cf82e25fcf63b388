//! CoNLL column format: one `token TAB tag` per line, blank lines between
//! sentences. Invalid BIO transitions are repaired to B-tags on load.

use std::path::Path;

use crate::data::{repair_bio, ErExample};
use crate::error::{Error, Result};

/// Parse a CoNLL file into examples plus the number of BIO repairs
/// applied. An empty file is an empty dataset, not an error.
pub fn load_conll(path: &Path) -> Result<(Vec<ErExample>, usize)> {
    let text = std::fs::read_to_string(path)?;
    parse_conll(&text, &path.display().to_string())
}

pub fn parse_conll(text: &str, origin: &str) -> Result<(Vec<ErExample>, usize)> {
    let mut examples = Vec::new();
    let mut repairs = 0;
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>| {
        if !tokens.is_empty() {
            repairs += repair_bio(tags);
            examples.push(ErExample {
                tokens: std::mem::take(tokens),
                tags: std::mem::take(tags),
            });
        }
    };
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags);
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(token), Some(tag), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                msg: format!("expected 'token<TAB>tag', got {line:?}"),
            });
        };
        if token.is_empty() || tag.is_empty() {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                msg: "empty token or tag".into(),
            });
        }
        if tag != "O" && !tag.starts_with("B-") && !tag.starts_with("I-") {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                msg: format!("tag {tag:?} is not O, B-*, or I-*"),
            });
        }
        tokens.push(token.to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags);
    Ok((examples, repairs))
}

pub fn write_conll(examples: &[ErExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        for (tok, tag) in ex.tokens.iter().zip(&ex.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn save_conll(path: &Path, examples: &[ErExample]) -> Result<()> {
    std::fs::write(path, write_conll(examples))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sentences_parse_with_tags_preserved() {
        let text = "drug\tB-Chem\nhelps\tO\n\npatient\tO\nfever\tB-Dis\n";
        let (examples, repairs) = parse_conll(text, "test").unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(repairs, 0);
        assert_eq!(examples[0].tokens, vec!["drug", "helps"]);
        assert_eq!(examples[0].tags, vec!["B-Chem", "O"]);
        assert_eq!(examples[1].tags, vec!["O", "B-Dis"]);
    }

    #[test]
    fn orphan_inside_tag_repaired_and_counted() {
        let text = "x\tO\ny\tI-Chem\n";
        let (examples, repairs) = parse_conll(text, "test").unwrap();
        assert_eq!(repairs, 1);
        assert_eq!(examples[0].tags, vec!["O", "B-Chem"]);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let (examples, repairs) = parse_conll("", "test").unwrap();
        assert!(examples.is_empty());
        assert_eq!(repairs, 0);
    }

    #[test]
    fn malformed_line_errors_with_line_number() {
        let text = "good\tO\nbad line without tab\n";
        let err = parse_conll(text, "origin.conll").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("origin.conll:2"), "{msg}");
    }

    #[test]
    fn roundtrip_through_writer() {
        let text = "a\tB-X\nb\tI-X\n\nc\tO\n";
        let (examples, _) = parse_conll(text, "t").unwrap();
        let written = write_conll(&examples);
        let (back, repairs) = parse_conll(&written, "t").unwrap();
        assert_eq!(back, examples);
        assert_eq!(repairs, 0);
    }
}
