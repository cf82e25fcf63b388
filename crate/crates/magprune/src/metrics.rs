//! Task metrics: exact-span micro-F1 over BIO tags, label micro-F1,
//! accuracy, and token-overlap answer F1.

use std::collections::BTreeMap;

use crate::data::MetricKind;
use crate::error::{Error, Result};

/// Predictions or gold annotations, one entry per example.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    /// BIO tag sequences (entity recognition).
    Tags(Vec<Vec<String>>),
    /// Single labels (relation extraction, label-style QA).
    Labels(Vec<String>),
    /// Answer texts (extractive QA predictions).
    Texts(Vec<String>),
    /// Candidate gold answer texts per example (extractive QA gold).
    TextSets(Vec<Vec<String>>),
}

impl Predictions {
    fn len(&self) -> usize {
        match self {
            Predictions::Tags(v) => v.len(),
            Predictions::Labels(v) => v.len(),
            Predictions::Texts(v) => v.len(),
            Predictions::TextSets(v) => v.len(),
        }
    }
}

/// Decode (start, end, type) entity spans from a BIO sequence. An I-tag
/// that does not continue a same-type span opens a new one.
pub fn decode_spans(tags: &[String]) -> Vec<(usize, usize, String)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (starts, ty) = if let Some(t) = tag.strip_prefix("B-") {
            (true, Some(t))
        } else if let Some(t) = tag.strip_prefix("I-") {
            (false, Some(t))
        } else {
            (false, None)
        };
        match ty {
            None => {
                if let Some((s, t)) = open.take() {
                    spans.push((s, i, t));
                }
            }
            Some(t) => {
                let continues = !starts
                    && matches!(&open, Some((_, open_ty)) if open_ty == t);
                if !continues {
                    if let Some((s, ot)) = open.take() {
                        spans.push((s, i, ot));
                    }
                    open = Some((i, t.to_string()));
                }
            }
        }
    }
    if let Some((s, t)) = open {
        spans.push((s, tags.len(), t));
    }
    spans
}

fn span_f1(pred: &[Vec<String>], gold: &[Vec<String>]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        let ps: std::collections::BTreeSet<_> = decode_spans(p).into_iter().collect();
        let gs: std::collections::BTreeSet<_> = decode_spans(g).into_iter().collect();
        tp += ps.intersection(&gs).count();
        fp += ps.difference(&gs).count();
        fn_ += gs.difference(&ps).count();
    }
    if 2 * tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

fn label_f1(pred: &[String], gold: &[String], negative: Option<&str>) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        let p_neg = Some(p.as_str()) == negative;
        let g_neg = Some(g.as_str()) == negative;
        if p == g {
            if !g_neg {
                tp += 1;
            }
        } else {
            if !p_neg {
                fp += 1;
            }
            if !g_neg {
                fn_ += 1;
            }
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

fn accuracy(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() {
        return 1.0;
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / pred.len() as f64
}

fn token_counts(text: &str) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for t in text.split_whitespace() {
        *m.entry(t.to_lowercase()).or_default() += 1;
    }
    m
}

/// Token-overlap F1 of one prediction against one gold answer.
pub fn answer_token_f1(pred: &str, gold: &str) -> f64 {
    let p = token_counts(pred);
    let g = token_counts(gold);
    let p_len: usize = p.values().sum();
    let g_len: usize = g.values().sum();
    if p_len == 0 || g_len == 0 {
        return if p_len == g_len { 1.0 } else { 0.0 };
    }
    let common: usize = p
        .iter()
        .map(|(t, c)| c.min(g.get(t).unwrap_or(&0)))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p_len as f64;
    let recall = common as f64 / g_len as f64;
    2.0 * precision * recall / (precision + recall)
}

fn squad_f1(pred: &[String], gold: &[Vec<String>]) -> f64 {
    if pred.is_empty() {
        return 1.0;
    }
    let mut total = 0.0;
    for (p, golds) in pred.iter().zip(gold) {
        let best = golds
            .iter()
            .map(|g| answer_token_f1(p, g))
            .fold(0.0f64, f64::max);
        total += best;
    }
    total / pred.len() as f64
}

/// Compute a metric over aligned predictions and gold annotations.
/// `negative_label`, when given, is excluded from label-F1 true
/// positives (standard relation-extraction convention).
pub fn compute_metric(
    predictions: &Predictions,
    gold: &Predictions,
    kind: MetricKind,
    negative_label: Option<&str>,
) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::InvalidInput(format!(
            "metric over {} predictions but {} gold entries",
            predictions.len(),
            gold.len()
        )));
    }
    match (kind, predictions, gold) {
        (MetricKind::SpanF1, Predictions::Tags(p), Predictions::Tags(g)) => {
            for (i, (pt, gt)) in p.iter().zip(g).enumerate() {
                if pt.len() != gt.len() {
                    return Err(Error::InvalidInput(format!(
                        "example {i}: {} predicted tags vs {} gold",
                        pt.len(),
                        gt.len()
                    )));
                }
            }
            Ok(span_f1(p, g))
        }
        (MetricKind::F1, Predictions::Labels(p), Predictions::Labels(g)) => {
            Ok(label_f1(p, g, negative_label))
        }
        (MetricKind::Accuracy, Predictions::Labels(p), Predictions::Labels(g)) => {
            Ok(accuracy(p, g))
        }
        (MetricKind::SquadF1, Predictions::Texts(p), Predictions::TextSets(g)) => {
            Ok(squad_f1(p, g))
        }
        (MetricKind::SquadF1, Predictions::Texts(p), Predictions::Texts(g)) => {
            let sets: Vec<Vec<String>> = g.iter().map(|t| vec![t.clone()]).collect();
            Ok(squad_f1(p, &sets))
        }
        _ => Err(Error::InvalidInput(format!(
            "metric {kind:?} incompatible with provided prediction kinds"
        ))),
    }
}
