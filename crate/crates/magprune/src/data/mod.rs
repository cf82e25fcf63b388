//! Task datasets, corpus packing, format loaders and the synthetic
//! two-domain generator.

pub mod conll;
pub mod corpus;
pub mod qa;
pub mod synth;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    EntityRecognition,
    RelationExtraction,
    QuestionAnswering,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::EntityRecognition => "er",
            TaskKind::RelationExtraction => "re",
            TaskKind::QuestionAnswering => "qa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    SpanF1,
    F1,
    Accuracy,
    SquadF1,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::SpanF1 => "span_f1",
            MetricKind::F1 => "f1",
            MetricKind::Accuracy => "accuracy",
            MetricKind::SquadF1 => "squad_f1",
        }
    }
}

/// Token sequence with BIO tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErExample {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

/// Sentence with a relation label over its marked entity pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReExample {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanAnswer {
    pub text: String,
    pub start: usize,
}

/// Context/question pair, answered either by a span or by a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QaExample {
    Span {
        context: String,
        question: String,
        answers: Vec<SpanAnswer>,
    },
    Label {
        context: String,
        question: String,
        label: String,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskData {
    EntityRecognition {
        splits: Splits<ErExample>,
    },
    RelationExtraction {
        splits: Splits<ReExample>,
        /// Label excluded from micro-F1 true positives, when present.
        negative_label: Option<String>,
    },
    QuestionAnswering {
        splits: Splits<QaExample>,
        span_style: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub data: TaskData,
}

impl TaskDataset {
    pub fn kind(&self) -> TaskKind {
        match self.data {
            TaskData::EntityRecognition { .. } => TaskKind::EntityRecognition,
            TaskData::RelationExtraction { .. } => TaskKind::RelationExtraction,
            TaskData::QuestionAnswering { .. } => TaskKind::QuestionAnswering,
        }
    }

    pub fn metric(&self) -> MetricKind {
        match &self.data {
            TaskData::EntityRecognition { .. } => MetricKind::SpanF1,
            TaskData::RelationExtraction { .. } => MetricKind::F1,
            TaskData::QuestionAnswering { span_style, .. } => {
                if *span_style {
                    MetricKind::SquadF1
                } else {
                    MetricKind::Accuracy
                }
            }
        }
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        match &self.data {
            TaskData::EntityRecognition { splits } => {
                (splits.train.len(), splits.dev.len(), splits.test.len())
            }
            TaskData::RelationExtraction { splits, .. } => {
                (splits.train.len(), splits.dev.len(), splits.test.len())
            }
            TaskData::QuestionAnswering { splits, .. } => {
                (splits.train.len(), splits.dev.len(), splits.test.len())
            }
        }
    }

    /// Distinct BIO tags (ER) or labels (RE / label-style QA), sorted.
    pub fn label_set(&self) -> Vec<String> {
        let mut labels: Vec<String> = match &self.data {
            TaskData::EntityRecognition { splits } => splits
                .train
                .iter()
                .chain(&splits.dev)
                .chain(&splits.test)
                .flat_map(|e| e.tags.iter().cloned())
                .collect(),
            TaskData::RelationExtraction { splits, .. } => splits
                .train
                .iter()
                .chain(&splits.dev)
                .chain(&splits.test)
                .map(|e| e.label.clone())
                .collect(),
            TaskData::QuestionAnswering { splits, .. } => splits
                .train
                .iter()
                .chain(&splits.dev)
                .chain(&splits.test)
                .filter_map(|e| match e {
                    QaExample::Label { label, .. } => Some(label.clone()),
                    QaExample::Span { .. } => None,
                })
                .collect(),
        };
        labels.sort();
        labels.dedup();
        labels
    }

    /// Uniform sample without replacement of `ceil(fraction * n)` training
    /// examples, original order preserved. Dev and test are untouched.
    pub fn subsample_train(&self, fraction: f64, seed: u64) -> Result<TaskDataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "subsample fraction {fraction} outside (0, 1]"
            )));
        }
        fn pick<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
            let n = items.len();
            let k = (fraction * n as f64).ceil() as usize;
            if k == 0 {
                return Err(Error::InvalidInput(
                    "subsample selects zero training examples".into(),
                ));
            }
            if k >= n {
                return Ok(items.to_vec());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut chosen = idx[..k].to_vec();
            chosen.sort_unstable();
            Ok(chosen.into_iter().map(|i| items[i].clone()).collect())
        }
        let data = match &self.data {
            TaskData::EntityRecognition { splits } => TaskData::EntityRecognition {
                splits: Splits {
                    train: pick(&splits.train, fraction, seed)?,
                    dev: splits.dev.clone(),
                    test: splits.test.clone(),
                },
            },
            TaskData::RelationExtraction {
                splits,
                negative_label,
            } => TaskData::RelationExtraction {
                splits: Splits {
                    train: pick(&splits.train, fraction, seed)?,
                    dev: splits.dev.clone(),
                    test: splits.test.clone(),
                },
                negative_label: negative_label.clone(),
            },
            TaskData::QuestionAnswering { splits, span_style } => TaskData::QuestionAnswering {
                splits: Splits {
                    train: pick(&splits.train, fraction, seed)?,
                    dev: splits.dev.clone(),
                    test: splits.test.clone(),
                },
                span_style: *span_style,
            },
        };
        Ok(TaskDataset {
            name: self.name.clone(),
            data,
        })
    }
}

/// Repair invalid BIO transitions in place: an I-X following O, start of
/// sentence, or a different type becomes B-X. Returns the repair count.
pub fn repair_bio(tags: &mut [String]) -> usize {
    let mut repairs = 0;
    for i in 0..tags.len() {
        let Some(ty) = tags[i].strip_prefix("I-").map(str::to_string) else {
            continue;
        };
        let prev_ok = i > 0
            && (tags[i - 1] == format!("B-{ty}") || tags[i - 1] == format!("I-{ty}"));
        if !prev_ok {
            tags[i] = format!("B-{ty}");
            repairs += 1;
        }
    }
    repairs
}

/// True when every tag is O, B-X, or I-X continuing a same-type span.
pub fn bio_is_valid(tags: &[String]) -> bool {
    let mut probe: Vec<String> = tags.to_vec();
    repair_bio(&mut probe) == 0
        && tags
            .iter()
            .all(|t| t == "O" || t.starts_with("B-") || t.starts_with("I-"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn er_dataset(n: usize) -> TaskDataset {
        let ex = |i: usize| ErExample {
            tokens: vec![format!("tok{i}"), "x".into()],
            tags: vec!["B-AGT".into(), "O".into()],
        };
        TaskDataset {
            name: "er".into(),
            data: TaskData::EntityRecognition {
                splits: Splits {
                    train: (0..n).map(ex).collect(),
                    dev: (0..10).map(ex).collect(),
                    test: (0..10).map(ex).collect(),
                },
            },
        }
    }

    #[test]
    fn subsample_identity_at_full_fraction() {
        let ds = er_dataset(50);
        let sub = ds.subsample_train(1.0, 3).unwrap();
        assert_eq!(sub, ds);
    }

    #[test]
    fn subsample_uses_ceiling() {
        let ds = er_dataset(880);
        let sub = ds.subsample_train(0.01, 5).unwrap();
        assert_eq!(sub.split_sizes().0, 9); // ceil(8.8)
        assert_eq!(sub.split_sizes().1, 10);
        assert_eq!(sub.split_sizes().2, 10);
    }

    #[test]
    fn subsample_deterministic_and_seed_sensitive() {
        let ds = er_dataset(100);
        let a = ds.subsample_train(0.2, 7).unwrap();
        let b = ds.subsample_train(0.2, 7).unwrap();
        let c = ds.subsample_train(0.2, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn subsample_overlap_between_seeds_is_near_expectation() {
        let ds = er_dataset(400);
        let frac = 0.5;
        let pick_set = |seed: u64| -> std::collections::BTreeSet<String> {
            let sub = ds.subsample_train(frac, seed).unwrap();
            match sub.data {
                TaskData::EntityRecognition { splits } => {
                    splits.train.into_iter().map(|e| e.tokens[0].clone()).collect()
                }
                _ => unreachable!(),
            }
        };
        let a = pick_set(1);
        let b = pick_set(2);
        let overlap = a.intersection(&b).count() as f64;
        // Expectation is frac^2 * n = 100; allow generous binomial slack.
        assert!((overlap - 100.0).abs() < 30.0, "overlap {overlap}");
    }

    #[test]
    fn subsample_rejects_bad_fraction() {
        let ds = er_dataset(10);
        assert!(ds.subsample_train(0.0, 1).is_err());
        assert!(ds.subsample_train(1.5, 1).is_err());
    }

    #[test]
    fn bio_repair_fixes_orphan_inside_tags() {
        let mut tags: Vec<String> = ["O", "I-Chem", "I-Chem", "B-Dis", "I-Chem"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let n = repair_bio(&mut tags);
        assert_eq!(n, 2);
        assert_eq!(tags, vec!["O", "B-Chem", "I-Chem", "B-Dis", "B-Chem"]);
        assert!(bio_is_valid(&tags));
    }

    #[test]
    fn label_set_is_sorted_and_unique() {
        let ds = er_dataset(3);
        assert_eq!(ds.label_set(), vec!["B-AGT".to_string(), "O".to_string()]);
        assert_eq!(ds.metric(), MetricKind::SpanF1);
    }
}
