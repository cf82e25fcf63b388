//! Synthetic two-domain corpus and task generation.
//!
//! Two overlapping template grammars produce a large "general" corpus and
//! a smaller "domain" corpus. Entities belong to two classes (agents and
//! targets); every agent has a fixed polarity that decides its relation
//! verb. Domain text draws entities from domain-specific pools with
//! probability `1 - shared_vocab_fraction`, so the two corpora have
//! measurably different unigram distributions unless the shared fraction
//! is 1 (the null control).
//!
//! Task labels are keyed to entity classes and polarities, and task test
//! splits prefer entities held out from task training, so solving the
//! tasks on test data requires token knowledge that only (domain)
//! pretraining supplies.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    ErExample, QaExample, ReExample, SpanAnswer, Splits, TaskData, TaskDataset,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    /// Probability that a domain-text slot draws from the shared
    /// (general) pools. 1.0 makes the domain corpus distributionally
    /// identical to the general one.
    pub shared_vocab_fraction: f64,
    /// Number of domain-specific tokens introduced (entities + nouns).
    pub domain_token_count: usize,
    pub grammar_seed: u64,
    pub general_corpus_tokens: usize,
    pub domain_corpus_tokens: usize,
    /// (train, dev, test) sizes.
    pub er_sizes: (usize, usize, usize),
    pub re_sizes: (usize, usize, usize),
    pub qa_sizes: (usize, usize, usize),
    pub span_qa_sizes: (usize, usize, usize),
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        SyntheticDomainSpec {
            shared_vocab_fraction: 0.5,
            domain_token_count: 120,
            grammar_seed: 0,
            general_corpus_tokens: 200_000,
            domain_corpus_tokens: 100_000,
            er_sizes: (640, 160, 200),
            re_sizes: (480, 120, 160),
            qa_sizes: (450, 60, 120),
            span_qa_sizes: (480, 100, 200),
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shared_vocab_fraction) {
            return Err(Error::Config(format!(
                "shared_vocab_fraction {} outside [0, 1]",
                self.shared_vocab_fraction
            )));
        }
        if self.domain_token_count < 10 {
            return Err(Error::Config(
                "domain_token_count below 10 leaves no domain signal".into(),
            ));
        }
        if self.general_corpus_tokens < 1000 || self.domain_corpus_tokens < 1000 {
            return Err(Error::Config("corpus token budgets below 1000".into()));
        }
        for (name, (tr, dv, te)) in [
            ("er", self.er_sizes),
            ("re", self.re_sizes),
            ("qa", self.qa_sizes),
            ("span_qa", self.span_qa_sizes),
        ] {
            if tr == 0 || dv == 0 || te == 0 {
                return Err(Error::Config(format!("{name} split sizes must be positive")));
            }
        }
        Ok(())
    }
}

/// Class membership of the generating grammar, enough to build oracle
/// taggers in tests and to inspect generated data.
#[derive(Debug, Clone, Default)]
pub struct GrammarInfo {
    pub agent_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub agent_qualifiers: Vec<String>,
    pub target_qualifiers: Vec<String>,
    /// Agent token -> relation verb ("boosts" or "blocks").
    pub polarity: BTreeMap<String, &'static str>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDomains {
    pub general_corpus: String,
    pub domain_corpus: String,
    pub er: TaskDataset,
    pub re: TaskDataset,
    pub qa: TaskDataset,
    /// General-domain extractive QA for the data-size ablation.
    pub span_qa: TaskDataset,
    pub grammar: GrammarInfo,
}

const SYLLABLES: [&str; 40] = [
    "ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du", "ga", "ge", "gi", "go", "gu",
    "ka", "ke", "ki", "ko", "ku", "la", "le", "li", "lo", "lu", "ma", "me", "mi", "mo", "mu",
    "na", "ne", "ni", "no", "nu", "ra", "re", "ri", "ro", "ru",
];

const VERB_BOOSTS: &str = "boosts";
const VERB_BLOCKS: &str = "blocks";
const VERB_NEUTRAL: &str = "meets";
const VERB_GENERIC: &str = "affects";

#[derive(Debug, Clone)]
struct Entity {
    token: String,
    boosts: bool,
}

struct Pools {
    nouns: Vec<String>,
    adjs: Vec<String>,
    verbs: Vec<String>,
    agents: Vec<Entity>,
    targets: Vec<Entity>,
    agent_quals: Vec<String>,
    target_quals: Vec<String>,
    dom_agents: Vec<Entity>,
    dom_targets: Vec<Entity>,
    dom_nouns: Vec<String>,
}

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut std::collections::BTreeSet<String>) -> String {
    loop {
        let n = rng.random_range(2..4usize);
        let mut w = String::new();
        for _ in 0..n {
            w.push_str(SYLLABLES[rng.random_range(0..SYLLABLES.len())]);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn build_pools(spec: &SyntheticDomainSpec, rng: &mut ChaCha8Rng) -> Pools {
    let mut used = std::collections::BTreeSet::new();
    // Keep structural words out of the pseudo-word space.
    for w in [
        VERB_BOOSTS, VERB_BLOCKS, VERB_NEUTRAL, VERB_GENERIC, "the", "does", "what", "clinic",
        "applies", "today", "subject", "shows", "signs", "yes", "no", ".",
    ] {
        used.insert(w.to_string());
    }
    let words = |n: usize, rng: &mut ChaCha8Rng, used: &mut std::collections::BTreeSet<String>| {
        (0..n).map(|_| fresh_word(rng, used)).collect::<Vec<_>>()
    };
    let nouns = words(30, rng, &mut used);
    let adjs = words(15, rng, &mut used);
    let verbs = words(15, rng, &mut used);
    let agent_quals = words(5, rng, &mut used);
    let target_quals = words(5, rng, &mut used);
    let entity = |n: usize, rng: &mut ChaCha8Rng, used: &mut std::collections::BTreeSet<String>| {
        (0..n)
            .map(|_| Entity {
                token: fresh_word(rng, used),
                boosts: rng.random::<f64>() < 0.5,
            })
            .collect::<Vec<_>>()
    };
    let agents = entity(30, rng, &mut used);
    let targets = entity(30, rng, &mut used);
    let n_dom_agents = (spec.domain_token_count * 2) / 5;
    let n_dom_targets = (spec.domain_token_count * 2) / 5;
    let n_dom_nouns = spec.domain_token_count - n_dom_agents - n_dom_targets;
    let dom_agents = entity(n_dom_agents.max(2), rng, &mut used);
    let dom_targets = entity(n_dom_targets.max(2), rng, &mut used);
    let dom_nouns = words(n_dom_nouns.max(1), rng, &mut used);
    Pools {
        nouns,
        adjs,
        verbs,
        agents,
        targets,
        agent_quals,
        target_quals,
        dom_agents,
        dom_targets,
        dom_nouns,
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

/// Which side of the shared/domain split a slot draws from.
fn domain_side(rng: &mut ChaCha8Rng, domain: bool, shared_fraction: f64) -> bool {
    domain && rng.random::<f64>() >= shared_fraction
}

struct Mention {
    tokens: Vec<String>,
    entity: Entity,
    agent: bool,
}

fn mention(rng: &mut ChaCha8Rng, pools: &Pools, agent: bool, domain: bool, f: f64) -> Mention {
    let pool = match (agent, domain_side(rng, domain, f)) {
        (true, false) => &pools.agents,
        (true, true) => &pools.dom_agents,
        (false, false) => &pools.targets,
        (false, true) => &pools.dom_targets,
    };
    let entity = pick(rng, pool).clone();
    let mut tokens = Vec::with_capacity(2);
    if rng.random::<f64>() < 0.3 {
        let quals = if agent {
            &pools.agent_quals
        } else {
            &pools.target_quals
        };
        tokens.push(pick(rng, quals).clone());
    }
    tokens.push(entity.token.clone());
    Mention {
        tokens,
        entity,
        agent,
    }
}

fn noun<'a>(rng: &mut ChaCha8Rng, pools: &'a Pools, domain: bool, f: f64) -> &'a str {
    if domain_side(rng, domain, f) {
        pick(rng, &pools.dom_nouns)
    } else {
        pick(rng, &pools.nouns)
    }
}

fn polarity_verb(e: &Entity) -> &'static str {
    if e.boosts {
        VERB_BOOSTS
    } else {
        VERB_BLOCKS
    }
}

/// One sentence as tokens; the agent/target mentions when present.
fn sentence(
    rng: &mut ChaCha8Rng,
    pools: &Pools,
    domain: bool,
    f: f64,
) -> (Vec<String>, Option<Mention>, Option<Mention>) {
    let roll: f64 = rng.random();
    let mut toks: Vec<String> = Vec::new();
    if roll < 0.35 {
        toks.push("the".into());
        toks.push(pick(rng, &pools.adjs).clone());
        toks.push(noun(rng, pools, domain, f).to_string());
        toks.push(pick(rng, &pools.verbs).clone());
        toks.push("the".into());
        toks.push(noun(rng, pools, domain, f).to_string());
        toks.push(".".into());
        (toks, None, None)
    } else if roll < 0.60 {
        let a = mention(rng, pools, true, domain, f);
        let b = mention(rng, pools, false, domain, f);
        toks.extend(a.tokens.iter().cloned());
        toks.push(polarity_verb(&a.entity).into());
        toks.extend(b.tokens.iter().cloned());
        toks.push(".".into());
        (toks, Some(a), Some(b))
    } else if roll < 0.70 {
        let a = mention(rng, pools, true, domain, f);
        let b = mention(rng, pools, false, domain, f);
        toks.extend(a.tokens.iter().cloned());
        toks.push(VERB_NEUTRAL.into());
        toks.extend(b.tokens.iter().cloned());
        toks.push(".".into());
        (toks, Some(a), Some(b))
    } else if roll < 0.85 {
        let a = mention(rng, pools, true, domain, f);
        toks.push("clinic".into());
        toks.push("applies".into());
        toks.extend(a.tokens.iter().cloned());
        toks.push("today".into());
        toks.push(".".into());
        (toks, Some(a), None)
    } else {
        let b = mention(rng, pools, false, domain, f);
        toks.push("subject".into());
        toks.push("shows".into());
        toks.extend(b.tokens.iter().cloned());
        toks.push("signs".into());
        toks.push(".".into());
        (toks, None, Some(b))
    }
}

fn gen_corpus(rng: &mut ChaCha8Rng, pools: &Pools, domain: bool, f: f64, budget: usize) -> String {
    let mut out = String::new();
    let mut tokens = 0usize;
    while tokens < budget {
        let n_sentences = rng.random_range(3..7usize);
        let mut doc: Vec<String> = Vec::new();
        for _ in 0..n_sentences {
            let (toks, _, _) = sentence(rng, pools, domain, f);
            tokens += toks.len();
            doc.extend(toks);
        }
        out.push_str(&doc.join(" "));
        out.push('\n');
    }
    out
}

/// Entity index split: the first 60% of each pool is visible to task
/// training; test examples draw half their entities from the held-out
/// remainder so class knowledge must come from pretraining.
fn entity_for_split(
    rng: &mut ChaCha8Rng,
    pool: &[Entity],
    test_like: bool,
) -> Entity {
    let cut = (pool.len() * 3) / 5;
    let held_out = test_like && rng.random::<f64>() < 0.5 && cut < pool.len();
    let range = if held_out { cut..pool.len() } else { 0..cut.max(1) };
    pool[rng.random_range(range)].clone()
}

fn split_mention(
    rng: &mut ChaCha8Rng,
    pools: &Pools,
    agent: bool,
    domain: bool,
    f: f64,
    test_like: bool,
) -> Mention {
    let pool = match (agent, domain_side(rng, domain, f)) {
        (true, false) => &pools.agents,
        (true, true) => &pools.dom_agents,
        (false, false) => &pools.targets,
        (false, true) => &pools.dom_targets,
    };
    let entity = entity_for_split(rng, pool, test_like);
    let mut tokens = Vec::with_capacity(2);
    if rng.random::<f64>() < 0.3 {
        let quals = if agent {
            &pools.agent_quals
        } else {
            &pools.target_quals
        };
        tokens.push(pick(rng, quals).clone());
    }
    tokens.push(entity.token.clone());
    Mention {
        tokens,
        entity,
        agent,
    }
}

fn filler_tokens(rng: &mut ChaCha8Rng, pools: &Pools, domain: bool, f: f64) -> Vec<String> {
    vec![
        "the".into(),
        pick(rng, &pools.adjs).clone(),
        noun(rng, pools, domain, f).to_string(),
        pick(rng, &pools.verbs).clone(),
        "the".into(),
        noun(rng, pools, domain, f).to_string(),
        ".".into(),
    ]
}

fn gen_er(
    rng: &mut ChaCha8Rng,
    pools: &Pools,
    f: f64,
    n: usize,
    test_like: bool,
) -> Vec<ErExample> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tokens: Vec<String> = Vec::new();
        let mut tags: Vec<String> = Vec::new();
        let push_plain = |toks: Vec<String>, tokens: &mut Vec<String>, tags: &mut Vec<String>| {
            for t in toks {
                tokens.push(t);
                tags.push("O".into());
            }
        };
        if rng.random::<f64>() < 0.4 {
            push_plain(filler_tokens(rng, pools, true, f), &mut tokens, &mut tags);
        }
        let a = split_mention(rng, pools, true, true, f, test_like);
        let b = split_mention(rng, pools, false, true, f, test_like);
        let verb = if rng.random::<f64>() < 0.7 {
            polarity_verb(&a.entity)
        } else {
            VERB_NEUTRAL
        };
        let push_mention = |m: &Mention, tokens: &mut Vec<String>, tags: &mut Vec<String>| {
            let ty = if m.agent { "AGT" } else { "TRG" };
            for (i, t) in m.tokens.iter().enumerate() {
                tokens.push(t.clone());
                tags.push(if i == 0 {
                    format!("B-{ty}")
                } else {
                    format!("I-{ty}")
                });
            }
        };
        push_mention(&a, &mut tokens, &mut tags);
        tokens.push(verb.into());
        tags.push("O".into());
        push_mention(&b, &mut tokens, &mut tags);
        tokens.push(".".into());
        tags.push("O".into());
        if rng.random::<f64>() < 0.4 {
            push_plain(filler_tokens(rng, pools, true, f), &mut tokens, &mut tags);
        }
        out.push(ErExample { tokens, tags });
    }
    out
}

fn gen_re(
    rng: &mut ChaCha8Rng,
    pools: &Pools,
    f: f64,
    n: usize,
    test_like: bool,
) -> Vec<ReExample> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let a = split_mention(rng, pools, true, true, f, test_like);
        let b = split_mention(rng, pools, false, true, f, test_like);
        // The surface verb is uninformative; the label keys to the
        // agent's hidden polarity, observable only in corpus text.
        let (verb, label) = if rng.random::<f64>() < 1.0 / 3.0 {
            (VERB_NEUTRAL, "none")
        } else {
            (VERB_GENERIC, polarity_verb(&a.entity))
        };
        let mut toks = a.tokens.clone();
        toks.push(verb.into());
        toks.extend(b.tokens.iter().cloned());
        toks.push(".".into());
        out.push(ReExample {
            text: toks.join(" "),
            label: label.into(),
        });
    }
    out
}

fn gen_qa_label(
    rng: &mut ChaCha8Rng,
    pools: &Pools,
    f: f64,
    n: usize,
    test_like: bool,
) -> Vec<QaExample> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let a = split_mention(rng, pools, true, true, f, test_like);
        let b = split_mention(rng, pools, false, true, f, test_like);
        let other_b = split_mention(rng, pools, false, true, f, test_like);
        let positive = i % 2 == 0;

        let mut evidence = a.tokens.clone();
        evidence.push(polarity_verb(&a.entity).into());
        evidence.extend(b.tokens.iter().cloned());
        evidence.push(".".into());

        let mut context_sents: Vec<Vec<String>> = vec![evidence];
        if rng.random::<f64>() < 0.7 {
            context_sents.push(filler_tokens(rng, pools, true, f));
        }
        // A distractor target keeps "no" questions non-trivial.
        let mut distractor = split_mention(rng, pools, true, true, f, test_like).tokens;
        distractor.push(VERB_NEUTRAL.into());
        distractor.extend(other_b.tokens.iter().cloned());
        distractor.push(".".into());
        context_sents.push(distractor);
        for k in (1..context_sents.len()).rev() {
            let j = rng.random_range(0..k + 1);
            context_sents.swap(k, j);
        }
        let context: String = context_sents
            .iter()
            .map(|s| s.join(" "))
            .collect::<Vec<_>>()
            .join(" ");

        let asked_b = if positive { &b } else { &other_b };
        let question = format!("does {} affect {}", a.entity.token, asked_b.entity.token);
        out.push(QaExample::Label {
            context,
            question,
            label: if positive { "yes".into() } else { "no".into() },
        });
    }
    out
}

fn gen_span_qa(
    rng: &mut ChaCha8Rng,
    pools: &Pools,
    n: usize,
    test_like: bool,
) -> Vec<QaExample> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        // Evidence and distractor relation sentences use distinct targets.
        let answer = split_mention(rng, pools, true, false, 1.0, test_like);
        let b = split_mention(rng, pools, false, false, 1.0, test_like);
        let verb = polarity_verb(&answer.entity);

        let mut evidence = answer.tokens.clone();
        evidence.push(verb.into());
        evidence.extend(b.tokens.iter().cloned());
        evidence.push(".".into());

        let mut sents: Vec<(Vec<String>, bool)> = vec![(evidence, true)];
        let n_distract = rng.random_range(1..3usize);
        for _ in 0..n_distract {
            let da = split_mention(rng, pools, true, false, 1.0, test_like);
            let mut db = split_mention(rng, pools, false, false, 1.0, test_like);
            while db.entity.token == b.entity.token {
                db = split_mention(rng, pools, false, false, 1.0, test_like);
            }
            let mut s = da.tokens.clone();
            s.push(polarity_verb(&da.entity).into());
            s.extend(db.tokens.iter().cloned());
            s.push(".".into());
            sents.push((s, false));
        }
        if rng.random::<f64>() < 0.5 {
            sents.push((filler_tokens(rng, pools, false, 1.0), false));
        }
        for k in (1..sents.len()).rev() {
            let j = rng.random_range(0..k + 1);
            sents.swap(k, j);
        }

        // Join and track the char offset of the evidence answer span.
        let mut context = String::new();
        let mut answer_start = None;
        for (si, (sent, is_evidence)) in sents.iter().enumerate() {
            if si > 0 {
                context.push(' ');
            }
            if *is_evidence {
                answer_start = Some(context.len());
            }
            context.push_str(&sent.join(" "));
        }
        let answer_text = answer.tokens.join(" ");
        let start = answer_start.expect("evidence sentence present");
        debug_assert_eq!(&context[start..start + answer_text.len()], answer_text);

        let question = format!("what {verb} {}", b.entity.token);
        out.push(QaExample::Span {
            context,
            question,
            answers: vec![SpanAnswer {
                text: answer_text,
                start,
            }],
        });
    }
    out
}

pub fn generate_synthetic_domains(spec: &SyntheticDomainSpec) -> Result<SyntheticDomains> {
    spec.validate()?;
    let f = spec.shared_vocab_fraction;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.grammar_seed);
    let pools = build_pools(spec, &mut rng);

    let mut corpus_rng = ChaCha8Rng::seed_from_u64(spec.grammar_seed.wrapping_add(1));
    let general_corpus = gen_corpus(
        &mut corpus_rng,
        &pools,
        false,
        f,
        spec.general_corpus_tokens,
    );
    let domain_corpus = gen_corpus(&mut corpus_rng, &pools, true, f, spec.domain_corpus_tokens);

    let mut task_rng = ChaCha8Rng::seed_from_u64(spec.grammar_seed.wrapping_add(2));
    let er = TaskDataset {
        name: "synthetic_er".into(),
        data: TaskData::EntityRecognition {
            splits: Splits {
                train: gen_er(&mut task_rng, &pools, f, spec.er_sizes.0, false),
                dev: gen_er(&mut task_rng, &pools, f, spec.er_sizes.1, true),
                test: gen_er(&mut task_rng, &pools, f, spec.er_sizes.2, true),
            },
        },
    };
    let re = TaskDataset {
        name: "synthetic_re".into(),
        data: TaskData::RelationExtraction {
            splits: Splits {
                train: gen_re(&mut task_rng, &pools, f, spec.re_sizes.0, false),
                dev: gen_re(&mut task_rng, &pools, f, spec.re_sizes.1, true),
                test: gen_re(&mut task_rng, &pools, f, spec.re_sizes.2, true),
            },
            negative_label: Some("none".into()),
        },
    };
    let qa = TaskDataset {
        name: "synthetic_qa".into(),
        data: TaskData::QuestionAnswering {
            splits: Splits {
                train: gen_qa_label(&mut task_rng, &pools, f, spec.qa_sizes.0, false),
                dev: gen_qa_label(&mut task_rng, &pools, f, spec.qa_sizes.1, true),
                test: gen_qa_label(&mut task_rng, &pools, f, spec.qa_sizes.2, true),
            },
            span_style: false,
        },
    };
    let span_qa = TaskDataset {
        name: "synthetic_span_qa".into(),
        data: TaskData::QuestionAnswering {
            splits: Splits {
                train: gen_span_qa(&mut task_rng, &pools, spec.span_qa_sizes.0, false),
                dev: gen_span_qa(&mut task_rng, &pools, spec.span_qa_sizes.1, true),
                test: gen_span_qa(&mut task_rng, &pools, spec.span_qa_sizes.2, true),
            },
            span_style: true,
        },
    };

    let grammar = GrammarInfo {
        agent_tokens: pools
            .agents
            .iter()
            .chain(&pools.dom_agents)
            .map(|e| e.token.clone())
            .collect(),
        target_tokens: pools
            .targets
            .iter()
            .chain(&pools.dom_targets)
            .map(|e| e.token.clone())
            .collect(),
        agent_qualifiers: pools.agent_quals.clone(),
        target_qualifiers: pools.target_quals.clone(),
        polarity: pools
            .agents
            .iter()
            .chain(&pools.dom_agents)
            .map(|e| (e.token.clone(), polarity_verb(e)))
            .collect(),
    };

    Ok(SyntheticDomains {
        general_corpus,
        domain_corpus,
        er,
        re,
        qa,
        span_qa,
        grammar,
    })
}

/// Smoothed unigram KL divergence KL(p || q) between two corpora over
/// their union vocabulary.
pub fn unigram_kl(p_text: &str, q_text: &str) -> f64 {
    let count = |text: &str| -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for tok in text.split_whitespace() {
            *m.entry(tok.to_string()).or_insert(0.0) += 1.0;
        }
        m
    };
    let p = count(p_text);
    let q = count(q_text);
    let vocab: std::collections::BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    let eps = 0.5;
    let pn: f64 = p.values().sum::<f64>() + eps * vocab.len() as f64;
    let qn: f64 = q.values().sum::<f64>() + eps * vocab.len() as f64;
    let mut kl = 0.0;
    for tok in vocab {
        let pi = (p.get(tok).copied().unwrap_or(0.0) + eps) / pn;
        let qi = (q.get(tok).copied().unwrap_or(0.0) + eps) / qn;
        kl += pi * (pi / qi).ln();
    }
    kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::bio_is_valid;

    fn small_spec() -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            general_corpus_tokens: 20_000,
            domain_corpus_tokens: 10_000,
            er_sizes: (60, 20, 40),
            re_sizes: (60, 20, 40),
            qa_sizes: (40, 10, 20),
            span_qa_sizes: (40, 10, 20),
            ..SyntheticDomainSpec::default()
        }
    }

    #[test]
    fn default_spec_separates_domains() {
        let spec = small_spec();
        let out = generate_synthetic_domains(&spec).unwrap();
        let kl = unigram_kl(&out.general_corpus, &out.domain_corpus);
        assert!(kl > 0.1, "KL(general || domain) = {kl}");
    }

    #[test]
    fn null_control_is_indistinguishable() {
        let spec = SyntheticDomainSpec {
            shared_vocab_fraction: 1.0,
            general_corpus_tokens: 100_000,
            domain_corpus_tokens: 100_000,
            ..small_spec()
        };
        let out = generate_synthetic_domains(&spec).unwrap();
        let kl = unigram_kl(&out.general_corpus, &out.domain_corpus);
        assert!(kl < 0.01, "null-control KL = {kl}");
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let spec = small_spec();
        let a = generate_synthetic_domains(&spec).unwrap();
        let b = generate_synthetic_domains(&spec).unwrap();
        assert_eq!(a.general_corpus, b.general_corpus);
        assert_eq!(a.domain_corpus, b.domain_corpus);
        assert_eq!(a.er, b.er);
        assert_eq!(a.span_qa, b.span_qa);
    }

    #[test]
    fn er_tags_are_valid_bio_and_keyed_to_classes() {
        let out = generate_synthetic_domains(&small_spec()).unwrap();
        let TaskData::EntityRecognition { splits } = &out.er.data else {
            panic!()
        };
        let agents: std::collections::BTreeSet<&String> =
            out.grammar.agent_tokens.iter().collect();
        let targets: std::collections::BTreeSet<&String> =
            out.grammar.target_tokens.iter().collect();
        for ex in splits.train.iter().chain(&splits.dev).chain(&splits.test) {
            assert!(bio_is_valid(&ex.tags));
            for (tok, tag) in ex.tokens.iter().zip(&ex.tags) {
                if agents.contains(tok) {
                    assert!(tag.ends_with("AGT"), "{tok} tagged {tag}");
                }
                if targets.contains(tok) {
                    assert!(tag.ends_with("TRG"), "{tok} tagged {tag}");
                }
            }
        }
    }

    #[test]
    fn re_labels_follow_agent_polarity() {
        let out = generate_synthetic_domains(&small_spec()).unwrap();
        let TaskData::RelationExtraction { splits, .. } = &out.re.data else {
            panic!()
        };
        for ex in splits.train.iter().chain(&splits.test) {
            if ex.label == "none" {
                assert!(ex.text.contains(VERB_NEUTRAL));
                continue;
            }
            let agent = ex
                .text
                .split_whitespace()
                .find(|t| out.grammar.polarity.contains_key(**&t))
                .expect("agent token present");
            assert_eq!(&ex.label.as_str(), out.grammar.polarity.get(agent).unwrap());
        }
    }

    #[test]
    fn span_answers_verify_against_context() {
        let out = generate_synthetic_domains(&small_spec()).unwrap();
        let TaskData::QuestionAnswering { splits, span_style } = &out.span_qa.data else {
            panic!()
        };
        assert!(span_style);
        for ex in splits.train.iter().chain(&splits.dev).chain(&splits.test) {
            let QaExample::Span {
                context, answers, ..
            } = ex
            else {
                panic!()
            };
            for a in answers {
                assert_eq!(&context[a.start..a.start + a.text.len()], a.text);
            }
        }
    }

    #[test]
    fn er_majority_baseline_fails_oracle_succeeds() {
        use crate::metrics::{compute_metric, Predictions};
        let out = generate_synthetic_domains(&small_spec()).unwrap();
        let TaskData::EntityRecognition { splits } = &out.er.data else {
            panic!()
        };
        let gold: Vec<Vec<String>> = splits.test.iter().map(|e| e.tags.clone()).collect();

        // Majority class: everything O.
        let all_o: Vec<Vec<String>> = splits
            .test
            .iter()
            .map(|e| vec!["O".to_string(); e.tokens.len()])
            .collect();
        let f1 = compute_metric(
            &Predictions::Tags(all_o),
            &Predictions::Tags(gold.clone()),
            crate::data::MetricKind::SpanF1,
            None,
        )
        .unwrap();
        assert!(f1 < 0.5, "majority baseline span-F1 {f1}");

        // Oracle from the generating grammar.
        let agents: std::collections::BTreeSet<&String> =
            out.grammar.agent_tokens.iter().collect();
        let targets: std::collections::BTreeSet<&String> =
            out.grammar.target_tokens.iter().collect();
        let aq: std::collections::BTreeSet<&String> =
            out.grammar.agent_qualifiers.iter().collect();
        let tq: std::collections::BTreeSet<&String> =
            out.grammar.target_qualifiers.iter().collect();
        let oracle: Vec<Vec<String>> = splits
            .test
            .iter()
            .map(|e| {
                let mut tags = vec!["O".to_string(); e.tokens.len()];
                for i in 0..e.tokens.len() {
                    let tok = &e.tokens[i];
                    if agents.contains(tok) {
                        let qualified = i > 0 && aq.contains(&e.tokens[i - 1]);
                        tags[i] = if qualified { "I-AGT".into() } else { "B-AGT".into() };
                        if qualified {
                            tags[i - 1] = "B-AGT".into();
                        }
                    } else if targets.contains(tok) {
                        let qualified = i > 0 && tq.contains(&e.tokens[i - 1]);
                        tags[i] = if qualified { "I-TRG".into() } else { "B-TRG".into() };
                        if qualified {
                            tags[i - 1] = "B-TRG".into();
                        }
                    }
                }
                tags
            })
            .collect();
        let f1 = compute_metric(
            &Predictions::Tags(oracle),
            &Predictions::Tags(gold),
            crate::data::MetricKind::SpanF1,
            None,
        )
        .unwrap();
        assert!(f1 > 0.95, "grammar oracle span-F1 {f1}");
    }

    #[test]
    fn zero_domain_tokens_is_a_config_error() {
        let spec = SyntheticDomainSpec {
            domain_token_count: 0,
            ..small_spec()
        };
        assert!(generate_synthetic_domains(&spec).is_err());
    }
}
