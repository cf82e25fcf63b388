//! Pretraining and fine-tuning runs.
//!
//! Four regimes: dense MLM pretraining, pruned MLM pretraining (gradual
//! magnitude pruning over a window of epochs), task fine-tuning with
//! preserved masks, and task fine-tuning that prunes mid-run. Runs are
//! deterministic functions of (config, seed, data).
//!
//! Sequences within a batch are independent given the parameters, so each
//! gets its own graph and the forward/backward passes fan out across
//! threads; per-sequence losses and gradients are combined in a fixed
//! order, weighted by supervised-position counts, which reproduces the
//! whole-batch mean loss exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::corpus::{pad_mask_of, MlmCorpus};
use crate::data::vocab::Vocab;
use crate::data::{MetricKind, QaExample, TaskData, TaskDataset};
use crate::distill::{distill_loss, KdConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{
    bind_params, model_forward, BoundParams, HeadKind, HeadOut, Mode, ModelConfig, ModelParams,
};
use crate::pruning::{gmp_step, GmpState, Interpolation, MaskSet, PruningSchedule};
use crate::tensor::Tensor;
use crate::train::encode::{
    encode_er, encode_qa_label, encode_qa_span, encode_re, pad_to_common_length, EncodedSeq,
    SeqTarget,
};
use crate::train::lr::{boundaries_from_epochs, LrKind, LrSchedule};
use crate::train::mlm::{mlm_mask_batch, IGNORE_INDEX};
use crate::train::optim::{clip_global_norm, GradMap, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    PretrainDense,
    PretrainPrune,
    Finetune,
    FinetunePrune,
}

impl Regime {
    pub fn is_pretrain(&self) -> bool {
        matches!(self, Regime::PretrainDense | Regime::PretrainPrune)
    }

    pub fn prunes(&self) -> bool {
        matches!(self, Regime::PretrainPrune | Regime::FinetunePrune)
    }
}

/// Pruning window in epoch units, resolved to steps at run start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpan {
    pub start_epoch: f64,
    pub end_epoch: f64,
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub events_per_epoch: usize,
    pub interpolation: Interpolation,
}

impl Default for PruneSpan {
    fn default() -> Self {
        PruneSpan {
            start_epoch: 0.0,
            end_epoch: 2.0,
            initial_sparsity: 0.30,
            final_sparsity: 0.90,
            events_per_epoch: 100,
            interpolation: Interpolation::Cubic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub peak_lr: f64,
    pub lr_kind: LrKind,
    /// Cycle boundaries in epoch fractions (cyclic schedules only).
    pub cycle_epochs: Vec<f64>,
    pub kd: Option<KdConfig>,
    pub prune: Option<PruneSpan>,
    pub mlm_prob: f64,
    pub grad_clip: f64,
    pub log_every: usize,
    /// Marks pretraining on the transfer-domain corpus in provenance.
    pub domain_transfer: bool,
}

impl TrainRunConfig {
    /// Dense MLM pretraining: 3 epochs, LR cycling twice per epoch from
    /// 5e-4 to 0. Batch 8 at desk scale (the paper's 256x512-token
    /// batches are out of scope).
    pub fn pretrain_dense(seed: u64) -> Self {
        TrainRunConfig {
            regime: Regime::PretrainDense,
            epochs: 3,
            batch_size: 8,
            seed,
            peak_lr: 5e-4,
            lr_kind: LrKind::Cyclic,
            cycle_epochs: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5],
            kd: None,
            prune: None,
            mlm_prob: 0.15,
            grad_clip: 1.0,
            log_every: 10,
            domain_transfer: false,
        }
    }

    /// Pruned MLM pretraining: prune 30% -> 90% over the first two of
    /// three epochs (100 events per epoch), converge for the third, with
    /// distillation at hardness 0.5 / temperature 2.
    pub fn pretrain_prune(seed: u64) -> Self {
        TrainRunConfig {
            regime: Regime::PretrainPrune,
            kd: Some(KdConfig::pretrain()),
            prune: Some(PruneSpan::default()),
            ..Self::pretrain_dense(seed)
        }
    }

    /// Task fine-tuning: 10 epochs, batch 16, LR decaying linearly from
    /// 5e-5; masks from the initial checkpoint are preserved throughout.
    pub fn finetune(seed: u64) -> Self {
        TrainRunConfig {
            regime: Regime::Finetune,
            epochs: 10,
            batch_size: 16,
            seed,
            peak_lr: 5e-5,
            lr_kind: LrKind::LinearDecay,
            cycle_epochs: Vec::new(),
            kd: None,
            prune: None,
            mlm_prob: 0.15,
            grad_clip: 1.0,
            log_every: 10,
            domain_transfer: false,
        }
    }

    /// Prune during fine-tuning: two dense epochs, six pruning epochs,
    /// two stabilization epochs, with LR cycles at epochs 2 and 8.
    pub fn finetune_prune(seed: u64) -> Self {
        TrainRunConfig {
            regime: Regime::FinetunePrune,
            lr_kind: LrKind::Cyclic,
            cycle_epochs: vec![0.0, 2.0, 8.0],
            prune: Some(PruneSpan {
                start_epoch: 2.0,
                end_epoch: 8.0,
                ..PruneSpan::default()
            }),
            ..Self::finetune(seed)
        }
    }

    /// Data-size ablation fine-tuning: 30 epochs, batch 12, distillation
    /// at hardness 0.8 / temperature 2.
    pub fn data_size_finetune(seed: u64) -> Self {
        TrainRunConfig {
            epochs: 30,
            batch_size: 12,
            kd: Some(KdConfig::data_size_ablation()),
            ..Self::finetune(seed)
        }
    }

    /// Data-size ablation variant that prunes during fine-tuning, cycling
    /// the LR at the start (epoch 2) and end (epoch 20) of pruning.
    pub fn data_size_finetune_prune(seed: u64) -> Self {
        TrainRunConfig {
            epochs: 30,
            batch_size: 12,
            kd: Some(KdConfig::data_size_ablation()),
            regime: Regime::FinetunePrune,
            lr_kind: LrKind::Cyclic,
            cycle_epochs: vec![0.0, 2.0, 20.0],
            prune: Some(PruneSpan {
                start_epoch: 2.0,
                end_epoch: 20.0,
                ..PruneSpan::default()
            }),
            ..Self::finetune(seed)
        }
    }

    pub fn validate(&self, teacher_present: bool) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.regime.prunes() && self.prune.is_none() {
            return Err(Error::Config(format!(
                "regime {:?} requires a prune span",
                self.regime
            )));
        }
        if !self.regime.prunes() && self.prune.is_some() {
            return Err(Error::Config(format!(
                "regime {:?} does not prune but a prune span was given",
                self.regime
            )));
        }
        if let Some(kd) = &self.kd {
            kd.validate()?;
            if !teacher_present {
                return Err(Error::Config(
                    "distillation configured but no teacher checkpoint given".into(),
                ));
            }
        }
        if let Some(p) = &self.prune {
            if p.start_epoch >= p.end_epoch || p.end_epoch > self.epochs as f64 {
                return Err(Error::Config(format!(
                    "prune window [{}, {}] outside run of {} epochs",
                    p.start_epoch, p.end_epoch, self.epochs
                )));
            }
        }
        if self.lr_kind == LrKind::Cyclic && self.cycle_epochs.is_empty() {
            return Err(Error::Config("cyclic schedule without boundaries".into()));
        }
        if !(0.0..=1.0).contains(&self.mlm_prob) {
            return Err(Error::Config(format!(
                "mlm_prob {} outside [0,1]",
                self.mlm_prob
            )));
        }
        Ok(())
    }

    pub fn provenance_label(&self) -> &'static str {
        match (self.regime, self.domain_transfer) {
            (Regime::PretrainDense, false) => "pretrain_dense",
            (Regime::PretrainDense, true) => "domain_pretrain",
            (Regime::PretrainPrune, false) => "pretrain_prune",
            (Regime::PretrainPrune, true) => "domain_pretrain_prune",
            (Regime::Finetune, _) => "finetune",
            (Regime::FinetunePrune, _) => "finetune_prune",
        }
    }
}

/// One log line per logging step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<RunRecord>,
    pub initial_held_out_loss: f64,
    pub final_held_out_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<RunRecord>,
    pub metric: MetricKind,
    pub dev_metric: f64,
    pub test_metric: f64,
}

pub enum InitModel<'a> {
    Fresh { config: ModelConfig, seed: u64 },
    From(&'a Checkpoint),
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k)
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for k in (1..n).rev() {
        let j = rng.random_range(0..k + 1);
        idx.swap(k, j);
    }
    idx
}

fn resolve_lr(
    run: &TrainRunConfig,
    steps_per_epoch: usize,
    total_steps: usize,
) -> Result<LrSchedule> {
    match run.lr_kind {
        LrKind::LinearDecay => Ok(LrSchedule::linear_decay(run.peak_lr, total_steps)),
        LrKind::Cyclic => LrSchedule::cyclic(
            run.peak_lr,
            boundaries_from_epochs(&run.cycle_epochs, steps_per_epoch),
            total_steps,
        ),
    }
}

fn resolve_prune(
    run: &TrainRunConfig,
    steps_per_epoch: usize,
) -> Result<Option<(PruningSchedule, Vec<usize>)>> {
    let Some(span) = &run.prune else {
        return Ok(None);
    };
    let schedule = PruningSchedule {
        initial_sparsity: span.initial_sparsity,
        final_sparsity: span.final_sparsity,
        prune_start_step: (span.start_epoch * steps_per_epoch as f64).round() as usize,
        prune_end_step: (span.end_epoch * steps_per_epoch as f64).round() as usize,
        events_per_epoch: span.events_per_epoch,
        interpolation: span.interpolation,
    };
    schedule.validate()?;
    let events = schedule.event_steps(steps_per_epoch);
    Ok(Some((schedule, events)))
}

fn eval_clone(params: &ModelParams) -> ModelParams {
    let mut p = params.clone();
    for (_, t) in p.iter_mut() {
        t.requires_grad = false;
    }
    p
}

/// Run `f` over eval-mode forwards of `seqs` on one shared graph.
fn eval_batch<F: FnMut(usize, &Graph, HeadOut)>(
    config: &ModelConfig,
    params: &ModelParams,
    masks: &MaskSet,
    seqs: &[(&[usize], &[bool])],
    mut f: F,
) -> Result<()> {
    let eval_params = eval_clone(params);
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, &eval_params, Some(masks));
    for (i, (ids, pad)) in seqs.iter().enumerate() {
        let out = model_forward(&mut graph, &bound, config, ids, pad, &mut Mode::Eval)?;
        f(i, &graph, out);
    }
    Ok(())
}

/// Deterministic held-out MLM loss: mean negative log-likelihood over
/// corrupted positions.
pub fn eval_mlm_loss(
    config: &ModelConfig,
    params: &ModelParams,
    masks: &MaskSet,
    sequences: &[Vec<usize>],
    mlm_prob: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, labels) = mlm_mask_batch(sequences, mlm_prob, config.vocab_size, &mut rng);
    let eval_params = eval_clone(params);

    let results: Vec<Result<(f64, usize)>> = inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(ids, lab)| {
            let count = lab.iter().filter(|&&l| l != IGNORE_INDEX).count();
            if count == 0 {
                return Ok((0.0, 0));
            }
            let pad = pad_mask_of(ids);
            let mut graph = Graph::new();
            let bound = bind_params(&mut graph, &eval_params, Some(masks));
            let out = model_forward(&mut graph, &bound, config, ids, &pad, &mut Mode::Eval)?;
            let HeadOut::Mlm(node) = out else {
                return Err(Error::Config("MLM eval needs an MLM head".into()));
            };
            let ce = graph.cross_entropy(node, lab, Some(IGNORE_INDEX))?;
            Ok((graph.scalar_value(ce) * count as f64, count))
        })
        .collect();

    let mut total_nll = 0.0;
    let mut total_count = 0usize;
    for r in results {
        let (nll, count) = r?;
        total_nll += nll;
        total_count += count;
    }
    Ok(if total_count == 0 {
        0.0
    } else {
        total_nll / total_count as f64
    })
}

/// One training item: a sequence with its supervision.
enum BatchItem {
    Mlm {
        ids: Vec<usize>,
        pad: Vec<bool>,
        labels: Vec<usize>,
    },
    Task(EncodedSeq),
}

struct TeacherCtx<'a> {
    config: &'a ModelConfig,
    params: ModelParams,
    masks: &'a MaskSet,
}

/// Per-sequence forward/backward over a whole batch, in parallel.
/// Returns the batch loss (supervision-weighted mean of per-sequence
/// losses) and the combined gradient map.
fn parallel_batch_step(
    config: &ModelConfig,
    params: &ModelParams,
    masks: &MaskSet,
    teacher: Option<&TeacherCtx>,
    kd: Option<&KdConfig>,
    items: &[BatchItem],
    step_seed: u64,
    step: usize,
) -> Result<(f64, GradMap)> {
    let results: Vec<Result<(f64, usize, GradMap)>> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| seq_forward_backward(config, params, masks, teacher, kd, item, sub_seed(step_seed, i as u64)))
        .collect();

    let mut total_count = 0usize;
    let mut parts = Vec::with_capacity(results.len());
    for r in results {
        let part = r?;
        total_count += part.1;
        parts.push(part);
    }
    if total_count == 0 {
        return Ok((0.0, GradMap::new()));
    }
    let mut loss = 0.0;
    let mut grads = GradMap::new();
    for (l, count, g) in parts {
        if count == 0 {
            continue;
        }
        let w = count as f64 / total_count as f64;
        loss += l * w;
        for (path, src) in g {
            let dst = grads.entry(path).or_insert_with(|| vec![0.0; src.len()]);
            for (d, s) in dst.iter_mut().zip(&src) {
                *d += w * s;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Divergence { step });
    }
    Ok((loss, grads))
}

fn seq_forward_backward(
    config: &ModelConfig,
    params: &ModelParams,
    masks: &MaskSet,
    teacher: Option<&TeacherCtx>,
    kd: Option<&KdConfig>,
    item: &BatchItem,
    dropout_seed: u64,
) -> Result<(f64, usize, GradMap)> {
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params, Some(masks));
    let mut mode = Mode::Train {
        rng: &mut dropout_rng,
    };

    let teacher_logits = |t: &TeacherCtx, ids: &[usize], pad: &[bool]| -> Result<HeadLogits> {
        let mut tg = Graph::new();
        let tb = bind_params(&mut tg, &t.params, Some(t.masks));
        let out = model_forward(&mut tg, &tb, t.config, ids, pad, &mut Mode::Eval)?;
        Ok(match out {
            HeadOut::Mlm(n) | HeadOut::TokenCls(n) | HeadOut::SeqCls(n) => HeadLogits::Rows(
                Tensor::new(tg.shape(n).to_vec(), tg.data(n).to_vec())?,
            ),
            HeadOut::SpanQa { start, end } => HeadLogits::Span(
                Tensor::new(tg.shape(start).to_vec(), tg.data(start).to_vec())?,
                Tensor::new(tg.shape(end).to_vec(), tg.data(end).to_vec())?,
            ),
        })
    };

    let (loss_node, count) = match item {
        BatchItem::Mlm { ids, pad, labels } => {
            let count = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
            if count == 0 {
                return Ok((0.0, 0, GradMap::new()));
            }
            let out = model_forward(&mut graph, &bound, config, ids, pad, &mut mode)?;
            let HeadOut::Mlm(node) = out else { unreachable!() };
            let loss = match (kd, teacher) {
                (Some(kd), Some(t)) => {
                    let HeadLogits::Rows(tl) = teacher_logits(t, ids, pad)? else {
                        unreachable!()
                    };
                    distill_loss(&mut graph, node, &tl, labels, Some(IGNORE_INDEX), kd)?
                }
                _ => graph.cross_entropy(node, labels, Some(IGNORE_INDEX))?,
            };
            (loss, count)
        }
        BatchItem::Task(enc) => {
            let out = model_forward(&mut graph, &bound, config, &enc.ids, &enc.pad, &mut mode)?;
            match (&enc.target, out) {
                (SeqTarget::Token(labels), HeadOut::TokenCls(node)) => {
                    let count = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
                    if count == 0 {
                        return Ok((0.0, 0, GradMap::new()));
                    }
                    let loss = match (kd, teacher) {
                        (Some(kd), Some(t)) => {
                            let HeadLogits::Rows(tl) = teacher_logits(t, &enc.ids, &enc.pad)?
                            else {
                                unreachable!()
                            };
                            distill_loss(&mut graph, node, &tl, labels, Some(IGNORE_INDEX), kd)?
                        }
                        _ => graph.cross_entropy(node, labels, Some(IGNORE_INDEX))?,
                    };
                    (loss, count)
                }
                (SeqTarget::Seq(label), HeadOut::SeqCls(node)) => {
                    let targets = [*label];
                    let loss = match (kd, teacher) {
                        (Some(kd), Some(t)) => {
                            let HeadLogits::Rows(tl) = teacher_logits(t, &enc.ids, &enc.pad)?
                            else {
                                unreachable!()
                            };
                            distill_loss(&mut graph, node, &tl, &targets, Some(IGNORE_INDEX), kd)?
                        }
                        _ => graph.cross_entropy(node, &targets, Some(IGNORE_INDEX))?,
                    };
                    (loss, 1)
                }
                (
                    SeqTarget::Span { start, end },
                    HeadOut::SpanQa {
                        start: sn,
                        end: en,
                    },
                ) => {
                    if *start == IGNORE_INDEX {
                        return Ok((0.0, 0, GradMap::new()));
                    }
                    let (ls, le) = match (kd, teacher) {
                        (Some(kd), Some(t)) => {
                            let HeadLogits::Span(ts, te) = teacher_logits(t, &enc.ids, &enc.pad)?
                            else {
                                unreachable!()
                            };
                            (
                                distill_loss(&mut graph, sn, &ts, &[*start], Some(IGNORE_INDEX), kd)?,
                                distill_loss(&mut graph, en, &te, &[*end], Some(IGNORE_INDEX), kd)?,
                            )
                        }
                        _ => (
                            graph.cross_entropy(sn, &[*start], Some(IGNORE_INDEX))?,
                            graph.cross_entropy(en, &[*end], Some(IGNORE_INDEX))?,
                        ),
                    };
                    let hs = graph.scale(ls, 0.5);
                    let he = graph.scale(le, 0.5);
                    (graph.add(hs, he)?, 1)
                }
                _ => {
                    return Err(Error::Config(
                        "target kind does not match model head".into(),
                    ))
                }
            }
        }
    };

    let loss = graph.scalar_value(loss_node);
    graph.backward(loss_node)?;
    let mut grads = GradMap::new();
    for (path, &leaf) in &bound.leaves {
        if let Some(g) = graph.grad(leaf) {
            grads.insert(path.clone(), g.to_vec());
        }
    }
    Ok((loss, count, grads))
}

enum HeadLogits {
    Rows(Tensor),
    Span(Tensor, Tensor),
}

struct StepEngine {
    params: ModelParams,
    masks: MaskSet,
    opt: OptimizerState,
    schedule: Option<PruningSchedule>,
    events: Vec<usize>,
    lr: LrSchedule,
    grad_clip: f64,
    log_every: usize,
    log: Vec<RunRecord>,
    step: usize,
    total_steps: usize,
}

impl StepEngine {
    fn mask_sparsity(&self) -> f64 {
        let mut total = 0usize;
        let mut masked = 0usize;
        for (_, m) in self.masks.iter() {
            total += m.total();
            masked += m.masked_count();
        }
        if total == 0 {
            0.0
        } else {
            masked as f64 / total as f64
        }
    }

    fn maybe_prune(&mut self) -> Result<()> {
        if let Some(schedule) = &self.schedule {
            if self.events.binary_search(&self.step).is_ok() {
                let mut state = GmpState {
                    step: self.step,
                    masks: std::mem::take(&mut self.masks),
                    schedule: schedule.clone(),
                };
                let res = gmp_step(&mut state, &mut self.params);
                self.masks = state.masks;
                res?;
            }
        }
        Ok(())
    }

    fn apply_grads(&mut self, mut grads: GradMap, loss: f64) {
        for (path, grad) in grads.iter_mut() {
            self.masks.zero_masked(path, grad);
        }
        clip_global_norm(&mut grads, self.grad_clip);
        let lr = self.lr.lr_at(self.step);
        self.opt
            .adam_step(&mut self.params, &grads, lr, Some(&self.masks));
        if self.step % self.log_every == 0 || self.step + 1 == self.total_steps {
            self.log.push(RunRecord {
                step: self.step,
                lr,
                loss,
                sparsity: self.mask_sparsity(),
            });
        }
        self.step += 1;
    }
}

/// MLM pretraining under any pretrain regime. The teacher, when given,
/// provides distillation targets on the corrupted positions.
pub fn pretrain_run(
    corpus: &MlmCorpus,
    run: &TrainRunConfig,
    init: InitModel,
    teacher: Option<&Checkpoint>,
) -> Result<PretrainOutput> {
    if !run.regime.is_pretrain() {
        return Err(Error::Config(format!(
            "pretrain_run got fine-tuning regime {:?}",
            run.regime
        )));
    }
    run.validate(teacher.is_some())?;
    let mut ckpt = match init {
        InitModel::Fresh { config, seed } => Checkpoint::fresh(config, seed)?,
        InitModel::From(c) => {
            if matches!(c.config.head, HeadKind::Mlm) {
                c.clone()
            } else {
                c.with_head(HeadKind::Mlm, sub_seed(run.seed, 0x10))?
            }
        }
    };
    ckpt.validate()?;
    if let Some(t) = teacher {
        if !matches!(t.config.head, HeadKind::Mlm) {
            return Err(Error::Config(
                "pretraining teacher must have an MLM head".into(),
            ));
        }
        if t.config.vocab_size != ckpt.config.vocab_size {
            return Err(Error::Config("teacher/student vocab sizes differ".into()));
        }
    }
    let config = ckpt.config.clone();
    if corpus.seq_len > config.max_seq_len {
        return Err(Error::Config(format!(
            "corpus sequences of {} exceed model max_seq_len {}",
            corpus.seq_len, config.max_seq_len
        )));
    }

    let initial_held_out_loss = eval_mlm_loss(
        &config,
        &ckpt.params,
        &ckpt.masks,
        &corpus.held_out,
        run.mlm_prob,
        sub_seed(run.seed, 4),
    )?;

    if run.epochs == 0 || corpus.train.is_empty() {
        return Ok(PretrainOutput {
            checkpoint: ckpt.clone(),
            log: Vec::new(),
            initial_held_out_loss,
            final_held_out_loss: initial_held_out_loss,
        });
    }

    let steps_per_epoch = corpus.train.len().div_ceil(run.batch_size);
    let total_steps = steps_per_epoch * run.epochs;
    let lr = resolve_lr(run, steps_per_epoch, total_steps)?;
    let (schedule, events) = match resolve_prune(run, steps_per_epoch)? {
        Some((s, e)) => (Some(s), e),
        None => (None, Vec::new()),
    };

    let teacher_ctx = teacher.map(|t| TeacherCtx {
        config: &t.config,
        params: eval_clone(&t.params),
        masks: &t.masks,
    });

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(run.seed, 1));
    let mut mlm_rng = ChaCha8Rng::seed_from_u64(sub_seed(run.seed, 2));

    let mut engine = StepEngine {
        params: ckpt.params.clone(),
        masks: ckpt.masks.clone(),
        opt: OptimizerState::new(),
        schedule,
        events,
        lr,
        grad_clip: run.grad_clip,
        log_every: run.log_every.max(1),
        log: Vec::new(),
        step: 0,
        total_steps,
    };

    for _epoch in 0..run.epochs {
        let order = shuffled_indices(corpus.train.len(), &mut shuffle_rng);
        for batch_idx in order.chunks(run.batch_size) {
            engine.maybe_prune()?;
            let batch: Vec<Vec<usize>> = batch_idx
                .iter()
                .map(|&i| corpus.train[i].clone())
                .collect();
            let (inputs, labels) =
                mlm_mask_batch(&batch, run.mlm_prob, config.vocab_size, &mut mlm_rng);
            let items: Vec<BatchItem> = inputs
                .into_iter()
                .zip(labels)
                .map(|(ids, labels)| {
                    let pad = pad_mask_of(&ids);
                    BatchItem::Mlm { ids, pad, labels }
                })
                .collect();
            let (loss, grads) = parallel_batch_step(
                &config,
                &engine.params,
                &engine.masks,
                teacher_ctx.as_ref(),
                run.kd.as_ref(),
                &items,
                sub_seed(run.seed, 0x1000 + engine.step as u64),
                engine.step,
            )?;
            engine.apply_grads(grads, loss);
        }
    }

    ckpt.params = engine.params;
    ckpt.masks = engine.masks;
    ckpt.provenance.push(run.provenance_label().to_string());
    let final_held_out_loss = eval_mlm_loss(
        &ckpt.config,
        &ckpt.params,
        &ckpt.masks,
        &corpus.held_out,
        run.mlm_prob,
        sub_seed(run.seed, 4),
    )?;
    Ok(PretrainOutput {
        checkpoint: ckpt,
        log: engine.log,
        initial_held_out_loss,
        final_held_out_loss,
    })
}

/// Head kind plus label set for a task dataset.
pub fn task_head(task: &TaskDataset) -> (HeadKind, Vec<String>) {
    let labels = task.label_set();
    match &task.data {
        TaskData::EntityRecognition { .. } => (
            HeadKind::TokenCls {
                classes: labels.len(),
            },
            labels,
        ),
        TaskData::RelationExtraction { .. } => (
            HeadKind::SeqCls {
                classes: labels.len(),
            },
            labels,
        ),
        TaskData::QuestionAnswering { span_style, .. } => {
            if *span_style {
                (HeadKind::SpanQa, Vec::new())
            } else {
                (
                    HeadKind::SeqCls {
                        classes: labels.len(),
                    },
                    labels,
                )
            }
        }
    }
}

fn label_map(labels: &[String]) -> std::collections::BTreeMap<String, usize> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), i))
        .collect()
}

fn encode_split(
    task: &TaskDataset,
    split: Split,
    vocab: &Vocab,
    labels: &[String],
    max_seq_len: usize,
) -> Vec<EncodedSeq> {
    let map = label_map(labels);
    match &task.data {
        TaskData::EntityRecognition { splits } => split
            .of(splits)
            .iter()
            .map(|e| encode_er(e, vocab, &map, max_seq_len))
            .collect(),
        TaskData::RelationExtraction { splits, .. } => split
            .of(splits)
            .iter()
            .map(|e| encode_re(e, vocab, &map, max_seq_len))
            .collect(),
        TaskData::QuestionAnswering { splits, span_style } => split
            .of(splits)
            .iter()
            .map(|e| {
                if *span_style {
                    encode_qa_span(e, vocab, max_seq_len)
                } else {
                    let QaExample::Label {
                        context,
                        question,
                        label,
                    } = e
                    else {
                        panic!("label-style dataset holds a span example")
                    };
                    encode_qa_label(context, question, map[label], vocab, max_seq_len)
                }
            })
            .collect(),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn of<'a, T>(&self, splits: &'a crate::data::Splits<T>) -> &'a [T] {
        match self {
            Split::Train => &splits.train,
            Split::Dev => &splits.dev,
            Split::Test => &splits.test,
        }
    }
}

/// Fine-tune a checkpoint on a task. For pruned initial checkpoints the
/// masks are preserved unchanged; for the pruning regime, gradual
/// magnitude pruning runs over the configured epoch window.
pub fn finetune_run(
    task: &TaskDataset,
    vocab: &Vocab,
    run: &TrainRunConfig,
    init: &Checkpoint,
    teacher: Option<&Checkpoint>,
) -> Result<FinetuneOutput> {
    if run.regime.is_pretrain() {
        return Err(Error::Config(format!(
            "finetune_run got pretraining regime {:?}",
            run.regime
        )));
    }
    run.validate(teacher.is_some())?;
    let (head, labels) = task_head(task);
    let mut ckpt = init.with_head(head, sub_seed(run.seed, 0x10))?;
    ckpt.validate()?;
    let config = ckpt.config.clone();
    if let Some(t) = teacher {
        if t.config.head != config.head {
            return Err(Error::Config(format!(
                "teacher head {:?} does not match task head {:?}",
                t.config.head, config.head
            )));
        }
    }

    let mut train_set = encode_split(task, Split::Train, vocab, &labels, config.max_seq_len);
    // Span answers that fall outside the sequence budget cannot supervise
    // training.
    if matches!(config.head, HeadKind::SpanQa) {
        train_set.retain(
            |e| !matches!(e.target, SeqTarget::Span { start, .. } if start == IGNORE_INDEX),
        );
    }
    if train_set.is_empty() {
        return Err(Error::InvalidInput(
            "no trainable examples after encoding".into(),
        ));
    }

    let steps_per_epoch = train_set.len().div_ceil(run.batch_size);
    let total_steps = steps_per_epoch * run.epochs;
    let lr = resolve_lr(run, steps_per_epoch, total_steps)?;
    let (schedule, events) = match resolve_prune(run, steps_per_epoch)? {
        Some((s, e)) => (Some(s), e),
        None => (None, Vec::new()),
    };

    let teacher_ctx = teacher.map(|t| TeacherCtx {
        config: &t.config,
        params: eval_clone(&t.params),
        masks: &t.masks,
    });

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(run.seed, 1));

    let mut engine = StepEngine {
        params: ckpt.params.clone(),
        masks: ckpt.masks.clone(),
        opt: OptimizerState::new(),
        schedule,
        events,
        lr,
        grad_clip: run.grad_clip,
        log_every: run.log_every.max(1),
        log: Vec::new(),
        step: 0,
        total_steps,
    };

    for _epoch in 0..run.epochs {
        let order = shuffled_indices(train_set.len(), &mut shuffle_rng);
        for batch_idx in order.chunks(run.batch_size) {
            engine.maybe_prune()?;
            let mut batch: Vec<EncodedSeq> =
                batch_idx.iter().map(|&i| train_set[i].clone()).collect();
            if matches!(config.head, HeadKind::SpanQa) {
                pad_to_common_length(&mut batch);
            }
            let items: Vec<BatchItem> = batch.into_iter().map(BatchItem::Task).collect();
            let (loss, grads) = parallel_batch_step(
                &config,
                &engine.params,
                &engine.masks,
                teacher_ctx.as_ref(),
                run.kd.as_ref(),
                &items,
                sub_seed(run.seed, 0x1000 + engine.step as u64),
                engine.step,
            )?;
            engine.apply_grads(grads, loss);
        }
    }

    ckpt.params = engine.params;
    ckpt.masks = engine.masks;
    ckpt.provenance.push(run.provenance_label().to_string());

    let dev_metric = evaluate_checkpoint(&ckpt, task, vocab, Split::Dev)?;
    let test_metric = evaluate_checkpoint(&ckpt, task, vocab, Split::Test)?;
    Ok(FinetuneOutput {
        checkpoint: ckpt,
        log: engine.log,
        metric: task.metric(),
        dev_metric,
        test_metric,
    })
}

/// Evaluate a checkpoint on one split of a task, returning the task
/// metric in [0, 1].
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    task: &TaskDataset,
    vocab: &Vocab,
    split: Split,
) -> Result<f64> {
    use crate::metrics::{compute_metric, Predictions};
    let (head, labels) = task_head(task);
    if ckpt.config.head != head {
        return Err(Error::Config(format!(
            "checkpoint head {:?} incompatible with task head {head:?}",
            ckpt.config.head
        )));
    }
    let encoded = encode_split(task, split, vocab, &labels, ckpt.config.max_seq_len);
    let refs: Vec<(&[usize], &[bool])> = encoded
        .iter()
        .map(|e| (e.ids.as_slice(), e.pad.as_slice()))
        .collect();

    match &task.data {
        TaskData::EntityRecognition { splits } => {
            let examples = split.of(splits);
            let mut preds: Vec<Vec<String>> = Vec::with_capacity(examples.len());
            eval_batch(&ckpt.config, &ckpt.params, &ckpt.masks, &refs, |i, g, out| {
                let HeadOut::TokenCls(node) = out else { unreachable!() };
                let cols = g.shape(node)[1];
                let data = g.data(node);
                let n_words = examples[i].tokens.len();
                let body = encoded[i].ids.len() - 2;
                let mut tags = Vec::with_capacity(n_words);
                for w in 0..n_words {
                    if w < body {
                        let row = &data[(1 + w) * cols..(2 + w) * cols];
                        tags.push(labels[argmax(row)].clone());
                    } else {
                        tags.push("O".to_string());
                    }
                }
                preds.push(tags);
            })?;
            let gold: Vec<Vec<String>> = examples.iter().map(|e| e.tags.clone()).collect();
            compute_metric(
                &Predictions::Tags(preds),
                &Predictions::Tags(gold),
                MetricKind::SpanF1,
                None,
            )
        }
        TaskData::RelationExtraction {
            splits,
            negative_label,
        } => {
            let examples = split.of(splits);
            let mut preds: Vec<String> = Vec::with_capacity(examples.len());
            eval_batch(&ckpt.config, &ckpt.params, &ckpt.masks, &refs, |_, g, out| {
                let HeadOut::SeqCls(node) = out else { unreachable!() };
                preds.push(labels[argmax(g.data(node))].clone());
            })?;
            let gold: Vec<String> = examples.iter().map(|e| e.label.clone()).collect();
            compute_metric(
                &Predictions::Labels(preds),
                &Predictions::Labels(gold),
                MetricKind::F1,
                negative_label.as_deref(),
            )
        }
        TaskData::QuestionAnswering { splits, span_style } => {
            let examples = split.of(splits);
            if *span_style {
                let mut preds: Vec<String> = Vec::with_capacity(examples.len());
                eval_batch(&ckpt.config, &ckpt.params, &ckpt.masks, &refs, |i, g, out| {
                    let HeadOut::SpanQa { start, end } = out else { unreachable!() };
                    let QaExample::Span { context, .. } = &examples[i] else {
                        unreachable!()
                    };
                    preds.push(decode_span_prediction(
                        g.data(start),
                        g.data(end),
                        &encoded[i],
                        context,
                        8,
                    ));
                })?;
                let gold: Vec<Vec<String>> = examples
                    .iter()
                    .map(|e| {
                        let QaExample::Span { answers, .. } = e else { unreachable!() };
                        answers.iter().map(|a| a.text.clone()).collect()
                    })
                    .collect();
                compute_metric(
                    &Predictions::Texts(preds),
                    &Predictions::TextSets(gold),
                    MetricKind::SquadF1,
                    None,
                )
            } else {
                let mut preds: Vec<String> = Vec::with_capacity(examples.len());
                eval_batch(&ckpt.config, &ckpt.params, &ckpt.masks, &refs, |_, g, out| {
                    let HeadOut::SeqCls(node) = out else { unreachable!() };
                    preds.push(labels[argmax(g.data(node))].clone());
                })?;
                let gold: Vec<String> = examples
                    .iter()
                    .map(|e| {
                        let QaExample::Label { label, .. } = e else { unreachable!() };
                        label.clone()
                    })
                    .collect();
                compute_metric(
                    &Predictions::Labels(preds),
                    &Predictions::Labels(gold),
                    MetricKind::Accuracy,
                    None,
                )
            }
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Best (start <= end) context span by summed logits, within a span
/// length cap; returns the answer text.
fn decode_span_prediction(
    start_logits: &[f64],
    end_logits: &[f64],
    enc: &EncodedSeq,
    context: &str,
    max_span_tokens: usize,
) -> String {
    let positions: Vec<usize> = enc.ctx_spans.iter().map(|(p, _)| *p).collect();
    if positions.is_empty() {
        return String::new();
    }
    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    for (i, &s) in positions.iter().enumerate() {
        for &e in positions[i..].iter().take(max_span_tokens) {
            let score = start_logits[s] + end_logits[e];
            if score > best.0 {
                best = (score, s, e);
            }
        }
    }
    let byte_start = enc
        .ctx_spans
        .iter()
        .find(|(p, _)| *p == best.1)
        .map(|(_, (s, _))| *s)
        .unwrap_or(0);
    let byte_end = enc
        .ctx_spans
        .iter()
        .find(|(p, _)| *p == best.2)
        .map(|(_, (_, e))| *e)
        .unwrap_or(0);
    context
        .get(byte_start..byte_end)
        .unwrap_or_default()
        .to_string()
}
