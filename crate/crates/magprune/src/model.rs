//! Miniature BERT-style encoder with a masked-LM head and three task
//! heads. Pre-norm residual layout, learned absolute position embeddings,
//! GELU feed-forward blocks.
//!
//! Prunable components are exactly the 2-D weight matrices of the
//! Q/K/V/output projections and the two FFN matrices of every layer.
//! Embeddings, biases, layer norms and task heads are never pruned.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::pruning::MaskSet;
use crate::tensor::Tensor;

/// Output head attached to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Mlm,
    TokenCls { classes: usize },
    SeqCls { classes: usize },
    SpanQa,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Mlm => "mlm",
            HeadKind::TokenCls { .. } => "token_cls",
            HeadKind::SeqCls { .. } => "seq_cls",
            HeadKind::SpanQa => "span_qa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub head: HeadKind,
    /// Dropout on hidden states (sublayer outputs); 0 disables.
    pub dropout: f64,
}

impl ModelConfig {
    /// Toy defaults: 4 layers of width 64.
    pub fn toy(vocab_size: usize, head: HeadKind) -> Self {
        ModelConfig {
            vocab_size,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 64,
            head,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.hidden_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.ffn_dim == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim / self.num_heads < 4 {
            return Err(Error::Config(format!(
                "per-head dim {} below 4",
                self.hidden_dim / self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        match self.head {
            HeadKind::TokenCls { classes } | HeadKind::SeqCls { classes } if classes == 0 => {
                Err(Error::Config("head needs at least one class".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Every parameter path with its shape and class, in path order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let h = self.hidden_dim;
        let mut specs = vec![
            ParamSpec::weight("embed.token.weight", vec![self.vocab_size, h]),
            ParamSpec::weight("embed.pos.weight", vec![self.max_seq_len, h]),
        ];
        for i in 0..self.num_layers {
            let p = |s: &str| format!("layer.{i}.{s}");
            specs.push(ParamSpec::ln_gamma(p("ln1.gamma"), h));
            specs.push(ParamSpec::ln_beta(p("ln1.beta"), h));
            for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                specs.push(ParamSpec::weight(p(&format!("attn.{proj}.weight")), vec![h, h]));
                specs.push(ParamSpec::bias(p(&format!("attn.{proj}.bias")), h));
            }
            specs.push(ParamSpec::ln_gamma(p("ln2.gamma"), h));
            specs.push(ParamSpec::ln_beta(p("ln2.beta"), h));
            specs.push(ParamSpec::weight(p("ffn.w_in.weight"), vec![h, self.ffn_dim]));
            specs.push(ParamSpec::bias(p("ffn.w_in.bias"), self.ffn_dim));
            specs.push(ParamSpec::weight(p("ffn.w_out.weight"), vec![self.ffn_dim, h]));
            specs.push(ParamSpec::bias(p("ffn.w_out.bias"), h));
        }
        specs.push(ParamSpec::ln_gamma("final_ln.gamma".into(), h));
        specs.push(ParamSpec::ln_beta("final_ln.beta".into(), h));
        match self.head {
            HeadKind::Mlm => {
                specs.push(ParamSpec::weight("head.mlm.weight", vec![h, self.vocab_size]));
                specs.push(ParamSpec::bias("head.mlm.bias".into(), self.vocab_size));
            }
            HeadKind::TokenCls { classes } => {
                specs.push(ParamSpec::weight("head.token_cls.weight", vec![h, classes]));
                specs.push(ParamSpec::bias("head.token_cls.bias".into(), classes));
            }
            HeadKind::SeqCls { classes } => {
                specs.push(ParamSpec::weight("head.seq_cls.weight", vec![h, classes]));
                specs.push(ParamSpec::bias("head.seq_cls.bias".into(), classes));
            }
            HeadKind::SpanQa => {
                specs.push(ParamSpec::weight("head.span_qa.weight", vec![h, 2]));
                specs.push(ParamSpec::bias("head.span_qa.bias".into(), 2));
            }
        }
        specs
    }

    /// Total prunable (encoder weight matrix) parameter count.
    pub fn prunable_parameter_count(&self) -> usize {
        self.param_specs()
            .iter()
            .filter(|s| is_prunable_path(&s.path))
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    Weight,
    Bias,
    LnGamma,
    LnBeta,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub class: ParamClass,
}

impl ParamSpec {
    fn weight(path: impl Into<String>, shape: Vec<usize>) -> Self {
        ParamSpec { path: path.into(), shape, class: ParamClass::Weight }
    }
    fn bias(path: String, len: usize) -> Self {
        ParamSpec { path, shape: vec![len], class: ParamClass::Bias }
    }
    fn ln_gamma(path: String, len: usize) -> Self {
        ParamSpec { path, shape: vec![len], class: ParamClass::LnGamma }
    }
    fn ln_beta(path: String, len: usize) -> Self {
        ParamSpec { path, shape: vec![len], class: ParamClass::LnBeta }
    }
}

/// A path is prunable iff it names an encoder projection or FFN weight
/// matrix. Embeddings, biases, layer norms and heads never match.
pub fn is_prunable_path(path: &str) -> bool {
    path.starts_with("layer.")
        && path.ends_with(".weight")
        && (path.contains(".attn.") || path.contains(".ffn."))
}

/// Weight decay applies to 2-D weight matrices (including embeddings and
/// heads), never to biases or layer-norm parameters.
pub fn is_decayed_path(path: &str) -> bool {
    path.ends_with(".weight")
}

/// Named parameter collection. Paths are ordered, so iteration (and
/// everything serialized from it) is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Truncated-normal init (std 0.02, clipped at two standard
    /// deviations) for weights, ones/zeros for layer norms, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunc_normal = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break 0.02 * z;
                    }
                })
                .collect()
        };
        let mut tensors = BTreeMap::new();
        for spec in config.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data = match spec.class {
                ParamClass::Weight => trunc_normal(n),
                ParamClass::Bias | ParamClass::LnBeta => vec![0.0; n],
                ParamClass::LnGamma => vec![1.0; n],
            };
            let mut t = Tensor::new(spec.shape, data).expect("spec shapes are consistent");
            t.requires_grad = true;
            tensors.insert(spec.path, t);
        }
        ModelParams { tensors }
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn insert(&mut self, path: String, tensor: Tensor) {
        self.tensors.insert(path, tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn prunable_paths(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|p| is_prunable_path(p))
            .cloned()
            .collect()
    }

    pub fn total_parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Forward-pass mode: training applies dropout from the provided rng.
pub enum Mode<'r> {
    Eval,
    Train { rng: &'r mut ChaCha8Rng },
}

/// Parameter tensors registered on a graph. `leaves` carry gradients;
/// `effective` are the mask-multiplied nodes actually used by the math.
pub struct BoundParams {
    pub leaves: BTreeMap<String, NodeId>,
    effective: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn node(&self, path: &str) -> NodeId {
        *self
            .effective
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"))
    }

    pub fn leaf(&self, path: &str) -> NodeId {
        self.leaves[path]
    }
}

/// Register every parameter as a graph leaf. Prunable components with a
/// mask are multiplied by the 0/1 mask before use, so masked weights act
/// as exact zeros in every matmul and their leaf gradients are zeroed by
/// the same multiplication on the way back.
pub fn bind_params(graph: &mut Graph, params: &ModelParams, masks: Option<&MaskSet>) -> BoundParams {
    let mut leaves = BTreeMap::new();
    let mut effective = BTreeMap::new();
    for (path, tensor) in params.iter() {
        let leaf = graph.leaf(tensor);
        let node = match masks.and_then(|m| m.get(path)) {
            Some(mask) => {
                let mult = graph.constant(tensor.shape.clone(), mask.to_multiplier());
                graph.mul(leaf, mult).expect("mask congruent to weights")
            }
            None => leaf,
        };
        leaves.insert(path.clone(), leaf);
        effective.insert(path.clone(), node);
    }
    BoundParams { leaves, effective }
}

/// Scaled dot-product attention for one head:
/// `softmax(Q Kᵀ / sqrt(d) + pad penalties) V`. Padded key positions
/// receive an additive -1e9 penalty and so ~zero attention weight.
pub fn attention(
    graph: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    pad_mask: &[bool],
) -> Result<NodeId> {
    let s = graph.shape(q)[0];
    let d = graph.shape(q)[1];
    if graph.shape(k) != [s, d] || graph.shape(v)[0] != s {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: graph.shape(q).to_vec(),
            rhs: graph.shape(k).to_vec(),
        });
    }
    if pad_mask.len() != s {
        return Err(Error::InvalidInput(format!(
            "attention: pad mask of {} for {s} positions",
            pad_mask.len()
        )));
    }
    let kt = graph.transpose(k)?;
    let scores = graph.matmul(q, kt)?;
    let scores = graph.scale(scores, 1.0 / (d as f64).sqrt());
    let scores = if pad_mask.iter().any(|&keep| !keep) {
        let mut penalty = vec![0.0; s * s];
        for (j, &keep) in pad_mask.iter().enumerate() {
            if !keep {
                for i in 0..s {
                    penalty[i * s + j] = -1e9;
                }
            }
        }
        let penalty = graph.constant(vec![s, s], penalty);
        graph.add(scores, penalty)?
    } else {
        scores
    };
    let weights = graph.softmax(scores, 1)?;
    graph.matmul(weights, v)
}

fn linear(graph: &mut Graph, x: NodeId, bound: &BoundParams, prefix: &str) -> Result<NodeId> {
    let w = bound.node(&format!("{prefix}.weight"));
    let b = bound.node(&format!("{prefix}.bias"));
    let y = graph.matmul(x, w)?;
    graph.add_bias(y, b)
}

fn dropout(graph: &mut Graph, x: NodeId, rate: f64, mode: &mut Mode) -> NodeId {
    let Mode::Train { rng } = mode else {
        return x;
    };
    if rate == 0.0 {
        return x;
    }
    use rand::Rng;
    let shape = graph.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = graph.constant(shape, mask);
    graph.mul(x, mask).expect("dropout mask congruent")
}

/// One pre-norm encoder block: `x + MHA(LN1(x))`, then `+ FFN(LN2(.))`.
/// Heads are computed independently on column slices and concatenated
/// before the output projection.
pub fn encoder_layer_forward(
    graph: &mut Graph,
    x: NodeId,
    bound: &BoundParams,
    config: &ModelConfig,
    layer: usize,
    pad_mask: &[bool],
    mode: &mut Mode,
) -> Result<NodeId> {
    let p = |s: &str| format!("layer.{layer}.{s}");
    let d = config.head_dim();

    let ln1 = graph.layer_norm(
        x,
        bound.node(&p("ln1.gamma")),
        bound.node(&p("ln1.beta")),
        1e-12,
    )?;
    let q = linear(graph, ln1, bound, &p("attn.q_proj"))?;
    let k = linear(graph, ln1, bound, &p("attn.k_proj"))?;
    let v = linear(graph, ln1, bound, &p("attn.v_proj"))?;
    let mut heads = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let qh = graph.slice_cols(q, h * d, d)?;
        let kh = graph.slice_cols(k, h * d, d)?;
        let vh = graph.slice_cols(v, h * d, d)?;
        heads.push(attention(graph, qh, kh, vh, pad_mask)?);
    }
    let concat = graph.concat_cols(&heads)?;
    let attn_out = linear(graph, concat, bound, &p("attn.out_proj"))?;
    let attn_out = dropout(graph, attn_out, config.dropout, mode);
    let x = graph.add(x, attn_out)?;

    let ln2 = graph.layer_norm(
        x,
        bound.node(&p("ln2.gamma")),
        bound.node(&p("ln2.beta")),
        1e-12,
    )?;
    let hidden = linear(graph, ln2, bound, &p("ffn.w_in"))?;
    let hidden = graph.gelu(hidden);
    let ffn_out = linear(graph, hidden, bound, &p("ffn.w_out"))?;
    let ffn_out = dropout(graph, ffn_out, config.dropout, mode);
    graph.add(x, ffn_out)
}

/// Head logits for one sequence.
#[derive(Debug, Clone, Copy)]
pub enum HeadOut {
    /// `[s, vocab]`
    Mlm(NodeId),
    /// `[s, classes]`
    TokenCls(NodeId),
    /// `[1, classes]`, pooled from the first token.
    SeqCls(NodeId),
    /// Two `[1, s]` rows of start/end logits, pad positions penalized.
    SpanQa { start: NodeId, end: NodeId },
}

impl HeadOut {
    pub fn primary(&self) -> NodeId {
        match self {
            HeadOut::Mlm(n) | HeadOut::TokenCls(n) | HeadOut::SeqCls(n) => *n,
            HeadOut::SpanQa { start, .. } => *start,
        }
    }
}

/// Encoder stack over one token sequence, returning the final hidden
/// states `[s, hidden]`.
pub fn encoder_forward(
    graph: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    token_ids: &[usize],
    pad_mask: &[bool],
    mode: &mut Mode,
) -> Result<NodeId> {
    let s = token_ids.len();
    if s == 0 || s > config.max_seq_len {
        return Err(Error::InvalidInput(format!(
            "sequence length {s} outside [1, {}]",
            config.max_seq_len
        )));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token id {bad} out of range for vocab {}",
            config.vocab_size
        )));
    }
    if pad_mask.len() != s {
        return Err(Error::InvalidInput(format!(
            "pad mask of {} for {s} tokens",
            pad_mask.len()
        )));
    }
    let tok = graph.gather(bound.node("embed.token.weight"), token_ids)?;
    let positions: Vec<usize> = (0..s).collect();
    let pos = graph.gather(bound.node("embed.pos.weight"), &positions)?;
    let mut x = graph.add(tok, pos)?;
    for layer in 0..config.num_layers {
        x = encoder_layer_forward(graph, x, bound, config, layer, pad_mask, mode)?;
    }
    graph.layer_norm(
        x,
        bound.node("final_ln.gamma"),
        bound.node("final_ln.beta"),
        1e-12,
    )
}

/// Full forward for one sequence: encoder plus the configured head.
pub fn model_forward(
    graph: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    token_ids: &[usize],
    pad_mask: &[bool],
    mode: &mut Mode,
) -> Result<HeadOut> {
    let hidden = encoder_forward(graph, bound, config, token_ids, pad_mask, mode)?;
    let s = token_ids.len();
    match config.head {
        HeadKind::Mlm => Ok(HeadOut::Mlm(linear(graph, hidden, bound, "head.mlm")?)),
        HeadKind::TokenCls { .. } => Ok(HeadOut::TokenCls(linear(
            graph,
            hidden,
            bound,
            "head.token_cls",
        )?)),
        HeadKind::SeqCls { .. } => {
            let first = graph.gather(hidden, &[0])?;
            Ok(HeadOut::SeqCls(linear(graph, first, bound, "head.seq_cls")?))
        }
        HeadKind::SpanQa => {
            let logits = linear(graph, hidden, bound, "head.span_qa")?;
            let mut penalty = vec![0.0; s];
            for (j, &keep) in pad_mask.iter().enumerate() {
                if !keep {
                    penalty[j] = -1e9;
                }
            }
            let pen = graph.constant(vec![1, s], penalty);
            let start_col = graph.slice_cols(logits, 0, 1)?;
            let end_col = graph.slice_cols(logits, 1, 1)?;
            let start_row = graph.transpose(start_col)?;
            let end_row = graph.transpose(end_col)?;
            let start = graph.add(start_row, pen)?;
            let end = graph.add(end_row, pen)?;
            Ok(HeadOut::SpanQa { start, end })
        }
    }
}

/// Build a one-off graph and run a single sequence in eval mode,
/// returning the logits data of every head output.
pub fn eval_logits(
    config: &ModelConfig,
    params: &ModelParams,
    masks: Option<&MaskSet>,
    token_ids: &[usize],
    pad_mask: &[bool],
) -> Result<EvalLogits> {
    let mut graph = Graph::new();
    let mut eval_params = params.clone();
    for (_, t) in eval_params.iter_mut() {
        t.requires_grad = false;
    }
    let bound = bind_params(&mut graph, &eval_params, masks);
    let out = model_forward(
        &mut graph,
        &bound,
        config,
        token_ids,
        pad_mask,
        &mut Mode::Eval,
    )?;
    Ok(match out {
        HeadOut::Mlm(n) | HeadOut::TokenCls(n) | HeadOut::SeqCls(n) => EvalLogits::Rows {
            rows: graph.shape(n)[0],
            cols: graph.shape(n)[1],
            data: graph.data(n).to_vec(),
        },
        HeadOut::SpanQa { start, end } => EvalLogits::Span {
            start: graph.data(start).to_vec(),
            end: graph.data(end).to_vec(),
        },
    })
}

#[derive(Debug, Clone)]
pub enum EvalLogits {
    Rows { rows: usize, cols: usize, data: Vec<f64> },
    Span { start: Vec<f64>, end: Vec<f64> },
}
