//! The hierarchical policy over architectures.
//!
//! Two cell-level LSTM controllers emit the normal and upsampling cells token
//! by token; a network-level LSTM controller, whose initial state is an
//! affine map of the two cell controllers' final hidden states, picks the
//! upsampling position. Every step feeds the embedding of the previous choice.
//!
//! LSTM gate rows are stacked in the order input, forget, cell, output.
//! All tensors live in one flat [`TensorStore`], so optimizers, gradient
//! checks and checkpoints treat the policy as a single parameter vector.

use ndarray::{s, Array1, ArrayView1, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::searchspace::{
    arch_to_tokens, tokens_to_arch, ArchSpec, CellKind, CellSpec, NodeSpec, SpaceConfig, SpaceError,
};
use crate::tensors::{Slot, TensorStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub embed: usize,
    /// Parameters start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    /// Logits are divided by this before the softmax when set.
    pub temperature: Option<f64>,
    /// Logits become `c * tanh(logits)` when set.
    pub tanh_constant: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { hidden: 100, embed: 32, init_range: 0.1, temperature: None, tanh_constant: None }
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("softmax input contains NaN or +inf")]
    NonFinite,
    #[error("softmax input has no admissible entry")]
    Empty,
    #[error("sample has no trace; score it or sample with tracing on")]
    MissingTrace,
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// Numerically stable softmax. `-inf` entries (masked choices) get zero
/// probability; NaN or `+inf` is an error.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, ControllerError> {
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(ControllerError::NonFinite);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ControllerError::Empty);
    }
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Borrowed weights of one LSTM.
#[derive(Clone, Copy, Debug)]
pub struct LstmView<'a> {
    /// `4H x E`
    pub w_ih: ArrayView2<'a, f64>,
    /// `4H x H`
    pub w_hh: ArrayView2<'a, f64>,
    /// `4H`
    pub bias: ArrayView1<'a, f64>,
}

/// Activations of one LSTM step, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct LstmCache {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    tanh_c: Array1<f64>,
    pub c: Array1<f64>,
    pub h: Array1<f64>,
}

fn lstm_forward(p: &LstmView<'_>, x: ArrayView1<'_, f64>, h: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>) -> LstmCache {
    let hidden = h.len();
    let a = p.w_ih.dot(&x) + p.w_hh.dot(&h) + p.bias;
    let i = a.slice(s![..hidden]).mapv(sigmoid);
    let f = a.slice(s![hidden..2 * hidden]).mapv(sigmoid);
    let g = a.slice(s![2 * hidden..3 * hidden]).mapv(f64::tanh);
    let o = a.slice(s![3 * hidden..]).mapv(sigmoid);
    let c_new = &f * &c + &i * &g;
    let tanh_c = c_new.mapv(f64::tanh);
    let h_new = &o * &tanh_c;
    LstmCache { x: x.to_owned(), h_prev: h.to_owned(), c_prev: c.to_owned(), i, f, g, o, tanh_c, c: c_new, h: h_new }
}

/// One LSTM step: returns `(h', c')`.
pub fn lstm_step(
    p: LstmView<'_>,
    x: ArrayView1<'_, f64>,
    h: ArrayView1<'_, f64>,
    c: ArrayView1<'_, f64>,
) -> Result<(Array1<f64>, Array1<f64>), ControllerError> {
    let hidden = h.len();
    let (rows, in_cols) = p.w_ih.dim();
    if rows != 4 * hidden
        || p.w_hh.dim() != (4 * hidden, hidden)
        || p.bias.len() != 4 * hidden
        || c.len() != hidden
        || x.len() != in_cols
    {
        return Err(ControllerError::Dimension(format!(
            "w_ih {:?}, w_hh {:?}, bias {}, x {}, h {}, c {}",
            p.w_ih.dim(),
            p.w_hh.dim(),
            p.bias.len(),
            x.len(),
            h.len(),
            c.len()
        )));
    }
    let cache = lstm_forward(&p, x, h, c);
    Ok((cache.h, cache.c))
}

/// The three recurrent controllers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ctl {
    Normal = 0,
    Upsample = 1,
    Network = 2,
}

impl Ctl {
    fn for_cell(kind: CellKind) -> Ctl {
        match kind {
            CellKind::Normal => Ctl::Normal,
            CellKind::Upsample => Ctl::Upsample,
        }
    }
}

/// The decision alphabets, one softmax head and embedding table each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Source,
    NormalOp,
    UpsampleOp,
    Position,
}

impl Head {
    fn op_head(kind: CellKind) -> Head {
        match kind {
            CellKind::Normal => Head::NormalOp,
            CellKind::Upsample => Head::UpsampleOp,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LstmSlots {
    w_ih: Slot,
    w_hh: Slot,
    bias: Slot,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    lstm: [LstmSlots; 3],
    start: [Slot; 3],
    embed_source: Slot,
    embed_normal_op: Slot,
    embed_upsample_op: Slot,
    head_source: Slot,
    head_normal_op: Slot,
    head_upsample_op: Slot,
    head_position: Slot,
    bridge_h_w: Slot,
    bridge_h_b: Slot,
    bridge_c_w: Slot,
    bridge_c_b: Slot,
}

impl Layout {
    fn head(&self, head: Head) -> Slot {
        match head {
            Head::Source => self.head_source,
            Head::NormalOp => self.head_normal_op,
            Head::UpsampleOp => self.head_upsample_op,
            Head::Position => self.head_position,
        }
    }

    fn embedding(&self, head: Head) -> Slot {
        match head {
            Head::Source => self.embed_source,
            Head::NormalOp => self.embed_normal_op,
            Head::UpsampleOp => self.embed_upsample_op,
            Head::Position => unreachable!("the position is the final token and is never fed back"),
        }
    }
}

/// All trainable tensors of the hierarchical policy.
///
/// | tensor | shape |
/// |---|---|
/// | `{normal,upsample,network}.lstm.w_ih` | `4H x E` |
/// | `{normal,upsample,network}.lstm.w_hh` | `4H x H` |
/// | `{normal,upsample,network}.lstm.bias` | `4H` |
/// | `{normal,upsample,network}.start` | `E` |
/// | `embed.source` / `embed.normal_op` / `embed.upsample_op` | `(B-1) / 7 / 5 x E` |
/// | `head.source` / `head.normal_op` / `head.upsample_op` / `head.position` | `(B-1) / 7 / 5 / L x H` |
/// | `bridge.{h,c}.weight` | `H x 2H` |
/// | `bridge.{h,c}.bias` | `H` |
///
/// The source head covers the largest predecessor set; rows beyond a node's
/// `t + 2` admissible sources are masked out.
#[derive(Clone, Debug)]
pub struct ControllerParams {
    config: ControllerConfig,
    space: SpaceConfig,
    layout: Layout,
    store: TensorStore,
}

impl PartialEq for ControllerParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.space == other.space && self.store == other.store
    }
}

impl ControllerParams {
    pub fn zeros(space: SpaceConfig, config: ControllerConfig) -> Self {
        let (h, e) = (config.hidden, config.embed);
        let mut store = TensorStore::new();
        let lstm = |store: &mut TensorStore, name: &str| LstmSlots {
            w_ih: store.push(&format!("{name}.lstm.w_ih"), &[4 * h, e]),
            w_hh: store.push(&format!("{name}.lstm.w_hh"), &[4 * h, h]),
            bias: store.push(&format!("{name}.lstm.bias"), &[4 * h]),
        };
        let lstm = [lstm(&mut store, "normal"), lstm(&mut store, "upsample"), lstm(&mut store, "network")];
        let start =
            [store.push("normal.start", &[e]), store.push("upsample.start", &[e]), store.push("network.start", &[e])];
        let layout = Layout {
            lstm,
            start,
            embed_source: store.push("embed.source", &[space.max_sources(), e]),
            embed_normal_op: store.push("embed.normal_op", &[CellKind::Normal.op_count(), e]),
            embed_upsample_op: store.push("embed.upsample_op", &[CellKind::Upsample.op_count(), e]),
            head_source: store.push("head.source", &[space.max_sources(), h]),
            head_normal_op: store.push("head.normal_op", &[CellKind::Normal.op_count(), h]),
            head_upsample_op: store.push("head.upsample_op", &[CellKind::Upsample.op_count(), h]),
            head_position: store.push("head.position", &[space.depth, h]),
            bridge_h_w: store.push("bridge.h.weight", &[h, 2 * h]),
            bridge_h_b: store.push("bridge.h.bias", &[h]),
            bridge_c_w: store.push("bridge.c.weight", &[h, 2 * h]),
            bridge_c_b: store.push("bridge.c.bias", &[h]),
        };
        ControllerParams { config, space, layout, store }
    }

    /// Uniform initialization in `[-init_range, init_range]`.
    pub fn random<R: Rng + ?Sized>(space: SpaceConfig, config: ControllerConfig, rng: &mut R) -> Self {
        let mut params = Self::zeros(space, config);
        let r = config.init_range;
        for v in params.store.data_mut() {
            *v = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        }
        params
    }

    /// Rebuilds parameters from a store with the matching layout.
    pub fn from_store(
        space: SpaceConfig,
        config: ControllerConfig,
        store: TensorStore,
    ) -> Result<Self, ControllerError> {
        let mut params = Self::zeros(space, config);
        if !params.store.same_layout(&store) {
            return Err(ControllerError::Dimension("tensor layout does not match the configuration".into()));
        }
        params.store = store;
        Ok(params)
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn space(&self) -> &SpaceConfig {
        &self.space
    }

    pub fn store(&self) -> &TensorStore {
        &self.store
    }

    pub fn data(&self) -> &[f64] {
        self.store.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.store.data_mut()
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn lstm(&self, ctl: Ctl) -> LstmView<'_> {
        let slots = self.layout.lstm[ctl as usize];
        let d = self.store.data();
        LstmView { w_ih: slots.w_ih.mat(d), w_hh: slots.w_hh.mat(d), bias: slots.bias.vec(d) }
    }

    fn zero_state(&self) -> (Array1<f64>, Array1<f64>) {
        (Array1::zeros(self.config.hidden), Array1::zeros(self.config.hidden))
    }

    fn input_vector(&self, input: InputRef) -> ArrayView1<'_, f64> {
        let d = self.store.data();
        match input {
            InputRef::Start(ctl) => self.layout.start[ctl as usize].vec(d),
            InputRef::Embedding(head, row) => ArrayView1::from(self.layout.embedding(head).row(d, row)),
        }
    }

    fn transform_logits(&self, raw: &Array1<f64>) -> Array1<f64> {
        let mut z = raw.clone();
        if let Some(t) = self.config.temperature {
            z.mapv_inplace(|v| v / t);
        }
        if let Some(c) = self.config.tanh_constant {
            z.mapv_inplace(|v| c * v.tanh());
        }
        z
    }

    fn decide(&self, head: Head, valid: usize, h: &Array1<f64>, choose: &mut dyn FnMut(&[f64]) -> usize) -> Decision {
        let w = self.layout.head(head).mat(self.store.data());
        let raw = w.slice(s![..valid, ..]).dot(h);
        let logits = self.transform_logits(&raw);
        let probs = softmax(logits.as_slice().expect("contiguous")).expect("finite parameters give finite logits");
        let chosen = choose(&probs);
        let lse = log_sum_exp(logits.as_slice().unwrap());
        let log_probs: Vec<f64> = logits.iter().map(|&z| z - lse).collect();
        let entropy = -probs.iter().zip(&log_probs).map(|(p, lp)| p * lp).sum::<f64>();
        Decision { head, raw, probs, log_probs, chosen, entropy }
    }

    fn run_cell(&self, kind: CellKind, choose: &mut dyn FnMut(usize, &[f64]) -> usize) -> CellTrace {
        let ctl = Ctl::for_cell(kind);
        let lstm = self.lstm(ctl);
        let (mut h, mut c) = self.zero_state();
        let mut input = InputRef::Start(ctl);
        let mut steps = Vec::with_capacity(self.space.intermediate_nodes() * 4 + 1);
        let mut slot = 0;
        for t in 0..self.space.intermediate_nodes() {
            for d in 0..4 {
                let fed = input;
                let cache = lstm_forward(&lstm, self.input_vector(fed), h.view(), c.view());
                let (head, valid) =
                    if d % 2 == 0 { (Head::Source, t + 2) } else { (Head::op_head(kind), kind.op_count()) };
                let decision = self.decide(head, valid, &cache.h, &mut |p| choose(slot, p));
                slot += 1;
                h = cache.h.clone();
                c = cache.c.clone();
                input = InputRef::Embedding(head, decision.chosen);
                steps.push(Step { input: fed, lstm: cache, decision: Some(decision) });
            }
        }
        // consume the last choice so the final state summarizes the whole cell
        let cache = lstm_forward(&lstm, self.input_vector(input), h.view(), c.view());
        steps.push(Step { input, lstm: cache, decision: None });
        CellTrace { kind, steps }
    }

    fn run_position(
        &self,
        h_normal: ArrayView1<'_, f64>,
        h_upsample: ArrayView1<'_, f64>,
        choose: &mut dyn FnMut(&[f64]) -> usize,
    ) -> PositionTrace {
        let d = self.store.data();
        let hidden = self.config.hidden;
        let mut z = Array1::zeros(2 * hidden);
        z.slice_mut(s![..hidden]).assign(&h_normal);
        z.slice_mut(s![hidden..]).assign(&h_upsample);
        let h0 = self.layout.bridge_h_w.mat(d).dot(&z) + self.layout.bridge_h_b.vec(d);
        let c0 = self.layout.bridge_c_w.mat(d).dot(&z) + self.layout.bridge_c_b.vec(d);
        let cache = lstm_forward(
            &self.lstm(Ctl::Network),
            self.input_vector(InputRef::Start(Ctl::Network)),
            h0.view(),
            c0.view(),
        );
        let decision = self.decide(Head::Position, self.space.depth, &cache.h, choose);
        PositionTrace { z, step: Step { input: InputRef::Start(Ctl::Network), lstm: cache, decision: Some(decision) } }
    }

    fn run_arch(&self, choose: &mut dyn FnMut(usize, &[f64]) -> usize) -> ArchTrace {
        let per_cell = self.space.intermediate_nodes() * 4;
        let normal = self.run_cell(CellKind::Normal, &mut |slot, p| choose(slot, p));
        let upsample = self.run_cell(CellKind::Upsample, &mut |slot, p| choose(per_cell + slot, p));
        let position = self.run_position(normal.h_last(), upsample.h_last(), &mut |p| choose(2 * per_cell, p));
        ArchTrace { normal, upsample, position }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InputRef {
    Start(Ctl),
    Embedding(Head, usize),
}

#[derive(Clone, Debug)]
struct Decision {
    head: Head,
    raw: Array1<f64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    chosen: usize,
    entropy: f64,
}

#[derive(Clone, Debug)]
struct Step {
    input: InputRef,
    lstm: LstmCache,
    decision: Option<Decision>,
}

/// Forward activations of one cell controller.
#[derive(Clone, Debug)]
pub struct CellTrace {
    kind: CellKind,
    steps: Vec<Step>,
}

impl CellTrace {
    pub fn kind(&self) -> CellKind {
        self.kind
    }

    /// Final hidden state after the whole cell has been consumed.
    pub fn h_last(&self) -> ArrayView1<'_, f64> {
        self.steps.last().expect("cell traces are never empty").lstm.h.view()
    }

    fn decisions(&self) -> impl Iterator<Item = &Decision> {
        self.steps.iter().filter_map(|s| s.decision.as_ref())
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.decisions().map(|d| d.chosen).collect()
    }

    pub fn log_prob(&self) -> f64 {
        self.decisions().map(|d| d.log_probs[d.chosen]).sum()
    }

    pub fn entropy(&self) -> f64 {
        self.decisions().map(|d| d.entropy).sum()
    }

    /// Per-step probability vectors after masking.
    pub fn step_probs(&self) -> Vec<Vec<f64>> {
        self.decisions().map(|d| d.probs.clone()).collect()
    }

    pub fn cell(&self) -> CellSpec {
        let nodes = self
            .tokens()
            .chunks_exact(4)
            .map(|n| NodeSpec::new(n[0] as i32 - 2, n[1] as u8, n[2] as i32 - 2, n[3] as u8))
            .collect();
        CellSpec { kind: self.kind, nodes }
    }
}

/// Forward activations of the network-level controller.
#[derive(Clone, Debug)]
pub struct PositionTrace {
    z: Array1<f64>,
    step: Step,
}

impl PositionTrace {
    fn decision(&self) -> &Decision {
        self.step.decision.as_ref().expect("position step decides")
    }

    /// 1-based position.
    pub fn position(&self) -> usize {
        self.decision().chosen + 1
    }

    pub fn log_prob(&self) -> f64 {
        let d = self.decision();
        d.log_probs[d.chosen]
    }

    pub fn entropy(&self) -> f64 {
        self.decision().entropy
    }

    pub fn probs(&self) -> &[f64] {
        &self.decision().probs
    }
}

#[derive(Clone, Debug)]
pub struct ArchTrace {
    pub normal: CellTrace,
    pub upsample: CellTrace,
    pub position: PositionTrace,
}

impl ArchTrace {
    pub fn step_probs(&self) -> Vec<Vec<f64>> {
        let mut out = self.normal.step_probs();
        out.extend(self.upsample.step_probs());
        out.push(self.position.probs().to_vec());
        out
    }
}

pub struct CellSample {
    pub cell: CellSpec,
    pub log_prob: f64,
    pub entropy: f64,
    pub h_last: Array1<f64>,
    pub trace: Option<CellTrace>,
}

pub struct PositionSample {
    pub position: usize,
    pub log_prob: f64,
    pub entropy: f64,
    pub trace: PositionTrace,
}

/// A sampled (or teacher-forced) architecture with its log-probability and
/// summed per-step entropy under the policy.
#[derive(Clone, Debug)]
pub struct ArchSample {
    pub arch: ArchSpec,
    pub log_prob: f64,
    pub entropy: f64,
    pub trace: Option<ArchTrace>,
}

impl ArchSample {
    fn from_trace(trace: ArchTrace, depth: usize, keep: bool) -> Self {
        let arch = ArchSpec {
            normal_cell: trace.normal.cell(),
            upsample_cell: trace.upsample.cell(),
            position: trace.position.position(),
            depth,
        };
        let log_prob = trace.normal.log_prob() + trace.upsample.log_prob() + trace.position.log_prob();
        let entropy = trace.normal.entropy() + trace.upsample.entropy() + trace.position.entropy();
        ArchSample { arch, log_prob, entropy, trace: keep.then_some(trace) }
    }

    /// Drops the activations, keeping only the architecture and scores.
    pub fn without_trace(mut self) -> Self {
        self.trace = None;
        self
    }
}

fn sampler<'r, R: Rng + ?Sized>(rng: &'r mut R) -> impl FnMut(&[f64]) -> usize + 'r {
    move |probs: &[f64]| WeightedIndex::new(probs).expect("softmax output is a distribution").sample(rng)
}

pub fn sample_cell<R: Rng + ?Sized>(
    kind: CellKind,
    params: &ControllerParams,
    rng: &mut R,
    trace_on: bool,
) -> CellSample {
    let mut pick = sampler(rng);
    let trace = params.run_cell(kind, &mut |_, p| pick(p));
    CellSample {
        cell: trace.cell(),
        log_prob: trace.log_prob(),
        entropy: trace.entropy(),
        h_last: trace.h_last().to_owned(),
        trace: trace_on.then_some(trace),
    }
}

pub fn sample_position<R: Rng + ?Sized>(
    h_normal: ArrayView1<'_, f64>,
    h_upsample: ArrayView1<'_, f64>,
    params: &ControllerParams,
    rng: &mut R,
) -> Result<PositionSample, ControllerError> {
    let hidden = params.config.hidden;
    if h_normal.len() != hidden || h_upsample.len() != hidden {
        return Err(ControllerError::Dimension(format!(
            "hidden states of width {} and {}, expected {hidden}",
            h_normal.len(),
            h_upsample.len()
        )));
    }
    let mut pick = sampler(rng);
    let trace = params.run_position(h_normal, h_upsample, &mut pick);
    Ok(PositionSample { position: trace.position(), log_prob: trace.log_prob(), entropy: trace.entropy(), trace })
}

/// Samples a full architecture: normal cell, upsampling cell, then position.
pub fn sample_arch<R: Rng + ?Sized>(params: &ControllerParams, rng: &mut R) -> ArchSample {
    let mut pick = sampler(rng);
    let trace = params.run_arch(&mut |_, p| pick(p));
    ArchSample::from_trace(trace, params.space.depth, true)
}

/// Teacher-forced log-probability, entropy and trace of a given architecture.
pub fn score_arch(params: &ControllerParams, arch: &ArchSpec) -> Result<ArchSample, ControllerError> {
    let tokens = arch_to_tokens(arch, &params.space)?;
    let trace = params.run_arch(&mut |slot, _| tokens[slot]);
    Ok(ArchSample::from_trace(trace, params.space.depth, true))
}

/// Teacher-forced scoring straight from a token sequence.
pub fn score_tokens(params: &ControllerParams, tokens: &[usize]) -> Result<ArchSample, ControllerError> {
    let arch = tokens_to_arch(tokens, &params.space)?;
    score_arch(params, &arch)
}

/// Gradients laid out exactly like [`ControllerParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerGrads {
    store: TensorStore,
}

impl ControllerGrads {
    pub fn zeros_like(params: &ControllerParams) -> Self {
        ControllerGrads { store: params.store.zeros_like() }
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.store.get(name)
    }

    pub fn data(&self) -> &[f64] {
        self.store.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.store.data_mut()
    }

    pub fn store(&self) -> &TensorStore {
        &self.store
    }

    /// Sums another gradient set into this one.
    pub fn add(&mut self, other: &ControllerGrads) {
        for (a, b) in self.store.data_mut().iter_mut().zip(other.data()) {
            *a += b;
        }
    }
}

fn add_outer(grad: &mut [f64], slot: Slot, rows: usize, left: &Array1<f64>, right: ArrayView1<'_, f64>) {
    for r in 0..rows {
        let l = left[r];
        if l == 0.0 {
            continue;
        }
        for (g, v) in slot.row_mut(grad, r).iter_mut().zip(right.iter()) {
            *g += l * v;
        }
    }
}

fn add_into(grad: &mut [f64], slot: Slot, v: &Array1<f64>) {
    for (g, x) in grad[slot.range()].iter_mut().zip(v.iter()) {
        *g += x;
    }
}

impl ControllerParams {
    /// d objective / d raw logits of one decision, for
    /// `objective = lp_coef * log p(chosen) + ent_coef * entropy`.
    fn decision_grad(&self, d: &Decision, lp_coef: f64, ent_coef: f64) -> Array1<f64> {
        let entropy = d.entropy;
        let mut dz: Array1<f64> = (0..d.probs.len())
            .map(|j| {
                let p = d.probs[j];
                let onehot = if j == d.chosen { 1.0 } else { 0.0 };
                lp_coef * (onehot - p) - ent_coef * p * (d.log_probs[j] + entropy)
            })
            .collect();
        if let Some(c) = self.config.tanh_constant {
            let t = self.config.temperature.unwrap_or(1.0);
            for (g, r) in dz.iter_mut().zip(d.raw.iter()) {
                let th = (r / t).tanh();
                *g *= c * (1.0 - th * th);
            }
        }
        if let Some(t) = self.config.temperature {
            dz.mapv_inplace(|g| g / t);
        }
        dz
    }

    /// Backpropagates one decision head; returns the gradient w.r.t. `h`.
    fn head_backward(
        &self,
        d: &Decision,
        h: &Array1<f64>,
        lp_coef: f64,
        ent_coef: f64,
        grad: &mut [f64],
    ) -> Array1<f64> {
        let dz = self.decision_grad(d, lp_coef, ent_coef);
        let slot = self.layout.head(d.head);
        add_outer(grad, slot, dz.len(), &dz, h.view());
        let w = slot.mat(self.store.data());
        w.slice(s![..dz.len(), ..]).t().dot(&dz)
    }

    /// Backpropagates one LSTM step; returns `(dx, dh_prev, dc_prev)`.
    fn lstm_backward(
        &self,
        ctl: Ctl,
        cache: &LstmCache,
        dh: &Array1<f64>,
        dc: &Array1<f64>,
        grad: &mut [f64],
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let hidden = self.config.hidden;
        let d_o = dh * &cache.tanh_c;
        let dc_total = dc + &(dh * &cache.o * &cache.tanh_c.mapv(|t| 1.0 - t * t));
        let d_i = &dc_total * &cache.g;
        let d_g = &dc_total * &cache.i;
        let d_f = &dc_total * &cache.c_prev;
        let dc_prev = &dc_total * &cache.f;

        let mut da = Array1::zeros(4 * hidden);
        da.slice_mut(s![..hidden]).assign(&(&d_i * &cache.i.mapv(|v| v * (1.0 - v))));
        da.slice_mut(s![hidden..2 * hidden]).assign(&(&d_f * &cache.f.mapv(|v| v * (1.0 - v))));
        da.slice_mut(s![2 * hidden..3 * hidden]).assign(&(&d_g * &cache.g.mapv(|v| 1.0 - v * v)));
        da.slice_mut(s![3 * hidden..]).assign(&(&d_o * &cache.o.mapv(|v| v * (1.0 - v))));

        let slots = self.layout.lstm[ctl as usize];
        add_outer(grad, slots.w_ih, 4 * hidden, &da, cache.x.view());
        add_outer(grad, slots.w_hh, 4 * hidden, &da, cache.h_prev.view());
        add_into(grad, slots.bias, &da);

        let d = self.store.data();
        let dx = slots.w_ih.mat(d).t().dot(&da);
        let dh_prev = slots.w_hh.mat(d).t().dot(&da);
        (dx, dh_prev, dc_prev)
    }

    fn route_input(&self, input: InputRef, dx: &Array1<f64>, grad: &mut [f64]) {
        let target: &mut [f64] = match input {
            InputRef::Start(ctl) => &mut grad[self.layout.start[ctl as usize].range()],
            InputRef::Embedding(head, row) => self.layout.embedding(head).row_mut(grad, row),
        };
        for (g, v) in target.iter_mut().zip(dx.iter()) {
            *g += v;
        }
    }

    fn cell_backward_inner(
        &self,
        trace: &CellTrace,
        dh_last: &Array1<f64>,
        lp_coef: f64,
        ent_coef: f64,
        grad: &mut [f64],
    ) {
        let ctl = Ctl::for_cell(trace.kind);
        let mut dh = dh_last.clone();
        let mut dc = Array1::zeros(self.config.hidden);
        for step in trace.steps.iter().rev() {
            if let Some(decision) = &step.decision {
                dh = dh + self.head_backward(decision, &step.lstm.h, lp_coef, ent_coef, grad);
            }
            let (dx, dh_prev, dc_prev) = self.lstm_backward(ctl, &step.lstm, &dh, &dc, grad);
            self.route_input(step.input, &dx, grad);
            dh = dh_prev;
            dc = dc_prev;
        }
    }
}

/// Accumulates into `grads` the gradient of
/// `lp_coef * log_prob + ent_coef * entropy` for one cell trace scored on its
/// own (no position decision downstream).
pub fn cell_backward(
    params: &ControllerParams,
    trace: &CellTrace,
    lp_coef: f64,
    ent_coef: f64,
    grads: &mut ControllerGrads,
) {
    let zero = Array1::zeros(params.config.hidden);
    params.cell_backward_inner(trace, &zero, lp_coef, ent_coef, grads.store.data_mut());
}

/// Accumulates into `grads` the exact gradient of
/// `lp_coef * log_prob + ent_coef * entropy` of a whole architecture,
/// backpropagated through time across all three controllers and the bridge.
pub fn arch_backward(
    params: &ControllerParams,
    trace: &ArchTrace,
    lp_coef: f64,
    ent_coef: f64,
    grads: &mut ControllerGrads,
) {
    if lp_coef == 0.0 && ent_coef == 0.0 {
        return;
    }
    let grad = grads.store.data_mut();
    let hidden = params.config.hidden;
    let step = &trace.position.step;
    let decision = step.decision.as_ref().expect("position step decides");
    let dh = params.head_backward(decision, &step.lstm.h, lp_coef, ent_coef, grad);
    let (dx, dh0, dc0) = params.lstm_backward(Ctl::Network, &step.lstm, &dh, &Array1::zeros(hidden), grad);
    params.route_input(step.input, &dx, grad);

    let l = &params.layout;
    add_outer(grad, l.bridge_h_w, hidden, &dh0, trace.position.z.view());
    add_into(grad, l.bridge_h_b, &dh0);
    add_outer(grad, l.bridge_c_w, hidden, &dc0, trace.position.z.view());
    add_into(grad, l.bridge_c_b, &dc0);
    let d = params.store.data();
    let dz = l.bridge_h_w.mat(d).t().dot(&dh0) + l.bridge_c_w.mat(d).t().dot(&dc0);
    let dh_normal = dz.slice(s![..hidden]).to_owned();
    let dh_upsample = dz.slice(s![hidden..]).to_owned();

    params.cell_backward_inner(&trace.normal, &dh_normal, lp_coef, ent_coef, grad);
    params.cell_backward_inner(&trace.upsample, &dh_upsample, lp_coef, ent_coef, grad);
}

/// Gradient of `coefficient * (log_prob + entropy_weight * entropy)`.
pub fn controller_backward(
    params: &ControllerParams,
    sample: &ArchSample,
    coefficient: f64,
    entropy_weight: f64,
) -> Result<ControllerGrads, ControllerError> {
    let trace = sample.trace.as_ref().ok_or(ControllerError::MissingTrace)?;
    let mut grads = ControllerGrads::zeros_like(params);
    arch_backward(params, trace, coefficient, coefficient * entropy_weight, &mut grads);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_cell_log_prob(space: &SpaceConfig, ops: usize) -> f64 {
        -(0..space.intermediate_nodes()).map(|t| 2.0 * ((t + 2) as f64).ln()).sum::<f64>()
            - (2 * space.intermediate_nodes()) as f64 * (ops as f64).ln()
    }

    #[test]
    fn zero_lstm_gives_zero_state() {
        let (h, e) = (5, 3);
        let w_ih = Array2::zeros((4 * h, e));
        let w_hh = Array2::zeros((4 * h, h));
        let bias = Array1::zeros(4 * h);
        let p = LstmView { w_ih: w_ih.view(), w_hh: w_hh.view(), bias: bias.view() };
        let x = Array1::from(vec![0.3, -1.0, 2.0]);
        let (h1, c1) = lstm_step(p, x.view(), Array1::zeros(h).view(), Array1::zeros(h).view()).unwrap();
        assert!(h1.iter().chain(c1.iter()).all(|&v| v == 0.0));

        let c0 = Array1::from(vec![1.0, -2.0, 0.5, 4.0, 0.0]);
        let (h1, c1) = lstm_step(p, x.view(), Array1::zeros(h).view(), c0.view()).unwrap();
        for k in 0..h {
            assert!((c1[k] - 0.5 * c0[k]).abs() < 1e-15);
            assert!((h1[k] - 0.5 * (0.5 * c0[k]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_rejects_mismatched_dimensions() {
        let w_ih = Array2::zeros((8, 3));
        let w_hh = Array2::zeros((8, 2));
        let bias = Array1::zeros(8);
        let p = LstmView { w_ih: w_ih.view(), w_hh: w_hh.view(), bias: bias.view() };
        let r = lstm_step(p, Array1::zeros(4).view(), Array1::zeros(2).view(), Array1::zeros(2).view());
        assert!(matches!(r, Err(ControllerError::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let a = softmax(&[1.0, 2.0, -0.5]).unwrap();
        let b = softmax(&[101.0, 102.0, 99.5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        assert!(matches!(softmax(&[f64::NAN, 0.0]), Err(ControllerError::NonFinite)));
        let masked = softmax(&[0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(masked, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_params_give_uniform_cells() {
        let space = SpaceConfig::default();
        let params = ControllerParams::zeros(space, ControllerConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = sample_cell(CellKind::Normal, &params, &mut rng, false);
        let expected = -2.0 * (2f64.ln() + 3f64.ln() + 4f64.ln() + 5f64.ln()) - 8.0 * 7f64.ln();
        assert!((cell.log_prob - expected).abs() < 1e-9);
        assert!((expected + 25.14226).abs() < 1e-5);
        assert!((cell.entropy + expected).abs() < 1e-9);
        assert!(cell.h_last.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_give_uniform_position() {
        let space = SpaceConfig::default();
        let params = ControllerParams::zeros(space, ControllerConfig::default());
        let h = Array1::zeros(100);
        let pos = sample_position(h.view(), h.view(), &params, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!((pos.log_prob + 12f64.ln()).abs() < 1e-12);
        assert!((pos.entropy - 12f64.ln()).abs() < 1e-12);
        assert!((1..=12).contains(&pos.position));
        assert!(pos.trace.probs().iter().all(|p| (p - 1.0 / 12.0).abs() < 1e-15));
        let short = Array1::zeros(10);
        assert!(sample_position(short.view(), h.view(), &params, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn zero_params_full_arch_log_prob() {
        let space = SpaceConfig::default();
        let params = ControllerParams::zeros(space, ControllerConfig::default());
        let sample = sample_arch(&params, &mut ChaCha8Rng::seed_from_u64(5));
        let expected = uniform_cell_log_prob(&space, 7) + uniform_cell_log_prob(&space, 5) - 12f64.ln();
        assert!((sample.log_prob - expected).abs() < 1e-9);
        assert!((sample.entropy + expected).abs() < 1e-9);
        let scored = score_arch(&params, &sample.arch).unwrap();
        assert!((scored.log_prob - expected).abs() < 1e-9);
    }

    #[test]
    fn bridge_carries_cell_state_into_position_logits() {
        let space = SpaceConfig::default();
        let cfg = ControllerConfig::default();
        let params = ControllerParams::random(space, cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let h_u = Array1::from_elem(100, 0.1);
        let mut h_n = Array1::from_elem(100, -0.2);
        let base = params.run_position(h_n.view(), h_u.view(), &mut |_| 0).probs().to_vec();
        h_n[7] += 1e-3;
        let moved = params.run_position(h_n.view(), h_u.view(), &mut |_| 0).probs().to_vec();
        let delta: f64 = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta > 0.0);
    }

    #[test]
    fn zero_coefficient_gives_zero_gradient() {
        let space = SpaceConfig::default();
        let params = ControllerParams::random(space, ControllerConfig::default(), &mut ChaCha8Rng::seed_from_u64(2));
        let sample = sample_arch(&params, &mut ChaCha8Rng::seed_from_u64(4));
        let g = controller_backward(&params, &sample, 0.0, 1.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let bare = sample.without_trace();
        assert!(matches!(controller_backward(&params, &bare, 1.0, 1.0), Err(ControllerError::MissingTrace)));
    }

    #[test]
    fn unused_heads_get_no_gradient() {
        let space = SpaceConfig::default();
        let params = ControllerParams::random(space, ControllerConfig::default(), &mut ChaCha8Rng::seed_from_u64(8));
        let cell = sample_cell(CellKind::Normal, &params, &mut ChaCha8Rng::seed_from_u64(9), true);
        let mut grads = ControllerGrads::zeros_like(&params);
        cell_backward(&params, cell.trace.as_ref().unwrap(), 1.0, 0.0, &mut grads);
        for unused in
            ["head.upsample_op", "head.position", "upsample.lstm.w_ih", "network.lstm.w_hh", "bridge.h.weight"]
        {
            assert!(grads.tensor(unused).unwrap().iter().all(|&v| v == 0.0), "{unused}");
        }
        assert!(grads.tensor("head.normal_op").unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sampled_cells_validate() {
        let space = SpaceConfig::default();
        let params = ControllerParams::random(space, ControllerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = sample_arch(&params, &mut rng);
            assert!(crate::searchspace::validate_arch(&s.arch, &space).is_empty());
            assert!(s.log_prob <= 0.0);
            assert!(s.entropy >= 0.0);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let space = SpaceConfig::default();
        let params = ControllerParams::random(space, ControllerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let a = sample_arch(&params, &mut ChaCha8Rng::seed_from_u64(77));
        let b = sample_arch(&params, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a.arch, b.arch);
        assert_eq!(a.log_prob.to_bits(), b.log_prob.to_bits());
    }

    fn objective(params: &ControllerParams, arch: &ArchSpec, lp: f64, ent: f64) -> f64 {
        let s = score_arch(params, arch).unwrap();
        lp * s.log_prob + ent * s.entropy
    }

    fn check_all_entries(cfg: ControllerConfig, space: SpaceConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ControllerParams::random(space, cfg, &mut rng);
        // larger weights exercise the nonlinearities away from zero
        for v in params.data_mut() {
            *v *= 5.0;
        }
        let sample = sample_arch(&params, &mut rng);
        let (lp, ent) = (0.7, -0.4);
        let mut grads = ControllerGrads::zeros_like(&params);
        arch_backward(&params, sample.trace.as_ref().unwrap(), lp, ent, &mut grads);
        let eps = 1e-5;
        for i in 0..params.len() {
            let orig = params.data()[i];
            params.data_mut()[i] = orig + eps;
            let up = objective(&params, &sample.arch, lp, ent);
            params.data_mut()[i] = orig - eps;
            let down = objective(&params, &sample.arch, lp, ent);
            params.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "entry {i}: analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_small() {
        let cfg = ControllerConfig { hidden: 4, embed: 3, ..ControllerConfig::default() };
        check_all_entries(cfg, SpaceConfig { nodes: 4, depth: 3 }, 21);
    }

    #[test]
    fn gradients_match_with_temperature_and_tanh() {
        let cfg = ControllerConfig {
            hidden: 3,
            embed: 2,
            temperature: Some(1.7),
            tanh_constant: Some(2.5),
            ..ControllerConfig::default()
        };
        check_all_entries(cfg, SpaceConfig { nodes: 4, depth: 4 }, 5);
    }
}
