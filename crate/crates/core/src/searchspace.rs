//! The two-level search space: cell DAGs, candidate operations, the
//! network-level position of the upsampling cell, and the token encoding
//! the controller emits.
//!
//! A cell has `B` nodes. Nodes `-2` and `-1` are the outputs of the two
//! preceding layers; the remaining `B - 2` intermediate nodes each combine two
//! earlier nodes through one operation per edge. The cell output is the
//! channel concatenation of every intermediate node.
//!
//! `B` is not stated directly for the reference configuration; the default of
//! six nodes follows from a per-operation width of 8 channels concatenating to
//! 32 channels.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Candidate operations of the normal (resolution preserving) cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormalOp {
    Identity,
    DilConv3x3,
    DilConv5x5,
    SepConv3x3,
    SepConv5x5,
    /// Up- and down-projection block.
    Udpb,
    /// Residual channel attention block.
    Rcab,
}

/// Candidate operations of the upsampling cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UpsampleOp {
    AreaInterp,
    BilinearInterp,
    NearestInterp,
    SubPixel,
    Deconv,
}

impl NormalOp {
    pub const COUNT: usize = 7;
    pub const ALL: [NormalOp; 7] = [
        NormalOp::Identity,
        NormalOp::DilConv3x3,
        NormalOp::DilConv5x5,
        NormalOp::SepConv3x3,
        NormalOp::SepConv5x5,
        NormalOp::Udpb,
        NormalOp::Rcab,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            NormalOp::Identity => "identity",
            NormalOp::DilConv3x3 => "dil_conv_3x3",
            NormalOp::DilConv5x5 => "dil_conv_5x5",
            NormalOp::SepConv3x3 => "sep_conv_3x3",
            NormalOp::SepConv5x5 => "sep_conv_5x5",
            NormalOp::Udpb => "udpb",
            NormalOp::Rcab => "rcab",
        }
    }
}

impl UpsampleOp {
    pub const COUNT: usize = 5;
    pub const ALL: [UpsampleOp; 5] = [
        UpsampleOp::AreaInterp,
        UpsampleOp::BilinearInterp,
        UpsampleOp::NearestInterp,
        UpsampleOp::SubPixel,
        UpsampleOp::Deconv,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            UpsampleOp::AreaInterp => "area",
            UpsampleOp::BilinearInterp => "bilinear",
            UpsampleOp::NearestInterp => "nearest",
            UpsampleOp::SubPixel => "sub_pixel",
            UpsampleOp::Deconv => "deconv",
        }
    }
}

/// Which of the two cell types a [`CellSpec`] describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Upsample,
}

impl CellKind {
    /// Size of the operation alphabet for this cell kind.
    pub fn op_count(self) -> usize {
        match self {
            CellKind::Normal => NormalOp::COUNT,
            CellKind::Upsample => UpsampleOp::COUNT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Upsample => "upsample",
        }
    }
}

/// An operation of either cell kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Normal(NormalOp),
    Upsample(UpsampleOp),
}

impl Op {
    pub fn from_code(kind: CellKind, code: u8) -> Result<Op, UnknownOp> {
        let op = match kind {
            CellKind::Normal => NormalOp::from_code(code).map(Op::Normal),
            CellKind::Upsample => UpsampleOp::from_code(code).map(Op::Upsample),
        };
        op.ok_or(UnknownOp { kind, code: code.to_string() })
    }

    pub fn from_name(kind: CellKind, name: &str) -> Result<Op, UnknownOp> {
        let found = match kind {
            CellKind::Normal => NormalOp::ALL.iter().find(|o| o.name() == name).map(|&o| Op::Normal(o)),
            CellKind::Upsample => UpsampleOp::ALL.iter().find(|o| o.name() == name).map(|&o| Op::Upsample(o)),
        };
        found.ok_or(UnknownOp { kind, code: name.to_string() })
    }

    pub fn code(self) -> u8 {
        match self {
            Op::Normal(op) => op.code(),
            Op::Upsample(op) => op.code(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Op::Normal(op) => op.name(),
            Op::Upsample(op) => op.name(),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("unknown {} operation {code:?}", kind.name())]
pub struct UnknownOp {
    pub kind: CellKind,
    pub code: String,
}

/// One intermediate node: two ordered `(source, operation)` edges.
///
/// Sources use the cell-local numbering `-2, -1, 0, 1, ...`; operation codes
/// index the alphabet of the owning cell's kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeSpec {
    pub src_a: i32,
    pub op_a: u8,
    pub src_b: i32,
    pub op_b: u8,
}

impl NodeSpec {
    pub fn new(src_a: i32, op_a: u8, src_b: i32, op_b: u8) -> Self {
        NodeSpec { src_a, op_a, src_b, op_b }
    }

    /// The two edges in sampling order.
    pub fn edges(&self) -> [(i32, u8); 2] {
        [(self.src_a, self.op_a), (self.src_b, self.op_b)]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CellSpec {
    pub kind: CellKind,
    pub nodes: Vec<NodeSpec>,
}

impl CellSpec {
    /// Every node reads node `-2` through operation code 0.
    pub fn zero(kind: CellKind, intermediates: usize) -> Self {
        CellSpec { kind, nodes: vec![NodeSpec::new(-2, 0, -2, 0); intermediates] }
    }

    /// All edges as `(node index, source, operation)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, i32, Op)> + '_ {
        self.nodes.iter().enumerate().flat_map(move |(t, node)| {
            node.edges().into_iter().map(move |(src, code)| {
                let op = Op::from_code(self.kind, code).expect("edge op validated");
                (t, src, op)
            })
        })
    }
}

/// A complete architecture: both cells plus the 1-based layer index of the
/// upsampling cell inside a network of `depth` layers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub normal_cell: CellSpec,
    pub upsample_cell: CellSpec,
    pub position: usize,
    pub depth: usize,
}

impl ArchSpec {
    /// Number of normal layers before the upsampling cell.
    pub fn layers_before(&self) -> usize {
        self.position.saturating_sub(1)
    }

    /// Number of normal layers after the upsampling cell.
    pub fn layers_after(&self) -> usize {
        self.depth.saturating_sub(self.position)
    }

    /// The canonical all-zero architecture at position 1.
    pub fn zero(cfg: &SpaceConfig) -> Self {
        ArchSpec {
            normal_cell: CellSpec::zero(CellKind::Normal, cfg.intermediate_nodes()),
            upsample_cell: CellSpec::zero(CellKind::Upsample, cfg.intermediate_nodes()),
            position: 1,
            depth: cfg.depth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceConfig {
    /// Total nodes per cell, including the two input nodes.
    pub nodes: usize,
    /// Total layers in the network.
    pub depth: usize,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig { nodes: 6, depth: 12 }
    }
}

impl SpaceConfig {
    pub fn new(nodes: usize, depth: usize) -> Result<Self, SpaceError> {
        let cfg = SpaceConfig { nodes, depth };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), SpaceError> {
        if self.nodes < 3 {
            return Err(SpaceError::Config(format!("cells need at least 3 nodes, got {}", self.nodes)));
        }
        if self.depth < 1 {
            return Err(SpaceError::Config("depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn intermediate_nodes(&self) -> usize {
        self.nodes - 2
    }

    /// Largest number of source choices any node has (`B - 1`).
    pub fn max_sources(&self) -> usize {
        self.nodes - 1
    }

    /// Token sequence length: four tokens per node per cell, plus the position.
    pub fn token_len(&self) -> usize {
        2 * self.intermediate_nodes() * 4 + 1
    }

    /// Alphabet size for every token slot, in layout order.
    pub fn slot_alphabets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.token_len());
        for kind in [CellKind::Normal, CellKind::Upsample] {
            for t in 0..self.intermediate_nodes() {
                let srcs = t + 2;
                out.extend_from_slice(&[srcs, kind.op_count(), srcs, kind.op_count()]);
            }
        }
        out.push(self.depth);
        out
    }
}

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("invalid space configuration: {0}")]
    Config(String),
    #[error("invalid architecture: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("expected {expected} tokens, got {got}")]
    TokenLength { expected: usize, got: usize },
    #[error("token {index} has value {value}, outside alphabet 0..{alphabet}")]
    TokenOutOfRange { index: usize, value: usize, alphabet: usize },
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error(transparent)]
    UnknownOp(#[from] UnknownOp),
    #[error("malformed architecture JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// A single broken invariant, naming the offending field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn validate_cell(cell: &CellSpec, expected: CellKind, cfg: &SpaceConfig, field: &str, out: &mut Vec<Violation>) {
    if cell.kind != expected {
        out.push(Violation { field: format!("{field}.kind"), message: format!("expected a {} cell", expected.name()) });
    }
    if cell.nodes.len() != cfg.intermediate_nodes() {
        out.push(Violation {
            field: format!("{field}.nodes"),
            message: format!("expected {} intermediate nodes, got {}", cfg.intermediate_nodes(), cell.nodes.len()),
        });
    }
    let ops = expected.op_count();
    for (t, node) in cell.nodes.iter().enumerate() {
        for (slot, (src, op)) in ["a", "b"].iter().zip(node.edges()) {
            if src < -2 {
                out.push(Violation {
                    field: format!("{field}.nodes[{t}].src_{slot}"),
                    message: format!("source {src} below input node -2"),
                });
            } else if src >= t as i32 {
                out.push(Violation {
                    field: format!("{field}.nodes[{t}].src_{slot}"),
                    message: format!("forward reference to node {src}"),
                });
            }
            if op as usize >= ops {
                out.push(Violation {
                    field: format!("{field}.nodes[{t}].op_{slot}"),
                    message: format!("op code {op} outside 0..{ops}"),
                });
            }
        }
    }
}

/// Checks every cell and network-level invariant. An empty list means valid.
pub fn validate_arch(arch: &ArchSpec, cfg: &SpaceConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    validate_cell(&arch.normal_cell, CellKind::Normal, cfg, "normal_cell", &mut out);
    validate_cell(&arch.upsample_cell, CellKind::Upsample, cfg, "upsample_cell", &mut out);
    if arch.depth != cfg.depth {
        out.push(Violation {
            field: "depth".into(),
            message: format!("depth {} differs from configured {}", arch.depth, cfg.depth),
        });
    }
    if arch.position < 1 || arch.position > arch.depth {
        out.push(Violation {
            field: "position".into(),
            message: format!("position out of range: {} not in 1..={}", arch.position, arch.depth),
        });
    }
    out
}

pub fn ensure_valid(arch: &ArchSpec, cfg: &SpaceConfig) -> Result<(), SpaceError> {
    let violations = validate_arch(arch, cfg);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(SpaceError::Invalid(violations))
    }
}

/// Flattens an architecture into the controller's token layout.
///
/// Per node: `src_a, op_a, src_b, op_b`, with sources stored as offsets
/// `src + 2`. Normal-cell nodes come first, then upsampling-cell nodes, then
/// the zero-based position.
pub fn arch_to_tokens(arch: &ArchSpec, cfg: &SpaceConfig) -> Result<Vec<usize>, SpaceError> {
    ensure_valid(arch, cfg)?;
    let mut tokens = Vec::with_capacity(cfg.token_len());
    for cell in [&arch.normal_cell, &arch.upsample_cell] {
        for node in &cell.nodes {
            tokens.push((node.src_a + 2) as usize);
            tokens.push(node.op_a as usize);
            tokens.push((node.src_b + 2) as usize);
            tokens.push(node.op_b as usize);
        }
    }
    tokens.push(arch.position - 1);
    Ok(tokens)
}

pub fn tokens_to_arch(tokens: &[usize], cfg: &SpaceConfig) -> Result<ArchSpec, SpaceError> {
    let alphabets = cfg.slot_alphabets();
    if tokens.len() != alphabets.len() {
        return Err(SpaceError::TokenLength { expected: alphabets.len(), got: tokens.len() });
    }
    for (index, (&value, &alphabet)) in tokens.iter().zip(&alphabets).enumerate() {
        if value >= alphabet {
            return Err(SpaceError::TokenOutOfRange { index, value, alphabet });
        }
    }
    let per_cell = cfg.intermediate_nodes() * 4;
    let decode_cell = |kind, chunk: &[usize]| CellSpec {
        kind,
        nodes: chunk
            .chunks_exact(4)
            .map(|n| NodeSpec::new(n[0] as i32 - 2, n[1] as u8, n[2] as i32 - 2, n[3] as u8))
            .collect(),
    };
    Ok(ArchSpec {
        normal_cell: decode_cell(CellKind::Normal, &tokens[..per_cell]),
        upsample_cell: decode_cell(CellKind::Upsample, &tokens[per_cell..2 * per_cell]),
        position: tokens[2 * per_cell] + 1,
        depth: cfg.depth,
    })
}

/// Draws every token slot uniformly and independently.
pub fn random_arch<R: Rng + ?Sized>(cfg: &SpaceConfig, rng: &mut R) -> ArchSpec {
    let tokens: Vec<usize> = cfg.slot_alphabets().into_iter().map(|a| rng.random_range(0..a)).collect();
    tokens_to_arch(&tokens, cfg).expect("tokens drawn inside their alphabets")
}

/// Number of distinct cells of one kind: `prod_t ((t + 2)^2 * K^2)` over the
/// intermediate nodes, counting ordered edge pairs.
pub fn cell_cardinality(cfg: &SpaceConfig, kind: CellKind) -> BigUint {
    let k = BigUint::from(kind.op_count());
    (0..cfg.intermediate_nodes()).fold(BigUint::from(1u32), |acc, t| {
        let per_edge = BigUint::from(t + 2) * &k;
        acc * &per_edge * &per_edge
    })
}

/// Exact size of the full two-level space.
pub fn space_cardinality(cfg: &SpaceConfig) -> BigUint {
    cell_cardinality(cfg, CellKind::Normal) * cell_cardinality(cfg, CellKind::Upsample) * BigUint::from(cfg.depth)
}

/// DOT renderings of an architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchDot {
    pub normal_cell: String,
    pub upsample_cell: String,
    pub network: String,
}

impl fmt::Display for ArchDot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\n{}\n{}", self.normal_cell, self.upsample_cell, self.network)
    }
}

fn dot_node_id(src: i32) -> String {
    match src {
        -2 => "in_prev_prev".to_string(),
        -1 => "in_prev".to_string(),
        n => format!("node_{n}"),
    }
}

fn cell_to_dot(cell: &CellSpec) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "digraph {}_cell {{", cell.kind.name());
    s.push_str("  rankdir=LR;\n");
    s.push_str("  in_prev_prev [label=\"-2\", shape=box];\n");
    s.push_str("  in_prev [label=\"-1\", shape=box];\n");
    for t in 0..cell.nodes.len() {
        let _ = writeln!(s, "  node_{t} [label=\"{t}\", shape=circle];");
    }
    s.push_str("  output [label=\"concat\", shape=box];\n");
    for (t, node) in cell.nodes.iter().enumerate() {
        for (slot, (src, code)) in ["a", "b"].iter().zip(node.edges()) {
            let op = Op::from_code(cell.kind, code).map(Op::name).unwrap_or("invalid");
            let _ = writeln!(s, "  {} -> node_{t} [label=\"{op}\", taillabel=\"{slot}\"];", dot_node_id(src));
        }
    }
    for t in 0..cell.nodes.len() {
        let _ = writeln!(s, "  node_{t} -> output;");
    }
    s.push_str("}\n");
    s
}

fn network_to_dot(arch: &ArchSpec) -> String {
    use std::fmt::Write;
    let mut s = String::from("digraph network {\n  rankdir=LR;\n  input [label=\"LR input\", shape=box];\n");
    s.push_str("  stem [label=\"stem 3x3\", shape=box];\n");
    for layer in 1..=arch.depth {
        if layer == arch.position {
            let _ = writeln!(s, "  layer_{layer} [label=\"{layer}: upsample\", shape=doubleoctagon];");
        } else {
            let _ = writeln!(s, "  layer_{layer} [label=\"{layer}: normal\", shape=ellipse];");
        }
    }
    s.push_str("  tail [label=\"tail 3x3\", shape=box];\n  output [label=\"SR output\", shape=box];\n");
    s.push_str("  input -> stem;\n  stem -> layer_1;\n");
    for layer in 1..arch.depth {
        let _ = writeln!(s, "  layer_{layer} -> layer_{};", layer + 1);
    }
    let _ = writeln!(s, "  layer_{} -> tail;", arch.depth);
    s.push_str("  tail -> output;\n}\n");
    s
}

pub fn arch_to_dot(arch: &ArchSpec) -> ArchDot {
    ArchDot {
        normal_cell: cell_to_dot(&arch.normal_cell),
        upsample_cell: cell_to_dot(&arch.upsample_cell),
        network: network_to_dot(arch),
    }
}

pub const ARCH_SCHEMA_VERSION: u32 = 1;

/// On-disk JSON form: sources as signed node indices, operations by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchFile {
    pub schema_version: u32,
    #[serde(rename = "B")]
    pub nodes: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    pub normal_cell: Vec<(i32, String, i32, String)>,
    pub upsample_cell: Vec<(i32, String, i32, String)>,
    pub position: usize,
}

impl ArchFile {
    pub fn from_arch(arch: &ArchSpec) -> Self {
        let encode = |cell: &CellSpec| {
            cell.nodes
                .iter()
                .map(|n| {
                    let name = |code| Op::from_code(cell.kind, code).map(|o| o.name().to_string()).unwrap_or_default();
                    (n.src_a, name(n.op_a), n.src_b, name(n.op_b))
                })
                .collect()
        };
        ArchFile {
            schema_version: ARCH_SCHEMA_VERSION,
            nodes: arch.normal_cell.nodes.len() + 2,
            depth: arch.depth,
            normal_cell: encode(&arch.normal_cell),
            upsample_cell: encode(&arch.upsample_cell),
            position: arch.position,
        }
    }

    pub fn space(&self) -> Result<SpaceConfig, SpaceError> {
        SpaceConfig::new(self.nodes, self.depth)
    }

    pub fn to_arch(&self) -> Result<ArchSpec, SpaceError> {
        if self.schema_version != ARCH_SCHEMA_VERSION {
            return Err(SpaceError::SchemaVersion(self.schema_version));
        }
        let decode = |kind, rows: &[(i32, String, i32, String)]| -> Result<CellSpec, SpaceError> {
            let nodes = rows
                .iter()
                .map(|(sa, oa, sb, ob)| {
                    Ok(NodeSpec::new(*sa, Op::from_name(kind, oa)?.code(), *sb, Op::from_name(kind, ob)?.code()))
                })
                .collect::<Result<_, SpaceError>>()?;
            Ok(CellSpec { kind, nodes })
        };
        let arch = ArchSpec {
            normal_cell: decode(CellKind::Normal, &self.normal_cell)?,
            upsample_cell: decode(CellKind::Upsample, &self.upsample_cell)?,
            position: self.position,
            depth: self.depth,
        };
        ensure_valid(&arch, &self.space()?)?;
        Ok(arch)
    }
}

impl ArchSpec {
    /// Pretty JSON with one line per node.
    pub fn to_json(&self) -> String {
        let file = ArchFile::from_arch(self);
        let rows = |cell: &[(i32, String, i32, String)]| {
            let lines: Vec<String> =
                cell.iter().map(|r| format!("    {}", serde_json::to_string(r).expect("row serializes"))).collect();
            format!("[\n{}\n  ]", lines.join(",\n"))
        };
        format!(
            "{{\n  \"schema_version\": {},\n  \"B\": {},\n  \"L\": {},\n  \"normal_cell\": {},\n  \"upsample_cell\": {},\n  \"position\": {}\n}}",
            file.schema_version,
            file.nodes,
            file.depth,
            rows(&file.normal_cell),
            rows(&file.upsample_cell),
            file.position
        )
    }

    /// Parses and validates the JSON architecture format, returning the
    /// architecture with the space configuration it declares.
    pub fn from_json(text: &str) -> Result<(ArchSpec, SpaceConfig), SpaceError> {
        let file: ArchFile = serde_json::from_str(text)?;
        let arch = file.to_arch()?;
        Ok((arch, file.space()?))
    }
}

impl FromStr for ArchSpec {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArchSpec::from_json(s).map(|(arch, _)| arch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn op_alphabets_have_stable_codes() {
        assert_eq!(NormalOp::ALL.len(), 7);
        assert_eq!(UpsampleOp::ALL.len(), 5);
        for (i, op) in NormalOp::ALL.iter().enumerate() {
            assert_eq!(op.code() as usize, i);
        }
        for (i, op) in UpsampleOp::ALL.iter().enumerate() {
            assert_eq!(op.code() as usize, i);
        }
        assert_eq!(NormalOp::Rcab.code(), 6);
        assert_eq!(UpsampleOp::Deconv.code(), 4);
    }

    #[test]
    fn position_out_of_range_is_reported() {
        let cfg = SpaceConfig::default();
        let mut arch = ArchSpec::zero(&cfg);
        arch.position = 13;
        let v = validate_arch(&arch, &cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "position");
        assert!(v[0].message.contains("position out of range"));
    }

    #[test]
    fn forward_reference_is_reported() {
        let cfg = SpaceConfig::default();
        let mut arch = ArchSpec::zero(&cfg);
        arch.normal_cell.nodes[0].src_b = 1;
        let v = validate_arch(&arch, &cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "normal_cell.nodes[0].src_b");
        assert!(v[0].message.contains("forward reference"));
    }

    #[test]
    fn op_code_outside_kind_alphabet_is_reported() {
        let cfg = SpaceConfig::default();
        let mut arch = ArchSpec::zero(&cfg);
        arch.upsample_cell.nodes[2].op_a = 5;
        let v = validate_arch(&arch, &cfg);
        assert_eq!(v[0].field, "upsample_cell.nodes[2].op_a");
    }

    #[test]
    fn self_loop_and_same_source_twice() {
        let cfg = SpaceConfig::default();
        let mut arch = ArchSpec::zero(&cfg);
        arch.normal_cell.nodes[2] = NodeSpec::new(1, 3, 1, 4);
        assert!(validate_arch(&arch, &cfg).is_empty());
        arch.normal_cell.nodes[2].src_a = 2;
        assert_eq!(validate_arch(&arch, &cfg).len(), 1);
    }

    #[test]
    fn token_length_matches_layout() {
        let cfg = SpaceConfig::default();
        assert_eq!(cfg.token_len(), 33);
        assert_eq!(cfg.slot_alphabets().len(), 33);
        assert_eq!(&cfg.slot_alphabets()[..8], &[2, 7, 2, 7, 3, 7, 3, 7]);
        assert_eq!(cfg.slot_alphabets()[32], 12);
    }

    #[test]
    fn zero_arch_is_all_zero_tokens() {
        let cfg = SpaceConfig::default();
        let tokens = arch_to_tokens(&ArchSpec::zero(&cfg), &cfg).unwrap();
        assert_eq!(tokens, vec![0; 33]);
        assert_eq!(tokens_to_arch(&tokens, &cfg).unwrap(), ArchSpec::zero(&cfg));
    }

    #[test]
    fn decode_rejects_op_token_seven() {
        let cfg = SpaceConfig::default();
        let mut tokens = vec![0; 33];
        tokens[1] = 7;
        match tokens_to_arch(&tokens, &cfg) {
            Err(SpaceError::TokenOutOfRange { index: 1, value: 7, alphabet: 7 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(tokens_to_arch(&[0; 32], &cfg), Err(SpaceError::TokenLength { expected: 33, got: 32 })));
    }

    #[test]
    fn encoding_rejects_invalid_arch() {
        let cfg = SpaceConfig::default();
        let mut arch = ArchSpec::zero(&cfg);
        arch.position = 0;
        assert!(matches!(arch_to_tokens(&arch, &cfg), Err(SpaceError::Invalid(_))));
    }

    #[test]
    fn random_arch_is_reproducible() {
        let cfg = SpaceConfig::default();
        let a = random_arch(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = random_arch(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn cardinality_closed_forms() {
        let cfg = SpaceConfig::default();
        assert_eq!(cell_cardinality(&cfg, CellKind::Normal), BigUint::from(83_013_134_400u64));
        assert_eq!(cell_cardinality(&cfg, CellKind::Upsample), BigUint::from(5_625_000_000u64));
        let expected = BigUint::from(83_013_134_400u64) * BigUint::from(5_625_000_000u64) * BigUint::from(12u32);
        assert_eq!(space_cardinality(&cfg), expected);
    }

    #[test]
    fn json_format_uses_signed_sources_and_op_names() {
        let cfg = SpaceConfig::default();
        let mut arch = ArchSpec::zero(&cfg);
        arch.normal_cell.nodes[1] = NodeSpec::new(-1, NormalOp::Rcab.code(), 0, NormalOp::SepConv5x5.code());
        arch.position = 10;
        let json: serde_json::Value = serde_json::from_str(&arch.to_json()).unwrap();
        assert_eq!(json["schema_version"], 1);
        assert_eq!(json["B"], 6);
        assert_eq!(json["L"], 12);
        assert_eq!(json["position"], 10);
        assert_eq!(json["normal_cell"][1], serde_json::json!([-1, "rcab", 0, "sep_conv_5x5"]));
        assert_eq!(json["upsample_cell"][0], serde_json::json!([-2, "area", -2, "area"]));
        let (back, space) = ArchSpec::from_json(&arch.to_json()).unwrap();
        assert_eq!(back, arch);
        assert_eq!(space, cfg);
    }

    #[test]
    fn json_rejects_unknown_op_and_bad_version() {
        let cfg = SpaceConfig::default();
        let text = ArchSpec::zero(&cfg).to_json().replacen("\"identity\"", "\"maxpool\"", 1);
        assert!(matches!(ArchSpec::from_json(&text), Err(SpaceError::UnknownOp(_))));
        let text = ArchSpec::zero(&cfg).to_json().replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(ArchSpec::from_json(&text), Err(SpaceError::SchemaVersion(7))));
    }

    #[test]
    fn zero_arch_dot_feeds_every_node_from_input() {
        let dot = arch_to_dot(&ArchSpec::zero(&SpaceConfig::default()));
        for t in 0..4 {
            assert_eq!(dot.normal_cell.matches(&format!("in_prev_prev -> node_{t} ")).count(), 2);
            assert!(dot.normal_cell.contains(&format!("node_{t} -> output;")));
        }
        assert!(!dot.normal_cell.contains("in_prev ->"));
        assert!(dot.network.contains("layer_1 [label=\"1: upsample\""));
    }
}
