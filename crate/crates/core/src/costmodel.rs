//! Analytic multiply-add accounting.
//!
//! One multiply-add counts as one FLOP. Every cell first maps each of its two
//! inputs to the per-operation width with a 1x1 convolution, then runs its
//! edge operations at that width and concatenates the intermediate nodes.
//! Layers after the upsampling cell run at `scale^2` times the spatial area,
//! which is what makes the upsampling position matter for cost.
//!
//! Inside the upsampling cell only edges leaving an input node (`-2`/`-1`)
//! change resolution; edges between intermediate nodes run at scale 1, where
//! interpolations become identities and sub-pixel / deconvolution layers
//! become plain 3x3 / 4x4 convolutions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::searchspace::{
    ensure_valid, ArchSpec, CellKind, CellSpec, NormalOp, Op, SpaceConfig, SpaceError, UnknownOp, UpsampleOp,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: u64,
    pub height: u64,
    pub width: u64,
}

impl TensorShape {
    pub fn new(channels: u64, height: u64, width: u64) -> Self {
        TensorShape { channels, height, width }
    }

    pub fn area(&self) -> u64 {
        self.height * self.width
    }

    pub fn elements(&self) -> u64 {
        self.channels * self.area()
    }

    fn check(&self) -> Result<(), CostError> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(CostError::InvalidShape(*self));
        }
        Ok(())
    }

    fn same_resolution(&self, other: &TensorShape) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn scaled(&self, scale: u64) -> TensorShape {
        TensorShape { channels: self.channels, height: self.height * scale, width: self.width * scale }
    }

    fn with_channels(&self, channels: u64) -> TensorShape {
        TensorShape { channels, ..*self }
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl std::str::FromStr for TensorShape {
    type Err = CostError;

    /// Parses `CxHxW` (either `x` or `×` as separator).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(['x', 'X', '×']).map(str::trim).collect();
        let bad = || CostError::Parse(format!("expected CxHxW, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Vec<u64> = parts.iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
        let shape = TensorShape::new(nums[0], nums[1], nums[2]);
        shape.check()?;
        Ok(shape)
    }
}

/// Multiply-adds per output element for each interpolation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpMacs {
    pub nearest: u64,
    pub bilinear: u64,
    pub area: u64,
}

impl Default for InterpMacs {
    fn default() -> Self {
        InterpMacs { nearest: 0, bilinear: 4, area: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub per_op_channels: u64,
    pub scale: u64,
    pub interp_macs: InterpMacs,
    /// Channel-attention reduction ratio of RCAB; the squeezed width never
    /// drops below one channel.
    pub rcab_reduction: u64,
    pub udpb_kernel: u64,
    pub udpb_stride: u64,
    pub udpb_pad: u64,
}

impl CostConfig {
    pub const SEARCH_CHANNELS: u64 = 8;
    pub const DERIVE_CHANNELS: u64 = 64;

    pub fn with_channels(per_op_channels: u64) -> Self {
        CostConfig {
            per_op_channels,
            scale: 2,
            interp_macs: InterpMacs::default(),
            rcab_reduction: 4,
            udpb_kernel: 6,
            udpb_stride: 2,
            udpb_pad: 2,
        }
    }

    /// Width used while searching.
    pub fn search() -> Self {
        Self::with_channels(Self::SEARCH_CHANNELS)
    }

    /// Width used when the derived model is retrained.
    pub fn derive() -> Self {
        Self::with_channels(Self::DERIVE_CHANNELS)
    }

    pub fn check(&self) -> Result<(), CostError> {
        if self.per_op_channels == 0 {
            return Err(CostError::Config("per-op channels must be positive".into()));
        }
        if self.scale < 1 {
            return Err(CostError::Config("scale must be at least 1".into()));
        }
        if self.rcab_reduction < 1 {
            return Err(CostError::Config("RCAB reduction must be at least 1".into()));
        }
        // A stride-s projection maps H to s*H and back only when k = s + 2p.
        if self.udpb_stride == 0 || self.udpb_kernel != self.udpb_stride + 2 * self.udpb_pad {
            return Err(CostError::Config(format!(
                "UDPB kernel {} / stride {} / pad {} do not form an exact x{} projection",
                self.udpb_kernel, self.udpb_stride, self.udpb_pad, self.udpb_stride
            )));
        }
        Ok(())
    }

    fn rcab_squeezed(&self, channels: u64) -> u64 {
        (channels / self.rcab_reduction).max(1)
    }
}

impl Default for CostConfig {
    fn default() -> Self {
        Self::search()
    }
}

#[derive(Debug, Error)]
pub enum CostError {
    #[error("invalid tensor shape {0}")]
    InvalidShape(TensorShape),
    #[error("invalid cost configuration: {0}")]
    Config(String),
    #[error("{op} cannot map {from} channels to {to}")]
    Channels { op: Op, from: u64, to: u64 },
    #[error("{op} cannot run at scale {scale}")]
    Scale { op: Op, scale: u64 },
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    UnknownOp(#[from] UnknownOp),
}

/// Multiply-adds split into the part proportional to spatial area and the
/// part that is not (RCAB's attention MLP on the pooled vector).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub(crate) struct Macs {
    pub spatial: u64,
    pub fixed: u64,
}

impl Macs {
    fn spatial(v: u64) -> Self {
        Macs { spatial: v, fixed: 0 }
    }

    pub fn total(&self) -> u64 {
        self.spatial + self.fixed
    }
}

impl std::ops::AddAssign for Macs {
    fn add_assign(&mut self, rhs: Macs) {
        self.spatial += rhs.spatial;
        self.fixed += rhs.fixed;
    }
}

fn conv_macs(kernel: u64, cin: u64, cout: u64, out: &TensorShape) -> u64 {
    kernel * kernel * cin * cout * out.area()
}

pub(crate) fn op_macs(
    op: Op,
    input: &TensorShape,
    out_channels: u64,
    effective_scale: u64,
    cfg: &CostConfig,
) -> Result<Macs, CostError> {
    input.check()?;
    cfg.check()?;
    if out_channels == 0 {
        return Err(CostError::InvalidShape(input.with_channels(0)));
    }
    let cin = input.channels;
    let same_width = |op| {
        if cin == out_channels {
            Ok(())
        } else {
            Err(CostError::Channels { op, from: cin, to: out_channels })
        }
    };
    let out = input.scaled(effective_scale).with_channels(out_channels);
    let macs = match op {
        Op::Normal(normal) => {
            if effective_scale != 1 {
                return Err(CostError::Scale { op, scale: effective_scale });
            }
            match normal {
                NormalOp::Identity => {
                    same_width(op)?;
                    Macs::default()
                }
                // Dilation widens the receptive field without adding taps.
                NormalOp::DilConv3x3 => Macs::spatial(conv_macs(3, cin, out_channels, &out)),
                NormalOp::DilConv5x5 => Macs::spatial(conv_macs(5, cin, out_channels, &out)),
                NormalOp::SepConv3x3 | NormalOp::SepConv5x5 => {
                    let k = if normal == NormalOp::SepConv3x3 { 3 } else { 5 };
                    Macs::spatial(k * k * cin * out.area() + cin * out_channels * out.area())
                }
                NormalOp::Rcab => {
                    same_width(op)?;
                    let c = cin;
                    let squeezed = cfg.rcab_squeezed(c);
                    Macs {
                        // two 3x3 convs, global pooling, channel rescale
                        spatial: 2 * conv_macs(3, c, c, &out) + 2 * c * out.area(),
                        // squeeze and excite 1x1 convs on the pooled vector
                        fixed: 2 * c * squeezed,
                    }
                }
                NormalOp::Udpb => {
                    same_width(op)?;
                    // up, down, up projections; each touches the low-res grid k^2 times
                    Macs::spatial(3 * conv_macs(cfg.udpb_kernel, cin, cin, input))
                }
            }
        }
        Op::Upsample(up) => {
            if effective_scale != 1 && effective_scale != cfg.scale {
                return Err(CostError::Scale { op, scale: effective_scale });
            }
            match up {
                UpsampleOp::AreaInterp | UpsampleOp::BilinearInterp | UpsampleOp::NearestInterp => {
                    same_width(op)?;
                    if effective_scale == 1 {
                        Macs::default()
                    } else {
                        let per_element = match up {
                            UpsampleOp::AreaInterp => cfg.interp_macs.area,
                            UpsampleOp::BilinearInterp => cfg.interp_macs.bilinear,
                            _ => cfg.interp_macs.nearest,
                        };
                        Macs::spatial(per_element * out.elements())
                    }
                }
                UpsampleOp::SubPixel => {
                    let s2 = effective_scale * effective_scale;
                    Macs::spatial(conv_macs(3, cin, out_channels * s2, input))
                }
                UpsampleOp::Deconv => Macs::spatial(conv_macs(4, cin, out_channels, &out)),
            }
        }
    };
    Ok(macs)
}

/// Multiply-adds of one edge operation.
///
/// `effective_scale` is the resolution factor the operation applies; normal
/// operations only accept 1, upsampling operations accept 1 or `cfg.scale`.
pub fn op_flops(
    op: Op,
    input: TensorShape,
    out_channels: u64,
    effective_scale: u64,
    cfg: &CostConfig,
) -> Result<u64, CostError> {
    op_macs(op, &input, out_channels, effective_scale, cfg).map(|m| m.total())
}

fn input_calibration(shape: &TensorShape, width: u64) -> Macs {
    Macs::spatial(shape.channels * width * shape.area())
}

pub(crate) fn cell_macs(
    cell: &CellSpec,
    prev_prev: &TensorShape,
    prev: &TensorShape,
    cfg: &CostConfig,
) -> Result<(Macs, TensorShape), CostError> {
    prev_prev.check()?;
    prev.check()?;
    cfg.check()?;
    let width = cfg.per_op_channels;
    let mut macs = input_calibration(prev_prev, width);
    macs += input_calibration(prev, width);

    let inputs = [prev_prev.with_channels(width), prev.with_channels(width)];
    let mut nodes: Vec<TensorShape> = Vec::with_capacity(cell.nodes.len());
    for (t, node) in cell.nodes.iter().enumerate() {
        let mut node_shape: Option<TensorShape> = None;
        for (src, code) in node.edges() {
            let op = Op::from_code(cell.kind, code)?;
            let src_shape = match src {
                -2 | -1 => inputs[(src + 2) as usize],
                s if s >= 0 && (s as usize) < t => nodes[s as usize],
                s => {
                    return Err(CostError::ShapeMismatch {
                        node: format!("{} cell node {t}", cell.kind.name()),
                        detail: format!("source {s} is not an earlier node"),
                    })
                }
            };
            let scale = if cell.kind == CellKind::Upsample && src < 0 { cfg.scale } else { 1 };
            macs += op_macs(op, &src_shape, width, scale, cfg)?;
            let edge_out = src_shape.scaled(scale);
            match node_shape {
                None => node_shape = Some(edge_out),
                Some(prior) if !prior.same_resolution(&edge_out) => {
                    return Err(CostError::ShapeMismatch {
                        node: format!("{} cell node {t}", cell.kind.name()),
                        detail: format!("edges produce {prior} and {edge_out}"),
                    });
                }
                Some(_) => {}
            }
        }
        nodes.push(node_shape.expect("two edges per node"));
    }
    let first = *nodes.first().ok_or_else(|| CostError::ShapeMismatch {
        node: format!("{} cell output", cell.kind.name()),
        detail: "cell has no intermediate nodes".into(),
    })?;
    if let Some(bad) = nodes.iter().position(|s| !s.same_resolution(&first)) {
        return Err(CostError::ShapeMismatch {
            node: format!("{} cell output", cell.kind.name()),
            detail: format!("node {bad} is {} but node 0 is {first}", nodes[bad]),
        });
    }
    Ok((macs, first.with_channels(width * nodes.len() as u64)))
}

/// Cost of one cell whose two inputs both have shape `input`.
pub fn cell_flops(cell: &CellSpec, input: TensorShape, cfg: &CostConfig) -> Result<(u64, TensorShape), CostError> {
    cell_flops_with_inputs(cell, input, input, cfg)
}

/// Cost of one cell with distinct shapes for input nodes `-2` and `-1`.
/// Nodes combining inputs of different resolution are rejected.
pub fn cell_flops_with_inputs(
    cell: &CellSpec,
    prev_prev: TensorShape,
    prev: TensorShape,
    cfg: &CostConfig,
) -> Result<(u64, TensorShape), CostError> {
    cell_macs(cell, &prev_prev, &prev, cfg).map(|(m, s)| (m.total(), s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Stem,
    Normal,
    Upsample,
    Tail,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// 0 for the stem, `1..=L` for cells, `L + 1` for the tail.
    pub index: usize,
    pub kind: LayerKind,
    pub macs: u64,
    /// Share of `macs` that does not grow with spatial area.
    pub fixed_macs: u64,
    pub output: TensorShape,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_macs: u64,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    pub fn total_gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }
}

const IMAGE_CHANNELS: u64 = 3;

/// Whole-network cost: a 3x3 stem to the cell width, `L` cells, and a 3x3
/// tail back to three channels at the output resolution.
///
/// When the layer right after the upsampling cell reads the pre-upsampling
/// feature map as its `-2` input, that input is nearest-upsampled first,
/// which costs no multiply-adds.
pub fn arch_flops(arch: &ArchSpec, input: TensorShape, cfg: &CostConfig) -> Result<CostReport, CostError> {
    input.check()?;
    cfg.check()?;
    let space = SpaceConfig { nodes: arch.normal_cell.nodes.len() + 2, depth: arch.depth };
    space.check()?;
    ensure_valid(arch, &space)?;

    let cell_width = cfg.per_op_channels * space.intermediate_nodes() as u64;
    let mut per_layer = Vec::with_capacity(arch.depth + 2);

    let stem_out = input.with_channels(cell_width);
    per_layer.push(LayerCost {
        index: 0,
        kind: LayerKind::Stem,
        macs: conv_macs(3, input.channels, cell_width, &stem_out),
        fixed_macs: 0,
        output: stem_out,
    });

    let (mut prev_prev, mut prev) = (stem_out, stem_out);
    for layer in 1..=arch.depth {
        let (cell, kind) = if layer == arch.position {
            (&arch.upsample_cell, LayerKind::Upsample)
        } else {
            (&arch.normal_cell, LayerKind::Normal)
        };
        if !prev_prev.same_resolution(&prev) {
            prev_prev = TensorShape { channels: prev_prev.channels, ..prev };
        }
        let (macs, out) = cell_macs(cell, &prev_prev, &prev, cfg).map_err(|e| match e {
            CostError::ShapeMismatch { node, detail } => {
                CostError::ShapeMismatch { node: format!("layer {layer} {node}"), detail }
            }
            other => other,
        })?;
        per_layer.push(LayerCost { index: layer, kind, macs: macs.total(), fixed_macs: macs.fixed, output: out });
        prev_prev = prev;
        prev = out;
    }

    let tail_out = prev.with_channels(IMAGE_CHANNELS);
    per_layer.push(LayerCost {
        index: arch.depth + 1,
        kind: LayerKind::Tail,
        macs: conv_macs(3, prev.channels, IMAGE_CHANNELS, &tail_out),
        fixed_macs: 0,
        output: tail_out,
    });

    let total_macs = per_layer.iter().map(|l| l.macs).sum();
    Ok(CostReport { total_macs, per_layer })
}

/// Output shape of every layer, stem and tail included (`L + 2` entries).
pub fn shape_trace(arch: &ArchSpec, input: TensorShape, cfg: &CostConfig) -> Result<Vec<TensorShape>, CostError> {
    Ok(arch_flops(arch, input, cfg)?.per_layer.into_iter().map(|l| l.output).collect())
}

/// Formats a MAC count in G-MACs with three significant digits.
pub fn format_gmacs(macs: u64) -> String {
    let g = macs as f64 / 1e9;
    if g == 0.0 {
        return "0".to_string();
    }
    let magnitude = g.log10().floor() as i32;
    if magnitude > 2 {
        let unit = 10f64.powi(magnitude - 2);
        return format!("{:.0}", (g / unit).round() * unit);
    }
    let mut decimals = (2 - magnitude) as usize;
    let rounded = format!("{g:.decimals$}");
    // 99.96 rounds up to 100.0: drop the extra digit
    let digits = rounded.chars().filter(|c| c.is_ascii_digit()).skip_while(|&c| c == '0').count();
    if digits > 3 && decimals > 0 {
        decimals -= 1;
        return format!("{g:.decimals$}");
    }
    rounded
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::NodeSpec;

    fn normal(op: NormalOp) -> Op {
        Op::Normal(op)
    }

    #[test]
    fn reference_op_values() {
        let cfg = CostConfig::search();
        let s = TensorShape::new(8, 48, 48);
        assert_eq!(op_flops(normal(NormalOp::DilConv3x3), s, 8, 1, &cfg).unwrap(), 1_327_104);
        assert_eq!(op_flops(normal(NormalOp::SepConv3x3), s, 8, 1, &cfg).unwrap(), 313_344);
        assert_eq!(op_flops(normal(NormalOp::Identity), s, 8, 1, &cfg).unwrap(), 0);
        assert_eq!(op_flops(Op::Upsample(UpsampleOp::NearestInterp), s, 8, 2, &cfg).unwrap(), 0);
    }

    #[test]
    fn rcab_squeeze_floors_at_one_channel() {
        let mut cfg = CostConfig::search();
        cfg.rcab_reduction = 16;
        let s = TensorShape::new(8, 4, 4);
        let m = op_macs(normal(NormalOp::Rcab), &s, 8, 1, &cfg).unwrap();
        assert_eq!(m.fixed, 2 * 8);
        cfg.rcab_reduction = 4;
        let m = op_macs(normal(NormalOp::Rcab), &s, 8, 1, &cfg).unwrap();
        assert_eq!(m.fixed, 2 * 8 * 2);
    }

    #[test]
    fn normal_ops_reject_rescaling_and_width_changes() {
        let cfg = CostConfig::search();
        let s = TensorShape::new(8, 4, 4);
        assert!(matches!(op_flops(normal(NormalOp::DilConv3x3), s, 8, 2, &cfg), Err(CostError::Scale { .. })));
        assert!(matches!(op_flops(normal(NormalOp::Identity), s, 4, 1, &cfg), Err(CostError::Channels { .. })));
        assert!(matches!(
            op_flops(normal(NormalOp::DilConv3x3), TensorShape::new(0, 4, 4), 8, 1, &cfg),
            Err(CostError::InvalidShape(_))
        ));
    }

    #[test]
    fn bad_udpb_geometry_is_a_config_error() {
        let mut cfg = CostConfig::search();
        cfg.udpb_pad = 1;
        let s = TensorShape::new(8, 4, 4);
        assert!(matches!(op_flops(normal(NormalOp::Udpb), s, 8, 1, &cfg), Err(CostError::Config(_))));
    }

    #[test]
    fn identity_cell_costs_only_calibration() {
        let cfg = CostConfig::search();
        let cell = CellSpec::zero(CellKind::Normal, 4);
        let (macs, out) = cell_flops(&cell, TensorShape::new(32, 48, 48), &cfg).unwrap();
        assert_eq!(macs, 2 * (32 * 8 * 48 * 48));
        assert_eq!(out, TensorShape::new(32, 48, 48));
    }

    #[test]
    fn upsample_cell_doubles_resolution() {
        let cfg = CostConfig::search();
        let mut cell = CellSpec::zero(CellKind::Upsample, 4);
        cell.nodes[3] = NodeSpec::new(0, UpsampleOp::SubPixel.code(), 2, UpsampleOp::BilinearInterp.code());
        let (_, out) = cell_flops(&cell, TensorShape::new(32, 48, 48), &cfg).unwrap();
        assert_eq!(out, TensorShape::new(32, 96, 96));
    }

    #[test]
    fn mixed_resolution_inputs_are_rejected_with_node_name() {
        let cfg = CostConfig::search();
        let mut cell = CellSpec::zero(CellKind::Normal, 4);
        cell.nodes[1] = NodeSpec::new(-2, 0, -1, 0);
        let err = cell_flops_with_inputs(&cell, TensorShape::new(32, 48, 48), TensorShape::new(32, 96, 96), &cfg)
            .unwrap_err();
        match err {
            CostError::ShapeMismatch { node, .. } => assert_eq!(node, "normal cell node 1"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn trace_has_single_jump_at_position() {
        let space = SpaceConfig::default();
        let mut arch = ArchSpec::zero(&space);
        arch.position = 10;
        let trace = shape_trace(&arch, TensorShape::new(3, 48, 48), &CostConfig::search()).unwrap();
        assert_eq!(trace.len(), 14);
        for (i, s) in trace.iter().enumerate().take(10).skip(1) {
            let expect = if i < 10 { 48 } else { 96 };
            assert_eq!(s.height, expect, "layer {i}");
        }
        for s in &trace[10..13] {
            assert_eq!((s.channels, s.height, s.width), (32, 96, 96));
        }
        assert_eq!(trace[13], TensorShape::new(3, 96, 96));
    }

    #[test]
    fn scale_one_trace_is_flat() {
        let space = SpaceConfig::default();
        let mut cfg = CostConfig::search();
        cfg.scale = 1;
        let trace = shape_trace(&ArchSpec::zero(&space), TensorShape::new(3, 20, 20), &cfg).unwrap();
        assert!(trace.iter().all(|s| s.height == 20 && s.width == 20));
    }

    #[test]
    fn shape_parsing() {
        assert_eq!("3x480x480".parse::<TensorShape>().unwrap(), TensorShape::new(3, 480, 480));
        assert_eq!("3×48×48".parse::<TensorShape>().unwrap(), TensorShape::new(3, 48, 48));
        assert!("3x48".parse::<TensorShape>().is_err());
        assert!("0x48x48".parse::<TensorShape>().is_err());
    }

    #[test]
    fn gmacs_formatting() {
        assert_eq!(format_gmacs(30_612_345_678), "30.6");
        assert_eq!(format_gmacs(83_600_000_000), "83.6");
        assert_eq!(format_gmacs(612_600_000_000), "613");
        assert_eq!(format_gmacs(1_327_104), "0.00133");
        assert_eq!(format_gmacs(99_960_000_000), "100");
        assert_eq!(format_gmacs(0), "0");
        assert_eq!(format_gmacs(3_223_535_661_056), "3220");
        assert_eq!(format_gmacs(999_600_000_000), "1000");
    }
}
