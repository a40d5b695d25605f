//! Encoder–decoder network construction from a decoded configuration.
//!
//! The network is a U-shaped stack of MegaBlocks. A MegaBlock is the shared
//! block graph followed by spatial dropout and, when `res` is set, a sum with
//! its own input. Channels double after every max pooling and halve on the
//! way back up. The result is a flat layer list ([`NetworkIR`]) that can be
//! priced in parameters and activation memory, and handed to an external
//! trainer as JSON.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockgraph::{conv_param_count, BlockError, LegalityVerdict, OperationMatrix};
use crate::searchspace::DecodedConfig;

pub const IR_VERSION: u32 = 1;
/// JSON Schema of the serialized [`NetworkIR`].
pub const IR_SCHEMA: &str = include_str!("../schema/network_ir.schema.json");
/// Spatial dropout rate inside every MegaBlock.
pub const DROPOUT_RATE: f64 = 0.2;
/// 19 labelled structures plus background.
pub const DEFAULT_NUM_CLASSES: usize = 20;
/// 16 GiB of device memory.
pub const DEFAULT_BUDGET_BYTES: u64 = 16 << 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("illegal block structure: {0}")]
    IllegalBlock(LegalityVerdict),
    #[error("input extent {extent} is not divisible by 2^{poolings}")]
    Indivisible { extent: usize, poolings: usize },
    #[error("invalid architecture settings: {0}")]
    Settings(String),
    #[error("channel mismatch at layer {layer}: {detail}")]
    ChannelMismatch { layer: usize, detail: String },
    #[error("malformed network document: {0}")]
    Malformed(String),
}

/// Everything needed to turn a decoded configuration into a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub decoded: DecodedConfig,
    pub input_shape: [usize; 3],
    pub in_channels: usize,
    pub num_classes: usize,
}

impl ArchConfig {
    pub fn new(decoded: DecodedConfig, settings: &ArchSettings) -> Self {
        Self {
            decoded,
            input_shape: settings.input_shape,
            in_channels: settings.in_channels,
            num_classes: settings.num_classes,
        }
    }
}

/// The part of [`ArchConfig`] that stays the same across a search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSettings {
    pub input_shape: [usize; 3],
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for ArchSettings {
    fn default() -> Self {
        Self {
            input_shape: [128, 128, 128],
            in_channels: 1,
            num_classes: DEFAULT_NUM_CLASSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub id: usize,
    pub shape: [usize; 3],
    pub channels: usize,
}

impl TensorInfo {
    pub fn voxels(&self) -> u64 {
        self.shape.iter().map(|&e| e as u64).product()
    }

    pub fn bytes(&self, element_bytes: u64) -> u64 {
        self.voxels() * self.channels as u64 * element_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Norm,
    Act,
    MaxPool,
    Upsample,
    Sum,
    Concat,
    Dropout,
    Head,
    AuxHead,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerAttrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    pub output: usize,
    #[serde(default)]
    pub attrs: LayerAttrs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub shape: [usize; 3],
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outputs {
    pub main: usize,
    pub aux: Vec<usize>,
}

/// Concrete layer graph of a segmentation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkIR {
    pub version: u32,
    pub config: DecodedConfig,
    pub input: InputSpec,
    pub num_classes: usize,
    pub tensors: Vec<TensorInfo>,
    pub layers: Vec<Layer>,
    pub outputs: Outputs,
}

impl NetworkIR {
    pub fn tensor(&self, id: usize) -> &TensorInfo {
        &self.tensors[id]
    }

    /// Channel count of every MegaBlock, encoder first.
    pub fn megablock_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Dropout)
            .map(|l| self.tensors[l.output].channels)
            .collect()
    }

    pub fn count_layers(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network IR serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BuildError> {
        let ir: NetworkIR =
            serde_json::from_str(text).map_err(|e| BuildError::Malformed(e.to_string()))?;
        ir.check()?;
        Ok(ir)
    }

    /// Structural consistency: dense tensor ids, topological layer order and
    /// matching channels at every join.
    pub fn check(&self) -> Result<(), BuildError> {
        let malformed = |m: String| Err(BuildError::Malformed(m));
        if self.version != IR_VERSION {
            return malformed(format!("unsupported version {}", self.version));
        }
        for (i, t) in self.tensors.iter().enumerate() {
            if t.id != i {
                return malformed(format!("tensor at position {i} has id {}", t.id));
            }
        }
        let count = self.tensors.len();
        let mut produced = vec![false; count];
        if count > 0 {
            produced[0] = true;
        }
        for (index, layer) in self.layers.iter().enumerate() {
            for &input in &layer.inputs {
                if input >= count || !produced[input] {
                    return malformed(format!("layer {index} reads tensor {input} before it exists"));
                }
            }
            if layer.output >= count || produced[layer.output] {
                return malformed(format!("layer {index} writes tensor {} twice or out of range", layer.output));
            }
            produced[layer.output] = true;
            if matches!(layer.kind, LayerKind::Sum) {
                let first = &self.tensors[layer.inputs[0]];
                for &input in &layer.inputs[1..] {
                    let t = &self.tensors[input];
                    if t.channels != first.channels || t.shape != first.shape {
                        return Err(BuildError::ChannelMismatch {
                            layer: index,
                            detail: format!("sum of {} and {} channels", first.channels, t.channels),
                        });
                    }
                }
            }
        }
        for &out in std::iter::once(&self.outputs.main).chain(&self.outputs.aux) {
            if out >= count || !produced[out] {
                return malformed(format!("output tensor {out} is never produced"));
            }
        }
        Ok(())
    }
}

struct Builder {
    tensors: Vec<TensorInfo>,
    layers: Vec<Layer>,
}

impl Builder {
    fn new(shape: [usize; 3], channels: usize) -> Self {
        Self {
            tensors: vec![TensorInfo { id: 0, shape, channels }],
            layers: Vec::new(),
        }
    }

    fn push(&mut self, kind: LayerKind, inputs: Vec<usize>, shape: [usize; 3], channels: usize, attrs: LayerAttrs) -> usize {
        let id = self.tensors.len();
        self.tensors.push(TensorInfo { id, shape, channels });
        self.layers.push(Layer { kind, inputs, output: id, attrs });
        id
    }

    fn info(&self, id: usize) -> &TensorInfo {
        &self.tensors[id]
    }

    fn conv(&mut self, input: usize, channels: usize, kernel: usize, dilation: usize) -> usize {
        let shape = self.info(input).shape;
        let attrs = LayerAttrs {
            kernel: Some(kernel),
            dilation: Some(dilation),
            stride: Some(1),
            ..Default::default()
        };
        let conv = self.push(LayerKind::Conv, vec![input], shape, channels, attrs);
        let norm = self.push(LayerKind::Norm, vec![conv], shape, channels, LayerAttrs::default());
        self.push(LayerKind::Act, vec![norm], shape, channels, LayerAttrs::default())
    }

    fn same_shape(&mut self, kind: LayerKind, inputs: Vec<usize>, attrs: LayerAttrs) -> Result<usize, BuildError> {
        let first = self.info(inputs[0]).clone();
        for &other in &inputs[1..] {
            let t = self.info(other);
            if t.shape != first.shape || (kind == LayerKind::Sum && t.channels != first.channels) {
                return Err(BuildError::ChannelMismatch {
                    layer: self.layers.len(),
                    detail: format!(
                        "{kind:?} of {:?}x{} and {:?}x{}",
                        first.shape, first.channels, t.shape, t.channels
                    ),
                });
            }
        }
        let channels = match kind {
            LayerKind::Concat => inputs.iter().map(|&i| self.info(i).channels).sum(),
            _ => first.channels,
        };
        Ok(self.push(kind, inputs, first.shape, channels, attrs))
    }

    fn max_pool(&mut self, input: usize) -> usize {
        let t = self.info(input).clone();
        let attrs = LayerAttrs {
            kernel: Some(2),
            stride: Some(2),
            ..Default::default()
        };
        self.push(LayerKind::MaxPool, vec![input], t.shape.map(|e| e / 2), t.channels, attrs)
    }

    fn upsample(&mut self, input: usize, factor: usize) -> usize {
        let t = self.info(input).clone();
        let attrs = LayerAttrs {
            factor: Some(factor),
            mode: Some("nearest".into()),
            ..Default::default()
        };
        self.push(LayerKind::Upsample, vec![input], t.shape.map(|e| e * factor), t.channels, attrs)
    }

    fn head(&mut self, kind: LayerKind, input: usize, classes: usize) -> usize {
        let shape = self.info(input).shape;
        let attrs = LayerAttrs {
            kernel: Some(1),
            stride: Some(1),
            ..Default::default()
        };
        self.push(kind, vec![input], shape, classes, attrs)
    }

    fn megablock(&mut self, input: usize, matrix: &OperationMatrix, residual: bool) -> Result<usize, BuildError> {
        let channels = self.info(input).channels;
        let mut node_out = vec![usize::MAX; matrix.nodes() + 1];
        node_out[1] = input;
        for j in 2..=matrix.nodes() {
            let mut incoming = Vec::new();
            for i in 1..j {
                let op = matrix.get(i, j);
                if !op.is_edge() {
                    continue;
                }
                let edge = match op.conv_shape() {
                    Some((k, d)) => self.conv(node_out[i], channels, k, d),
                    None => node_out[i],
                };
                incoming.push(edge);
            }
            node_out[j] = match incoming.len() {
                0 => unreachable!("legal blocks give every non-entry node a parent"),
                1 => incoming[0],
                _ => self.same_shape(LayerKind::Sum, incoming, LayerAttrs::default())?,
            };
        }
        let attrs = LayerAttrs {
            rate: Some(DROPOUT_RATE),
            ..Default::default()
        };
        let dropped = self.push(
            LayerKind::Dropout,
            vec![node_out[matrix.nodes()]],
            self.info(input).shape,
            channels,
            attrs,
        );
        if residual {
            self.same_shape(LayerKind::Sum, vec![input, dropped], LayerAttrs::default())
        } else {
            Ok(dropped)
        }
    }
}

/// Realizes the encoder–decoder network for `config`.
///
/// Layout: a Conv(3,1) stem to `n` channels; per encoder level a MegaBlock
/// then max pooling, with a Conv(1,1) doubling the channels after each
/// pooling; a bottleneck MegaBlock; per decoder level an upsampling, a
/// concatenation with the copied encoder output, a Conv(1,1) back to the
/// level's channels and a MegaBlock; finally a 1×1×1 head. With `sup` every
/// decoder level except the last also gets an auxiliary head upsampled to
/// full resolution.
pub fn build_network(config: &ArchConfig) -> Result<NetworkIR, BuildError> {
    let decoded = &config.decoded;
    if config.num_classes < 2 {
        return Err(BuildError::Settings("num_classes must be at least 2".into()));
    }
    if config.in_channels == 0 || decoded.n == 0 {
        return Err(BuildError::Settings("channel counts must be positive".into()));
    }
    let poolings = decoded.p;
    let scale = 1usize
        .checked_shl(poolings as u32)
        .filter(|s| *s > 0)
        .ok_or_else(|| BuildError::Settings(format!("{poolings} poolings is too deep")))?;
    for &extent in &config.input_shape {
        if extent == 0 || extent % scale != 0 {
            return Err(BuildError::Indivisible { extent, poolings });
        }
    }
    let matrix = OperationMatrix::from_ops(&decoded.ops, decoded.nodes)?;
    let verdict = matrix.validate();
    if !verdict.is_legal() {
        return Err(BuildError::IllegalBlock(verdict));
    }

    let n = decoded.n;
    let mut b = Builder::new(config.input_shape, config.in_channels);
    let mut x = b.conv(0, n, 3, 1);
    let mut copies = Vec::with_capacity(poolings);
    for level in 0..poolings {
        if level > 0 {
            x = b.conv(x, n << level, 1, 1);
        }
        x = b.megablock(x, &matrix, decoded.res)?;
        copies.push(x);
        x = b.max_pool(x);
    }
    if poolings > 0 {
        x = b.conv(x, n << poolings, 1, 1);
    }
    x = b.megablock(x, &matrix, decoded.res)?;

    let mut aux = Vec::new();
    for level in (0..poolings).rev() {
        let up = b.upsample(x, 2);
        let merged = b.same_shape(LayerKind::Concat, vec![up, copies[level]], LayerAttrs::default())?;
        x = b.conv(merged, n << level, 1, 1);
        x = b.megablock(x, &matrix, decoded.res)?;
        if decoded.sup && level > 0 {
            let logits = b.head(LayerKind::AuxHead, x, config.num_classes);
            aux.push(b.upsample(logits, 1 << level));
        }
    }
    let main = b.head(LayerKind::Head, x, config.num_classes);

    let ir = NetworkIR {
        version: IR_VERSION,
        config: decoded.clone(),
        input: InputSpec {
            shape: config.input_shape,
            channels: config.in_channels,
        },
        num_classes: config.num_classes,
        tensors: b.tensors,
        layers: b.layers,
        outputs: Outputs { main, aux },
    };
    ir.check()?;
    Ok(ir)
}

/// Trainable parameters of the network.
///
/// Each `conv` layer is priced together with the normalization that follows
/// it; `head` and `auxhead` are 1×1×1 convolutions with bias and no
/// normalization. Every other layer is parameter-free.
pub fn count_parameters(ir: &NetworkIR) -> u64 {
    ir.layers
        .iter()
        .map(|layer| {
            let c_out = ir.tensors[layer.output].channels as u64;
            match layer.kind {
                LayerKind::Conv => {
                    let c_in = ir.tensors[layer.inputs[0]].channels;
                    conv_param_count(layer.attrs.kernel.unwrap_or(1), c_in, c_out as usize)
                }
                LayerKind::Head | LayerKind::AuxHead => {
                    let c_in = ir.tensors[layer.inputs[0]].channels as u64;
                    c_in * c_out + c_out
                }
                _ => 0,
            }
        })
        .sum()
}

/// How activation memory is priced and judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub element_bytes: u64,
    pub batch_per_device: u64,
    pub budget_bytes: u64,
}

impl Default for MemoryBudget {
    fn default() -> Self {
        Self {
            element_bytes: 4,
            batch_per_device: 1,
            budget_bytes: DEFAULT_BUDGET_BYTES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub trainable_parameters: u64,
    /// Peak live activation bytes for a single sample.
    pub peak_activation_bytes: u64,
    pub oom: bool,
}

/// Largest total size of simultaneously live tensors while executing the
/// layers in order. A tensor is live from the layer that writes it (the
/// network input from the start) through its last reader; network outputs
/// stay live to the end.
pub fn peak_activation_bytes(ir: &NetworkIR, element_bytes: u64) -> u64 {
    let steps = ir.layers.len();
    if steps == 0 || ir.tensors.is_empty() {
        return 0;
    }
    let mut born = vec![0usize; ir.tensors.len()];
    let mut dies = vec![0usize; ir.tensors.len()];
    for (step, layer) in ir.layers.iter().enumerate() {
        born[layer.output] = step;
        dies[layer.output] = dies[layer.output].max(step);
        for &input in &layer.inputs {
            dies[input] = dies[input].max(step);
        }
    }
    for &out in std::iter::once(&ir.outputs.main).chain(&ir.outputs.aux) {
        dies[out] = steps - 1;
    }
    // difference array over steps
    let mut delta = vec![0i128; steps + 1];
    for t in &ir.tensors {
        let bytes = i128::from(t.bytes(element_bytes));
        delta[born[t.id]] += bytes;
        delta[dies[t.id] + 1] -= bytes;
    }
    let mut live = 0i128;
    let mut peak = 0i128;
    for d in &delta[..steps] {
        live += d;
        peak = peak.max(live);
    }
    peak as u64
}

pub fn estimate_resources(ir: &NetworkIR, budget: &MemoryBudget) -> ResourceEstimate {
    let peak = peak_activation_bytes(ir, budget.element_bytes);
    ResourceEstimate {
        trainable_parameters: count_parameters(ir),
        peak_activation_bytes: peak,
        oom: u128::from(peak) * u128::from(budget.batch_per_device) > u128::from(budget.budget_bytes),
    }
}
