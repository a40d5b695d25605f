//! Blocks as directed acyclic graphs over an upper-triangular operation
//! matrix.
//!
//! Nodes are numbered from 1. Entry `(i, j)` with `i < j` is the operation
//! on the edge from node `i` to node `j`; node 1 is the block input and the
//! last node is the block output.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockError {
    #[error("a block needs at least 2 nodes, got {0}")]
    NodesOutOfRange(usize),
    #[error("{nodes} nodes need {needed} op codes, got {got}")]
    OpsTooShort {
        nodes: usize,
        needed: usize,
        got: usize,
    },
    #[error("invalid operation code {0}")]
    InvalidCode(u8),
    #[error("illegal block structure: {0}")]
    Illegal(LegalityVerdict),
    #[error("a block needs at least one channel")]
    NoChannels,
}

/// Edge operations a block can use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operation {
    None,
    Conv1,
    Conv3,
    Conv5,
    Conv3Dilated,
    Conv5Dilated,
    Skip,
}

impl Operation {
    pub const ALL: [Operation; 7] = [
        Operation::None,
        Operation::Conv1,
        Operation::Conv3,
        Operation::Conv5,
        Operation::Conv3Dilated,
        Operation::Conv5Dilated,
        Operation::Skip,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, BlockError> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or(BlockError::InvalidCode(code))
    }

    /// `(kernel, dilation)` for convolutions.
    pub fn conv_shape(self) -> Option<(usize, usize)> {
        match self {
            Operation::Conv1 => Some((1, 1)),
            Operation::Conv3 => Some((3, 1)),
            Operation::Conv5 => Some((5, 1)),
            Operation::Conv3Dilated => Some((3, 2)),
            Operation::Conv5Dilated => Some((5, 2)),
            Operation::None | Operation::Skip => None,
        }
    }

    pub fn is_edge(self) -> bool {
        self != Operation::None
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self, self.conv_shape()) {
            (_, Some((k, d))) => write!(f, "Conv({k}, {d})"),
            (Operation::Skip, _) => f.write_str("Skip"),
            _ => f.write_str("None"),
        }
    }
}

/// Trainable parameters of one edge operation: convolution weights and bias
/// plus the scale and shift of the normalization that follows it.
/// Dilation does not change the count.
pub fn operation_param_count(op: Operation, c_in: usize, c_out: usize) -> u64 {
    match op.conv_shape() {
        Some((k, _)) => conv_param_count(k, c_in, c_out),
        None => 0,
    }
}

/// `k³·c_in·c_out` weights, `c_out` biases and `2·c_out` normalization
/// parameters.
pub fn conv_param_count(kernel: usize, c_in: usize, c_out: usize) -> u64 {
    let k3 = (kernel * kernel * kernel) as u64;
    k3 * c_in as u64 * c_out as u64 + 3 * c_out as u64
}

/// Strictly upper-triangular operation matrix of a block.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OperationMatrix {
    nodes: usize,
    // column-major upper triangle: (1,2); (1,3), (2,3); (1,4), ...
    entries: Vec<Operation>,
}

fn triangle_len(nodes: usize) -> usize {
    nodes * (nodes - 1) / 2
}

fn slot(i: usize, j: usize) -> usize {
    (j - 1) * (j - 2) / 2 + (i - 1)
}

impl OperationMatrix {
    /// A matrix with every entry set to [`Operation::None`].
    pub fn empty(nodes: usize) -> Result<Self, BlockError> {
        if nodes < 2 {
            return Err(BlockError::NodesOutOfRange(nodes));
        }
        Ok(Self {
            nodes,
            entries: vec![Operation::None; triangle_len(nodes)],
        })
    }

    /// Fills the matrix from the leading `nodes·(nodes−1)/2` codes of `ops`,
    /// column by column, so that a smaller block always uses a prefix of the
    /// vector. Remaining codes are ignored.
    pub fn from_ops(ops: &[u8], nodes: usize) -> Result<Self, BlockError> {
        let mut matrix = Self::empty(nodes)?;
        let needed = triangle_len(nodes);
        if ops.len() < needed {
            return Err(BlockError::OpsTooShort {
                nodes,
                needed,
                got: ops.len(),
            });
        }
        for (entry, &code) in matrix.entries.iter_mut().zip(ops) {
            *entry = Operation::from_code(code)?;
        }
        Ok(matrix)
    }

    /// A chain `1 → 2 → … → nodes` with every other entry empty.
    pub fn shifted_diagonal(nodes: usize, op: Operation) -> Result<Self, BlockError> {
        let mut matrix = Self::empty(nodes)?;
        for j in 2..=nodes {
            matrix.set(j - 1, j, op);
        }
        Ok(matrix)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Entry `(i, j)`; anything outside the strict upper triangle is `None`.
    pub fn get(&self, i: usize, j: usize) -> Operation {
        if i >= 1 && i < j && j <= self.nodes {
            self.entries[slot(i, j)]
        } else {
            Operation::None
        }
    }

    /// # Panics
    /// If `(i, j)` is not in the strict upper triangle.
    pub fn set(&mut self, i: usize, j: usize, op: Operation) {
        assert!(
            i >= 1 && i < j && j <= self.nodes,
            "({i}, {j}) is outside the upper triangle of a {}-node matrix",
            self.nodes
        );
        self.entries[slot(i, j)] = op;
    }

    /// Codes in fill order, the inverse of [`OperationMatrix::from_ops`].
    pub fn to_ops(&self) -> Vec<u8> {
        self.entries.iter().map(|op| op.code()).collect()
    }

    /// Non-empty edges as `(from, to, op)`, grouped by destination node.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, Operation)> + '_ {
        (2..=self.nodes).flat_map(move |j| {
            (1..j).filter_map(move |i| {
                let op = self.get(i, j);
                op.is_edge().then_some((i, j, op))
            })
        })
    }

    pub fn edge_count(&self) -> usize {
        self.entries.iter().filter(|op| op.is_edge()).count()
    }

    fn row_is_empty(&self, i: usize) -> bool {
        (i + 1..=self.nodes).all(|j| !self.get(i, j).is_edge())
    }

    fn column_is_empty(&self, j: usize) -> bool {
        (1..j).all(|i| !self.get(i, j).is_edge())
    }

    /// Checks that only node 1 is a source and only the last node is a sink.
    pub fn validate(&self) -> LegalityVerdict {
        let last = self.nodes;
        let mut violations = Vec::new();
        for node in 1..=last {
            if node > 1 && self.column_is_empty(node) {
                let kind = if node == last {
                    ViolationKind::DisconnectedExit
                } else {
                    ViolationKind::IntermediateSource
                };
                violations.push(Violation { node, kind });
            }
            if node < last && self.row_is_empty(node) {
                let kind = if node == 1 {
                    ViolationKind::DisconnectedEntry
                } else {
                    ViolationKind::IntermediateSink
                };
                violations.push(Violation { node, kind });
            }
        }
        LegalityVerdict { violations }
    }
}

impl fmt::Display for OperationMatrix {
    /// Full `nodes × nodes` grid; rows are source nodes, columns destinations.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 1..=self.nodes {
            for j in 1..=self.nodes {
                if j > 1 {
                    f.write_str(" ")?;
                }
                write!(f, "{:>2}", self.get(i, j).code())?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    /// An intermediate node without parents.
    IntermediateSource,
    /// An intermediate node without children.
    IntermediateSink,
    /// The block input feeds no node.
    DisconnectedEntry,
    /// No node feeds the block output.
    DisconnectedExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    pub node: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LegalityVerdict {
    pub violations: Vec<Violation>,
}

impl LegalityVerdict {
    pub fn is_legal(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for LegalityVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_legal() {
            return f.write_str("legal");
        }
        f.write_str("illegal:")?;
        for v in &self.violations {
            let what = match v.kind {
                ViolationKind::IntermediateSource => "source",
                ViolationKind::IntermediateSink => "sink",
                ViolationKind::DisconnectedEntry => "sink (block input unused)",
                ViolationKind::DisconnectedExit => "source (block output unreachable)",
            };
            write!(f, " node {} is a {what};", v.node)?;
        }
        Ok(())
    }
}

/// A legal block together with the channel count all of its nodes carry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    matrix: OperationMatrix,
    channels: usize,
}

impl BlockSpec {
    pub fn new(matrix: OperationMatrix, channels: usize) -> Result<Self, BlockError> {
        if channels == 0 {
            return Err(BlockError::NoChannels);
        }
        let verdict = matrix.validate();
        if !verdict.is_legal() {
            return Err(BlockError::Illegal(verdict));
        }
        Ok(Self { matrix, channels })
    }

    pub fn matrix(&self) -> &OperationMatrix {
        &self.matrix
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_count(&self) -> u64 {
        self.matrix
            .edges()
            .map(|(_, _, op)| operation_param_count(op, self.channels, self.channels))
            .sum()
    }
}
