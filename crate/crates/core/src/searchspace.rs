//! Generator and discriminator search spaces, genomes and their decoding.
//!
//! Both spaces are products of independent categorical decisions. A genome is
//! the flat vector of chosen option indices.
//!
//! * Generator cell: ten nodes, each contributing an operation choice (16
//!   options) and an input choice. Node `i` (1-based) may read the cell input
//!   (index 0) or any earlier node `j < i` (index `j`), so its input decision
//!   has `i` options.
//! * Discriminator: five reduction blocks, each an operation (16 options)
//!   followed by a stride-2 reduction (7 options).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CELL_NODES: usize = 10;
pub const DISC_BLOCKS: usize = 5;
pub const GENOME_SCHEMA: u64 = 1;

/// Candidate operation for a generator node or the first half of a reduction block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Conv { k: usize },
    GroupConv { k: usize },
    DSep { k: usize },
    InvBlock { k: usize },
    SeBlock,
    CaBlock,
    Identity,
}

/// Groups used by [`OpKind::GroupConv`] and [`RedOpKind::GroupConv`].
pub const CONV_GROUPS: usize = 4;
/// Expansion factor of [`OpKind::InvBlock`].
pub const INV_EXPANSION: usize = 2;

pub const OPS: [OpKind; 16] = [
    OpKind::Conv { k: 1 },
    OpKind::Conv { k: 3 },
    OpKind::Conv { k: 5 },
    OpKind::Conv { k: 7 },
    OpKind::GroupConv { k: 3 },
    OpKind::GroupConv { k: 5 },
    OpKind::GroupConv { k: 7 },
    OpKind::DSep { k: 3 },
    OpKind::DSep { k: 5 },
    OpKind::DSep { k: 7 },
    OpKind::InvBlock { k: 3 },
    OpKind::InvBlock { k: 5 },
    OpKind::InvBlock { k: 7 },
    OpKind::SeBlock,
    OpKind::CaBlock,
    OpKind::Identity,
];

/// Stride-2, channel-doubling reduction operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RedOpKind {
    Conv { k: usize },
    GroupConv { k: usize },
}

pub const RED_OPS: [RedOpKind; 7] = [
    RedOpKind::Conv { k: 1 },
    RedOpKind::Conv { k: 3 },
    RedOpKind::Conv { k: 5 },
    RedOpKind::Conv { k: 7 },
    RedOpKind::GroupConv { k: 3 },
    RedOpKind::GroupConv { k: 5 },
    RedOpKind::GroupConv { k: 7 },
];

pub const REDUCTION_STRIDE: usize = 2;

// A change to the operation sets must be deliberate.
const _: () = assert!(OPS.len() == 16 && RED_OPS.len() == 7);

impl OpKind {
    pub fn from_index(i: usize) -> Result<Self> {
        OPS.get(i)
            .copied()
            .ok_or_else(|| Error::InvalidGenome(format!("op index {i} out of range 0..{}", OPS.len())))
    }

    pub fn index(self) -> usize {
        OPS.iter().position(|&o| o == self).expect("every OpKind is listed")
    }

    pub fn kernel(self) -> Option<usize> {
        match self {
            OpKind::Conv { k } | OpKind::GroupConv { k } | OpKind::DSep { k } | OpKind::InvBlock { k } => Some(k),
            _ => None,
        }
    }

    /// Short stable name, used for cache keys and logs.
    pub fn slug(self) -> String {
        match self {
            OpKind::Conv { k } => format!("conv{k}"),
            OpKind::GroupConv { k } => format!("gconv{k}"),
            OpKind::DSep { k } => format!("dsep{k}"),
            OpKind::InvBlock { k } => format!("inv{k}"),
            OpKind::SeBlock => "se".into(),
            OpKind::CaBlock => "ca".into(),
            OpKind::Identity => "identity".into(),
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        OPS.iter().copied().find(|o| o.slug() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug())
    }
}

impl RedOpKind {
    pub fn from_index(i: usize) -> Result<Self> {
        RED_OPS.get(i).copied().ok_or_else(|| {
            Error::InvalidGenome(format!("reduction index {i} out of range 0..{}", RED_OPS.len()))
        })
    }

    pub fn kernel(self) -> usize {
        match self {
            RedOpKind::Conv { k } | RedOpKind::GroupConv { k } => k,
        }
    }

    pub fn groups(self) -> usize {
        match self {
            RedOpKind::Conv { .. } => 1,
            RedOpKind::GroupConv { .. } => CONV_GROUPS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Generator,
    Discriminator,
}

impl SpaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SpaceKind::Generator => "generator",
            SpaceKind::Discriminator => "discriminator",
        }
    }
}

/// Option counts of a generator-style cell with `nodes` nodes and `ops` operations:
/// `[ops, 1, ops, 2, ..., ops, nodes]`.
pub fn cell_dims(nodes: usize, ops: usize) -> Vec<usize> {
    (1..=nodes).flat_map(|i| [ops, i]).collect()
}

pub fn decision_dims(space: SpaceKind) -> Vec<usize> {
    match space {
        SpaceKind::Generator => cell_dims(CELL_NODES, OPS.len()),
        SpaceKind::Discriminator => (0..DISC_BLOCKS).flat_map(|_| [OPS.len(), RED_OPS.len()]).collect(),
    }
}

/// Product of option counts; `None` on `u128` overflow.
pub fn cardinality(dims: &[usize]) -> Option<u128> {
    dims.iter().try_fold(1u128, |acc, &d| acc.checked_mul(d as u128))
}

pub fn space_cardinality(space: SpaceKind) -> u128 {
    cardinality(&decision_dims(space)).expect("both spaces fit in u128")
}

/// A point in a search space.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genome {
    pub space: SpaceKind,
    pub decisions: Vec<usize>,
}

impl Genome {
    pub fn new(space: SpaceKind, decisions: Vec<usize>) -> Result<Self> {
        let g = Genome { space, decisions };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        check_decisions(&decision_dims(self.space), &self.decisions)
    }

    /// Generator genome from per-node `(op index, input index)` pairs.
    pub fn generator_from_nodes(nodes: &[(usize, usize)]) -> Result<Self> {
        Genome::new(
            SpaceKind::Generator,
            nodes.iter().flat_map(|&(o, i)| [o, i]).collect(),
        )
    }

    /// Canonical JSON document.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "schema": GENOME_SCHEMA,
            "space": self.space.as_str(),
            "decisions": self.decisions,
        })
        .to_string()
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "schema": GENOME_SCHEMA,
            "space": self.space.as_str(),
            "decisions": self.decisions,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::parse("$", e))?;
        Self::from_json_value(&value)
    }

    /// Reads a genome document; unknown fields are ignored.
    pub fn from_json_value(value: &serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::parse("$", "expected an object"))?;
        let schema = obj
            .get("schema")
            .ok_or_else(|| Error::parse("schema", "missing field"))?
            .as_u64()
            .ok_or_else(|| Error::parse("schema", "expected an integer"))?;
        if schema != GENOME_SCHEMA {
            return Err(Error::parse("schema", format!("unsupported version {schema}")));
        }
        let space = match obj.get("space").map(|v| v.as_str()) {
            None => return Err(Error::parse("space", "missing field")),
            Some(Some("generator")) => SpaceKind::Generator,
            Some(Some("discriminator")) => SpaceKind::Discriminator,
            Some(other) => {
                return Err(Error::parse("space", format!("unknown space {other:?}")));
            }
        };
        let arr = obj
            .get("decisions")
            .ok_or_else(|| Error::parse("decisions", "missing field"))?
            .as_array()
            .ok_or_else(|| Error::parse("decisions", "expected an array"))?;
        let decisions = arr
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_u64()
                    .map(|x| x as usize)
                    .ok_or_else(|| Error::parse(format!("decisions[{i}]"), "expected a non-negative integer"))
            })
            .collect::<Result<Vec<_>>>()?;
        Genome::new(space, decisions).map_err(|e| Error::parse("decisions", e))
    }

    /// Stable short content hash.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        hex::encode(&digest[..8])
    }
}

impl Serialize for Genome {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Genome {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(deserializer)?;
        Genome::from_json_value(&value).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.space.as_str(), self.decisions)
    }
}

pub fn check_decisions(dims: &[usize], decisions: &[usize]) -> Result<()> {
    if dims.len() != decisions.len() {
        return Err(Error::InvalidGenome(format!(
            "expected {} decisions, got {}",
            dims.len(),
            decisions.len()
        )));
    }
    for (pos, (&d, &c)) in dims.iter().zip(decisions).enumerate() {
        if c >= d {
            return Err(Error::InvalidGenome(format!(
                "decision {pos} = {c} out of range 0..{d}"
            )));
        }
    }
    Ok(())
}

/// One node of a decoded cell: an operation reading a single earlier tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellNode {
    pub op: OpKind,
    /// 0 is the cell input, `j > 0` the output of node `j`.
    pub input: usize,
}

/// How the cell output is formed from node outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CellOutput {
    /// Elementwise sum of the listed leaf nodes (1-based).
    LeafSum(Vec<usize>),
    /// The single leaf, which is always the last node.
    Last,
}

/// Decoded generator cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellGraph {
    pub nodes: Vec<CellNode>,
    /// 1-based ids of nodes no other node reads, ascending.
    pub leaves: Vec<usize>,
    pub output: CellOutput,
}

impl CellGraph {
    /// Builds a cell from nodes, validating the wiring.
    pub fn from_nodes(nodes: Vec<CellNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidGenome("cell has no nodes".into()));
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.input > i {
                return Err(Error::InvalidGenome(format!(
                    "node {} reads input {} (must be < {})",
                    i + 1,
                    n.input,
                    i + 1
                )));
            }
        }
        let consumed: BTreeSet<usize> = nodes.iter().map(|n| n.input).collect();
        let leaves: Vec<usize> = (1..=nodes.len()).filter(|i| !consumed.contains(i)).collect();
        let output = if leaves.len() > 1 {
            CellOutput::LeafSum(leaves.clone())
        } else {
            CellOutput::Last
        };
        Ok(CellGraph { nodes, leaves, output })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes whose output is consumed, by consumer count (fan-out).
    pub fn fan_out(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nodes.len() + 1];
        for n in &self.nodes {
            counts[n.input] += 1;
        }
        for &l in &self.leaves {
            counts[l] += 1;
        }
        counts
    }
}

/// Decodes any cell-shaped genome (`[op, input]` pairs) into a graph.
pub fn decode_cell(decisions: &[usize]) -> Result<CellGraph> {
    if decisions.len() % 2 != 0 {
        return Err(Error::InvalidGenome("cell genome must have an even length".into()));
    }
    let nodes = decisions
        .chunks(2)
        .map(|pair| Ok(CellNode { op: OpKind::from_index(pair[0])?, input: pair[1] }))
        .collect::<Result<Vec<_>>>()?;
    CellGraph::from_nodes(nodes)
}

pub fn decode_generator(genome: &Genome) -> Result<CellGraph> {
    if genome.space != SpaceKind::Generator {
        return Err(Error::InvalidGenome("expected a generator genome".into()));
    }
    if genome.decisions.len() != 2 * CELL_NODES {
        return Err(Error::InvalidGenome(format!(
            "expected {} decisions, got {}",
            2 * CELL_NODES,
            genome.decisions.len()
        )));
    }
    decode_cell(&genome.decisions)
}

/// One decoded reduction block with its channel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReductionBlock {
    pub op: OpKind,
    pub reduction: RedOpKind,
    /// Channels entering the block (and leaving its first operation).
    pub channels: usize,
}

impl ReductionBlock {
    pub fn out_channels(&self) -> usize {
        self.channels * 2
    }
}

/// Decodes the five reduction blocks; block `b` works on `n * 2^b` channels.
pub fn decode_discriminator(genome: &Genome, n: usize) -> Result<Vec<ReductionBlock>> {
    if genome.space != SpaceKind::Discriminator {
        return Err(Error::InvalidGenome("expected a discriminator genome".into()));
    }
    if genome.decisions.len() != 2 * DISC_BLOCKS {
        return Err(Error::InvalidGenome(format!(
            "expected {} decisions, got {}",
            2 * DISC_BLOCKS,
            genome.decisions.len()
        )));
    }
    genome
        .decisions
        .chunks(2)
        .enumerate()
        .map(|(b, pair)| {
            Ok(ReductionBlock {
                op: OpKind::from_index(pair[0])?,
                reduction: RedOpKind::from_index(pair[1])?,
                channels: n << b,
            })
        })
        .collect()
}
