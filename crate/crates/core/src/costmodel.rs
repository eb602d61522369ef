//! Analytical Mult-Adds and parameter counts, and the generator cost gate.
//!
//! Conventions:
//! * Only multiplies inside convolutions and linear layers are counted.
//!   Activations, batch norm, pooling, the attention gate's channelwise
//!   rescale and bias additions contribute no Mult-Adds.
//! * Biases, PReLU slopes and batch-norm affine terms count as parameters.
//! * Generator costs are quoted for producing one output image at the
//!   reference resolution (1280x720 by default).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::{
    CellGraph, OpKind, RedOpKind, ReductionBlock, CONV_GROUPS, INV_EXPANSION, REDUCTION_STRIDE,
};
use crate::tensorkit::GATE_REDUCTION;

pub const REFERENCE_RESOLUTION: (usize, usize) = (1280, 720);

/// Mult-Adds and parameter count of one component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCost {
    pub mult_adds: u64,
    pub params: u64,
}

impl std::ops::Add for OpCost {
    type Output = OpCost;
    fn add(self, o: OpCost) -> OpCost {
        OpCost {
            mult_adds: self.mult_adds + o.mult_adds,
            params: self.params + o.params,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub id: String,
    pub mult_adds: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub mult_adds: u64,
    pub params: u64,
    pub breakdown: Vec<CostEntry>,
}

impl CostReport {
    fn from_entries(breakdown: Vec<CostEntry>) -> Self {
        CostReport {
            mult_adds: breakdown.iter().map(|e| e.mult_adds).sum(),
            params: breakdown.iter().map(|e| e.params).sum(),
            breakdown,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLimit {
    pub max_mult_adds: u64,
    pub resolution: (usize, usize),
}

impl CostLimit {
    pub fn new(max_mult_adds: u64, resolution: (usize, usize)) -> Result<Self> {
        if max_mult_adds == 0 {
            return Err(Error::Config("Mult-Adds limit must be positive".into()));
        }
        Ok(CostLimit { max_mult_adds, resolution })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum GateOutcome {
    Pass,
    Reject { mult_adds: u64, limit: u64 },
}

impl GateOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, GateOutcome::Pass)
    }
}

/// Rejects iff the report exceeds the limit; equality passes.
pub fn gate(report: &CostReport, limit: &CostLimit) -> GateOutcome {
    if report.mult_adds > limit.max_mult_adds {
        GateOutcome::Reject {
            mult_adds: report.mult_adds,
            limit: limit.max_mult_adds,
        }
    } else {
        GateOutcome::Pass
    }
}

/// Cost of a convolution with padding `(k - 1) / 2`.
pub fn conv_cost(
    kernel: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    stride: usize,
    (h, w): (usize, usize),
) -> Result<OpCost> {
    if h == 0 || w == 0 || cin == 0 {
        return Err(Error::shape("positive H, W and channels", format!("{cin}x{h}x{w}")));
    }
    if kernel > h || kernel > w {
        return Err(Error::shape(
            format!("kernel {kernel} <= spatial size"),
            format!("{h}x{w}"),
        ));
    }
    if cin % groups != 0 || cout % groups != 0 {
        return Err(Error::shape(
            format!("channels divisible by {groups} groups"),
            format!("{cin} -> {cout}"),
        ));
    }
    let pad = (kernel - 1) / 2;
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let taps = (kernel * kernel * (cin / groups)) as u64;
    Ok(OpCost {
        mult_adds: (oh * ow) as u64 * taps * cout as u64,
        params: taps * cout as u64 + cout as u64,
    })
}

pub fn linear_cost(fin: usize, fout: usize) -> OpCost {
    OpCost {
        mult_adds: (fin * fout) as u64,
        params: (fin * fout + fout) as u64,
    }
}

pub fn prelu_cost(channels: usize) -> OpCost {
    OpCost { mult_adds: 0, params: channels as u64 }
}

pub fn batchnorm_cost(channels: usize) -> OpCost {
    OpCost { mult_adds: 0, params: 2 * channels as u64 }
}

/// Cost of a searchable operation mapping `cin` to `cout` channels at `(H, W)`,
/// excluding the activation that follows it.
pub fn op_cost(op: OpKind, cin: usize, cout: usize, spatial: (usize, usize)) -> Result<OpCost> {
    let same_channels = || {
        if cin != cout {
            Err(Error::shape(format!("{op} keeps channels"), format!("{cin} -> {cout}")))
        } else {
            Ok(())
        }
    };
    match op {
        OpKind::Conv { k } => conv_cost(k, cin, cout, 1, 1, spatial),
        OpKind::GroupConv { k } => conv_cost(k, cin, cout, CONV_GROUPS, 1, spatial),
        OpKind::DSep { k } => Ok(conv_cost(k, cin, cin, cin, 1, spatial)? + conv_cost(1, cin, cout, 1, 1, spatial)?),
        OpKind::InvBlock { k } => {
            let hidden = cin * INV_EXPANSION;
            Ok(conv_cost(1, cin, hidden, 1, 1, spatial)?
                + prelu_cost(hidden)
                + conv_cost(k, hidden, hidden, hidden, 1, spatial)?
                + prelu_cost(hidden)
                + conv_cost(1, hidden, cout, 1, 1, spatial)?)
        }
        OpKind::SeBlock | OpKind::CaBlock => {
            same_channels()?;
            if spatial.0 == 0 || spatial.1 == 0 {
                return Err(Error::shape("positive H, W", format!("{spatial:?}")));
            }
            let hidden = (cin / GATE_REDUCTION).max(1);
            Ok(linear_cost(cin, hidden) + linear_cost(hidden, cin))
        }
        OpKind::Identity => {
            same_channels()?;
            Ok(OpCost::default())
        }
    }
}

/// Cost of a stride-2 reduction from `cin` to `2 * cin` channels.
pub fn red_op_cost(op: RedOpKind, cin: usize, spatial: (usize, usize)) -> Result<OpCost> {
    conv_cost(op.kernel(), cin, 2 * cin, op.groups(), REDUCTION_STRIDE, spatial)
}

/// Number of x2 upsampling stages for a scale factor (1, 2 or 4).
pub fn upsample_stages(scale: usize) -> Result<usize> {
    match scale {
        1 => Ok(0),
        2 => Ok(1),
        4 => Ok(2),
        _ => Err(Error::Config(format!("unsupported scale {scale}; expected 1, 2 or 4"))),
    }
}

/// Mult-Adds and parameters of a full generator producing an image of
/// `output` = `(width, height)` pixels. Layers before upsampling run at
/// `output / scale`.
pub fn generator_cost(cell: &CellGraph, n: usize, scale: usize, output: (usize, usize)) -> Result<CostReport> {
    let stages = upsample_stages(scale)?;
    let (ow, oh) = output;
    if ow % scale != 0 || oh % scale != 0 {
        return Err(Error::shape(
            format!("output divisible by scale {scale}"),
            format!("{ow}x{oh}"),
        ));
    }
    let lr = (oh / scale, ow / scale);
    let mut entries = Vec::new();
    let mut push = |id: String, c: OpCost| {
        entries.push(CostEntry { id, mult_adds: c.mult_adds, params: c.params })
    };
    push("head".into(), conv_cost(3, 3, n, 1, 1, lr)?);
    for (i, node) in cell.nodes.iter().enumerate() {
        push(format!("node{}", i + 1), op_cost(node.op, n, n, lr)? + prelu_cost(n));
    }
    push("post".into(), conv_cost(3, n, n, 1, 1, lr)?);
    let mut spatial = lr;
    for s in 0..stages {
        push(format!("up{}", s + 1), conv_cost(3, n, 4 * n, 1, 1, spatial)?);
        spatial = (spatial.0 * 2, spatial.1 * 2);
    }
    push("tail".into(), conv_cost(3, n, 3, 1, 1, spatial)?);
    Ok(CostReport::from_entries(entries))
}

/// Cost of a discriminator on `patch x patch` inputs: a fixed 3x3 stem
/// (3 -> n) with PReLU, the reduction blocks (each operation and reduction
/// followed by batch norm and PReLU), then the optional `m`-unit bottleneck
/// (with PReLU) and the final linear layer.
pub fn discriminator_cost(blocks: &[ReductionBlock], n: usize, m: usize, patch: usize) -> Result<CostReport> {
    let mut entries = Vec::new();
    let mut push = |id: String, c: OpCost| {
        entries.push(CostEntry { id, mult_adds: c.mult_adds, params: c.params })
    };
    let mut spatial = (patch, patch);
    push("stem".into(), conv_cost(3, 3, n, 1, 1, spatial)? + prelu_cost(n));
    let mut channels = n;
    for (b, blk) in blocks.iter().enumerate() {
        let c = blk.channels;
        push(
            format!("block{}.op", b + 1),
            op_cost(blk.op, c, c, spatial)? + batchnorm_cost(c) + prelu_cost(c),
        );
        push(
            format!("block{}.reduce", b + 1),
            red_op_cost(blk.reduction, c, spatial)? + batchnorm_cost(2 * c) + prelu_cost(2 * c),
        );
        spatial = (spatial.0.div_ceil(2), spatial.1.div_ceil(2));
        channels = 2 * c;
    }
    let features = channels * spatial.0 * spatial.1;
    if m > 0 {
        push("bottleneck".into(), linear_cost(features, m) + prelu_cost(m));
        push("classifier".into(), linear_cost(m, 1));
    } else {
        push("classifier".into(), linear_cost(features, 1));
    }
    Ok(CostReport::from_entries(entries))
}
