//! Meta-operator flows: the instruction model, its text form, static checks
//! and the per-mode emitters.

pub mod check;
pub mod cm;
pub mod text;
pub mod xbm;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CompGraph, EdgeRef, NodeId, OpKind, OpNode};
use crate::lowering::{CimGeom, Tile, WeightMatrix};
use crate::sched::pool_params;

pub use check::check_flow;
pub use text::{parse_flow, serialize_flow};

/// A buffer level: the chip buffer or one core's local buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L0,
    L1(u32),
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::L0 => f.write_str("L0"),
            Level::L1(c) => write!(f, "L1.{c}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DcomFunc {
    Relu,
    Add,
    ShiftAcc,
    MaxPool,
    AvgPool,
}

impl DcomFunc {
    pub fn name(self) -> &'static str {
        match self {
            DcomFunc::Relu => "relu",
            DcomFunc::Add => "add",
            DcomFunc::ShiftAcc => "shift_acc",
            DcomFunc::MaxPool => "maxpool",
            DcomFunc::AvgPool => "avgpool",
        }
    }

    pub fn parse(s: &str) -> Option<DcomFunc> {
        Some(match s {
            "relu" => DcomFunc::Relu,
            "add" => DcomFunc::Add,
            "shift_acc" => DcomFunc::ShiftAcc,
            "maxpool" => DcomFunc::MaxPool,
            "avgpool" => DcomFunc::AvgPool,
            _ => return None,
        })
    }
}

/// Immediates of `shift_acc`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftAcc {
    pub planes: u32,
    pub cell_bits: u32,
    pub weight_bits: u32,
    pub shift: u32,
    pub xlen: u32,
    /// 0: planes of a column are adjacent; 1: planes are stacked `len` apart.
    pub layout: u32,
}

impl ShiftAcc {
    pub fn imm(&self) -> Vec<i64> {
        [self.planes, self.cell_bits, self.weight_bits, self.shift, self.xlen, self.layout]
            .iter()
            .map(|&v| v as i64)
            .collect()
    }

    pub fn from_imm(imm: &[i64]) -> Option<ShiftAcc> {
        match *imm {
            [p, c, w, s, x, l] => Some(ShiftAcc {
                planes: p as u32,
                cell_bits: c as u32,
                weight_bits: w as u32,
                shift: s as u32,
                xlen: x as u32,
                layout: l as u32,
            }),
            _ => None,
        }
    }

    /// Combines bit-plane sums into a requantized 8-bit output.
    pub fn apply(&self, planes: impl Fn(u32) -> i64, xsum: i64) -> i32 {
        let mut acc: i64 = 0;
        for b in 0..self.planes {
            acc += planes(b) << (b * self.cell_bits);
        }
        acc -= xsum << (self.weight_bits - 1);
        requantize(acc, self.shift)
    }
}

/// Clamp to 32 bits, arithmetic shift, saturate to 8 bits.
pub fn requantize(acc: i64, shift: u32) -> i32 {
    let a = acc.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
    sat8((a >> shift.min(31)) as i64)
}

pub fn sat8(v: i64) -> i32 {
    v.clamp(-128, 127) as i32
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetaOp {
    ReadCore { op: String, param: String, core: u32, src: u64, des: u64 },
    ReadXb { core: u32, xb: u32, src: u64, des: u64 },
    WriteXb { core: u32, xb: u32, tile: String },
    ReadRows { core: u32, xb: u32, lo: u32, hi: u32, src: u64, des: u64 },
    WriteRows { core: u32, xb: u32, lo: u32, hi: u32, tile: String },
    Dcom { func: DcomFunc, imm: Vec<i64>, level: Level, srcs: Vec<u64>, des: u64, len: u64 },
    Mov { src_level: Level, src: u64, des_level: Level, des: u64, len: u64 },
    /// Crossbars are rewritten for subgraph `index`; a barrier costing `cycles`.
    Reprogram { index: u32, cycles: u64 },
}

/// A half-open address range on one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub level: Level,
    pub lo: u64,
    pub hi: u64,
}

impl Region {
    pub fn new(level: Level, at: u64, len: u64) -> Region {
        Region { level, lo: at, hi: at + len }
    }

    pub fn overlaps(&self, o: &Region) -> bool {
        self.level == o.level && self.lo < o.hi && o.lo < self.hi
    }
}

impl MetaOp {
    pub fn is_read(&self) -> bool {
        matches!(self, MetaOp::ReadCore { .. } | MetaOp::ReadXb { .. } | MetaOp::ReadRows { .. })
    }

    pub fn is_write(&self) -> bool {
        matches!(self, MetaOp::WriteXb { .. } | MetaOp::WriteRows { .. })
    }

    pub fn crossbar(&self) -> Option<(u32, u32)> {
        match self {
            MetaOp::ReadXb { core, xb, .. }
            | MetaOp::WriteXb { core, xb, .. }
            | MetaOp::ReadRows { core, xb, .. }
            | MetaOp::WriteRows { core, xb, .. } => Some((*core, *xb)),
            _ => None,
        }
    }
}

/// Attributes of a core-level CIM operator, referenced by `read_core`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreParam {
    pub node: NodeId,
    pub geom: CimGeom,
    pub wm: WeightMatrix,
    pub shift: u32,
    pub in_bits: u32,
    /// Lead core of each replica; a replica's band is its position here.
    pub cores: Vec<u32>,
    pub xbars: u32,
    pub cpm: u64,
}

impl CoreParam {
    pub fn d(&self) -> u32 {
        self.cores.len() as u32
    }

    /// Output rows `[lo, hi)` computed by replica `r`.
    pub fn band(&self, r: u32) -> (u32, u32) {
        band(self.geom.out_hw().0, self.d(), r)
    }
}

/// Row band `r` of `rows` split into `d` contiguous parts of size ceil(rows / d).
pub fn band(rows: u32, d: u32, r: u32) -> (u32, u32) {
    let size = rows.div_ceil(d.max(1));
    ((r * size).min(rows), ((r + 1) * size).min(rows))
}

/// Contents of one crossbar (or one row group) of a CIM operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileSym {
    pub node: NodeId,
    pub geom: CimGeom,
    pub wm: WeightMatrix,
    pub tile: Tile,
    pub in_bits: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IoDecl {
    pub name: String,
    pub addr: u64,
    /// C, H, W
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stmt {
    Op(MetaOp),
    Parallel(Vec<MetaOp>),
}

impl Stmt {
    pub fn ops(&self) -> &[MetaOp] {
        match self {
            Stmt::Op(op) => std::slice::from_ref(op),
            Stmt::Parallel(ops) => ops,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Flow {
    pub arch: Option<String>,
    pub stream: bool,
    pub inputs: Vec<IoDecl>,
    pub outputs: Vec<IoDecl>,
    pub params: BTreeMap<String, CoreParam>,
    pub tiles: BTreeMap<String, TileSym>,
    pub stmts: Vec<Stmt>,
}

impl Flow {
    pub fn ops(&self) -> impl Iterator<Item = &MetaOp> {
        self.stmts.iter().flat_map(|s| s.ops())
    }

    /// Parallel blocks containing at least one CIM read.
    pub fn compute_blocks(&self) -> usize {
        self.stmts
            .iter()
            .filter(|s| matches!(s, Stmt::Parallel(ops) if ops.iter().any(MetaOp::is_read)))
            .count()
    }

    /// Statements that activate crossbars (a lone read or a parallel block of reads).
    pub fn read_statements(&self) -> usize {
        self.stmts.iter().filter(|s| s.ops().iter().any(MetaOp::is_read)).count()
    }
}

/// Linear bump allocator for one buffer level.
#[derive(Clone, Debug, Default)]
pub struct Bump {
    pub next: u64,
}

impl Bump {
    pub fn alloc(&mut self, len: u64) -> u64 {
        let at = self.next;
        self.next += len;
        at
    }
}

/// Chip-buffer placement of every tensor: graph inputs in declaration order,
/// then node outputs in topological order.
#[derive(Clone, Debug, Default)]
pub struct L0Layout {
    pub inputs: BTreeMap<String, u64>,
    pub nodes: BTreeMap<NodeId, u64>,
    pub bump: Bump,
}

impl L0Layout {
    pub fn new(graph: &CompGraph, order: &[NodeId]) -> L0Layout {
        let mut l = L0Layout::default();
        for i in &graph.inputs {
            let at = l.bump.alloc(i.spec.numel() as u64);
            l.inputs.insert(i.name.clone(), at);
        }
        for id in order {
            let at = l.bump.alloc(graph.node(*id).output.numel() as u64);
            l.nodes.insert(*id, at);
        }
        l
    }

    pub fn of(&self, r: &EdgeRef) -> u64 {
        match r {
            EdgeRef::Node(id) => self.nodes[id],
            EdgeRef::Input(name) => self.inputs[name],
        }
    }

    /// `.input` / `.output` declarations of a flow.
    pub fn declare(&self, graph: &CompGraph, flow: &mut Flow) {
        for i in &graph.inputs {
            let (c, h, w) = i.spec.chw();
            flow.inputs.push(IoDecl { name: i.name.clone(), addr: self.inputs[&i.name], dims: vec![c, h, w] });
        }
        for id in &graph.outputs {
            let (c, h, w) = graph.node(*id).output.chw();
            flow.outputs.push(IoDecl { name: format!("n{id}"), addr: self.nodes[id], dims: vec![c, h, w] });
        }
    }
}

/// Whole-tensor DCOM of a digital node.
pub fn digital_op(graph: &CompGraph, node: &OpNode, layout: &L0Layout) -> Result<MetaOp> {
    let len = node.output.numel() as u64;
    let des = layout.nodes[&node.id];
    let srcs: Vec<u64> = node.inputs.iter().map(|r| layout.of(r)).collect();
    let (func, imm) = match node.kind {
        OpKind::Relu => (DcomFunc::Relu, Vec::new()),
        OpKind::Add => (DcomFunc::Add, vec![8]),
        OpKind::MaxPool | OpKind::AvgPool => {
            let (k, s) = pool_params(node).ok_or_else(|| Error::Emit(format!("node {} lacks pool attrs", node.id)))?;
            let (c, h, w) = graph.spec_of(&node.inputs[0])?.chw();
            let f = if node.kind == OpKind::MaxPool { DcomFunc::MaxPool } else { DcomFunc::AvgPool };
            (f, [k, s, c, h, w].iter().map(|&v| v as i64).collect())
        }
        _ => return Err(Error::Emit(format!("node {} is not digital", node.id))),
    };
    Ok(MetaOp::Dcom { func, imm, level: Level::L0, srcs, des, len })
}
