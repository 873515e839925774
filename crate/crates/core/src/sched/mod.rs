//! Scheduling passes: computation-graph (`cg`), matrix-vector (`mvm`) and
//! vector-vector (`vvm`) granularity.

pub mod cg;
pub mod mvm;
pub mod vvm;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::arch::{cycles_per_mvm, HwSpec};
use crate::error::Result;
use crate::graph::{Attrs, CompGraph, NodeId, OpKind, OpNode};
use crate::lowering::{
    cores_per_replica, rows_used, tiles, vxb_plan, weight_matrix_of, CimGeom, DimBinding, Tile, VxbPlan,
    WeightMatrix,
};

/// Which graph-level optimizations are enabled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CgStrategy {
    #[default]
    PipelineAndDuplication,
    PipelineOnly,
    DuplicationOnly,
}

impl CgStrategy {
    pub fn duplicates(self) -> bool {
        self != CgStrategy::PipelineOnly
    }

    pub fn pipelines(self) -> bool {
        self != CgStrategy::DuplicationOnly
    }
}

/// Lowering facts about one CIM operator, computed once per compile.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CimInfo {
    pub id: NodeId,
    pub geom: CimGeom,
    pub wm: WeightMatrix,
    pub plan: VxbPlan,
    pub tiles: Vec<Tile>,
    pub cores_per_replica: u32,
    pub input_bits: u32,
    /// Cycles of one activation of a full replica.
    pub cpm: u64,
    pub windows: u64,
}

impl CimInfo {
    pub fn work(&self) -> u64 {
        self.windows * self.cpm
    }

    /// Output rows available for band partitioning.
    pub fn band_rows(&self) -> u32 {
        self.geom.out_hw().0
    }

    pub fn row_work(&self) -> u64 {
        self.geom.out_hw().1 as u64 * self.cpm
    }

    /// Work of the largest band when the output rows are split D ways.
    pub fn replica_work(&self, d: u32) -> u64 {
        self.band_rows().div_ceil(d.max(1)) as u64 * self.row_work()
    }

    /// Weight rows programmed per replica.
    pub fn rows_per_replica(&self) -> u64 {
        self.tiles.iter().map(|t| t.rows as u64).sum()
    }
}

pub fn analyze(graph: &CompGraph, hw: &HwSpec, binding: DimBinding) -> Result<BTreeMap<NodeId, CimInfo>> {
    let mut out = BTreeMap::new();
    for node in graph.cim_nodes() {
        let geom = CimGeom::of(graph, node)?;
        let wm = weight_matrix_of(node, hw, binding)?;
        let plan = vxb_plan(&wm, hw)?;
        let input_bits = graph.spec_of(&node.inputs[0])?.precision_bits;
        let cpm = cycles_per_mvm(hw, rows_used(&wm, hw), input_bits)?;
        out.insert(
            node.id,
            CimInfo {
                id: node.id,
                tiles: tiles(&wm, &plan, hw),
                cores_per_replica: cores_per_replica(&plan, hw),
                windows: geom.windows() as u64,
                geom,
                wm,
                plan,
                input_bits,
                cpm,
            },
        );
    }
    Ok(out)
}

/// Element operations of a digital node.
pub fn digital_ops(node: &OpNode) -> u64 {
    node.output.numel() as u64
}

/// Cycles a node needs on one replica.
pub fn node_work(graph: &CompGraph, node: &OpNode, hw: &HwSpec) -> Result<u64> {
    if node.kind.is_cim() {
        Ok(analyze(graph, hw, DimBinding::default())?[&node.id].work())
    } else {
        Ok(hw.chip.alu_ops_per_cycle.cycles_for(digital_ops(node)))
    }
}

/// Pool window parameters of a pooling node.
pub fn pool_params(node: &OpNode) -> Option<(usize, usize)> {
    match (&node.kind, &node.attrs) {
        (OpKind::MaxPool | OpKind::AvgPool, Attrs::Pool { kernel, stride }) => Some((*kernel, *stride)),
        _ => None,
    }
}
