//! Computation-graph scheduling: operator duplication under the core budget,
//! pipeline balancing, and segmentation into subgraphs that fit the chip.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{analyze, digital_ops, CgStrategy, CimInfo};
use crate::arch::{HwSpec, Limit};
use crate::error::{Error, Result};
use crate::graph::{topo_order, CompGraph, NodeId};
use crate::lowering::DimBinding;

/// One CIM operator as seen by the duplication search.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DupItem {
    pub id: NodeId,
    pub cores: u32,
    pub work: u64,
    /// (output rows, work per row) when replicas split the output into row bands.
    pub band: Option<(u32, u64)>,
    pub max_dup: u32,
    pub pinned: Option<u32>,
}

impl DupItem {
    pub fn from_info(info: &CimInfo, pinned: Option<u32>) -> Self {
        DupItem {
            id: info.id,
            cores: info.cores_per_replica,
            work: info.work(),
            band: Some((info.band_rows(), info.row_work())),
            max_dup: info.band_rows(),
            pinned,
        }
    }

    /// Work of the busiest replica at duplication `d`.
    pub fn cost(&self, d: u32) -> u64 {
        match self.band {
            Some((rows, row_work)) => rows.div_ceil(d) as u64 * row_work,
            None => self.work.div_ceil(d as u64),
        }
    }

    pub fn dup_range(&self) -> std::ops::RangeInclusive<u32> {
        match self.pinned {
            Some(p) => p..=p,
            None => 1..=self.max_dup.max(1),
        }
    }
}

/// Minimum initiation interval over all duplication vectors within `budget`
/// cores, and the vector reaching it with the fewest cores.
pub fn min_ii(items: &[DupItem], budget: u32) -> Option<(u64, Vec<u32>)> {
    const INF: u64 = u64::MAX;
    let b = budget as usize;
    // f[x]: best bottleneck of the items seen so far using at most x cores.
    let mut f = vec![0u64; b + 1];
    for it in items {
        let mut g = vec![INF; b + 1];
        for (x, gx) in g.iter_mut().enumerate() {
            for d in it.dup_range() {
                let need = d as usize * it.cores as usize;
                if need > x {
                    break;
                }
                let prev = f[x - need];
                if prev == INF {
                    continue;
                }
                *gx = (*gx).min(prev.max(it.cost(d)));
            }
        }
        f = g;
    }
    let ii = f[b];
    if ii == INF {
        return None;
    }
    let dups: Vec<u32> = items
        .iter()
        .map(|it| it.dup_range().find(|&d| it.cost(d) <= ii).expect("optimum is reachable"))
        .collect();
    debug_assert!(items.iter().zip(&dups).map(|(it, d)| it.cores * d).sum::<u32>() <= budget);
    Some((ii, dups))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DupEntry {
    pub d: u32,
    pub cores_per_replica: u32,
    pub cores: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DupAssignment {
    pub entries: BTreeMap<NodeId, DupEntry>,
    pub ii: u64,
}

impl DupAssignment {
    pub fn d(&self, id: NodeId) -> u32 {
        self.entries.get(&id).map_or(1, |e| e.d)
    }

    pub fn total_cores(&self) -> u32 {
        self.entries.values().map(|e| e.d * e.cores_per_replica).sum()
    }
}

fn finish(order: &[NodeId], info: &BTreeMap<NodeId, CimInfo>, dups: &BTreeMap<NodeId, u32>) -> DupAssignment {
    let mut next = 0u32;
    let mut out = DupAssignment::default();
    for id in order {
        let (d, cpr) = match info.get(id) {
            Some(i) => (dups[id], i.cores_per_replica),
            None => (1, 0),
        };
        let n = d * cpr;
        out.entries.insert(*id, DupEntry { d, cores_per_replica: cpr, cores: (next..next + n).collect() });
        next += n;
        if let Some(i) = info.get(id) {
            out.ii = out.ii.max(DupItem::from_info(i, None).cost(d));
        }
    }
    out
}

fn items_of(graph: &CompGraph, info: &BTreeMap<NodeId, CimInfo>, nodes: &[NodeId]) -> Vec<DupItem> {
    nodes
        .iter()
        .filter_map(|id| info.get(id).map(|i| DupItem::from_info(i, graph.node(*id).pins.dup)))
        .collect()
}

/// Duplication of the nodes in `nodes` (topological order) on the whole chip.
pub fn duplicate(
    graph: &CompGraph,
    hw: &HwSpec,
    info: &BTreeMap<NodeId, CimInfo>,
    nodes: &[NodeId],
    strategy: CgStrategy,
) -> Result<DupAssignment> {
    let items = items_of(graph, info, nodes);
    let base: u32 = items.iter().map(|it| it.cores * it.pinned.unwrap_or(1)).sum();
    if base > hw.chip.core_number {
        return Err(Error::Capacity(format!(
            "subgraph needs {base} cores at minimum duplication, chip has {}",
            hw.chip.core_number
        )));
    }
    let chosen: Vec<u32> = if strategy.duplicates() {
        min_ii(&items, hw.chip.core_number).expect("base assignment fits").1
    } else {
        items.iter().map(|it| it.pinned.unwrap_or(1)).collect()
    };
    let dups = items.iter().zip(chosen).map(|(it, d)| (it.id, d)).collect();
    Ok(finish(nodes, info, &dups))
}

/// Duplication for a whole graph that fits the chip at D = 1.
pub fn cg_duplicate(graph: &CompGraph, hw: &HwSpec) -> Result<DupAssignment> {
    let info = analyze(graph, hw, DimBinding::default())?;
    duplicate(graph, hw, &info, &topo_order(graph)?, CgStrategy::DuplicationOnly)
}

/// Lowers duplication where the output stream would outrun the L0 bandwidth
/// or the ALU of a digital consumer.
pub fn balance_pipeline(
    graph: &CompGraph,
    dup: &DupAssignment,
    hw: &HwSpec,
    info: &BTreeMap<NodeId, CimInfo>,
) -> DupAssignment {
    let order: Vec<NodeId> = {
        let mut ids: Vec<NodeId> = dup.entries.keys().copied().collect();
        let topo = topo_order(graph).unwrap_or_default();
        ids.sort_by_key(|id| topo.iter().position(|t| t == id));
        ids
    };
    let mut dups = BTreeMap::new();
    for id in &order {
        let Some(ci) = info.get(id) else { continue };
        let node = graph.node(*id);
        let item = DupItem::from_info(ci, node.pins.dup);
        let out_bits = node.output.numel() as u64 * node.output.precision_bits as u64;
        let mut need = 0u64;
        if let Limit::Finite(bw) = hw.chip.l0_bw_bits_per_cycle {
            need = need.max(out_bits.div_ceil(bw) + (hw.chip.noc_cost_cycles_per_bit * out_bits as f64).ceil() as u64);
        }
        for c in graph.consumers(*id) {
            let cn = graph.node(c);
            if !cn.kind.is_cim() {
                need = need.max(hw.chip.alu_ops_per_cycle.cycles_for(digital_ops(cn)));
            }
        }
        let mut d = dup.d(*id);
        if node.pins.dup.is_none() {
            while d > 1 && item.cost(d) < need {
                d -= 1;
            }
        }
        dups.insert(*id, d);
    }
    finish(&order, info, &dups)
}

/// Fill-drain latency estimate of one subgraph: every stage contributes one
/// row slot to the fill, then the slowest stage paces the remaining slots.
pub fn pipeline_latency(
    graph: &CompGraph,
    hw: &HwSpec,
    info: &BTreeMap<NodeId, CimInfo>,
    nodes: &[NodeId],
    dup: &DupAssignment,
) -> u64 {
    let mut fill = 0u64;
    let mut slots = 1u64;
    let mut pace = 0u64;
    for id in nodes {
        let (rows, row_time) = match info.get(id) {
            Some(ci) => {
                let d = dup.d(*id);
                (ci.band_rows().div_ceil(d) as u64, ci.row_work())
            }
            None => {
                let node = graph.node(*id);
                let (_, h, _) = node.output.chw();
                let h = h.max(1) as u64;
                (h, hw.chip.alu_ops_per_cycle.cycles_for(digital_ops(node)).div_ceil(h))
            }
        };
        fill += row_time;
        slots = slots.max(rows);
        pace = pace.max(row_time);
    }
    fill + pace * (slots - 1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgraph {
    pub nodes: Vec<NodeId>,
    pub dup: DupAssignment,
    /// Crossbar programming cycles paid before this subgraph runs (0 for the first).
    pub reprogram_cycles: u64,
    pub latency: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphPlan {
    pub strategy: CgStrategy,
    pub subgraphs: Vec<Subgraph>,
}

impl SubgraphPlan {
    pub fn total_latency(&self) -> u64 {
        self.subgraphs.iter().map(|s| s.latency + s.reprogram_cycles).sum()
    }

    pub fn subgraph_of(&self, id: NodeId) -> Option<usize> {
        self.subgraphs.iter().position(|s| s.nodes.contains(&id))
    }

    pub fn dup(&self, id: NodeId) -> u32 {
        self.subgraph_of(id).map_or(1, |s| self.subgraphs[s].dup.d(id))
    }
}

struct Segmenter<'a> {
    graph: &'a CompGraph,
    hw: &'a HwSpec,
    info: &'a BTreeMap<NodeId, CimInfo>,
    strategy: CgStrategy,
}

impl Segmenter<'_> {
    fn cores(&self, id: NodeId) -> u32 {
        self.info.get(&id).map_or(0, |i| i.cores_per_replica * self.graph.node(id).pins.dup.unwrap_or(1))
    }

    fn l0_bits(&self, id: NodeId) -> u64 {
        let o = &self.graph.node(id).output;
        o.numel() as u64 * o.precision_bits as u64
    }

    fn fits(&self, nodes: &[NodeId]) -> bool {
        let cores: u32 = nodes.iter().map(|&i| self.cores(i)).sum();
        let bits: u64 = nodes.iter().map(|&i| self.l0_bits(i)).sum();
        cores <= self.hw.chip.core_number && self.hw.chip.l0_size_bits.finite().is_none_or(|cap| bits <= cap)
    }

    fn schedule(&self, nodes: &[NodeId], first: bool) -> Result<Subgraph> {
        let mut dup = duplicate(self.graph, self.hw, self.info, nodes, self.strategy)?;
        if self.strategy == CgStrategy::PipelineAndDuplication {
            dup = balance_pipeline(self.graph, &dup, self.hw, self.info);
        }
        let reprogram_cycles = if first {
            0
        } else {
            nodes
                .iter()
                .filter_map(|id| self.info.get(id).map(|i| dup.d(*id) as u64 * i.rows_per_replica()))
                .sum::<u64>()
                * self.hw.xbar.write_cycles()
        };
        let latency = pipeline_latency(self.graph, self.hw, self.info, nodes, &dup);
        Ok(Subgraph { nodes: nodes.to_vec(), dup, reprogram_cycles, latency })
    }

    fn cost(&self, nodes: &[NodeId]) -> Result<u64> {
        if nodes.is_empty() {
            return Ok(0);
        }
        let s = self.schedule(nodes, true)?;
        Ok(s.latency)
    }

    fn run(&self, order: &[NodeId], pop: bool) -> Result<Vec<Vec<NodeId>>> {
        let mut parts = Vec::new();
        let mut i = 0;
        let mut carry: Vec<NodeId> = Vec::new();
        while i < order.len() || !carry.is_empty() {
            let mut cur = std::mem::take(&mut carry);
            while i < order.len() {
                let mut next = cur.clone();
                next.push(order[i]);
                if !self.fits(&next) {
                    break;
                }
                cur = next;
                i += 1;
            }
            if cur.is_empty() {
                return Err(Error::Capacity(format!("node {} does not fit the chip", order[i])));
            }
            if pop && i < order.len() {
                let mut k = 0;
                let mut best = self.cost(&cur)?;
                while k + 1 < cur.len() {
                    let (keep, popped) = cur.split_at(cur.len() - k - 1);
                    let total = self.cost(keep)? + self.cost(popped)?;
                    if total < best {
                        best = total;
                        k += 1;
                    } else {
                        break;
                    }
                }
                carry = cur.split_off(cur.len() - k);
            }
            parts.push(cur);
        }
        Ok(parts)
    }

    fn plan(&self, parts: Vec<Vec<NodeId>>) -> Result<SubgraphPlan> {
        let subgraphs = parts
            .iter()
            .enumerate()
            .map(|(k, nodes)| self.schedule(nodes, k == 0))
            .collect::<Result<_>>()?;
        Ok(SubgraphPlan { strategy: self.strategy, subgraphs })
    }
}

/// Partitions the graph into subgraphs that fit the chip and schedules each.
pub fn segment_graph(
    graph: &CompGraph,
    hw: &HwSpec,
    info: &BTreeMap<NodeId, CimInfo>,
    strategy: CgStrategy,
) -> Result<SubgraphPlan> {
    let seg = Segmenter { graph, hw, info, strategy };
    let order = topo_order(graph)?;
    for &id in &order {
        if !seg.fits(&[id]) {
            return Err(Error::Capacity(format!("node {id} alone exceeds the chip")));
        }
    }
    let greedy = seg.plan(seg.run(&order, false)?)?;
    if greedy.subgraphs.len() <= 1 {
        return Ok(greedy);
    }
    let popped = seg.plan(seg.run(&order, true)?)?;
    Ok(if popped.total_latency() < greedy.total_latency() { popped } else { greedy })
}
