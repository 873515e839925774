//! Vector-vector granularity: split each tile into row groups no taller than
//! `parallel_row` and give every group its own crossbar, so one window needs a
//! single activation cycle per crossbar plus a digital add.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::mvm::{Member, MvmPlan, Unit};
use super::CimInfo;
use crate::arch::HwSpec;
use crate::graph::NodeId;
use crate::lowering::{Tile, WeightMatrix};

/// Row groups one tile splits into.
pub fn row_split(wm: &WeightMatrix, hw: &HwSpec) -> u32 {
    wm.phys_rows.min(hw.xbar.xb_rows).div_ceil(hw.xbar.parallel_row)
}

/// Row groups of a tile, each at most `parallel_row` tall.
pub fn tile_groups(tile: &Tile, pr: u32) -> Vec<Tile> {
    (0..tile.rows.div_ceil(pr))
        .map(|j| Tile { row0: tile.row0 + j * pr, rows: (tile.rows - j * pr).min(pr), ..tile.clone() })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRemap {
    pub id: NodeId,
    pub g: u32,
    /// Crossbars one remapped instance needs.
    pub y: u32,
    /// Remapped instances.
    pub d_pp: u32,
    /// True when the instance lives on crossbars outside the node's replicas.
    pub borrowed: bool,
    /// Units: remapped instances first, then replicas left in tile mapping.
    pub units: Vec<Unit>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapPlan {
    pub nodes: BTreeMap<NodeId, NodeRemap>,
}

fn instance(info: &CimInfo, xbs: &[(u32, u32)], hw: &HwSpec) -> Unit {
    let pr = hw.xbar.parallel_row;
    let groups = info.tiles.iter().flat_map(|t| tile_groups(t, pr));
    Unit {
        node: info.id,
        members: groups
            .zip(xbs)
            .map(|(tile, &(core, xb))| Member { core, xb, rows: Some(tile.rows), tile })
            .collect(),
        cost: info.input_bits.div_ceil(hw.xbar.dac_bits) as u64,
    }
}

/// Builds the remap for every node of `mvm`. Nodes whose replicas cannot host
/// a full instance borrow crossbars no replica uses, in topological order.
pub fn remap(info: &BTreeMap<NodeId, CimInfo>, mvm: &MvmPlan, order: &[NodeId], hw: &HwSpec) -> RemapPlan {
    let pr = hw.xbar.parallel_row;
    let mut used: BTreeMap<usize, BTreeSet<(u32, u32)>> = BTreeMap::new();
    for n in mvm.nodes.values() {
        used.entry(n.subgraph).or_default().extend(n.replicas.iter().flat_map(|r| r.xbs.iter().copied()));
    }
    let mut out = RemapPlan::default();
    for id in order {
        let (Some(ci), Some(nm)) = (info.get(id), mvm.nodes.get(id)) else { continue };
        let g = row_split(&ci.wm, hw);
        let x = ci.plan.xbars_per_vxb;
        let y: u32 = ci.tiles.iter().map(|t| t.rows.div_ceil(pr)).sum();
        let naive = |reps: &[super::mvm::Replica]| super::mvm::replica_units(ci, reps);
        if y == x {
            // Every tile already fits one parallel-row activation.
            out.nodes.insert(
                *id,
                NodeRemap { id: *id, g, y, d_pp: nm.d_prime, borrowed: false, units: naive(&nm.replicas) },
            );
            continue;
        }
        let d_pp = nm.d_prime * x / y;
        let entry = if d_pp >= 1 {
            let pool: Vec<(u32, u32)> = nm.replicas.iter().flat_map(|r| r.xbs.iter().copied()).collect();
            let consumed = (d_pp * y).div_ceil(x) as usize;
            let mut units: Vec<Unit> =
                (0..d_pp as usize).map(|i| instance(ci, &pool[i * y as usize..(i + 1) * y as usize], hw)).collect();
            units.extend(naive(&nm.replicas[consumed..]));
            NodeRemap { id: *id, g, y, d_pp, borrowed: false, units }
        } else {
            let taken = used.entry(nm.subgraph).or_default();
            let spare: Vec<(u32, u32)> = (0..hw.chip.core_number)
                .flat_map(|c| (0..hw.core.xb_number).map(move |x| (c, x)))
                .filter(|cx| !taken.contains(cx))
                .collect();
            let own: Vec<(u32, u32)> = nm.replicas[0].xbs.clone();
            let need = (y - x) as usize;
            if spare.len() >= need {
                let xbs: Vec<(u32, u32)> = own.iter().copied().chain(spare[..need].iter().copied()).collect();
                taken.extend(spare[..need].iter().copied());
                let mut units = vec![instance(ci, &xbs, hw)];
                units.extend(naive(&nm.replicas[1..]));
                NodeRemap { id: *id, g, y, d_pp: 1, borrowed: true, units }
            } else {
                NodeRemap { id: *id, g, y, d_pp: 0, borrowed: false, units: naive(&nm.replicas) }
            }
        };
        out.nodes.insert(*id, entry);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::graph::parse_graph;
    use crate::lowering::DimBinding;
    use crate::sched::cg::segment_graph;
    use crate::sched::mvm::mvm_plan;
    use crate::sched::{analyze, CgStrategy};

    fn hw(cores: u32, xbs: u32, rows: u32, pr: u32) -> HwSpec {
        parse_arch(&format!(
            r#"{{"mode": "WLM", "chip": {{"core_number": {cores}}}, "core": {{"xb_number": {xbs}}},
                "xbar": {{"xb_rows": {rows}, "xb_cols": 128, "parallel_row": {pr}, "dac_bits": 8,
                         "adc_bits": 8, "cell_type": "ReRAM", "cell_precision_bits": 2}}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn split_factor() {
        let wm = |rows| WeightMatrix {
            logical_rows: rows,
            logical_cols: 4,
            weight_bits: 8,
            planes: 4,
            phys_rows: rows,
            phys_cols: 16,
            binding: Default::default(),
        };
        assert_eq!(row_split(&wm(32), &hw(1, 1, 32, 16)), 2);
        assert_eq!(row_split(&wm(27), &hw(1, 1, 32, 16)), 2);
        assert_eq!(row_split(&wm(27), &hw(1, 1, 32, 32)), 1);
        let t = Tile { index: 0, vt: 0, ht: 0, plane: 0, row0: 0, rows: 27, col0: 0, cols: 8 };
        let gs = tile_groups(&t, 16);
        assert_eq!((gs[0].row0, gs[0].rows, gs[1].row0, gs[1].rows), (0, 16, 16, 11));
    }

    fn plan_for(hw: &HwSpec, graph: &str) -> RemapPlan {
        let g = parse_graph(graph).unwrap();
        let info = analyze(&g, hw, DimBinding::default()).unwrap();
        let cg = segment_graph(&g, hw, &info, CgStrategy::PipelineAndDuplication).unwrap();
        let mvm = mvm_plan(&g, hw, &info, &cg).unwrap();
        remap(&info, &mvm, &crate::graph::topo_order(&g).unwrap(), hw)
    }

    const EXAMPLE: &str = r#"{"inputs": [{"name": "x", "dims": [3, 32, 32]}],
        "nodes": [{"id": 1, "kind": "Conv", "inputs": ["x"],
                   "attrs": {"kernel": {"dims": [32, 3, 3, 3]}, "stride": 1, "padding": 1}}],
        "outputs": [1]}"#;

    #[test]
    fn example_halves_instances() {
        let r = plan_for(&hw(2, 2, 32, 16), EXAMPLE);
        let n = &r.nodes[&1];
        assert_eq!((n.g, n.y, n.d_pp, n.units.len()), (2, 2, 2, 2));
        let m = &n.units[0].members;
        assert_eq!((m[1].core, m[1].xb, m[1].tile.row0, m[1].rows), (0, 1, 16, Some(11)));
        assert_eq!((n.units[1].members[0].core, n.units[1].members[0].xb), (1, 0));
    }

    #[test]
    fn identity_when_groups_fit() {
        let r = plan_for(&hw(2, 2, 32, 32), EXAMPLE);
        let n = &r.nodes[&1];
        assert_eq!((n.g, n.d_pp, n.units.len()), (1, 4, 4));
        assert!(n.units.iter().all(|u| u.members[0].rows.is_none()));
    }

    #[test]
    fn single_replica_borrows_a_spare_crossbar() {
        let g = EXAMPLE.replace(r#""padding": 1}"#, r#""padding": 1}, "pin": {"dup": 1, "mvm_dup": 1}"#);
        let r = plan_for(&hw(2, 2, 32, 16), &g);
        let n = &r.nodes[&1];
        assert!(n.borrowed);
        assert_eq!(n.d_pp, 1);
        let xbs: Vec<(u32, u32)> = n.units[0].members.iter().map(|m| (m.core, m.xb)).collect();
        assert_eq!(xbs, vec![(0, 0), (0, 1)]);
    }
}
