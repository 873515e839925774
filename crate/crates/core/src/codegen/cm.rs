//! Core-mode emitter: one parallel block of `read_core` per CIM operator
//! (one member per replica, each computing a band of output rows) and a
//! whole-tensor DCOM per digital operator.

use std::collections::BTreeMap;

use super::check::band_input_rows;
use super::{digital_op, CoreParam, Flow, L0Layout, MetaOp, Stmt};
use crate::arch::HwSpec;
use crate::error::{Error, Result};
use crate::graph::{topo_order, CompGraph, NodeId};
use crate::lowering::CimGeom;
use crate::sched::cg::SubgraphPlan;
use crate::sched::CimInfo;

pub fn emit_cm(
    graph: &CompGraph,
    hw: &HwSpec,
    info: &BTreeMap<NodeId, CimInfo>,
    plan: &SubgraphPlan,
    stream: bool,
) -> Result<Flow> {
    let order = topo_order(graph)?;
    let layout = L0Layout::new(graph, &order);
    let mut flow = Flow { arch: Some(hw.digest()), stream, ..Default::default() };
    layout.declare(graph, &mut flow);
    for id in &order {
        if plan.subgraph_of(*id).is_none() {
            return Err(Error::Emit(format!("node {id} has no schedule")));
        }
    }
    for (k, sg) in plan.subgraphs.iter().enumerate() {
        if k > 0 {
            flow.stmts.push(Stmt::Op(MetaOp::Reprogram { index: k as u32, cycles: sg.reprogram_cycles }));
        }
        for id in &sg.nodes {
            let node = graph.node(*id);
            let Some(ci) = info.get(id) else {
                flow.stmts.push(Stmt::Op(digital_op(graph, node, &layout)?));
                continue;
            };
            let e = sg.dup.entries.get(id).ok_or_else(|| Error::Emit(format!("node {id} has no duplication")))?;
            let name = format!("p{}", flow.params.len());
            let param = CoreParam {
                node: *id,
                geom: ci.geom,
                wm: ci.wm.clone(),
                shift: node.shift(),
                in_bits: ci.input_bits,
                cores: e.cores.iter().step_by(ci.cores_per_replica.max(1) as usize).copied().collect(),
                xbars: ci.plan.xbars_per_vxb,
                cpm: ci.cpm,
            };
            let src = layout.of(&node.inputs[0]);
            let des = layout.nodes[id];
            let ops: Vec<MetaOp> = (0..param.d())
                .map(|r| {
                    let (lo, _) = param.band(r);
                    let (s, d) = match ci.geom {
                        CimGeom::Conv { c, w, k, wo, .. } => {
                            let (a, _) = band_input_rows(&ci.geom, lo, lo + 1);
                            ((a * w * c) as u64, (lo * wo * k) as u64)
                        }
                        CimGeom::Fc { .. } => (0, 0),
                    };
                    MetaOp::ReadCore {
                        op: node.kind.name().to_string(),
                        param: name.clone(),
                        core: param.cores[r as usize],
                        src: src + s,
                        des: des + d,
                    }
                })
                .collect();
            flow.params.insert(name, param);
            flow.stmts.push(if ops.len() == 1 { Stmt::Op(ops.into_iter().next().unwrap()) } else { Stmt::Parallel(ops) });
        }
    }
    Ok(flow)
}
