//! Matrix-vector granularity: refine duplication to whole virtual crossbars,
//! place replicas on crossbars, and list-schedule per-window tasks so each
//! crossbar fires as soon as its own input slice is present.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::cg::SubgraphPlan;
use super::CimInfo;
use crate::arch::HwSpec;
use crate::codegen::{band, Flow, MetaOp, Stmt};
use crate::error::{Error, Result};
use crate::graph::{CompGraph, NodeId};
use crate::lowering::Tile;
use crate::sim::perf::{Engine, OpPlan};

/// floor(cores_per_replica * D * core_vxb / num_vxb), never below D.
pub fn mvm_duplicate(d: u32, cores_per_replica: u32, core_vxb: u32, num_vxb: u32) -> u32 {
    ((cores_per_replica as u64 * d as u64 * core_vxb as u64 / num_vxb.max(1) as u64) as u32).max(d)
}

/// Crossbars of one replica, one per tile.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replica {
    pub xbs: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMvm {
    pub id: NodeId,
    pub subgraph: usize,
    pub d: u32,
    pub d_prime: u32,
    pub replicas: Vec<Replica>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MvmPlan {
    pub nodes: BTreeMap<NodeId, NodeMvm>,
}

/// Places `count` replicas on `cores`.
pub fn place(info: &CimInfo, cores: &[u32], count: u32, hw: &HwSpec) -> Vec<Replica> {
    let x = info.plan.xbars_per_vxb;
    let per_core = info.plan.core_vxb;
    (0..count)
        .map(|r| {
            let xbs = (0..x)
                .map(|t| {
                    if per_core >= 1 {
                        (cores[(r / per_core) as usize], (r % per_core) * x + t)
                    } else {
                        let cpr = info.cores_per_replica;
                        let n = hw.core.xb_number;
                        (cores[(r * cpr + t / n) as usize], t % n)
                    }
                })
                .collect();
            Replica { xbs }
        })
        .collect()
}

/// Replicas that fit on `cores` cores.
pub fn replica_capacity(info: &CimInfo, cores: u32) -> u32 {
    if info.plan.core_vxb >= 1 {
        cores * info.plan.core_vxb
    } else {
        cores / info.cores_per_replica.max(1)
    }
}

pub fn mvm_plan(graph: &CompGraph, hw: &HwSpec, info: &BTreeMap<NodeId, CimInfo>, cg: &SubgraphPlan) -> Result<MvmPlan> {
    let mut out = MvmPlan::default();
    for (k, sg) in cg.subgraphs.iter().enumerate() {
        for (id, e) in &sg.dup.entries {
            let Some(ci) = info.get(id) else { continue };
            let cap = replica_capacity(ci, e.cores.len() as u32);
            let d_prime = match graph.node(*id).pins.mvm_dup {
                Some(p) => {
                    if p == 0 || p > cap {
                        return Err(Error::Capacity(format!(
                            "node {id}: pinned crossbar duplication {p} outside 1..={cap}"
                        )));
                    }
                    // Never fewer replicas than the graph-level duplication.
                    p.max(e.d).min(cap)
                }
                None => {
                    let v = mvm_duplicate(e.d, ci.cores_per_replica, ci.plan.core_vxb, ci.plan.num_vxb);
                    v.min(ci.windows.max(1) as u32).max(e.d).min(cap)
                }
            };
            out.nodes.insert(
                *id,
                NodeMvm {
                    id: *id,
                    subgraph: k,
                    d: e.d,
                    d_prime,
                    replicas: place(ci, &e.cores, d_prime, hw),
                },
            );
        }
    }
    Ok(out)
}

/// One crossbar read of an execution unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub core: u32,
    pub xb: u32,
    /// Weights held: a whole tile, or one row group of it.
    pub tile: Tile,
    /// Rows activated by `read_rows`; `None` reads the whole tile with `read_xb`.
    pub rows: Option<u32>,
}

/// A set of crossbars that together compute one window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    pub node: NodeId,
    pub members: Vec<Member>,
    /// Read cycles per window, used to balance window assignment.
    pub cost: u64,
}

impl Unit {
    pub fn home(&self) -> u32 {
        self.members[0].core
    }
}

/// Crossbar-mode units: one per replica, reading whole tiles.
pub fn replica_units(info: &CimInfo, reps: &[Replica]) -> Vec<Unit> {
    reps.iter()
        .map(|r| Unit {
            node: info.id,
            members: info
                .tiles
                .iter()
                .zip(&r.xbs)
                .map(|(t, &(core, xb))| Member { core, xb, tile: t.clone(), rows: None })
                .collect(),
            cost: info.cpm,
        })
        .collect()
}

/// Splits the windows among units. Units are grouped into at most `d` row
/// bands; inside a band each window goes to the unit that would finish it first.
pub fn assign_windows(info: &CimInfo, d: u32, units: &[Unit]) -> Vec<Vec<u32>> {
    let n = units.len() as u32;
    let mut out = vec![Vec::new(); units.len()];
    if n == 0 {
        return out;
    }
    let bands = d.clamp(1, n);
    let (ho, wo) = info.geom.out_hw();
    for b in 0..bands {
        let members: Vec<usize> = (0..n).filter(|u| u * bands / n == b).map(|u| u as usize).collect();
        let (lo, hi) = band(ho, bands, b);
        let mut finish: Vec<u64> = vec![0; members.len()];
        for w in lo * wo..hi * wo {
            let best = (0..members.len())
                .min_by_key(|&i| (finish[i] + units[members[i]].cost, i))
                .expect("band has units");
            finish[best] += units[members[best]].cost;
            out[members[best]].push(w);
        }
    }
    out
}

/// One crossbar activation in a schedule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activation {
    pub node: NodeId,
    pub unit: u32,
    pub window: u32,
    pub core: u32,
    pub xb: u32,
    pub start: u64,
    pub end: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VxbSchedule {
    pub activations: Vec<Activation>,
}

impl VxbSchedule {
    pub fn makespan(&self) -> u64 {
        self.activations.iter().map(|a| a.end).max().unwrap_or(0)
    }

    pub fn first_start(&self, node: NodeId) -> Option<u64> {
        self.activations.iter().filter(|a| a.node == node).map(|a| a.start).min()
    }
}

/// Maximum number of crossbars active in the same cycle.
pub fn peak_active(s: &VxbSchedule) -> u32 {
    let mut ev: Vec<(u64, i32)> = Vec::with_capacity(s.activations.len() * 2);
    for a in &s.activations {
        if a.end > a.start {
            ev.push((a.start, 1));
            ev.push((a.end, -1));
        }
    }
    ev.sort_unstable();
    let (mut cur, mut peak) = (0i32, 0i32);
    for (_, d) in ev {
        cur += d;
        peak = peak.max(cur);
    }
    peak as u32
}

/// A step of a task: one op, or a group of reads issued together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Op(MetaOp),
    Reads(Vec<MetaOp>),
}

/// Work for one window of one unit (or one whole-tensor digital op).
#[derive(Clone, Debug, Default)]
pub struct Task {
    pub lane: usize,
    pub node: NodeId,
    pub unit: u32,
    pub window: u32,
    pub steps: Vec<Step>,
    /// Tasks whose results this one reads.
    pub deps: Vec<usize>,
}

/// Window slots per unit: a lane keeps at most this many tasks in flight.
pub const RING: usize = 4;

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    start: u64,
    is_read: bool,
    seq: u64,
    task: usize,
}

/// List-schedules `tasks` on `eng`, returning statements in commit order and
/// the crossbar activations.
pub fn list_schedule(eng: &mut Engine, flow: &Flow, tasks: &[Task]) -> Result<(Vec<Stmt>, VxbSchedule)> {
    let n = tasks.len();
    let mut lanes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in tasks.iter().enumerate() {
        lanes.entry(t.lane).or_default().push(i);
    }
    let mut lane_pos = vec![0usize; n];
    let mut lane_of: Vec<&[usize]> = vec![&[]; n];
    for l in lanes.values() {
        for (p, &i) in l.iter().enumerate() {
            lane_pos[i] = p;
            lane_of[i] = l;
        }
    }
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut waiting: Vec<usize> = vec![0; n];
    for (i, t) in tasks.iter().enumerate() {
        let mut deps = t.deps.clone();
        deps.sort_unstable();
        deps.dedup();
        for d in deps {
            dependents[d].push(i);
            waiting[i] += 1;
        }
        if lane_pos[i] >= RING {
            dependents[lane_of[i][lane_pos[i] - RING]].push(i);
            waiting[i] += 1;
        }
        if lane_pos[i] >= 1 {
            // Entry in lane order: the predecessor must have entered.
            waiting[i] += 1;
        }
    }
    let mut step_at = vec![0usize; n];
    let mut entered = vec![false; n];
    let mut done = 0usize;
    let mut heap: BinaryHeap<Reverse<Key>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut stmts = Vec::new();
    let mut sched = VxbSchedule::default();

    let plan_step = |eng: &Engine, step: &Step| -> Result<(u64, Vec<OpPlan>)> {
        match step {
            Step::Op(op) => {
                let p = eng.plan(op, flow, 0)?;
                Ok((p.start, vec![p]))
            }
            Step::Reads(ops) => {
                let mut floor = 0;
                for op in ops {
                    floor = floor.max(eng.plan(op, flow, 0)?.start);
                }
                let ps = ops.iter().map(|op| eng.plan(op, flow, floor)).collect::<Result<Vec<_>>>()?;
                Ok((floor, ps))
            }
        }
    };

    // Tasks become runnable when `waiting` hits zero.
    let mut runnable: Vec<usize> = (0..n).filter(|&i| waiting[i] == 0).collect();
    loop {
        while let Some(i) = runnable.pop() {
            entered[i] = true;
            let lane = lane_of[i];
            if lane_pos[i] + 1 < lane.len() {
                let next = lane[lane_pos[i] + 1];
                waiting[next] -= 1;
                if waiting[next] == 0 {
                    runnable.push(next);
                }
            }
            if tasks[i].steps.is_empty() {
                done += 1;
                for &d in &dependents[i] {
                    waiting[d] -= 1;
                    if waiting[d] == 0 {
                        runnable.push(d);
                    }
                }
                continue;
            }
            let step = &tasks[i].steps[0];
            let (start, _) = plan_step(eng, step)?;
            seq += 1;
            heap.push(Reverse(Key { start, is_read: matches!(step, Step::Reads(_)), seq, task: i }));
        }
        let Some(Reverse(top)) = heap.pop() else { break };
        let i = top.task;
        let step = &tasks[i].steps[step_at[i]];
        let (start, plans) = plan_step(eng, step)?;
        if start != top.start {
            seq += 1;
            heap.push(Reverse(Key { start, is_read: top.is_read, seq, task: i }));
            continue;
        }
        let mut advanced = vec![i];
        match step {
            Step::Op(op) => {
                eng.apply(op, flow, &plans[0])?;
                stmts.push(Stmt::Op(op.clone()));
            }
            Step::Reads(_) => {
                // Merge every read group that can start at the same cycle.
                let mut group = vec![(i, plans)];
                let mut others = Vec::new();
                while let Some(Reverse(k)) = heap.peek() {
                    if k.start != start || !k.is_read {
                        break;
                    }
                    others.push(heap.pop().unwrap().0.task);
                }
                let mut block = Vec::new();
                for (j, ps) in group.drain(..) {
                    let Step::Reads(ops) = &tasks[j].steps[step_at[j]] else { unreachable!() };
                    commit_reads(eng, flow, &tasks[j], ops, &ps, &mut block, &mut sched)?;
                }
                for j in others {
                    let s = &tasks[j].steps[step_at[j]];
                    let (st, ps) = plan_step(eng, s)?;
                    if st != start {
                        seq += 1;
                        heap.push(Reverse(Key { start: st, is_read: true, seq, task: j }));
                        continue;
                    }
                    let Step::Reads(ops) = s else { unreachable!() };
                    commit_reads(eng, flow, &tasks[j], ops, &ps, &mut block, &mut sched)?;
                    advanced.push(j);
                }
                stmts.push(if block.len() == 1 { Stmt::Op(block.pop().unwrap()) } else { Stmt::Parallel(block) });
            }
        }
        for j in advanced {
            step_at[j] += 1;
            if step_at[j] == tasks[j].steps.len() {
                done += 1;
                for &d in &dependents[j] {
                    waiting[d] -= 1;
                    if waiting[d] == 0 {
                        runnable.push(d);
                    }
                }
            } else {
                let s = &tasks[j].steps[step_at[j]];
                let (st, _) = plan_step(eng, s)?;
                seq += 1;
                heap.push(Reverse(Key { start: st, is_read: matches!(s, Step::Reads(_)), seq, task: j }));
            }
        }
    }
    if done != n {
        return Err(Error::Emit(format!("{} of {n} tasks could not be scheduled", n - done)));
    }
    debug_assert!(entered.iter().all(|&e| e));
    Ok((stmts, sched))
}

fn commit_reads(
    eng: &mut Engine,
    flow: &Flow,
    task: &Task,
    ops: &[MetaOp],
    plans: &[OpPlan],
    block: &mut Vec<MetaOp>,
    sched: &mut VxbSchedule,
) -> Result<()> {
    for (op, p) in ops.iter().zip(plans) {
        eng.apply(op, flow, p)?;
        let (core, xb) = op.crossbar().expect("crossbar read");
        sched.activations.push(Activation {
            node: task.node,
            unit: task.unit,
            window: task.window,
            core,
            xb,
            start: p.start,
            end: p.end,
        });
        block.push(op.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::graph::parse_graph;
    use crate::lowering::DimBinding;
    use crate::sched::{analyze, cg::segment_graph, CgStrategy};

    #[test]
    fn refinement_formula() {
        assert_eq!(mvm_duplicate(2, 1, 2, 1), 4);
        assert_eq!(mvm_duplicate(3, 2, 4, 5), 4);
        // A replica that fills its cores keeps D.
        assert_eq!(mvm_duplicate(3, 2, 1, 2), 3);
        assert_eq!(mvm_duplicate(2, 1, 0, 1), 2);
    }

    fn example() -> (CompGraph, HwSpec) {
        let hw = parse_arch(
            r#"{"mode": "XBM", "chip": {"core_number": 2}, "core": {"xb_number": 2},
                "xbar": {"xb_rows": 32, "xb_cols": 128, "parallel_row": 16, "dac_bits": 8,
                         "adc_bits": 8, "cell_type": "ReRAM", "cell_precision_bits": 2}}"#,
        )
        .unwrap();
        let g = parse_graph(
            r#"{"inputs": [{"name": "x", "dims": [3, 32, 32]}],
                "nodes": [{"id": 1, "kind": "Conv", "inputs": ["x"],
                           "attrs": {"kernel": {"dims": [32, 3, 3, 3]}, "stride": 1, "padding": 1}},
                          {"id": 2, "kind": "Relu", "inputs": [1]}],
                "outputs": [2]}"#,
        )
        .unwrap();
        (g, hw)
    }

    #[test]
    fn example_places_four_replicas() {
        let (g, hw) = example();
        let info = analyze(&g, &hw, DimBinding::default()).unwrap();
        let cg = segment_graph(&g, &hw, &info, CgStrategy::PipelineAndDuplication).unwrap();
        let plan = mvm_plan(&g, &hw, &info, &cg).unwrap();
        let n = &plan.nodes[&1];
        assert_eq!((n.d, n.d_prime), (2, 4));
        let xbs: Vec<(u32, u32)> = n.replicas.iter().map(|r| r.xbs[0]).collect();
        assert_eq!(xbs, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let units = replica_units(&info[&1], &n.replicas);
        let w = assign_windows(&info[&1], n.d, &units);
        assert!(w.iter().all(|v| v.len() == 256));
        // Units 0 and 1 share the top band.
        assert!(w[0].iter().chain(&w[1]).all(|&x| x < 512));
        assert_eq!(w[0][..3], [0, 2, 4]);
    }

    #[test]
    fn multi_core_replica_placement() {
        let (g, mut hw) = example();
        hw.core.xb_number = 1;
        hw.chip.core_number = 8;
        hw.xbar.xb_cols = 64;
        let info = analyze(&g, &hw, DimBinding::default()).unwrap();
        let ci = &info[&1];
        assert_eq!((ci.plan.xbars_per_vxb, ci.plan.core_vxb, ci.cores_per_replica), (2, 0, 2));
        let reps = place(ci, &[4, 5, 6, 7], 2, &hw);
        assert_eq!(reps[0].xbs, vec![(4, 0), (5, 0)]);
        assert_eq!(reps[1].xbs, vec![(6, 0), (7, 0)]);
        assert_eq!(replica_capacity(ci, 4), 2);
    }

    #[test]
    fn peak_counts_overlaps() {
        assert_eq!(peak_active(&VxbSchedule::default()), 0);
        let a = |start, end| Activation { node: 1, unit: 0, window: 0, core: 0, xb: 0, start, end };
        let s = VxbSchedule { activations: vec![a(0, 2), a(1, 3), a(2, 4), a(5, 6)] };
        assert_eq!(peak_active(&s), 2);
        let s = VxbSchedule { activations: (0..6).map(|_| a(0, 1)).collect() };
        assert_eq!(peak_active(&s), 6);
    }

    #[test]
    fn faster_units_take_more_windows() {
        let (g, hw) = example();
        let info = analyze(&g, &hw, DimBinding::default()).unwrap();
        let ci = &info[&1];
        let mk = |cost| Unit { node: 1, members: Vec::new(), cost };
        let w = assign_windows(ci, 1, &[mk(1), mk(2)]);
        assert_eq!(w[0].len() + w[1].len(), 1024);
        assert!(w[0].len() > w[1].len());
    }
}
