//! Crossbar- and wordline-mode emitters.
//!
//! Weights are written once per subgraph as a preamble. Each window of each
//! execution unit becomes a task: gather the input slice into the local
//! buffers of the cores that read it, fire the crossbars, combine partial
//! sums on the unit's home core, shift-accumulate the bit planes, store the
//! result to the chip buffer and apply a following Relu in place. Staged
//! tasks fire each vertical tile as soon as its own slice has arrived;
//! traditional tasks gather the whole window first. Tasks are ordered by the
//! list scheduler.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::check::{footprint, record_write, XbMap};
use super::{digital_op, Bump, DcomFunc, Flow, L0Layout, Level, MetaOp, ShiftAcc, Stmt, TileSym};
use crate::arch::HwSpec;
use crate::error::{Error, Result};
use crate::graph::{topo_order, CompGraph, EdgeRef, NodeId, OpKind};
use crate::lowering::BitBinding;
use crate::sched::cg::SubgraphPlan;
use crate::sched::mvm::{assign_windows, list_schedule, replica_units, MvmPlan, Step, Task, Unit, VxbSchedule, RING};
use crate::sched::vvm::RemapPlan;
use crate::sched::CimInfo;
use crate::sim::perf::{Engine, RangeMap};

pub fn emit_xbm(
    graph: &CompGraph,
    hw: &HwSpec,
    info: &BTreeMap<NodeId, CimInfo>,
    plan: &SubgraphPlan,
    mvm: &MvmPlan,
    staged: bool,
) -> Result<(Flow, VxbSchedule)> {
    let units = mvm.nodes.iter().map(|(id, n)| (*id, replica_units(&info[id], &n.replicas))).collect();
    emit_units(graph, hw, info, plan, &units, staged)
}

pub fn emit_wlm(
    graph: &CompGraph,
    hw: &HwSpec,
    info: &BTreeMap<NodeId, CimInfo>,
    plan: &SubgraphPlan,
    remap: &RemapPlan,
    staged: bool,
) -> Result<(Flow, VxbSchedule)> {
    let units = remap.nodes.iter().map(|(id, n)| (*id, n.units.clone())).collect();
    emit_units(graph, hw, info, plan, &units, staged)
}

fn tile_name(node: NodeId, m: &crate::sched::mvm::Member) -> String {
    match m.rows {
        None => format!("n{node}t{}", m.tile.index),
        Some(_) => format!("n{node}t{}r{}", m.tile.index, m.tile.row0),
    }
}

/// Where a member's read lands: its core's partial vector at an offset,
/// or a temporary that is added into it afterwards.
enum Dest {
    Part(u64),
    Temp(usize),
}

/// How partial sums of one unit reach the home core. Each core first sums
/// its own tiles; remote cores then send contiguous runs of blocks.
struct Combine {
    dest: Vec<Dest>,
    /// (core, len) of each temporary.
    temps: Vec<(u32, u64)>,
    /// (core, temp, offset, len)
    local_adds: Vec<(u32, usize, u64, u64)>,
    /// (core, offset, len, accumulate into what home already holds)
    transfers: Vec<(u32, u64, u64, bool)>,
}

fn combine_plan(ci: &CimInfo, unit: &Unit) -> Combine {
    let home = unit.home();
    let mut covered: BTreeMap<u32, BTreeMap<u64, u64>> = BTreeMap::new();
    let mut c = Combine { dest: Vec::new(), temps: Vec::new(), local_adds: Vec::new(), transfers: Vec::new() };
    for m in &unit.members {
        let off = m.tile.psum_offset(&ci.wm) as u64;
        let len = m.tile.cols as u64;
        let blocks = covered.entry(m.core).or_default();
        if blocks.contains_key(&off) {
            let t = c.temps.len();
            c.temps.push((m.core, len));
            c.local_adds.push((m.core, t, off, len));
            c.dest.push(Dest::Temp(t));
        } else {
            blocks.insert(off, len);
            c.dest.push(Dest::Part(off));
        }
    }
    let mut written: BTreeSet<u64> = covered.get(&home).map(|b| b.keys().copied().collect()).unwrap_or_default();
    for (&core, blocks) in covered.iter().filter(|(&k, _)| k != home) {
        let mut run: Option<(u64, u64, bool)> = None;
        for (&off, &len) in blocks {
            let add = written.contains(&off);
            match run {
                Some((lo, l, a)) if lo + l == off && a == add => run = Some((lo, l + len, a)),
                _ => {
                    if let Some((lo, l, a)) = run {
                        c.transfers.push((core, lo, l, a));
                    }
                    run = Some((off, len, add));
                }
            }
        }
        if let Some((lo, l, a)) = run {
            c.transfers.push((core, lo, l, a));
        }
        written.extend(blocks.keys());
    }
    c
}

/// Per-slot local buffers of one unit.
struct Slot {
    /// Window vector per reading core, indexed by matrix row.
    x: BTreeMap<u32, u64>,
    /// Partial-sum vector per core; the home core's is `p`.
    part: BTreeMap<u32, u64>,
    temps: Vec<u64>,
    /// Receive buffer on the home core per remote core that accumulates.
    recv: BTreeMap<u32, u64>,
    p: u64,
    y: u64,
}

struct Builder<'a> {
    graph: &'a CompGraph,
    hw: &'a HwSpec,
    layout: &'a L0Layout,
    zero: u64,
    flow: &'a Flow,
    xbs: XbMap,
    owners: HashMap<Level, RangeMap>,
    tasks: Vec<Task>,
    l1: HashMap<u32, Bump>,
}

impl Builder<'_> {
    fn alloc(&mut self, core: u32, len: u64) -> u64 {
        self.l1.entry(core).or_default().alloc(len)
    }

    /// Appends a task, deriving its dependencies from the last writer of
    /// everything it reads.
    fn push(&mut self, mut task: Task) -> Result<()> {
        let id = self.tasks.len();
        let mut deps = Vec::new();
        for step in &task.steps {
            let ops: &[MetaOp] = match step {
                Step::Op(op) => std::slice::from_ref(op),
                Step::Reads(ops) => ops,
            };
            for op in ops {
                let fp = footprint(op, self.flow, &self.xbs)?;
                for r in &fp.reads {
                    if let Some(m) = self.owners.get(&r.level) {
                        for (_, _, v) in m.steps(r.lo, r.hi) {
                            if v > 0 && v as usize - 1 != id {
                                deps.push(v as usize - 1);
                            }
                        }
                    }
                }
                for w in &fp.writes {
                    self.owners.entry(w.level).or_default().assign(w.lo, w.hi, id as u64 + 1);
                }
            }
        }
        deps.sort_unstable();
        deps.dedup();
        task.deps = deps;
        self.tasks.push(task);
        Ok(())
    }

    fn slots(&mut self, ci: &CimInfo, unit: &Unit, plan: &Combine) -> Vec<Slot> {
        let home = unit.home();
        let rows = ci.geom.rows() as u64;
        let psum = ci.wm.psum_len() as u64;
        (0..RING)
            .map(|_| {
                let mut x = BTreeMap::new();
                x.insert(home, self.alloc(home, rows));
                for m in &unit.members {
                    if !x.contains_key(&m.core) {
                        let a = self.alloc(m.core, rows);
                        x.insert(m.core, a);
                    }
                }
                let p = self.alloc(home, psum);
                let mut part = BTreeMap::from([(home, p)]);
                for m in &unit.members {
                    if !part.contains_key(&m.core) {
                        let a = self.alloc(m.core, psum);
                        part.insert(m.core, a);
                    }
                }
                let temps = plan.temps.iter().map(|&(core, len)| self.alloc(core, len)).collect();
                let mut recv = BTreeMap::new();
                for &(core, _, _, add) in &plan.transfers {
                    if add && !recv.contains_key(&core) {
                        let a = self.alloc(home, psum);
                        recv.insert(core, a);
                    }
                }
                let y = self.alloc(home, ci.geom.cols() as u64);
                Slot { x, part, temps, recv, p, y }
            })
            .collect()
    }

    fn gather(&self, ci: &CimInfo, src: u64, win: u32, core: u32, x: u64, lo: u32, hi: u32, out: &mut Vec<Step>) {
        for run in ci.geom.gather(win, lo, hi) {
            let (level_src, at) = match run.src {
                Some(s) => (Level::L0, src + s as u64),
                None => (Level::L0, self.zero),
            };
            out.push(Step::Op(MetaOp::Mov {
                src_level: level_src,
                src: at,
                des_level: Level::L1(core),
                des: x + run.dst as u64,
                len: run.len as u64,
            }));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn window_steps(
        &self,
        ci: &CimInfo,
        unit: &Unit,
        slot: &Slot,
        plan: &Combine,
        win: u32,
        src: u64,
        out: u64,
        relus: &[u64],
        staged: bool,
        shift: u32,
    ) -> Vec<Step> {
        let home = unit.home();
        let xr = self.hw.xbar.xb_rows;
        let rows = ci.geom.rows();
        let mut vts: Vec<u32> = unit.members.iter().map(|m| m.tile.vt).collect();
        vts.dedup();
        let mut steps = Vec::new();
        let read_of = |i: usize| {
            let m = &unit.members[i];
            let des = match plan.dest[i] {
                Dest::Part(off) => slot.part[&m.core] + off,
                Dest::Temp(t) => slot.temps[t],
            };
            let xsrc = slot.x[&m.core] + m.tile.row0 as u64;
            match m.rows {
                None => MetaOp::ReadXb { core: m.core, xb: m.xb, src: xsrc, des },
                Some(n) => MetaOp::ReadRows { core: m.core, xb: m.xb, lo: 0, hi: n - 1, src: xsrc, des },
            }
        };
        let gathers = |vt: u32, steps: &mut Vec<Step>| {
            let (lo, hi) = (vt * xr, ((vt + 1) * xr).min(rows));
            self.gather(ci, src, win, home, slot.x[&home], lo, hi, steps);
            let mut done: Vec<(u32, u32, u32)> = Vec::new();
            for m in unit.members.iter().filter(|m| m.tile.vt == vt && m.core != home) {
                let span = (m.core, m.tile.row0, m.tile.row0 + m.tile.rows);
                if done.iter().any(|d| d.0 == span.0 && d.1 <= span.1 && span.2 <= d.2) {
                    continue;
                }
                done.push(span);
                self.gather(ci, src, win, m.core, slot.x[&m.core], span.1, span.2, steps);
            }
        };
        if staged {
            for &vt in &vts {
                gathers(vt, &mut steps);
                let group: Vec<MetaOp> =
                    (0..unit.members.len()).filter(|&i| unit.members[i].tile.vt == vt).map(read_of).collect();
                steps.push(Step::Reads(group));
            }
        } else {
            for &vt in &vts {
                gathers(vt, &mut steps);
            }
            steps.push(Step::Reads((0..unit.members.len()).map(read_of).collect()));
        }
        let add = |level: Level, srcs: Vec<u64>, des: u64, len: u64| {
            Step::Op(MetaOp::Dcom { func: DcomFunc::Add, imm: vec![32], level, srcs, des, len })
        };
        for &(core, t, off, len) in &plan.local_adds {
            let at = slot.part[&core] + off;
            steps.push(add(Level::L1(core), vec![at, slot.temps[t]], at, len));
        }
        for &(core, off, len, acc) in &plan.transfers {
            let des = if acc { slot.recv[&core] + off } else { slot.p + off };
            steps.push(Step::Op(MetaOp::Mov {
                src_level: Level::L1(core),
                src: slot.part[&core] + off,
                des_level: Level::L1(home),
                des,
                len,
            }));
            if acc {
                steps.push(add(Level::L1(home), vec![slot.p + off, des], slot.p + off, len));
            }
        }
        let k = ci.geom.cols() as u64;
        let sa = ShiftAcc {
            planes: ci.wm.planes,
            cell_bits: self.hw.xbar.cell_precision_bits,
            weight_bits: ci.wm.weight_bits,
            shift,
            xlen: rows,
            layout: match ci.wm.binding {
                BitBinding::Xbc => 0,
                BitBinding::Xb => 1,
            },
        };
        steps.push(Step::Op(MetaOp::Dcom {
            func: DcomFunc::ShiftAcc,
            imm: sa.imm(),
            level: Level::L1(home),
            srcs: vec![slot.p, slot.x[&home]],
            des: slot.y,
            len: k,
        }));
        let at = out + win as u64 * k;
        steps.push(Step::Op(MetaOp::Mov { src_level: Level::L1(home), src: slot.y, des_level: Level::L0, des: at, len: k }));
        for &r in relus {
            steps.push(Step::Op(MetaOp::Dcom {
                func: DcomFunc::Relu,
                imm: Vec::new(),
                level: Level::L0,
                srcs: vec![at],
                des: r + win as u64 * k,
                len: k,
            }));
        }
        steps
    }
}

/// Emits a flow where each CIM node runs on the given execution units.
pub fn emit_units(
    graph: &CompGraph,
    hw: &HwSpec,
    info: &BTreeMap<NodeId, CimInfo>,
    plan: &SubgraphPlan,
    units: &BTreeMap<NodeId, Vec<Unit>>,
    staged: bool,
) -> Result<(Flow, VxbSchedule)> {
    let order = topo_order(graph)?;
    let mut layout = L0Layout::new(graph, &order);
    let zero_len = info.values().map(|c| c.geom.max_pad_run()).max().unwrap_or(0) as u64;
    let zero = layout.bump.alloc(zero_len);
    let mut flow = Flow { arch: Some(hw.digest()), stream: true, ..Default::default() };
    layout.declare(graph, &mut flow);
    for (id, us) in units {
        for u in us {
            for m in &u.members {
                let name = tile_name(*id, m);
                flow.tiles.entry(name).or_insert_with(|| TileSym {
                    node: *id,
                    geom: info[id].geom,
                    wm: info[id].wm.clone(),
                    tile: m.tile.clone(),
                    in_bits: info[id].input_bits,
                });
            }
        }
    }
    for id in &order {
        if plan.subgraph_of(*id).is_none() || (graph.node(*id).kind.is_cim() && !units.contains_key(id)) {
            return Err(Error::Emit(format!("node {id} has no schedule")));
        }
    }

    let mut eng = Engine::new(hw, true);
    let mut stmts = Vec::new();
    let mut sched = VxbSchedule::default();
    let pr = hw.xbar.parallel_row;
    for (k, sg) in plan.subgraphs.iter().enumerate() {
        let mut writes = Vec::new();
        for id in sg.nodes.iter().filter(|id| units.contains_key(id)) {
            for u in &units[id] {
                for m in &u.members {
                    let tile = tile_name(*id, m);
                    writes.push(match m.rows {
                        None => MetaOp::WriteXb { core: m.core, xb: m.xb, tile },
                        Some(_) => MetaOp::WriteRows { core: m.core, xb: m.xb, lo: 0, hi: pr - 1, tile },
                    });
                }
            }
        }
        if k > 0 {
            let rows: u64 = writes
                .iter()
                .map(|w| match w {
                    MetaOp::WriteRows { lo, hi, .. } => (hi + 1 - lo) as u64,
                    MetaOp::WriteXb { tile, .. } => flow.tiles[tile].tile.rows as u64,
                    _ => 0,
                })
                .sum();
            let op = MetaOp::Reprogram { index: k as u32, cycles: rows * hw.xbar.write_cycles() };
            eng.issue(&Stmt::Op(op.clone()), &flow)?;
            stmts.push(Stmt::Op(op));
        }
        let mut b = Builder {
            graph,
            hw,
            layout: &layout,
            zero,
            flow: &flow,
            xbs: XbMap::new(),
            owners: HashMap::new(),
            tasks: Vec::new(),
            l1: HashMap::new(),
        };
        for w in writes {
            record_write(&mut b.xbs, &w, &flow)?;
            eng.issue(&Stmt::Op(w.clone()), &flow)?;
            stmts.push(Stmt::Op(w));
        }
        let in_sg = |id: &NodeId| sg.nodes.contains(id);
        let fused = |id: NodeId| -> bool {
            let n = graph.node(id);
            n.kind == OpKind::Relu
                && matches!(n.inputs[0], EdgeRef::Node(p) if graph.node(p).kind.is_cim() && in_sg(&p))
        };
        let mut lane = 0usize;
        for id in &sg.nodes {
            let node = graph.node(*id);
            if fused(*id) {
                continue;
            }
            let Some(ci) = info.get(id) else {
                b.push(Task { lane, node: *id, steps: vec![Step::Op(digital_op(graph, node, b.layout)?)], ..Default::default() })?;
                lane += 1;
                continue;
            };
            let us = &units[id];
            let relus: Vec<u64> =
                graph.consumers(*id).into_iter().filter(|c| fused(*c)).map(|c| b.layout.nodes[&c]).collect();
            let src = b.layout.of(&node.inputs[0]);
            let out = b.layout.nodes[id];
            let windows = assign_windows(ci, sg.dup.d(*id), us);
            for (ui, unit) in us.iter().enumerate() {
                let plan = combine_plan(ci, unit);
                let slots = b.slots(ci, unit, &plan);
                for (n, &w) in windows[ui].iter().enumerate() {
                    let steps = b.window_steps(
                        ci,
                        unit,
                        &slots[n % RING],
                        &plan,
                        w,
                        src,
                        out,
                        &relus,
                        staged,
                        node.shift(),
                    );
                    b.push(Task { lane, node: *id, unit: ui as u32, window: w, steps, deps: Vec::new() })?;
                }
                lane += 1;
            }
        }
        let _ = b.graph;
        let tasks = std::mem::take(&mut b.tasks);
        let (s, v) = list_schedule(&mut eng, &flow, &tasks)?;
        stmts.extend(s);
        sched.activations.extend(v.activations);
    }
    flow.stmts = stmts;
    Ok((flow, sched))
}
