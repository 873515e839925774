//! Event-driven timing of a flow.
//!
//! Each op starts once its inputs are written (per-address ready times), its
//! destination is no longer being read or written by earlier ops, and its
//! execution unit is free. Ops that consume a large region (streaming digital
//! ops, `read_core` bands) are split into items that start as soon as their
//! own slice is ready, so consumers overlap with producers. Statements of a
//! parallel block start together.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::arch::{cycles_per_mvm, HwSpec, Limit};
use crate::codegen::check::{band_input_rows, core_param, footprint, record_write, XbMap};
use crate::codegen::{DcomFunc, Flow, Level, MetaOp, Region, Stmt};
use crate::error::Result;
use crate::graph::NodeId;
use crate::lowering::CimGeom;

/// Bits a buffer word is costed at when moved.
pub const WORD_BITS: u64 = 8;

/// Disjoint `[lo, hi) -> value` segments; uncovered addresses read as 0.
#[derive(Clone, Debug, Default)]
pub struct RangeMap {
    segs: BTreeMap<u64, (u64, u64)>,
}

impl RangeMap {
    fn split(&mut self, at: u64) {
        let hit = self.segs.range(..at).next_back().map(|(&s, &(e, v))| (s, e, v));
        if let Some((s, e, v)) = hit {
            if e > at {
                self.segs.insert(s, (at, v));
                self.segs.insert(at, (e, v));
            }
        }
    }

    pub fn max_over(&self, lo: u64, hi: u64) -> u64 {
        if lo >= hi {
            return 0;
        }
        let mut m = 0;
        if let Some((_, &(e, v))) = self.segs.range(..=lo).next_back() {
            if e > lo {
                m = v;
            }
        }
        for (_, &(_, v)) in self.segs.range(lo + 1..hi) {
            m = m.max(v);
        }
        m
    }

    pub fn assign(&mut self, lo: u64, hi: u64, v: u64) {
        if lo >= hi {
            return;
        }
        self.split(lo);
        self.split(hi);
        let inner: Vec<u64> = self.segs.range(lo..hi).map(|(&s, _)| s).collect();
        for s in inner {
            self.segs.remove(&s);
        }
        let (mut lo, mut hi) = (lo, hi);
        if let Some((&s, &(e, pv))) = self.segs.range(..lo).next_back() {
            if e == lo && pv == v {
                self.segs.remove(&s);
                lo = s;
            }
        }
        if let Some(&(e, nv)) = self.segs.get(&hi) {
            if nv == v {
                self.segs.remove(&hi);
                hi = e;
            }
        }
        self.segs.insert(lo, (hi, v));
    }

    pub fn raise(&mut self, lo: u64, hi: u64, v: u64) {
        if lo >= hi {
            return;
        }
        let mut pieces = self.steps(lo, hi);
        for p in &mut pieces {
            p.2 = p.2.max(v);
        }
        for (a, b, val) in pieces {
            self.assign(a, b, val);
        }
    }

    /// Piecewise-constant view of `[lo, hi)`.
    pub fn steps(&self, lo: u64, hi: u64) -> Vec<(u64, u64, u64)> {
        let mut out = Vec::new();
        let mut at = lo;
        let push = |a: u64, b: u64, v: u64, out: &mut Vec<(u64, u64, u64)>| {
            if a < b {
                match out.last_mut() {
                    Some(last) if last.1 == a && last.2 == v => last.1 = b,
                    _ => out.push((a, b, v)),
                }
            }
        };
        if let Some((_, &(e, v))) = self.segs.range(..=lo).next_back() {
            if e > lo {
                push(lo, e.min(hi), v, &mut out);
                at = e.min(hi);
            }
        }
        for (&s, &(e, v)) in self.segs.range(lo + 1..hi) {
            if s > at {
                push(at, s, 0, &mut out);
            }
            push(s.max(at), e.min(hi), v, &mut out);
            at = e.min(hi);
        }
        if at < hi {
            push(at, hi, 0, &mut out);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Unit {
    Xb(u32, u32),
    Core(u32),
    Port(Level),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActKind {
    /// `count` crossbars (and their converters) computing.
    Xb { core: u32, xb: u32, count: u32 },
    Mov { des: Level },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activity {
    pub start: u64,
    pub end: u64,
    pub kind: ActKind,
    pub node: Option<NodeId>,
}

#[derive(Clone, Debug)]
struct Item {
    inputs: Vec<Region>,
    outputs: Vec<Region>,
    work: u64,
}

/// Timing of one op before it is applied.
#[derive(Clone, Debug)]
pub struct OpPlan {
    pub start: u64,
    pub end: u64,
    items: Vec<(Item, u64, u64)>,
    whole_writes: Vec<Region>,
    unit: Option<Unit>,
    act: Option<(ActKind, Option<NodeId>)>,
}

pub fn mov_cycles(hw: &HwSpec, src: Level, des: Level, len: u64) -> u64 {
    let bits = len * WORD_BITS;
    let bw = match des {
        Level::L0 => hw.chip.l0_bw_bits_per_cycle,
        Level::L1(_) => hw.core.l1_bw_bits_per_cycle,
    };
    let noc = if src != des { (hw.chip.noc_cost_cycles_per_bit * bits as f64).ceil() as u64 } else { 0 };
    bw.cycles_for(bits) + noc
}

/// Per-window input port time, epilogue and store of a core-level operator.
pub fn core_window_costs(hw: &HwSpec, geom: &CimGeom, planes_len: u64, v: u32, core: u32) -> (u64, u64, u64) {
    let port = match *geom {
        CimGeom::Conv { c, r, s, .. } => r as u64 * mov_cycles(hw, Level::L0, Level::L1(core), (s * c) as u64),
        // One load per crossbar row group.
        CimGeom::Fc { n, .. } => {
            let xr = hw.xbar.xb_rows;
            let full = (n / xr) as u64 * mov_cycles(hw, Level::L0, Level::L1(core), xr as u64);
            full + if n % xr > 0 { mov_cycles(hw, Level::L0, Level::L1(core), (n % xr) as u64) } else { 0 }
        }
    };
    let k = geom.cols() as u64;
    let mut epi = hw.core.alu_ops_per_cycle.cycles_for(k);
    if v > 1 {
        epi += hw.core.alu_ops_per_cycle.cycles_for(planes_len);
    }
    (port, epi, mov_cycles(hw, Level::L1(core), Level::L0, k))
}

pub struct Engine<'a> {
    hw: &'a HwSpec,
    pub stream: bool,
    ready: HashMap<Level, RangeMap>,
    readers: HashMap<Level, RangeMap>,
    free: HashMap<Unit, u64>,
    xbs: XbMap,
    barrier: u64,
    pub end: u64,
    pub program_cycles: u64,
    pub acts: Vec<Activity>,
}

impl<'a> Engine<'a> {
    pub fn new(hw: &'a HwSpec, stream: bool) -> Self {
        Engine {
            hw,
            stream,
            ready: HashMap::new(),
            readers: HashMap::new(),
            free: HashMap::new(),
            xbs: XbMap::new(),
            barrier: 0,
            end: 0,
            program_cycles: 0,
            acts: Vec::new(),
        }
    }

    fn ready_of(&self, r: &Region) -> u64 {
        self.ready.get(&r.level).map_or(0, |m| m.max_over(r.lo, r.hi))
    }

    fn read_end_of(&self, r: &Region) -> u64 {
        self.readers.get(&r.level).map_or(0, |m| m.max_over(r.lo, r.hi))
    }

    fn items_of(&self, op: &MetaOp, flow: &Flow) -> Result<(Vec<Item>, Limit, Option<Unit>, Option<(ActKind, Option<NodeId>)>)> {
        let hw = self.hw;
        let fp = footprint(op, flow, &self.xbs)?;
        let single = |work: u64| Item { inputs: fp.reads.clone(), outputs: fp.writes.clone(), work };
        let once = Limit::Finite(1);
        Ok(match op {
            MetaOp::ReadXb { core, xb, .. } | MetaOp::ReadRows { core, xb, .. } => {
                let c = &self.xbs[&(*core, *xb)];
                let t = &flow.tiles[&c.tile];
                let rows = match op {
                    MetaOp::ReadRows { lo, hi, .. } => hi + 1 - lo,
                    _ => t.tile.rows,
                };
                let cost = cycles_per_mvm(hw, rows.clamp(1, hw.xbar.xb_rows), t.in_bits)?;
                let kind = ActKind::Xb { core: *core, xb: *xb, count: 1 };
                (vec![single(cost)], once, Some(Unit::Xb(*core, *xb)), Some((kind, Some(t.node))))
            }
            MetaOp::ReadCore { param, core, src, des, .. } => {
                let p = core_param(flow, param)?;
                let r = p.cores.iter().position(|c| c == core).unwrap_or(0) as u32;
                let (lo, hi) = p.band(r);
                let v = p.wm.phys_rows.div_ceil(hw.xbar.xb_rows);
                let (port, epi, store) = core_window_costs(hw, &p.geom, p.wm.psum_len() as u64, v, *core);
                let fill = port + epi + store;
                let (_, wo) = p.geom.out_hw();
                let row_work = wo as u64 * p.cpm.max(port);
                let kind = ActKind::Xb { core: *core, xb: 0, count: p.xbars };
                let act = Some((kind, Some(p.node)));
                let unit = Some(Unit::Core(*core));
                if !self.stream || matches!(p.geom, CimGeom::Fc { .. }) || lo >= hi {
                    return Ok((vec![single(fill + (hi - lo) as u64 * row_work)], once, unit, act));
                }
                let CimGeom::Conv { c, w, k, .. } = p.geom else { unreachable!() };
                let (in_lo, _) = band_input_rows(&p.geom, lo, hi);
                let row_in = (w * c) as u64;
                let row_out = (wo * k) as u64;
                let items = (lo..hi)
                    .map(|y| {
                        let (_, need) = band_input_rows(&p.geom, y, y + 1);
                        Item {
                            inputs: vec![Region::new(Level::L0, *src, (need - in_lo) as u64 * row_in)],
                            outputs: vec![Region::new(Level::L0, des + (y - lo) as u64 * row_out, row_out)],
                            work: row_work + if y == lo { fill } else { 0 },
                        }
                    })
                    .collect();
                (items, once, unit, act)
            }
            MetaOp::Mov { src_level, des_level, len, .. } => {
                let cost = mov_cycles(hw, *src_level, *des_level, *len);
                let unit = match des_level {
                    Level::L1(_) => Some(Unit::Port(*des_level)),
                    Level::L0 => None,
                };
                (vec![single(cost)], once, unit, Some((ActKind::Mov { des: *des_level }, None)))
            }
            MetaOp::Dcom { func, imm, level, srcs, des, len } => {
                let rate = match level {
                    Level::L0 => hw.chip.alu_ops_per_cycle,
                    Level::L1(_) => hw.core.alu_ops_per_cycle,
                };
                if !self.stream || *level != Level::L0 {
                    return Ok((vec![single(*len)], rate, None, None));
                }
                let items = match func {
                    DcomFunc::Relu | DcomFunc::Add => {
                        let mut cuts = vec![0, *len];
                        for &s in srcs {
                            if let Some(m) = self.ready.get(level) {
                                cuts.extend(m.steps(s, s + len).iter().map(|st| st.0 - s));
                            }
                        }
                        cuts.sort_unstable();
                        cuts.dedup();
                        cuts.windows(2)
                            .map(|w| Item {
                                inputs: srcs.iter().map(|&s| Region::new(*level, s + w[0], w[1] - w[0])).collect(),
                                outputs: vec![Region::new(*level, des + w[0], w[1] - w[0])],
                                work: w[1] - w[0],
                            })
                            .collect()
                    }
                    DcomFunc::MaxPool | DcomFunc::AvgPool => {
                        let [k, s, c, h, w] = imm[..] else { unreachable!("checked by footprint") };
                        let (k, s, c, h, w) = (k as u64, s as u64, c as u64, h as u64, w as u64);
                        let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
                        (0..ho)
                            .map(|y| Item {
                                inputs: vec![Region::new(*level, srcs[0] + y * s * w * c, k * w * c)],
                                outputs: vec![Region::new(*level, des + y * wo * c, wo * c)],
                                work: wo * c,
                            })
                            .collect()
                    }
                    DcomFunc::ShiftAcc => vec![single(*len)],
                };
                (items, rate, None, None)
            }
            MetaOp::WriteXb { .. } | MetaOp::WriteRows { .. } | MetaOp::Reprogram { .. } => {
                (Vec::new(), once, None, None)
            }
        })
    }

    /// Timing of `op` if it were issued now, starting no earlier than `floor`.
    pub fn plan(&self, op: &MetaOp, flow: &Flow, floor: u64) -> Result<OpPlan> {
        if let MetaOp::Reprogram { cycles, .. } = op {
            let at = self.end.max(self.barrier);
            return Ok(OpPlan {
                start: at,
                end: at + cycles,
                items: Vec::new(),
                whole_writes: Vec::new(),
                unit: None,
                act: None,
            });
        }
        if op.is_write() {
            return Ok(OpPlan { start: 0, end: 0, items: Vec::new(), whole_writes: Vec::new(), unit: None, act: None });
        }
        let (items, rate, unit, act) = self.items_of(op, flow)?;
        let whole_writes: Vec<Region> = items.iter().flat_map(|i| i.outputs.iter().copied()).collect();
        let mut avail = floor.max(self.barrier);
        if let Some(u) = unit {
            avail = avail.max(self.free.get(&u).copied().unwrap_or(0));
        }
        for w in &whole_writes {
            avail = avail.max(self.read_end_of(w)).max(self.ready_of(w));
        }
        let mut out = Vec::with_capacity(items.len());
        let (mut t0, mut q, mut prev_end) = (0u64, 0u64, 0u64);
        for (j, it) in items.into_iter().enumerate() {
            let r = it.inputs.iter().map(|x| self.ready_of(x)).fold(avail, u64::max);
            if j == 0 || r >= prev_end {
                t0 = r;
                q = 0;
            }
            q += it.work;
            let end = t0 + rate.cycles_for(q);
            let busy = r.max(if j == 0 { r } else { prev_end }).min(end);
            out.push((it, busy, end));
            prev_end = end;
        }
        let start = out.first().map_or(avail, |x| x.1);
        let end = out.last().map_or(avail, |x| x.2);
        Ok(OpPlan { start, end, items: out, whole_writes, unit, act })
    }

    pub fn apply(&mut self, op: &MetaOp, flow: &Flow, plan: &OpPlan) -> Result<()> {
        match op {
            MetaOp::WriteXb { .. } | MetaOp::WriteRows { .. } => {
                record_write(&mut self.xbs, op, flow)?;
                let rows = match op {
                    MetaOp::WriteRows { lo, hi, .. } => (hi + 1 - lo) as u64,
                    MetaOp::WriteXb { tile, .. } => flow.tiles[tile].tile.rows as u64,
                    _ => unreachable!(),
                };
                self.program_cycles += rows * self.hw.xbar.write_cycles();
                return Ok(());
            }
            MetaOp::Reprogram { .. } => {
                self.barrier = plan.end;
                self.end = self.end.max(plan.end);
                return Ok(());
            }
            _ => {}
        }
        let _ = &plan.whole_writes;
        for (it, busy, end) in &plan.items {
            for o in &it.outputs {
                self.ready.entry(o.level).or_default().assign(o.lo, o.hi, *end);
            }
            for i in &it.inputs {
                self.readers.entry(i.level).or_default().raise(i.lo, i.hi, *end);
            }
            if let Some((kind, node)) = plan.act {
                if end > busy {
                    self.acts.push(Activity { start: *busy, end: *end, kind, node });
                }
            }
        }
        if let Some(u) = plan.unit {
            self.free.insert(u, plan.end);
        }
        self.end = self.end.max(plan.end);
        Ok(())
    }

    /// Issues a statement; returns the start and end of each op.
    pub fn issue(&mut self, stmt: &Stmt, flow: &Flow) -> Result<Vec<(u64, u64)>> {
        match stmt {
            Stmt::Op(op) => {
                let p = self.plan(op, flow, 0)?;
                self.apply(op, flow, &p)?;
                Ok(vec![(p.start, p.end)])
            }
            Stmt::Parallel(ops) => self.issue_block(ops, flow),
        }
    }

    pub fn issue_block(&mut self, ops: &[MetaOp], flow: &Flow) -> Result<Vec<(u64, u64)>> {
        // Writes inside a block are recorded first so reads of the same block see them.
        for op in ops.iter().filter(|o| o.is_write()) {
            let p = self.plan(op, flow, 0)?;
            self.apply(op, flow, &p)?;
        }
        let rest: Vec<&MetaOp> = ops.iter().filter(|o| !o.is_write()).collect();
        let mut floor = 0;
        for op in &rest {
            floor = floor.max(self.plan(op, flow, 0)?.start);
        }
        let plans = rest.iter().map(|op| self.plan(op, flow, floor)).collect::<Result<Vec<_>>>()?;
        for (op, p) in rest.iter().zip(&plans) {
            self.apply(op, flow, p)?;
        }
        Ok(plans.iter().map(|p| (p.start, p.end)).collect())
    }

    pub fn report(&self) -> SimReport {
        SimReport::from_activities(self.hw, &self.acts, self.end, self.program_cycles)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: u64,
    pub end: u64,
    pub xb: u32,
    pub adc: u32,
    pub mov: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTiming {
    pub node: NodeId,
    /// 1-based cycle of the first crossbar activation.
    pub first_cycle: u64,
    pub last_end: u64,
    pub activations: u64,
    /// Mean gap between activations of the node's first crossbar.
    pub interval: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub total_cycles: u64,
    pub program_cycles: u64,
    pub peak_active: u32,
    pub peak_power_proxy: f64,
    pub utilization: f64,
    pub xb_active_cycles: u64,
    pub nodes: Vec<NodeTiming>,
    pub segments: Vec<Segment>,
}

impl SimReport {
    pub fn from_activities(hw: &HwSpec, acts: &[Activity], total: u64, program_cycles: u64) -> SimReport {
        let mut events: Vec<(u64, i64, Option<Level>)> = Vec::new();
        let mut xb_cycles = 0u64;
        let mut per_node: BTreeMap<NodeId, (u64, u64, u64, (u32, u32), Vec<u64>)> = BTreeMap::new();
        for a in acts {
            match a.kind {
                ActKind::Xb { core, xb, count } => {
                    events.push((a.start, count as i64, None));
                    events.push((a.end, -(count as i64), None));
                    xb_cycles += (a.end - a.start) * count as u64;
                    if let Some(n) = a.node {
                        let e = per_node.entry(n).or_insert((u64::MAX, 0, 0, (core, xb), Vec::new()));
                        e.0 = e.0.min(a.start);
                        e.1 = e.1.max(a.end);
                        e.2 += 1;
                        if e.3 == (core, xb) {
                            e.4.push(a.start);
                        }
                    }
                }
                ActKind::Mov { des } => {
                    events.push((a.start, 1, Some(des)));
                    events.push((a.end, -1, Some(des)));
                }
            }
        }
        events.sort_by_key(|e| (e.0, e.1));
        let w = &hw.power_weights;
        let mut segments = Vec::new();
        let (mut xb, mut movers) = (0i64, HashMap::<Level, i64>::new());
        let mut active_levels = 0u32;
        let (mut peak_active, mut peak_proxy) = (0u32, 0f64);
        let mut i = 0;
        while i < events.len() {
            let t = events[i].0;
            while i < events.len() && events[i].0 == t {
                let (_, d, lvl) = events[i];
                match lvl {
                    None => xb += d,
                    Some(l) => {
                        let c = movers.entry(l).or_insert(0);
                        let before = *c > 0;
                        *c += d;
                        match (before, *c > 0) {
                            (false, true) => active_levels += 1,
                            (true, false) => active_levels -= 1,
                            _ => {}
                        }
                    }
                }
                i += 1;
            }
            if let Some(next) = events.get(i).map(|e| e.0) {
                let seg = Segment { start: t, end: next, xb: xb as u32, adc: xb as u32, mov: active_levels };
                if seg.xb > 0 || seg.mov > 0 {
                    peak_active = peak_active.max(seg.xb);
                    let proxy = w.xb_active * seg.xb as f64 + w.adc_dac * seg.adc as f64 + w.data_move * seg.mov as f64;
                    peak_proxy = peak_proxy.max(proxy);
                    match segments.last_mut() {
                        Some(Segment { end, xb, adc, mov, .. })
                            if *end == t && *xb == seg.xb && *adc == seg.adc && *mov == seg.mov =>
                        {
                            *end = next
                        }
                        _ => segments.push(seg),
                    }
                }
            }
        }
        let nodes = per_node
            .into_iter()
            .map(|(node, (first, last, n, _, mut starts))| {
                starts.sort_unstable();
                let interval = (starts.len() >= 2)
                    .then(|| (starts[starts.len() - 1] - starts[0]) as f64 / (starts.len() - 1) as f64);
                NodeTiming { node, first_cycle: first + 1, last_end: last, activations: n, interval }
            })
            .collect();
        let cap = hw.total_crossbars() as f64 * total as f64;
        SimReport {
            total_cycles: total,
            program_cycles,
            peak_active,
            peak_power_proxy: peak_proxy,
            utilization: if cap > 0.0 { xb_cycles as f64 / cap } else { 0.0 },
            xb_active_cycles: xb_cycles,
            nodes,
            segments,
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeTiming> {
        self.nodes.iter().find(|n| n.node == id)
    }

    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "total_cycles      {}\nprogram_cycles    {}\npeak_active       {}\npeak_power_proxy  {:.4}\nutilization       {:.4}\n",
            self.total_cycles, self.program_cycles, self.peak_active, self.peak_power_proxy, self.utilization
        );
        s.push_str("node  first_cycle  last_end  activations  interval\n");
        for n in &self.nodes {
            let iv = n.interval.map_or("-".to_string(), |v| format!("{v:.2}"));
            s.push_str(&format!("{:<5} {:<12} {:<9} {:<12} {}\n", n.node, n.first_cycle, n.last_end, n.activations, iv));
        }
        s
    }
}

/// Times a flow.
pub fn perf_model(flow: &Flow, hw: &HwSpec) -> Result<SimReport> {
    let mut eng = Engine::new(hw, flow.stream);
    for s in &flow.stmts {
        eng.issue(s, flow)?;
    }
    Ok(eng.report())
}
