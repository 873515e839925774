//! End-to-end compile, mode comparison and randomized verification.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::arch::{HwSpec, Mode};
use crate::codegen::cm::emit_cm;
use crate::codegen::xbm::{emit_wlm, emit_xbm};
use crate::codegen::{check_flow, Flow, Level, MetaOp, Stmt};
use crate::error::Result;
use crate::graph::{topo_order, CompGraph, NodeId};
use crate::lowering::DimBinding;
use crate::sched::cg::{segment_graph, SubgraphPlan};
use crate::sched::mvm::{mvm_plan, MvmPlan, VxbSchedule};
use crate::sched::vvm::{remap, RemapPlan};
use crate::sched::{analyze, CgStrategy, CimInfo};
use crate::sim::{exec_flow, perf_model, random_tensors, reference_oracle, SimReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompileOptions {
    pub strategy: CgStrategy,
    /// Staggered (staged) window activation in XBM/WLM.
    pub staged: bool,
    /// Row remapping in WLM.
    pub remap: bool,
    pub binding: DimBinding,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { strategy: CgStrategy::default(), staged: true, remap: true, binding: DimBinding::default() }
    }
}

#[derive(Clone, Debug)]
pub struct Compiled {
    /// Input graph with scheduling annotations filled in.
    pub graph: CompGraph,
    pub hw: HwSpec,
    pub info: BTreeMap<NodeId, CimInfo>,
    pub cg: SubgraphPlan,
    pub mvm: Option<MvmPlan>,
    pub remap: Option<RemapPlan>,
    /// False when the remapped flow was slower and the naive one was kept.
    pub remap_applied: bool,
    pub schedule: Option<VxbSchedule>,
    pub flow: Flow,
}

/// Runs the passes enabled by `hw.mode` and emits a checked flow.
pub fn compile(graph: &CompGraph, hw: &HwSpec, opts: &CompileOptions) -> Result<Compiled> {
    hw.validate()?;
    let info = analyze(graph, hw, opts.binding)?;
    let cg = segment_graph(graph, hw, &info, opts.strategy)?;
    let mut out = Compiled {
        graph: graph.clone(),
        hw: hw.clone(),
        info,
        cg,
        mvm: None,
        remap: None,
        remap_applied: false,
        schedule: None,
        flow: Flow::default(),
    };
    if hw.mode == Mode::Cm {
        out.flow = emit_cm(graph, hw, &out.info, &out.cg, opts.strategy.pipelines())?;
        if opts.strategy == CgStrategy::PipelineAndDuplication {
            // The combined search also covers either technique alone.
            let mut best = perf_model(&out.flow, hw)?.total_cycles;
            for alt in [CgStrategy::DuplicationOnly, CgStrategy::PipelineOnly] {
                let cg = segment_graph(graph, hw, &out.info, alt)?;
                let flow = emit_cm(graph, hw, &out.info, &cg, alt.pipelines())?;
                let t = perf_model(&flow, hw)?.total_cycles;
                if t < best {
                    best = t;
                    out.cg = cg;
                    out.flow = flow;
                }
            }
        }
    } else {
        let mvm = mvm_plan(graph, hw, &out.info, &out.cg)?;
        let (flow, sched) = emit_xbm(graph, hw, &out.info, &out.cg, &mvm, opts.staged)?;
        out.flow = flow;
        out.schedule = Some(sched);
        if hw.mode == Mode::Wlm && opts.remap {
            let order = topo_order(graph)?;
            let rp = remap(&out.info, &mvm, &order, hw);
            let (flow, sched) = emit_wlm(graph, hw, &out.info, &out.cg, &rp, opts.staged)?;
            if perf_model(&flow, hw)?.total_cycles <= perf_model(&out.flow, hw)?.total_cycles {
                out.flow = flow;
                out.schedule = Some(sched);
                out.remap_applied = true;
            }
            out.remap = Some(rp);
        }
        out.mvm = Some(mvm);
    }
    check_flow(&out.flow, hw)?;
    annotate(&mut out);
    Ok(out)
}

fn annotate(c: &mut Compiled) {
    for (k, sg) in c.cg.subgraphs.iter().enumerate() {
        for id in &sg.nodes {
            let Some(node) = c.graph.nodes.get_mut(id) else { continue };
            node.anno.subgraph = Some(k);
            if let Some(e) = sg.dup.entries.get(id) {
                node.anno.dup = Some(e.d);
                node.anno.cores = e.cores.clone();
            }
            if let Some(n) = c.mvm.as_ref().and_then(|m| m.nodes.get(id)) {
                node.anno.vxbs = n.replicas.iter().map(|r| r.xbs.clone()).collect();
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeRow {
    pub mode: Mode,
    pub total_cycles: u64,
    pub peak_active: u32,
    pub peak_power_proxy: f64,
    pub compute_blocks: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct StrategyRow {
    pub strategy: CgStrategy,
    pub total_cycles: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModesReport {
    pub modes: Vec<ModeRow>,
    /// CM latency of each graph-level strategy.
    pub strategies: Vec<StrategyRow>,
}

impl ModesReport {
    pub fn latency(&self, mode: Mode) -> Option<u64> {
        self.modes.iter().find(|r| r.mode == mode).map(|r| r.total_cycles)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<6} {:>14} {:>6} {:>10} {:>8}\n", "mode", "cycles", "peak", "proxy", "blocks");
        for r in &self.modes {
            s += &format!(
                "{:<6} {:>14} {:>6} {:>10.3} {:>8}\n",
                r.mode.to_string(),
                r.total_cycles,
                r.peak_active,
                r.peak_power_proxy,
                r.compute_blocks
            );
        }
        for r in &self.strategies {
            s += &format!("CM/{:<24?} {:>14}\n", r.strategy, r.total_cycles);
        }
        s
    }
}

/// Latency of the three modes of `hw` and of the CM strategies.
pub fn compare_modes(graph: &CompGraph, hw: &HwSpec) -> Result<ModesReport> {
    let mut modes = Vec::new();
    for mode in [Mode::Cm, Mode::Xbm, Mode::Wlm] {
        let h = hw.with_mode(mode);
        let c = compile(graph, &h, &CompileOptions::default())?;
        let r = perf_model(&c.flow, &h)?;
        modes.push(ModeRow {
            mode,
            total_cycles: r.total_cycles,
            peak_active: r.peak_active,
            peak_power_proxy: r.peak_power_proxy,
            compute_blocks: c.flow.compute_blocks(),
        });
    }
    let h = hw.with_mode(Mode::Cm);
    let mut strategies = Vec::new();
    for strategy in [CgStrategy::PipelineAndDuplication, CgStrategy::PipelineOnly, CgStrategy::DuplicationOnly] {
        let c = compile(graph, &h, &CompileOptions { strategy, ..Default::default() })?;
        strategies.push(StrategyRow { strategy, total_cycles: perf_model(&c.flow, &h)?.total_cycles });
    }
    Ok(ModesReport { modes, strategies })
}

/// First mismatch found by `verify`.
#[derive(Clone, Debug, Serialize)]
pub struct Counterexample {
    pub case: u64,
    pub tensor: String,
    pub index: usize,
    pub expected: i32,
    pub got: Option<i32>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub cases: u64,
    pub passed: u64,
    pub first_failure: Option<Counterexample>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.passed == self.cases
    }

    pub fn summary(&self) -> String {
        if self.cases == 0 {
            return "0 cases: nothing to check (pass)".into();
        }
        let mut s = format!("{}/{} pass", self.passed, self.cases);
        if let Some(c) = &self.first_failure {
            match &c.error {
                Some(e) => s += &format!("\ncase {}: {e}", c.case),
                None => s += &format!(
                    "\ncase {}: {}[{}] expected {} got {}",
                    c.case,
                    c.tensor,
                    c.index,
                    c.expected,
                    c.got.map_or("nothing".into(), |v| v.to_string())
                ),
            }
        }
        s
    }
}

/// Overwrites the start of the first output with the first input, so a
/// verify run has something to catch.
pub fn corrupt_flow(flow: &mut Flow) {
    if let (Some(i), Some(o)) = (flow.inputs.first(), flow.outputs.first()) {
        let len = i.dims.iter().product::<usize>().min(o.dims.iter().product()) as u64;
        flow.stmts.push(Stmt::Op(MetaOp::Mov { src_level: Level::L0, src: i.addr, des_level: Level::L0, des: o.addr, len }));
    }
}

/// Compiles once and checks `n` random tensor sets against the oracle.
pub fn verify(graph: &CompGraph, hw: &HwSpec, seed: u64, n: u64, corrupt: bool) -> Result<VerifyReport> {
    let mut c = compile(graph, hw, &CompileOptions::default())?;
    if corrupt {
        corrupt_flow(&mut c.flow);
    }
    let mut report = VerifyReport { cases: n, passed: 0, first_failure: None };
    for case in 0..n {
        let tensors = random_tensors(graph, seed.wrapping_add(case));
        let want = reference_oracle(graph, &tensors)?;
        let fail = match exec_flow(&c.flow, hw, &tensors) {
            Err(e) => Some(Counterexample { case, tensor: String::new(), index: 0, expected: 0, got: None, error: Some(e.to_string()) }),
            Ok(got) => want.iter().find_map(|(name, t)| {
                let g = got.get(name).map(|g| g.values.as_slice()).unwrap_or(&[]);
                (0..t.values.len()).find(|&i| g.get(i) != Some(&t.values[i])).map(|index| Counterexample {
                    case,
                    tensor: name.clone(),
                    index,
                    expected: t.values[index],
                    got: g.get(index).copied(),
                    error: None,
                })
            }),
        };
        match fail {
            None => report.passed += 1,
            Some(f) if report.first_failure.is_none() => report.first_failure = Some(f),
            Some(_) => {}
        }
    }
    Ok(report)
}

/// Compiles and times a graph in one call.
pub fn compile_and_time(graph: &CompGraph, hw: &HwSpec, opts: &CompileOptions) -> Result<(Compiled, SimReport)> {
    let c = compile(graph, hw, opts)?;
    let r = perf_model(&c.flow, hw)?;
    Ok((c, r))
}
