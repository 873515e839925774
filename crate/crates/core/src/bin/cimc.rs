//! Command-line driver: compile, simulate, verify and modes-report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cimc::arch::{load_arch, HwSpec, Mode};
use cimc::codegen::{check_flow, parse_flow, serialize_flow};
use cimc::driver::{compare_modes, compile, verify, CompileOptions};
use cimc::graph::{load_graph, to_json, CompGraph};
use cimc::lowering::{BitBinding, DimBinding};
use cimc::sched::CgStrategy;
use cimc::sim::{check_arch, load_tensors, perf_model, random_tensors, reference_oracle, run_flow, tensors_to_json};

#[derive(Parser)]
#[command(name = "cimc", version, about = "Scheduling compiler and simulator for compute-in-memory accelerators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a model graph into a meta-operator flow (.mof).
    Compile(CompileArgs),
    /// Run a flow functionally and/or through the performance model.
    Simulate(SimulateArgs),
    /// Compare compiled flows against the reference oracle on random tensors.
    Verify(VerifyArgs),
    /// Latency and peak-activity table for CM, XBM and WLM.
    ModesReport(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Auto,
    Cm,
    Xbm,
    Wlm,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    /// Pipeline and duplication.
    Pd,
    Pipeline,
    Dup,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EmitArg {
    SchedCg,
    SchedMvm,
    SchedVvm,
}

impl EmitArg {
    fn name(self) -> &'static str {
        match self {
            EmitArg::SchedCg => "sched-cg",
            EmitArg::SchedMvm => "sched-mvm",
            EmitArg::SchedVvm => "sched-vvm",
        }
    }
}

#[derive(Args)]
struct Target {
    /// Model graph (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Architecture description (JSON).
    #[arg(long)]
    arch: PathBuf,
    /// Computing mode; `auto` takes it from the arch file.
    #[arg(long, value_enum, default_value = "auto")]
    mode: ModeArg,
}

#[derive(Args)]
struct CompileArgs {
    #[command(flatten)]
    target: Target,
    /// Pass dumps to write next to the output, as `<output>.<pass>.json`.
    #[arg(long, value_enum)]
    emit: Vec<EmitArg>,
    /// Output flow; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pd")]
    strategy: StrategyArg,
    /// Gather the whole window before firing any crossbar.
    #[arg(long)]
    traditional: bool,
    /// Skip wordline-level row remapping.
    #[arg(long)]
    no_remap: bool,
    /// Put weight bit planes on separate crossbars instead of adjacent columns.
    #[arg(long)]
    bits_on_crossbars: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    flow: PathBuf,
    #[arg(long)]
    arch: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    mode: ModeArg,
    /// Inputs and weights (JSON tensor list).
    #[arg(long)]
    tensors: Option<PathBuf>,
    /// Model graph; with `--seed`, random tensors are drawn for it and the
    /// outputs are compared with the oracle.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run the performance model (default when `--func` is absent).
    #[arg(long)]
    perf: bool,
    /// Run the functional simulator.
    #[arg(long)]
    func: bool,
    /// Ignore an architecture hash mismatch.
    #[arg(long)]
    force: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    target: Target,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random cases.
    #[arg(short, default_value_t = 20)]
    n: u64,
    /// Corrupt the compiled flow first (fault injection).
    #[arg(long)]
    corrupt: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    arch: PathBuf,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
}

fn arch_for(path: &Path, mode: ModeArg) -> anyhow::Result<HwSpec> {
    let hw = load_arch(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(match mode {
        ModeArg::Auto => hw,
        ModeArg::Cm => hw.with_mode(Mode::Cm),
        ModeArg::Xbm => hw.with_mode(Mode::Xbm),
        ModeArg::Wlm => hw.with_mode(Mode::Wlm),
    })
}

fn load(t: &Target) -> anyhow::Result<(CompGraph, HwSpec)> {
    let g = load_graph(&t.model).with_context(|| format!("loading {}", t.model.display()))?;
    Ok((g, arch_for(&t.arch, t.mode)?))
}

fn write_or_print(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_compile(a: CompileArgs) -> anyhow::Result<ExitCode> {
    let (graph, hw) = load(&a.target)?;
    let opts = CompileOptions {
        strategy: match a.strategy {
            StrategyArg::Pd => CgStrategy::PipelineAndDuplication,
            StrategyArg::Pipeline => CgStrategy::PipelineOnly,
            StrategyArg::Dup => CgStrategy::DuplicationOnly,
        },
        staged: !a.traditional,
        remap: !a.no_remap,
        binding: DimBinding { b_to: if a.bits_on_crossbars { BitBinding::Xb } else { BitBinding::Xbc } },
    };
    let c = compile(&graph, &hw, &opts)?;
    write_or_print(a.output.as_deref(), &serialize_flow(&c.flow))?;
    let base = a.output.clone().unwrap_or_else(|| {
        PathBuf::from(a.target.model.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned()))
    });
    for e in &a.emit {
        let dump = match e {
            EmitArg::SchedCg => json!({
                "graph": serde_json::from_str::<serde_json::Value>(&to_json(&c.graph))?,
                "plan": c.cg,
            }),
            EmitArg::SchedMvm => {
                if !hw.mode.runs_mvm() {
                    bail!("sched-mvm needs XBM or WLM mode, arch is {}", hw.mode);
                }
                json!({ "plan": c.mvm, "activations": c.schedule.as_ref().map(|s| &s.activations) })
            }
            EmitArg::SchedVvm => {
                if !hw.mode.runs_vvm() {
                    bail!("sched-vvm needs WLM mode, arch is {}", hw.mode);
                }
                json!({
                    "plan": c.remap,
                    "applied": c.remap_applied,
                    "activations": c.schedule.as_ref().map(|s| &s.activations),
                })
            }
        };
        let path = PathBuf::from(format!("{}.{}.json", base.display(), e.name()));
        fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(a: SimulateArgs) -> anyhow::Result<ExitCode> {
    let text = fs::read_to_string(&a.flow).with_context(|| format!("reading {}", a.flow.display()))?;
    let flow = parse_flow(&text)?;
    let hw = arch_for(&a.arch, a.mode)?;
    if !a.force {
        check_arch(&flow, &hw)?;
    }
    check_flow(&flow, &hw)?;
    let mut out = serde_json::Map::new();
    if a.func {
        let graph = a.model.as_ref().map(load_graph).transpose()?;
        let tensors = match (&a.tensors, &graph, a.seed) {
            (Some(p), _, _) => load_tensors(p)?,
            (None, Some(g), Some(seed)) => random_tensors(g, seed),
            _ => bail!("--func needs --tensors, or --model with --seed"),
        };
        let got = run_flow(&flow, &hw, &tensors)?;
        out.insert("outputs".into(), serde_json::from_str(&tensors_to_json(&got))?);
        if let Some(g) = &graph {
            let want = reference_oracle(g, &tensors)?;
            let ok = want.iter().all(|(k, t)| got.get(k) == Some(t));
            out.insert("oracle_match".into(), ok.into());
            eprintln!("oracle: {}", if ok { "match" } else { "MISMATCH" });
        }
    }
    if a.perf || !a.func {
        let r = perf_model(&flow, &hw)?;
        eprint!("{}", r.summary());
        out.insert("perf".into(), serde_json::to_value(&r)?);
    }
    write_or_print(a.output.as_deref(), &(serde_json::to_string_pretty(&out)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<ExitCode> {
    let (graph, hw) = load(&a.target)?;
    let r = verify(&graph, &hw, a.seed, a.n, a.corrupt)?;
    println!("{}", r.summary());
    Ok(if r.ok() { ExitCode::SUCCESS } else { ExitCode::from(4) })
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<ExitCode> {
    let graph = load_graph(&a.model)?;
    let hw = load_arch(&a.arch)?;
    let r = compare_modes(&graph, &hw)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        print!("{}", r.table());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.command {
        Command::Compile(a) => cmd_compile(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::ModesReport(a) => cmd_report(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<cimc::Error>().map_or(2, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
