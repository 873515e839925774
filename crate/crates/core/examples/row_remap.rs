//! Wordline-level remapping: the second operator starts one cycle earlier and
//! each instance finishes a window per cycle.
use anyhow::Result;
use cimc::arch::load_arch;
use cimc::driver::{compile, CompileOptions};
use cimc::graph::load_graph;
use cimc::sim::perf_model;

fn main() -> Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let g = load_graph(format!("{dir}/models/remap.json"))?;
    let hw = load_arch(format!("{dir}/arch/remap.json"))?;
    for remap in [false, true] {
        let c = compile(&g, &hw, &CompileOptions { remap, ..Default::default() })?;
        let r = perf_model(&c.flow, &hw)?;
        let op2 = r.node(2).expect("op2 timing");
        println!(
            "{:<6} OP2 first cycle {}  interval {:?}  total {}",
            if remap { "remap" } else { "naive" },
            op2.first_cycle,
            op2.interval,
            r.total_cycles
        );
        if let Some(p) = &c.remap {
            for (id, n) in &p.nodes {
                println!("       OP{id}: {} row groups, {} instances", n.g, n.d_pp);
            }
        }
    }
    Ok(())
}
