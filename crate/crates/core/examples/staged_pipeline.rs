//! Two chained convs: firing crossbars as soon as their inputs are ready
//! lowers the number of simultaneously active crossbars.
use anyhow::Result;
use cimc::arch::load_arch;
use cimc::driver::{compile, CompileOptions};
use cimc::graph::load_graph;
use cimc::sim::perf_model;

fn main() -> Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let g = load_graph(format!("{dir}/models/staged.json"))?;
    let hw = load_arch(format!("{dir}/arch/staged.json"))?;
    for staged in [false, true] {
        let c = compile(&g, &hw, &CompileOptions { staged, ..Default::default() })?;
        let r = perf_model(&c.flow, &hw)?;
        println!(
            "{:<11} cycles {:>4}  peak crossbars {}  power proxy {:.2}",
            if staged { "staged" } else { "traditional" },
            r.total_cycles,
            r.peak_active,
            r.peak_power_proxy
        );
    }
    Ok(())
}
