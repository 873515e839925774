//! Latency and peak activity of CM, XBM and WLM on the baseline chip.
use anyhow::Result;
use cimc::arch::load_arch;
use cimc::driver::compare_modes;
use cimc::graph::load_graph;

fn main() -> Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let model = std::env::args().nth(1).unwrap_or_else(|| "lenet".into());
    let g = load_graph(format!("{dir}/models/{model}.json"))?;
    let hw = load_arch(format!("{dir}/arch/baseline.json"))?;
    print!("{}", compare_modes(&g, &hw)?.table());
    Ok(())
}
