//! Randomized verification, then the same with a deliberately broken flow.
use anyhow::Result;
use cimc::arch::load_arch;
use cimc::driver::verify;
use cimc::graph::load_graph;

fn main() -> Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let g = load_graph(format!("{dir}/models/lenet.json"))?;
    // The stock 4-core chip is too small for the FC layers.
    let hw = load_arch(format!("{dir}/arch/jain.json"))?.with_cores(16);
    println!("clean:   {}", verify(&g, &hw, 0, 10, false)?.summary());
    println!("corrupt: {}", verify(&g, &hw, 0, 10, true)?.summary());
    Ok(())
}
