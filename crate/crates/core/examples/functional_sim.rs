//! Run a compiled flow on random tensors and compare with the reference oracle.
use anyhow::Result;
use cimc::arch::load_arch;
use cimc::driver::{compile, CompileOptions};
use cimc::graph::load_graph;
use cimc::sim::{exec_flow, random_tensors, reference_oracle};

fn main() -> Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let g = load_graph(format!("{dir}/models/resblock.json"))?;
    let hw = load_arch(format!("{dir}/arch/baseline.json"))?;
    let c = compile(&g, &hw, &CompileOptions::default())?;
    let t = random_tensors(&g, 42);
    let got = exec_flow(&c.flow, &hw, &t)?;
    let want = reference_oracle(&g, &t)?;
    for (name, o) in &got {
        println!("{name} {:?}: first values {:?}", o.dims, &o.values[..8.min(o.values.len())]);
    }
    println!("matches oracle: {}", got == want);
    Ok(())
}
