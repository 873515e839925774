//! Compile the example conv+relu for each computing mode and show the flows.
use anyhow::Result;
use cimc::arch::{load_arch, Mode};
use cimc::codegen::serialize_flow;
use cimc::driver::{compile, CompileOptions};
use cimc::graph::load_graph;

fn main() -> Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let g = load_graph(format!("{dir}/models/conv_relu.json"))?;
    let hw = load_arch(format!("{dir}/arch/example.json"))?;
    for mode in [Mode::Cm, Mode::Xbm, Mode::Wlm] {
        let c = compile(&g, &hw.with_mode(mode), &CompileOptions::default())?;
        let text = serialize_flow(&c.flow);
        println!("== {mode}: {} compute blocks, {} lines", c.flow.compute_blocks(), text.lines().count());
        for l in text.lines().filter(|l| !l.starts_with('.') && !l.starts_with('!')).take(6) {
            println!("  {}", if l.len() > 110 { &l[..110] } else { l });
        }
    }
    Ok(())
}
