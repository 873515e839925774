//! Graph-level duplication search: how many cores each conv gets as the
//! budget grows.
use anyhow::Result;
use cimc::arch::load_arch;
use cimc::graph::load_graph;
use cimc::sched::cg::cg_duplicate;

fn main() -> Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let g = load_graph(format!("{dir}/models/vgg7.json"))?;
    let base = load_arch(format!("{dir}/arch/baseline.json"))?;
    for cores in [32, 64, 128, 256] {
        match cg_duplicate(&g, &base.with_cores(cores)) {
            Ok(d) => {
                let ds: Vec<String> = d.entries.iter().filter(|(id, _)| g.node(**id).kind.is_cim()).map(|(id, e)| format!("{id}:{}", e.d)).collect();
                println!("{cores:>4} cores  II {:>6}  D {}", d.ii, ds.join(" "));
            }
            Err(e) => println!("{cores:>4} cores  {e}"),
        }
    }
    Ok(())
}
