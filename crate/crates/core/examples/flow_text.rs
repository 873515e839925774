//! Parse a hand-written flow, check it against an arch, run it and time it.
use anyhow::Result;
use cimc::arch::parse_arch;
use cimc::codegen::{check_flow, parse_flow, serialize_flow};
use cimc::sim::{perf_model, run_flow, Tensor, TensorMap};

const ARCH: &str = r#"{"mode": "CM", "chip": {"core_number": 1, "alu_ops_per_cycle": 2}, "core": {"xb_number": 1},
    "xbar": {"xb_rows": 8, "xb_cols": 8, "parallel_row": 8, "dac_bits": 8, "adc_bits": 8,
             "cell_type": "SRAM", "cell_precision_bits": 8}}"#;

const FLOW: &str = "\
.input a 0 1x1x4
.input b 4 1x1x4
.output s 8 1x1x4
dcom(add[8],L0,0,4,8,4)
dcom(relu,L0,8,8,4)
";

fn main() -> Result<()> {
    let hw = parse_arch(ARCH)?;
    let flow = parse_flow(FLOW)?;
    check_flow(&flow, &hw)?;
    print!("{}", serialize_flow(&flow));
    let mut t = TensorMap::new();
    t.insert("a".into(), Tensor::new("a", vec![1, 1, 4], vec![100, -5, 3, -128])?);
    t.insert("b".into(), Tensor::new("b", vec![1, 1, 4], vec![100, 2, -9, 0])?);
    println!("s = {:?}", run_flow(&flow, &hw, &t)?["s"].values);
    println!("{} cycles", perf_model(&flow, &hw)?.total_cycles);
    Ok(())
}
