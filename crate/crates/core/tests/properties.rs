//! Invariants of the compiler and the performance model over random inputs.

mod common;

use cimc::arch::{HwSpec, Mode};
use cimc::codegen::{requantize, ShiftAcc};
use cimc::driver::{compile, CompileOptions, Compiled};
use cimc::graph::CompGraph;
use cimc::lowering::{encode_weight, slice};
use cimc::sim::{exec_flow, perf_model, random_tensors, requantized_dot};
use cimc::Error;
use proptest::prelude::*;

fn fit(g: &CompGraph, mut hw: HwSpec, opts: &CompileOptions) -> (Compiled, HwSpec) {
    loop {
        match compile(g, &hw, opts) {
            Ok(c) => return (c, hw),
            Err(Error::Capacity(_)) if hw.chip.core_number < 4096 => hw = hw.with_cores(hw.chip.core_number * 2),
            Err(e) => panic!("{e}"),
        }
    }
}

fn mode_of(i: u8) -> Mode {
    [Mode::Cm, Mode::Xbm, Mode::Wlm][i as usize % 3]
}

/// Crossbar-cycles a flow must spend: every window drives every tile once,
/// for ceil(in/dac) * ceil(rows/parallel_row) cycles.
fn expected_xb_cycles(c: &Compiled, hw: &HwSpec) -> u64 {
    let pr = hw.xbar.parallel_row;
    c.info
        .values()
        .map(|ci| {
            let per_window: u64 = ci
                .tiles
                .iter()
                .map(|t| ci.input_bits.div_ceil(hw.xbar.dac_bits) as u64 * t.rows.div_ceil(pr) as u64)
                .sum();
            ci.windows * per_window
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bit_slices_recombine_to_the_dot_product(
        pairs in proptest::collection::vec((-128i32..=127, -128i32..=127), 1..40),
        cell_bits in prop::sample::select(vec![1u32, 2, 4, 8]),
        shift in 0u32..12,
    ) {
        let (x, w): (Vec<i32>, Vec<i32>) = pairs.into_iter().unzip();
        let planes = 8u32.div_ceil(cell_bits);
        let sa = ShiftAcc { planes, cell_bits, weight_bits: 8, shift, xlen: x.len() as u32, layout: 0 };
        let plane_sum = |b: u32| -> i64 {
            x.iter().zip(&w).map(|(&xi, &wi)| xi as i64 * slice(encode_weight(wi, 8), b, cell_bits) as i64).sum()
        };
        let xsum: i64 = x.iter().map(|&v| v as i64).sum();
        let direct: i64 = x.iter().zip(&w).map(|(&a, &b)| a as i64 * b as i64).sum();
        prop_assert_eq!(sa.apply(plane_sum, xsum), requantize(direct, shift));
        prop_assert_eq!(requantized_dot(&x, &w, shift), requantize(direct, shift));
    }

    #[test]
    fn crossbar_cycles_are_conserved(seed in any::<u64>(), m in 0u8..3, staged in any::<bool>()) {
        let g = common::random_graph(seed);
        let (c, hw) = fit(&g, common::random_arch(seed, mode_of(m)), &CompileOptions { staged, ..Default::default() });
        let r = perf_model(&c.flow, &hw).unwrap();
        if hw.mode == Mode::Cm {
            // A core read holds all of its crossbars, port-bound time included.
            prop_assert!(r.xb_active_cycles >= expected_xb_cycles(&c, &hw));
        } else {
            prop_assert_eq!(r.xb_active_cycles, expected_xb_cycles(&c, &hw));
        }
    }

    #[test]
    fn peak_is_bounded_by_the_chip(seed in any::<u64>(), m in 0u8..3, staged in any::<bool>()) {
        let g = common::random_graph(seed);
        let (c, hw) = fit(&g, common::random_arch(seed, mode_of(m)), &CompileOptions { staged, ..Default::default() });
        let r = perf_model(&c.flow, &hw).unwrap();
        let xbs = hw.total_crossbars() as f64;
        let w = &hw.power_weights;
        // One mover per memory: L0 plus an L1 per core.
        let bound = (w.xb_active + w.adc_dac) * xbs + w.data_move * (hw.chip.core_number + 1) as f64;
        prop_assert!(r.peak_active as f64 <= xbs);
        prop_assert!(r.peak_power_proxy <= bound + 1e-9);
        prop_assert!(r.utilization <= 1.0 + 1e-9);
    }

    #[test]
    fn compile_and_run_are_deterministic(seed in any::<u64>(), m in 0u8..3) {
        let g = common::random_graph(seed);
        let opts = CompileOptions::default();
        let (a, hw) = fit(&g, common::random_arch(seed, mode_of(m)), &opts);
        let b = compile(&g, &hw, &opts).unwrap();
        prop_assert_eq!(&a.flow, &b.flow);
        let t = random_tensors(&g, seed);
        prop_assert_eq!(exec_flow(&a.flow, &hw, &t).unwrap(), exec_flow(&b.flow, &hw, &t).unwrap());
        prop_assert_eq!(perf_model(&a.flow, &hw).unwrap(), perf_model(&b.flow, &hw).unwrap());
    }
}

#[test]
fn wordline_instance_doubles_per_unit_throughput() {
    // Example conv: 27 weight rows, parallel_row 16. A crossbar replica needs
    // two row cycles per window; a remapped instance fires both groups at once.
    let g = common::model("conv_relu");
    let hw = common::arch("example");
    let span = |mode| {
        let c = compile(&g, &hw.with_mode(mode), &CompileOptions::default()).unwrap();
        let acts = c.schedule.unwrap().activations;
        let d: Vec<u64> = acts.iter().map(|a| a.end - a.start).collect();
        assert!(d.iter().all(|&x| x == d[0]));
        d[0]
    };
    assert_eq!(span(Mode::Xbm), 2);
    assert_eq!(span(Mode::Wlm), 1);
}

#[test]
fn missing_weight_is_reported() {
    let g = common::model("conv_relu");
    let hw = common::arch("example");
    let c = compile(&g, &hw, &CompileOptions::default()).unwrap();
    let mut t = random_tensors(&g, 0);
    t.remove("w1");
    match exec_flow(&c.flow, &hw, &t) {
        Err(Error::MissingTensor(n)) => assert_eq!(n, "w1"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn more_cores_never_slow_the_cg_schedule() {
    let g = common::model("lenet");
    let base = common::arch("jain").with_mode(Mode::Cm);
    let mut last = u64::MAX;
    for n in [8u32, 16, 32, 64, 128] {
        let hw = base.with_cores(n);
        let c = compile(&g, &hw, &CompileOptions::default()).unwrap();
        let t = perf_model(&c.flow, &hw).unwrap().total_cycles;
        assert!(t <= last, "{n} cores: {t} > {last}");
        last = t;
    }
}
