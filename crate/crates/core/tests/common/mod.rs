#![allow(dead_code)]

use std::path::PathBuf;

use cimc::arch::{load_arch, parse_arch, HwSpec, Mode};
use cimc::graph::{load_graph, parse_graph, CompGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(rel)
}

pub fn arch(name: &str) -> HwSpec {
    load_arch(data(&format!("arch/{name}.json"))).unwrap()
}

pub fn model(name: &str) -> CompGraph {
    load_graph(data(&format!("models/{name}.json"))).unwrap()
}

pub const MODELS: [&str; 8] = ["conv_relu", "staged", "remap", "lenet", "mlp", "resblock", "vgg7", "vgg11"];

/// Requantization shift that keeps a dot product of `n` random 8-bit terms
/// away from constant saturation.
fn shift_for(n: usize) -> u32 {
    let mut s = 8;
    while (1usize << (2 * (s - 8))) < n {
        s += 1;
    }
    s
}

/// Random graph of at most five nodes over tensors with dims <= 16: chains
/// with an occasional diamond closed by `Add`.
pub fn random_graph(seed: u64) -> CompGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (rng.gen_range(1..=8usize), rng.gen_range(1..=8usize), rng.gen_range(1..=8usize));
    // (reference, dims)
    let mut avail: Vec<(Value, Vec<usize>)> = vec![(json!("x"), vec![c, h, w])];
    let mut nodes = Vec::new();
    let n = rng.gen_range(1..=5u32);
    for id in 1..=n {
        let (src, dims) = avail.last().cloned().unwrap();
        let spatial = dims.len() == 3;
        let numel: usize = dims.iter().product();
        let pick = rng.gen_range(0..6);
        let node = match pick {
            0 | 1 if spatial => {
                let (c, h, w) = (dims[0], dims[1], dims[2]);
                // Shape-preserving 3x3 convs make `Add` diamonds possible.
                let same = rng.gen_bool(0.4);
                let (r, pad, stride, k) = if same {
                    (3, 1, 1, c)
                } else {
                    let pad = rng.gen_range(0..=1usize);
                    (rng.gen_range(1..=3usize).min(h + 2 * pad).min(w + 2 * pad), pad, rng.gen_range(1..=2usize), rng.gen_range(1..=8usize))
                };
                let ho = (h + 2 * pad - r) / stride + 1;
                let wo = (w + 2 * pad - r) / stride + 1;
                avail.push((json!(id), vec![k, ho, wo]));
                json!({"id": id, "kind": "Conv", "inputs": [src],
                       "attrs": {"kernel": {"dims": [k, c, r, r]}, "stride": stride, "padding": pad,
                                 "shift": shift_for(c * r * r)}})
            }
            2 if numel <= 256 => {
                let k = rng.gen_range(1..=16usize);
                avail.push((json!(id), vec![k]));
                json!({"id": id, "kind": "Fc", "inputs": [src],
                       "attrs": {"weight": {"dims": [k, numel]}, "shift": shift_for(numel)}})
            }
            3 if spatial && dims[1] >= 2 && dims[2] >= 2 => {
                let kind = if rng.gen_bool(0.5) { "MaxPool" } else { "AvgPool" };
                let stride = rng.gen_range(1..=2usize);
                avail.push((json!(id), vec![dims[0], (dims[1] - 2) / stride + 1, (dims[2] - 2) / stride + 1]));
                json!({"id": id, "kind": kind, "inputs": [src], "attrs": {"kernel": 2, "stride": stride}})
            }
            4 => {
                let twins: Vec<&(Value, Vec<usize>)> =
                    avail[..avail.len() - 1].iter().filter(|(_, d)| *d == dims).collect();
                if twins.is_empty() {
                    avail.push((json!(id), dims.clone()));
                    json!({"id": id, "kind": "Relu", "inputs": [src]})
                } else {
                    let other = twins[rng.gen_range(0..twins.len())].0.clone();
                    avail.push((json!(id), dims.clone()));
                    json!({"id": id, "kind": "Add", "inputs": [src, other]})
                }
            }
            _ => {
                avail.push((json!(id), dims.clone()));
                json!({"id": id, "kind": "Relu", "inputs": [src]})
            }
        };
        nodes.push(node);
    }
    let g = json!({"inputs": [{"name": "x", "dims": [c, h, w]}], "nodes": nodes, "outputs": [n]});
    parse_graph(&g.to_string()).unwrap()
}

/// Random small architecture in `mode`.
pub fn random_arch(seed: u64, mode: Mode) -> HwSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let rows = [8u32, 16, 32][rng.gen_range(0..3)];
    let cols = [8u32, 16, 32][rng.gen_range(0..3)];
    let pr = rows >> rng.gen_range(0..=2);
    let cell = [1u32, 2, 4, 8][rng.gen_range(0..4)];
    let dac = [1u32, 2, 8][rng.gen_range(0..3)];
    let a = json!({
        "mode": mode.to_string(),
        "chip": {"core_number": rng.gen_range(2..=8)},
        "core": {"xb_number": rng.gen_range(1..=4)},
        "xbar": {"xb_rows": rows, "xb_cols": cols, "parallel_row": pr, "dac_bits": dac, "adc_bits": 8,
                 "cell_type": "SRAM", "cell_precision_bits": cell}
    });
    parse_arch(&a.to_string()).unwrap()
}
