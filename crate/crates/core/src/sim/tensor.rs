//! Tensor container used for inputs, weights and outputs.
//!
//! A tensor file is a JSON array of `{name, dims, values}` objects. Values
//! are in row-major order of `dims` (CHW for activations, KCRS / KN for
//! weights). Weights are named `w<node id>`, outputs `n<node id>`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CompGraph;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<i32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<i32>) -> Result<Tensor> {
        let t = Tensor { name: name.into(), dims, values };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.dims.iter().product();
        if n != self.values.len() {
            return Err(Error::Validation(format!(
                "tensor `{}`: dims {:?} need {n} values, got {}",
                self.name,
                self.dims,
                self.values.len()
            )));
        }
        Ok(())
    }

    /// (C, H, W) with missing trailing dims as 1.
    pub fn chw(&self) -> (usize, usize, usize) {
        let d = |i: usize| self.dims.get(i).copied().unwrap_or(1);
        (d(0), d(1), d(2))
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;

pub fn parse_tensors(text: &str) -> Result<TensorMap> {
    let list: Vec<Tensor> = serde_json::from_str(text)?;
    let mut out = TensorMap::new();
    for t in list {
        t.validate()?;
        out.insert(t.name.clone(), t);
    }
    Ok(out)
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<TensorMap> {
    parse_tensors(&std::fs::read_to_string(path)?)
}

pub fn tensors_to_json(map: &TensorMap) -> String {
    let list: Vec<&Tensor> = map.values().collect();
    serde_json::to_string(&list).expect("tensors serialize")
}

pub fn chw_to_hwc(v: &[i32], c: usize, h: usize, w: usize) -> Vec<i32> {
    let mut out = vec![0; v.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ci] = v[(ci * h + y) * w + x];
            }
        }
    }
    out
}

pub fn hwc_to_chw(v: &[i32], c: usize, h: usize, w: usize) -> Vec<i32> {
    let mut out = vec![0; v.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci * h + y) * w + x] = v[(y * w + x) * c + ci];
            }
        }
    }
    out
}

fn signed(rng: &mut ChaCha8Rng, bits: u32) -> i32 {
    let half = 1i32 << (bits.clamp(1, 8) - 1);
    rng.gen_range(-half..half)
}

/// Random graph inputs and weights, reproducible from `seed`.
pub fn random_tensors(graph: &CompGraph, seed: u64) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TensorMap::new();
    for i in &graph.inputs {
        let n = i.spec.numel();
        let values = (0..n).map(|_| signed(&mut rng, i.spec.precision_bits)).collect();
        out.insert(i.name.clone(), Tensor { name: i.name.clone(), dims: i.spec.dims.clone(), values });
    }
    for node in graph.nodes.values() {
        if let Some(w) = node.weight_spec() {
            let values = (0..w.numel()).map(|_| signed(&mut rng, w.precision_bits)).collect();
            let name = node.weight_name();
            out.insert(name.clone(), Tensor { name, dims: w.dims.clone(), values });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_round_trip() {
        let v: Vec<i32> = (0..24).collect();
        let hwc = chw_to_hwc(&v, 2, 3, 4);
        assert_eq!(hwc[1], 12);
        assert_eq!(hwc_to_chw(&hwc, 2, 3, 4), v);
    }

    #[test]
    fn json_round_trip() {
        let mut m = TensorMap::new();
        m.insert("x".into(), Tensor::new("x", vec![1, 2], vec![-3, 4]).unwrap());
        assert_eq!(parse_tensors(&tensors_to_json(&m)).unwrap(), m);
        assert!(parse_tensors(r#"[{"name": "x", "dims": [3], "values": [1]}]"#).is_err());
    }
}
