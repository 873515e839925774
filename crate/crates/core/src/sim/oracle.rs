//! Reference evaluation of a graph by nested loops over CHW tensors.

use std::collections::BTreeMap;

use super::tensor::{Tensor, TensorMap};
use crate::codegen::{requantize, sat8};
use crate::error::{Error, Result};
use crate::graph::{topo_order, Attrs, CompGraph, EdgeRef, NodeId, OpKind};

pub fn reference_oracle(graph: &CompGraph, tensors: &TensorMap) -> Result<TensorMap> {
    let mut vals: BTreeMap<NodeId, Vec<i32>> = BTreeMap::new();
    for id in topo_order(graph)? {
        let node = graph.node(id);
        let input = |i: usize| -> Result<&[i32]> {
            match &node.inputs[i] {
                EdgeRef::Node(p) => Ok(&vals[p]),
                EdgeRef::Input(name) => {
                    tensors.get(name).map(|t| t.values.as_slice()).ok_or_else(|| Error::MissingTensor(name.clone()))
                }
            }
        };
        let weights = || -> Result<&[i32]> {
            let name = node.weight_name();
            tensors.get(&name).map(|t| t.values.as_slice()).ok_or(Error::MissingTensor(name))
        };
        let (c, h, w) = graph.spec_of(&node.inputs[0])?.chw();
        let x = input(0)?;
        let out: Vec<i32> = match (&node.kind, &node.attrs) {
            (OpKind::Conv, Attrs::Conv { kernel, stride, padding, shift }) => {
                let (k, r, s) = (kernel.dims[0], kernel.dims[2], kernel.dims[3]);
                let (_, ho, wo) = node.output.chw();
                let wt = weights()?;
                let mut o = vec![0; k * ho * wo];
                for kk in 0..k {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc: i64 = 0;
                            for ci in 0..c {
                                for ry in 0..r {
                                    for sx in 0..s {
                                        let iy = (oy * stride + ry) as i64 - *padding as i64;
                                        let ix = (ox * stride + sx) as i64 - *padding as i64;
                                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                            continue;
                                        }
                                        let xv = x[(ci * h + iy as usize) * w + ix as usize] as i64;
                                        acc += xv * wt[((kk * c + ci) * r + ry) * s + sx] as i64;
                                    }
                                }
                            }
                            o[(kk * ho + oy) * wo + ox] = requantize(acc, *shift);
                        }
                    }
                }
                o
            }
            (OpKind::Fc, Attrs::Fc { weight, shift }) => {
                let (k, n) = (weight.dims[0], weight.dims[1]);
                let wt = weights()?;
                (0..k)
                    .map(|kk| requantize((0..n).map(|i| x[i] as i64 * wt[kk * n + i] as i64).sum(), *shift))
                    .collect()
            }
            (OpKind::Relu, _) => x.iter().map(|&v| v.max(0)).collect(),
            (OpKind::Add, _) => {
                let b = input(1)?;
                x.iter().zip(b).map(|(&a, &b)| sat8(a as i64 + b as i64)).collect()
            }
            (OpKind::MaxPool | OpKind::AvgPool, Attrs::Pool { kernel, stride }) => {
                let (k, s) = (*kernel, *stride);
                let (_, ho, wo) = node.output.chw();
                let mut o = vec![0; c * ho * wo];
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = i64::MIN;
                            let mut sum = 0i64;
                            for dy in 0..k {
                                for dx in 0..k {
                                    let v = x[(ci * h + oy * s + dy) * w + ox * s + dx] as i64;
                                    best = best.max(v);
                                    sum += v;
                                }
                            }
                            o[(ci * ho + oy) * wo + ox] =
                                if node.kind == OpKind::MaxPool { best as i32 } else { sum.div_euclid((k * k) as i64) as i32 };
                        }
                    }
                }
                o
            }
            _ => return Err(Error::UnsupportedOp(format!("node {id}"))),
        };
        vals.insert(id, out);
    }
    let mut res = TensorMap::new();
    for id in &graph.outputs {
        let (c, h, w) = graph.node(*id).output.chw();
        let name = format!("n{id}");
        res.insert(name.clone(), Tensor { name, dims: vec![c, h, w], values: vals[id].clone() });
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_graph;

    fn t(name: &str, dims: Vec<usize>, values: Vec<i32>) -> (String, Tensor) {
        (name.to_string(), Tensor { name: name.into(), dims, values })
    }

    #[test]
    fn identity_kernel_then_relu() {
        let g = parse_graph(
            r#"{"inputs": [{"name": "x", "dims": [1, 2, 2]}],
                "nodes": [{"id": 1, "kind": "Conv", "inputs": ["x"],
                           "attrs": {"kernel": {"dims": [1, 1, 1, 1]}, "shift": 0}},
                          {"id": 2, "kind": "Relu", "inputs": [1]}],
                "outputs": [2]}"#,
        )
        .unwrap();
        let m: TensorMap = [t("x", vec![1, 2, 2], vec![5, -3, 0, 7]), t("w1", vec![1, 1, 1, 1], vec![1])].into();
        assert_eq!(reference_oracle(&g, &m).unwrap()["n2"].values, vec![5, 0, 0, 7]);
    }

    #[test]
    fn hand_expanded_two_by_two() {
        // 2x2 kernel over a 2x2 input without padding: one dot product.
        let g = parse_graph(
            r#"{"inputs": [{"name": "x", "dims": [1, 2, 2]}],
                "nodes": [{"id": 1, "kind": "Conv", "inputs": ["x"],
                           "attrs": {"kernel": {"dims": [1, 1, 2, 2]}, "shift": 1}}],
                "outputs": [1]}"#,
        )
        .unwrap();
        let m: TensorMap = [t("x", vec![1, 2, 2], vec![1, 2, 3, 4]), t("w1", vec![1, 1, 2, 2], vec![5, -6, 7, 8])].into();
        // (1*5 - 2*6 + 3*7 + 4*8) >> 1 = 46 >> 1
        assert_eq!(reference_oracle(&g, &m).unwrap()["n1"].values, vec![23]);
    }

    #[test]
    fn add_saturates() {
        let g = parse_graph(
            r#"{"inputs": [{"name": "a", "dims": [1, 1, 2]}, {"name": "b", "dims": [1, 1, 2]}],
                "nodes": [{"id": 1, "kind": "Add", "inputs": ["a", "b"]}], "outputs": [1]}"#,
        )
        .unwrap();
        let m: TensorMap = [t("a", vec![1, 1, 2], vec![100, -100]), t("b", vec![1, 1, 2], vec![100, 1])].into();
        assert_eq!(reference_oracle(&g, &m).unwrap()["n1"].values, vec![127, -99]);
    }
}
