//! JSON graph schema.
//!
//! ```json
//! {"inputs": [{"name": "x", "dims": [3, 32, 32], "precision_bits": 8}],
//!  "nodes": [{"id": 1, "kind": "Conv", "inputs": ["x"],
//!             "attrs": {"kernel": {"dims": [32, 3, 3, 3]}, "stride": 1, "padding": 1, "shift": 8}},
//!            {"id": 2, "kind": "Relu", "inputs": [1]}],
//!  "outputs": [2]}
//! ```
//!
//! A string input names a graph input, an integer names a node. FC nodes take
//! `{"out_features": K}` or `{"weight": {"dims": [K, N]}}`. Pools take
//! `{"kernel": k, "stride": s}`. `shift` (requantization right-shift) defaults
//! to the weight precision. An optional `"pin": {"dup": D, "mvm_dup": D'}`
//! fixes duplication counts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{Anno, Attrs, CompGraph, EdgeRef, GraphInput, OpKind, OpNode, Pins, TensorSpec};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct GraphFile {
    #[serde(default)]
    inputs: Vec<GraphInput>,
    #[serde(default)]
    nodes: Vec<NodeFile>,
    #[serde(default)]
    outputs: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct NodeFile {
    id: u32,
    kind: String,
    #[serde(default)]
    inputs: Vec<EdgeRef>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    attrs: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Pins::is_empty")]
    pin: Pins,
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<CompGraph> {
    let text = std::fs::read_to_string(path)?;
    parse_graph(&text)
}

pub fn parse_graph(text: &str) -> Result<CompGraph> {
    let file: GraphFile = serde_json::from_str(text)?;
    let mut g = CompGraph { inputs: file.inputs, outputs: file.outputs, ..Default::default() };
    for n in file.nodes {
        let kind = OpKind::parse(&n.kind)
            .ok_or_else(|| Error::Validation(format!("node {}: unknown op kind `{}`", n.id, n.kind)))?;
        let attrs = parse_attrs(n.id, kind, &n.attrs)?;
        let node = OpNode {
            id: n.id,
            kind,
            attrs,
            inputs: n.inputs,
            output: TensorSpec::new(vec![1], 8),
            pins: n.pin,
            anno: Anno::default(),
        };
        if g.nodes.insert(n.id, node).is_some() {
            return Err(Error::Validation(format!("duplicate node id {}", n.id)));
        }
    }
    g.validate()?;
    Ok(g)
}

fn get_usize(id: u32, m: &Map<String, Value>, key: &str, default: Option<usize>) -> Result<usize> {
    match m.get(key) {
        Some(v) => v
            .as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| Error::Parse(format!("node {id}: `{key}` must be a non-negative integer"))),
        None => default.ok_or_else(|| Error::Parse(format!("node {id}: missing `{key}`"))),
    }
}

fn parse_attrs(id: u32, kind: OpKind, m: &Map<String, Value>) -> Result<Attrs> {
    Ok(match kind {
        OpKind::Conv => {
            let kernel: TensorSpec = serde_json::from_value(
                m.get("kernel").cloned().ok_or_else(|| Error::Parse(format!("node {id}: missing `kernel`")))?,
            )?;
            let shift = get_usize(id, m, "shift", Some(kernel.precision_bits as usize))? as u32;
            Attrs::Conv {
                stride: get_usize(id, m, "stride", Some(1))?,
                padding: get_usize(id, m, "padding", Some(0))?,
                shift,
                kernel,
            }
        }
        OpKind::Fc => {
            let weight = match m.get("weight") {
                Some(w) => serde_json::from_value(w.clone())?,
                None => {
                    let k = get_usize(id, m, "out_features", None)?;
                    let bits = get_usize(id, m, "weight_bits", Some(8))? as u32;
                    TensorSpec::new(vec![k, 0], bits)
                }
            };
            let shift = get_usize(id, m, "shift", Some(weight.precision_bits as usize))? as u32;
            Attrs::Fc { weight, shift }
        }
        OpKind::MaxPool | OpKind::AvgPool => {
            let kernel = get_usize(id, m, "kernel", None)?;
            Attrs::Pool { kernel, stride: get_usize(id, m, "stride", Some(kernel))? }
        }
        OpKind::Relu | OpKind::Add => Attrs::None,
    })
}

/// Serializes a graph back to the JSON schema.
pub fn to_json(g: &CompGraph) -> String {
    let nodes = g
        .nodes
        .values()
        .map(|n| {
            let attrs = match &n.attrs {
                Attrs::Conv { kernel, stride, padding, shift } => {
                    json!({"kernel": kernel, "stride": stride, "padding": padding, "shift": shift})
                }
                Attrs::Fc { weight, shift } => json!({"weight": weight, "shift": shift}),
                Attrs::Pool { kernel, stride } => json!({"kernel": kernel, "stride": stride}),
                Attrs::None => json!({}),
            };
            NodeFile {
                id: n.id,
                kind: n.kind.name().to_string(),
                inputs: n.inputs.clone(),
                attrs: attrs.as_object().cloned().unwrap_or_default(),
                pin: n.pins.clone(),
            }
        })
        .collect();
    let file = GraphFile { inputs: g.inputs.clone(), nodes, outputs: g.outputs.clone() };
    serde_json::to_string_pretty(&file).expect("graph serializes")
}
