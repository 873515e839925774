//! Computation graph: operator nodes, edges, shape inference and ordering.

mod json;

pub use json::{load_graph, parse_graph, to_json};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub dims: Vec<usize>,
    #[serde(default = "default_bits")]
    pub precision_bits: u32,
}

fn default_bits() -> u32 {
    8
}

impl TensorSpec {
    pub fn new(dims: Vec<usize>, precision_bits: u32) -> Self {
        Self { dims, precision_bits }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("zero dimension in {:?}", self.dims)));
        }
        if !(1..=32).contains(&self.precision_bits) {
            return Err(Error::Validation(format!(
                "precision {} outside 1..=32",
                self.precision_bits
            )));
        }
        Ok(())
    }

    /// (C, H, W) view of an activation tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.dims.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [c, h] => (*c, *h, 1),
            [c] => (*c, 1, 1),
            d => (d.iter().product(), 1, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Conv,
    Fc,
    Relu,
    MaxPool,
    AvgPool,
    Add,
}

impl OpKind {
    pub fn is_cim(self) -> bool {
        matches!(self, OpKind::Conv | OpKind::Fc)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::Fc => "fc",
            OpKind::Relu => "relu",
            OpKind::MaxPool => "maxpool",
            OpKind::AvgPool => "avgpool",
            OpKind::Add => "add",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        Some(match s.to_ascii_lowercase().as_str() {
            "conv" => OpKind::Conv,
            "fc" | "matmul" | "gemm" => OpKind::Fc,
            "relu" => OpKind::Relu,
            "maxpool" => OpKind::MaxPool,
            "avgpool" => OpKind::AvgPool,
            "add" => OpKind::Add,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        if self == OpKind::Add {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attrs {
    Conv { kernel: TensorSpec, stride: usize, padding: usize, shift: u32 },
    Fc { weight: TensorSpec, shift: u32 },
    Pool { kernel: usize, stride: usize },
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeRef {
    Node(NodeId),
    Input(String),
}

/// User-supplied scheduling pins; a pinned value overrides the pass result.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pins {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dup: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mvm_dup: Option<u32>,
}

impl Pins {
    pub fn is_empty(&self) -> bool {
        self.dup.is_none() && self.mvm_dup.is_none()
    }
}

/// Annotations written by the scheduling passes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anno {
    pub dup: Option<u32>,
    pub subgraph: Option<usize>,
    pub cores: Vec<u32>,
    pub vxbs: Vec<Vec<(u32, u32)>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpNode {
    pub id: NodeId,
    pub kind: OpKind,
    pub attrs: Attrs,
    pub inputs: Vec<EdgeRef>,
    /// Inferred output shape.
    pub output: TensorSpec,
    pub pins: Pins,
    pub anno: Anno,
}

impl OpNode {
    pub fn shift(&self) -> u32 {
        match &self.attrs {
            Attrs::Conv { shift, .. } | Attrs::Fc { shift, .. } => *shift,
            _ => 0,
        }
    }

    pub fn weight_spec(&self) -> Option<&TensorSpec> {
        match &self.attrs {
            Attrs::Conv { kernel, .. } => Some(kernel),
            Attrs::Fc { weight, .. } => Some(weight),
            _ => None,
        }
    }

    /// Name of the weight tensor this node expects.
    pub fn weight_name(&self) -> String {
        format!("w{}", self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInput {
    pub name: String,
    #[serde(flatten)]
    pub spec: TensorSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CompGraph {
    pub inputs: Vec<GraphInput>,
    pub nodes: BTreeMap<NodeId, OpNode>,
    pub outputs: Vec<NodeId>,
}

impl CompGraph {
    pub fn node(&self, id: NodeId) -> &OpNode {
        &self.nodes[&id]
    }

    pub fn input_spec(&self, name: &str) -> Option<&TensorSpec> {
        self.inputs.iter().find(|i| i.name == name).map(|i| &i.spec)
    }

    /// Shape of the tensor carried by an edge reference.
    pub fn spec_of(&self, r: &EdgeRef) -> Result<&TensorSpec> {
        match r {
            EdgeRef::Node(id) => self
                .nodes
                .get(id)
                .map(|n| &n.output)
                .ok_or_else(|| Error::Validation(format!("dangling edge to node {id}"))),
            EdgeRef::Input(name) => self
                .input_spec(name)
                .ok_or_else(|| Error::Validation(format!("unknown graph input `{name}`"))),
        }
    }

    /// (producer, consumer, tensor) triples.
    pub fn edges(&self) -> Vec<(EdgeRef, NodeId, TensorSpec)> {
        let mut out = Vec::new();
        for n in self.nodes.values() {
            for r in &n.inputs {
                if let Ok(spec) = self.spec_of(r) {
                    out.push((r.clone(), n.id, spec.clone()));
                }
            }
        }
        out
    }

    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.inputs.contains(&EdgeRef::Node(id)))
            .map(|n| n.id)
            .collect()
    }

    pub fn cim_nodes(&self) -> impl Iterator<Item = &OpNode> {
        self.nodes.values().filter(|n| n.kind.is_cim())
    }

    /// Validates structure and recomputes every node's output shape.
    pub fn validate(&mut self) -> Result<()> {
        let mut names = BTreeSet::new();
        for i in &self.inputs {
            i.spec.validate()?;
            if !names.insert(i.name.clone()) {
                return Err(Error::Validation(format!("duplicate input `{}`", i.name)));
            }
        }
        for n in self.nodes.values() {
            if n.inputs.len() != n.kind.arity() {
                return Err(Error::Validation(format!(
                    "node {} ({}) takes {} input(s), got {}",
                    n.id,
                    n.kind.name(),
                    n.kind.arity(),
                    n.inputs.len()
                )));
            }
            for r in &n.inputs {
                self.spec_of(r)?;
            }
            if n.pins.dup == Some(0) || n.pins.mvm_dup == Some(0) {
                return Err(Error::Validation(format!("node {}: pinned duplication must be >= 1", n.id)));
            }
        }
        for o in &self.outputs {
            if !self.nodes.contains_key(o) {
                return Err(Error::Validation(format!("output refers to unknown node {o}")));
            }
        }
        let order = topo_order(self)?;
        for id in order {
            let node = &self.nodes[&id];
            let ins: Vec<TensorSpec> = node
                .inputs
                .iter()
                .map(|r| self.spec_of(r).cloned())
                .collect::<Result<_>>()?;
            let node = self.nodes.get_mut(&id).unwrap();
            if let Attrs::Fc { weight, .. } = &mut node.attrs {
                // `out_features` form leaves the fan-in to be filled from the input.
                if weight.dims.len() == 2 && weight.dims[1] == 0 {
                    weight.dims[1] = ins[0].numel();
                }
            }
            if let Some(w) = node.weight_spec() {
                w.validate()?;
                if w.precision_bits > 8 {
                    return Err(Error::Validation(format!("node {}: weights wider than 8 bits", node.id)));
                }
            }
            node.output = infer(node, &ins)?;
        }
        Ok(())
    }
}

/// Output shape of `node` applied to `input`.
pub fn infer_output_shape(node: &OpNode, input: &TensorSpec) -> Result<TensorSpec> {
    let ins = vec![input.clone(); node.kind.arity()];
    infer(node, &ins)
}

fn infer(node: &OpNode, ins: &[TensorSpec]) -> Result<TensorSpec> {
    let input = &ins[0];
    let bits = input.precision_bits;
    let act = |dims: &[usize]| -> Result<(usize, usize, usize)> {
        match dims {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(Error::Shape(format!(
                "node {} expects a (C,H,W) activation, got {:?}",
                node.id, dims
            ))),
        }
    };
    match (&node.kind, &node.attrs) {
        (OpKind::Conv, Attrs::Conv { kernel, stride, padding, .. }) => {
            let (c, h, w) = act(&input.dims)?;
            let [k, kc, r, s] = kernel.dims[..] else {
                return Err(Error::Shape(format!("node {}: kernel must be [K,C,R,S]", node.id)));
            };
            if kc != c {
                return Err(Error::Shape(format!(
                    "node {}: kernel expects {kc} channels, input has {c}",
                    node.id
                )));
            }
            if *stride == 0 {
                return Err(Error::Validation(format!("node {}: stride 0", node.id)));
            }
            let (hp, wp) = (h + 2 * padding, w + 2 * padding);
            if r > hp || s > wp {
                return Err(Error::Shape(format!(
                    "node {}: kernel {r}x{s} larger than padded input {hp}x{wp}",
                    node.id
                )));
            }
            Ok(TensorSpec::new(vec![k, (hp - r) / stride + 1, (wp - s) / stride + 1], bits))
        }
        (OpKind::Fc, Attrs::Fc { weight, .. }) => {
            let [k, n] = weight.dims[..] else {
                return Err(Error::Shape(format!("node {}: fc weight must be [K,N]", node.id)));
            };
            if n != input.numel() {
                return Err(Error::Shape(format!(
                    "node {}: fc expects {n} inputs, got {}",
                    node.id,
                    input.numel()
                )));
            }
            Ok(TensorSpec::new(vec![k, 1, 1], bits))
        }
        (OpKind::Relu, _) => Ok(input.clone()),
        (OpKind::Add, _) => {
            if ins.len() != 2 || ins[0].dims != ins[1].dims {
                return Err(Error::Shape(format!("node {}: add operands differ in shape", node.id)));
            }
            Ok(input.clone())
        }
        (OpKind::MaxPool | OpKind::AvgPool, Attrs::Pool { kernel, stride }) => {
            let (c, h, w) = act(&input.dims)?;
            if *kernel == 0 || *stride == 0 {
                return Err(Error::Validation(format!("node {}: zero pool kernel/stride", node.id)));
            }
            if *kernel > h || *kernel > w {
                return Err(Error::Shape(format!(
                    "node {}: pool window {kernel} larger than input {h}x{w}",
                    node.id
                )));
            }
            Ok(TensorSpec::new(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1], bits))
        }
        (k, a) => Err(Error::Validation(format!(
            "node {}: attrs {a:?} do not match kind {}",
            node.id,
            k.name()
        ))),
    }
}

/// Kahn ordering; ready nodes are released in ascending id order.
pub fn topo_order(graph: &CompGraph) -> Result<Vec<NodeId>> {
    let mut indeg: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for n in graph.nodes.values() {
        indeg.entry(n.id).or_insert(0);
        for r in &n.inputs {
            if let EdgeRef::Node(p) = r {
                if !graph.nodes.contains_key(p) {
                    return Err(Error::Validation(format!("dangling edge {p} -> {}", n.id)));
                }
                *indeg.entry(n.id).or_insert(0) += 1;
                succ.entry(*p).or_default().push(n.id);
            }
        }
    }
    let mut ready: BTreeSet<NodeId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&i, _)| i).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(id) = ready.pop_first() {
        order.push(id);
        for s in succ.get(&id).into_iter().flatten() {
            let d = indeg.get_mut(s).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(*s);
            }
        }
    }
    if order.len() != indeg.len() {
        let stuck = indeg.iter().find(|(i, _)| !order.contains(i)).map(|(&i, _)| i).unwrap();
        return Err(Error::Cycle(stuck));
    }
    Ok(order)
}
