use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvParams {
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    #[serde(default)]
    pub l2_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransposedConvParams {
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    #[serde(default)]
    pub l2_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolParams {
    pub pool_h: usize,
    pub pool_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseParams {
    pub units: usize,
    #[serde(default)]
    pub l2_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Conv2D(ConvParams),
    TransposedConv2D(TransposedConvParams),
    MaxPool2D(PoolParams),
    Dense(DenseParams),
    Flatten,
    Concat,
    Dropout { rate: f64 },
    Activation(ActivationKind),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "Input",
            Op::Conv2D(_) => "Conv2D",
            Op::TransposedConv2D(_) => "TransposedConv2D",
            Op::MaxPool2D(_) => "MaxPool2D",
            Op::Dense(_) => "Dense",
            Op::Flatten => "Flatten",
            Op::Concat => "Concat",
            Op::Dropout { .. } => "Dropout",
            Op::Activation(_) => "Activation",
        }
    }

    /// Nodes that own a kernel and a bias.
    pub fn has_params(&self) -> bool {
        matches!(self, Op::Conv2D(_) | Op::TransposedConv2D(_) | Op::Dense(_))
    }

    pub fn out_channels(&self) -> Option<usize> {
        match self {
            Op::Conv2D(p) => Some(p.out_channels),
            Op::TransposedConv2D(p) => Some(p.out_channels),
            Op::Dense(p) => Some(p.units),
            _ => None,
        }
    }

    pub fn set_out_channels(&mut self, n: usize) {
        match self {
            Op::Conv2D(p) => p.out_channels = n,
            Op::TransposedConv2D(p) => p.out_channels = n,
            Op::Dense(p) => p.units = n,
            _ => {}
        }
    }

    pub fn l2_lambda(&self) -> f64 {
        match self {
            Op::Conv2D(p) => p.l2_lambda,
            Op::TransposedConv2D(p) => p.l2_lambda,
            Op::Dense(p) => p.l2_lambda,
            _ => 0.0,
        }
    }

    pub fn set_l2_lambda(&mut self, lambda: f64) {
        match self {
            Op::Conv2D(p) => p.l2_lambda = lambda,
            Op::TransposedConv2D(p) => p.l2_lambda = lambda,
            Op::Dense(p) => p.l2_lambda = lambda,
            _ => {}
        }
    }

    fn params_json(&self) -> serde_json::Value {
        use serde_json::{json, to_value};
        match self {
            Op::Input | Op::Flatten | Op::Concat => json!({}),
            Op::Conv2D(p) => to_value(p).unwrap(),
            Op::TransposedConv2D(p) => to_value(p).unwrap(),
            Op::MaxPool2D(p) => to_value(p).unwrap(),
            Op::Dense(p) => to_value(p).unwrap(),
            Op::Dropout { rate } => json!({ "rate": rate }),
            Op::Activation(a) => json!({ "function": a }),
        }
    }

    fn from_json(kind: &str, params: serde_json::Value) -> Result<Op> {
        fn de<T: serde::de::DeserializeOwned>(kind: &str, v: serde_json::Value) -> Result<T> {
            serde_json::from_value(v).map_err(|e| Error::ModelIo(format!("bad params for {kind}: {e}")))
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Rate {
            rate: f64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Func {
            function: ActivationKind,
        }
        Ok(match kind {
            "Input" => Op::Input,
            "Flatten" => Op::Flatten,
            "Concat" => Op::Concat,
            "Conv2D" => Op::Conv2D(de(kind, params)?),
            "TransposedConv2D" => Op::TransposedConv2D(de(kind, params)?),
            "MaxPool2D" => Op::MaxPool2D(de(kind, params)?),
            "Dense" => Op::Dense(de(kind, params)?),
            "Dropout" => Op::Dropout { rate: de::<Rate>(kind, params)?.rate },
            "Activation" => Op::Activation(de::<Func>(kind, params)?.function),
            other => return Err(Error::ModelIo(format!("unknown node kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawNode {
    id: String,
    kind: String,
    params: serde_json::Value,
    inputs: Vec<String>,
}

impl From<&NodeSpec> for RawNode {
    fn from(n: &NodeSpec) -> Self {
        RawNode { id: n.id.clone(), kind: n.op.kind().into(), params: n.op.params_json(), inputs: n.inputs.clone() }
    }
}

impl TryFrom<RawNode> for NodeSpec {
    type Error = Error;
    fn try_from(r: RawNode) -> Result<Self> {
        Ok(NodeSpec { op: Op::from_json(&r.kind, r.params)?, id: r.id, inputs: r.inputs })
    }
}

/// Directed acyclic layer graph. Nodes are kept in insertion order, which for
/// the builders is also a valid topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub arch_name: String,
    pub input_shape: Vec<usize>,
    nodes: IndexMap<String, NodeSpec>,
}

impl Graph {
    pub fn new(arch_name: impl Into<String>, input_shape: Vec<usize>) -> Self {
        Graph { arch_name: arch_name.into(), input_shape, nodes: IndexMap::new() }
    }

    /// Appends a node. Inputs must already exist, so graphs built this way
    /// are acyclic by construction.
    pub fn add(&mut self, id: impl Into<String>, op: Op, inputs: &[&str]) -> Result<String> {
        let id = id.into();
        if self.nodes.contains_key(&id) {
            return Err(Error::Arch(format!("duplicate node id {id:?}")));
        }
        for i in inputs {
            if !self.nodes.contains_key(*i) {
                return Err(Error::Arch(format!("node {id:?} references unknown input {i:?}")));
            }
        }
        let node = NodeSpec { id: id.clone(), op, inputs: inputs.iter().map(|s| s.to_string()).collect() };
        check_arity(&node)?;
        self.nodes.insert(id.clone(), node);
        Ok(id)
    }

    /// Builds a graph from nodes in arbitrary order, validating structure.
    pub fn from_nodes(arch_name: &str, input_shape: Vec<usize>, nodes: Vec<NodeSpec>) -> Result<Self> {
        let mut map = IndexMap::new();
        for n in nodes {
            check_arity(&n)?;
            if map.insert(n.id.clone(), n).is_some() {
                return Err(Error::Arch("duplicate node id".into()));
            }
        }
        let g = Graph { arch_name: arch_name.into(), input_shape, nodes: map };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for n in self.nodes.values() {
            for i in &n.inputs {
                if !self.nodes.contains_key(i) {
                    return Err(Error::Arch(format!("node {:?} references unknown input {i:?}", n.id)));
                }
            }
        }
        let inputs = self.nodes.values().filter(|n| n.op == Op::Input).count();
        if inputs != 1 {
            return Err(Error::Arch(format!("expected exactly one Input node, found {inputs}")));
        }
        self.topo_order()?;
        self.output_id()?;
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut NodeSpec> {
        self.nodes.get_mut(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_id(&self) -> Result<&str> {
        self.nodes
            .values()
            .find(|n| n.op == Op::Input)
            .map(|n| n.id.as_str())
            .ok_or_else(|| Error::Arch("graph has no Input node".into()))
    }

    /// Map from node id to the ids that consume it, in consumer order.
    pub fn consumers(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = self.nodes.keys().map(|k| (k.as_str(), vec![])).collect();
        for n in self.nodes.values() {
            for i in &n.inputs {
                if let Some(v) = out.get_mut(i.as_str()) {
                    v.push(n.id.as_str());
                }
            }
        }
        out
    }

    /// The unique node nobody consumes.
    pub fn output_id(&self) -> Result<&str> {
        let consumers = self.consumers();
        let sinks: Vec<&str> = consumers.iter().filter(|(_, c)| c.is_empty()).map(|(k, _)| *k).collect();
        match sinks.as_slice() {
            [one] => Ok(one),
            _ => Err(Error::Arch(format!("expected exactly one terminal node, found {sinks:?}"))),
        }
    }

    /// Kahn's algorithm; among ready nodes the smallest id goes first.
    pub fn topo_order(&self) -> Result<Vec<&str>> {
        let mut indegree: BTreeMap<&str, usize> =
            self.nodes.values().map(|n| (n.id.as_str(), n.inputs.len())).collect();
        let consumers = self.consumers();
        let mut ready: BinaryHeap<Reverse<&str>> =
            indegree.iter().filter(|(_, &d)| d == 0).map(|(k, _)| Reverse(*k)).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for &c in &consumers[id] {
                let d = indegree.get_mut(c).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck: BTreeSet<&str> = indegree.iter().filter(|(_, &d)| d > 0).map(|(k, _)| *k).collect();
            return Err(Error::Arch(format!("graph has a cycle through {stuck:?}")));
        }
        Ok(order)
    }

    /// Parameterized nodes in id order.
    pub fn param_nodes(&self) -> Vec<&NodeSpec> {
        let mut v: Vec<&NodeSpec> = self.nodes.values().filter(|n| n.op.has_params()).collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    pub(crate) fn raw_nodes(&self) -> Result<Vec<RawNode>> {
        Ok(self.topo_order()?.into_iter().map(|id| RawNode::from(&self.nodes[id])).collect())
    }

    /// Stable structural fingerprint (FNV-1a over the canonical JSON form).
    pub fn fingerprint(&self) -> u64 {
        let raw: Vec<RawNode> = self.nodes.values().map(RawNode::from).collect();
        let text = serde_json::to_string(&(&self.arch_name, &self.input_shape, raw)).unwrap();
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
    }
}

fn check_arity(n: &NodeSpec) -> Result<()> {
    let ok = match n.op {
        Op::Input => n.inputs.is_empty(),
        Op::Concat => n.inputs.len() >= 2,
        _ => n.inputs.len() == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Arch(format!("node {:?} ({}) has {} inputs", n.id, n.op.kind(), n.inputs.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(units: usize) -> Op {
        Op::Dense(DenseParams { units, l2_lambda: 0.0 })
    }

    #[test]
    fn topo_ties_by_id() {
        let mut g = Graph::new("t", vec![1, 4]);
        g.add("in", Op::Input, &[]).unwrap();
        g.add("b", dense(2), &["in"]).unwrap();
        g.add("a", dense(2), &["in"]).unwrap();
        g.add("z", Op::Concat, &["b", "a"]).unwrap();
        assert_eq!(g.topo_order().unwrap(), vec!["in", "a", "b", "z"]);
        assert_eq!(g.output_id().unwrap(), "z");
    }

    #[test]
    fn cycle_detected() {
        let nodes = vec![
            NodeSpec { id: "in".into(), op: Op::Input, inputs: vec![] },
            NodeSpec { id: "a".into(), op: dense(1), inputs: vec!["b".into()] },
            NodeSpec { id: "b".into(), op: dense(1), inputs: vec!["a".into()] },
            NodeSpec { id: "c".into(), op: dense(1), inputs: vec!["in".into()] },
        ];
        let g = Graph::from_nodes("cyc", vec![1, 1], nodes);
        assert!(matches!(g, Err(Error::Arch(_))));
    }

    #[test]
    fn arity_enforced() {
        let mut g = Graph::new("t", vec![1, 4]);
        g.add("in", Op::Input, &[]).unwrap();
        assert!(g.add("c", Op::Concat, &["in"]).is_err());
        assert!(g.add("d", dense(1), &["missing"]).is_err());
    }

    #[test]
    fn unknown_kind_rejected() {
        let raw = RawNode { id: "x".into(), kind: "Softmax".into(), params: serde_json::json!({}), inputs: vec![] };
        assert!(matches!(NodeSpec::try_from(raw), Err(Error::ModelIo(_))));
    }
}
