//! Parameter and FLOP accounting.
//!
//! Convention: convolutions, transposed convolutions and dense layers cost
//! two ops per multiply-accumulate; bias adds, activation evaluations and
//! pooling outputs cost one op per output element. Everything else is free.

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::Result;
use crate::ir::graph::{Graph, Op};
use crate::ir::shape::{infer_shapes, param_shapes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct NodeCost {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub per_node: IndexMap<String, NodeCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn params_of(&self, id: &str) -> u64 {
        self.per_node.get(id).map_or(0, |c| c.params)
    }
}

fn numel(s: &[usize]) -> u64 {
    s.iter().map(|&d| d as u64).product()
}

pub fn cost_report(g: &Graph) -> Result<CostReport> {
    let shapes = infer_shapes(g, &g.input_shape)?;
    let mut per_node = IndexMap::new();
    for (id, out) in &shapes {
        let node = g.node(id).unwrap();
        let out_elems = numel(out);
        let input = node.inputs.first().map(|i| shapes[i.as_str()].as_slice());
        let mut c = NodeCost::default();
        match &node.op {
            Op::Conv2D(_) | Op::TransposedConv2D(_) | Op::Dense(_) => {
                let input = input.unwrap();
                let (k, b) = param_shapes(&node.op, input).unwrap();
                c.params = numel(&k) + numel(&b);
                c.macs = match &node.op {
                    Op::Conv2D(_) => out_elems * numel(&k[..3]),
                    // every input pixel scatters a full kh x kw x out_c window
                    Op::TransposedConv2D(_) => numel(&input[1..3]) * numel(&k),
                    _ => numel(&k),
                };
                c.flops = 2 * c.macs + out_elems;
            }
            Op::Activation(_) | Op::MaxPool2D(_) => c.flops = out_elems,
            Op::Input | Op::Flatten | Op::Concat | Op::Dropout { .. } => {}
        }
        per_node.insert(id.clone(), c);
    }
    let total_params = per_node.values().map(|c| c.params).sum();
    let total_flops = per_node.values().map(|c| c.flops).sum();
    Ok(CostReport { per_node, total_params, total_flops })
}

pub fn count_params(g: &Graph) -> Result<u64> {
    Ok(cost_report(g)?.total_params)
}

pub fn count_flops(g: &Graph) -> Result<u64> {
    Ok(cost_report(g)?.total_flops)
}

/// Compact magnitude formatting: 68.29K, 1.94M, 6.25G.
pub fn human(n: u64) -> String {
    let x = n as f64;
    if x >= 1e9 {
        format!("{:.2}G", x / 1e9)
    } else if x >= 1e6 {
        format!("{:.2}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.2}K", x / 1e3)
    } else {
        n.to_string()
    }
}
