//! Dense rewriting: physically removes masked output channels and the
//! matching input slices of every consumer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ir::shape::infer_shapes;
use crate::ir::{Graph, LayerParams, Op, Weights};
use crate::prune::{protected_outputs, ChannelMask};
use crate::tensor::{Data, Tensor};

fn prune_err(layer: &str, reason: impl Into<String>) -> Error {
    Error::Prune { layer: layer.to_string(), reason: reason.into() }
}

/// For every node, the original indices (along its last axis) that survive
/// the masks. Flatten outputs list NHWC positions `pixel * C + channel`.
pub fn kept_indices(g: &Graph, masks: &ChannelMask) -> Result<BTreeMap<String, Vec<usize>>> {
    let shapes = infer_shapes(g, &g.input_shape)?;
    let outputs = protected_outputs(g)?;
    for (id, keep) in masks {
        let node = g.node(id).ok_or_else(|| prune_err(id, "no such node"))?;
        let width = node.op.out_channels().filter(|_| node.op.has_params()).ok_or_else(|| prune_err(id, "not a prunable layer"))?;
        if keep.len() != width {
            return Err(prune_err(id, format!("mask has {} entries for {width} channels", keep.len())));
        }
        if !keep.iter().any(|&k| k) {
            return Err(prune_err(id, "mask removes every channel"));
        }
        if outputs.contains(id.as_str()) && keep.iter().any(|&k| !k) {
            return Err(prune_err(id, "the output layer cannot be pruned"));
        }
    }
    let mut kept: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for id in g.topo_order()? {
        let node = g.node(id).unwrap();
        let width = *shapes[id].last().unwrap();
        let k = match &node.op {
            Op::Input => (0..width).collect(),
            Op::Conv2D(_) | Op::TransposedConv2D(_) | Op::Dense(_) => match masks.get(id) {
                Some(m) => m.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect(),
                None => (0..width).collect(),
            },
            Op::Concat => {
                let mut out = Vec::new();
                let mut offset = 0;
                for i in &node.inputs {
                    out.extend(kept[i].iter().map(|&c| offset + c));
                    offset += shapes[i.as_str()][3];
                }
                out
            }
            Op::Flatten => {
                let s = &shapes[node.inputs[0].as_str()];
                let (pixels, c) = (s[1] * s[2], s[3]);
                let ch = &kept[&node.inputs[0]];
                (0..pixels).flat_map(|p| ch.iter().map(move |&k| p * c + k)).collect()
            }
            Op::MaxPool2D(_) | Op::Dropout { .. } | Op::Activation(_) => kept[&node.inputs[0]].clone(),
        };
        kept.insert(id.to_string(), k);
    }
    Ok(kept)
}

/// Keeps rows `rows` of the second-to-last axis and columns `cols` of the
/// last axis of a `[..., in, out]` array.
fn select<T: Copy>(v: &[T], shape: &[usize], rows: &[usize], cols: &[usize]) -> Vec<T> {
    let (n_in, n_out) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let lead = v.len() / (n_in * n_out);
    let mut out = Vec::with_capacity(lead * rows.len() * cols.len());
    for l in 0..lead {
        for &r in rows {
            let row = &v[(l * n_in + r) * n_out..][..n_out];
            out.extend(cols.iter().map(|&c| row[c]));
        }
    }
    out
}

fn select_tensor(t: &Tensor, rows: &[usize], cols: &[usize]) -> Result<Tensor> {
    let s = t.shape();
    let mut shape = s.to_vec();
    let data = if s.len() == 1 {
        shape[0] = cols.len();
        match t.data() {
            Data::F32(v) => Data::F32(cols.iter().map(|&c| v[c]).collect()),
            Data::F64(v) => Data::F64(cols.iter().map(|&c| v[c]).collect()),
            Data::I8(v) => Data::I8(cols.iter().map(|&c| v[c]).collect()),
        }
    } else {
        let n = shape.len();
        shape[n - 2] = rows.len();
        shape[n - 1] = cols.len();
        match t.data() {
            Data::F32(v) => Data::F32(select(v, s, rows, cols)),
            Data::F64(v) => Data::F64(select(v, s, rows, cols)),
            Data::I8(v) => Data::I8(select(v, s, rows, cols)),
        }
    };
    Tensor::from_data(&shape, data, t.quant())
}

/// Removes masked channels; consumers lose the matching input slices,
/// through pass-through ops, concat offsets and NHWC flatten positions.
pub fn rewrite_dense(g: &Graph, weights: &Weights, masks: &ChannelMask) -> Result<(Graph, Weights)> {
    let kept = kept_indices(g, masks)?;
    let mut out_g = g.clone();
    let mut out_w = Weights::new();
    for n in g.param_nodes() {
        let p = weights.get(&n.id).ok_or_else(|| Error::ModelIo(format!("missing weights for {:?}", n.id)))?;
        let rows = &kept[&n.inputs[0]];
        let cols = &kept[&n.id];
        let kernel = select_tensor(&p.kernel, rows, cols)?;
        let bias = select_tensor(&p.bias, &[], cols)?;
        out_w.insert(n.id.clone(), LayerParams { kernel, bias });
        out_g.node_mut(&n.id).unwrap().op.set_out_channels(cols.len());
    }
    infer_shapes(&out_g, &out_g.input_shape)?;
    Ok((out_g, out_w))
}
