//! Structured channel pruning: L1 ranking, per-layer sensitivity, greedy
//! ratio allocation, iterative prune/fine-tune rounds and dense rewriting.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use crate::blob::{self, BlobArray};
use crate::error::{Error, Result};
use crate::ir::{Graph, Op, Weights};

pub mod rewrite;
pub mod schedule;
pub mod sensitivity;

pub use rewrite::{kept_indices, rewrite_dense};
pub use schedule::{prune, PruneReport, PruneSpec, RoundReport};
pub use sensitivity::{sensitivity_analysis, SensitivityTable};

/// Keep-vector over output channels, per prunable node.
pub type ChannelMask = BTreeMap<String, Vec<bool>>;

/// Parameter layers that produce the graph output (directly or through
/// parameter-free ops); their widths are fixed by the task.
pub fn protected_outputs(g: &Graph) -> Result<BTreeSet<&str>> {
    let mut found = BTreeSet::new();
    let mut stack = vec![g.output_id()?];
    let mut seen = BTreeSet::new();
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        let node = g.node(id).unwrap();
        if node.op.has_params() {
            found.insert(id);
        } else if !matches!(node.op, Op::Input) {
            stack.extend(node.inputs.iter().map(String::as_str));
        }
    }
    Ok(found)
}

/// Prunable layers in id order: conv, transposed conv and dense layers that
/// neither feed the output nor appear in `protected`.
pub fn prunable_nodes(g: &Graph, protected: &BTreeSet<String>) -> Result<Vec<String>> {
    let outputs = protected_outputs(g)?;
    Ok(g.param_nodes()
        .into_iter()
        .filter(|n| !outputs.contains(n.id.as_str()) && !protected.contains(&n.id))
        .map(|n| n.id.clone())
        .collect())
}

/// L1 norm of each output channel's kernel slice.
pub fn channel_l1(weights: &Weights, node_id: &str) -> Result<Vec<f64>> {
    let p = weights
        .get(node_id)
        .ok_or_else(|| Error::Argument(format!("{node_id:?} is not a layer with prunable channels")))?;
    let out = *p.kernel.shape().last().unwrap();
    let mut norms = vec![0.0; out];
    for (i, v) in p.kernel.to_f64_vec().into_iter().enumerate() {
        norms[i % out] += v.abs();
    }
    Ok(norms)
}

/// Channel indices in ascending importance (L1 norm); ties keep index order.
pub fn rank_channels(weights: &Weights, node_id: &str) -> Result<Vec<usize>> {
    let norms = channel_l1(weights, node_id)?;
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    Ok(order)
}

/// Mask keeping all but the `remove` least important channels.
pub fn mask_removing(weights: &Weights, node_id: &str, remove: usize) -> Result<Vec<bool>> {
    let order = rank_channels(weights, node_id)?;
    let mut keep = vec![true; order.len()];
    for &c in order.iter().take(remove) {
        keep[c] = false;
    }
    Ok(keep)
}

/// SHA-256 over the manifest nodes and weight blob, identifying a baseline.
pub fn model_hash(g: &Graph, weights: &Weights) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&g.raw_nodes()?)?);
    let arrays: Vec<BlobArray> = weights
        .values()
        .flat_map(|p| [BlobArray::from_tensor(&p.kernel), BlobArray::from_tensor(&p.bias)])
        .collect();
    h.update(blob::encode(&arrays));
    Ok(hex::encode(h.finalize()))
}
