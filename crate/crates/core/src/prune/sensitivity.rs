//! Per-layer pruning sensitivity.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::data::Dataset;
use crate::error::Result;
use crate::ir::{Graph, Weights};
use crate::prune::{mask_removing, prunable_nodes, rewrite_dense, ChannelMask};
use crate::train::evaluate_loss_acc;

/// Accuracy drop (fraction, baseline minus pruned) per layer and ratio.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityTable {
    pub baseline_accuracy: f64,
    pub rows: BTreeMap<String, Vec<(f64, f64)>>,
}

impl SensitivityTable {
    /// Piecewise-linear drop at `ratio`, anchored at (0, 0) and held flat
    /// beyond the largest measured ratio.
    pub fn drop_at(&self, layer: &str, ratio: f64) -> f64 {
        let Some(row) = self.rows.get(layer) else { return 0.0 };
        let (mut x0, mut y0) = (0.0, 0.0);
        for &(x1, y1) in row {
            if ratio <= x1 {
                return if x1 > x0 { y0 + (y1 - y0) * (ratio - x0) / (x1 - x0) } else { y1 };
            }
            (x0, y0) = (x1, y1);
        }
        y0
    }
}

/// Channels removed from a layer of width `width` at `ratio`; at least one
/// channel always survives.
pub fn removal_count(width: usize, ratio: f64) -> usize {
    ((ratio * width as f64).round() as usize).min(width.saturating_sub(1))
}

/// Prunes each layer alone at each ratio (lowest-L1 channels first) and
/// measures the accuracy drop on `eval_set`.
pub fn sensitivity_analysis(
    g: &Graph,
    weights: &Weights,
    eval_set: &Dataset,
    trial_ratios: &[f64],
    protected: &BTreeSet<String>,
) -> Result<SensitivityTable> {
    let (_, baseline) = evaluate_loss_acc(g, weights, eval_set, None)?;
    let mut ratios = trial_ratios.to_vec();
    ratios.sort_by(f64::total_cmp);
    let mut rows = BTreeMap::new();
    for id in prunable_nodes(g, protected)? {
        let width = weights[&id].bias.numel();
        let mut row = Vec::with_capacity(ratios.len());
        for &r in &ratios {
            let remove = removal_count(width, r);
            let drop = if remove == 0 {
                0.0
            } else {
                let mut masks = ChannelMask::new();
                masks.insert(id.clone(), mask_removing(weights, &id, remove)?);
                let (pg, pw) = rewrite_dense(g, weights, &masks)?;
                baseline - evaluate_loss_acc(&pg, &pw, eval_set, None)?.1
            };
            row.push((r, drop));
        }
        rows.insert(id, row);
    }
    Ok(SensitivityTable { baseline_accuracy: baseline, rows })
}
