//! Iterative pruning to a target FLOP reduction.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Serialize;
use serde_json::json;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ir::{cost_report, Graph, Weights};
use crate::prune::sensitivity::removal_count;
use crate::prune::{mask_removing, model_hash, prunable_nodes, rewrite_dense, sensitivity_analysis, ChannelMask, SensitivityTable};
use crate::train::{evaluate_loss_acc, fit, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSpec {
    /// Target FLOP reduction in `[0, 1)`.
    pub target_pr: f64,
    pub steps: usize,
    pub fine_tune_epochs: usize,
    /// Extra layers never pruned (output layers are always protected).
    pub protected: BTreeSet<String>,
    pub trial_ratios: Vec<f64>,
    /// Largest fraction of a layer's original channels that may go.
    pub layer_cap: f64,
    /// Accuracy drops closer than this count as equally sensitive.
    pub tie_tolerance: f64,
}

impl Default for PruneSpec {
    fn default() -> Self {
        PruneSpec {
            target_pr: 0.5,
            steps: 3,
            fine_tune_epochs: 10,
            protected: BTreeSet::new(),
            trial_ratios: (1..=9).map(|i| i as f64 / 10.0).collect(),
            layer_cap: 0.9,
            tie_tolerance: 0.005,
        }
    }
}

impl PruneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_pr) {
            return Err(Error::Argument(format!("pruning ratio {} outside [0, 1)", self.target_pr)));
        }
        if self.steps == 0 {
            return Err(Error::Argument("pruning needs at least one round".into()));
        }
        if !(self.layer_cap > 0.0 && self.layer_cap < 1.0) {
            return Err(Error::Argument(format!("layer cap {} outside (0, 1)", self.layer_cap)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub target_flop_reduction: f64,
    pub flop_reduction: f64,
    pub param_reduction: f64,
    pub val_acc_before: f64,
    pub val_acc_after: f64,
    #[serde(skip)]
    pub widths: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub baseline_hash: String,
    pub target_pr: f64,
    pub baseline_flops: u64,
    pub baseline_params: u64,
    pub flops: u64,
    pub params: u64,
    pub rounds: Vec<RoundReport>,
    pub sensitivity: Option<SensitivityTable>,
}

impl PruneReport {
    pub fn flop_reduction(&self) -> f64 {
        1.0 - self.flops as f64 / self.baseline_flops as f64
    }

    pub fn param_reduction(&self) -> f64 {
        1.0 - self.params as f64 / self.baseline_params as f64
    }

    /// One row per round.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rounds {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Provenance section stored in the pruned model's manifest.
    pub fn to_json(&self) -> serde_json::Value {
        let widths = self.rounds.last().map(|r| r.widths.clone()).unwrap_or_default();
        json!({
            "baseline_hash": self.baseline_hash,
            "target_pr": self.target_pr,
            "baseline_flops": self.baseline_flops,
            "baseline_params": self.baseline_params,
            "flops": self.flops,
            "params": self.params,
            "flop_reduction": self.flop_reduction(),
            "param_reduction": self.param_reduction(),
            "widths": widths,
            "rounds": self.rounds,
        })
    }
}

fn with_widths(g: &Graph, widths: &BTreeMap<String, usize>) -> Graph {
    let mut g = g.clone();
    for (id, &w) in widths {
        g.node_mut(id).unwrap().op.set_out_channels(w);
    }
    g
}

/// Greedy per-layer allocation: repeatedly advance the least sensitive layer
/// to its next trial ratio (ties broken by the larger combined FLOP and
/// parameter saving, then by id) until the projected FLOP reduction reaches
/// `target`; the final step is trimmed channel by channel to avoid
/// overshooting.
fn allocate(
    g0: &Graph,
    original: &BTreeMap<String, usize>,
    current: &BTreeMap<String, usize>,
    table: &SensitivityTable,
    spec: &PruneSpec,
    target: f64,
) -> Result<BTreeMap<String, usize>> {
    let base = cost_report(g0)?;
    let (f0, p0) = (base.total_flops as f64, base.total_params as f64);
    let cost = |w: &BTreeMap<String, usize>| -> Result<(f64, f64)> {
        let c = cost_report(&with_widths(g0, w))?;
        Ok((c.total_flops as f64, c.total_params as f64))
    };
    let mut levels: Vec<f64> = table.rows.values().next().map(|r| r.iter().map(|x| x.0).collect()).unwrap_or_default();
    levels.retain(|&r| r > 0.0 && r <= spec.layer_cap + 1e-12);
    let mut widths = current.clone();
    loop {
        let (f, p) = cost(&widths)?;
        if 1.0 - f / f0 >= target {
            return Ok(widths);
        }
        let mut best: Option<(f64, f64, String, usize)> = None;
        let mut candidates = Vec::new();
        for (id, &c0) in original {
            let now = widths[id];
            let Some(&r) = levels.iter().find(|&&r| c0 - removal_count(c0, r) < now) else { continue };
            let nw = c0 - removal_count(c0, r);
            let mut trial = widths.clone();
            trial.insert(id.clone(), nw);
            let (tf, tp) = cost(&trial)?;
            candidates.push((table.drop_at(id, r), (f - tf) / f0 + (p - tp) / p0, id.clone(), nw));
        }
        let Some(min_drop) = candidates.iter().map(|c| c.0).min_by(f64::total_cmp) else {
            let worst = original.keys().max_by_key(|id| cost_report(g0).map(|c| c.per_node[id.as_str()].flops).unwrap_or(0));
            return Err(Error::Prune {
                layer: worst.cloned().unwrap_or_default(),
                reason: format!(
                    "FLOP reduction {:.3} unreachable with every layer at its {:.0}% cap (reached {:.3})",
                    target,
                    spec.layer_cap * 100.0,
                    1.0 - f / f0
                ),
            });
        };
        for c in candidates {
            if c.0 > min_drop + spec.tie_tolerance {
                continue;
            }
            let better = match &best {
                None => true,
                Some(b) => c.1 > b.1 || (c.1 == b.1 && c.2 < b.2),
            };
            if better {
                best = Some(c);
            }
        }
        let (_, _, id, nw) = best.unwrap();
        let prev = widths[&id];
        widths.insert(id.clone(), nw);
        if 1.0 - cost(&widths)?.0 / f0 >= target {
            // largest width in [nw, prev) that still meets the target
            let (mut lo, mut hi) = (nw, prev - 1);
            while lo < hi {
                let mid = (lo + hi).div_ceil(2);
                widths.insert(id.clone(), mid);
                if 1.0 - cost(&widths)?.0 / f0 >= target {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            widths.insert(id, lo);
            return Ok(widths);
        }
    }
}

/// Sensitivity-guided iterative pruning with fine-tuning between rounds.
/// Round `k` of `n` aims at `target_pr * k / n` FLOP reduction relative to
/// the baseline; sensitivity is measured once, on the baseline.
pub fn prune(
    g: &Graph,
    weights: &Weights,
    spec: &PruneSpec,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Graph, Weights, PruneReport)> {
    spec.validate()?;
    let base = cost_report(g)?;
    let mut report = PruneReport {
        baseline_hash: model_hash(g, weights)?,
        target_pr: spec.target_pr,
        baseline_flops: base.total_flops,
        baseline_params: base.total_params,
        flops: base.total_flops,
        params: base.total_params,
        rounds: Vec::new(),
        sensitivity: None,
    };
    if spec.target_pr == 0.0 {
        return Ok((g.clone(), weights.clone(), report));
    }
    let table = sensitivity_analysis(g, weights, val_set, &spec.trial_ratios, &spec.protected)?;
    let original: BTreeMap<String, usize> = prunable_nodes(g, &spec.protected)?
        .into_iter()
        .map(|id| {
            let w = g.node(&id).unwrap().op.out_channels().unwrap();
            (id, w)
        })
        .collect();
    let (mut cur_g, mut cur_w) = (g.clone(), weights.clone());
    let mut widths = original.clone();
    for k in 1..=spec.steps {
        let target = spec.target_pr * k as f64 / spec.steps as f64;
        widths = allocate(g, &original, &widths, &table, spec, target)?;
        let mut masks = ChannelMask::new();
        for (id, &w) in &widths {
            let now = cur_g.node(id).unwrap().op.out_channels().unwrap();
            if w < now {
                masks.insert(id.clone(), mask_removing(&cur_w, id, now - w)?);
            }
        }
        (cur_g, cur_w) = rewrite_dense(&cur_g, &cur_w, &masks)?;
        let (_, before) = evaluate_loss_acc(&cur_g, &cur_w, val_set, None)?;
        let after = if spec.fine_tune_epochs > 0 {
            let ft = TrainConfig {
                max_epochs: spec.fine_tune_epochs,
                patience: spec.fine_tune_epochs,
                qat_enabled: false,
                ..cfg.clone()
            };
            let (w, h) = fit(&cur_g, cur_w, train_set, val_set, &ft, None)?;
            cur_w = w;
            h.best().map_or(before, |e| e.val_acc)
        } else {
            before
        };
        let c = cost_report(&cur_g)?;
        report.flops = c.total_flops;
        report.params = c.total_params;
        report.rounds.push(RoundReport {
            round: k,
            target_flop_reduction: target,
            flop_reduction: report.flop_reduction(),
            param_reduction: report.param_reduction(),
            val_acc_before: before,
            val_acc_after: after,
            widths: widths.clone(),
        });
    }
    report.sensitivity = Some(table);
    Ok((cur_g, cur_w, report))
}
