//! Training: reverse-mode gradients, Adam, binary cross-entropy with L2
//! penalty, early stopping and quantization-aware fine-tuning.

use std::io::Write;

use serde::Serialize;

use crate::data::{augment_record, Dataset, Record};
use crate::error::{Error, Result};
use crate::ir::{init_params, ActivationKind, Graph, LayerParams, Op, Weights};
use crate::quant::QuantTable;
use crate::rng::Rng;
use crate::runtime::{forward_with, predict, predict_fake_quant, ForwardOptions, Mode};
use crate::tensor::Tensor;

pub mod adam;
pub mod backward;
pub mod loss;

pub use adam::{adam_step, AdamState};
pub use backward::{backward, backward_from, Gradients};
pub use loss::bce_loss;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fine-tune with fake quantization; `fit` then needs a quant table.
    pub qat_enabled: bool,
    pub augmentation_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 30,
            batch_size: 32,
            seed: 0,
            qat_enabled: false,
            augmentation_enabled: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Argument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Argument(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs)));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation loss.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.epochs {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Loss and accuracy of one inference output against its target.
fn sample_metrics(pred: &Tensor, target: &Tensor) -> Result<(f64, usize, usize)> {
    let (p, y) = (pred.to_f64_vec(), target.to_f64_vec());
    let loss = bce_loss(&p, &y)?;
    let correct = p.iter().zip(&y).filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5)).count();
    Ok((loss, correct, p.len()))
}

/// Mean BCE and element-wise accuracy (threshold 0.5) over a dataset, with
/// fake quantization when a table is given.
pub fn evaluate_loss_acc(g: &Graph, w: &Weights, ds: &Dataset, quant: Option<&QuantTable>) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Argument("empty evaluation split".into()));
    }
    let (mut loss, mut correct, mut total) = (0.0, 0, 0);
    for r in &ds.records {
        let pred = match quant {
            Some(t) => predict_fake_quant(g, w, &r.input, t)?,
            None => predict(g, w, &r.input)?,
        };
        let (l, c, n) = sample_metrics(&pred, &r.target)?;
        loss += l;
        correct += c;
        total += n;
    }
    Ok((loss / ds.len() as f64, correct as f64 / total as f64))
}

/// Forward + backward for one record; returns its loss and gradients.
pub fn sample_gradients(
    g: &Graph,
    w: &Weights,
    r: &Record,
    quant: Option<&QuantTable>,
    rng: &mut Rng,
) -> Result<(f64, Gradients)> {
    let opts = ForwardOptions { mode: Mode::Training, rng: Some(rng), fake_quant: quant, ..Default::default() };
    let (pred, cache) = forward_with(g, w, &r.input, opts)?;
    let (p, y) = (pred.to_f64_vec(), r.target.to_f64_vec());
    let loss = bce_loss(&p, &y)?;
    let n = p.len() as f64;
    let out_id = g.output_id()?;
    let out_node = g.node(out_id).unwrap();
    let grads = if matches!(out_node.op, Op::Activation(ActivationKind::Sigmoid)) {
        // through the logit: d/dz = (p - y) / n
        let dz: Vec<f32> = p.iter().zip(&y).map(|(p, y)| ((p - y) / n) as f32).collect();
        backward_from(g, &cache, &out_node.inputs[0], &Tensor::from_f32(pred.shape(), dz)?)?
    } else {
        let dp: Vec<f32> = p
            .iter()
            .zip(&y)
            .map(|(&p, &y)| {
                let p = p.clamp(loss::CLAMP, 1.0 - loss::CLAMP);
                ((p - y) / (p * (1.0 - p)) / n) as f32
            })
            .collect();
        backward(g, &cache, &Tensor::from_f32(pred.shape(), dp)?)?
    };
    Ok((loss, grads))
}

/// Trains from a seeded Glorot initialisation.
pub fn train(g: &Graph, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<(Weights, TrainHistory)> {
    let init = init_params(g, &mut Rng::new(cfg.seed).fork(0))?;
    fit(g, init, train_set, val_set, cfg, None)
}

/// Mini-batch Adam from `init` with early stopping on validation loss;
/// returns the best-epoch weights.
pub fn fit(
    g: &Graph,
    init: Weights,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    quant: Option<&QuantTable>,
) -> Result<(Weights, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Argument("training and validation splits must be non-empty".into()));
    }
    let quant = match (cfg.qat_enabled, quant) {
        (true, None) => return Err(Error::Argument("QAT enabled but no quantization table given".into())),
        (true, q) => q,
        (false, _) => None,
    };
    let base = Rng::new(cfg.seed);
    let mut w = init;
    let mut state = AdamState::new(&w)?;
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, w.clone());
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        base.fork(2 * epoch as u64 + 1).shuffle(&mut order);
        let mut noise = base.fork(2 * epoch as u64 + 2);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Gradients> = None;
            for &i in batch {
                let rec = &train_set.records[i];
                let aug;
                let rec = if cfg.augmentation_enabled {
                    aug = augment_record(rec, &mut noise);
                    &aug
                } else {
                    rec
                };
                let (l, grads) = sample_gradients(g, &w, rec, quant, &mut noise)?;
                epoch_loss += l;
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => add_into(acc, &grads),
                }
            }
            let mut mean = sum.expect("non-empty batch");
            scale(&mut mean, 1.0 / batch.len() as f32);
            adam_step(&mut w, &mean, &mut state, cfg.learning_rate)?;
        }
        let (val_loss, val_acc) = evaluate_loss_acc(g, &w, val_set, quant)?;
        history.epochs.push(EpochRecord { epoch, train_loss: epoch_loss / train_set.len() as f64, val_loss, val_acc });
        if val_loss < best.0 {
            best = (val_loss, w.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.1, history))
}

fn for_each_f32(a: &mut LayerParams, mut f: impl FnMut(&mut [f32], Option<&[f32]>), b: Option<&LayerParams>) {
    f(a.kernel.as_f32_mut().expect("f32 gradients"), b.map(|b| b.kernel.as_f32().expect("f32 gradients")));
    f(a.bias.as_f32_mut().expect("f32 gradients"), b.map(|b| b.bias.as_f32().expect("f32 gradients")));
}

fn add_into(acc: &mut Gradients, g: &Gradients) {
    for (id, a) in acc.iter_mut() {
        for_each_f32(a, |x, y| x.iter_mut().zip(y.unwrap()).for_each(|(x, y)| *x += y), Some(&g[id]));
    }
}

fn scale(acc: &mut Gradients, s: f32) {
    for a in acc.values_mut() {
        for_each_f32(a, |x, _| x.iter_mut().for_each(|x| *x *= s), None);
    }
}

#[cfg(test)]
mod tests;
