//! Quantize-then-dequantize in float, plus the table of per-tensor
//! parameters that says where it applies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::{ActivationKind, Graph, Op};
use crate::tensor::{Data, QuantParams, Real, Tensor};

/// Per-tensor parameters for activations (keyed by the producing node) and
/// kernels (keyed by the owning node). Bias grids are derived, not stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantTable {
    pub activations: BTreeMap<String, QuantParams>,
    pub weights: BTreeMap<String, QuantParams>,
}

impl QuantTable {
    /// Parameters governing the output of `id`, following pass-through ops
    /// back to the node that produced the values.
    pub fn activation_for(&self, g: &Graph, id: &str) -> Option<QuantParams> {
        quant_source(g, id).and_then(|s| self.activations.get(s).copied())
    }

    /// Exponent of the bias grid for `id`: kernel exponent plus input exponent.
    pub fn bias_exponent(&self, g: &Graph, id: &str) -> Option<i32> {
        let w = self.weights.get(id)?;
        let input = &g.node(id)?.inputs[0];
        Some(w.exponent + self.activation_for(g, input)?.exponent)
    }
}

/// Ops whose output is requantized to its own exponent.
pub fn is_quant_point(op: &Op) -> bool {
    matches!(op, Op::Input | Op::Conv2D(_) | Op::TransposedConv2D(_) | Op::Dense(_) | Op::Concat)
}

/// The quant point whose parameters describe the output of `id`. Sigmoid
/// outputs are float probabilities and have none.
pub fn quant_source<'g>(g: &'g Graph, id: &str) -> Option<&'g str> {
    let mut node = g.node(id)?;
    loop {
        if is_quant_point(&node.op) {
            return Some(node.id.as_str());
        }
        match node.op {
            Op::Activation(ActivationKind::Sigmoid) => return None,
            _ => node = g.node(&node.inputs[0])?,
        }
    }
}

/// Applies fake quantization in place. `pass` receives the straight-through
/// mask (true inside the representable range). With `clip_only` the rounding
/// is skipped, leaving the clipping surrogate the STE differentiates.
pub(crate) fn fake_quant_slice<T: Real>(x: &mut [T], qp: QuantParams, pass: Option<&mut Vec<bool>>, clip_only: bool) {
    let (lo, hi) = qp.range();
    let (lo, hi) = (T::of(lo), T::of(hi));
    let up = T::of(2f64.powi(qp.exponent));
    let down = T::of(qp.scale());
    let (qmin, qmax) = (T::of(QuantParams::QMIN as f64), T::of(QuantParams::QMAX as f64));
    if let Some(p) = pass {
        p.clear();
        p.extend(x.iter().map(|&v| v >= lo && v <= hi));
    }
    for v in x.iter_mut() {
        *v = if clip_only {
            v.max(lo).min(hi)
        } else {
            (*v * up).round().max(qmin).min(qmax) * down
        };
    }
}

/// Rounds onto the grid `2^-exponent` without clamping (int32 bias grid).
pub(crate) fn grid_round_slice<T: Real>(x: &mut [T], exponent: i32) {
    let up = T::of(2f64.powi(exponent));
    let down = T::of(2f64.powi(-exponent));
    for v in x.iter_mut() {
        *v = (*v * up).round() * down;
    }
}

/// `clamp(round_half_away(x / s), -128, 127) * s`, elementwise.
pub fn fake_quant(x: &Tensor, qp: QuantParams) -> Tensor {
    match x.data() {
        Data::F64(v) => {
            let mut v = v.clone();
            fake_quant_slice(&mut v, qp, None, false);
            f64::wrap(x.shape(), v)
        }
        _ => {
            let mut v = x.to_f32_vec();
            fake_quant_slice(&mut v, qp, None, false);
            f32::wrap(x.shape(), v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_and_grid_points_fixed() {
        for e in [-3, 0, 4, 7] {
            let qp = QuantParams::new(e);
            let z = fake_quant(&Tensor::from_f32(&[1], vec![0.0]).unwrap(), qp);
            assert_eq!(z.as_f32().unwrap()[0], 0.0);
            let s = qp.scale();
            let pts: Vec<f64> = (-128..=127).map(|k| k as f64 * s).collect();
            let t = Tensor::from_f64(&[256], pts.clone()).unwrap();
            assert_eq!(fake_quant(&t, qp).as_f64().unwrap(), pts.as_slice());
        }
    }

    #[test]
    fn saturates() {
        let qp = QuantParams::new(6);
        let t = Tensor::from_f64(&[2], vec![10.0, -10.0]).unwrap();
        assert_eq!(fake_quant(&t, qp).as_f64().unwrap(), &[127.0 / 64.0, -2.0]);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let qp = QuantParams::new(0);
        let t = Tensor::from_f64(&[4], vec![0.5, -0.5, 2.5, -2.5]).unwrap();
        assert_eq!(fake_quant(&t, qp).as_f64().unwrap(), &[1.0, -1.0, 3.0, -3.0]);
    }

    proptest! {
        #[test]
        fn rounding_error_bounded(e in -4i32..10, u in -1.0f64..1.0) {
            let qp = QuantParams::new(e);
            let s = qp.scale();
            let x = u * 127.0 * s;
            let t = Tensor::from_f64(&[1], vec![x]).unwrap();
            let q = fake_quant(&t, qp).as_f64().unwrap()[0];
            prop_assert!((x - q).abs() <= s / 2.0 + 1e-15);
        }
    }
}
