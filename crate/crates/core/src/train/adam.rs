//! Adam with bias correction.

use crate::error::{shape_err, Result};
use crate::ir::{LayerParams, Weights};
use crate::tensor::{Data, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, shaped like the parameters.
    pub first: Weights,
    pub second: Weights,
}

impl AdamState {
    pub fn new(params: &Weights) -> Result<Self> {
        let zeros = |p: &LayerParams| -> Result<LayerParams> {
            Ok(LayerParams { kernel: Tensor::zeros(p.kernel.shape())?, bias: Tensor::zeros(p.bias.shape())? })
        };
        let first: Weights = params.iter().map(|(k, p)| Ok((k.clone(), zeros(p)?))).collect::<Result<_>>()?;
        Ok(AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, second: first.clone(), first })
    }
}

/// One bias-corrected Adam update of every parameter present in `grads`.
pub fn adam_step(params: &mut Weights, grads: &Weights, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (id, g) in grads {
        let p = params.get_mut(id).ok_or_else(|| shape_err!("gradient for unknown layer {id:?}"))?;
        let m = state.first.get_mut(id).ok_or_else(|| shape_err!("no Adam moments for {id:?}"))?;
        let v = state.second.get_mut(id).expect("moments are created together");
        for (p, g, m, v) in [(&mut p.kernel, &g.kernel, &mut m.kernel, &mut v.kernel), (&mut p.bias, &g.bias, &mut m.bias, &mut v.bias)] {
            if p.shape() != g.shape() || m.shape() != p.shape() {
                return Err(shape_err!("{id:?}: parameter {:?}, gradient {:?}, moment {:?}", p.shape(), g.shape(), m.shape()));
            }
            let gv = g.to_f64_vec();
            let mut pv = p.to_f64_vec();
            let (mv, vv) = (m.as_f32_mut().expect("f32 moments"), v.as_f32_mut().expect("f32 moments"));
            for i in 0..pv.len() {
                let mi = state.beta1 * mv[i] as f64 + (1.0 - state.beta1) * gv[i];
                let vi = state.beta2 * vv[i] as f64 + (1.0 - state.beta2) * gv[i] * gv[i];
                mv[i] = mi as f32;
                vv[i] = vi as f32;
                pv[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            }
            let data = match p.data() {
                Data::F64(_) => Data::F64(pv),
                _ => Data::F32(pv.into_iter().map(|x| x as f32).collect()),
            };
            *p = Tensor::from_data(p.shape(), data, None)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(kernel: Vec<f32>, bias: Vec<f32>) -> Weights {
        let mut w = Weights::new();
        let (k, b) = (kernel.len(), bias.len());
        w.insert("l".into(), LayerParams {
            kernel: Tensor::from_f32(&[k], kernel).unwrap(),
            bias: Tensor::from_f32(&[b], bias).unwrap(),
        });
        w
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = single(vec![0.5, -0.25, 1.0], vec![0.0]);
        let g = single(vec![3.0, -0.01, 1e-3], vec![-2.0]);
        let mut st = AdamState::new(&p).unwrap();
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        let k = p["l"].kernel.as_f32().unwrap();
        for (after, (before, sign)) in k.iter().zip([(0.5f32, 1.0f32), (-0.25, -1.0), (1.0, 1.0)]) {
            let step = (before - after) / sign;
            assert!((step as f64 - 1e-3).abs() < 1e-6, "{step}");
        }
        assert!((p["l"].bias.as_f32().unwrap()[0] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = single(vec![0.3, -0.7], vec![0.1]);
        let before = p.clone();
        let g = single(vec![0.0, 0.0], vec![0.0]);
        let mut st = AdamState::new(&p).unwrap();
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut st, 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decreases_quadratic() {
        // f(w) = sum (w - 1)^2
        for lr in [1e-4, 1e-3, 1e-2] {
            let mut p = single(vec![3.0, -2.0, 0.5], vec![0.0]);
            let f = |p: &Weights| p["l"].kernel.to_f64_vec().iter().map(|w| (w - 1.0).powi(2)).sum::<f64>();
            let grad: Vec<f32> = p["l"].kernel.as_f32().unwrap().iter().map(|w| 2.0 * (w - 1.0)).collect();
            let g = single(grad, vec![0.0]);
            let mut st = AdamState::new(&p).unwrap();
            let before = f(&p);
            adam_step(&mut p, &g, &mut st, lr).unwrap();
            assert!(f(&p) < before);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = single(vec![0.0; 2], vec![0.0]);
        let g = single(vec![0.0; 3], vec![0.0]);
        let mut st = AdamState::new(&p).unwrap();
        assert!(adam_step(&mut p, &g, &mut st, 1e-3).is_err());
    }
}
