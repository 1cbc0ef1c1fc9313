//! Max-abs calibration of power-of-two exponents.

use crate::error::{Error, Result};
use crate::ir::{Graph, Weights};
use crate::quant::fake::{is_quant_point, QuantTable};
use crate::runtime::{forward, Mode};
use crate::tensor::{QuantParams, Tensor};

/// Exponent used when a tensor is identically zero.
pub const ZERO_TENSOR_EXPONENT: i32 = 7;

/// Largest `f` with `max_abs * 2^f <= 127`, i.e. `floor(log2(127 / max_abs))`.
pub fn exponent_for(max_abs: f64) -> Result<i32> {
    if max_abs == 0.0 {
        return Ok(ZERO_TENSOR_EXPONENT);
    }
    if !max_abs.is_finite() {
        return Err(Error::Quant(format!("cannot calibrate a tensor with max |x| = {max_abs}")));
    }
    let mut f = (127.0 / max_abs).log2().floor() as i32;
    // correct the float log at exact powers of two
    while max_abs * 2f64.powi(f) > 127.0 {
        f -= 1;
    }
    while max_abs * 2f64.powi(f + 1) <= 127.0 {
        f += 1;
    }
    Ok(f)
}

fn max_abs(t: &Tensor) -> f64 {
    t.to_f64_vec().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Per-tensor parameters for every kernel and every quantized activation,
/// from float inference over `calib_inputs`.
pub fn calibrate(g: &Graph, weights: &Weights, calib_inputs: &[Tensor]) -> Result<QuantTable> {
    if calib_inputs.is_empty() {
        return Err(Error::Argument("calibration needs at least one input".into()));
    }
    let mut table = QuantTable::default();
    for n in g.param_nodes() {
        let p = weights.get(&n.id).ok_or_else(|| Error::ModelIo(format!("missing weights for {:?}", n.id)))?;
        table.weights.insert(n.id.clone(), QuantParams::new(exponent_for(max_abs(&p.kernel))?));
    }
    let points: Vec<&str> = g.nodes().filter(|n| is_quant_point(&n.op)).map(|n| n.id.as_str()).collect();
    let mut peaks = vec![0.0f64; points.len()];
    for x in calib_inputs {
        let (_, cache) = forward(g, weights, &x.to_f32(), Mode::Inference, None)?;
        for (peak, id) in peaks.iter_mut().zip(&points) {
            *peak = peak.max(max_abs(cache.output(id).expect("kept intermediates")));
        }
    }
    for (id, peak) in points.into_iter().zip(peaks) {
        table.activations.insert(id.to_string(), QuantParams::new(exponent_for(peak)?));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_architecture, init_params, Arch};
    use crate::rng::Rng;

    #[test]
    fn exponent_formula() {
        assert_eq!(exponent_for(1.0).unwrap(), 6);
        assert_eq!(exponent_for(127.0).unwrap(), 0);
        assert_eq!(exponent_for(0.0).unwrap(), 7);
        assert_eq!(exponent_for(127.5).unwrap(), -1);
        assert_eq!(exponent_for(0.99).unwrap(), 7);
        assert_eq!(exponent_for(1e-3).unwrap(), 16);
        assert!(exponent_for(f64::NAN).is_err());
        for m in [0.013, 0.5, 1.0, 3.7, 126.9, 127.0, 128.0, 1000.0] {
            let f = exponent_for(m).unwrap();
            assert!(m * 2f64.powi(f) <= 127.0 && m * 2f64.powi(f + 1) > 127.0, "{m}");
        }
    }

    #[test]
    fn covers_every_tensor() {
        let g = build_architecture(Arch::PatchNet);
        let w = init_params(&g, &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        let xs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_f32(&g.input_shape, (0..300).map(|_| rng.uniform(0.0, 1.0) as f32).collect()).unwrap())
            .collect();
        let t = calibrate(&g, &w, &xs).unwrap();
        assert_eq!(t.weights.len(), g.param_nodes().len());
        for n in g.nodes() {
            assert_eq!(t.activations.contains_key(&n.id), is_quant_point(&n.op), "{}", n.id);
        }
        // inputs in [0, 1) → exponent 6 or 7 depending on the peak
        assert!(matches!(t.activations["input"].exponent, 6 | 7));
        assert!(calibrate(&g, &w, &[]).is_err());
    }
}
