//! Binary cross-entropy.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before the logarithm.
pub const CLAMP: f64 = 1e-7;

/// Mean of `-[y ln p + (1 - y) ln(1 - p)]` over elements.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Argument(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let near = bce_loss(&[1.0 - 1e-7], &[1.0]).unwrap();
        assert!((near - 1e-7).abs() < 1e-9, "{near}");
        let pair = bce_loss(&[0.8, 0.2], &[1.0, 0.0]).unwrap();
        assert!((pair - 0.22314355131420976).abs() < 1e-12);
        // saturated predictions stay finite
        assert!(bce_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn empty_and_mismatch() {
        assert!(matches!(bce_loss(&[], &[]), Err(Error::Argument(_))));
        assert!(matches!(bce_loss(&[0.5], &[]), Err(Error::Argument(_))));
    }
}
