//! Weighted sequence loss over the per-iteration flow predictions.

use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::{Result, TensorError};

pub const DEFAULT_GAMMA: f64 = 0.8;

/// `Σ_i γ^{N−i} · mean_pixels(|Δu| + |Δv|)` over predictions `V⁰ … Vᴺ`
/// (all at the resolution of `gt`).
pub fn sequence_loss<'t, T: Scalar>(flows: &[Var<'t, T>], gt: Var<'t, T>, gamma: f64) -> Result<Var<'t, T>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(TensorError::InvalidArgument(format!("gamma must be in (0, 1], got {gamma}")));
    }
    let n = flows.len().checked_sub(1).ok_or_else(|| TensorError::InvalidArgument("no flow predictions".into()))?;
    let s = gt.shape();
    let pixels = s[..s.len().saturating_sub(1)].iter().product::<usize>().max(1);
    let mut total: Option<Var<'t, T>> = None;
    for (i, f) in flows.iter().enumerate() {
        let w = gamma.powi((n - i) as i32) / pixels as f64;
        let term = f.sub(gt)?.abs().sum().scale(T::from_f64_lossy(w));
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one flow"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    fn field(u: f64, v: f64) -> Tensor<f64> {
        Tensor::from_fn(&[2, 3, 2], |i| if i % 2 == 0 { u } else { v }).unwrap()
    }

    #[test]
    fn hand_values() {
        let tape = Tape::new();
        let gt = tape.constant(field(1.0, 2.0));
        let exact = sequence_loss(&[gt, gt], gt, 0.8).unwrap();
        assert_eq!(exact.value().item().unwrap(), 0.0);

        // N = 1: V⁰ exact, V¹ off by (1, 0) → 0.8·0 + 1·1
        let off = tape.constant(field(2.0, 2.0));
        let l = sequence_loss(&[gt, off], gt, 0.8).unwrap();
        assert!((l.value().item().unwrap() - 1.0).abs() < 1e-12);

        // N = 2 weights 0.64, 0.8, 1
        let l = sequence_loss(&[off, off, gt], gt, 0.8).unwrap();
        assert!((l.value().item().unwrap() - 1.44).abs() < 1e-12);
        let a = sequence_loss(&[off, gt, gt], gt, 0.8).unwrap().value().item().unwrap();
        let b = sequence_loss(&[gt, off, gt], gt, 0.8).unwrap().value().item().unwrap();
        assert!((a / b - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let tape = Tape::new();
        let gt = tape.constant(field(0.0, 0.0));
        assert!(sequence_loss(&[gt], gt, 0.0).is_err());
        assert!(sequence_loss(&[gt], gt, 1.5).is_err());
        assert!(sequence_loss(&[], gt, 0.8).is_err());
        let wrong = tape.constant(Tensor::zeros(&[3, 3, 2]).unwrap());
        assert!(sequence_loss(&[wrong], gt, 0.8).is_err());
    }
}
