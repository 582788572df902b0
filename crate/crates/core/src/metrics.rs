//! Flow accuracy metrics over `[H, W, 2]` fields.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("prediction {pred:?} and ground truth {gt:?} must both be [H, W, 2] with equal shapes")]
    Shape { pred: Vec<usize>, gt: Vec<usize> },
    #[error("mask has {got} entries for {expected} pixels")]
    MaskLength { expected: usize, got: usize },
    #[error("mask selects no pixels")]
    EmptyMask,
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// When a pixel counts as an outlier for F1-all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutlierRule {
    /// Error > 3 px and > 5% of the ground-truth magnitude (KITTI).
    #[default]
    And,
    /// Error > 3 px or > 5% of the ground-truth magnitude.
    Or,
}

/// Per-pixel `(‖pred − gt‖, ‖gt‖)`.
pub fn pixel_errors<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Vec<(f64, f64)>> {
    if pred.shape() != gt.shape() || pred.rank() != 3 || pred.shape()[2] != 2 {
        return Err(MetricError::Shape { pred: pred.shape().to_vec(), gt: gt.shape().to_vec() });
    }
    Ok(pred
        .data()
        .chunks(2)
        .zip(gt.data().chunks(2))
        .map(|(p, g)| {
            let (gu, gv) = (g[0].to_f64_lossy(), g[1].to_f64_lossy());
            let (du, dv) = (p[0].to_f64_lossy() - gu, p[1].to_f64_lossy() - gv);
            (du.hypot(dv), gu.hypot(gv))
        })
        .collect())
}

fn selected<'a>(errs: &'a [(f64, f64)], mask: Option<&'a [bool]>) -> Result<Vec<(f64, f64)>> {
    let out: Vec<_> = match mask {
        Some(m) => {
            if m.len() != errs.len() {
                return Err(MetricError::MaskLength { expected: errs.len(), got: m.len() });
            }
            errs.iter().zip(m).filter(|(_, &k)| k).map(|(e, _)| *e).collect()
        }
        None => errs.to_vec(),
    };
    if out.is_empty() {
        return Err(MetricError::EmptyMask);
    }
    Ok(out)
}

/// Mean end-point error over the masked pixels.
pub fn epe<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: Option<&[bool]>) -> Result<f64> {
    let errs = selected(&pixel_errors(pred, gt)?, mask)?;
    Ok(errs.iter().map(|e| e.0).sum::<f64>() / errs.len() as f64)
}

/// Percentage of masked pixels that are outliers under `rule`.
pub fn f1_all<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: Option<&[bool]>, rule: OutlierRule) -> Result<f64> {
    let errs = selected(&pixel_errors(pred, gt)?, mask)?;
    let bad = errs
        .iter()
        .filter(|(e, g)| {
            let (abs, rel) = (*e > 3.0, *e > 0.05 * g);
            match rule {
                OutlierRule::And => abs && rel,
                OutlierRule::Or => abs || rel,
            }
        })
        .count();
    Ok(100.0 * bad as f64 / errs.len() as f64)
}

/// EPE over pixels whose ground-truth magnitude exceeds 40 px; `None` when
/// there are none.
pub fn s40<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Option<f64>> {
    let errs: Vec<f64> = pixel_errors(pred, gt)?.into_iter().filter(|e| e.1 > 40.0).map(|e| e.0).collect();
    if errs.is_empty() {
        return Ok(None);
    }
    Ok(Some(errs.iter().sum::<f64>() / errs.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(h: usize, w: usize, u: f64, v: f64) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, 2], |i| if i % 2 == 0 { u } else { v }).unwrap()
    }

    #[test]
    fn epe_hand_values() {
        let gt = field(2, 3, 1.0, -1.0);
        assert_eq!(epe(&gt, &gt, None).unwrap(), 0.0);
        assert!((epe(&field(2, 3, 4.0, 3.0), &gt, None).unwrap() - 5.0).abs() < 1e-12);

        let mut pred = gt.clone();
        pred.data_mut()[0] += 10.0;
        let mask = [false, true, true, true, true, true];
        assert_eq!(epe(&pred, &gt, Some(&mask)).unwrap(), 0.0);
        assert_eq!(epe(&pred, &gt, Some(&[false; 6])), Err(MetricError::EmptyMask));
    }

    #[test]
    fn f1_dual_threshold() {
        let gt = field(2, 2, 100.0, 0.0);
        assert_eq!(f1_all(&field(2, 2, 104.0, 0.0), &gt, None, OutlierRule::And).unwrap(), 0.0);
        assert_eq!(f1_all(&field(2, 2, 104.0, 0.0), &gt, None, OutlierRule::Or).unwrap(), 100.0);
        let gt = field(2, 2, 10.0, 0.0);
        assert_eq!(f1_all(&field(2, 2, 14.0, 0.0), &gt, None, OutlierRule::And).unwrap(), 100.0);
        assert_eq!(f1_all(&gt, &gt, None, OutlierRule::And).unwrap(), 0.0);
    }

    #[test]
    fn s40_subset() {
        let gt = field(1, 2, 10.0, 0.0);
        assert_eq!(s40(&gt, &gt).unwrap(), None);
        let gt = Tensor::<f64>::from_f64(&[1, 2, 2], &[50.0, 0.0, 3.0, 0.0]).unwrap();
        let pred = Tensor::from_f64(&[1, 2, 2], &[52.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s40(&pred, &gt).unwrap(), Some(2.0));
    }

    fn flow(len: usize) -> impl Strategy<Value = Tensor<f64>> {
        prop::collection::vec(-20.0f64..20.0, len * 2).prop_map(move |v| Tensor::new(&[1, len, 2], v).unwrap())
    }

    proptest! {
        #[test]
        fn epe_is_a_metric((a, b, c) in (flow(6), flow(6), flow(6))) {
            let (ab, ba) = (epe(&a, &b, None).unwrap(), epe(&b, &a, None).unwrap());
            prop_assert!(ab >= 0.0 && (ab - ba).abs() < 1e-12);
            prop_assert_eq!(epe(&a, &a, None).unwrap(), 0.0);
            let (bc, ac) = (epe(&b, &c, None).unwrap(), epe(&a, &c, None).unwrap());
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn f1_bounded_and_monotone(gt in flow(8), err in flow(8), k in 1.0f64..4.0) {
            let pred = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + err.data()[i]).unwrap();
            let worse = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + k * err.data()[i]).unwrap();
            let f = f1_all(&pred, &gt, None, OutlierRule::And).unwrap();
            let g = f1_all(&worse, &gt, None, OutlierRule::And).unwrap();
            prop_assert!((0.0..=100.0).contains(&f));
            prop_assert!(g >= f);
        }

        #[test]
        fn s40_matches_brute_force(gt in prop::collection::vec(-80.0f64..80.0, 12), e in flow(6)) {
            let gt = Tensor::new(&[1, 6, 2], gt).unwrap();
            let pred = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + e.data()[i]).unwrap();
            let mask: Vec<bool> = gt.data().chunks(2).map(|g| g[0].hypot(g[1]) > 40.0).collect();
            let expect = epe(&pred, &gt, Some(&mask)).ok();
            prop_assert_eq!(s40(&pred, &gt).unwrap(), expect);
        }
    }
}
