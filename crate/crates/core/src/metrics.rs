//! Depth error metrics with a range cap. MAE, RMSE and SqRel are reported in
//! millimeters; AbsRel and δ1 are unitless.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::DepthImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no eligible pixel for cap {cap_m} m")]
    EmptyEvaluation { cap_m: f64 },
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("caps must be positive and ascending")]
    InvalidCaps,
}

pub const DELTA1_THRESHOLD: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cap_m: f64,
    pub mae_mm: f64,
    pub rmse_mm: f64,
    pub absrel: f64,
    pub sqrel: f64,
    pub delta1: f64,
    pub count: usize,
    /// Ground-truth pixels within the cap where the prediction was undefined.
    pub undefined_pred: usize,
}

/// Evaluates on pixels where the ground truth is valid with `0 < gt <= cap`
/// and the prediction is defined.
pub fn evaluate(pred: &DepthImage, gt: &DepthImage, cap_m: f64) -> Result<EvalReport, MetricsError> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(MetricsError::ShapeMismatch {
            pred: (pred.width, pred.height),
            gt: (gt.width, gt.height),
        });
    }
    let (mut abs, mut sq, mut absrel, mut sqrel) = (0.0, 0.0, 0.0, 0.0);
    let (mut inside, mut count, mut undefined) = (0usize, 0usize, 0usize);
    for i in 0..gt.depth.len() {
        let g = gt.depth[i];
        if !gt.valid[i] || !(g > 0.0) || g > cap_m {
            continue;
        }
        if !pred.valid[i] || !(pred.depth[i] > 0.0) {
            undefined += 1;
            continue;
        }
        let p = pred.depth[i];
        let (g_mm, diff_mm) = (g * 1000.0, (p - g) * 1000.0);
        abs += diff_mm.abs();
        sq += diff_mm * diff_mm;
        absrel += diff_mm.abs() / g_mm;
        sqrel += diff_mm * diff_mm / g_mm;
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            inside += 1;
        }
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::EmptyEvaluation { cap_m });
    }
    let n = count as f64;
    Ok(EvalReport {
        cap_m,
        mae_mm: abs / n,
        rmse_mm: (sq / n).sqrt(),
        absrel: absrel / n,
        sqrel: sqrel / n,
        delta1: inside as f64 / n,
        count,
        undefined_pred: undefined,
    })
}

pub fn evaluate_sweep(pred: &DepthImage, gt: &DepthImage, caps: &[f64]) -> Result<Vec<EvalReport>, MetricsError> {
    if caps.iter().any(|c| !(*c > 0.0)) || caps.windows(2).any(|w| w[1] < w[0]) {
        return Err(MetricsError::InvalidCaps);
    }
    caps.iter().map(|c| evaluate(pred, gt, *c)).collect()
}

/// Per-pixel `|pred - gt|` where both are defined, 0 elsewhere.
pub fn error_map(pred: &DepthImage, gt: &DepthImage) -> Result<Vec<f64>, MetricsError> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(MetricsError::ShapeMismatch {
            pred: (pred.width, pred.height),
            gt: (gt.width, gt.height),
        });
    }
    Ok((0..gt.depth.len())
        .map(|i| {
            if gt.valid[i] && pred.valid[i] {
                (pred.depth[i] - gt.depth[i]).abs()
            } else {
                0.0
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(depth: Vec<f64>) -> DepthImage {
        let w = depth.len();
        DepthImage::from_depth(w, 1, depth).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = img(vec![5.0, 10.0, 0.0, 42.0]);
        let r = evaluate(&gt, &gt, 80.0).unwrap();
        assert_eq!((r.mae_mm, r.rmse_mm, r.absrel, r.sqrel, r.delta1, r.count), (0.0, 0.0, 0.0, 0.0, 1.0, 3));
    }

    #[test]
    fn scaled_prediction() {
        let gt = img(vec![5.0, 10.0, 20.0]);
        let pred = img(gt.depth.iter().map(|d| d * 1.3).collect());
        let r = evaluate(&pred, &gt, 80.0).unwrap();
        assert!((r.absrel - 0.3).abs() < 1e-9);
        assert_eq!(r.delta1, 0.0);
        assert!((r.mae_mm - 0.3 * 35_000.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn undefined_pred_excluded_and_counted() {
        let gt = img(vec![5.0, 10.0]);
        let pred = img(vec![5.5, 0.0]);
        let r = evaluate(&pred, &gt, 80.0).unwrap();
        assert_eq!((r.count, r.undefined_pred), (1, 1));
        assert!((r.mae_mm - 500.0).abs() < 1e-9);
        assert!((r.sqrel - 250_000.0 / 5_000.0).abs() < 1e-9);
    }

    #[test]
    fn empty_evaluation_and_shape_errors() {
        let gt = img(vec![60.0, 70.0]);
        assert_eq!(evaluate(&gt, &gt, 50.0), Err(MetricsError::EmptyEvaluation { cap_m: 50.0 }));
        assert!(matches!(evaluate(&img(vec![1.0]), &gt, 80.0), Err(MetricsError::ShapeMismatch { .. })));
        assert_eq!(evaluate_sweep(&gt, &gt, &[80.0, 70.0]), Err(MetricsError::InvalidCaps));
    }

    #[test]
    fn sweep_with_all_near_gt_gives_identical_reports() {
        let gt = img(vec![5.0, 10.0, 45.0]);
        let pred = img(vec![5.2, 9.0, 47.0]);
        let r = evaluate_sweep(&pred, &gt, &[50.0, 70.0, 80.0]).unwrap();
        for x in &r[1..] {
            assert_eq!((x.mae_mm, x.rmse_mm, x.count), (r[0].mae_mm, r[0].rmse_mm, r[0].count));
        }
    }

    #[test]
    fn error_map_zero_where_undefined() {
        let gt = img(vec![5.0, 0.0, 8.0]);
        let pred = img(vec![6.0, 3.0, 0.0]);
        assert_eq!(error_map(&pred, &gt).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn identities(pairs in proptest::collection::vec((0.5f64..90.0, 0.5f64..90.0), 1..60)) {
            let gt = img(pairs.iter().map(|p| p.0).collect());
            let pred = img(pairs.iter().map(|p| p.1).collect());
            let caps = [50.0, 70.0, 80.0, 100.0];
            let mut last = 0;
            for cap in caps {
                match evaluate(&pred, &gt, cap) {
                    Ok(r) => {
                        prop_assert!(r.rmse_mm >= r.mae_mm * (1.0 - 1e-12));
                        prop_assert!(r.count >= last);
                        last = r.count;
                        prop_assert!(r.delta1 <= 1.0 && r.absrel >= 0.0 && r.sqrel >= 0.0);
                    }
                    Err(MetricsError::EmptyEvaluation { .. }) => prop_assert_eq!(last, 0),
                    Err(e) => prop_assert!(false, "{e}"),
                }
            }
            let a = evaluate(&pred, &gt, 1e9).unwrap();
            let b = evaluate(&gt, &pred, 1e9).unwrap();
            prop_assert_eq!(a.delta1, b.delta1);

            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            idx.reverse();
            let gt_r = img(idx.iter().map(|i| pairs[*i].0).collect());
            let pred_r = img(idx.iter().map(|i| pairs[*i].1).collect());
            let c = evaluate(&pred_r, &gt_r, 1e9).unwrap();
            prop_assert!((c.mae_mm - a.mae_mm).abs() <= 1e-9 * (1.0 + a.mae_mm));
            prop_assert_eq!(c.count, a.count);
        }
    }
}
