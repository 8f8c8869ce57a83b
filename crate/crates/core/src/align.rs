//! Radar screening and displacement refinement, then global scale/shift
//! alignment of monocular inverse depth with a threshold sweep.
//!
//! For each candidate threshold `t` the anchors whose sampled inverse depth
//! lies strictly inside `(0, t)` are fitted in closed form,
//! `1/d_radar ≈ alpha * inv + beta`. The candidate with the smallest residual
//! sum of squares wins and the aligned depth is `1 / (alpha * inv + beta)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pixel_of, DepthImage, RadarPoint};
use crate::refiner::RefinerOutput;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("no candidate threshold yields a feasible fit")]
    NoFeasibleThreshold,
    #[error("candidate threshold set is empty")]
    EmptyCandidates,
    #[error("no anchor samples a nonzero inverse depth")]
    NoAnchorSamples,
    #[error("{points} radar points but {outputs} network outputs")]
    LengthMismatch { points: usize, outputs: usize },
    #[error("invalid inverse depth map: {0}")]
    InvalidInverseDepth(String),
}

/// How an inverse depth map is read at a fractional anchor position.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    #[default]
    Nearest,
    /// Bilinear over the four surrounding pixels; 0 if any of them is zero or
    /// outside the image.
    Bilinear,
}

/// Dense, non-negative, up-to-affine inverse depth. Zeros mark sky/invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl InverseDepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, AlignError> {
        if values.len() != width * height {
            return Err(AlignError::InvalidInverseDepth(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(AlignError::InvalidInverseDepth(format!("value {v} is negative or non-finite")));
        }
        Ok(Self { width, height, values })
    }

    #[inline]
    pub fn get(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return 0.0;
        }
        self.values[y as usize * self.width + x as usize]
    }

    pub fn sample(&self, u: f64, v: f64, sampling: Sampling) -> f64 {
        match sampling {
            Sampling::Nearest => {
                let (x, y) = pixel_of(u, v);
                self.get(x, y)
            }
            Sampling::Bilinear => {
                let (x0, y0) = (u.floor(), v.floor());
                let (fx, fy) = (u - x0, v - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let corners = [
                    self.get(x0, y0),
                    self.get(x0 + 1, y0),
                    self.get(x0, y0 + 1),
                    self.get(x0 + 1, y0 + 1),
                ];
                if corners.iter().any(|c| *c == 0.0) {
                    return 0.0;
                }
                (1.0 - fy) * ((1.0 - fx) * corners[0] + fx * corners[1])
                    + fy * ((1.0 - fx) * corners[2] + fx * corners[3])
            }
        }
    }
}

/// A screened radar return at its refined image position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinedAnchor {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub confidence: f64,
    /// Index of the originating radar point.
    pub source: usize,
}

/// Keeps points with confidence `>= tau`, moves each by its predicted
/// displacement and drops anchors that leave the image.
pub fn screen_and_refine(
    points: &[RadarPoint],
    outputs: &RefinerOutput,
    tau: f64,
    width: usize,
    height: usize,
) -> Result<Vec<RefinedAnchor>, AlignError> {
    if outputs.confidence.len() != points.len() || outputs.displacement.len() != points.len() {
        return Err(AlignError::LengthMismatch { points: points.len(), outputs: outputs.confidence.len() });
    }
    let mut anchors = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let conf = outputs.confidence[i];
        if !(conf >= tau) || !(p.depth > 0.0) {
            continue;
        }
        let [du, dv] = outputs.displacement[i];
        let (u, v) = (p.u + du, p.v + dv);
        let (x, y) = pixel_of(u, v);
        if x < 0 || y < 0 || x as usize >= width || y as usize >= height {
            continue;
        }
        anchors.push(RefinedAnchor { u, v, depth: p.depth, confidence: conf, source: i });
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub alpha: f64,
    pub beta: f64,
    /// Sum of squared inverse-depth residuals.
    pub residual: f64,
}

/// Least-squares fit of `1/depth ≈ alpha * inv + beta` over `(inv, depth)`
/// pairs.
pub fn fit_affine(pairs: &[(f64, f64)]) -> Result<AffineFit, AlignError> {
    if pairs.len() < 2 {
        return Err(AlignError::DegenerateFit(format!("{} pairs, need at least 2", pairs.len())));
    }
    if let Some((x, d)) = pairs.iter().find(|(x, d)| !x.is_finite() || !(*d > 0.0) || !d.is_finite()) {
        return Err(AlignError::DegenerateFit(format!("invalid pair ({x}, {d})")));
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|(_, d)| 1.0 / d).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, d) in pairs {
        let (dx, dy) = (x - mean_x, 1.0 / d - mean_y);
        sxx += dx * dx;
        sxy += dx * dy;
    }
    // identical samples can leave a rounding-level spread around the mean
    if !(sxx > 0.0) || pairs.iter().all(|(x, _)| *x == pairs[0].0) {
        return Err(AlignError::DegenerateFit("inverse depth samples have zero variance".into()));
    }
    let alpha = sxy / sxx;
    let beta = mean_y - alpha * mean_x;
    let residual = pairs
        .iter()
        .map(|(x, d)| {
            let r = 1.0 / d - alpha * x - beta;
            r * r
        })
        .sum();
    Ok(AffineFit { alpha, beta, residual })
}

/// Indices of anchors whose sampled inverse depth lies strictly in `(0, t)`.
pub fn valid_set(anchors: &[RefinedAnchor], inv: &InverseDepthMap, t: f64, sampling: Sampling) -> Vec<usize> {
    anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            let s = inv.sample(a.u, a.v, sampling);
            s > 0.0 && s < t
        })
        .map(|(i, _)| i)
        .collect()
}

/// Result of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineAlignment {
    pub alpha: f64,
    pub beta: f64,
    pub t_star: f64,
    pub residual: f64,
    pub mean_residual: f64,
    pub inliers: usize,
    pub candidate_index: usize,
}

/// Fit for one candidate, or `None` when it is infeasible: fewer than two
/// inliers, zero variance, or an aligned inverse depth that is not positive
/// on some inlier.
pub fn fit_candidate(
    anchors: &[RefinedAnchor],
    inv: &InverseDepthMap,
    t: f64,
    sampling: Sampling,
) -> Option<(AffineFit, usize)> {
    let set = valid_set(anchors, inv, t, sampling);
    let pairs: Vec<(f64, f64)> = set
        .iter()
        .map(|i| (inv.sample(anchors[*i].u, anchors[*i].v, sampling), anchors[*i].depth))
        .collect();
    let fit = fit_affine(&pairs).ok()?;
    if pairs.iter().any(|(x, _)| !(fit.alpha * x + fit.beta > 0.0)) {
        return None;
    }
    Some((fit, set.len()))
}

/// Sweeps every candidate and keeps the lowest residual. Exact residual ties
/// go to the larger threshold, then to the earlier candidate.
pub fn select_threshold(
    anchors: &[RefinedAnchor],
    inv: &InverseDepthMap,
    candidates: &[f64],
    sampling: Sampling,
) -> Result<AffineAlignment, AlignError> {
    if candidates.is_empty() {
        return Err(AlignError::EmptyCandidates);
    }
    let mut best: Option<AffineAlignment> = None;
    for (idx, &t) in candidates.iter().enumerate() {
        let Some((fit, inliers)) = fit_candidate(anchors, inv, t, sampling) else { continue };
        let better = match &best {
            None => true,
            Some(b) => fit.residual < b.residual || (fit.residual == b.residual && t > b.t_star),
        };
        if better {
            best = Some(AffineAlignment {
                alpha: fit.alpha,
                beta: fit.beta,
                t_star: t,
                residual: fit.residual,
                mean_residual: fit.residual / inliers as f64,
                inliers,
                candidate_index: idx,
            });
        }
    }
    best.ok_or(AlignError::NoFeasibleThreshold)
}

/// Relative nudge applied to each decile so the strict upper bound of the
/// valid set still admits the decile value itself.
pub const CANDIDATE_NUDGE: f64 = 1e-9;

/// Nearest-rank deciles (10 %, 20 %, ..., 100 %) of the nonzero inverse depth
/// sampled at the anchors, each scaled by `1 + CANDIDATE_NUDGE`, deduplicated
/// and ascending.
pub fn default_candidates(
    inv: &InverseDepthMap,
    anchors: &[RefinedAnchor],
    sampling: Sampling,
) -> Result<Vec<f64>, AlignError> {
    let mut samples: Vec<f64> = anchors
        .iter()
        .map(|a| inv.sample(a.u, a.v, sampling))
        .filter(|s| *s > 0.0)
        .collect();
    if samples.is_empty() {
        return Err(AlignError::NoAnchorSamples);
    }
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let mut out: Vec<f64> = (1..=10)
        .map(|q| {
            let rank = (q * n).div_ceil(10).max(1);
            samples[rank - 1] * (1.0 + CANDIDATE_NUDGE)
        })
        .collect();
    out.dedup();
    Ok(out)
}

/// Metric depth recovered from the inverse depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDepth {
    pub depth: DepthImage,
    /// Pixels left undefined because the inverse depth was zero.
    pub zero_pixels: usize,
    /// Pixels left undefined because `alpha * inv + beta <= 0`.
    pub nonpositive_pixels: usize,
}

impl AlignedDepth {
    pub fn undefined_pixels(&self) -> usize {
        self.zero_pixels + self.nonpositive_pixels
    }
}

pub fn apply_alignment(inv: &InverseDepthMap, alignment: &AffineAlignment) -> AlignedDepth {
    let mut depth = DepthImage::empty(inv.width, inv.height);
    let (mut zero_pixels, mut nonpositive_pixels) = (0, 0);
    for (i, &m) in inv.values.iter().enumerate() {
        if m == 0.0 {
            zero_pixels += 1;
            continue;
        }
        let a = alignment.alpha * m + alignment.beta;
        let d = 1.0 / a;
        if !(a > 0.0) || !d.is_finite() {
            nonpositive_pixels += 1;
            continue;
        }
        depth.depth[i] = d;
        depth.valid[i] = true;
    }
    AlignedDepth { depth, zero_pixels, nonpositive_pixels }
}

/// JSON alignment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub alpha: f64,
    pub beta: f64,
    pub t_star: f64,
    pub residual: f64,
    pub mean_residual: f64,
    pub inliers: usize,
    pub anchors: usize,
    pub candidates: Vec<f64>,
    pub undefined_pixels: usize,
    pub nonpositive_pixels: usize,
}

/// Full sweep with the default candidate set.
pub fn align(
    anchors: &[RefinedAnchor],
    inv: &InverseDepthMap,
    sampling: Sampling,
) -> Result<(AffineAlignment, AlignedDepth, AlignmentReport), AlignError> {
    let candidates = default_candidates(inv, anchors, sampling)?;
    let alignment = select_threshold(anchors, inv, &candidates, sampling)?;
    let aligned = apply_alignment(inv, &alignment);
    let report = AlignmentReport {
        alpha: alignment.alpha,
        beta: alignment.beta,
        t_star: alignment.t_star,
        residual: alignment.residual,
        mean_residual: alignment.mean_residual,
        inliers: alignment.inliers,
        anchors: anchors.len(),
        candidates,
        undefined_pixels: aligned.undefined_pixels(),
        nonpositive_pixels: aligned.nonpositive_pixels,
    };
    Ok((alignment, aligned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn anchor(u: f64, v: f64, depth: f64) -> RefinedAnchor {
        RefinedAnchor { u, v, depth, confidence: 1.0, source: 0 }
    }

    #[test]
    fn screening_applies_offset_and_threshold() {
        let pts = [
            RadarPoint { position: Vector3::zeros(), u: 100.0, v: 50.0, depth: 10.0 },
            RadarPoint { position: Vector3::zeros(), u: 10.0, v: 5.0, depth: 12.0 },
            RadarPoint { position: Vector3::zeros(), u: 1.0, v: 1.0, depth: 12.0 },
        ];
        let out = RefinerOutput {
            confidence: vec![0.9, 0.3, 0.8],
            displacement: vec![[1.0, -2.0], [0.0, 0.0], [-5.0, 0.0]],
        };
        let a = screen_and_refine(&pts, &out, 0.5, 200, 100).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].u, a[0].v, a[0].source), (101.0, 48.0, 0));
        assert!(screen_and_refine(&pts[..2], &out, 0.5, 200, 100).is_err());
    }

    #[test]
    fn screening_mixed_batch_matches_elementwise_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<RadarPoint> = (0..200)
            .map(|_| RadarPoint {
                position: Vector3::zeros(),
                u: rng.random_range(0.0..64.0),
                v: rng.random_range(0.0..48.0),
                depth: rng.random_range(1.0..50.0),
            })
            .collect();
        let out = RefinerOutput {
            confidence: (0..200).map(|_| rng.random_range(0.0..1.0)).collect(),
            displacement: (0..200).map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)]).collect(),
        };
        let got = screen_and_refine(&pts, &out, 0.4, 64, 48).unwrap();
        let mut expected = Vec::new();
        for i in 0..200 {
            if out.confidence[i] < 0.4 {
                continue;
            }
            let u = pts[i].u + out.displacement[i][0];
            let v = pts[i].v + out.displacement[i][1];
            let (x, y) = ((u + 0.5).floor(), (v + 0.5).floor());
            if x >= 0.0 && y >= 0.0 && x < 64.0 && y < 48.0 {
                expected.push((i, u, v));
            }
        }
        let got: Vec<(usize, f64, f64)> = got.iter().map(|a| (a.source, a.u, a.v)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn exact_affine_pairs() {
        let pairs: Vec<(f64, f64)> = [0.02, 0.05, 0.1, 0.3].iter().map(|x| (*x, 1.0 / (2.0 * x + 0.1))).collect();
        let f = fit_affine(&pairs).unwrap();
        assert!((f.alpha - 2.0).abs() < 1e-12 && (f.beta - 0.1).abs() < 1e-12);
        assert!(f.residual < 1e-25);

        let pairs: Vec<(f64, f64)> = [2.0, 5.0, 9.0].iter().map(|d| (1.0 / d, *d)).collect();
        let f = fit_affine(&pairs).unwrap();
        assert!((f.alpha - 1.0).abs() < 1e-12 && f.beta.abs() < 1e-12);
    }

    #[test]
    fn degenerate_fits() {
        assert!(matches!(fit_affine(&[(0.1, 10.0)]), Err(AlignError::DegenerateFit(_))));
        assert!(matches!(fit_affine(&[(0.1, 10.0), (0.1, 12.0)]), Err(AlignError::DegenerateFit(_))));
    }

    #[test]
    fn valid_set_bounds() {
        let inv = InverseDepthMap::new(4, 1, vec![0.0, 0.1, 0.2, 0.3]).unwrap();
        let anchors: Vec<RefinedAnchor> = (0..4).map(|x| anchor(x as f64, 0.0, 5.0)).collect();
        assert_eq!(valid_set(&anchors, &inv, f64::MAX, Sampling::Nearest), vec![1, 2, 3]);
        assert!(valid_set(&anchors, &inv, 0.05, Sampling::Nearest).is_empty());
        assert_eq!(valid_set(&anchors, &inv, 0.2, Sampling::Nearest), vec![1]);
    }

    #[test]
    fn apply_alignment_reciprocal_and_undefined() {
        let inv = InverseDepthMap::new(3, 1, vec![0.05, 0.0, 0.01]).unwrap();
        let al = AffineAlignment {
            alpha: 1.0,
            beta: 0.0,
            t_star: 1.0,
            residual: 0.0,
            mean_residual: 0.0,
            inliers: 2,
            candidate_index: 0,
        };
        let out = apply_alignment(&inv, &al);
        assert!((out.depth.depth[0] - 20.0).abs() < 1e-12);
        assert!(!out.depth.valid[1]);
        assert_eq!(out.zero_pixels, 1);

        let neg = AffineAlignment { beta: -0.02, ..al };
        let out = apply_alignment(&inv, &neg);
        assert_eq!(out.nonpositive_pixels, 1);
        assert!(!out.depth.valid[2]);
    }

    #[test]
    fn candidates_for_identical_and_uniform_samples() {
        let inv = InverseDepthMap::new(3, 1, vec![0.2, 0.2, 0.2]).unwrap();
        let anchors: Vec<RefinedAnchor> = (0..3).map(|x| anchor(x as f64, 0.0, 5.0)).collect();
        let c = default_candidates(&inv, &anchors, Sampling::Nearest).unwrap();
        assert_eq!(c, vec![0.2 * (1.0 + 1e-9)]);
        assert_eq!(valid_set(&anchors, &inv, c[0], Sampling::Nearest).len(), 3);

        let vals: Vec<f64> = (1..=10).map(|i| i as f64 / 100.0).collect();
        let inv = InverseDepthMap::new(10, 1, vals.clone()).unwrap();
        let anchors: Vec<RefinedAnchor> = (0..10).map(|x| anchor(x as f64, 0.0, 5.0)).collect();
        let c = default_candidates(&inv, &anchors, Sampling::Nearest).unwrap();
        assert_eq!(c.len(), 10);
        for (c, v) in c.iter().zip(&vals) {
            assert_eq!(*c, v * (1.0 + 1e-9));
        }

        assert_eq!(default_candidates(&inv, &[], Sampling::Nearest), Err(AlignError::NoAnchorSamples));
    }

    #[test]
    fn single_feasible_candidate_wins() {
        let inv = InverseDepthMap::new(4, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let anchors: Vec<RefinedAnchor> = (0..4).map(|x| anchor(x as f64, 0.0, 1.0 / (0.1 * (x + 1) as f64))).collect();
        let al = select_threshold(&anchors, &inv, &[0.15, 0.35], Sampling::Nearest).unwrap();
        assert_eq!((al.candidate_index, al.inliers), (1, 3));
        assert_eq!(select_threshold(&anchors, &inv, &[0.15], Sampling::Nearest), Err(AlignError::NoFeasibleThreshold));
        assert_eq!(select_threshold(&anchors, &inv, &[], Sampling::Nearest), Err(AlignError::EmptyCandidates));
    }

    #[test]
    fn zero_residual_candidate_selected_and_ties_prefer_larger_t() {
        // First three anchors are exact; the fourth is an outlier.
        let inv = InverseDepthMap::new(4, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut anchors: Vec<RefinedAnchor> = (0..3).map(|x| anchor(x as f64, 0.0, 1.0 / (0.25 * (x + 1) as f64))).collect();
        anchors.push(anchor(3.0, 0.0, 50.0));
        let al = select_threshold(&anchors, &inv, &[0.25, 0.35, 0.5], Sampling::Nearest).unwrap();
        assert!(al.residual < 1e-25);
        assert!(al.candidate_index <= 1);

        // Two candidates produce the same inlier set and thus the same residual.
        let al = select_threshold(&anchors, &inv, &[0.31, 0.35, 0.5], Sampling::Nearest).unwrap();
        assert_eq!(al.t_star, 0.35);
    }

    #[test]
    fn bilinear_sampling() {
        let inv = InverseDepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((inv.sample(0.5, 0.5, Sampling::Bilinear) - 2.5).abs() < 1e-15);
        assert_eq!(inv.sample(1.5, 0.5, Sampling::Bilinear), 0.0);
        assert_eq!(inv.sample(0.6, 0.4, Sampling::Nearest), 2.0);
    }

    proptest! {
        #[test]
        fn residual_is_minimal_on_local_grid(
            raw in proptest::collection::vec((0.01f64..1.0, 1.0f64..80.0), 3..30),
        ) {
            let fit = fit_affine(&raw);
            prop_assume!(fit.is_ok());
            let fit = fit.unwrap();
            let sse = |a: f64, b: f64| raw.iter().map(|(x, d)| (1.0 / d - a * x - b).powi(2)).sum::<f64>();
            let (sa, sb) = (fit.alpha.abs().max(1e-3) * 1e-3, fit.beta.abs().max(1e-3) * 1e-3);
            for i in -50..=50 {
                for j in -50..=50 {
                    let other = sse(fit.alpha + i as f64 * sa, fit.beta + j as f64 * sb);
                    prop_assert!(fit.residual <= other + 1e-15 * (1.0 + other));
                }
            }
        }

        #[test]
        fn raising_tau_never_adds_anchors(
            confs in proptest::collection::vec(0.0f64..1.0, 1..40),
            t1 in 0.0f64..1.0, t2 in 0.0f64..1.0,
        ) {
            let pts: Vec<RadarPoint> = confs
                .iter()
                .enumerate()
                .map(|(i, _)| RadarPoint { position: Vector3::zeros(), u: i as f64, v: 0.0, depth: 5.0 })
                .collect();
            let out = RefinerOutput { confidence: confs.clone(), displacement: vec![[0.0, 0.0]; confs.len()] };
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let a = screen_and_refine(&pts, &out, lo, 64, 1).unwrap().len();
            let b = screen_and_refine(&pts, &out, hi, 64, 1).unwrap().len();
            prop_assert!(b <= a);
        }
    }
}
