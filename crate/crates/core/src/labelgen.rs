//! Confidence and displacement supervision for projected radar returns,
//! derived from sparse LiDAR depth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{RadarPoint, SparseDepthImage};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("radar range must be positive and finite, got {0}")]
    NonPositiveRange(f64),
    #[error("invalid label parameters: {0}")]
    InvalidParams(String),
}

/// Range-dependent depth agreement tolerance (meters).
pub fn adaptive_threshold(depth: f64) -> Result<f64, LabelError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(LabelError::NonPositiveRange(depth));
    }
    Ok(if depth < 30.0 {
        0.5
    } else if depth <= 50.0 {
        0.75
    } else {
        1.0
    })
}

/// Window sizes are `(height, width)`, all odd.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelParams {
    pub conf_window: (usize, usize),
    pub min_count: usize,
    pub search_window: (usize, usize),
    pub inner_window: (usize, usize),
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            conf_window: (5, 5),
            min_count: 3,
            search_window: (35, 35),
            inner_window: (5, 5),
        }
    }
}

impl LabelParams {
    pub fn validate(&self) -> Result<(), LabelError> {
        let odd = |(h, w): (usize, usize)| h % 2 == 1 && w % 2 == 1;
        if !odd(self.conf_window) || !odd(self.search_window) || !odd(self.inner_window) {
            return Err(LabelError::InvalidParams("window sizes must be odd".into()));
        }
        if self.inner_window.0 > self.search_window.0 || self.inner_window.1 > self.search_window.1 {
            return Err(LabelError::InvalidParams("inner window larger than search window".into()));
        }
        if self.min_count == 0 {
            return Err(LabelError::InvalidParams("min_count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfidenceLabel {
    pub label: u8,
    /// At least one valid LiDAR pixel in the neighborhood.
    pub valid: bool,
    pub conforming: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisplacementLabel {
    /// `(du, dv)` from the projected pixel to the best window center.
    pub offset: (i32, i32),
    pub count: usize,
    /// No window held a conforming pixel; the offset is then `(0, 0)`.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointLabels {
    pub conf_label: u8,
    pub disp_label: (i32, i32),
    pub is_valid: bool,
    pub conf_count: usize,
    pub disp_count: usize,
    pub disp_degenerate: bool,
}

#[inline]
fn conforming(gt: &SparseDepthImage, x: i64, y: i64, depth: f64, tol: f64) -> bool {
    matches!(gt.get(x, y), Some(d) if d > 0.0 && (d - depth).abs() < tol)
}

pub fn confidence_label(
    p: &RadarPoint,
    gt: &SparseDepthImage,
    params: &LabelParams,
) -> Result<ConfidenceLabel, LabelError> {
    let tol = adaptive_threshold(p.depth)?;
    let (px, py) = p.pixel();
    let (hh, hw) = ((params.conf_window.0 / 2) as i64, (params.conf_window.1 / 2) as i64);
    let mut any = false;
    let mut count = 0;
    for y in py - hh..=py + hh {
        for x in px - hw..=px + hw {
            if let Some(d) = gt.get(x, y) {
                any = true;
                if (d - p.depth).abs() < tol {
                    count += 1;
                }
            }
        }
    }
    Ok(ConfidenceLabel { label: u8::from(count >= params.min_count), valid: any, conforming: count })
}

/// Slides the inner window over every in-image center of the search window
/// and returns the offset of the center holding the most conforming pixels.
/// Ties go to the smallest squared offset, then to row-major scan order.
pub fn displacement_label(
    p: &RadarPoint,
    gt: &SparseDepthImage,
    params: &LabelParams,
) -> Result<DisplacementLabel, LabelError> {
    let tol = adaptive_threshold(p.depth)?;
    let (px, py) = p.pixel();
    let (sh, sw) = ((params.search_window.0 / 2) as i64, (params.search_window.1 / 2) as i64);
    let (ih, iw) = ((params.inner_window.0 / 2) as i64, (params.inner_window.1 / 2) as i64);

    // Summed-area table over the region any inner window can touch.
    let (y0, x0) = (py - sh - ih, px - sw - iw);
    let rows = (2 * (sh + ih) + 1) as usize;
    let cols = (2 * (sw + iw) + 1) as usize;
    let mut sat = vec![0u32; (rows + 1) * (cols + 1)];
    for r in 0..rows {
        let mut run = 0u32;
        for c in 0..cols {
            run += u32::from(conforming(gt, x0 + c as i64, y0 + r as i64, p.depth, tol));
            sat[(r + 1) * (cols + 1) + c + 1] = sat[r * (cols + 1) + c + 1] + run;
        }
    }
    let window_sum = |cy: i64, cx: i64| -> u32 {
        let (r0, c0) = ((cy - ih - y0) as usize, (cx - iw - x0) as usize);
        let (r1, c1) = (r0 + 2 * ih as usize + 1, c0 + 2 * iw as usize + 1);
        sat[r1 * (cols + 1) + c1] + sat[r0 * (cols + 1) + c0]
            - sat[r0 * (cols + 1) + c1]
            - sat[r1 * (cols + 1) + c0]
    };

    let mut best: Option<(u32, i64, (i64, i64))> = None;
    for dv in -sh..=sh {
        let cy = py + dv;
        if cy < 0 || cy as usize >= gt.height {
            continue;
        }
        for du in -sw..=sw {
            let cx = px + du;
            if cx < 0 || cx as usize >= gt.width {
                continue;
            }
            let count = window_sum(cy, cx);
            let dist = du * du + dv * dv;
            let better = match best {
                None => true,
                Some((bc, bd, _)) => count > bc || (count == bc && dist < bd),
            };
            if better {
                best = Some((count, dist, (du, dv)));
            }
        }
    }
    Ok(match best {
        Some((count, _, (du, dv))) if count > 0 => DisplacementLabel {
            offset: (du as i32, dv as i32),
            count: count as usize,
            degenerate: false,
        },
        _ => DisplacementLabel { offset: (0, 0), count: 0, degenerate: true },
    })
}

/// Labels every point in input order.
pub fn build_labels(
    points: &[RadarPoint],
    gt: &SparseDepthImage,
    params: &LabelParams,
) -> Result<Vec<PointLabels>, LabelError> {
    params.validate()?;
    points
        .iter()
        .map(|p| {
            let conf = confidence_label(p, gt, params)?;
            let disp = displacement_label(p, gt, params)?;
            Ok(PointLabels {
                conf_label: conf.label,
                disp_label: disp.offset,
                is_valid: conf.valid,
                conf_count: conf.conforming,
                disp_count: disp.count,
                disp_degenerate: disp.degenerate,
            })
        })
        .collect()
}
