//! Confidence BCE, displacement Smooth-L1 and their weighted sum, pooled over
//! the valid points of a batch of frames.

use crate::geometry::{extract_patch, Image, Patch, RadarPoint};
use crate::labelgen::PointLabels;

use super::config::{radar_features, RefinerConfig, RADAR_FEATURES};
use super::model::{backward, forward_traced};
use super::params::{RefinerParams, Weights};
use super::tensor::Matrix;
use super::RefinerError;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the BCE.
pub const BCE_CLAMP: f64 = 1e-7;

/// Training frame: `K` radar points with patches and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `K x 3`, see [`super::radar_features`].
    pub features: Matrix,
    pub patches: Vec<Patch>,
    pub conf_labels: Vec<f64>,
    pub disp_labels: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl Sample {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Training frame from projected returns, their labels and the camera
    /// image. Patches are centered on each return's pixel.
    pub fn from_labels(
        points: &[RadarPoint],
        labels: &[PointLabels],
        image: &Image,
        config: &RefinerConfig,
    ) -> Result<Self, RefinerError> {
        if points.len() != labels.len() {
            return Err(RefinerError::Shape(format!("{} points but {} labels", points.len(), labels.len())));
        }
        let (features, patches) = network_inputs(points, image, config)?;
        Ok(Self {
            features,
            patches,
            conf_labels: labels.iter().map(|l| f64::from(l.conf_label)).collect(),
            disp_labels: labels.iter().map(|l| [f64::from(l.disp_label.0), f64::from(l.disp_label.1)]).collect(),
            valid: labels.iter().map(|l| l.is_valid).collect(),
        })
    }

    fn check(&self) -> Result<(), RefinerError> {
        let k = self.features.rows;
        if self.patches.len() != k || self.conf_labels.len() != k || self.disp_labels.len() != k || self.valid.len() != k {
            return Err(RefinerError::Shape(format!("sample with {k} points has mismatched label/patch counts")));
        }
        Ok(())
    }
}

/// Radar features and image patches for projected returns, patches centered
/// on each return's pixel.
pub fn network_inputs(
    points: &[RadarPoint],
    image: &Image,
    config: &RefinerConfig,
) -> Result<(Matrix, Vec<Patch>), RefinerError> {
    if image.channels != config.patch_channels {
        return Err(RefinerError::Shape(format!(
            "image has {} channels, config expects {}",
            image.channels, config.patch_channels
        )));
    }
    let mut feats = Vec::with_capacity(points.len() * RADAR_FEATURES);
    let mut patches = Vec::with_capacity(points.len());
    for p in points {
        feats.extend(radar_features(p.u, p.v, p.depth, image.width, image.height));
        let patch = extract_patch(image, p.pixel(), (config.patch_size, config.patch_size))
            .map_err(|e| RefinerError::Shape(e.to_string()))?;
        patches.push(patch);
    }
    Ok((Matrix::from_vec(points.len(), RADAR_FEATURES, feats), patches))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub conf: f64,
    pub disp: f64,
    pub total: f64,
    pub valid_points: usize,
}

pub fn bce(label: f64, prob: f64) -> f64 {
    let p = prob.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Smooth-L1 with the transition at 1.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn valid_total(valid: &[bool]) -> Result<usize, RefinerError> {
    match valid.iter().filter(|v| **v).count() {
        0 => Err(RefinerError::NoValidPoints),
        n => Ok(n),
    }
}

/// Mean BCE over valid points.
pub fn loss_conf(pred: &[f64], labels: &[f64], valid: &[bool]) -> Result<f64, RefinerError> {
    if pred.len() != labels.len() || pred.len() != valid.len() {
        return Err(RefinerError::Shape("confidence loss inputs differ in length".into()));
    }
    let n = valid_total(valid)?;
    let sum: f64 = pred.iter().zip(labels).zip(valid).filter(|(_, v)| **v).map(|((p, y), _)| bce(*y, *p)).sum();
    Ok(sum / n as f64)
}

/// Mean over valid points of the Smooth-L1 summed over both components.
pub fn loss_disp(pred: &[[f64; 2]], labels: &[[f64; 2]], valid: &[bool]) -> Result<f64, RefinerError> {
    if pred.len() != labels.len() || pred.len() != valid.len() {
        return Err(RefinerError::Shape("displacement loss inputs differ in length".into()));
    }
    let n = valid_total(valid)?;
    let sum: f64 = pred
        .iter()
        .zip(labels)
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|((p, y), _)| smooth_l1(p[0] - y[0]) + smooth_l1(p[1] - y[1]))
        .sum();
    Ok(sum / n as f64)
}

pub fn loss_total(conf: f64, disp: f64, config: &RefinerConfig) -> f64 {
    config.lambda_conf * conf + config.lambda_disp * disp
}

fn run(params: &RefinerParams, batch: &[Sample], want_grad: bool) -> Result<(LossBreakdown, Option<Vec<f64>>), RefinerError> {
    let cfg = &params.config;
    for s in batch {
        s.check()?;
    }
    let n: usize = batch.iter().map(Sample::valid_count).sum();
    if n == 0 {
        return Err(RefinerError::NoValidPoints);
    }
    let inv_n = 1.0 / n as f64;
    let w = Weights::from_params(params);
    let mut grads = want_grad.then(|| w.zeros_like());
    let (mut conf, mut disp) = (0.0, 0.0);

    for s in batch {
        let (out, trace) = forward_traced(&w, cfg, &s.features, &s.patches)?;
        let k = s.features.rows;
        let mut d_logits = vec![0.0; k];
        let mut d_disp = Matrix::zeros(k, 2);
        for i in (0..k).filter(|i| s.valid[*i]) {
            let (y, p) = (s.conf_labels[i], out.confidence[i]);
            conf += bce(y, p);
            if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                d_logits[i] = cfg.lambda_conf * (p - y) * inv_n;
            }
            for c in 0..2 {
                let r = out.displacement[i][c] - s.disp_labels[i][c];
                disp += smooth_l1(r);
                d_disp.set(i, c, cfg.lambda_disp * smooth_l1_grad(r) * inv_n);
            }
        }
        if let Some(g) = grads.as_mut() {
            backward(&w, &trace, &d_logits, &d_disp, g);
        }
    }
    let (conf, disp) = (conf * inv_n, disp * inv_n);
    let loss = LossBreakdown { conf, disp, total: loss_total(conf, disp, cfg), valid_points: n };
    Ok((loss, grads.map(|g| g.to_flat())))
}

/// Pooled losses of a batch of frames.
pub fn evaluate_loss(params: &RefinerParams, batch: &[Sample]) -> Result<LossBreakdown, RefinerError> {
    Ok(run(params, batch, false)?.0)
}

/// Gradient of the weighted total loss w.r.t. the flat parameter vector.
pub fn gradient(params: &RefinerParams, batch: &[Sample]) -> Result<(LossBreakdown, Vec<f64>), RefinerError> {
    let (loss, grad) = run(params, batch, true)?;
    let grad = grad.expect("gradient requested");
    if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(RefinerError::NonFinite("gradient".into()));
    }
    Ok((loss, grad))
}
