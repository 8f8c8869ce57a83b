//! Procedural scenes with exactly known depth: a ground plane plus boxes
//! resting on it, a monocular inverse depth corrupted by a planted affine map,
//! radar returns with planted outliers, and sparse LiDAR.
//!
//! The camera sits at the origin looking down +Z with +Y pointing down; the
//! ground is the plane `Y = camera_height`.

use std::path::Path;

use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::InverseDepthMap;
use crate::geometry::{CameraModel, DepthImage, GeometryError, Image, Patch, RadarPoint, RigidTransform};
use crate::io::{self, IoError};
use crate::labelgen::{adaptive_threshold, LabelParams};
use crate::refiner::{Matrix, RefinerConfig, Sample};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("scene has no visible surface within the depth range")]
    NoVisibleSurface,
    #[error("could not place radar return {index} after {attempts} attempts")]
    PlacementFailed { index: usize, attempts: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Margin kept between planted depths and the agreement threshold so labels
/// stay unambiguous after `f32` file round trips.
pub const LABEL_MARGIN: f64 = 0.01;
/// Uniform sub-pixel jitter applied to planted projections.
pub const PIXEL_JITTER: f64 = 0.25;
const MAX_ATTEMPTS: usize = 20_000;
const MONO_FLOOR: f64 = 1e-6;

const STREAM_SCENE: u64 = 1;
const STREAM_MONO: u64 = 2;
const STREAM_RADAR: u64 = 3;
const STREAM_LIDAR: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub camera: CameraModel,
    /// Row-major rotation of the radar-to-camera transform.
    pub extrinsic_rotation: [f64; 9],
    pub extrinsic_translation: [f64; 3],
    pub camera_height: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub boxes: usize,
    /// Planted corruption: `mono = a / depth + b + noise`.
    pub a: f64,
    pub b: f64,
    pub sigma_m: f64,
    pub radar_count: usize,
    pub sigma_r: f64,
    pub outlier_fraction: f64,
    /// Inclusive range of the larger of `|du|`, `|dv|` for outlier projections (pixels).
    pub outlier_offset: (u32, u32),
    pub lidar_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            camera: CameraModel { fx: 160.0, fy: 160.0, cx: 128.0, cy: 64.0, width: 256, height: 128 },
            // radar x forward, y left, z up
            extrinsic_rotation: [0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0],
            extrinsic_translation: [0.05, 0.3, -0.2],
            camera_height: 1.5,
            depth_min: 2.0,
            depth_max: 80.0,
            boxes: 6,
            a: 2.0,
            b: 0.05,
            sigma_m: 0.0,
            radar_count: 128,
            sigma_r: 0.05,
            outlier_fraction: 0.0,
            outlier_offset: (4, 12),
            lidar_fraction: 0.01,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        self.camera.validate()?;
        self.extrinsic()?;
        if !(self.a > 0.0) || !self.b.is_finite() {
            return bad("a must be positive and b finite");
        }
        if !(self.sigma_m >= 0.0) || !(self.sigma_r >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if 3.0 * self.sigma_r + LABEL_MARGIN >= 0.5 {
            return bad("sigma_r too large for unambiguous inlier labels");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1]");
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return bad("depth range must be positive and non-empty");
        }
        if !(self.camera_height > 0.0) {
            return bad("camera_height must be positive");
        }
        if self.outlier_offset.0 == 0 || self.outlier_offset.1 < self.outlier_offset.0 {
            return bad("outlier_offset must be a non-empty range of positive offsets");
        }
        if !(self.lidar_fraction > 0.0 && self.lidar_fraction <= 1.0) {
            return bad("lidar_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn extrinsic(&self) -> Result<RigidTransform, GeometryError> {
        RigidTransform::from_rows(self.extrinsic_rotation, self.extrinsic_translation)
    }
}

/// Axis-aligned box in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBox {
    /// Entry distance along `dir` from the origin (slab test).
    fn hit(&self, dir: &Vector3<f64>) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for k in 0..3 {
            if dir[k] == 0.0 {
                if self.min[k] > 0.0 || self.max[k] < 0.0 {
                    return None;
                }
                continue;
            }
            let (a, b) = (self.min[k] / dir[k], self.max[k] / dir[k]);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub config: SceneConfig,
    pub boxes: Vec<SceneBox>,
    /// Dense ground truth; sky pixels are invalid.
    pub gt: DepthImage,
    pub mono_inv: InverseDepthMap,
    pub image: Image,
    /// Returns in the radar frame.
    pub radar: Vec<Vector3<f64>>,
    pub outliers: Vec<bool>,
    pub lidar: DepthImage,
}

impl SyntheticFrame {
    pub fn radar_points(&self) -> Result<Vec<RadarPoint>, GeometryError> {
        crate::geometry::project_points(&self.radar, &self.config.extrinsic()?, &self.config.camera)
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            return sigma * z;
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn random_boxes(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<SceneBox> {
    (0..cfg.boxes)
        .map(|_| {
            let span = cfg.depth_max - cfg.depth_min;
            let z = rng.random_range(cfg.depth_min + 0.1 * span..cfg.depth_min + 0.75 * span);
            let x = rng.random_range(-0.3..0.3) * z;
            let (w, h, d) = (rng.random_range(1.0..6.0), rng.random_range(1.0..5.0), rng.random_range(1.0..6.0));
            SceneBox {
                min: [x - w / 2.0, cfg.camera_height - h, z],
                max: [x + w / 2.0, cfg.camera_height, z + d],
            }
        })
        .collect()
}

/// Z depth of the first surface along the ray through pixel `(x, y)`.
fn trace(cfg: &SceneConfig, boxes: &[SceneBox], x: usize, y: usize) -> Option<f64> {
    let cam = &cfg.camera;
    let dir = Vector3::new((x as f64 - cam.cx) / cam.fx, (y as f64 - cam.cy) / cam.fy, 1.0);
    let mut best = if dir.y > 0.0 { cfg.camera_height / dir.y } else { f64::INFINITY };
    for b in boxes {
        if let Some(t) = b.hit(&dir) {
            best = best.min(t);
        }
    }
    (best >= cfg.depth_min && best <= cfg.depth_max).then_some(best)
}

fn shade(cfg: &SceneConfig, x: usize, y: usize, depth: Option<f64>) -> f64 {
    let cam = &cfg.camera;
    match depth {
        None => 0.85 + 0.15 * (1.0 - y as f64 / cam.height as f64),
        Some(d) => {
            let p = cam.backproject(x as f64, y as f64, d);
            let cell = (p.x / 2.0).floor() + (p.y / 2.0).floor() + (p.z / 2.0).floor();
            let checker = if cell.rem_euclid(2.0) == 0.0 { 0.25 } else { 0.75 };
            0.6 * (-d / 30.0).exp() + 0.4 * checker
        }
    }
}

/// Bernoulli subsample of the valid pixels of `gt`.
pub fn sample_lidar(gt: &DepthImage, fraction: f64, seed: u64) -> DepthImage {
    let mut rng = stream(seed, STREAM_LIDAR);
    let mut out = DepthImage::empty(gt.width, gt.height);
    for i in 0..gt.depth.len() {
        if gt.valid[i] && (fraction >= 1.0 || rng.random_bool(fraction)) {
            out.depth[i] = gt.depth[i];
            out.valid[i] = true;
        }
    }
    out
}

struct Planted {
    position: Vector3<f64>,
    hits: Vec<usize>,
}

/// Sensor-frame position for a camera-frame target, plus its round-tripped
/// projection so every check below sees exactly what the label builder sees.
fn place(u: f64, v: f64, depth: f64, cfg: &SceneConfig, extr: &RigidTransform) -> Option<(Vector3<f64>, RadarPoint)> {
    let pos = extr.inverse().apply(&cfg.camera.backproject(u, v, depth));
    let pc = extr.apply(&pos);
    let (pu, pv) = cfg.camera.project(&pc)?;
    Some((pos, RadarPoint { position: pos, u: pu, v: pv, depth: pc.z }))
}

fn neighborhood(gt: &DepthImage, center: (i64, i64), half: (i64, i64)) -> impl Iterator<Item = (usize, f64)> + '_ {
    (center.1 - half.1..=center.1 + half.1)
        .flat_map(move |y| (center.0 - half.0..=center.0 + half.0).map(move |x| (x, y)))
        .filter_map(|(x, y)| gt.get(x, y).map(|d| (gt.index(x as usize, y as usize), d)))
}

fn plant_inlier(
    q: (i64, i64),
    cfg: &SceneConfig,
    extr: &RigidTransform,
    gt: &DepthImage,
    labels: &LabelParams,
    rng: &mut ChaCha8Rng,
) -> Option<Planted> {
    let g = gt.get(q.0, q.1)?;
    let d = g + truncated_normal(rng, cfg.sigma_r);
    let u = q.0 as f64 + rng.random_range(-PIXEL_JITTER..=PIXEL_JITTER);
    let v = q.1 as f64 + rng.random_range(-PIXEL_JITTER..=PIXEL_JITTER);
    let (position, p) = place(u, v, d, cfg, extr)?;
    if p.pixel() != q || p.depth < cfg.depth_min || p.depth > cfg.depth_max {
        return None;
    }
    let tau = adaptive_threshold(p.depth).ok()?;
    let half = ((labels.conf_window.1 / 2) as i64, (labels.conf_window.0 / 2) as i64);
    let close: Vec<usize> =
        neighborhood(gt, q, half).filter(|(_, gd)| (gd - p.depth).abs() < tau - LABEL_MARGIN).map(|(i, _)| i).collect();
    if close.len() < labels.min_count {
        return None;
    }
    let hits = close;
    Some(Planted { position, hits })
}

fn plant_outlier(
    q: (i64, i64),
    cfg: &SceneConfig,
    extr: &RigidTransform,
    gt: &DepthImage,
    labels: &LabelParams,
    rng: &mut ChaCha8Rng,
) -> Option<Planted> {
    let g = gt.get(q.0, q.1)?;
    let err = rng.random_range(5.0..=10.0);
    let mut d = if rng.random_bool(0.5) { g + err } else { g - err };
    if d < cfg.depth_min || d > cfg.depth_max {
        d = 2.0 * g - d;
    }
    if d < cfg.depth_min || d > cfg.depth_max {
        return None;
    }
    let (lo, hi) = (cfg.outlier_offset.0 as i64, cfg.outlier_offset.1 as i64);
    let (du, dv) = loop {
        let o = (rng.random_range(-hi..=hi), rng.random_range(-hi..=hi));
        if o.0.abs().max(o.1.abs()) >= lo {
            break o;
        }
    };
    let target = (q.0 + du, q.1 + dv);
    if !cfg.camera.contains_pixel(target) {
        return None;
    }
    let u = target.0 as f64 + rng.random_range(-PIXEL_JITTER..=PIXEL_JITTER);
    let v = target.1 as f64 + rng.random_range(-PIXEL_JITTER..=PIXEL_JITTER);
    let (position, p) = place(u, v, d, cfg, extr)?;
    if p.pixel() != target || p.depth < cfg.depth_min || p.depth > cfg.depth_max {
        return None;
    }
    let tau = adaptive_threshold(p.depth).ok()?;
    if (p.depth - g).abs() < 5.0 * tau {
        return None;
    }
    let half = ((labels.conf_window.1 / 2) as i64, (labels.conf_window.0 / 2) as i64);
    let around: Vec<(usize, f64)> = neighborhood(gt, target, half).collect();
    if around.iter().any(|(_, gd)| (gd - p.depth).abs() < tau + LABEL_MARGIN) {
        return None;
    }
    let idx: Vec<usize> = around.iter().map(|(i, _)| *i).collect();
    let hits = idx.choose_multiple(rng, labels.min_count).copied().collect();
    Some(Planted { position, hits })
}

/// Renders a frame. Inliers project onto a surface pixel with depth within
/// `3 sigma_r` of it and get enough agreeing LiDAR hits nearby to be labeled
/// reliable; outliers are displaced by the configured pixel offset, carry a
/// depth error of 5 to 10 m and have no agreeing ground truth in their
/// neighborhood at all.
pub fn generate(cfg: &SceneConfig) -> Result<SyntheticFrame, SynthError> {
    cfg.validate()?;
    let cam = cfg.camera;
    let extr = cfg.extrinsic()?;
    let mut rng = stream(cfg.seed, STREAM_SCENE);
    let boxes = random_boxes(cfg, &mut rng);

    let mut depth = vec![0.0; cam.width * cam.height];
    let mut image = Image::zeros(1, cam.height, cam.width);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = trace(cfg, &boxes, x, y);
            depth[y * cam.width + x] = d.unwrap_or(0.0);
            image.set(0, y, x, shade(cfg, x, y, d));
        }
    }
    let gt = DepthImage::from_depth(cam.width, cam.height, depth)?;
    let surface: Vec<usize> = (0..gt.depth.len()).filter(|i| gt.valid[*i]).collect();
    if surface.is_empty() {
        return Err(SynthError::NoVisibleSurface);
    }

    let mut rng = stream(cfg.seed, STREAM_MONO);
    let mono: Vec<f64> = gt
        .depth
        .iter()
        .zip(&gt.valid)
        .map(|(d, ok)| {
            if !ok {
                return 0.0;
            }
            (cfg.a / d + cfg.b + truncated_normal(&mut rng, cfg.sigma_m)).max(MONO_FLOOR)
        })
        .collect();
    let mono_inv = InverseDepthMap { width: cam.width, height: cam.height, values: mono };

    let labels = LabelParams::default();
    let mut lidar = sample_lidar(&gt, cfg.lidar_fraction, cfg.seed);
    let mut rng = stream(cfg.seed, STREAM_RADAR);
    let (mut radar, mut outliers) = (Vec::with_capacity(cfg.radar_count), Vec::with_capacity(cfg.radar_count));
    for index in 0..cfg.radar_count {
        let outlier = rng.random_bool(cfg.outlier_fraction);
        let planted = (0..MAX_ATTEMPTS)
            .find_map(|_| {
                let i = *surface.choose(&mut rng).expect("surface is non-empty");
                let q = ((i % cam.width) as i64, (i / cam.width) as i64);
                if outlier {
                    plant_outlier(q, cfg, &extr, &gt, &labels, &mut rng)
                } else {
                    plant_inlier(q, cfg, &extr, &gt, &labels, &mut rng)
                }
            })
            .ok_or(SynthError::PlacementFailed { index, attempts: MAX_ATTEMPTS })?;
        for i in planted.hits {
            lidar.depth[i] = gt.depth[i];
            lidar.valid[i] = true;
        }
        radar.push(planted.position);
        outliers.push(outlier);
    }

    Ok(SyntheticFrame { config: cfg.clone(), boxes, gt, mono_inv, image, radar, outliers, lidar })
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub seed: u64,
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub camera: CameraModel,
    pub extrinsic_rotation: [f64; 9],
    pub extrinsic_translation: [f64; 3],
    pub outliers: Vec<bool>,
    pub boxes: Vec<SceneBox>,
    pub config: SceneConfig,
}

pub const BUNDLE_FILES: [&str; 6] = ["gt.pfm", "mono_inv.pfm", "lidar.pfm", "radar.csv", "image.pgm", "meta.json"];

pub fn write_frame(dir: &Path, frame: &SyntheticFrame) -> Result<(), IoError> {
    let cam = frame.config.camera;
    let (w, h) = (cam.width, cam.height);
    io::write_pfm(&dir.join("gt.pfm"), w, h, &frame.gt.depth)?;
    io::write_pfm(&dir.join("mono_inv.pfm"), w, h, &frame.mono_inv.values)?;
    io::write_pfm(&dir.join("lidar.pfm"), w, h, &frame.lidar.depth)?;
    io::write_radar_csv(&dir.join("radar.csv"), &frame.radar)?;
    io::write_pgm(&dir.join("image.pgm"), w, h, &frame.image.data)?;
    let meta = FrameMeta {
        seed: frame.config.seed,
        a: frame.config.a,
        b: frame.config.b,
        rho: frame.config.outlier_fraction,
        camera: cam,
        extrinsic_rotation: frame.config.extrinsic_rotation,
        extrinsic_translation: frame.config.extrinsic_translation,
        outliers: frame.outliers.clone(),
        boxes: frame.boxes.clone(),
        config: frame.config.clone(),
    };
    io::write_json(&dir.join("meta.json"), &meta)
}

/// A frame read back from disk. Maps carry `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub meta: FrameMeta,
    pub extrinsic: RigidTransform,
    pub gt: DepthImage,
    pub mono_inv: InverseDepthMap,
    pub lidar: DepthImage,
    pub radar: Vec<Vector3<f64>>,
    pub image: Image,
}

impl FrameBundle {
    pub fn radar_points(&self) -> Result<Vec<RadarPoint>, GeometryError> {
        crate::geometry::project_points(&self.radar, &self.extrinsic, &self.meta.camera)
    }
}

pub fn read_frame(dir: &Path) -> Result<FrameBundle, IoError> {
    let meta: FrameMeta = io::read_json(&dir.join("meta.json"))?;
    let bad = |file: &str, msg: String| IoError::Format { path: dir.join(file), msg };
    let cam = meta.camera;
    cam.validate().map_err(|e| bad("meta.json", e.to_string()))?;
    let extrinsic = RigidTransform::from_rows(meta.extrinsic_rotation, meta.extrinsic_translation)
        .map_err(|e| bad("meta.json", e.to_string()))?;
    let load = |file: &str| -> Result<Vec<f64>, IoError> {
        let m = io::read_pfm(&dir.join(file))?;
        if (m.width, m.height) != (cam.width, cam.height) {
            return Err(bad(file, format!("{}x{} map for a {}x{} camera", m.width, m.height, cam.width, cam.height)));
        }
        Ok(m.values)
    };
    let to_depth = |file: &str| -> Result<DepthImage, IoError> {
        DepthImage::from_depth(cam.width, cam.height, load(file)?).map_err(|e| bad(file, e.to_string()))
    };
    let gt = to_depth("gt.pfm")?;
    let lidar = to_depth("lidar.pfm")?;
    let mono_inv = InverseDepthMap::new(cam.width, cam.height, load("mono_inv.pfm")?)
        .map_err(|e| bad("mono_inv.pfm", e.to_string()))?;
    let radar = io::read_radar_csv(&dir.join("radar.csv"))?;
    let pgm = io::read_pgm(&dir.join("image.pgm"))?;
    if (pgm.width, pgm.height) != (cam.width, cam.height) {
        return Err(bad("image.pgm", "image size does not match the camera".into()));
    }
    let image = Image { channels: 1, height: cam.height, width: cam.width, data: pgm.values };
    Ok(FrameBundle { meta, extrinsic, gt, mono_inv, lidar, radar, image })
}

/// A separable toy task for the confidence head. Each point carries a
/// threshold `z` in its third radar feature and sees a patch of constant
/// brightness `c` (plus small noise); it is reliable iff `c > z`. Pairs with
/// `|c - z| < 0.1` are redrawn. Displacement targets are zero.
pub fn confidence_task(frames: usize, points: usize, config: &RefinerConfig, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = config.patch_size;
    (0..frames)
        .map(|_| {
            let mut feats = Vec::with_capacity(points * 3);
            let (mut patches, mut labels) = (Vec::with_capacity(points), Vec::with_capacity(points));
            for _ in 0..points {
                let (z, c) = loop {
                    let (z, c): (f64, f64) = (rng.random(), rng.random());
                    if (c - z).abs() >= 0.1 {
                        break (z, c);
                    }
                };
                feats.extend([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), z]);
                let pixels = (0..config.patch_channels * side * side).map(|_| c + rng.random_range(-0.05..0.05)).collect();
                let half = (side / 2) as i64;
                patches.push(Patch {
                    channels: config.patch_channels,
                    height: side,
                    width: side,
                    pixels,
                    center: (half, half),
                });
                labels.push(if c > z { 1.0 } else { 0.0 });
            }
            Sample {
                features: Matrix::from_vec(points, 3, feats),
                patches,
                conf_labels: labels,
                disp_labels: vec![[0.0; 2]; points],
                valid: vec![true; points],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelgen::build_labels;

    #[test]
    fn slab_hit_distance() {
        let b = SceneBox { min: [-1.0, -1.0, 10.0], max: [1.0, 1.0, 12.0] };
        assert_eq!(b.hit(&Vector3::new(0.0, 0.0, 1.0)), Some(10.0));
        assert_eq!(b.hit(&Vector3::new(0.5, 0.0, 1.0)), None);
        assert_eq!(b.hit(&Vector3::new(0.0, 0.0, -1.0)), None);
    }

    #[test]
    fn ground_depth_is_analytic() {
        let cfg = SceneConfig { boxes: 0, ..SceneConfig::default() };
        let f = generate(&cfg).unwrap();
        let cam = cfg.camera;
        let y = cam.height - 1;
        let expected = cfg.camera_height * cam.fy / (y as f64 - cam.cy);
        assert!((f.gt.get(0, y as i64).unwrap() - expected).abs() < 1e-12);
        // rows at or above the horizon see sky
        assert_eq!(f.gt.get(5, cam.cy as i64), None);
        assert_eq!(f.mono_inv.get(5, cam.cy as i64), 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig { seed: 9, outlier_fraction: 0.3, sigma_m: 0.001, ..SceneConfig::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = generate(&SceneConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(other.radar, generate(&cfg).unwrap().radar);
    }

    #[test]
    fn frame_invariants() {
        for seed in 0..5 {
            let cfg = SceneConfig { seed, outlier_fraction: 0.4, sigma_m: 0.002, ..SceneConfig::default() };
            let f = generate(&cfg).unwrap();
            for i in 0..f.gt.depth.len() {
                if f.gt.valid[i] {
                    assert!(f.gt.depth[i] >= cfg.depth_min && f.gt.depth[i] <= cfg.depth_max);
                    assert!(f.mono_inv.values[i] > 0.0);
                } else {
                    assert_eq!(f.mono_inv.values[i], 0.0);
                }
                if f.lidar.valid[i] {
                    assert_eq!(f.lidar.depth[i], f.gt.depth[i]);
                }
            }
            let pts = f.radar_points().unwrap();
            assert_eq!(pts.len(), cfg.radar_count);
            for (p, out) in pts.iter().zip(&f.outliers) {
                let (x, y) = p.pixel();
                if !out {
                    let g = f.gt.get(x, y).unwrap();
                    assert!((p.depth - g).abs() <= 3.0 * cfg.sigma_r + 1e-9);
                }
                assert!(p.depth >= cfg.depth_min && p.depth <= cfg.depth_max);
            }
        }
    }

    #[test]
    fn planted_outliers_are_exactly_the_unreliable_points() {
        for seed in 0..5 {
            let cfg = SceneConfig { seed, outlier_fraction: 0.5, ..SceneConfig::default() };
            let f = generate(&cfg).unwrap();
            let labels = build_labels(&f.radar_points().unwrap(), &f.lidar, &LabelParams::default()).unwrap();
            for (l, out) in labels.iter().zip(&f.outliers) {
                assert_eq!(l.conf_label == 0, *out);
                if !out {
                    assert!(l.is_valid);
                }
            }
        }
    }

    #[test]
    fn outlier_offsets_within_range() {
        let cfg = SceneConfig { seed: 3, outlier_fraction: 1.0, ..SceneConfig::default() };
        let f = generate(&cfg).unwrap();
        assert!(f.outliers.iter().all(|o| *o));
        for p in f.radar_points().unwrap() {
            let (x, y) = p.pixel();
            // the true surface is somewhere inside the offset ring around the projection
            let hi = cfg.outlier_offset.1 as i64;
            let found = (-hi..=hi).any(|dv| {
                (-hi..=hi).any(|du| {
                    du.abs().max(dv.abs()) >= cfg.outlier_offset.0 as i64
                        && matches!(f.gt.get(x + du, y + dv), Some(g) if (g - p.depth).abs() >= 5.0)
                })
            });
            assert!(found);
        }
    }

    #[test]
    fn config_validation() {
        let ok = SceneConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SceneConfig { a: 0.0, ..ok.clone() },
            SceneConfig { sigma_m: -1.0, ..ok.clone() },
            SceneConfig { sigma_r: 0.2, ..ok.clone() },
            SceneConfig { outlier_fraction: 1.5, ..ok.clone() },
            SceneConfig { depth_min: 10.0, depth_max: 5.0, ..ok.clone() },
            SceneConfig { lidar_fraction: 0.0, ..ok.clone() },
            SceneConfig { extrinsic_rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0], ..ok.clone() },
        ] {
            assert!(generate(&bad).is_err());
        }
        // camera looking at nothing but sky
        let sky = SceneConfig { camera_height: 1.5, depth_max: 2.5, depth_min: 2.4, boxes: 0, ..ok };
        assert_eq!(generate(&sky), Err(SynthError::NoVisibleSurface));
    }

    #[test]
    fn lidar_full_fraction_is_identity() {
        let f = generate(&SceneConfig::default()).unwrap();
        assert_eq!(sample_lidar(&f.gt, 1.0, 5), f.gt);
    }

    #[test]
    fn bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig { seed: 4, outlier_fraction: 0.2, ..SceneConfig::default() };
        let f = generate(&cfg).unwrap();
        write_frame(dir.path(), &f).unwrap();
        for name in BUNDLE_FILES {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        let b = read_frame(dir.path()).unwrap();
        assert_eq!(b.radar, f.radar);
        assert_eq!(b.meta.outliers, f.outliers);
        assert_eq!(b.meta.config, cfg);
        assert_eq!(b.gt.valid, f.gt.valid);
        for (x, y) in b.gt.depth.iter().zip(&f.gt.depth) {
            assert_eq!(*x, f64::from(*y as f32));
        }
        assert_eq!(b.radar_points().unwrap(), f.radar_points().unwrap());
    }

    #[test]
    fn confidence_task_is_separable() {
        let cfg = RefinerConfig::default();
        let data = confidence_task(3, 10, &cfg, 1);
        for s in &data {
            for k in 0..10 {
                let c: f64 = s.patches[k].pixels.iter().sum::<f64>() / s.patches[k].pixels.len() as f64;
                let z = s.features.get(k, 2);
                assert!((c - z).abs() > 0.05);
                assert_eq!(s.conf_labels[k] == 1.0, c > z);
            }
        }
        assert_eq!(confidence_task(3, 10, &cfg, 1), data);
    }
}
