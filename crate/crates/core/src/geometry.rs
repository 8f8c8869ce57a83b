//! Pinhole camera, rigid extrinsics, sparse depth rasterization and patch
//! cropping.
//!
//! Pixel centers sit at integer coordinates. A continuous projection `(u, v)`
//! belongs to pixel `(floor(u + 0.5), floor(v + 0.5))`, and a point is inside
//! the image iff that pixel is.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("rotation is not a proper orthonormal matrix (orthogonality error {ortho:.3e}, det {det})")]
    InvalidRotation { ortho: f64, det: f64 },
    #[error("patch size must be odd in both dimensions, got {0}x{1}")]
    EvenPatchSize(usize, usize),
    #[error("non-finite point coordinate at index {0}")]
    NonFinitePoint(usize),
    #[error("buffer length {got} does not match {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("empty image size".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidCamera(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidCamera(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point; `None` when it lies on or behind the
    /// image plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if !(p.z > 0.0) {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Camera-frame point at Z-depth `depth` along the ray through `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    pub fn contains_pixel(&self, px: (i64, i64)) -> bool {
        px.0 >= 0 && px.1 >= 0 && (px.0 as usize) < self.width && (px.1 as usize) < self.height
    }
}

/// Nearest pixel of a continuous image coordinate, as `(column, row)`.
pub fn pixel_of(u: f64, v: f64) -> (i64, i64) {
    ((u + 0.5).floor() as i64, (v + 0.5).floor() as i64)
}

/// Sensor-to-camera transform: `x_cam = rotation * x_sensor + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    const TOLERANCE: f64 = 1e-9;

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds from a row-major 3x3 rotation.
    pub fn from_rows(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_row_slice(&rotation), Vector3::from(translation))
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        let det = self.rotation.determinant();
        if !(ortho <= Self::TOLERANCE) || !((det - 1.0).abs() <= Self::TOLERANCE) {
            return Err(GeometryError::InvalidRotation { ortho, det });
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn rotation_rows(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ]
    }
}

/// A sensor return projected into the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    /// Position in the sensor frame (meters).
    pub position: Vector3<f64>,
    pub u: f64,
    pub v: f64,
    /// Camera-frame Z depth (meters).
    pub depth: f64,
}

impl RadarPoint {
    pub fn pixel(&self) -> (i64, i64) {
        pixel_of(self.u, self.v)
    }
}

/// Applies the extrinsic, projects with the pinhole model and keeps points in
/// front of the camera that land inside the image. Survivors keep input order.
pub fn project_points(
    points: &[Vector3<f64>],
    extrinsic: &RigidTransform,
    camera: &CameraModel,
) -> Result<Vec<RadarPoint>, GeometryError> {
    camera.validate()?;
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinitePoint(i));
        }
        let pc = extrinsic.apply(p);
        let Some((u, v)) = camera.project(&pc) else { continue };
        if camera.contains_pixel(pixel_of(u, v)) {
            out.push(RadarPoint { position: *p, u, v, depth: pc.z });
        }
    }
    Ok(out)
}

/// Row-major depth image with a validity mask. Invalid pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Ground-truth LiDAR depth projected into the image.
pub type SparseDepthImage = DepthImage;

impl DepthImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Treats every finite positive value as valid; anything else becomes an
    /// invalid zero.
    pub fn from_depth(width: usize, height: usize, mut depth: Vec<f64>) -> Result<Self, GeometryError> {
        if depth.len() != width * height {
            return Err(GeometryError::ShapeMismatch { expected: width * height, got: depth.len() });
        }
        let valid: Vec<bool> = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        for (d, ok) in depth.iter_mut().zip(&valid) {
            if !ok {
                *d = 0.0;
            }
        }
        Ok(Self { width, height, depth, valid })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Depth at `(x, y)` if the pixel is inside and valid.
    #[inline]
    pub fn get(&self, x: i64, y: i64) -> Option<f64> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return None;
        }
        let i = self.index(x as usize, y as usize);
        self.valid[i].then_some(self.depth[i])
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        let i = self.index(x, y);
        self.depth[i] = depth;
        self.valid[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Writes each projected return into its pixel; the nearest return wins when
/// several share a pixel.
pub fn rasterize_sparse_depth(points: &[RadarPoint], camera: &CameraModel) -> SparseDepthImage {
    let mut img = DepthImage::empty(camera.width, camera.height);
    for p in points {
        let px = p.pixel();
        if !camera.contains_pixel(px) || !(p.depth > 0.0) {
            continue;
        }
        let i = img.index(px.0 as usize, px.1 as usize);
        if !img.valid[i] || p.depth < img.depth[i] {
            img.depth[i] = p.depth;
            img.valid[i] = true;
        }
    }
    img
}

/// Channel-major image (`C x H x W`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }
}

/// Crop of an image centered on a pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    /// `(column, row)` of the center pixel in the source image.
    pub center: (i64, i64),
}

impl Patch {
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }
}

/// Crops `size = (height, width)` around `center = (column, row)`, zero
/// padding whatever falls outside the image.
pub fn extract_patch(
    image: &Image,
    center: (i64, i64),
    size: (usize, usize),
) -> Result<Patch, GeometryError> {
    let (h, w) = size;
    if h % 2 == 0 || w % 2 == 0 {
        return Err(GeometryError::EvenPatchSize(h, w));
    }
    let top = center.1 - (h as i64 - 1) / 2;
    let left = center.0 - (w as i64 - 1) / 2;
    let mut pixels = vec![0.0; image.channels * h * w];
    for c in 0..image.channels {
        for r in 0..h {
            let sy = top + r as i64;
            if sy < 0 || sy as usize >= image.height {
                continue;
            }
            for col in 0..w {
                let sx = left + col as i64;
                if sx < 0 || sx as usize >= image.width {
                    continue;
                }
                pixels[(c * h + r) * w + col] = image.get(c, sy as usize, sx as usize);
            }
        }
    }
    Ok(Patch { channels: image.channels, height: h, width: w, pixels, center })
}
