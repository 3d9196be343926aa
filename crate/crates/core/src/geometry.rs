//! Camera projection, back-projection, rigid transforms and depth-map rasters.
//!
//! Coordinates follow the KITTI camera convention: x right, y down, z forward,
//! all in meters. Pixel assignment uses round-half-up of the projected
//! coordinate, so pixel centers sit on integer coordinates.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::kitti::Calibration;

/// 3D point in the camera frame (meters).
pub type Point3 = nalgebra::Point3<f64>;

/// Axis-aligned 2D box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Box2D {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl Box2D {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self { left, top, right, bottom }
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0)) * (self.height().max(0.0))
    }

    pub fn is_valid(&self) -> bool {
        self.right > self.left && self.bottom > self.top
    }
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("calibration 3x3 block is singular")]
    SingularCalibration,
}

/// Rigid transform: `p_out = rotation * p_in + translation`.
///
/// The rotation must be orthonormal with determinant +1 (checked to 1e-9
/// by [`RigidPose::new`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    /// Build a pose, validating orthonormality and determinant.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Option<Self> {
        let rtr = rotation.transpose() * rotation;
        let ortho_err = (rtr - Matrix3::identity()).abs().max();
        let det_err = (rotation.determinant() - 1.0).abs();
        if ortho_err > 1e-9 || det_err > 1e-9 {
            return None;
        }
        Some(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Rotation by `angle` about the y (down) axis, applied about the origin.
    pub fn yaw(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
            translation: Vector3::zeros(),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }
}

/// Point cloud with one RGB color per point.
#[derive(Debug, Clone, Default)]
pub struct ColoredPointCloud {
    pub points: Vec<Point3>,
    pub colors: Vec<[u8; 3]>,
}

impl ColoredPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-pixel depth raster; 0.0 marks an invalid (empty) pixel, valid depths
/// are strictly positive meters. Row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Depth map with holes, as produced by LiDAR projection.
pub type SparseDepthMap = DepthMap;
/// Depth map after densification; same representation as [`SparseDepthMap`].
pub type DenseDepthMap = DepthMap;

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "depth map dimensions must be positive");
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let d = self.data[y * self.width + x];
        (d > 0.0).then_some(d)
    }

    #[inline]
    pub fn raw(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Write a depth; `d <= 0` clears the pixel.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f32) {
        self.data[y * self.width + x] = if d > 0.0 { d } else { 0.0 };
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Iterate valid pixels as `(x, y, depth)`.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
        self.data.iter().enumerate().filter_map(move |(i, &d)| {
            (d > 0.0).then(|| (i % self.width, i / self.width, d))
        })
    }

    /// Export as 16-bit PNG with the KITTI scaling (depth * 256, 0 = invalid).
    pub fn save_png16(&self, path: &Path) -> image::ImageResult<()> {
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            self.width as u32,
            self.height as u32,
        );
        for (x, y, px) in img.enumerate_pixels_mut() {
            let d = self.data[y as usize * self.width + x as usize];
            let v = (f64::from(d) * 256.0).round().clamp(0.0, f64::from(u16::MAX)) as u16;
            *px = image::Luma([v]);
        }
        img.save(path)
    }

    /// Load a 16-bit PNG written by [`DepthMap::save_png16`].
    pub fn load_png16(path: &Path) -> image::ImageResult<Self> {
        let img = image::open(path)?.to_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut map = DepthMap::new(w, h);
        for (x, y, px) in img.enumerate_pixels() {
            map.set(x as usize, y as usize, px.0[0] as f32 / 256.0);
        }
        Ok(map)
    }
}

/// Round-half-up pixel assignment: continuous coordinate -> pixel index.
#[inline]
pub fn to_pixel(coord: f64) -> i64 {
    (coord + 0.5).floor() as i64
}

/// Project a 3D point through the calibration matrix. Returns `(u, v, depth)`
/// in continuous pixel coordinates, or `None` for points at or behind the
/// camera plane. The depth is the point's z coordinate.
#[inline]
pub fn project_point(calib: &Calibration, p: &Point3) -> Option<(f64, f64, f64)> {
    if p.z <= 0.0 {
        return None;
    }
    let m = &calib.p_cam;
    let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)];
    if w <= 0.0 {
        return None;
    }
    let u = (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)]) / w;
    let v = (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)]) / w;
    Some((u, v, p.z))
}

/// Project a cloud into a sparse depth map. Multiple points landing on one
/// pixel resolve to the smallest depth (ties keep the lowest point index).
/// Points behind the camera or outside the raster are dropped; the second
/// return value counts them.
pub fn project_points(
    cloud: &[Point3],
    calib: &Calibration,
    width: usize,
    height: usize,
) -> (SparseDepthMap, usize) {
    let mut map = DepthMap::new(width, height);
    let mut dropped = 0usize;
    for p in cloud {
        let Some((u, v, d)) = project_point(calib, p) else {
            dropped += 1;
            continue;
        };
        let (px, py) = (to_pixel(u), to_pixel(v));
        if px < 0 || py < 0 || px >= width as i64 || py >= height as i64 {
            dropped += 1;
            continue;
        }
        let (x, y) = (px as usize, py as usize);
        // Strict < keeps the earliest point on exact depth ties.
        match map.get(x, y) {
            Some(existing) if existing <= d as f32 => {}
            _ => map.set(x, y, d as f32),
        }
    }
    (map, dropped)
}

/// Back-project every valid pixel `(u, v, d)` to the unique 3D point with
/// z = d that projects to pixel center `(u, v)`.
pub fn backproject_depth(
    depth: &DenseDepthMap,
    calib: &Calibration,
) -> Result<Vec<Point3>, GeometryError> {
    let m = calib.left_block();
    let m_inv = m.try_inverse().ok_or(GeometryError::SingularCalibration)?;
    let p4 = Vector3::new(calib.p_cam[(0, 3)], calib.p_cam[(1, 3)], calib.p_cam[(2, 3)]);
    let m_inv_p4 = m_inv * p4;
    let mut out = Vec::with_capacity(depth.valid_count());
    for (x, y, d) in depth.iter_valid() {
        let uh = Vector3::new(x as f64, y as f64, 1.0);
        let ray = m_inv * uh;
        if ray.z.abs() < 1e-15 {
            return Err(GeometryError::SingularCalibration);
        }
        // Solve for the homogeneous scale that puts the point at z = d.
        let w = (f64::from(d) + m_inv_p4.z) / ray.z;
        let p = ray * w - m_inv_p4;
        out.push(Point3::from(p));
    }
    Ok(out)
}

/// Pair each point with the image color at its rounded projection. Points
/// projecting outside the image (or behind the camera) are dropped.
pub fn colorize(
    points: &[Point3],
    image: &image::RgbImage,
    calib: &Calibration,
) -> ColoredPointCloud {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mut cloud = ColoredPointCloud::default();
    for p in points {
        let Some((u, v, _)) = project_point(calib, p) else { continue };
        let (px, py) = (to_pixel(u), to_pixel(v));
        if px < 0 || py < 0 || px >= w || py >= h {
            continue;
        }
        cloud.points.push(*p);
        cloud.colors.push(image.get_pixel(px as u32, py as u32).0);
    }
    cloud
}

/// Apply a rigid transform to every point.
pub fn transform_points(points: &[Point3], pose: &RigidPose) -> Vec<Point3> {
    points.iter().map(|p| pose.apply(p)).collect()
}
