//! Virtual camera placement and point-splat rendering of ROI views.
//!
//! For each detected object, `n_views` pinhole cameras are placed on a
//! horizontal arc of radius `radius_r` around the object centroid, level with
//! it, at azimuth offsets evenly spaced over `[-rho_max, rho_max]` relative
//! to the ray from the original camera center to the centroid. Every camera's
//! optical axis passes through the centroid, roll is fixed to zero (up vector
//! is world -y), and the focal length is chosen so an object of
//! `nominal_height / fill_fraction` meters spans the ROI height at distance
//! `radius_r`.
//!
//! Rendering splats each point as a filled square with per-pixel
//! nearest-depth-wins resolution; depth ties keep the lowest point index, so
//! output is deterministic and schedule-independent.

use rayon::prelude::*;
use thiserror::Error;

use crate::evaluation::Detection3D;
use crate::geometry::{to_pixel, Box2D, ColoredPointCloud, Point3, RigidPose};

#[derive(Debug, Error)]
pub enum ViewSynthesisError {
    #[error("object centroid is behind the camera (z = {0})")]
    CentroidBehindCamera(f64),
    #[error("2D box does not intersect the image")]
    EmptyIntersection,
    #[error("invalid view config: {0}")]
    BadConfig(String),
}

/// View synthesis parameters. Defaults: 11 views over +-25 deg, 4 m arc,
/// 224x224 ROIs, 2 px splats, object filling 80% of the image height.
#[derive(Debug, Clone)]
pub struct ViewConfig {
    pub n_views: usize,
    /// Half-extent of the azimuth offset range, radians.
    pub rho_max: f64,
    /// Arc radius in meters.
    pub radius_r: f64,
    pub roi_width: usize,
    pub roi_height: usize,
    /// Splat half-side in pixels; a point covers `(2r+1)^2` pixels.
    pub splat_radius: usize,
    /// Object height to image height ratio used for the focal length.
    pub fill_fraction: f64,
    /// Nominal object height in meters for the focal rule.
    pub nominal_height: f64,
    /// Crop the cloud to a box of `crop_factor` times the object dimensions
    /// around the centroid before splatting. `None` renders the full cloud.
    pub crop_factor: Option<f64>,
    /// Scale splat size with inverse depth instead of keeping it fixed.
    pub depth_scaled_splat: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            n_views: 11,
            rho_max: 25f64.to_radians(),
            radius_r: 4.0,
            roi_width: 224,
            roi_height: 224,
            splat_radius: 2,
            fill_fraction: 0.8,
            nominal_height: 1.8,
            crop_factor: Some(3.0),
            depth_scaled_splat: false,
        }
    }
}

impl ViewConfig {
    /// Validate invariants; returns non-fatal warnings (e.g. an azimuth range
    /// wide enough to expose unobserved object surfaces).
    pub fn validate(&self) -> Result<Vec<String>, ViewSynthesisError> {
        if self.n_views < 1 {
            return Err(ViewSynthesisError::BadConfig("n_views must be >= 1".into()));
        }
        if !(self.rho_max > 0.0 && self.rho_max < std::f64::consts::FRAC_PI_2) {
            return Err(ViewSynthesisError::BadConfig("rho_max must be in (0, pi/2)".into()));
        }
        if self.radius_r <= 0.0 {
            return Err(ViewSynthesisError::BadConfig("radius_r must be positive".into()));
        }
        if self.roi_width == 0 || self.roi_height == 0 {
            return Err(ViewSynthesisError::BadConfig("roi dimensions must be positive".into()));
        }
        let mut warnings = Vec::new();
        if self.rho_max > 60f64.to_radians() {
            warnings.push(format!(
                "rho_max {:.1} deg may expose object surfaces unseen from the original viewpoint",
                self.rho_max.to_degrees()
            ));
        }
        Ok(warnings)
    }

    /// Focal length implied by the fill rule.
    pub fn focal(&self) -> f64 {
        self.roi_height as f64 * self.radius_r * self.fill_fraction / self.nominal_height
    }
}

/// A virtual pinhole camera; `pose` maps world (original camera frame) points
/// into this camera's frame.
#[derive(Debug, Clone)]
pub struct VirtualCamera {
    pub pose: RigidPose,
    pub focal: f64,
    pub principal: (f64, f64),
    /// This camera's azimuth offset rho from the object viewing ray.
    pub azimuth_offset: f64,
}

impl VirtualCamera {
    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3 {
        let inv = self.pose.inverse();
        Point3::from(inv.translation)
    }

    /// Project a world point; returns continuous pixel coordinates and depth.
    pub fn project(&self, p: &Point3) -> Option<(f64, f64, f64)> {
        let q = self.pose.apply(p);
        if q.z <= 1e-9 {
            return None;
        }
        let u = self.focal * q.x / q.z + self.principal.0;
        let v = self.focal * q.y / q.z + self.principal.1;
        Some((u, v, q.z))
    }
}

/// A rendered ROI: RGB pixels plus the matching depth buffer. Background
/// pixels are black with depth 0.
#[derive(Debug, Clone)]
pub struct RoiImage {
    pub pixels: image::RgbImage,
    pub depth_buffer: Vec<f32>,
    pub source_view: usize,
}

impl RoiImage {
    pub fn new(width: usize, height: usize, source_view: usize) -> Self {
        Self {
            pixels: image::RgbImage::new(width as u32, height as u32),
            depth_buffer: vec![0.0; width * height],
            source_view,
        }
    }

    pub fn from_pixels(pixels: image::RgbImage) -> Self {
        let n = (pixels.width() * pixels.height()) as usize;
        Self { pixels, depth_buffer: vec![0.0; n], source_view: 0 }
    }
}

/// All rendered views of one object.
#[derive(Debug, Clone)]
pub struct VirtualViewSet {
    pub cameras: Vec<VirtualCamera>,
    pub images: Vec<RoiImage>,
    /// Azimuth of the ray from the original camera center to the centroid.
    pub object_viewing_angle_alpha: f64,
}

/// Unit direction in the horizontal plane at azimuth `phi` (0 = +z).
#[inline]
fn azimuth_dir(phi: f64) -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(phi.sin(), 0.0, phi.cos())
}

/// Place the canonical arc of virtual cameras around a centroid.
pub fn place_cameras(
    centroid: &Point3,
    cfg: &ViewConfig,
) -> Result<Vec<VirtualCamera>, ViewSynthesisError> {
    if centroid.z <= 0.0 {
        return Err(ViewSynthesisError::CentroidBehindCamera(centroid.z));
    }
    cfg.validate()?;
    let alpha = centroid.x.atan2(centroid.z);
    let focal = cfg.focal();
    let principal = ((cfg.roi_width as f64 - 1.0) / 2.0, (cfg.roi_height as f64 - 1.0) / 2.0);

    let mut cameras = Vec::with_capacity(cfg.n_views);
    for j in 0..cfg.n_views {
        let rho = if cfg.n_views == 1 {
            0.0
        } else {
            -cfg.rho_max + 2.0 * cfg.rho_max * j as f64 / (cfg.n_views as f64 - 1.0)
        };
        let phi = alpha + rho;
        let center = centroid.coords - cfg.radius_r * azimuth_dir(phi);
        // Optical axis through the centroid, up = world -y (zero roll).
        let (s, c) = phi.sin_cos();
        let rotation = nalgebra::Matrix3::new(
            c, 0.0, -s, //
            0.0, 1.0, 0.0, //
            s, 0.0, c,
        );
        let translation = -(rotation * center);
        cameras.push(VirtualCamera {
            pose: RigidPose { rotation, translation },
            focal,
            principal,
            azimuth_offset: rho,
        });
    }
    Ok(cameras)
}

/// Splat a colored cloud through an arbitrary projection into an RGB raster
/// with a z-buffer. `project` returns continuous pixel coordinates plus a
/// positive depth, or `None` to cull. Ties on depth keep the lowest index.
pub(crate) fn splat_cloud<F>(
    cloud: &ColoredPointCloud,
    project: F,
    out: &mut RoiImage,
    splat_radius_for: impl Fn(f64) -> i64,
) where
    F: Fn(&Point3) -> Option<(f64, f64, f64)>,
{
    let (w, h) = (out.pixels.width() as i64, out.pixels.height() as i64);
    for (p, color) in cloud.points.iter().zip(&cloud.colors) {
        let Some((u, v, z)) = project(p) else { continue };
        let (cu, cv) = (to_pixel(u), to_pixel(v));
        let r = splat_radius_for(z);
        if cu + r < 0 || cv + r < 0 || cu - r >= w || cv - r >= h {
            continue;
        }
        let zf = z as f32;
        for dy in -r..=r {
            let py = cv + dy;
            if py < 0 || py >= h {
                continue;
            }
            for dx in -r..=r {
                let px = cu + dx;
                if px < 0 || px >= w {
                    continue;
                }
                let idx = (py * w + px) as usize;
                let cell = out.depth_buffer[idx];
                if cell == 0.0 || zf < cell {
                    out.depth_buffer[idx] = zf;
                    out.pixels.put_pixel(px as u32, py as u32, image::Rgb(*color));
                }
            }
        }
    }
}

/// Render the cloud from one virtual camera.
pub fn render_view(cloud: &ColoredPointCloud, cam: &VirtualCamera, cfg: &ViewConfig) -> RoiImage {
    let mut out = RoiImage::new(cfg.roi_width, cfg.roi_height, 0);
    let fixed = cfg.splat_radius as i64;
    let radius_for = |z: f64| {
        if cfg.depth_scaled_splat {
            ((cfg.splat_radius as f64 * cfg.radius_r / z).round() as i64).clamp(1, 4 * fixed.max(1))
        } else {
            fixed
        }
    };
    splat_cloud(cloud, |p| cam.project(p), &mut out, radius_for);
    out
}

fn crop_cloud(cloud: &ColoredPointCloud, det: &Detection3D, factor: f64) -> ColoredPointCloud {
    let c = det.centroid;
    let half_h = 0.5 * factor * det.dims.1;
    let half_xz = 0.5 * factor * det.dims.0.max(det.dims.2);
    let mut out = ColoredPointCloud::default();
    for (p, col) in cloud.points.iter().zip(&cloud.colors) {
        if (p.x - c.x).abs() <= half_xz
            && (p.y - c.y).abs() <= half_h
            && (p.z - c.z).abs() <= half_xz
        {
            out.points.push(*p);
            out.colors.push(*col);
        }
    }
    out
}

/// Place cameras around a detection and render every view. Views render in
/// parallel and are collected in order.
pub fn synthesize_views(
    cloud: &ColoredPointCloud,
    detection: &Detection3D,
    cfg: &ViewConfig,
) -> Result<VirtualViewSet, ViewSynthesisError> {
    let centroid = detection.centroid;
    let cameras = place_cameras(&centroid, cfg)?;
    let alpha = centroid.x.atan2(centroid.z);
    let cropped;
    let render_input = match cfg.crop_factor {
        Some(f) => {
            cropped = crop_cloud(cloud, detection, f);
            &cropped
        }
        None => cloud,
    };
    let images: Vec<RoiImage> = cameras
        .par_iter()
        .enumerate()
        .map(|(j, cam)| {
            let mut img = render_view(render_input, cam, cfg);
            img.source_view = j;
            img
        })
        .collect();
    Ok(VirtualViewSet { cameras, images, object_viewing_angle_alpha: alpha })
}

/// Crop-and-resize baseline: bilinear resample of the box intersection with
/// the image into ROI dimensions.
pub fn roi_crop(
    image: &image::RgbImage,
    bbox: &Box2D,
    cfg: &ViewConfig,
) -> Result<RoiImage, ViewSynthesisError> {
    let (iw, ih) = (image.width() as f64, image.height() as f64);
    let left = bbox.left.max(0.0);
    let top = bbox.top.max(0.0);
    let right = bbox.right.min(iw);
    let bottom = bbox.bottom.min(ih);
    if right <= left || bottom <= top {
        return Err(ViewSynthesisError::EmptyIntersection);
    }
    let (bw, bh) = (right - left, bottom - top);
    let mut out = RoiImage::new(cfg.roi_width, cfg.roi_height, 0);
    let sample = |x: f64, y: f64| -> [f64; 3] {
        let x = x.clamp(0.0, iw - 1.0);
        let y = y.clamp(0.0, ih - 1.0);
        let (x0, y0) = (x.floor() as u32, y.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(image.width() - 1), (y0 + 1).min(image.height() - 1));
        let (fx, fy) = (x - f64::from(x0), y - f64::from(y0));
        let mut acc = [0.0f64; 3];
        for (px, py, wgt) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            let p = image.get_pixel(px, py).0;
            for c in 0..3 {
                acc[c] += wgt * f64::from(p[c]);
            }
        }
        acc
    };
    for oy in 0..cfg.roi_height {
        for ox in 0..cfg.roi_width {
            let sx = left + (ox as f64 + 0.5) * bw / cfg.roi_width as f64 - 0.5;
            let sy = top + (oy as f64 + 0.5) * bh / cfg.roi_height as f64 - 0.5;
            let c = sample(sx, sy);
            out.pixels.put_pixel(
                ox as u32,
                oy as u32,
                image::Rgb([
                    c[0].round().clamp(0.0, 255.0) as u8,
                    c[1].round().clamp(0.0, 255.0) as u8,
                    c[2].round().clamp(0.0, 255.0) as u8,
                ]),
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn default_cfg() -> ViewConfig {
        ViewConfig::default()
    }

    #[test]
    fn default_placement_matches_canonical_arc() {
        let centroid = Point3::new(3.0, 0.4, 12.0);
        let cams = place_cameras(&centroid, &default_cfg()).unwrap();
        assert_eq!(cams.len(), 11);
        for pair in cams.windows(2) {
            assert_relative_eq!(
                pair[1].azimuth_offset - pair[0].azimuth_offset,
                5f64.to_radians(),
                epsilon = 1e-9
            );
        }
        for cam in &cams {
            let c = cam.center();
            assert_relative_eq!((c - centroid).norm(), 4.0, epsilon = 1e-9);
            assert_relative_eq!(c.y, centroid.y, epsilon = 1e-9);
            // Optical axis passes through the centroid.
            let (u, v, _) = cam.project(&centroid).unwrap();
            assert!((u - cam.principal.0).abs() < 0.5);
            assert!((v - cam.principal.1).abs() < 0.5);
        }
    }

    #[test]
    fn single_view_sits_on_the_viewing_ray() {
        let centroid = Point3::new(0.0, 0.0, 10.0);
        let cfg = ViewConfig { n_views: 1, ..default_cfg() };
        let cams = place_cameras(&centroid, &cfg).unwrap();
        assert_eq!(cams.len(), 1);
        assert_eq!(cams[0].azimuth_offset, 0.0);
        let c = cams[0].center();
        assert_relative_eq!(c.x, 0.0, epsilon = 1e-9);
        assert_relative_eq!(c.z, 6.0, epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_centroid_is_rejected() {
        let err = place_cameras(&Point3::new(0.0, 0.0, -2.0), &default_cfg()).unwrap_err();
        assert!(matches!(err, ViewSynthesisError::CentroidBehindCamera(_)));
    }

    #[test]
    fn wide_rho_only_warns() {
        let cfg = ViewConfig { rho_max: 70f64.to_radians(), ..default_cfg() };
        let warnings = cfg.validate().unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn single_point_splats_at_principal_pixel() {
        let centroid = Point3::new(0.0, 0.0, 10.0);
        let cfg = ViewConfig { n_views: 1, ..default_cfg() };
        let cam = place_cameras(&centroid, &cfg).unwrap().remove(0);
        let cloud = ColoredPointCloud { points: vec![centroid], colors: vec![[255, 0, 0]] };
        let roi = render_view(&cloud, &cam, &cfg);
        let center = (to_pixel(cam.principal.0) as u32, to_pixel(cam.principal.1) as u32);
        assert_eq!(roi.pixels.get_pixel(center.0, center.1).0, [255, 0, 0]);
        // Background stays black outside the splat square.
        assert_eq!(roi.pixels.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(roi.depth_buffer[0], 0.0);
    }

    #[test]
    fn z_buffer_keeps_nearer_point() {
        let centroid = Point3::new(0.0, 0.0, 10.0);
        let cfg = ViewConfig { n_views: 1, ..default_cfg() };
        let cam = place_cameras(&centroid, &cfg).unwrap().remove(0);
        let cloud = ColoredPointCloud {
            points: vec![Point3::new(0.0, 0.0, 10.5), Point3::new(0.0, 0.0, 9.5)],
            colors: vec![[255, 0, 0], [0, 0, 255]],
        };
        let roi = render_view(&cloud, &cam, &cfg);
        let center = (to_pixel(cam.principal.0) as u32, to_pixel(cam.principal.1) as u32);
        assert_eq!(roi.pixels.get_pixel(center.0, center.1).0, [0, 0, 255]);
    }

    #[test]
    fn depth_ties_keep_lowest_index() {
        let centroid = Point3::new(0.0, 0.0, 10.0);
        let cfg = ViewConfig { n_views: 1, ..default_cfg() };
        let cam = place_cameras(&centroid, &cfg).unwrap().remove(0);
        let cloud = ColoredPointCloud {
            points: vec![centroid, centroid],
            colors: vec![[10, 10, 10], [200, 200, 200]],
        };
        let roi = render_view(&cloud, &cam, &cfg);
        let center = (to_pixel(cam.principal.0) as u32, to_pixel(cam.principal.1) as u32);
        assert_eq!(roi.pixels.get_pixel(center.0, center.1).0, [10, 10, 10]);
    }

    #[test]
    fn repeated_renders_are_byte_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut cloud = ColoredPointCloud::default();
        for _ in 0..1000 {
            cloud.points.push(Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(8.0..12.0),
            ));
            cloud.colors.push([rng.gen(), rng.gen(), rng.gen()]);
        }
        let det = Detection3D::new(Point3::new(0.0, 0.0, 10.0), (0.6, 1.8, 0.6), 0.0, 0.9);
        let cfg = default_cfg();
        let a = synthesize_views(&cloud, &det, &cfg).unwrap();
        let b = synthesize_views(&cloud, &det, &cfg).unwrap();
        for (ia, ib) in a.images.iter().zip(&b.images) {
            assert_eq!(ia.pixels.as_raw(), ib.pixels.as_raw());
            assert_eq!(ia.depth_buffer, ib.depth_buffer);
        }
    }

    #[test]
    fn synthesize_defaults_yield_eleven_roi_images() {
        let cloud = ColoredPointCloud {
            points: vec![Point3::new(0.0, 0.0, 10.0)],
            colors: vec![[1, 2, 3]],
        };
        let det = Detection3D::new(Point3::new(0.0, 0.0, 10.0), (0.6, 1.8, 0.6), 0.0, 0.9);
        let set = synthesize_views(&cloud, &det, &default_cfg()).unwrap();
        assert_eq!(set.images.len(), 11);
        assert_eq!(set.cameras.len(), 11);
        assert_eq!(set.object_viewing_angle_alpha, 0.0);
        for img in &set.images {
            assert_eq!(img.pixels.width(), 224);
            assert_eq!(img.pixels.height(), 224);
        }
    }

    #[test]
    fn three_views_hit_the_arc_endpoints() {
        let det = Detection3D::new(Point3::new(2.0, 0.1, 9.0), (0.6, 1.8, 0.6), 0.0, 0.9);
        let cloud = ColoredPointCloud {
            points: vec![det.centroid],
            colors: vec![[1, 2, 3]],
        };
        let cfg = ViewConfig { n_views: 3, ..default_cfg() };
        let set = synthesize_views(&cloud, &det, &cfg).unwrap();
        let rhos: Vec<f64> = set.cameras.iter().map(|c| c.azimuth_offset.to_degrees()).collect();
        assert_relative_eq!(rhos[0], -25.0, epsilon = 1e-9);
        assert_relative_eq!(rhos[1], 0.0, epsilon = 1e-9);
        assert_relative_eq!(rhos[2], 25.0, epsilon = 1e-9);
    }

    #[test]
    fn roi_crop_full_image_is_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut img = image::RgbImage::new(32, 24);
        for p in img.pixels_mut() {
            *p = image::Rgb([rng.gen(), rng.gen(), rng.gen()]);
        }
        let cfg = ViewConfig { roi_width: 32, roi_height: 24, ..default_cfg() };
        let crop = roi_crop(&img, &Box2D::new(0.0, 0.0, 32.0, 24.0), &cfg).unwrap();
        assert_eq!(crop.pixels.as_raw(), img.as_raw());
    }

    #[test]
    fn roi_crop_outside_image_is_rejected() {
        let img = image::RgbImage::new(32, 24);
        let err =
            roi_crop(&img, &Box2D::new(40.0, 0.0, 50.0, 10.0), &default_cfg()).unwrap_err();
        assert!(matches!(err, ViewSynthesisError::EmptyIntersection));
    }

    #[test]
    fn roi_crop_downscale_of_constant_image_is_constant() {
        let img = image::RgbImage::from_pixel(64, 64, image::Rgb([77, 88, 99]));
        let cfg = ViewConfig { roi_width: 32, roi_height: 32, ..default_cfg() };
        let crop = roi_crop(&img, &Box2D::new(0.0, 0.0, 64.0, 64.0), &cfg).unwrap();
        assert!(crop.pixels.pixels().all(|p| p.0 == [77, 88, 99]));
    }
}
