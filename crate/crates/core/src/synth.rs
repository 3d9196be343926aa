//! Synthetic frames with exact ground truth.
//!
//! Objects are vertical cylinders carrying an angular color stripe (the
//! marker) centered on the heading direction, so an image of the object
//! determines its yaw in closed form. LiDAR is simulated by ray casting from
//! the sensor origin, which samples only camera-facing surfaces; a ground
//! plane gives depth completion realistic support below objects. Scenes are
//! deterministic for a fixed seed, and frames can be written in the exact
//! KITTI directory layout so the parsers get exercised end to end.

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_point, Box2D, ColoredPointCloud, Point3};
use crate::kitti::{Calibration, Frame, LabelRecord, LidarPoint, LidarScan};
use crate::orientation::{
    encode_angle_vector, wrap_angle, AngleBinSet, AngleVector, OrientationError, ViewContext,
    ViewEstimator,
};
use crate::view_synthesis::{splat_cloud, RoiImage};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene has no objects")]
    EmptyScene,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("marker is not visible in the view")]
    MarkerNotVisible,
}

pub const DEFAULT_BASE_COLOR: [u8; 3] = [200, 60, 40];
pub const DEFAULT_MARKER_COLOR: [u8; 3] = [40, 220, 60];
pub const GROUND_COLOR: [u8; 3] = [90, 90, 90];

/// A cylinder pedestrian stand-in with an angular marker stripe at the yaw
/// direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthObjectSpec {
    /// Box center (x, y, z) in camera coordinates, meters.
    pub centroid: [f64; 3],
    /// Heading angle, radians.
    pub yaw: f64,
    #[serde(default = "default_radius")]
    pub body_radius: f64,
    #[serde(default = "default_height")]
    pub body_height: f64,
    /// Angular width of the marker stripe, radians.
    #[serde(default = "default_marker_width")]
    pub marker_width: f64,
    #[serde(default = "default_marker_color")]
    pub marker_color: [u8; 3],
    #[serde(default = "default_base_color")]
    pub base_color: [u8; 3],
}

fn default_radius() -> f64 {
    0.3
}
fn default_height() -> f64 {
    1.8
}
fn default_marker_width() -> f64 {
    40f64.to_radians()
}
fn default_marker_color() -> [u8; 3] {
    DEFAULT_MARKER_COLOR
}
fn default_base_color() -> [u8; 3] {
    DEFAULT_BASE_COLOR
}

impl SynthObjectSpec {
    pub fn new(centroid: Point3, yaw: f64) -> Self {
        Self {
            centroid: [centroid.x, centroid.y, centroid.z],
            yaw,
            body_radius: default_radius(),
            body_height: default_height(),
            marker_width: default_marker_width(),
            marker_color: DEFAULT_MARKER_COLOR,
            base_color: DEFAULT_BASE_COLOR,
        }
    }

    pub fn centroid(&self) -> Point3 {
        Point3::new(self.centroid[0], self.centroid[1], self.centroid[2])
    }

    /// Surface normal direction at surface angle `psi`; the marker stripe is
    /// centered where `psi == yaw`, and an object seen from the azimuth that
    /// equals its yaw shows the marker dead center (local yaw zero).
    fn surface_normal(psi: f64) -> (f64, f64) {
        (-psi.sin(), -psi.cos())
    }

    fn is_marker(&self, psi: f64) -> bool {
        wrap_angle(psi - self.yaw).map(|d| d.abs() <= self.marker_width / 2.0).unwrap_or(false)
    }

    /// Ground-truth label for this object.
    pub fn label(&self, calib: &Calibration, img_w: usize, img_h: usize) -> LabelRecord {
        let c = self.centroid();
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for i in 0..64 {
            let psi = 2.0 * std::f64::consts::PI * i as f64 / 64.0;
            let (nx, nz) = Self::surface_normal(psi);
            for dy in [-self.body_height / 2.0, self.body_height / 2.0] {
                let p = Point3::new(
                    c.x + self.body_radius * nx,
                    c.y + dy,
                    c.z + self.body_radius * nz,
                );
                if let Some((u, v, _)) = project_point(calib, &p) {
                    lo = (lo.0.min(u), lo.1.min(v));
                    hi = (hi.0.max(u), hi.1.max(v));
                }
            }
        }
        let bbox = Box2D::new(
            lo.0.max(0.0),
            lo.1.max(0.0),
            hi.0.min(img_w as f64),
            hi.1.min(img_h as f64),
        );
        LabelRecord {
            class_name: "Pedestrian".to_string(),
            truncated: 0.0,
            occluded: 0,
            alpha: wrap_angle(self.yaw - c.x.atan2(c.z)).unwrap_or(0.0),
            bbox2d: bbox,
            dimensions: (self.body_height, 2.0 * self.body_radius, 2.0 * self.body_radius),
            location: (c.x, c.y + self.body_height / 2.0, c.z),
            rotation_y: wrap_angle(self.yaw).unwrap_or(self.yaw),
            score: None,
        }
    }
}

/// LiDAR ray pattern and noise model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LidarPattern {
    pub rings: usize,
    /// Elevation range in radians; positive is downward (camera y).
    pub elevation_min: f64,
    pub elevation_max: f64,
    /// Azimuth step and half-span in radians, centered on the optical axis.
    pub azimuth_step: f64,
    pub azimuth_half_span: f64,
}

impl Default for LidarPattern {
    fn default() -> Self {
        Self {
            rings: 56,
            elevation_min: -0.05,
            elevation_max: 0.30,
            azimuth_step: 0.25f64.to_radians(),
            azimuth_half_span: 40f64.to_radians(),
        }
    }
}

/// Sensor noise: depth jitter along the ray plus random dropout.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    pub depth_sigma: f64,
    pub dropout_prob: f64,
}

/// A full synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSceneSpec {
    pub objects: Vec<SynthObjectSpec>,
    #[serde(default = "default_image_width")]
    pub image_width: usize,
    #[serde(default = "default_image_height")]
    pub image_height: usize,
    #[serde(default = "default_focal")]
    pub focal: f64,
    #[serde(default)]
    pub lidar: Option<LidarPattern>,
    #[serde(default)]
    pub noise: NoiseModel,
    /// Ground plane height in camera coordinates (y down).
    #[serde(default = "default_ground_y")]
    pub ground_y: f64,
}

fn default_image_width() -> usize {
    480
}
fn default_image_height() -> usize {
    256
}
fn default_focal() -> f64 {
    280.0
}
fn default_ground_y() -> f64 {
    1.65
}

impl SynthSceneSpec {
    pub fn new(objects: Vec<SynthObjectSpec>) -> Self {
        Self {
            objects,
            image_width: default_image_width(),
            image_height: default_image_height(),
            focal: default_focal(),
            lidar: None,
            noise: NoiseModel::default(),
            ground_y: default_ground_y(),
        }
    }

    /// Pinhole calibration with the principal point at the image center and
    /// the standard LiDAR-to-camera axis permutation as the extrinsic.
    pub fn calibration(&self) -> Calibration {
        let cx = (self.image_width as f64 - 1.0) / 2.0;
        let cy = (self.image_height as f64 - 1.0) / 2.0;
        let p = nalgebra::Matrix3x4::new(
            self.focal, 0.0, cx, 0.0, //
            0.0, self.focal, cy, 0.0, //
            0.0, 0.0, 1.0, 0.0,
        );
        Calibration::new(p).expect("positive focal").with_velo_to_cam(velo_to_cam())
    }

    pub fn calibration_text(&self) -> String {
        let p = self.calibration().p_cam;
        let mut s = String::from("P2:");
        for r in 0..3 {
            for c in 0..4 {
                s.push_str(&format!(" {}", p[(r, c)]));
            }
        }
        s.push('\n');
        s.push_str("Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n");
        s
    }
}

/// LiDAR x-forward/y-left/z-up to camera x-right/y-down/z-forward.
fn velo_to_cam() -> Matrix4<f64> {
    let mut tr = Matrix4::zeros();
    tr[(0, 1)] = -1.0;
    tr[(1, 2)] = -1.0;
    tr[(2, 0)] = 1.0;
    tr[(3, 3)] = 1.0;
    tr
}

fn cam_to_velo_point(p: &Point3) -> LidarPoint {
    // Inverse of the axis permutation above.
    LidarPoint { x: p.z as f32, y: -p.x as f32, z: -p.y as f32, intensity: 0.5 }
}

/// Nearest positive ray parameter where `origin + t * dir` meets the cylinder
/// side surface, if any.
fn ray_cylinder(dir: &Point3, obj: &SynthObjectSpec) -> Option<f64> {
    let c = obj.centroid();
    let a = dir.x * dir.x + dir.z * dir.z;
    if a < 1e-12 {
        return None;
    }
    let b = -2.0 * (dir.x * c.x + dir.z * c.z);
    let q = c.x * c.x + c.z * c.z - obj.body_radius * obj.body_radius;
    let disc = b * b - 4.0 * a * q;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    if t <= 0.0 {
        return None;
    }
    let y = t * dir.y;
    if (y - c.y).abs() <= obj.body_height / 2.0 {
        Some(t)
    } else {
        None
    }
}

/// Densely sample the camera-facing half of each object's surface, colored.
fn sample_object_surfaces(spec: &SynthSceneSpec) -> ColoredPointCloud {
    let mut cloud = ColoredPointCloud::default();
    for obj in &spec.objects {
        let c = obj.centroid();
        let (n_az, n_y) = (288usize, 128usize);
        for i in 0..n_az {
            let psi = 2.0 * std::f64::consts::PI * (i as f64 + 0.3371) / n_az as f64;
            let (nx, nz) = SynthObjectSpec::surface_normal(psi);
            let color = if obj.is_marker(wrap_angle(psi).unwrap_or(psi)) {
                obj.marker_color
            } else {
                obj.base_color
            };
            for k in 0..n_y {
                let y = c.y - obj.body_height / 2.0
                    + obj.body_height * (k as f64 + 0.5) / n_y as f64;
                let p = Point3::new(
                    c.x + obj.body_radius * nx,
                    y,
                    c.z + obj.body_radius * nz,
                );
                // Camera-facing only: surface normal against the view ray.
                if nx * (-p.x) + nz * (-p.z) <= 0.0 {
                    continue;
                }
                cloud.points.push(p);
                cloud.colors.push(color);
            }
        }
    }
    cloud
}

/// Generate one frame plus its exact ground-truth labels. Deterministic for
/// a fixed seed.
pub fn generate_frame(
    spec: &SynthSceneSpec,
    seed: u64,
) -> Result<(Frame, Vec<LabelRecord>), SynthError> {
    if spec.objects.is_empty() {
        return Err(SynthError::EmptyScene);
    }
    for (i, obj) in spec.objects.iter().enumerate() {
        if obj.centroid()[2] <= 0.0 {
            return Err(SynthError::InvalidScene(format!("object {i} is behind the camera")));
        }
        if obj.body_radius <= 0.0 || obj.body_height <= 0.0 {
            return Err(SynthError::InvalidScene(format!("object {i} has non-positive size")));
        }
        if !(obj.marker_width > 0.0 && obj.marker_width < std::f64::consts::PI) {
            return Err(SynthError::InvalidScene(format!("object {i} marker width out of range")));
        }
    }
    let calib = spec.calibration();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = spec.lidar.clone().unwrap_or_default();

    // LiDAR ray casting from the sensor origin.
    let mut scan = LidarScan::default();
    let n_az = (2.0 * pattern.azimuth_half_span / pattern.azimuth_step).round() as usize;
    for ring in 0..pattern.rings {
        let elev = pattern.elevation_min
            + (pattern.elevation_max - pattern.elevation_min) * ring as f64
                / (pattern.rings.max(2) - 1) as f64;
        for ai in 0..n_az {
            let az = -pattern.azimuth_half_span + pattern.azimuth_step * ai as f64;
            let dir = Point3::new(az.sin() * elev.cos(), elev.sin(), az.cos() * elev.cos());
            let mut best_t = f64::INFINITY;
            for obj in &spec.objects {
                if let Some(t) = ray_cylinder(&dir, obj) {
                    if t < best_t {
                        best_t = t;
                    }
                }
            }
            if dir.y > 1e-9 {
                let t = spec.ground_y / dir.y;
                if t < best_t {
                    best_t = t;
                }
            }
            if !best_t.is_finite() {
                continue;
            }
            if spec.noise.dropout_prob > 0.0 && rng.gen_bool(spec.noise.dropout_prob) {
                continue;
            }
            let t = if spec.noise.depth_sigma > 0.0 {
                (best_t + rng.sample::<f64, _>(rand_distr::StandardNormal) * spec.noise.depth_sigma)
                    .max(0.1)
            } else {
                best_t
            };
            let p = Point3::new(dir.x * t, dir.y * t, dir.z * t);
            scan.points.push(cam_to_velo_point(&p));
        }
    }

    // RGB image: analytic ground per pixel, then object splats on top.
    let (w, h) = (spec.image_width, spec.image_height);
    let mut buf = RoiImage::new(w, h, 0);
    let cy = (h as f64 - 1.0) / 2.0;
    for py in 0..h {
        let dy = (py as f64 - cy) / spec.focal;
        if dy <= 1e-9 {
            continue;
        }
        let z = spec.ground_y / dy;
        for px in 0..w {
            buf.depth_buffer[py * w + px] = z as f32;
            buf.pixels.put_pixel(px as u32, py as u32, image::Rgb(GROUND_COLOR));
        }
    }
    let surface = sample_object_surfaces(spec);
    splat_cloud(&surface, |p| project_point(&calib, p), &mut buf, |_| 1);

    let labels = spec.objects.iter().map(|o| o.label(&calib, w, h)).collect();
    let frame = Frame {
        image: buf.pixels,
        scan,
        calib,
        frame_id: format!("{seed:06}"),
    };
    Ok((frame, labels))
}

/// Write a frame in the KITTI directory layout consumed by the loaders.
pub fn write_frame_kitti(
    root: &std::path::Path,
    spec: &SynthSceneSpec,
    frame: &Frame,
    labels: &[LabelRecord],
) -> std::io::Result<()> {
    for sub in ["image_2", "velodyne", "calib", "label_2"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    let id = &frame.frame_id;
    frame
        .image
        .save(root.join("image_2").join(format!("{id}.png")))
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    std::fs::write(
        root.join("velodyne").join(format!("{id}.bin")),
        crate::kitti::write_lidar_bin(&frame.scan),
    )?;
    std::fs::write(root.join("calib").join(format!("{id}.txt")), spec.calibration_text())?;
    std::fs::write(
        root.join("label_2").join(format!("{id}.txt")),
        crate::kitti::write_labels(labels),
    )?;
    Ok(())
}

// ── Closed-form marker estimator ──────────────────────────────────────────────

/// Recovers the view-local yaw from a rendered ROI by locating the marker
/// stripe on the cylinder silhouette.
///
/// A surface point at local angle `g` projects at a horizontal offset of
/// `-R sin(g) / (1 - (R/z) cos(g))` from the axis. Normalizing by the
/// silhouette half-width and solving gives an arcsine expression per stripe
/// edge; the local yaw is the midpoint of the two edge angles. When the
/// camera focal length is known, `R/z` is recovered from the silhouette
/// width and the perspective term is corrected for; otherwise the estimator
/// degrades to the plain arcsine of the normalized offset. Edges too close
/// to the silhouette boundary are ill-conditioned and fall back to the
/// opposite edge plus the known stripe half-width.
#[derive(Debug, Clone)]
pub struct MarkerEstimator {
    pub base_color: [u8; 3],
    pub marker_color: [u8; 3],
    /// Half the stripe's angular width, when known.
    pub marker_half_width: Option<f64>,
    /// Splat half-side used by the renderer; corrected out of the extents.
    pub splat_margin: f64,
    /// Focal length of the rendering camera, for perspective correction.
    pub focal: Option<f64>,
    /// Vertical fraction of the ROI scanned for extents. The central band
    /// avoids depth-completion smear where the body meets the ground.
    pub row_band: (f64, f64),
}

impl Default for MarkerEstimator {
    fn default() -> Self {
        Self {
            base_color: DEFAULT_BASE_COLOR,
            marker_color: DEFAULT_MARKER_COLOR,
            marker_half_width: Some(default_marker_width() / 2.0),
            splat_margin: 2.0,
            focal: Some(crate::view_synthesis::ViewConfig::default().focal()),
            row_band: (0.25, 0.75),
        }
    }
}

/// Solve `-sin(g) sqrt(1-k^2) + s k cos(g) = s` for the edge angle `g`,
/// where `s` is the normalized offset and `k = R/z`. `k = 0` reduces to
/// `g = -asin(s)`.
fn edge_angle(s: f64, k: f64) -> f64 {
    let a = -(1.0 - k * k).sqrt();
    let b = s * k;
    let amp = a.hypot(b);
    let phi = b.atan2(a);
    let val = (s / amp).clamp(-1.0, 1.0);
    let g1 = wrap_angle(val.asin() - phi).unwrap_or(0.0);
    let g2 = wrap_angle(std::f64::consts::PI - val.asin() - phi).unwrap_or(0.0);
    if g1.abs() <= g2.abs() {
        g1
    } else {
        g2
    }
}

impl MarkerEstimator {
    pub fn estimate_local_yaw(&self, roi: &RoiImage) -> Result<f64, SynthError> {
        let (w, h) = (roi.pixels.width() as usize, roi.pixels.height() as usize);
        let y_lo = ((h as f64 * self.row_band.0) as usize).min(h.saturating_sub(1));
        let y_hi = ((h as f64 * self.row_band.1) as usize).clamp(y_lo + 1, h);
        let mut body_lo = usize::MAX;
        let mut body_hi = 0usize;
        let mut marker_lo = usize::MAX;
        let mut marker_hi = 0usize;
        let mut marker_cols = 0usize;
        for x in 0..w {
            let mut body = false;
            let mut marker = false;
            for y in y_lo..y_hi {
                let c = roi.pixels.get_pixel(x as u32, y as u32).0;
                if c == self.marker_color {
                    marker = true;
                    body = true;
                } else if c == self.base_color {
                    body = true;
                }
            }
            if body {
                body_lo = body_lo.min(x);
                body_hi = body_hi.max(x);
            }
            if marker {
                marker_lo = marker_lo.min(x);
                marker_hi = marker_hi.max(x);
                marker_cols += 1;
            }
        }
        if body_lo == usize::MAX || marker_cols < 2 {
            return Err(SynthError::MarkerNotVisible);
        }
        let m = self.splat_margin;
        let sil_lo = body_lo as f64 + m;
        let sil_hi = body_hi as f64 - m;
        let radius = (sil_hi - sil_lo) / 2.0;
        if radius < 3.0 {
            return Err(SynthError::MarkerNotVisible);
        }
        let center = (sil_lo + sil_hi) / 2.0;
        // The z-buffer competition between splats shifts each stripe edge by
        // the splat margin: on a convex body the surface nearer the camera
        // (toward the silhouette center) wins overlapping pixels, so both
        // edges move away from the center by m where the stripe borders
        // farther surface, and into the stripe where it borders nearer
        // surface. Net effect: shift each measured edge back toward the
        // center by m.
        let toward_center = |x: f64| {
            if x < center {
                x + m
            } else if x > center {
                x - m
            } else {
                x
            }
        };
        let mut mk_lo = toward_center(marker_lo as f64);
        let mut mk_hi = toward_center(marker_hi as f64);
        if mk_hi < mk_lo {
            // Correction collapsed a very thin stripe; keep its center.
            let mid = (marker_lo + marker_hi) as f64 / 2.0;
            mk_lo = mid;
            mk_hi = mid;
        }
        let s_lo = ((mk_lo - center) / radius).clamp(-1.0, 1.0);
        let s_hi = ((mk_hi - center) / radius).clamp(-1.0, 1.0);
        // R/z from the silhouette width when the focal length is known.
        let k = match self.focal {
            Some(f) if f > 0.0 => {
                let q = radius / f;
                q / (1.0 + q * q).sqrt()
            }
            _ => 0.0,
        };
        // Offset decreases with the edge angle, so the right edge (larger x)
        // is the smaller angle.
        let g_small = edge_angle(s_hi, k);
        let g_large = edge_angle(s_lo, k);
        let extreme = |s: f64| s.abs() > 0.95;
        let local = match (extreme(s_hi), extreme(s_lo), self.marker_half_width) {
            (true, false, Some(hw)) => g_large - hw,
            (false, true, Some(hw)) => g_small + hw,
            _ => (g_small + g_large) / 2.0,
        };
        Ok(local)
    }
}

impl ViewEstimator for MarkerEstimator {
    fn estimate_view(
        &self,
        roi: &RoiImage,
        _ctx: &ViewContext,
    ) -> Result<(AngleVector, AngleBinSet), OrientationError> {
        let local = self
            .estimate_local_yaw(roi)
            .map_err(|e| OrientationError::ShapeMismatch(e.to_string()))?;
        let vec = encode_angle_vector(local)?;
        let bins = AngleBinSet::from_angle(local, 8)?;
        Ok((vec, bins))
    }
}

/// Random scenes whose object markers face the camera arc (yaw within half a
/// radian of the viewing angle), suitable for end-to-end pipeline runs.
pub fn random_scenes(
    count: usize,
    objects: usize,
    noise: NoiseModel,
    seed: u64,
) -> Vec<SynthSceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = objects.max(1);
            let objs: Vec<SynthObjectSpec> = (0..n)
                .map(|j| {
                    let spread = 5.0 * (j as f64 - (n as f64 - 1.0) / 2.0);
                    let x = spread + rng.gen_range(-1.0..1.0);
                    let z = rng.gen_range(8.0..14.0);
                    let alpha = x.atan2(z);
                    let yaw = alpha + rng.gen_range(-0.5..0.5);
                    SynthObjectSpec::new(Point3::new(x, 0.6, z), yaw)
                })
                .collect();
            let mut spec = SynthSceneSpec::new(objs);
            spec.noise = noise;
            spec
        })
        .collect()
}

/// Build a labeled `(view, local yaw)` dataset by rendering marker cylinders
/// straight on from a single canonical camera. Local yaws are drawn uniformly
/// from `[-yaw_range, yaw_range]`.
pub fn make_marker_roi_dataset(
    n: usize,
    view_cfg: &crate::view_synthesis::ViewConfig,
    yaw_range: f64,
    seed: u64,
) -> Vec<(RoiImage, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let single = crate::view_synthesis::ViewConfig { n_views: 1, ..view_cfg.clone() };
    for _ in 0..n {
        let local_yaw = rng.gen_range(-yaw_range..yaw_range);
        let centroid = Point3::new(0.0, rng.gen_range(-0.1..0.1), rng.gen_range(8.0..12.0));
        let obj = SynthObjectSpec {
            body_radius: rng.gen_range(0.25..0.35),
            body_height: rng.gen_range(1.6..2.0),
            ..SynthObjectSpec::new(centroid, local_yaw)
        };
        // A camera on the viewing ray sees local yaw = yaw - alpha = yaw here.
        let spec = SynthSceneSpec::new(vec![obj.clone()]);
        let cloud = sample_object_surfaces(&spec);
        let det = crate::evaluation::Detection3D::new(
            centroid,
            (2.0 * obj.body_radius, obj.body_height, 2.0 * obj.body_radius),
            local_yaw,
            1.0,
        );
        let set = crate::view_synthesis::synthesize_views(&cloud, &det, &single)
            .expect("centroid in front of camera");
        let mut img = set.images.into_iter().next().expect("one view");
        img.source_view = 0;
        out.push((img, local_yaw));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Detection3D;
    use crate::kitti::parse_calibration;
    use crate::view_synthesis::{synthesize_views, ViewConfig};

    fn one_object_scene(yaw: f64) -> SynthSceneSpec {
        SynthSceneSpec::new(vec![SynthObjectSpec::new(Point3::new(0.0, 0.6, 10.0), yaw)])
    }

    #[test]
    fn empty_scene_is_rejected() {
        let spec = SynthSceneSpec::new(vec![]);
        assert!(matches!(generate_frame(&spec, 0), Err(SynthError::EmptyScene)));
    }

    #[test]
    fn frontal_marker_is_visible_and_centered() {
        let spec = one_object_scene(0.0);
        let (frame, labels) = generate_frame(&spec, 1).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].rotation_y, 0.0);
        // Marker pixels exist and straddle the image center column.
        let marker_cols: Vec<u32> = frame
            .image
            .enumerate_pixels()
            .filter(|(_, _, p)| p.0 == DEFAULT_MARKER_COLOR)
            .map(|(x, _, _)| x)
            .collect();
        assert!(!marker_cols.is_empty());
        let mid = (frame.image.width() - 1) as f64 / 2.0;
        let lo = *marker_cols.iter().min().unwrap() as f64;
        let hi = *marker_cols.iter().max().unwrap() as f64;
        assert!(lo <= mid && mid <= hi, "marker [{lo}, {hi}] should straddle {mid}");
    }

    #[test]
    fn away_facing_marker_is_absent() {
        let spec = one_object_scene(std::f64::consts::PI);
        let (frame, _) = generate_frame(&spec, 1).unwrap();
        let any_marker = frame.image.pixels().any(|p| p.0 == DEFAULT_MARKER_COLOR);
        assert!(!any_marker);
    }

    #[test]
    fn same_seed_reproduces_frame_exactly() {
        let mut spec = one_object_scene(0.4);
        spec.noise = NoiseModel { depth_sigma: 0.05, dropout_prob: 0.1 };
        let (a, _) = generate_frame(&spec, 7).unwrap();
        let (b, _) = generate_frame(&spec, 7).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.scan, b.scan);
    }

    #[test]
    fn lidar_scan_lands_on_object_and_ground() {
        let spec = one_object_scene(0.0);
        let (frame, _) = generate_frame(&spec, 3).unwrap();
        assert!(!frame.scan.is_empty());
        let cam_pts = frame.scan.camera_points(&frame.calib);
        let near_object = cam_pts
            .iter()
            .filter(|p| (p.x.powi(2) + (p.z - 10.0).powi(2)).sqrt() < 0.4)
            .count();
        let on_ground = cam_pts.iter().filter(|p| (p.y - spec.ground_y).abs() < 1e-6).count();
        assert!(near_object > 50, "object returns: {near_object}");
        assert!(on_ground > 500, "ground returns: {on_ground}");
    }

    #[test]
    fn lidar_samples_only_camera_facing_surfaces() {
        let spec = one_object_scene(0.3);
        let (frame, _) = generate_frame(&spec, 5).unwrap();
        let c = spec.objects[0].centroid();
        for p in frame.scan.camera_points(&frame.calib) {
            let (dx, dz) = (p.x - c.x, p.z - c.z);
            let r = (dx * dx + dz * dz).sqrt();
            if r < spec.objects[0].body_radius + 0.01 && (p.y - c.y).abs() < 0.9 {
                // Outward normal must face the origin.
                let dot = dx * (-p.x) + dz * (-p.z);
                assert!(dot > -1e-9, "occluded-hemisphere sample at {p:?}");
            }
        }
    }

    #[test]
    fn calibration_text_roundtrips_through_parser() {
        let spec = one_object_scene(0.0);
        let calib = parse_calibration(&spec.calibration_text()).unwrap();
        assert_eq!(calib.p_cam, spec.calibration().p_cam);
        assert!(calib.velo_to_cam.is_some());
    }

    fn render_single_view(yaw: f64, view_azimuth_offset: f64) -> RoiImage {
        // Object at azimuth 0; a one-camera config with rho pinned by hand.
        let obj = SynthObjectSpec::new(Point3::new(0.0, 0.0, 10.0), yaw);
        let spec = SynthSceneSpec::new(vec![obj.clone()]);
        let cloud = sample_object_surfaces(&spec);
        let det = Detection3D::new(obj.centroid(), (0.6, 1.8, 0.6), yaw, 1.0);
        let cfg = ViewConfig {
            n_views: 2,
            rho_max: view_azimuth_offset.abs().max(1e-3),
            ..ViewConfig::default()
        };
        let set = synthesize_views(&cloud, &det, &cfg).unwrap();
        let idx = if view_azimuth_offset <= 0.0 { 0 } else { 1 };
        set.images[idx].clone()
    }

    #[test]
    fn marker_estimator_recovers_frontal_yaw() {
        let est = MarkerEstimator::default();
        let roi = render_single_view(0.0, -1e-3);
        let local = est.estimate_local_yaw(&roi).unwrap();
        assert!(local.abs() < 2f64.to_radians(), "got {} deg", local.to_degrees());
    }

    #[test]
    fn marker_estimator_tracks_view_azimuth() {
        let est = MarkerEstimator::default();
        // Viewing a yaw-0 object from azimuth +10 deg gives local yaw -10 deg.
        let roi = render_single_view(0.0, 10f64.to_radians());
        let local = est.estimate_local_yaw(&roi).unwrap();
        assert!(
            (local + 10f64.to_radians()).abs() < 3f64.to_radians(),
            "got {} deg",
            local.to_degrees()
        );
    }

    #[test]
    fn marker_away_view_reports_not_visible() {
        let est = MarkerEstimator::default();
        let roi = render_single_view(std::f64::consts::PI, 0.0);
        assert!(matches!(est.estimate_local_yaw(&roi), Err(SynthError::MarkerNotVisible)));
    }

    #[test]
    fn marker_dataset_trains_targets_in_range() {
        let data = make_marker_roi_dataset(8, &ViewConfig::default(), 0.8, 11);
        assert_eq!(data.len(), 8);
        for (roi, yaw) in &data {
            assert_eq!(roi.pixels.width(), 224);
            assert!(yaw.abs() <= 0.8);
        }
        // The estimator agrees with the dataset labels.
        let est = MarkerEstimator::default();
        for (roi, yaw) in &data {
            let got = est.estimate_local_yaw(roi).unwrap();
            assert!(
                (got - yaw).abs() < 4f64.to_radians(),
                "label {} deg vs estimate {} deg",
                yaw.to_degrees(),
                got.to_degrees()
            );
        }
    }
}

