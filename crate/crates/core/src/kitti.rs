//! KITTI-format file I/O: calibration, labels, LiDAR binaries and frames.
//!
//! Only the `P2` projection matrix is consumed from calibration files. When a
//! `Tr_velo_to_cam` extrinsic is present, LiDAR scans are transformed into the
//! camera frame on load; otherwise scans are assumed to already be expressed
//! in the (rectified) camera frame. Angles outside `[-pi, pi]` in input files
//! are wrapped, not rejected. Text output uses fixed 6-decimal formatting.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector4};
use thiserror::Error;

use crate::geometry::{Box2D, Point3};
use crate::orientation::wrap_angle;

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("missing key {0:?} in calibration text")]
    MissingKey(&'static str),
    #[error("malformed number {token:?} on line {line}")]
    MalformedNumber { token: String, line: usize },
    #[error("line {line} has {got} fields, expected 15 or 16")]
    FieldCount { line: usize, got: usize },
    #[error("LiDAR binary length {0} is not a multiple of 16 bytes")]
    TruncatedRecord(usize),
    #[error("calibration P2 is degenerate (singular 3x3 block or non-positive focal)")]
    DegenerateCalibration,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

/// Camera projection matrix plus optional LiDAR-to-camera extrinsic.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// 3x4 projection from metric camera coordinates to pixels.
    pub p_cam: Matrix3x4<f64>,
    /// Optional 4x4 rigid transform taking LiDAR-frame points to the camera frame.
    pub velo_to_cam: Option<Matrix4<f64>>,
}

impl Calibration {
    /// Validates that the 3x3 left block is invertible and both focal terms
    /// are positive.
    pub fn new(p_cam: Matrix3x4<f64>) -> Result<Self, KittiError> {
        let calib = Self { p_cam, velo_to_cam: None };
        if calib.left_block().determinant().abs() < 1e-12
            || p_cam[(0, 0)] <= 0.0
            || p_cam[(1, 1)] <= 0.0
        {
            return Err(KittiError::DegenerateCalibration);
        }
        Ok(calib)
    }

    pub fn with_velo_to_cam(mut self, tr: Matrix4<f64>) -> Self {
        self.velo_to_cam = Some(tr);
        self
    }

    /// The 3x3 left block of the projection matrix.
    pub fn left_block(&self) -> Matrix3<f64> {
        self.p_cam.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Transform a LiDAR-frame point into camera coordinates.
    pub fn lidar_to_camera(&self, p: &Point3) -> Point3 {
        match &self.velo_to_cam {
            Some(tr) => {
                let v = tr * Vector4::new(p.x, p.y, p.z, 1.0);
                Point3::new(v.x, v.y, v.z)
            }
            None => *p,
        }
    }
}

/// One LiDAR return: position in the sensor frame plus intensity in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

/// A full LiDAR sweep. May be empty; non-finite points are dropped on read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LidarScan {
    pub points: Vec<LidarPoint>,
}

impl LidarScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points as camera-frame positions, applying the calibration extrinsic.
    pub fn camera_points(&self, calib: &Calibration) -> Vec<Point3> {
        self.points
            .iter()
            .map(|p| {
                calib.lidar_to_camera(&Point3::new(f64::from(p.x), f64::from(p.y), f64::from(p.z)))
            })
            .collect()
    }
}

/// One line of a KITTI label file.
///
/// `location` is the bottom-face center of the 3D box in camera coordinates;
/// `dimensions` is (height, width, length). `rotation_y` and `alpha` are
/// wrapped into `[-pi, pi)` on parse.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class_name: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox2d: Box2D,
    /// (height, width, length) in meters.
    pub dimensions: (f64, f64, f64),
    /// Bottom-face center (x, y, z) in camera coordinates.
    pub location: (f64, f64, f64),
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    /// Box center (the 3D centroid), half the box height above `location`.
    pub fn centroid(&self) -> Point3 {
        Point3::new(self.location.0, self.location.1 - self.dimensions.0 / 2.0, self.location.2)
    }
}

/// One capture: RGB image, LiDAR scan and calibration.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: image::RgbImage,
    pub scan: LidarScan,
    pub calib: Calibration,
    pub frame_id: String,
}

fn parse_real(token: &str, line: usize) -> Result<f64, KittiError> {
    token
        .parse::<f64>()
        .map_err(|_| KittiError::MalformedNumber { token: token.to_string(), line })
}

fn find_matrix_line<'a>(
    raw: &'a str,
    key: &'static str,
) -> Option<(usize, std::str::SplitWhitespace<'a>)> {
    for (idx, line) in raw.lines().enumerate() {
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some(first) if first == key || first == key.trim_end_matches(':') => {
                return Some((idx + 1, tokens));
            }
            _ => continue,
        }
    }
    None
}

/// Parse a KITTI calibration file. Requires a `P2:` line with 12 reals;
/// consumes `Tr_velo_to_cam:` (12 reals, homogenized) when present.
pub fn parse_calibration(raw_text: &str) -> Result<Calibration, KittiError> {
    let (line_no, tokens) = find_matrix_line(raw_text, "P2:").ok_or(KittiError::MissingKey("P2"))?;
    let mut vals = [0.0f64; 12];
    let mut count = 0;
    for tok in tokens {
        if count == 12 {
            break;
        }
        vals[count] = parse_real(tok, line_no)?;
        count += 1;
    }
    if count != 12 {
        return Err(KittiError::MalformedNumber { token: String::from("<eol>"), line: line_no });
    }
    let p_cam = Matrix3x4::from_row_slice(&vals);
    let mut calib = Calibration::new(p_cam)?;

    if let Some((tr_line, tokens)) = find_matrix_line(raw_text, "Tr_velo_to_cam:") {
        let mut tr_vals = [0.0f64; 12];
        let mut n = 0;
        for tok in tokens {
            if n == 12 {
                break;
            }
            tr_vals[n] = parse_real(tok, tr_line)?;
            n += 1;
        }
        if n != 12 {
            return Err(KittiError::MalformedNumber { token: String::from("<eol>"), line: tr_line });
        }
        let mut tr = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                tr[(r, c)] = tr_vals[r * 4 + c];
            }
        }
        calib = calib.with_velo_to_cam(tr);
    }
    Ok(calib)
}

/// Parse a KITTI label file: one record per nonempty line, 15 or 16
/// whitespace-separated fields (16th is the score).
pub fn parse_labels(raw_text: &str) -> Result<Vec<LabelRecord>, KittiError> {
    let mut records = Vec::new();
    for (idx, line) in raw_text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 15 && fields.len() != 16 {
            return Err(KittiError::FieldCount { line: line_no, got: fields.len() });
        }
        let f = |i: usize| parse_real(fields[i], line_no);
        records.push(LabelRecord {
            class_name: fields[0].to_string(),
            truncated: f(1)?,
            occluded: f(2)? as i32,
            alpha: wrap_angle(f(3)?).unwrap_or(0.0),
            bbox2d: Box2D::new(f(4)?, f(5)?, f(6)?, f(7)?),
            dimensions: (f(8)?, f(9)?, f(10)?),
            location: (f(11)?, f(12)?, f(13)?),
            rotation_y: wrap_angle(f(14)?).unwrap_or(0.0),
            score: if fields.len() == 16 { Some(f(15)?) } else { None },
        });
    }
    Ok(records)
}

/// Decode a KITTI velodyne binary: four little-endian f32 per point
/// (x, y, z, intensity). Non-finite points are dropped; intensity is clamped
/// to [0, 1].
pub fn read_lidar_bin(raw_bytes: &[u8]) -> Result<LidarScan, KittiError> {
    if raw_bytes.len() % 16 != 0 {
        return Err(KittiError::TruncatedRecord(raw_bytes.len()));
    }
    let mut points = Vec::with_capacity(raw_bytes.len() / 16);
    for chunk in raw_bytes.chunks_exact(16) {
        let read = |i: usize| f32::from_le_bytes(chunk[i * 4..i * 4 + 4].try_into().unwrap());
        let (x, y, z, intensity) = (read(0), read(1), read(2), read(3));
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            continue;
        }
        points.push(LidarPoint { x, y, z, intensity: intensity.clamp(0.0, 1.0) });
    }
    Ok(LidarScan { points })
}

/// Encode a scan back to the velodyne binary layout.
pub fn write_lidar_bin(scan: &LidarScan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.points.len() * 16);
    for p in &scan.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Serialize label records with fixed 6-decimal reals, one per line.
pub fn write_labels(records: &[LabelRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = write!(
            out,
            "{} {:.6} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            r.class_name,
            r.truncated,
            r.occluded,
            r.alpha,
            r.bbox2d.left,
            r.bbox2d.top,
            r.bbox2d.right,
            r.bbox2d.bottom,
            r.dimensions.0,
            r.dimensions.1,
            r.dimensions.2,
            r.location.0,
            r.location.1,
            r.location.2,
            r.rotation_y,
        );
        if let Some(s) = r.score {
            let _ = write!(out, " {s:.6}");
        }
        out.push('\n');
    }
    out
}

/// Load one frame from the standard KITTI directory layout
/// (`image_2/<id>.png`, `velodyne/<id>.bin`, `calib/<id>.txt`).
pub fn load_frame(root: &Path, frame_id: &str) -> Result<Frame, KittiError> {
    let calib_text = std::fs::read_to_string(root.join("calib").join(format!("{frame_id}.txt")))?;
    let calib = parse_calibration(&calib_text)?;
    let image = image::open(root.join("image_2").join(format!("{frame_id}.png")))?.to_rgb8();
    let bytes = std::fs::read(root.join("velodyne").join(format!("{frame_id}.bin")))?;
    let scan = read_lidar_bin(&bytes)?;
    Ok(Frame { image, scan, calib, frame_id: frame_id.to_string() })
}

/// Frame ids present under `root/image_2`, sorted.
pub fn list_frame_ids(root: &Path) -> Result<Vec<String>, KittiError> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(root.join("image_2"))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
