//! Frame-level orchestration: densify once per frame, render virtual views
//! per detection, estimate and fuse orientations, then suppress false
//! positives against a 2D detector.
//!
//! Only the yaw of each detection is overwritten; centroid and dimensions
//! pass through untouched. Per-object failures (no usable views, degenerate
//! fusion with no usable single view) fall back to the input yaw and are
//! counted rather than raised.

use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::depth_completion::{densify_with_stats, DensifierConfig, DensifyError};
use crate::evaluation::{
    suppress_false_positives, Detection2D, Detection3D, SuppressionConfig,
};
use crate::geometry::{backproject_depth, colorize, project_points, GeometryError};
use crate::kitti::Frame;
use crate::orientation::{
    decode_angle_vector, encode_angle_vector, fuse_estimates_with, local_to_global_yaw,
    wrap_angle, AngleBinSet, AngleVector, LossWeights, OrientationError, ViewContext,
    ViewEstimator,
};
use crate::view_synthesis::{synthesize_views, ViewConfig, ViewSynthesisError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Densify(#[from] DensifyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    View(#[from] ViewSynthesisError),
    #[error(transparent)]
    Orientation(#[from] OrientationError),
}

/// Whether per-view estimates are expressed relative to the view azimuth or
/// directly in the global frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EstimationFrame {
    ViewLocal,
    Global,
}

/// Estimator selection for the CLI and config files.
#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorKind {
    /// Trained linear model loaded from a file.
    External(std::path::PathBuf),
    /// Zero-initialized toy model (mostly useful for plumbing tests).
    Toy,
    /// Ground-truth-fed estimator with optional wrapped-normal noise.
    Oracle { noise_sigma: f64 },
    /// Closed-form marker-stripe estimator for synthetic scenes.
    Marker,
}

/// Everything the frame pipeline needs.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub view: ViewConfig,
    pub densifier: DensifierConfig,
    pub suppression: SuppressionConfig,
    pub weights: LossWeights,
    /// Only the top-k detections by score get the multi-view treatment.
    pub top_k_per_frame: usize,
    pub estimator: EstimatorKind,
    pub estimation_frame: EstimationFrame,
    /// Normalize per-view vectors before fusion.
    pub fuse_normalized: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            view: ViewConfig::default(),
            densifier: DensifierConfig::default(),
            suppression: SuppressionConfig::default(),
            weights: LossWeights::default(),
            top_k_per_frame: 16,
            estimator: EstimatorKind::Oracle { noise_sigma: 0.0 },
            estimation_frame: EstimationFrame::ViewLocal,
            fuse_normalized: true,
            seed: 0,
        }
    }
}

/// Wall-clock totals for the pipeline stages of one frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimes {
    pub densify: Duration,
    pub render: Duration,
    pub estimate: Duration,
    pub suppress: Duration,
}

/// Counters and timings from one frame run.
#[derive(Debug, Clone, Default)]
pub struct FrameStats {
    pub times: StageTimes,
    pub processed_objects: usize,
    pub fallback_objects: usize,
    pub failed_views: usize,
    pub dropped_lidar_points: usize,
    pub clamped_depths: usize,
}

/// Run the full pipeline on one frame. Detections keep their order; only yaw,
/// score (via suppression) and, when configured, the 2D box change.
pub fn run_frame(
    frame: &Frame,
    dets3d: &[Detection3D],
    dets2d: &[Detection2D],
    estimator: &dyn ViewEstimator,
    cfg: &PipelineConfig,
) -> Result<(Vec<Detection3D>, FrameStats), PipelineError> {
    let mut stats = FrameStats::default();
    if dets3d.is_empty() {
        return Ok((Vec::new(), stats));
    }

    // Densify once per frame and colorize the reconstruction.
    let t = Instant::now();
    let cam_points = frame.scan.camera_points(&frame.calib);
    let (w, h) = (frame.image.width() as usize, frame.image.height() as usize);
    let (sparse, dropped) = project_points(&cam_points, &frame.calib, w, h);
    stats.dropped_lidar_points = dropped;
    let (dense, dstats) = densify_with_stats(&sparse, &cfg.densifier)?;
    stats.clamped_depths = dstats.clamped;
    let points = backproject_depth(&dense, &frame.calib)?;
    let cloud = colorize(&points, &frame.image, &frame.calib);
    stats.times.densify = t.elapsed();

    // Top-k by score; the rest pass through untouched.
    let mut order: Vec<usize> = (0..dets3d.len()).collect();
    order.sort_by(|&a, &b| dets3d[b].score.total_cmp(&dets3d[a].score).then(a.cmp(&b)));
    order.truncate(cfg.top_k_per_frame);
    let selected = order;

    let mut out = dets3d.to_vec();
    for &i in &selected {
        stats.processed_objects += 1;
        let det = &dets3d[i];
        let t_render = Instant::now();
        let views = match synthesize_views(&cloud, det, &cfg.view) {
            Ok(v) => v,
            Err(_) => {
                stats.fallback_objects += 1;
                continue;
            }
        };
        stats.times.render += t_render.elapsed();

        let t_est = Instant::now();
        let mut global_vectors: Vec<AngleVector> = Vec::with_capacity(views.images.len());
        for (j, (roi, cam)) in views.images.iter().zip(&views.cameras).enumerate() {
            let azimuth = views.object_viewing_angle_alpha + cam.azimuth_offset;
            let ctx = ViewContext {
                view_azimuth: azimuth,
                detection_yaw: det.yaw,
                object_index: i,
                view_index: j,
            };
            match estimator.estimate_view(roi, &ctx) {
                Ok((vec, _bins)) => {
                    // Final output uses the angle-vector head only.
                    let global = match cfg.estimation_frame {
                        EstimationFrame::ViewLocal => match decode_angle_vector(&vec) {
                            Ok(local) => local_to_global_yaw(local, azimuth),
                            Err(_) => {
                                stats.failed_views += 1;
                                continue;
                            }
                        },
                        EstimationFrame::Global => match decode_angle_vector(&vec) {
                            Ok(g) => g,
                            Err(_) => {
                                stats.failed_views += 1;
                                continue;
                            }
                        },
                    };
                    let scale = if cfg.fuse_normalized { 1.0 } else { vec.norm() };
                    let unit = encode_angle_vector(global).expect("finite yaw");
                    global_vectors.push(AngleVector {
                        x_theta: unit.x_theta * scale,
                        y_theta: unit.y_theta * scale,
                    });
                }
                Err(_) => stats.failed_views += 1,
            }
        }
        stats.times.estimate += t_est.elapsed();

        if global_vectors.is_empty() {
            stats.fallback_objects += 1;
            continue;
        }
        let fused = match fuse_estimates_with(&global_vectors, cfg.fuse_normalized) {
            Ok((theta, _)) => Some(theta),
            Err(OrientationError::DegenerateFusion(_)) => {
                // Antipodal cancellation: keep the most confident single view.
                global_vectors
                    .iter()
                    .max_by(|a, b| a.norm().total_cmp(&b.norm()))
                    .and_then(|v| decode_angle_vector(v).ok())
            }
            Err(_) => None,
        };
        match fused {
            Some(theta) => out[i].yaw = wrap_angle(theta).unwrap_or(theta),
            None => stats.fallback_objects += 1,
        }
    }

    let t_sup = Instant::now();
    let out = suppress_false_positives(&out, dets2d, &cfg.suppression);
    stats.times.suppress = t_sup.elapsed();
    Ok((out, stats))
}

// ── Oracle estimator ──────────────────────────────────────────────────────────

/// Ground-truth-fed estimator: returns the input detection's yaw (converted
/// to the view frame) plus optional wrapped-normal noise. Noise is a pure
/// function of the seed, object and view indices and the rendered depth
/// buffer, so runs are reproducible and schedule-independent.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    pub noise_sigma: f64,
    pub seed: u64,
    pub frame: EstimationFrame,
}

impl OracleEstimator {
    pub fn exact() -> Self {
        Self { noise_sigma: 0.0, seed: 0, frame: EstimationFrame::ViewLocal }
    }

    pub fn noisy(noise_sigma: f64, seed: u64) -> Self {
        Self { noise_sigma, seed, frame: EstimationFrame::ViewLocal }
    }

    fn noise(&self, roi: &crate::view_synthesis::RoiImage, ctx: &ViewContext) -> f64 {
        if self.noise_sigma == 0.0 {
            return 0.0;
        }
        // FNV-1a over a depth-buffer subsample plus the indices.
        let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ self.seed;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        eat(ctx.object_index as u64);
        eat(ctx.view_index as u64);
        eat(ctx.detection_yaw.to_bits());
        for (i, d) in roi.depth_buffer.iter().enumerate() {
            if i % 31 == 0 {
                eat(u64::from(d.to_bits()));
            }
        }
        // Box-Muller from two uniform doubles carved out of the hash stream.
        let h2 = hash.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(31);
        let u1 = ((hash >> 11) as f64 / (1u64 << 53) as f64).max(1e-12);
        let u2 = (h2 >> 11) as f64 / (1u64 << 53) as f64;
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        self.noise_sigma * z
    }
}

impl ViewEstimator for OracleEstimator {
    fn estimate_view(
        &self,
        roi: &crate::view_synthesis::RoiImage,
        ctx: &ViewContext,
    ) -> Result<(AngleVector, AngleBinSet), OrientationError> {
        let truth = match self.frame {
            EstimationFrame::ViewLocal => wrap_angle(ctx.detection_yaw - ctx.view_azimuth)?,
            EstimationFrame::Global => ctx.detection_yaw,
        };
        let noisy = wrap_angle(truth + self.noise(roi, ctx))?;
        Ok((encode_angle_vector(noisy)?, AngleBinSet::from_angle(noisy, 8)?))
    }
}

// ── Ablation ──────────────────────────────────────────────────────────────────

/// One row of an ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub os: f64,
    pub aae_deg: f64,
    pub wall_s: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<24}{:>10}{:>12}{:>10}\n", "config", "OS", "AAE (deg)", "time (s)");
    for r in rows {
        s.push_str(&format!(
            "{:<24}{:>10.4}{:>12.2}{:>10.2}\n",
            r.label, r.os, r.aae_deg, r.wall_s
        ));
    }
    s
}

/// OS over a sequence of true-positive angle errors (AP is 1 by
/// construction when every detection matches a ground truth object).
fn os_of_tp_errors(errors: &[f64]) -> f64 {
    let scored: Vec<(f64, bool, f64)> =
        errors.iter().enumerate().map(|(i, &e)| (1.0 - i as f64 * 1e-9, true, e)).collect();
    let n = errors.len();
    let ap = crate::evaluation::average_precision(
        &scored.iter().map(|&(s, t, _)| (s, t)).collect::<Vec<_>>(),
        n,
        40,
    )
    .unwrap_or(0.0);
    let aos = crate::evaluation::aos(&scored, n, 40).unwrap_or(0.0);
    if ap > 0.0 {
        aos / ap
    } else {
        0.0
    }
}

/// Angle-regression ablation: train the toy estimator with bins-only heads
/// (4/8/12/16 bins), the angle-vector head alone, and the vector head with
/// auxiliary bins, then compare test AAE and OS.
///
/// Decoding uses the bin head for bins-only rows and the vector head
/// otherwise.
pub fn ablate_representation(
    train: &[(crate::view_synthesis::RoiImage, f64)],
    test: &[(crate::view_synthesis::RoiImage, f64)],
    base: &crate::orientation::TrainConfig,
    input_side: usize,
) -> Result<Vec<AblationRow>, OrientationError> {
    use crate::orientation::{decode_bins, train_toy_estimator, ToyEstimator};
    if train.is_empty() || test.is_empty() {
        return Err(OrientationError::EmptyDataset);
    }
    let (rw, rh) =
        (train[0].0.pixels.width() as usize, train[0].0.pixels.height() as usize);

    let mut rows = Vec::new();
    let mut run = |label: String,
                   n_bins: usize,
                   weights: LossWeights,
                   decode_with_bins: bool|
     -> Result<(), OrientationError> {
        let start = Instant::now();
        let model = ToyEstimator::new(rw, rh, input_side, n_bins);
        let cfg = crate::orientation::TrainConfig { weights, ..base.clone() };
        let (model, _) = train_toy_estimator(train, model, &cfg)?;
        let mut errors = Vec::with_capacity(test.len());
        for (roi, target) in test {
            let (vec, bins) = model.estimate_view(roi, &ViewContext::default())?;
            let pred = if decode_with_bins {
                decode_bins(&bins)?
            } else {
                decode_angle_vector(&vec).unwrap_or(0.0)
            };
            errors.push(wrap_angle(pred - target)?);
        }
        let aae = crate::evaluation::aae(&errors).unwrap_or(f64::INFINITY);
        rows.push(AblationRow {
            label,
            os: os_of_tp_errors(&errors),
            aae_deg: aae.to_degrees(),
            wall_s: start.elapsed().as_secs_f64(),
        });
        Ok(())
    };

    for b in [4usize, 8, 12, 16] {
        run(
            format!("bins-{b}"),
            b,
            LossWeights { alpha: 0.0, beta: 1.0, gamma: 200.0 },
            true,
        )?;
    }
    run("vector".to_string(), 8, LossWeights { alpha: 50.0, beta: 0.0, gamma: 0.0 }, false)?;
    run("vector+bins-8".to_string(), 8, LossWeights::default(), false)?;
    Ok(rows)
}

/// Multi-view ablation: run the frame pipeline with the closed-form marker
/// estimator for each view count, plus a crop-and-resize baseline row.
pub fn ablate_views(
    frames: &[(Frame, Vec<crate::kitti::LabelRecord>)],
    views_list: &[usize],
    include_roi_crop: bool,
    cfg: &PipelineConfig,
) -> Result<Vec<AblationRow>, PipelineError> {
    use crate::synth::MarkerEstimator;
    if frames.is_empty() {
        return Err(OrientationError::EmptyDataset.into());
    }
    let estimator = MarkerEstimator {
        splat_margin: cfg.view.splat_radius as f64,
        focal: Some(cfg.view.focal()),
        ..MarkerEstimator::default()
    };
    let mut rows = Vec::new();

    if include_roi_crop {
        let start = Instant::now();
        let mut errors = Vec::new();
        for (frame, labels) in frames {
            for label in labels {
                let Ok(roi) = crate::view_synthesis::roi_crop(&frame.image, &label.bbox2d, &cfg.view)
                else {
                    continue;
                };
                // The crop is resampled rather than splat-rendered, so
                // neither the margin correction nor the focal length applies.
                let crop_est =
                    MarkerEstimator { splat_margin: 0.0, focal: None, ..estimator.clone() };
                if let Ok(local) = crop_est.estimate_local_yaw(&roi) {
                    let alpha = label.location.0.atan2(label.location.2);
                    let pred = local_to_global_yaw(local, alpha);
                    errors.push(wrap_angle(pred - label.rotation_y)?);
                }
            }
        }
        let aae = crate::evaluation::aae(&errors).unwrap_or(f64::INFINITY);
        rows.push(AblationRow {
            label: "roi-crop".to_string(),
            os: os_of_tp_errors(&errors),
            aae_deg: aae.to_degrees(),
            wall_s: start.elapsed().as_secs_f64(),
        });
    }

    for &v in views_list {
        let start = Instant::now();
        let run_cfg =
            PipelineConfig { view: ViewConfig { n_views: v, ..cfg.view.clone() }, ..cfg.clone() };
        let mut errors = Vec::new();
        for (frame, labels) in frames {
            let dets: Vec<Detection3D> = labels.iter().map(Detection3D::from_label).collect();
            let (out, _) = run_frame(frame, &dets, &[], &estimator, &run_cfg)?;
            for (o, label) in out.iter().zip(labels) {
                errors.push(wrap_angle(o.yaw - label.rotation_y)?);
            }
        }
        let aae = crate::evaluation::aae(&errors).unwrap_or(f64::INFINITY);
        rows.push(AblationRow {
            label: format!("virtual-cam-{v}"),
            os: os_of_tp_errors(&errors),
            aae_deg: aae.to_degrees(),
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

// ── Benchmarking ──────────────────────────────────────────────────────────────

/// Summary statistics over per-frame stage times.
#[derive(Debug, Clone, Serialize)]
pub struct StatSummary {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub samples: usize,
}

impl StatSummary {
    fn from_durations(ds: &[Duration]) -> Self {
        let mut ms: Vec<f64> = ds.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let mean = if n == 0 { 0.0 } else { ms.iter().sum::<f64>() / n as f64 };
        let at = |q: f64| {
            if n == 0 {
                0.0
            } else {
                ms[((q * (n - 1) as f64).round() as usize).min(n - 1)]
            }
        };
        Self { mean_ms: mean, median_ms: at(0.5), p95_ms: at(0.95), samples: n }
    }
}

/// Machine-readable per-stage timing report.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub densify: StatSummary,
    pub render: StatSummary,
    pub estimate: StatSummary,
    pub suppress: StatSummary,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }
}

/// Time every stage over a set of frames with their detections.
pub fn bench(
    frames: &[(Frame, Vec<Detection3D>)],
    estimator: &dyn ViewEstimator,
    cfg: &PipelineConfig,
) -> Result<BenchReport, PipelineError> {
    let mut densify = Vec::new();
    let mut render = Vec::new();
    let mut estimate = Vec::new();
    let mut suppress = Vec::new();
    for (frame, dets) in frames {
        let (_, stats) = run_frame(frame, dets, &[], estimator, cfg)?;
        densify.push(stats.times.densify);
        render.push(stats.times.render);
        estimate.push(stats.times.estimate);
        suppress.push(stats.times.suppress);
    }
    Ok(BenchReport {
        densify: StatSummary::from_durations(&densify),
        render: StatSummary::from_durations(&render),
        estimate: StatSummary::from_durations(&estimate),
        suppress: StatSummary::from_durations(&suppress),
    })
}

/// Render-stage wall time as a function of the view count, for scaling
/// checks. Returns `(views, seconds)` pairs.
pub fn bench_render_scaling(
    frame: &Frame,
    dets: &[Detection3D],
    estimator: &dyn ViewEstimator,
    cfg: &PipelineConfig,
    views_list: &[usize],
) -> Result<Vec<(usize, f64)>, PipelineError> {
    let mut out = Vec::with_capacity(views_list.len());
    for &v in views_list {
        let run_cfg =
            PipelineConfig { view: ViewConfig { n_views: v, ..cfg.view.clone() }, ..cfg.clone() };
        // Median of three runs to steady the measurement.
        let mut times = Vec::with_capacity(3);
        for _ in 0..3 {
            let (_, stats) = run_frame(frame, dets, &[], estimator, &run_cfg)?;
            times.push(stats.times.render.as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        out.push((v, times[1]));
    }
    Ok(out)
}

/// Coefficient of determination of a least-squares line through the points.
pub fn linear_fit_r2(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 1.0;
    }
    let (sx, sy): (f64, f64) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / n, sy / n);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 =
        points.iter().map(|(x, y)| (y - (slope * x + intercept)).powi(2)).sum();
    1.0 - ss_res / syy
}
