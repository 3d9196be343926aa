//! Orientation representations, per-view estimation, fusion and training
//! losses.
//!
//! Yaw can be carried either as an angle vector `(cos t, sin t)`, which avoids
//! wrap discontinuities, or as discrete angle bins with per-bin residual
//! regression. Per-view estimates are merged by circular-mean fusion: average
//! the unit vectors and take the atan2 of the sums. The multi-task loss
//! combines a smooth-L1 angle-vector term, a softmax bin-classification term
//! and a smooth-L1 bin-residual term with weights (alpha, beta, gamma).

use std::f64::consts::PI;
use std::io::{Read, Write};

use thiserror::Error;

use crate::view_synthesis::RoiImage;

#[derive(Debug, Error)]
pub enum OrientationError {
    #[error("angle is not finite")]
    NonFinite,
    #[error("angle vector norm {0} is below the decode threshold")]
    DegenerateVector(f64),
    #[error("bin count must be at least 2, got {0}")]
    BadBinCount(usize),
    #[error("fusion resultant magnitude {0} is degenerate (antipodal cancellation)")]
    DegenerateFusion(f64),
    #[error("prediction shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("ROI is {got_w}x{got_h} but the model expects {want_w}x{want_h}")]
    DimMismatch { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("model file: {0}")]
    ModelIo(#[from] std::io::Error),
    #[error("model file has bad magic or header")]
    BadModelFile,
}

const DEGENERATE_NORM: f64 = 1e-6;

/// Orientation as `(cos t, sin t)`. Raw predictions need not be normalized;
/// decoding normalizes first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleVector {
    pub x_theta: f64,
    pub y_theta: f64,
}

impl AngleVector {
    pub fn norm(&self) -> f64 {
        self.x_theta.hypot(self.y_theta)
    }
}

/// Discrete-continuous orientation: `B` bin logits plus one residual per bin.
/// Bin centers sit at `2*pi*k / B`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleBinSet {
    pub logits: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl AngleBinSet {
    pub fn n_bins(&self) -> usize {
        self.logits.len()
    }

    /// One-hot bin set encoding a single angle exactly.
    pub fn from_angle(theta: f64, n_bins: usize) -> Result<Self, OrientationError> {
        let (idx, residual) = encode_bins(theta, n_bins)?;
        let mut logits = vec![0.0; n_bins];
        logits[idx] = 1.0;
        let mut residuals = vec![0.0; n_bins];
        residuals[idx] = residual;
        Ok(Self { logits, residuals })
    }
}

/// Multi-task loss weights; defaults are alpha=50, beta=1, gamma=200.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 50.0, beta: 1.0, gamma: 200.0 }
    }
}

/// Per-object orientation result across all rendered views.
#[derive(Debug, Clone)]
pub struct OrientationEstimate {
    pub per_view_local_yaw: Vec<f64>,
    pub per_view_vectors: Vec<AngleVector>,
    pub fused_global_yaw: f64,
    pub resultant_magnitude: f64,
}

/// Wrap an angle into `[-pi, pi)`. Values already in range pass through
/// unchanged.
pub fn wrap_angle(theta: f64) -> Result<f64, OrientationError> {
    if !theta.is_finite() {
        return Err(OrientationError::NonFinite);
    }
    if (-PI..PI).contains(&theta) {
        return Ok(theta);
    }
    let mut t = theta.rem_euclid(2.0 * PI);
    if t >= PI {
        t -= 2.0 * PI;
    }
    Ok(t)
}

/// Encode an angle as its unit vector.
pub fn encode_angle_vector(theta: f64) -> Result<AngleVector, OrientationError> {
    if !theta.is_finite() {
        return Err(OrientationError::NonFinite);
    }
    let (s, c) = theta.sin_cos();
    Ok(AngleVector { x_theta: c, y_theta: s })
}

/// Decode an angle vector, normalizing first.
pub fn decode_angle_vector(v: &AngleVector) -> Result<f64, OrientationError> {
    let n = v.norm();
    if !(n > DEGENERATE_NORM) {
        return Err(OrientationError::DegenerateVector(n));
    }
    Ok((v.y_theta / n).atan2(v.x_theta / n))
}

/// Bin center for index `k` of `B`, wrapped.
pub fn bin_center(k: usize, n_bins: usize) -> f64 {
    wrap_angle(2.0 * PI * k as f64 / n_bins as f64).expect("finite center")
}

/// Encode an angle as (nearest bin index, residual); `|residual| <= pi / B`.
pub fn encode_bins(theta: f64, n_bins: usize) -> Result<(usize, f64), OrientationError> {
    if n_bins < 2 {
        return Err(OrientationError::BadBinCount(n_bins));
    }
    let t = wrap_angle(theta)?;
    let step = 2.0 * PI / n_bins as f64;
    let idx = (t.rem_euclid(2.0 * PI) / step).round() as usize % n_bins;
    let residual = wrap_angle(t - 2.0 * PI * idx as f64 / n_bins as f64)?;
    Ok((idx, residual))
}

/// Decode a bin set: center of the argmax logit plus its residual.
pub fn decode_bins(bins: &AngleBinSet) -> Result<f64, OrientationError> {
    let b = bins.n_bins();
    if b < 2 || bins.residuals.len() != b {
        return Err(OrientationError::BadBinCount(b));
    }
    let best = bins
        .logits
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.total_cmp(b))
        .map(|(i, _)| i)
        .expect("non-empty logits");
    wrap_angle(2.0 * PI * best as f64 / b as f64 + bins.residuals[best])
}

/// Circular-mean fusion: `theta_f = atan2(mean(y), mean(x))` over the
/// normalized per-view vectors. Returns the fused angle and the resultant
/// magnitude `|mean vector|` in [0, 1].
pub fn fuse_estimates(vectors: &[AngleVector]) -> Result<(f64, f64), OrientationError> {
    fuse_estimates_with(vectors, true)
}

/// Fusion with a choice of normalizing each vector first (`normalize = false`
/// averages the raw predictions).
pub fn fuse_estimates_with(
    vectors: &[AngleVector],
    normalize: bool,
) -> Result<(f64, f64), OrientationError> {
    if vectors.is_empty() {
        return Err(OrientationError::DegenerateFusion(0.0));
    }
    let n = vectors.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for v in vectors {
        let norm = if normalize { v.norm() } else { 1.0 };
        if normalize && !(norm > DEGENERATE_NORM) {
            return Err(OrientationError::DegenerateVector(norm));
        }
        sx += v.x_theta / norm;
        sy += v.y_theta / norm;
    }
    let (mx, my) = (sx / n, sy / n);
    let magnitude = mx.hypot(my);
    if !(magnitude > DEGENERATE_NORM) {
        return Err(OrientationError::DegenerateFusion(magnitude));
    }
    Ok((my.atan2(mx), magnitude))
}

/// View-local yaw to global yaw.
pub fn local_to_global_yaw(local_yaw: f64, view_azimuth: f64) -> f64 {
    wrap_angle(local_yaw + view_azimuth).unwrap_or(local_yaw)
}

/// Global yaw to view-local yaw; inverse of [`local_to_global_yaw`].
pub fn global_to_local_yaw(global_yaw: f64, view_azimuth: f64) -> f64 {
    wrap_angle(global_yaw - view_azimuth).unwrap_or(global_yaw)
}

/// Smooth L1: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`]; continuous at `|x| = 1`.
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Numerically stable `log(sum(exp(logits)))`.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy of `logits` against a one-hot target.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

/// The three weighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l_ang: f64,
    pub l_cls: f64,
    pub l_reg: f64,
}

/// Total multi-task loss `alpha*L_ang + beta*L_cls + gamma*L_reg`.
///
/// `L_ang` sums smooth L1 over the two angle-vector components, `L_cls` is
/// the softmax cross-entropy of the bin logits against the target bin, and
/// `L_reg` is smooth L1 on the residual at the target bin.
pub fn multitask_loss(
    pred: (&AngleVector, &AngleBinSet),
    target_theta: f64,
    w: &LossWeights,
) -> Result<(f64, LossParts), OrientationError> {
    let (vec, bins) = pred;
    let b = bins.n_bins();
    if b < 2 {
        return Err(OrientationError::BadBinCount(b));
    }
    if bins.residuals.len() != b {
        return Err(OrientationError::ShapeMismatch(format!(
            "{} residuals for {} logits",
            bins.residuals.len(),
            b
        )));
    }
    let target_vec = encode_angle_vector(target_theta)?;
    let (target_bin, target_residual) = encode_bins(target_theta, b)?;

    let l_ang =
        smooth_l1(vec.x_theta - target_vec.x_theta) + smooth_l1(vec.y_theta - target_vec.y_theta);
    let l_cls = softmax_cross_entropy(&bins.logits, target_bin);
    let l_reg = smooth_l1(bins.residuals[target_bin] - target_residual);

    let total = w.alpha * l_ang + w.beta * l_cls + w.gamma * l_reg;
    Ok((total, LossParts { l_ang, l_cls, l_reg }))
}

/// Extra context handed to estimators alongside the rendered view.
#[derive(Debug, Clone, Copy, Default)]
pub struct ViewContext {
    /// Absolute azimuth of the view's optical axis (alpha + rho).
    pub view_azimuth: f64,
    /// Yaw carried by the input detection (the oracle estimator's source).
    pub detection_yaw: f64,
    pub object_index: usize,
    pub view_index: usize,
}

/// A per-view orientation estimator. Implementations must be deterministic
/// for a fixed input.
pub trait ViewEstimator: Sync {
    fn estimate_view(
        &self,
        roi: &RoiImage,
        ctx: &ViewContext,
    ) -> Result<(AngleVector, AngleBinSet), OrientationError>;
}

// ── Toy estimator ─────────────────────────────────────────────────────────────

const MODEL_MAGIC: &[u8; 4] = b"VMVT";

/// A single linear map over downsampled grayscale pixel intensities producing
/// `2 + 2B` outputs (angle vector, bin logits, bin residuals). Small enough to
/// train on a desk, while exercising every loss term; heavier estimators can
/// be plugged in behind [`ViewEstimator`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEstimator {
    roi_width: usize,
    roi_height: usize,
    /// Side of the square grayscale downsample fed to the linear map.
    input_side: usize,
    n_bins: usize,
    /// Row-major `(n_outputs) x (n_features + 1)`; last column is the bias.
    weights: Vec<f64>,
}

impl ToyEstimator {
    pub fn new(roi_width: usize, roi_height: usize, input_side: usize, n_bins: usize) -> Self {
        assert!(n_bins >= 2 && input_side > 0);
        let n_out = 2 + 2 * n_bins;
        let n_feat = input_side * input_side;
        Self { roi_width, roi_height, input_side, n_bins, weights: vec![0.0; n_out * (n_feat + 1)] }
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.weights
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn n_features(&self) -> usize {
        self.input_side * self.input_side
    }

    fn n_outputs(&self) -> usize {
        2 + 2 * self.n_bins
    }

    /// Block-average the ROI to `input_side x input_side` grayscale in [0, 1].
    pub fn features(&self, roi: &RoiImage) -> Result<Vec<f64>, OrientationError> {
        let (w, h) = (roi.pixels.width() as usize, roi.pixels.height() as usize);
        if w != self.roi_width || h != self.roi_height {
            return Err(OrientationError::DimMismatch {
                got_w: w,
                got_h: h,
                want_w: self.roi_width,
                want_h: self.roi_height,
            });
        }
        let side = self.input_side;
        let mut feats = vec![0.0f64; side * side];
        for by in 0..side {
            let y0 = by * h / side;
            let y1 = ((by + 1) * h / side).max(y0 + 1);
            for bx in 0..side {
                let x0 = bx * w / side;
                let x1 = ((bx + 1) * w / side).max(x0 + 1);
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = roi.pixels.get_pixel(x as u32, y as u32).0;
                        sum += f64::from(u16::from(p[0]) + u16::from(p[1]) + u16::from(p[2]));
                    }
                }
                feats[by * side + bx] = sum / (3.0 * 255.0 * ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
        Ok(feats)
    }

    fn forward_features(&self, feats: &[f64]) -> (AngleVector, AngleBinSet) {
        let n_feat = self.n_features();
        let stride = n_feat + 1;
        let mut out = vec![0.0f64; self.n_outputs()];
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weights[o * stride..(o + 1) * stride];
            let mut acc = row[n_feat];
            for (f, &x) in feats.iter().enumerate() {
                acc += row[f] * x;
            }
            *out_v = acc;
        }
        let vec = AngleVector { x_theta: out[0], y_theta: out[1] };
        let bins = AngleBinSet {
            logits: out[2..2 + self.n_bins].to_vec(),
            residuals: out[2 + self.n_bins..].to_vec(),
        };
        (vec, bins)
    }

    /// Loss and its gradient w.r.t. every model parameter for one sample.
    pub fn loss_and_grad(
        &self,
        feats: &[f64],
        target_theta: f64,
        w: &LossWeights,
    ) -> Result<(f64, Vec<f64>), OrientationError> {
        let (vec, bins) = self.forward_features(feats);
        let (total, _) = multitask_loss((&vec, &bins), target_theta, w)?;

        // Gradient w.r.t. the raw outputs.
        let target_vec = encode_angle_vector(target_theta)?;
        let (target_bin, target_residual) = encode_bins(target_theta, self.n_bins)?;
        let mut g_out = vec![0.0f64; self.n_outputs()];
        g_out[0] = w.alpha * smooth_l1_grad(vec.x_theta - target_vec.x_theta);
        g_out[1] = w.alpha * smooth_l1_grad(vec.y_theta - target_vec.y_theta);
        let lse = log_sum_exp(&bins.logits);
        for k in 0..self.n_bins {
            let softmax = (bins.logits[k] - lse).exp();
            g_out[2 + k] = w.beta * (softmax - if k == target_bin { 1.0 } else { 0.0 });
        }
        g_out[2 + self.n_bins + target_bin] =
            w.gamma * smooth_l1_grad(bins.residuals[target_bin] - target_residual);

        // Chain through the linear map.
        let n_feat = self.n_features();
        let stride = n_feat + 1;
        let mut grad = vec![0.0f64; self.weights.len()];
        for (o, &g) in g_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut grad[o * stride..(o + 1) * stride];
            for (f, &x) in feats.iter().enumerate() {
                row[f] = g * x;
            }
            row[n_feat] = g;
        }
        Ok((total, grad))
    }

    /// Serialize: magic, five LE u32 header words (roi_w, roi_h, input_side,
    /// n_bins, n_params), then the parameters as LE f64.
    pub fn save(&self, path: &std::path::Path) -> Result<(), OrientationError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MODEL_MAGIC)?;
        for v in [self.roi_width, self.roi_height, self.input_side, self.n_bins, self.weights.len()]
        {
            f.write_all(&(v as u32).to_le_bytes())?;
        }
        for w in &self.weights {
            f.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, OrientationError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(OrientationError::BadModelFile);
        }
        let mut header = [0usize; 5];
        for h in &mut header {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            *h = u32::from_le_bytes(b) as usize;
        }
        let [roi_w, roi_h, side, n_bins, n_params] = header;
        if n_bins < 2 || side == 0 || n_params != (2 + 2 * n_bins) * (side * side + 1) {
            return Err(OrientationError::BadModelFile);
        }
        let mut weights = vec![0.0f64; n_params];
        for w in &mut weights {
            let mut b = [0u8; 8];
            f.read_exact(&mut b)?;
            *w = f64::from_le_bytes(b);
        }
        Ok(Self { roi_width: roi_w, roi_height: roi_h, input_side: side, n_bins, weights })
    }
}

impl ViewEstimator for ToyEstimator {
    fn estimate_view(
        &self,
        roi: &RoiImage,
        _ctx: &ViewContext,
    ) -> Result<(AngleVector, AngleBinSet), OrientationError> {
        let feats = self.features(roi)?;
        Ok(self.forward_features(&feats))
    }
}

// ── Training ──────────────────────────────────────────────────────────────────

/// How a left-right image flip transforms the yaw target. Mirroring maps a
/// heading-convention yaw (KITTI `rotation_y`) to `pi - yaw`; a yaw that
/// tracks the surface normal of a frontal feature maps to `-yaw` instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipYawMap {
    HeadingMirror,
    NormalMirror,
}

impl FlipYawMap {
    pub fn apply(self, yaw: f64) -> f64 {
        match self {
            FlipYawMap::HeadingMirror => flip_yaw(yaw),
            FlipYawMap::NormalMirror => -yaw,
        }
    }
}

/// Training schedule for the toy estimator: Adam with a single step decay of
/// the learning rate at `epochs / 2` (factor `lr_decay`).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub weights: LossWeights,
    pub augment: bool,
    pub flip_map: FlipYawMap,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            lr_decay: 0.5,
            weights: LossWeights::default(),
            augment: true,
            flip_map: FlipYawMap::HeadingMirror,
            seed: 0,
        }
    }
}

/// Per-epoch mean training loss, for CSV dumps.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epoch_loss.iter().enumerate() {
            s.push_str(&format!("{i},{l:.9}\n"));
        }
        s
    }
}

/// Left-right flip maps a yaw target to `pi - yaw`, wrapped.
pub fn flip_yaw(theta: f64) -> f64 {
    wrap_angle(PI - theta).unwrap_or(theta)
}

fn augment_roi(roi: &RoiImage, rng: &mut impl rand::Rng) -> (RoiImage, bool) {
    let (w, h) = (roi.pixels.width() as i64, roi.pixels.height() as i64);
    let flip = rng.gen_bool(0.5);
    // Translation up to 10 px in any direction, brightness and contrast jitter.
    let (dx, dy) = (rng.gen_range(-10..=10i64), rng.gen_range(-10..=10i64));
    let contrast = rng.gen_range(0.9..1.1f64);
    let brightness = rng.gen_range(-10.0..10.0f64);
    let mut out = roi.clone();
    for y in 0..h {
        for x in 0..w {
            let sx = if flip { w - 1 - x } else { x } - dx;
            let sy = y - dy;
            let px = if sx >= 0 && sy >= 0 && sx < w && sy < h {
                let p = roi.pixels.get_pixel(sx as u32, sy as u32).0;
                let adjust = |c: u8| {
                    ((f64::from(c) - 127.5) * contrast + 127.5 + brightness).clamp(0.0, 255.0) as u8
                };
                image::Rgb([adjust(p[0]), adjust(p[1]), adjust(p[2])])
            } else {
                image::Rgb([0, 0, 0])
            };
            out.pixels.put_pixel(x as u32, y as u32, px);
        }
    }
    (out, flip)
}

/// Train a toy estimator on `(view, local yaw target)` pairs.
///
/// Returns the trained model and the loss history; the final mean epoch loss
/// is expected to sit below the initial one on any learnable dataset.
pub fn train_toy_estimator(
    dataset: &[(RoiImage, f64)],
    model: ToyEstimator,
    cfg: &TrainConfig,
) -> Result<(ToyEstimator, TrainHistory), OrientationError> {
    use rand::SeedableRng;
    if dataset.is_empty() {
        return Err(OrientationError::EmptyDataset);
    }
    let mut model = model;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();

    // Without augmentation the features are static; compute once.
    let static_feats: Option<Vec<Vec<f64>>> = if cfg.augment {
        None
    } else {
        Some(dataset.iter().map(|(roi, _)| model.features(roi)).collect::<Result<_, _>>()?)
    };

    let n = model.n_params();
    let (mut m1, mut m2) = (vec![0.0f64; n], vec![0.0f64; n]);
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut step = 0usize;
    let decay_at = cfg.epochs / 2;

    for epoch in 0..cfg.epochs {
        let lr = if epoch >= decay_at && decay_at > 0 { cfg.lr * cfg.lr_decay } else { cfg.lr };
        let mut epoch_loss = 0.0;
        for (i, (roi, target)) in dataset.iter().enumerate() {
            let (feats, target) = match (&static_feats, cfg.augment) {
                (Some(f), _) => (f[i].clone(), *target),
                (None, _) => {
                    let (aug, flipped) = augment_roi(roi, &mut rng);
                    let t = if flipped { cfg.flip_map.apply(*target) } else { *target };
                    (model.features(&aug)?, t)
                }
            };
            let (loss, grad) = model.loss_and_grad(&feats, target, &cfg.weights)?;
            epoch_loss += loss;
            step += 1;
            let bias1 = 1.0 - beta1.powi(step as i32);
            let bias2 = 1.0 - beta2.powi(step as i32);
            let params = model.params_mut();
            for (j, g) in grad.iter().enumerate() {
                m1[j] = beta1 * m1[j] + (1.0 - beta1) * g;
                m2[j] = beta2 * m2[j] + (1.0 - beta2) * g * g;
                params[j] -= lr * (m1[j] / bias1) / ((m2[j] / bias2).sqrt() + eps);
            }
        }
        history.epoch_loss.push(epoch_loss / dataset.len() as f64);
    }
    Ok((model, history))
}
