//! Key-value pipeline configuration with environment overrides.
//!
//! Config files hold one `key = value` pair per line; `#` starts a comment.
//! Keys are dotted paths (see `KEYS`). Any key can be overridden by an
//! environment variable named `VMV_` + the key upper-cased with dots
//! replaced by underscores (e.g. `VMV_VIEW_N_VIEWS=3`).

use anyhow::{anyhow, bail, Result};
use vmv_core::depth_completion::Kernel;
use vmv_core::pipeline::{EstimationFrame, EstimatorKind, PipelineConfig};

pub const ENV_PREFIX: &str = "VMV_";

/// Supported keys and their meanings, for `--help-config` and the README.
pub const KEYS: &[(&str, &str)] = &[
    ("view.n_views", "number of virtual cameras (default 11)"),
    ("view.rho_max_deg", "half-extent of the azimuth offset arc in degrees (default 25)"),
    ("view.radius_r", "camera arc radius in meters (default 4)"),
    ("view.roi_width", "ROI width in pixels (default 224)"),
    ("view.roi_height", "ROI height in pixels (default 224)"),
    ("view.splat_radius", "splat half-side in pixels (default 2)"),
    ("view.fill_fraction", "object height to ROI height ratio (default 0.8)"),
    ("view.nominal_height", "nominal object height in meters (default 1.8)"),
    ("view.crop_factor", "cloud crop as a multiple of object dims; 0 disables (default 3)"),
    ("view.depth_scaled_splat", "scale splats with inverse depth (default false)"),
    ("densifier.max_depth", "depth clamp in meters (default 80)"),
    ("densifier.dilation_kernel", "diamond dilation kernel size, odd (default 5)"),
    ("densifier.closing_kernel", "full closing kernel size, odd (default 5)"),
    ("densifier.fill_kernel", "full hole-fill kernel size, odd (default 7)"),
    ("densifier.smoothing_window", "median window in pixels, odd (default 5)"),
    ("suppression.iou_threshold", "2D match IoU gate (default 0.4)"),
    ("suppression.penalty_factor", "score multiplier for unmatched detections (default 0.1)"),
    ("suppression.replace_boxes", "replace matched boxes with the 2D detector's (default true)"),
    ("weights.alpha", "angle-vector loss weight (default 50)"),
    ("weights.beta", "bin classification loss weight (default 1)"),
    ("weights.gamma", "bin residual loss weight (default 200)"),
    ("pipeline.top_k", "detections per frame given the multi-view treatment (default 16)"),
    (
        "pipeline.estimator",
        "oracle | oracle:<sigma_deg> | marker | toy | file:<model path> (default oracle)",
    ),
    ("pipeline.estimation_frame", "local | global (default local)"),
    ("pipeline.fuse_normalized", "normalize vectors before fusion (default true)"),
    ("pipeline.seed", "seed for stochastic estimators (default 0)"),
];

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => bail!("expected a boolean, got {v:?}"),
    }
}

fn apply_key(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<()> {
    let f = || -> Result<f64> { value.parse().map_err(|_| anyhow!("expected a number, got {value:?}")) };
    let n = || -> Result<usize> { value.parse().map_err(|_| anyhow!("expected an integer, got {value:?}")) };
    let odd = |v: usize| -> Result<usize> {
        if v % 2 == 1 && v > 0 {
            Ok(v)
        } else {
            bail!("kernel sizes must be positive and odd, got {v}")
        }
    };
    match key {
        "view.n_views" => cfg.view.n_views = n()?,
        "view.rho_max_deg" => cfg.view.rho_max = f()?.to_radians(),
        "view.radius_r" => cfg.view.radius_r = f()?,
        "view.roi_width" => cfg.view.roi_width = n()?,
        "view.roi_height" => cfg.view.roi_height = n()?,
        "view.splat_radius" => cfg.view.splat_radius = n()?,
        "view.fill_fraction" => cfg.view.fill_fraction = f()?,
        "view.nominal_height" => cfg.view.nominal_height = f()?,
        "view.crop_factor" => {
            let v = f()?;
            cfg.view.crop_factor = if v > 0.0 { Some(v) } else { None };
        }
        "view.depth_scaled_splat" => cfg.view.depth_scaled_splat = parse_bool(value)?,
        "densifier.max_depth" => cfg.densifier.max_depth = f()? as f32,
        "densifier.dilation_kernel" => cfg.densifier.dilation_kernel = Kernel::diamond(odd(n()?)?),
        "densifier.closing_kernel" => cfg.densifier.closing_kernel = Kernel::full(odd(n()?)?),
        "densifier.fill_kernel" => cfg.densifier.fill_kernel = Kernel::full(odd(n()?)?),
        "densifier.smoothing_window" => cfg.densifier.smoothing_window = odd(n()?)?,
        "suppression.iou_threshold" => cfg.suppression.iou_threshold = f()?,
        "suppression.penalty_factor" => cfg.suppression.penalty_factor = f()?,
        "suppression.replace_boxes" => cfg.suppression.replace_boxes = parse_bool(value)?,
        "weights.alpha" => cfg.weights.alpha = f()?,
        "weights.beta" => cfg.weights.beta = f()?,
        "weights.gamma" => cfg.weights.gamma = f()?,
        "pipeline.top_k" => cfg.top_k_per_frame = n()?,
        "pipeline.estimator" => cfg.estimator = parse_estimator(value)?,
        "pipeline.estimation_frame" => {
            cfg.estimation_frame = match value {
                "local" => EstimationFrame::ViewLocal,
                "global" => EstimationFrame::Global,
                _ => bail!("expected local or global, got {value:?}"),
            }
        }
        "pipeline.fuse_normalized" => cfg.fuse_normalized = parse_bool(value)?,
        "pipeline.seed" => cfg.seed = n()? as u64,
        _ => bail!("unknown config key {key:?}"),
    }
    Ok(())
}

fn parse_estimator(value: &str) -> Result<EstimatorKind> {
    if value == "oracle" {
        return Ok(EstimatorKind::Oracle { noise_sigma: 0.0 });
    }
    if let Some(sigma) = value.strip_prefix("oracle:") {
        let deg: f64 = sigma.parse().map_err(|_| anyhow!("bad oracle sigma {sigma:?}"))?;
        return Ok(EstimatorKind::Oracle { noise_sigma: deg.to_radians() });
    }
    if value == "marker" {
        return Ok(EstimatorKind::Marker);
    }
    if value == "toy" {
        return Ok(EstimatorKind::Toy);
    }
    if let Some(path) = value.strip_prefix("file:") {
        return Ok(EstimatorKind::External(path.into()));
    }
    bail!("unknown estimator {value:?}")
}

/// Parse a config file body.
pub fn parse_config_text(text: &str) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value", idx + 1))?;
        apply_key(&mut cfg, key.trim(), value.trim())
            .map_err(|e| anyhow!("line {}: {e}", idx + 1))?;
    }
    Ok(cfg)
}

/// Load the config (defaults when `path` is `None`), then apply environment
/// overrides.
pub fn load_config(path: Option<&std::path::Path>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow!("cannot read config {}: {e}", p.display()))?;
            parse_config_text(&text)?
        }
        None => PipelineConfig::default(),
    };
    for (key, _) in KEYS {
        let env_name =
            format!("{ENV_PREFIX}{}", key.replace('.', "_").to_ascii_uppercase());
        if let Ok(value) = std::env::var(&env_name) {
            apply_key(&mut cfg, key, &value).map_err(|e| anyhow!("{env_name}: {e}"))?;
        }
    }
    Ok(cfg)
}
