//! Command line front end for the virtual multi-view orientation pipeline.
//!
//! Exit codes: 0 on success, 2 on input errors (missing or malformed files),
//! 3 on configuration errors.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use vmv_core::evaluation::{evaluate_frames, Detection2D, Detection3D, EvalConfig};
use vmv_core::geometry::{backproject_depth, colorize, project_points};
use vmv_core::kitti;
use vmv_core::orientation::{
    decode_angle_vector, fuse_estimates, local_to_global_yaw, FlipYawMap, ToyEstimator,
    TrainConfig, ViewContext, ViewEstimator,
};
use vmv_core::pipeline::{
    ablate_representation, ablate_views, ablation_table, bench, run_frame, EstimatorKind,
    OracleEstimator, PipelineConfig,
};
use vmv_core::synth::{
    generate_frame, make_marker_roi_dataset, random_scenes, write_frame_kitti, MarkerEstimator,
    NoiseModel, SynthSceneSpec,
};
use vmv_core::view_synthesis::synthesize_views;

#[derive(Parser)]
#[command(name = "vmv", version, about = "Virtual multi-view orientation estimation")]
struct Cli {
    /// Key-value config file; see `vmv print-config` for the keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Densify one frame's LiDAR depth map and write it as a 16-bit PNG.
    Densify {
        /// KITTI-layout dataset root (image_2/, velodyne/, calib/).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: String,
        /// Output path for the dense depth PNG (depth x 256, 0 = invalid).
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw sparse projection.
        #[arg(long)]
        sparse: Option<PathBuf>,
    },
    /// Render the virtual views of each detection and dump them as PNGs
    /// named `<frame>_<obj>_<view>.png`.
    RenderViews {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: String,
        /// KITTI label file with the detections to render.
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Estimate per-view and fused orientations for one frame's detections
    /// and write a JSON report.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: String,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline over a dataset and write KITTI label files.
    Run {
        #[arg(long)]
        data: PathBuf,
        /// Directory of per-frame 3D detection label files.
        #[arg(long)]
        dets_dir: PathBuf,
        /// Directory of per-frame 2D detection label files; omitting it
        /// skips false positive suppression.
        #[arg(long)]
        dets2d_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated frame ids (default: all frames under image_2/).
        #[arg(long)]
        frames: Option<String>,
    },
    /// Evaluate detections against ground truth labels.
    Evaluate {
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        det_dir: PathBuf,
        /// Write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the moderate-bucket PR curve as CSV.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Reproduce the angle-representation and multi-view ablations on
    /// synthetic data.
    Ablate {
        /// `representation` or `views`.
        #[arg(long)]
        mode: String,
        /// Training samples (representation mode).
        #[arg(long, default_value_t = 500)]
        samples: usize,
        /// Synthetic frames (views mode).
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Time the pipeline stages over a dataset and write a JSON report.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dets_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        frames: Option<String>,
    },
    /// Generate synthetic KITTI-layout frames with exact ground truth.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 2)]
        objects: usize,
        /// LiDAR depth noise sigma in meters.
        #[arg(long, default_value_t = 0.0)]
        depth_sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene spec JSON overriding the generated random scenes.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train the toy estimator on synthetic marker views and save it.
    TrainToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the per-epoch loss curve as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Disable augmentation.
        #[arg(long)]
        no_augment: bool,
    },
    /// Print the effective configuration and the supported config keys.
    PrintConfig,
}

fn main() {
    let cli = Cli::parse();
    let cfg = match config::load_config(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e:#}");
            std::process::exit(3);
        }
    };
    if let Err(e) = dispatch(cli.command, cfg) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn dispatch(cmd: Command, cfg: PipelineConfig) -> Result<()> {
    match cmd {
        Command::Densify { data, frame, out, sparse } => {
            cmd_densify(&data, &frame, &out, sparse.as_deref(), &cfg)
        }
        Command::RenderViews { data, frame, dets, out_dir } => {
            cmd_render_views(&data, &frame, &dets, &out_dir, &cfg)
        }
        Command::Estimate { data, frame, dets, out } => {
            cmd_estimate(&data, &frame, &dets, out.as_deref(), &cfg)
        }
        Command::Run { data, dets_dir, dets2d_dir, out_dir, frames } => {
            cmd_run(&data, &dets_dir, dets2d_dir.as_deref(), &out_dir, frames.as_deref(), &cfg)
        }
        Command::Evaluate { gt_dir, det_dir, json, pr_csv } => {
            cmd_evaluate(&gt_dir, &det_dir, json.as_deref(), pr_csv.as_deref())
        }
        Command::Ablate { mode, samples, frames, seed, json } => {
            cmd_ablate(&mode, samples, frames, seed, json.as_deref(), &cfg)
        }
        Command::Bench { data, dets_dir, out, frames } => {
            cmd_bench(&data, &dets_dir, out.as_deref(), frames.as_deref(), &cfg)
        }
        Command::SynthGen { out, frames, objects, depth_sigma, dropout, seed, spec } => {
            cmd_synth_gen(&out, frames, objects, depth_sigma, dropout, seed, spec.as_deref())
        }
        Command::TrainToy { out, samples, epochs, lr, bins, seed, loss_csv, no_augment } => {
            cmd_train_toy(&out, samples, epochs, lr, bins, seed, loss_csv.as_deref(), no_augment, &cfg)
        }
        Command::PrintConfig => {
            println!("effective config: {cfg:#?}");
            println!("\nconfig keys (override with {}<KEY>):", config::ENV_PREFIX);
            for (key, doc) in config::KEYS {
                println!("  {key:<28} {doc}");
            }
            Ok(())
        }
    }
}

/// Build the estimator selected by the config.
fn build_estimator(cfg: &PipelineConfig) -> Result<Box<dyn ViewEstimator>> {
    Ok(match &cfg.estimator {
        EstimatorKind::Oracle { noise_sigma } => {
            Box::new(OracleEstimator::noisy(*noise_sigma, cfg.seed))
        }
        EstimatorKind::Marker => Box::new(MarkerEstimator {
            splat_margin: cfg.view.splat_radius as f64,
            focal: Some(cfg.view.focal()),
            ..MarkerEstimator::default()
        }),
        EstimatorKind::Toy => {
            Box::new(ToyEstimator::new(cfg.view.roi_width, cfg.view.roi_height, 28, 8))
        }
        EstimatorKind::External(path) => Box::new(
            ToyEstimator::load(path).with_context(|| format!("loading model {}", path.display()))?,
        ),
    })
}

fn load_labels(path: &Path) -> Result<Vec<kitti::LabelRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading labels {}", path.display()))?;
    kitti::parse_labels(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn load_frame_dets(
    dir: &Path,
    frame_id: &str,
) -> Result<(Vec<Detection3D>, Vec<kitti::LabelRecord>)> {
    let path = dir.join(format!("{frame_id}.txt"));
    if !path.exists() {
        return Ok((Vec::new(), Vec::new()));
    }
    let labels = load_labels(&path)?;
    Ok((labels.iter().map(Detection3D::from_label).collect(), labels))
}

fn densified_cloud(
    frame: &kitti::Frame,
    cfg: &PipelineConfig,
) -> Result<vmv_core::geometry::ColoredPointCloud> {
    let (w, h) = (frame.image.width() as usize, frame.image.height() as usize);
    let cam_points = frame.scan.camera_points(&frame.calib);
    let (sparse, _) = project_points(&cam_points, &frame.calib, w, h);
    let dense = vmv_core::depth_completion::densify(&sparse, &cfg.densifier)?;
    let points = backproject_depth(&dense, &frame.calib)?;
    Ok(colorize(&points, &frame.image, &frame.calib))
}

fn cmd_densify(
    data: &Path,
    frame_id: &str,
    out: &Path,
    sparse_out: Option<&Path>,
    cfg: &PipelineConfig,
) -> Result<()> {
    let frame = kitti::load_frame(data, frame_id)?;
    let (w, h) = (frame.image.width() as usize, frame.image.height() as usize);
    let cam_points = frame.scan.camera_points(&frame.calib);
    let (sparse, dropped) = project_points(&cam_points, &frame.calib, w, h);
    if let Some(p) = sparse_out {
        sparse.save_png16(p)?;
    }
    let dense = vmv_core::depth_completion::densify(&sparse, &cfg.densifier)?;
    dense.save_png16(out)?;
    println!(
        "frame {frame_id}: {} lidar points ({dropped} outside image), {} -> {} valid pixels",
        frame.scan.len(),
        sparse.valid_count(),
        dense.valid_count()
    );
    Ok(())
}

fn cmd_render_views(
    data: &Path,
    frame_id: &str,
    dets: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<()> {
    let frame = kitti::load_frame(data, frame_id)?;
    let labels = load_labels(dets)?;
    let cloud = densified_cloud(&frame, cfg)?;
    std::fs::create_dir_all(out_dir)?;
    for warning in cfg.view.validate().map_err(|e| anyhow!("{e}"))? {
        eprintln!("warning: {warning}");
    }
    for (obj, label) in labels.iter().enumerate() {
        let det = Detection3D::from_label(label);
        let set = synthesize_views(&cloud, &det, &cfg.view).map_err(|e| anyhow!("{e}"))?;
        for (view, roi) in set.images.iter().enumerate() {
            let path = out_dir.join(format!("{frame_id}_{obj}_{view}.png"));
            roi.pixels.save(&path)?;
        }
        println!("object {obj}: {} views rendered", set.images.len());
    }
    Ok(())
}

fn cmd_estimate(
    data: &Path,
    frame_id: &str,
    dets: &Path,
    out: Option<&Path>,
    cfg: &PipelineConfig,
) -> Result<()> {
    let frame = kitti::load_frame(data, frame_id)?;
    let labels = load_labels(dets)?;
    let cloud = densified_cloud(&frame, cfg)?;
    let estimator = build_estimator(cfg)?;

    let mut objects = Vec::new();
    for (obj, label) in labels.iter().enumerate() {
        let det = Detection3D::from_label(label);
        let set = synthesize_views(&cloud, &det, &cfg.view).map_err(|e| anyhow!("{e}"))?;
        let mut per_view = Vec::new();
        let mut vectors = Vec::new();
        for (j, (roi, cam)) in set.images.iter().zip(&set.cameras).enumerate() {
            let azimuth = set.object_viewing_angle_alpha + cam.azimuth_offset;
            let ctx = ViewContext {
                view_azimuth: azimuth,
                detection_yaw: det.yaw,
                object_index: obj,
                view_index: j,
            };
            if let Ok((vec, _)) = estimator.estimate_view(roi, &ctx) {
                if let Ok(local) = decode_angle_vector(&vec) {
                    let global = local_to_global_yaw(local, azimuth);
                    per_view.push(serde_json::json!({
                        "view": j,
                        "rho_deg": cam.azimuth_offset.to_degrees(),
                        "local_yaw_deg": local.to_degrees(),
                        "global_yaw_deg": global.to_degrees(),
                    }));
                    vectors.push(vmv_core::orientation::encode_angle_vector(global).unwrap());
                }
            }
        }
        let fused = fuse_estimates(&vectors).ok();
        objects.push(serde_json::json!({
            "object": obj,
            "alpha_deg": set.object_viewing_angle_alpha.to_degrees(),
            "input_yaw_deg": det.yaw.to_degrees(),
            "fused_yaw_deg": fused.map(|(t, _)| t.to_degrees()),
            "resultant_magnitude": fused.map(|(_, m)| m),
            "views": per_view,
        }));
    }
    let report = serde_json::to_string_pretty(&serde_json::json!({
        "frame": frame_id,
        "objects": objects,
    }))?;
    match out {
        Some(p) => std::fs::write(p, &report)?,
        None => println!("{report}"),
    }
    Ok(())
}

fn frame_list(data: &Path, frames: Option<&str>) -> Result<Vec<String>> {
    match frames {
        Some(list) => Ok(list.split(',').map(|s| s.trim().to_string()).collect()),
        None => Ok(kitti::list_frame_ids(data)?),
    }
}

fn cmd_run(
    data: &Path,
    dets_dir: &Path,
    dets2d_dir: Option<&Path>,
    out_dir: &Path,
    frames: Option<&str>,
    cfg: &PipelineConfig,
) -> Result<()> {
    let estimator = build_estimator(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let mut cfg = cfg.clone();
    if dets2d_dir.is_none() {
        // No 2D detector output: make suppression the identity.
        cfg.suppression.penalty_factor = 1.0;
        cfg.suppression.replace_boxes = false;
    }
    for frame_id in frame_list(data, frames)? {
        let frame = kitti::load_frame(data, &frame_id)?;
        let (dets3d, labels3d) = load_frame_dets(dets_dir, &frame_id)?;
        let dets2d: Vec<Detection2D> = match dets2d_dir {
            Some(dir) => load_frame_dets(dir, &frame_id)?
                .1
                .iter()
                .map(|l| Detection2D { bbox: l.bbox2d, score: l.score.unwrap_or(1.0) })
                .collect(),
            None => Vec::new(),
        };
        let (out, stats) = run_frame(&frame, &dets3d, &dets2d, estimator.as_ref(), &cfg)
            .map_err(|e| anyhow!("{e}"))?;
        let records: Vec<kitti::LabelRecord> = out
            .iter()
            .zip(&labels3d)
            .map(|(d, l)| d.to_label(&l.class_name))
            .collect();
        std::fs::write(out_dir.join(format!("{frame_id}.txt")), kitti::write_labels(&records))?;
        println!(
            "frame {frame_id}: {} detections, {} processed, {} fallbacks, densify {:.1} ms, render {:.1} ms, estimate {:.1} ms, suppress {:.1} ms",
            out.len(),
            stats.processed_objects,
            stats.fallback_objects,
            stats.times.densify.as_secs_f64() * 1e3,
            stats.times.render.as_secs_f64() * 1e3,
            stats.times.estimate.as_secs_f64() * 1e3,
            stats.times.suppress.as_secs_f64() * 1e3,
        );
    }
    Ok(())
}

fn load_label_dir(dir: &Path) -> Result<Vec<(String, Vec<kitti::LabelRecord>)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((id, load_labels(&path)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn cmd_evaluate(
    gt_dir: &Path,
    det_dir: &Path,
    json: Option<&Path>,
    pr_csv: Option<&Path>,
) -> Result<()> {
    let gts = load_label_dir(gt_dir)?;
    let dets_by_id: std::collections::HashMap<String, Vec<kitti::LabelRecord>> =
        load_label_dir(det_dir)?.into_iter().collect();
    let mut gt_frames = Vec::new();
    let mut det_frames = Vec::new();
    for (id, gt) in gts {
        gt_frames.push(gt);
        let mut dets = dets_by_id.get(&id).cloned().unwrap_or_default();
        // Rank by final (post-suppression) score before evaluation.
        dets.sort_by(|a, b| b.score.unwrap_or(1.0).total_cmp(&a.score.unwrap_or(1.0)));
        det_frames.push(dets);
    }
    let report = evaluate_frames(&gt_frames, &det_frames, &EvalConfig::default())
        .map_err(|e| anyhow!("{e}"))?;
    print!("{}", report.to_table());
    if let Some(p) = json {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(p) = pr_csv {
        std::fs::write(p, report.pr_curve_csv())?;
    }
    Ok(())
}

fn cmd_ablate(
    mode: &str,
    samples: usize,
    frames: usize,
    seed: u64,
    json: Option<&Path>,
    cfg: &PipelineConfig,
) -> Result<()> {
    let rows = match mode {
        "representation" => {
            let train = make_marker_roi_dataset(samples, &cfg.view, 1.0, seed);
            let test = make_marker_roi_dataset(samples / 4 + 1, &cfg.view, 1.0, seed + 1);
            let base = TrainConfig {
                epochs: 60,
                lr: 0.02,
                augment: false,
                flip_map: FlipYawMap::NormalMirror,
                seed,
                ..TrainConfig::default()
            };
            ablate_representation(&train, &test, &base, 28).map_err(|e| anyhow!("{e}"))?
        }
        "views" => {
            let scenes = random_scenes(frames, 1, NoiseModel::default(), seed);
            let data: Vec<_> = scenes
                .iter()
                .enumerate()
                .map(|(i, s)| generate_frame(s, seed + i as u64).map_err(|e| anyhow!("{e}")))
                .collect::<Result<_>>()?;
            ablate_views(&data, &[1, 3, 6, 11, 15], true, cfg).map_err(|e| anyhow!("{e}"))?
        }
        _ => anyhow::bail!("unknown ablation mode {mode:?} (expected representation or views)"),
    };
    print!("{}", ablation_table(&rows));
    if let Some(p) = json {
        std::fs::write(p, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

fn cmd_bench(
    data: &Path,
    dets_dir: &Path,
    out: Option<&Path>,
    frames: Option<&str>,
    cfg: &PipelineConfig,
) -> Result<()> {
    let estimator = build_estimator(cfg)?;
    let mut inputs = Vec::new();
    for frame_id in frame_list(data, frames)? {
        let frame = kitti::load_frame(data, &frame_id)?;
        let (dets, _) = load_frame_dets(dets_dir, &frame_id)?;
        inputs.push((frame, dets));
    }
    let report = bench(&inputs, estimator.as_ref(), cfg).map_err(|e| anyhow!("{e}"))?;
    let json_text = report.to_json();
    match out {
        Some(p) => std::fs::write(p, &json_text)?,
        None => println!("{json_text}"),
    }
    Ok(())
}

fn cmd_synth_gen(
    out: &Path,
    frames: usize,
    objects: usize,
    depth_sigma: f64,
    dropout: f64,
    seed: u64,
    spec_path: Option<&Path>,
) -> Result<()> {
    let scenes: Vec<SynthSceneSpec> = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let spec: SynthSceneSpec = serde_json::from_str(&text)
                .with_context(|| format!("parsing scene spec {}", p.display()))?;
            vec![spec; frames]
        }
        None => random_scenes(
            frames,
            objects,
            NoiseModel { depth_sigma, dropout_prob: dropout },
            seed,
        ),
    };
    for (i, scene) in scenes.iter().enumerate() {
        let (mut frame, labels) =
            generate_frame(scene, seed + i as u64).map_err(|e| anyhow!("{e}"))?;
        frame.frame_id = format!("{i:06}");
        write_frame_kitti(out, scene, &frame, &labels)?;
    }
    println!("wrote {frames} frames under {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_toy(
    out: &Path,
    samples: usize,
    epochs: usize,
    lr: f64,
    bins: usize,
    seed: u64,
    loss_csv: Option<&Path>,
    no_augment: bool,
    cfg: &PipelineConfig,
) -> Result<()> {
    let train = make_marker_roi_dataset(samples, &cfg.view, 1.0, seed);
    let test = make_marker_roi_dataset(samples / 4 + 1, &cfg.view, 1.0, seed + 1);
    let model = ToyEstimator::new(cfg.view.roi_width, cfg.view.roi_height, 28, bins);
    let train_cfg = TrainConfig {
        epochs,
        lr,
        weights: cfg.weights,
        augment: !no_augment,
        flip_map: FlipYawMap::NormalMirror,
        seed,
        ..TrainConfig::default()
    };
    let (model, history) = vmv_core::orientation::train_toy_estimator(&train, model, &train_cfg)
        .map_err(|e| anyhow!("{e}"))?;
    model.save(out).map_err(|e| anyhow!("{e}"))?;
    if let Some(p) = loss_csv {
        std::fs::write(p, history.to_csv())?;
    }
    let mut errors = Vec::new();
    for (roi, target) in &test {
        let (vec, _) = model
            .estimate_view(roi, &ViewContext::default())
            .map_err(|e| anyhow!("{e}"))?;
        if let Ok(pred) = decode_angle_vector(&vec) {
            errors.push(vmv_core::orientation::wrap_angle(pred - target).unwrap_or(0.0));
        }
    }
    let aae = vmv_core::evaluation::aae(&errors).map_err(|e| anyhow!("{e}"))?;
    println!(
        "trained on {} samples for {epochs} epochs; held-out AAE {:.2} deg; model -> {}",
        train.len(),
        aae.to_degrees(),
        out.display()
    );
    Ok(())
}
