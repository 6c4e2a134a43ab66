use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use warpdepth::augment::augment_snippet;
use warpdepth::evaluation::{compute_metrics, median_align};
use warpdepth::geometry::{pose_to_transform, project_grid, CameraModel, PoseParams};
use warpdepth::io::read_image;
use warpdepth::objective::{snippet_gradient, SceneParams, Snippet, SnippetLoss};
use warpdepth::optimizer::SnippetOptimizer;
use warpdepth::synthetic::render_snippet;
use warpdepth::warp::{forward_warp, inverse_warp};
use warpdepth::ImageGrid;

use crate::artifacts::{heatmap, loss_csv, OutputDir};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult, Context, Kind};

pub const CAMERA_FILE: &str = "camera.toml";
const FRAMES: [&str; 3] = ["prev.png", "target.png", "next.png"];

/// Intrinsics and true relative poses stored with a scene bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleCamera {
    pub camera: CameraModel,
    /// Target-to-neighbour poses for `t-1` and `t+1`.
    pub poses: [PoseParams; 2],
}

/// Learned poses written by `optimize`.
#[derive(Serialize)]
struct LearnedPoses {
    iteration: u64,
    poses: [PoseParams; 2],
}

/// Canonical text of everything that determines a command's outputs.
fn invocation(cfg: &RunConfig, args: &[(&str, String)]) -> String {
    let canonical = RunConfig {
        output_dir: PathBuf::from("."),
        threads: 0,
        ..cfg.clone()
    };
    let args: BTreeMap<&str, &String> = args.iter().map(|(k, v)| (*k, v)).collect();
    let mut text = canonical.to_toml();
    text.push_str("\n[args]\n");
    text.push_str(&toml::to_string(&args).expect("arguments serialize"));
    text
}

pub fn synth(cfg: &RunConfig) -> CliResult<()> {
    let spec = cfg.scene_spec()?;
    let camera = cfg.camera_for(cfg.height, cfg.width)?;
    let truth = render_snippet(&spec, &camera)?;
    let mut out = OutputDir::create(&cfg.output_dir)?;
    for (name, frame) in FRAMES.iter().zip(truth.frames.frames()) {
        out.write_png(name, frame)?;
    }
    out.write_pfm("depth.pfm", &truth.depth)?;
    out.write_png("depth.png", &heatmap(&truth.depth))?;
    out.write_pfm("motion_prev.pfm", &truth.motion[0])?;
    out.write_pfm("motion_next.pfm", &truth.motion[1])?;
    out.write_pfm("mover_mask.pfm", &truth.mover_mask)?;
    let bundle = BundleCamera {
        camera,
        poses: truth.pose_params,
    };
    out.write(
        CAMERA_FILE,
        toml::to_string(&bundle)
            .expect("camera serializes")
            .as_bytes(),
    )?;
    out.write("scene.toml", spec.to_toml().as_bytes())?;
    out.finish("synth", invocation(cfg, &[]))?;
    Ok(())
}

fn read_bundle(dir: &Path) -> CliResult<(Snippet, BundleCamera)> {
    let path = dir.join(CAMERA_FILE);
    let text =
        fs::read_to_string(&path).context(format!("reading scene bundle {}", dir.display()))?;
    let bundle: BundleCamera =
        toml::from_str(&text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let [p, t, n] = FRAMES.map(|f| read_image(dir.join(f)).context(dir.join(f).display()));
    let frames = Snippet::new(p?, t?, n?)?;
    let (h, w, _) = frames.target.dims();
    bundle.camera.validate().context(path.display())?;
    if (bundle.camera.height, bundle.camera.width) != (h, w) {
        return Err(CliError::io(format!(
            "{}: camera does not match the frames",
            path.display()
        )));
    }
    Ok((frames, bundle))
}

pub fn optimize(cfg: &RunConfig, bundle_dir: &Path) -> CliResult<()> {
    let (frames, bundle) = read_bundle(bundle_dir)?;
    let (frames, camera, flipped) = match &cfg.augment {
        Some(aug) => {
            let aug = warpdepth::augment::AugmentConfig {
                seed: cfg.seed,
                ..aug.clone()
            };
            let (f, c, applied) = augment_snippet(&frames, &bundle.camera, &aug, &mut aug.rng())?;
            (f, c, applied.flipped)
        }
        None => (frames, bundle.camera, false),
    };
    let (h, w, _) = frames.target.dims();
    let objective = cfg.objective();
    let init = SceneParams::zeros(h, w, objective.scales, cfg.motion);
    let mut opt = SnippetOptimizer::new(frames, camera, objective, cfg.optimizer.clone(), init)?;

    let mut out = OutputDir::create(&cfg.output_dir)?;
    let every = cfg.optimizer.checkpoint_every as u64;
    let mut rows: Vec<SnippetLoss> = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        let iteration = opt.state.iteration;
        let loss = opt.step_with_loss().map_err(|e| {
            let err = CliError::from(e);
            // Past the first step, parameters leaving the valid domain mean divergence.
            if err.kind == Kind::Numeric || (err.kind == Kind::Usage && iteration > 0) {
                CliError::numeric(format!(
                    "optimization failed at iteration {iteration}: {}",
                    err.message
                ))
            } else {
                err.context(format!("iteration {iteration}"))
            }
        })?;
        rows.push(loss);
        if every > 0 && opt.state.iteration % every == 0 {
            let name = format!("checkpoints/checkpoint_{:08}.bin", opt.state.iteration);
            out.write(&name, &opt.state.to_bytes())?;
        }
    }
    let last = snippet_gradient(&opt.frames, opt.params(), &opt.camera, &opt.objective)?;
    if !last.total.is_finite() {
        return Err(CliError::numeric(format!(
            "non-finite loss at iteration {}",
            opt.state.iteration
        )));
    }
    rows.push(last);

    let mut depth = opt.depth(true)?;
    if flipped {
        depth = depth.flipped_horizontally();
    }
    out.write("loss.csv", loss_csv(&rows).as_bytes())?;
    out.write_pfm("depth.pfm", &depth)?;
    out.write_png("depth.png", &heatmap(&depth))?;
    out.write("checkpoint.bin", &opt.state.to_bytes())?;
    let averaged = opt.averaged_params();
    let poses = LearnedPoses {
        iteration: opt.state.iteration,
        poses: [0, 1].map(|k| averaged.effective_pose(k, &opt.objective)),
    };
    out.write(
        "poses.toml",
        toml::to_string(&poses).expect("poses serialize").as_bytes(),
    )?;
    let args = [("bundle", bundle_dir.display().to_string())];
    out.finish("optimize", invocation(cfg, &args))?;
    println!(
        "loss {:.6} -> {:.6} after {} iterations",
        rows[0].total,
        rows[rows.len() - 1].total,
        cfg.iterations
    );
    Ok(())
}

fn read_depth(path: &Path) -> CliResult<ImageGrid> {
    let img = read_image(path).context(path.display())?;
    if img.channels() != 1 {
        return Err(CliError::usage(format!(
            "{}: depth must have one channel",
            path.display()
        )));
    }
    Ok(img)
}

pub fn eval(cfg: &RunConfig, pred: &Path, truth: &Path, cap: f64) -> CliResult<()> {
    let pred_img = read_depth(pred)?;
    let gt = read_depth(truth)?;
    if pred_img.dims() != gt.dims() {
        return Err(CliError::usage(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred_img.height(),
            pred_img.width(),
            gt.height(),
            gt.width()
        )));
    }
    let valid = gt.map(|d| if d.is_finite() && d > 0.0 { 1.0 } else { 0.0 });
    let aligned = median_align(&pred_img, &gt, &valid)?;
    let metrics = compute_metrics(&aligned, &gt, &valid, cap)?;
    let error = ImageGrid::from_fn(gt.height(), gt.width(), 1, |i, j, _| {
        if valid.get(i, j, 0) > 0.0 {
            (aligned.get(i, j, 0) - gt.get(i, j, 0)).abs() / gt.get(i, j, 0)
        } else {
            f64::NAN
        }
    });
    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write("metrics.csv", metrics.to_csv().as_bytes())?;
    out.write_png("error.png", &heatmap(&error))?;
    let args = [
        ("pred", pred.display().to_string()),
        ("truth", truth.display().to_string()),
        ("cap", format!("{cap:?}")),
    ];
    out.finish("eval", invocation(cfg, &args))?;
    print!("{}", metrics.to_csv());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

pub fn warp(
    cfg: &RunConfig,
    image: &Path,
    depth: &Path,
    pose: [f64; 6],
    direction: Direction,
) -> CliResult<()> {
    let src = read_image(image).context(image.display())?;
    let depth_img = read_depth(depth)?;
    let (h, w, _) = src.dims();
    if (depth_img.height(), depth_img.width()) != (h, w) {
        return Err(CliError::usage("image and depth sizes differ"));
    }
    if let Some(bad) = depth_img
        .data()
        .iter()
        .find(|d| !(d.is_finite() && **d > 0.0))
    {
        return Err(CliError::usage(format!(
            "depth must be finite and positive, found {bad}"
        )));
    }
    let camera = cfg.camera_for(h, w)?;
    let transform = pose_to_transform(&PoseParams::from_slice(&pose))?;
    let inv_depth = depth_img.map(|d| 1.0 / d);
    let flow = project_grid(&camera, &transform, &inv_depth, None)?;
    let result = match direction {
        Direction::Inverse => inverse_warp(&src, &flow)?,
        Direction::Forward => forward_warp(&src, &flow, h, w)?,
    };
    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write_png("warped.png", &result.image)?;
    out.write_pfm("mask.pfm", &result.mask)?;
    let args = [
        ("image", image.display().to_string()),
        ("depth", depth.display().to_string()),
        ("pose", format!("{pose:?}")),
        ("direction", format!("{direction:?}").to_lowercase()),
    ];
    out.finish("warp", invocation(cfg, &args))?;
    Ok(())
}
