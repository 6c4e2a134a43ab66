//! The multiscale snippet objective and its exact gradient.
//!
//! For a frame triple `(I_{t-1}, I_t, I_{t+1})` and every scale `s`:
//!
//! * the scale's inverse depth is normalized by its mean, bilinearly
//!   up-sampled to full resolution and used to project every pixel of `I_t`
//!   into both neighbours (optionally displaced by the per-pixel object motion);
//! * both neighbours are inverse-warped into view `t`; their photometric errors
//!   are combined pixelwise as `2 * min(e_prev, e_next)` or `e_prev + e_next`;
//! * `I_t` is forward-warped into both neighbour views and compared against
//!   them (always averaged, a pixelwise minimum is not defined there);
//! * smoothness of the normalized inverse depth, and smoothness plus L1
//!   sparseness of the motion fields, enter with weight `base / 2^s`.
//!
//! Gradients are derived by hand (reverse mode) through every stage.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geometry::{
    pose_to_transform, project_camera_point, rotation_jacobian, CameraModel, PoseParams,
};
use crate::image::{level_dims, BilinearResize, ImageGrid};
use crate::photometric::{photometric_backward, photometric_eval, PhotometricConfig};
use crate::regularizer::{
    normalize_backward, normalize_inverse_depth, smoothness_terms, smoothness_with_grad,
    sparseness_terms, sparseness_with_grad, RegConfig,
};
use crate::warp::{inverse_warp_with_grad, FlowField, ForwardSplat};

/// How the two inverse-warp errors are combined per pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `2 * min(e_prev, e_next)`
    #[default]
    Min,
    /// `e_prev + e_next`
    Avg,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "min" => Ok(Variant::Min),
            "avg" => Ok(Variant::Avg),
            other => Err(format!("unknown variant `{other}` (expected min or avg)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Min => "min",
            Variant::Avg => "avg",
        })
    }
}

/// Affine range of the sigmoid-activated inverse depth before normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DispRange {
    pub min: f64,
    pub max: f64,
}

impl Default for DispRange {
    fn default() -> Self {
        Self {
            min: 0.01,
            max: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub scales: usize,
    pub photo: PhotometricConfig,
    pub reg: RegConfig,
    pub disp_range: DispRange,
    /// Include the forward-warp (splatting) terms.
    pub forward_terms: bool,
    /// Multiplier from raw pose parameters to the effective pose.
    pub pose_scale: f64,
    /// Multiplier from raw motion parameters to the effective translation field.
    pub motion_scale: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Min,
            scales: 3,
            photo: PhotometricConfig::default(),
            reg: RegConfig::default(),
            disp_range: DispRange::default(),
            forward_terms: true,
            pose_scale: 0.01,
            motion_scale: 0.01,
        }
    }
}

/// The frame triple `(t-1, t, t+1)`.
#[derive(Clone, Debug)]
pub struct Snippet {
    pub prev: ImageGrid,
    pub target: ImageGrid,
    pub next: ImageGrid,
}

impl Snippet {
    pub fn new(prev: ImageGrid, target: ImageGrid, next: ImageGrid) -> Result<Self> {
        target.ensure_same_shape(&prev, "snippet frame t-1")?;
        target.ensure_same_shape(&next, "snippet frame t+1")?;
        Ok(Self { prev, target, next })
    }

    pub fn frames(&self) -> [&ImageGrid; 3] {
        [&self.prev, &self.target, &self.next]
    }

    /// Neighbour `k`: 0 is `t-1`, 1 is `t+1`.
    pub fn neighbor(&self, k: usize) -> &ImageGrid {
        if k == 0 {
            &self.prev
        } else {
            &self.next
        }
    }
}

/// The optimizable parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    /// Pre-activation inverse depth of frame `t`, one grid per scale.
    pub inv_depth_raw: Vec<ImageGrid>,
    /// Raw 6-vectors `(rotation, translation)` for `t -> t-1` and `t -> t+1`.
    pub pose_raw: [[f64; 6]; 2],
    /// Raw full-resolution translation fields for `t -> t-1` and `t -> t+1`.
    pub motion_raw: Option<[ImageGrid; 2]>,
}

impl SceneParams {
    /// All-zero parameters: constant depth, identity poses, no object motion.
    pub fn zeros(height: usize, width: usize, scales: usize, motion: bool) -> Self {
        let inv_depth_raw = (0..scales)
            .map(|s| {
                let (h, w) = level_dims(height, width, s);
                ImageGrid::new(h, w, 1)
            })
            .collect();
        let motion_raw = motion.then(|| {
            [
                ImageGrid::new(height, width, 3),
                ImageGrid::new(height, width, 3),
            ]
        });
        Self {
            inv_depth_raw,
            pose_raw: [[0.0; 6]; 2],
            motion_raw,
        }
    }

    pub fn scales(&self) -> usize {
        self.inv_depth_raw.len()
    }

    pub fn effective_pose(&self, k: usize, cfg: &ObjectiveConfig) -> PoseParams {
        PoseParams::from_slice(&self.pose_raw[k]).scaled(cfg.pose_scale)
    }

    pub fn effective_motion(&self, cfg: &ObjectiveConfig) -> Option<[ImageGrid; 2]> {
        self.motion_raw
            .as_ref()
            .map(|m| [m[0].scaled(cfg.motion_scale), m[1].scaled(cfg.motion_scale)])
    }

    /// Named flat views of every parameter block, in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (s, g) in self.inv_depth_raw.iter().enumerate() {
            out.push((format!("inv_depth_raw[{s}]"), g.data()));
        }
        out.push(("pose_raw[prev]".into(), &self.pose_raw[0]));
        out.push(("pose_raw[next]".into(), &self.pose_raw[1]));
        if let Some(m) = &self.motion_raw {
            out.push(("motion_raw[prev]".into(), m[0].data()));
            out.push(("motion_raw[next]".into(), m[1].data()));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (s, g) in self.inv_depth_raw.iter_mut().enumerate() {
            out.push((format!("inv_depth_raw[{s}]"), g.data_mut()));
        }
        let [p, n] = &mut self.pose_raw;
        out.push(("pose_raw[prev]".into(), p));
        out.push(("pose_raw[next]".into(), n));
        if let Some([a, b]) = &mut self.motion_raw {
            out.push(("motion_raw[prev]".into(), a.data_mut()));
            out.push(("motion_raw[next]".into(), b.data_mut()));
        }
        out
    }
}

/// Gradients with the same layout as [`SceneParams`].
pub type SceneGradients = SceneParams;

/// Contributions of one scale. Regularizer entries are unweighted; `weight`
/// multiplies them in the total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScaleTerms {
    pub photometric_inverse: f64,
    pub photometric_forward: f64,
    pub smooth_depth: f64,
    pub smooth_motion: f64,
    pub sparse_motion: f64,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct SnippetLoss {
    pub total: f64,
    /// Sum over scales of the combined inverse-warp error.
    pub photometric_inverse: f64,
    /// Sum over scales of the forward-warp errors.
    pub photometric_forward: f64,
    /// Weighted smoothness (depth and motion) summed over scales.
    pub smooth: f64,
    /// Weighted motion sparseness summed over scales.
    pub sparse: f64,
    pub per_scale: Vec<ScaleTerms>,
    /// `2 * min(a, b) <= a + b` held at every pixel of every scale.
    pub min_le_avg_pointwise: bool,
    pub gradients: Option<SceneGradients>,
}

impl SnippetLoss {
    /// Recomputes the total from its parts.
    pub fn sum_of_terms(&self) -> f64 {
        self.photometric_inverse + self.photometric_forward + self.smooth + self.sparse
    }
}

/// Gradients with respect to the pre-normalization inverse depth and the
/// effective (post-scaling) pose and motion.
#[derive(Clone, Debug)]
pub struct DisparityGradients {
    pub disp: Vec<ImageGrid>,
    pub pose: [[f64; 6]; 2],
    pub motion: Option<[ImageGrid; 2]>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid activation mapped affinely onto `range`.
pub fn activate_disparity(raw: &ImageGrid, range: &DispRange) -> ImageGrid {
    raw.map(|r| range.min + (range.max - range.min) * sigmoid(r))
}

/// Normalized inverse depth and depth of a raw grid.
pub fn raw_to_depth(raw: &ImageGrid, range: &DispRange) -> Result<(ImageGrid, ImageGrid)> {
    let disp = normalize_inverse_depth(&activate_disparity(raw, range))?;
    let depth = disp.map(|d| 1.0 / d);
    Ok((disp, depth))
}

fn check_inputs(
    frames: &Snippet,
    cam: &CameraModel,
    disp_dims: &[(usize, usize)],
    motion: Option<&[ImageGrid; 2]>,
    cfg: &ObjectiveConfig,
) -> Result<()> {
    let (h, w, _) = frames.target.dims();
    frames.target.ensure_same_shape(&frames.prev, "frame t-1")?;
    frames.target.ensure_same_shape(&frames.next, "frame t+1")?;
    cam.validate()?;
    cfg.photo.validate()?;
    if disp_dims.is_empty() {
        return Err(contract("at least one scale is required"));
    }
    if disp_dims.len() != cfg.scales {
        return Err(contract(format!(
            "{} inverse-depth grids supplied for {} scales",
            disp_dims.len(),
            cfg.scales
        )));
    }
    for (s, &dims) in disp_dims.iter().enumerate() {
        let expect = level_dims(h, w, s);
        if dims != expect {
            return Err(contract(format!(
                "scale {s} inverse depth is {dims:?}, expected {expect:?}"
            )));
        }
        if expect.0 < 3 || expect.1 < 3 {
            return Err(Error::Degenerate(format!(
                "{} scales are not feasible for {h}x{w} frames (scale {s} would be {}x{})",
                cfg.scales, expect.0, expect.1
            )));
        }
    }
    if let Some(m) = motion {
        for f in m {
            if f.dims() != (h, w, 3) {
                return Err(contract(format!(
                    "motion field {:?} does not match {h}x{w}x3",
                    f.dims()
                )));
            }
            if f.data().iter().any(|v| !(1.0 + v).is_finite()) {
                return Err(contract("motion field must be finite"));
            }
        }
    }
    Ok(())
}

/// Per-pixel forward state of the projection into one neighbour.
struct Projector {
    flow: FlowField,
    /// Camera point before motion, `d * ray`.
    x: Vec<Vector3<f64>>,
    /// Camera point after motion.
    xm: Vec<Vector3<f64>>,
    /// Point in the neighbour camera.
    xp: Vec<Vector3<f64>>,
}

fn project_all(
    cam: &CameraModel,
    depth: &[f64],
    h: usize,
    w: usize,
    rot: &Matrix3<f64>,
    tr: &Vector3<f64>,
    motion: Option<&ImageGrid>,
) -> Projector {
    let n = h * w;
    let mut p = Projector {
        flow: FlowField::new(h, w),
        x: Vec::with_capacity(n),
        xm: Vec::with_capacity(n),
        xp: Vec::with_capacity(n),
    };
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let x = cam.ray(i as f64, j as f64) * depth[k];
            let xm = match motion {
                Some(m) => {
                    let t = m.pixel(i, j);
                    Vector3::new((1.0 + t[0]) * x.x, (1.0 + t[1]) * x.y, (1.0 + t[2]) * x.z)
                }
                None => x,
            };
            let xp = rot * xm + tr;
            p.flow.set(i, j, project_camera_point(cam, &xp));
            p.x.push(x);
            p.xm.push(xm);
            p.xp.push(xp);
        }
    }
    p
}

/// Everything one neighbour contributes at one scale.
struct Branch {
    proj: Projector,
    inverse: crate::warp::InverseWarp,
    inverse_eval: crate::photometric::PhotometricEval,
    forward: Option<(
        ForwardSplat,
        crate::warp::WarpResult,
        crate::photometric::PhotometricEval,
    )>,
}

fn run_branch(
    frames: &Snippet,
    k: usize,
    cam: &CameraModel,
    depth: &[f64],
    pose: &PoseParams,
    motion: Option<&ImageGrid>,
    cfg: &ObjectiveConfig,
) -> Result<Branch> {
    let (h, w, _) = frames.target.dims();
    let transform = pose_to_transform(pose)?;
    let proj = project_all(
        cam,
        depth,
        h,
        w,
        &transform.rotation(),
        &transform.translation(),
        motion,
    );
    let neighbor = frames.neighbor(k);
    let inverse = inverse_warp_with_grad(neighbor, &proj.flow);
    let inverse_eval = photometric_eval(
        &frames.target,
        &inverse.result.image,
        &inverse.result.mask,
        &cfg.photo,
    );
    let forward = cfg.forward_terms.then(|| {
        let splat = ForwardSplat::new(&proj.flow, h, w);
        let out = splat.apply(&frames.target);
        let eval = photometric_eval(neighbor, &out.image, &out.mask, &cfg.photo);
        (splat, out, eval)
    });
    Ok(Branch {
        proj,
        inverse,
        inverse_eval,
        forward,
    })
}

/// Loss (and optionally gradients) as a function of the pre-normalization
/// inverse depth per scale and the effective poses and motion fields.
///
/// Multiplying any `disp[s]` by a positive constant leaves the result unchanged.
pub fn loss_from_disparity(
    frames: &Snippet,
    cam: &CameraModel,
    disp: &[ImageGrid],
    poses: &[PoseParams; 2],
    motion: Option<&[ImageGrid; 2]>,
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> Result<(SnippetLoss, Option<DisparityGradients>)> {
    loss_impl(frames, cam, disp, poses, motion, cfg, want_grad, None)
}

#[allow(clippy::too_many_arguments)]
fn loss_impl(
    frames: &Snippet,
    cam: &CameraModel,
    disp: &[ImageGrid],
    poses: &[PoseParams; 2],
    motion: Option<&[ImageGrid; 2]>,
    cfg: &ObjectiveConfig,
    want_grad: bool,
    mut terms: Option<&mut Vec<f64>>,
) -> Result<(SnippetLoss, Option<DisparityGradients>)> {
    let dims: Vec<(usize, usize)> = disp.iter().map(|d| (d.height(), d.width())).collect();
    check_inputs(frames, cam, &dims, motion, cfg)?;
    for d in disp {
        if d.channels() != 1 || d.data().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(contract(
                "inverse depth must be a positive single-channel grid",
            ));
        }
    }
    let (h, w, _) = frames.target.dims();
    let n = h * w;

    let mut loss = SnippetLoss {
        total: 0.0,
        photometric_inverse: 0.0,
        photometric_forward: 0.0,
        smooth: 0.0,
        sparse: 0.0,
        per_scale: Vec::with_capacity(disp.len()),
        min_le_avg_pointwise: true,
        gradients: None,
    };
    let mut grads = DisparityGradients {
        disp: Vec::with_capacity(disp.len()),
        pose: [[0.0; 6]; 2],
        motion: motion.map(|_| [ImageGrid::new(h, w, 3), ImageGrid::new(h, w, 3)]),
    };

    for (s, disp_pre) in disp.iter().enumerate() {
        let weight = cfg.reg.weight(s);
        let disp_s = normalize_inverse_depth(disp_pre)?;
        let resize = BilinearResize::new(disp_s.height(), disp_s.width(), h, w)?;
        let disp_up = resize.apply(&disp_s);
        let depth: Vec<f64> = disp_up.data().iter().map(|d| 1.0 / d).collect();

        let motion_k = |k: usize| motion.map(|m| &m[k]);
        let (b0, b1) = rayon::join(
            || run_branch(frames, 0, cam, &depth, &poses[0], motion_k(0), cfg),
            || run_branch(frames, 1, cam, &depth, &poses[1], motion_k(1), cfg),
        );
        let branches = [b0?, b1?];

        // Inverse-warp terms, combined per pixel over a shared denominator.
        let e0 = branches[0].inverse_eval.error.data();
        let e1 = branches[1].inverse_eval.error.data();
        let m0 = branches[0].inverse.result.mask.data();
        let m1 = branches[1].inverse.result.mask.data();
        let valid: f64 = m0.iter().zip(m1).map(|(a, b)| a.max(*b)).sum();
        let denom = valid.max(1.0);
        let mut combined = 0.0;
        for p in 0..n {
            let lo = 2.0 * e0[p].min(e1[p]);
            let sum = e0[p] + e1[p];
            if !(lo <= sum) {
                loss.min_le_avg_pointwise = false;
            }
            combined += match cfg.variant {
                Variant::Min => lo,
                Variant::Avg => sum,
            };
        }
        let photometric_inverse = combined / denom;
        if let Some(t) = terms.as_deref_mut() {
            t.extend((0..n).map(|p| match cfg.variant {
                Variant::Min => 2.0 * e0[p].min(e1[p]) / denom,
                Variant::Avg => (e0[p] + e1[p]) / denom,
            }));
        }

        let mut photometric_forward = 0.0;
        let mut fw_denoms = [1.0; 2];
        for (k, b) in branches.iter().enumerate() {
            if let Some((_, out, eval)) = &b.forward {
                let cnt: f64 = out.mask.data().iter().sum();
                fw_denoms[k] = cnt.max(1.0);
                photometric_forward += eval.error.data().iter().sum::<f64>() / fw_denoms[k];
                if let Some(t) = terms.as_deref_mut() {
                    t.extend(eval.error.data().iter().map(|e| e / fw_denoms[k]));
                }
            }
        }

        // Regularizers.
        let mut g_disp_s = vec![0.0; disp_s.data().len()];
        let smooth_depth = smoothness_with_grad(&disp_s, cfg.reg.beta, weight, &mut g_disp_s)?;
        let (mut smooth_motion, mut sparse_motion) = (0.0, 0.0);
        if let (Some(m), Some(gm)) = (motion, grads.motion.as_mut()) {
            for k in 0..2 {
                smooth_motion +=
                    smoothness_with_grad(&m[k], cfg.reg.beta, weight, gm[k].data_mut())?;
                sparse_motion += sparseness_with_grad(&m[k], weight, gm[k].data_mut());
            }
        }
        if let Some(t) = terms.as_deref_mut() {
            smoothness_terms(&disp_s, cfg.reg.beta, weight, t);
            if let Some(m) = motion {
                for f in m {
                    smoothness_terms(f, cfg.reg.beta, weight, t);
                    sparseness_terms(f, weight, t);
                }
            }
        }

        loss.photometric_inverse += photometric_inverse;
        loss.photometric_forward += photometric_forward;
        loss.smooth += weight * (smooth_depth + smooth_motion);
        loss.sparse += weight * sparse_motion;
        loss.per_scale.push(ScaleTerms {
            photometric_inverse,
            photometric_forward,
            smooth_depth,
            smooth_motion,
            sparse_motion,
            weight,
        });

        if !want_grad {
            continue;
        }

        // d loss / d e_k for the inverse terms; ties go to t+1.
        let mut g_e = [vec![0.0; n], vec![0.0; n]];
        for p in 0..n {
            match cfg.variant {
                Variant::Avg => {
                    g_e[0][p] = 1.0 / denom;
                    g_e[1][p] = 1.0 / denom;
                }
                Variant::Min => {
                    if e1[p] <= e0[p] {
                        g_e[1][p] = 2.0 / denom;
                    } else {
                        g_e[0][p] = 2.0 / denom;
                    }
                }
            }
        }

        let mut g_depth = vec![0.0; n];
        for (k, b) in branches.iter().enumerate() {
            let neighbor = frames.neighbor(k);
            let inv = &b.inverse.result;
            let g_synth = photometric_backward(
                &b.inverse_eval,
                &frames.target,
                &inv.image,
                &inv.mask,
                &g_e[k],
                &cfg.photo,
            );
            let ch = g_synth.channels();
            let mut gu = vec![0.0; n];
            let mut gv = vec![0.0; n];
            for p in 0..n {
                for c in 0..ch {
                    let g = g_synth.data()[p * ch + c];
                    gu[p] += g * b.inverse.d_du.data()[p * ch + c];
                    gv[p] += g * b.inverse.d_dv.data()[p * ch + c];
                }
            }
            if let Some((splat, out, eval)) = &b.forward {
                let g_err = vec![1.0 / fw_denoms[k]; n];
                let g_out =
                    photometric_backward(eval, neighbor, &out.image, &out.mask, &g_err, &cfg.photo);
                let (fu, fv) = splat.backward(&b.proj.flow, &frames.target, &out.image, &g_out);
                for p in 0..n {
                    gu[p] += fu[p];
                    gv[p] += fv[p];
                }
            }

            // Through the projection, rigid transform and object motion.
            let transform = pose_to_transform(&poses[k])?;
            let rot = transform.rotation();
            let mut g_rot = Matrix3::zeros();
            let mut g_tr = Vector3::zeros();
            for p in 0..n {
                if (gu[p] == 0.0 && gv[p] == 0.0) || !b.proj.flow.valid[p] {
                    continue;
                }
                let xp = b.proj.xp[p];
                let z = xp.z;
                let g_xp = Vector3::new(
                    gu[p] * cam.fx / z,
                    gv[p] * cam.fy / z,
                    -(gu[p] * cam.fx * xp.x + gv[p] * cam.fy * xp.y) / (z * z),
                );
                g_tr += g_xp;
                g_rot += g_xp * b.proj.xm[p].transpose();
                let g_xm = rot.transpose() * g_xp;
                let g_x = match (motion, grads.motion.as_mut()) {
                    (Some(m), Some(gm)) => {
                        let x = b.proj.x[p];
                        let t = m[k].pixel(p / w, p % w);
                        let gmd = gm[k].data_mut();
                        gmd[p * 3] += g_xm.x * x.x;
                        gmd[p * 3 + 1] += g_xm.y * x.y;
                        gmd[p * 3 + 2] += g_xm.z * x.z;
                        Vector3::new(
                            g_xm.x * (1.0 + t[0]),
                            g_xm.y * (1.0 + t[1]),
                            g_xm.z * (1.0 + t[2]),
                        )
                    }
                    _ => g_xm,
                };
                // x = depth * ray
                let ray = b.proj.x[p] / depth[p];
                g_depth[p] += g_x.dot(&ray);
            }
            let jac = rotation_jacobian(&Vector3::from(poses[k].rotation));
            for a in 0..3 {
                grads.pose[k][a] += g_rot.component_mul(&jac[a]).sum();
                grads.pose[k][3 + a] += g_tr[a];
            }
        }

        // depth = 1 / disp_up
        let g_up: Vec<f64> = g_depth
            .iter()
            .zip(&depth)
            .map(|(g, d)| -g * d * d)
            .collect();
        let g_up = ImageGrid::from_vec(h, w, 1, g_up)?;
        let back = resize.adjoint(&g_up);
        for (g, b) in g_disp_s.iter_mut().zip(back.data()) {
            *g += b;
        }
        let g_pre = normalize_backward(disp_pre, &g_disp_s);
        grads.disp.push(ImageGrid::from_vec(
            disp_pre.height(),
            disp_pre.width(),
            1,
            g_pre,
        )?);
    }

    loss.total = loss.sum_of_terms();
    Ok((loss, want_grad.then_some(grads)))
}

fn evaluate(
    frames: &Snippet,
    params: &SceneParams,
    cam: &CameraModel,
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> Result<SnippetLoss> {
    evaluate_into(frames, params, cam, cfg, want_grad, None)
}

fn evaluate_into(
    frames: &Snippet,
    params: &SceneParams,
    cam: &CameraModel,
    cfg: &ObjectiveConfig,
    want_grad: bool,
    terms: Option<&mut Vec<f64>>,
) -> Result<SnippetLoss> {
    let disp: Vec<ImageGrid> = params
        .inv_depth_raw
        .iter()
        .map(|r| activate_disparity(r, &cfg.disp_range))
        .collect();
    let poses = [params.effective_pose(0, cfg), params.effective_pose(1, cfg)];
    let motion = params.effective_motion(cfg);
    let (mut loss, grads) = loss_impl(
        frames,
        cam,
        &disp,
        &poses,
        motion.as_ref(),
        cfg,
        want_grad,
        terms,
    )?;
    if let Some(g) = grads {
        let span = cfg.disp_range.max - cfg.disp_range.min;
        let inv_depth_raw = params
            .inv_depth_raw
            .iter()
            .zip(&g.disp)
            .map(|(raw, gd)| {
                let data = raw
                    .data()
                    .iter()
                    .zip(gd.data())
                    .map(|(&r, &g)| {
                        let sg = sigmoid(r);
                        g * span * sg * (1.0 - sg)
                    })
                    .collect();
                ImageGrid::from_vec(raw.height(), raw.width(), 1, data).expect("shape")
            })
            .collect();
        let pose_raw = g.pose.map(|p| p.map(|v| v * cfg.pose_scale));
        let motion_raw = g.motion.map(|m| m.map(|f| f.scaled(cfg.motion_scale)));
        loss.gradients = Some(SceneGradients {
            inv_depth_raw,
            pose_raw,
            motion_raw,
        });
    }
    Ok(loss)
}

/// Total multiscale loss of `params` on `frames`.
pub fn snippet_loss(
    frames: &Snippet,
    params: &SceneParams,
    cam: &CameraModel,
    cfg: &ObjectiveConfig,
) -> Result<SnippetLoss> {
    evaluate(frames, params, cam, cfg, false)
}

/// Loss together with its exact gradient with respect to every raw parameter.
/// The pixelwise minimum uses the subgradient of the achieving branch, with ties
/// assigned to `t+1`.
pub fn snippet_gradient(
    frames: &Snippet,
    params: &SceneParams,
    cam: &CameraModel,
    cfg: &ObjectiveConfig,
) -> Result<SnippetLoss> {
    evaluate(frames, params, cam, cfg, true)
}

/// Every additive contribution to the total loss, in an order that depends
/// only on the frame size and configuration. Their sum equals the total up to
/// rounding; subtracting two such lists elementwise yields loss differences
/// free of the cancellation error of subtracting two totals.
pub fn loss_contributions(
    frames: &Snippet,
    params: &SceneParams,
    cam: &CameraModel,
    cfg: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    let mut terms = Vec::new();
    evaluate_into(frames, params, cam, cfg, false, Some(&mut terms))?;
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_snippet(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Snippet {
        let mut img = || ImageGrid::from_fn(h, w, 3, |_, _, _| rng.gen());
        Snippet::new(img(), img(), img()).unwrap()
    }

    fn cam(h: usize, w: usize) -> CameraModel {
        CameraModel::new(
            w as f64,
            w as f64,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            w,
            h,
        )
        .unwrap()
    }

    #[test]
    fn raw_to_depth_examples() {
        let range = DispRange::default();
        let (disp, depth) = raw_to_depth(&ImageGrid::new(3, 4, 1), &range).unwrap();
        assert!(disp.data().iter().all(|&d| (d - 1.0).abs() < 1e-15));
        assert!(depth.data().iter().all(|&d| (d - 1.0).abs() < 1e-15));

        let sat = activate_disparity(&ImageGrid::filled(1, 1, 1, 800.0), &range);
        assert_eq!(sat.data()[0], range.max);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = ImageGrid::from_fn(5, 6, 1, |_, _, _| rng.gen_range(-4.0..4.0));
        let (disp, _) = raw_to_depth(&raw, &range).unwrap();
        assert!((disp.mean() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_params_have_shapes_per_scale() {
        let p = SceneParams::zeros(12, 16, 3, true);
        let dims: Vec<_> = p
            .inv_depth_raw
            .iter()
            .map(|g| (g.height(), g.width()))
            .collect();
        assert_eq!(dims, vec![(12, 16), (6, 8), (3, 4)]);
        assert_eq!(p.blocks().len(), 3 + 2 + 2);
    }

    #[test]
    fn identical_frames_identity_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = ImageGrid::from_fn(10, 12, 3, |_, _, _| rng.gen());
        let frames = Snippet::new(img.clone(), img.clone(), img.clone()).unwrap();
        let cfg = ObjectiveConfig {
            scales: 1,
            ..Default::default()
        };
        let params = SceneParams::zeros(10, 12, 1, false);
        let loss = snippet_loss(&frames, &params, &cam(10, 12), &cfg).unwrap();
        assert!(loss.photometric_inverse.abs() < 1e-12);
        assert!(loss.photometric_forward > 0.0);
        assert!((loss.total - loss.sum_of_terms()).abs() < 1e-12);
    }

    #[test]
    fn min_and_avg_agree_on_equal_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ImageGrid::from_fn(8, 10, 1, |_, _, _| rng.gen());
        let target = ImageGrid::from_fn(8, 10, 1, |_, _, _| rng.gen());
        let frames = Snippet::new(img.clone(), target, img).unwrap();
        let params = SceneParams::zeros(8, 10, 1, false);
        let mk = |variant| ObjectiveConfig {
            scales: 1,
            variant,
            ..Default::default()
        };
        let a = snippet_loss(&frames, &params, &cam(8, 10), &mk(Variant::Min)).unwrap();
        let b = snippet_loss(&frames, &params, &cam(8, 10), &mk(Variant::Avg)).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn infeasible_scale_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = random_snippet(&mut rng, 12, 16);
        let cfg = ObjectiveConfig {
            scales: 4,
            ..Default::default()
        };
        let params = SceneParams::zeros(12, 16, 4, false);
        assert!(matches!(
            snippet_loss(&frames, &params, &cam(12, 16), &cfg),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let a = ImageGrid::new(6, 6, 3);
        assert!(Snippet::new(a.clone(), a.clone(), ImageGrid::new(6, 7, 3)).is_err());
    }

    #[test]
    fn contributions_sum_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames = random_snippet(&mut rng, 8, 10);
        let cfg = ObjectiveConfig {
            scales: 2,
            ..Default::default()
        };
        let mut params = SceneParams::zeros(8, 10, 2, true);
        for (_, b) in params.blocks_mut() {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let total = snippet_loss(&frames, &params, &cam(8, 10), &cfg)
            .unwrap()
            .total;
        let terms = loss_contributions(&frames, &params, &cam(8, 10), &cfg).unwrap();
        assert!((terms.iter().sum::<f64>() - total).abs() < 1e-12);
    }

    #[test]
    fn small_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (6, 8);
        let frames = random_snippet(&mut rng, h, w);
        let cfg = ObjectiveConfig {
            scales: 2,
            variant: Variant::Avg,
            ..Default::default()
        };
        let mut params = SceneParams::zeros(h, w, 2, true);
        for (_, b) in params.blocks_mut() {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let c = cam(h, w);
        let analytic = snippet_gradient(&frames, &params, &c, &cfg)
            .unwrap()
            .gradients
            .unwrap();
        let blocks: Vec<Vec<f64>> = analytic
            .blocks()
            .into_iter()
            .map(|(_, b)| b.to_vec())
            .collect();
        let eps = 1e-5;
        let mut checked = 0;
        for (bi, g) in blocks.iter().enumerate() {
            for idx in 0..g.len() {
                let mut p = params.clone();
                let mut m = params.clone();
                p.blocks_mut()[bi].1[idx] += eps;
                m.blocks_mut()[bi].1[idx] -= eps;
                let fp = snippet_loss(&frames, &p, &c, &cfg).unwrap().total;
                let fm = snippet_loss(&frames, &m, &c, &cfg).unwrap().total;
                let fd = (fp - fm) / (2.0 * eps);
                if g[idx].abs() > 1e-8 {
                    let rel = (fd - g[idx]).abs() / g[idx].abs();
                    assert!(
                        rel < 1e-4,
                        "block {bi} idx {idx}: fd {fd} analytic {}",
                        g[idx]
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 50);
    }
}
