//! Ray-cast renderer for scenes made of textured fronto-parallel rectangles.
//!
//! World rectangles live on planes `Z = depth`; their extent is given in
//! normalized coordinates `(X / depth, Y / depth)`. A rectangle without bounds
//! is an infinite background. Cameras follow `camera_path` (camera-to-world
//! poses for frames `t-1, t, t+1`); movers are displaced by
//! `(f - 1) * velocity` at frame `f`.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_to_transform, CameraModel, PoseParams, RigidTransform};
use crate::image::ImageGrid;
use crate::objective::Snippet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    /// Two octaves of smooth value noise.
    Noise,
    /// Sum of two oriented sinusoidal gratings.
    Grating,
    /// Noise plus one grating.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub kind: TextureKind,
    pub seed: u64,
    /// Feature size in world units.
    #[serde(default = "default_feature")]
    pub feature: f64,
}

fn default_feature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub depth: f64,
    /// `[x_min, x_max, y_min, y_max]` in normalized coordinates; `None` means
    /// unbounded.
    #[serde(default)]
    pub bounds: Option<[f64; 4]>,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mover {
    #[serde(flatten)]
    pub rect: Rect,
    /// World displacement per frame.
    pub velocity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub seed: u64,
    pub layout: Vec<Rect>,
    pub camera_path: Vec<PoseParams>,
    #[serde(default)]
    pub movers: Vec<Mover>,
}

/// Rendered frames with their ground truth for the middle frame.
#[derive(Clone, Debug)]
pub struct SnippetTruth {
    pub frames: Snippet,
    pub depth: ImageGrid,
    /// Maps camera-`t` coordinates to camera `t-1` and `t+1`.
    pub poses: [RigidTransform; 2],
    /// The same transforms as axis-angle parameters.
    pub pose_params: [PoseParams; 2],
    /// Per-pixel `(1 + m) ⊙ x` translation fields for `t-1` and `t+1`.
    pub motion: [ImageGrid; 2],
    /// 1 where a mover is visible in frame `t`.
    pub mover_mask: ImageGrid,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Scene(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.camera_path.len() != 3 {
            return Err(Error::Scene(format!(
                "camera_path needs 3 poses, got {}",
                self.camera_path.len()
            )));
        }
        if !self.layout.iter().any(|r| r.bounds.is_none()) {
            return Err(Error::Scene(
                "a background plane (no bounds) is required".into(),
            ));
        }
        let rects = self
            .layout
            .iter()
            .chain(self.movers.iter().map(|m| &m.rect));
        for r in rects {
            if !(r.depth > 0.0 && r.depth.is_finite()) {
                return Err(Error::Scene(format!(
                    "plane depth {} must be positive",
                    r.depth
                )));
            }
            if let Some([x0, x1, y0, y1]) = r.bounds {
                if !(x0 < x1 && y0 < y1) {
                    return Err(Error::Scene(format!("empty rectangle {:?}", r.bounds)));
                }
            }
            if !(r.texture.feature > 0.0 && r.texture.feature.is_finite()) {
                return Err(Error::Scene("texture feature size must be positive".into()));
            }
        }
        for m in &self.movers {
            if m.rect.bounds.is_none() {
                return Err(Error::Scene("movers must be bounded".into()));
            }
        }
        for p in &self.camera_path {
            pose_to_transform(p).map_err(|e| Error::Scene(e.to_string()))?;
        }
        Ok(())
    }
}

fn hash(seed: u64, a: i64, b: i64, c: u64) -> f64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// C2 value noise in [0, 1].
fn value_noise(seed: u64, x: f64, y: f64, channel: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (fade(x - fx), fade(y - fy));
    let v = |dx: i64, dy: i64| hash(seed, ix + dx, iy + dy, channel);
    let top = v(0, 0) + tx * (v(1, 0) - v(0, 0));
    let bottom = v(0, 1) + tx * (v(1, 1) - v(0, 1));
    top + ty * (bottom - top)
}

impl Texture {
    /// Colour at plane-local world coordinates; every channel stays in
    /// roughly [0.1, 0.9].
    pub fn sample(&self, x: f64, y: f64, scene_seed: u64) -> [f64; 3] {
        let seed = self.seed ^ scene_seed.wrapping_mul(0xA24B_AED4_963E_E407);
        let (u, v) = (x / self.feature, y / self.feature);
        let noise = |c: u64| {
            0.65 * value_noise(seed, u, v, c)
                + 0.35 * value_noise(seed ^ 0x5555, 2.0 * u, 2.0 * v, c)
        };
        let grating = |c: u64| {
            let a = std::f64::consts::TAU * hash(seed, 7, 11, c);
            let b = a + 1.3;
            let phase = std::f64::consts::TAU * hash(seed, 13, 17, c);
            0.5 + 0.25 * (std::f64::consts::TAU * (u * a.cos() + v * a.sin()) / 1.7 + phase).sin()
                + 0.25 * (std::f64::consts::TAU * (u * b.cos() + v * b.sin()) / 2.3).sin()
        };
        std::array::from_fn(|c| {
            let c = c as u64;
            let raw = match self.kind {
                TextureKind::Noise => noise(c),
                TextureKind::Grating => grating(c),
                TextureKind::Mixed => 0.6 * noise(c) + 0.4 * grating(c),
            };
            0.1 + 0.8 * raw
        })
    }
}

struct Hit {
    distance: f64,
    color: [f64; 3],
    mover: Option<usize>,
}

fn intersect(
    rect: &Rect,
    offset: &Vector3<f64>,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    scene_seed: u64,
) -> Option<(f64, [f64; 3])> {
    let plane_z = rect.depth + offset.z;
    if dir.z.abs() < 1e-15 {
        return None;
    }
    let s = (plane_z - origin.z) / dir.z;
    if !(s > 0.0) {
        return None;
    }
    let p = origin + dir * s;
    let (lx, ly) = (p.x - offset.x, p.y - offset.y);
    if let Some([x0, x1, y0, y1]) = rect.bounds {
        let (nx, ny) = (lx / rect.depth, ly / rect.depth);
        if !(nx >= x0 && nx < x1 && ny >= y0 && ny < y1) {
            return None;
        }
    }
    Some((s, rect.texture.sample(lx, ly, scene_seed)))
}

fn render_frame(
    spec: &SceneSpec,
    cam: &CameraModel,
    pose: &RigidTransform,
    frame: usize,
) -> Result<(ImageGrid, ImageGrid, ImageGrid)> {
    let (h, w) = (cam.height, cam.width);
    let mut img = ImageGrid::new(h, w, 3);
    let mut depth = ImageGrid::new(h, w, 1);
    let mut mover_id = ImageGrid::filled(h, w, 1, -1.0);
    let rot = pose.rotation();
    let origin = pose.translation();
    let zero = Vector3::zeros();
    let shift = frame as f64 - 1.0;
    for i in 0..h {
        for j in 0..w {
            let ray = cam.ray(i as f64, j as f64);
            let dir = rot * ray;
            let mut best: Option<Hit> = None;
            let mut consider = |hit: Option<(f64, [f64; 3])>, mover: Option<usize>| {
                if let Some((distance, color)) = hit {
                    if best.as_ref().is_none_or(|b| distance < b.distance) {
                        best = Some(Hit {
                            distance,
                            color,
                            mover,
                        });
                    }
                }
            };
            for r in &spec.layout {
                consider(intersect(r, &zero, &origin, &dir, spec.seed), None);
            }
            for (k, m) in spec.movers.iter().enumerate() {
                let off = Vector3::from(m.velocity) * shift;
                consider(intersect(&m.rect, &off, &origin, &dir, spec.seed), Some(k));
            }
            let hit = best.ok_or_else(|| {
                Error::Scene(format!(
                    "ray through pixel ({i}, {j}) of frame {frame} hits nothing"
                ))
            })?;
            for c in 0..3 {
                img.set(i, j, c, hit.color[c]);
            }
            // The ray has unit z in camera coordinates, so the ray parameter is the depth.
            depth.set(i, j, 0, hit.distance * ray.z);
            if let Some(k) = hit.mover {
                mover_id.set(i, j, 0, k as f64);
            }
        }
    }
    Ok((img, depth, mover_id))
}

/// Axis-angle parameters of a rigid transform.
pub fn transform_to_pose(t: &RigidTransform) -> PoseParams {
    let r = Rotation3::from_matrix_unchecked(t.rotation());
    let w = r.scaled_axis();
    let tr = t.translation();
    PoseParams::new([w.x, w.y, w.z], [tr.x, tr.y, tr.z])
}

/// Renders all three frames plus ground truth for the middle one.
pub fn render_snippet(spec: &SceneSpec, cam: &CameraModel) -> Result<SnippetTruth> {
    spec.validate()?;
    cam.validate()?;
    let cams: Vec<RigidTransform> = spec
        .camera_path
        .iter()
        .map(pose_to_transform)
        .collect::<Result<_>>()?;
    let mut frames = Vec::with_capacity(3);
    let mut depth_t = None;
    let mut movers_t = None;
    for (f, pose) in cams.iter().enumerate() {
        let (img, depth, ids) = render_frame(spec, cam, pose, f)?;
        if f == 1 {
            depth_t = Some(depth);
            movers_t = Some(ids);
        }
        frames.push(img);
    }
    let depth = depth_t.expect("middle frame");
    let ids = movers_t.expect("middle frame");
    let world_to_t = &cams[1];
    let poses = [
        cams[0].inverse().compose(world_to_t),
        cams[2].inverse().compose(world_to_t),
    ];
    let pose_params = [transform_to_pose(&poses[0]), transform_to_pose(&poses[1])];

    let (h, w) = (cam.height, cam.width);
    let rot_t_inv = world_to_t.rotation().transpose();
    let mut motion = [ImageGrid::new(h, w, 3), ImageGrid::new(h, w, 3)];
    let mut mover_mask = ImageGrid::new(h, w, 1);
    for i in 0..h {
        for j in 0..w {
            let id = ids.get(i, j, 0);
            if id < 0.0 {
                continue;
            }
            mover_mask.set(i, j, 0, 1.0);
            let m = &spec.movers[id as usize];
            let x = cam.ray(i as f64, j as f64) * depth.get(i, j, 0);
            for (k, field) in motion.iter_mut().enumerate() {
                let step = if k == 0 { -1.0 } else { 1.0 };
                let delta = rot_t_inv * (Vector3::from(m.velocity) * step);
                for c in 0..3 {
                    // Solve (1 + m) x = x + delta; components on the optical
                    // axis planes cannot carry motion in this parameterization.
                    let v = if x[c].abs() > 1e-12 {
                        delta[c] / x[c]
                    } else {
                        0.0
                    };
                    field.set(i, j, c, v);
                }
            }
        }
    }
    let [prev, target, next]: [ImageGrid; 3] = frames.try_into().expect("three frames");
    Ok(SnippetTruth {
        frames: Snippet::new(prev, target, next)?,
        depth,
        poses,
        pose_params,
        motion,
        mover_mask,
    })
}

/// Pinhole camera with a horizontal field of view of about 58 degrees.
pub fn default_camera(height: usize, width: usize) -> CameraModel {
    let f = 0.9 * width as f64;
    CameraModel::new(
        f,
        f,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        width,
        height,
    )
    .expect("valid camera")
}

fn translating_path(baseline: f64) -> Vec<PoseParams> {
    [-baseline, 0.0, baseline]
        .iter()
        .map(|&x| PoseParams::new([0.0; 3], [x, 0.0, 0.0]))
        .collect()
}

fn texture(kind: TextureKind, seed: u64, feature: f64) -> Texture {
    Texture {
        kind,
        seed,
        feature,
    }
}

/// Background at depth 10 and a nearer plane at depth 4, camera translating
/// sideways by `baseline` per frame.
pub fn two_plane_scene(seed: u64, baseline: f64) -> SceneSpec {
    SceneSpec {
        seed,
        layout: vec![
            Rect {
                depth: 10.0,
                bounds: None,
                texture: texture(TextureKind::Mixed, 1, 2.5),
            },
            Rect {
                depth: 4.0,
                bounds: Some([-0.28, 0.12, -0.2, 0.18]),
                texture: texture(TextureKind::Mixed, 2, 1.0),
            },
        ],
        camera_path: translating_path(baseline),
        movers: Vec::new(),
    }
}

/// The two-plane scene plus a mover sliding sideways in front of the background.
pub fn mover_scene(seed: u64, baseline: f64) -> SceneSpec {
    let mut spec = two_plane_scene(seed, baseline);
    spec.movers.push(Mover {
        rect: Rect {
            depth: 6.0,
            bounds: Some([0.18, 0.4, -0.05, 0.25]),
            texture: texture(TextureKind::Noise, 3, 0.8),
        },
        velocity: [0.12, 0.0, 0.0],
    });
    spec
}

/// Several narrow near planes in front of a far background: many pixels are
/// visible in only one neighbour.
pub fn occlusion_scene(seed: u64, baseline: f64) -> SceneSpec {
    let mut layout = vec![Rect {
        depth: 12.0,
        bounds: None,
        texture: texture(TextureKind::Mixed, 1, 3.0),
    }];
    for (k, x0) in [-0.45, -0.2, 0.05, 0.3].iter().enumerate() {
        layout.push(Rect {
            depth: 3.0 + 0.5 * k as f64,
            bounds: Some([*x0, x0 + 0.1, -0.4, 0.4]),
            texture: texture(TextureKind::Mixed, 10 + k as u64, 0.6),
        });
    }
    SceneSpec {
        seed,
        layout,
        camera_path: translating_path(baseline),
        movers: Vec::new(),
    }
}
