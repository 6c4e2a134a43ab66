//! Photometric and mirroring augmentation applied identically to a snippet.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::geometry::CameraModel;
use crate::image::ImageGrid;
use crate::objective::Snippet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub global_scale_range: [f64; 2],
    pub per_channel_range: [f64; 2],
    pub contrast_range: [f64; 2],
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            global_scale_range: [5.0 / 6.0, 1.2],
            per_channel_range: [0.8, 1.2],
            contrast_range: [0.5, 1.5],
            hflip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Configuration that leaves every snippet unchanged.
    pub fn identity() -> Self {
        Self {
            global_scale_range: [1.0, 1.0],
            per_channel_range: [1.0, 1.0],
            contrast_range: [1.0, 1.0],
            hflip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in [
            self.global_scale_range,
            self.per_channel_range,
            self.contrast_range,
        ] {
            if !(r[0] <= r[1] && r[0] >= 0.0 && r[1].is_finite()) {
                return Err(contract(format!("invalid augmentation range {r:?}")));
            }
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(contract("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Deterministic generator for this configuration's seed.
    pub fn rng(&self) -> ChaCha8Rng {
        rand::SeedableRng::seed_from_u64(self.seed)
    }
}

/// Factors drawn for one snippet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Applied {
    pub global_scale: f64,
    pub channel_scale: Vec<f64>,
    pub contrast: f64,
    pub flipped: bool,
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

/// Draws one set of factors and applies it to all three frames. Frames are
/// clamped to `[0, 1]`. The camera is mirrored together with the images.
pub fn augment_snippet(
    frames: &Snippet,
    cam: &CameraModel,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Snippet, CameraModel, Applied)> {
    cfg.validate()?;
    let channels = frames.target.channels();
    let applied = Applied {
        global_scale: draw(rng, cfg.global_scale_range),
        channel_scale: (0..channels)
            .map(|_| draw(rng, cfg.per_channel_range))
            .collect(),
        contrast: draw(rng, cfg.contrast_range),
        flipped: rng.gen_bool(cfg.hflip_prob),
    };
    let apply = |img: &ImageGrid| -> ImageGrid {
        let (h, w, ch) = img.dims();
        let mut out = ImageGrid::from_fn(h, w, ch, |i, j, c| {
            img.get(i, j, c) * applied.global_scale * applied.channel_scale[c]
        });
        if applied.contrast != 1.0 {
            let mean = out.mean();
            out = out.map(|v| mean + applied.contrast * (v - mean));
        }
        if applied.flipped {
            out = out.flipped_horizontally();
        }
        out.clamp01()
    };
    let [p, t, n] = frames.frames();
    let out = Snippet::new(apply(p), apply(t), apply(n))?;
    let cam = if applied.flipped {
        cam.flipped_horizontally()
    } else {
        *cam
    };
    Ok((out, cam, applied))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::default_camera;
    use rand::SeedableRng;

    fn snippet(seed: u64) -> Snippet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || ImageGrid::from_fn(5, 7, 3, |_, _, _| rng.gen());
        Snippet::new(img(), img(), img()).unwrap()
    }

    #[test]
    fn identity_config() {
        let s = snippet(0);
        let cam = default_camera(5, 7);
        let (out, c, a) = augment_snippet(
            &s,
            &cam,
            &AugmentConfig::identity(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(out.frames(), s.frames());
        assert_eq!(c, cam);
        assert!(!a.flipped);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = snippet(1);
        let cam = default_camera(5, 7);
        let cfg = AugmentConfig {
            hflip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (once, c1, _) = augment_snippet(&s, &cam, &cfg, &mut rng).unwrap();
        assert_eq!(c1.cx, 6.0 - cam.cx);
        let (twice, c2, _) = augment_snippet(&once, &c1, &cfg, &mut rng).unwrap();
        assert_eq!(twice.frames(), s.frames());
        assert_eq!(c2, cam);
    }

    #[test]
    fn deterministic_and_shared_across_frames() {
        let s = snippet(3);
        let cam = default_camera(5, 7);
        let cfg = AugmentConfig {
            contrast_range: [1.0, 1.0],
            hflip_prob: 0.0,
            ..Default::default()
        };
        let run = || augment_snippet(&s, &cam, &cfg, &mut cfg.rng()).unwrap();
        let (a, _, ra) = run();
        let (b, _, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(a.frames(), b.frames());
        assert!(ra.global_scale >= 5.0 / 6.0 && ra.global_scale <= 1.2);
        // Without contrast the per-pixel factor is identical across frames.
        for (src, out) in s.frames().iter().zip(a.frames()) {
            for i in 0..5 {
                for j in 0..7 {
                    for c in 0..3 {
                        let expect = (src.get(i, j, c) * ra.global_scale * ra.channel_scale[c])
                            .clamp(0.0, 1.0);
                        assert_eq!(out.get(i, j, c), expect);
                    }
                }
            }
        }
        // Successive snippets draw independent factors.
        let mut rng = cfg.rng();
        let (_, _, r1) = augment_snippet(&s, &cam, &cfg, &mut rng).unwrap();
        let (_, _, r2) = augment_snippet(&s, &cam, &cfg, &mut rng).unwrap();
        assert_ne!(r1, r2);
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let s = snippet(4);
        let cfg = AugmentConfig::default();
        let mut rng = cfg.rng();
        for _ in 0..20 {
            let (out, _, _) = augment_snippet(&s, &default_camera(5, 7), &cfg, &mut rng).unwrap();
            for f in out.frames() {
                assert!(f.min_value() >= 0.0 && f.max_value() <= 1.0);
            }
        }
    }
}
