//! Output directories: locking, hashed file writes, manifests and renders.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use warpdepth::io::{encode_pfm, encode_png};
use warpdepth::objective::SnippetLoss;
use warpdepth::ImageGrid;

use crate::config::hex;
use crate::error::{CliError, CliResult, Context};

pub const MANIFEST: &str = "manifest.toml";
const LOCK: &str = ".warpdepth.lock";

/// Self-description written next to every set of outputs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    /// Effective configuration and command arguments, as TOML.
    pub config: String,
    /// File name to SHA-256.
    pub files: BTreeMap<String, String>,
}

/// An output directory held exclusively for the lifetime of the value.
pub struct OutputDir {
    path: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(path: &Path) -> CliResult<Self> {
        fs::create_dir_all(path).context(format!("creating {}", path.display()))?;
        let lock = path.join(LOCK);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => CliError::io(format!(
                    "{} is locked by another run (remove {} if stale)",
                    path.display(),
                    lock.display()
                )),
                _ => CliError::io(format!("locking {}: {e}", path.display())),
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let target = self.path.join(name);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&target, bytes).context(format!("writing {}", target.display()))?;
        self.files
            .insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_png(&mut self, name: &str, img: &ImageGrid) -> CliResult<()> {
        self.write(name, &encode_png(img)?)
    }

    pub fn write_pfm(&mut self, name: &str, img: &ImageGrid) -> CliResult<()> {
        self.write(name, &encode_pfm(img)?)
    }

    pub fn finish(mut self, command: &str, config_toml: String) -> CliResult<Manifest> {
        let manifest = Manifest {
            tool: "warpdepth".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: hex(&Sha256::digest(config_toml.as_bytes())),
            config: config_toml,
            files: std::mem::take(&mut self.files),
        };
        let text = toml::to_string(&manifest).expect("manifest serializes");
        let path = self.path.join(MANIFEST);
        fs::write(&path, text).context(format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK));
    }
}

pub const LOSS_CSV_VERSION: &str = "# warpdepth loss log v1";
pub const LOSS_CSV_HEADER: &str =
    "iteration,total,photometric_inverse,photometric_forward,smooth,sparse,\
grad_norm_depth,grad_norm_pose,grad_norm_motion";

/// Euclidean gradient norms of the depth, pose and motion parameter families.
fn gradient_norms(loss: &SnippetLoss) -> [f64; 3] {
    let mut sq = [0.0; 3];
    if let Some(g) = &loss.gradients {
        for (name, block) in g.blocks() {
            let family = match name.split('[').next() {
                Some("inv_depth_raw") => 0,
                Some("pose_raw") => 1,
                _ => 2,
            };
            sq[family] += block.iter().map(|v| v * v).sum::<f64>();
        }
    }
    sq.map(f64::sqrt)
}

/// Loss log: a version line, a header, then one row per evaluated state.
pub fn loss_csv(rows: &[SnippetLoss]) -> String {
    let mut out = format!("{LOSS_CSV_VERSION}\n{LOSS_CSV_HEADER}\n");
    for (i, l) in rows.iter().enumerate() {
        let [gd, gp, gm] = gradient_norms(l);
        out.push_str(&format!(
            "{i},{:?},{:?},{:?},{:?},{:?},{gd:?},{gp:?},{gm:?}\n",
            l.total, l.photometric_inverse, l.photometric_forward, l.smooth, l.sparse
        ));
    }
    out
}

/// Anchor colours of the heatmap, low to high.
const COLORMAP: [[f64; 3]; 9] = [
    [0.267, 0.005, 0.329],
    [0.283, 0.141, 0.458],
    [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558],
    [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518],
    [0.478, 0.821, 0.319],
    [0.993, 0.906, 0.144],
];

fn colour(t: f64) -> [f64; 3] {
    let x = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let k = (x.floor() as usize).min(COLORMAP.len() - 2);
    let f = x - k as f64;
    std::array::from_fn(|c| COLORMAP[k][c] * (1.0 - f) + COLORMAP[k + 1][c] * f)
}

/// Colour-maps a single-channel grid, scaling its finite range to `[0, 1]`.
/// Non-finite values render black.
pub fn heatmap(values: &ImageGrid) -> ImageGrid {
    let finite = values.data().iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    ImageGrid::from_fn(values.height(), values.width(), 3, |i, j, c| {
        let v = values.get(i, j, 0);
        if v.is_finite() {
            colour((v - lo) / span)[c]
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colour(0.0), COLORMAP[0]);
        assert_eq!(colour(1.0), COLORMAP[8]);
        assert_eq!(colour(-3.0), COLORMAP[0]);
    }

    #[test]
    fn heatmap_spans_range() {
        let g = ImageGrid::from_vec(1, 3, 1, vec![2.0, f64::NAN, 4.0]).unwrap();
        let h = heatmap(&g);
        assert_eq!(h.pixel(0, 0), &COLORMAP[0]);
        assert_eq!(h.pixel(0, 1), &[0.0; 3]);
        assert_eq!(h.pixel(0, 2), &COLORMAP[8]);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputDir::create(dir.path()).unwrap();
        let err = OutputDir::create(dir.path()).err().unwrap();
        assert_eq!(err.exit_code(), 3);
        drop(a);
        assert!(OutputDir::create(dir.path()).is_ok());
    }
}
