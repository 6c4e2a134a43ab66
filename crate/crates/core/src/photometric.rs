//! Photometric error: `alpha * (1 - SSIM) / 2 + (1 - alpha) * |I - I_synth|`.
//!
//! SSIM uses a Gaussian window that is renormalized over its in-bounds taps
//! at the image border, computed per channel.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::image::ImageGrid;
use crate::warp::WarpResult;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotometricConfig {
    pub alpha: f64,
    /// Odd window side in pixels.
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            window: 3,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl PhotometricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(contract(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.window.is_multiple_of(2) {
            return Err(contract(format!("SSIM window {} must be odd", self.window)));
        }
        if !(self.sigma > 0.0) || !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(contract("SSIM sigma, c1 and c2 must be positive"));
        }
        Ok(())
    }
}

/// Separable Gaussian window with border renormalization.
struct Window {
    radius: usize,
    taps: Vec<f64>,
}

impl Window {
    fn new(cfg: &PhotometricConfig) -> Self {
        let radius = cfg.window / 2;
        let taps = (0..cfg.window)
            .map(|k| {
                let d = k as f64 - radius as f64;
                (-(d * d) / (2.0 * cfg.sigma * cfg.sigma)).exp()
            })
            .collect();
        Self { radius, taps }
    }

    /// In-bounds tap range along one axis around `p`, with its weight sum.
    #[inline]
    fn span(&self, p: usize, n: usize) -> (usize, usize, f64) {
        let lo = p.saturating_sub(self.radius);
        let hi = (p + self.radius).min(n - 1);
        let sum = (lo..=hi).map(|q| self.taps[q + self.radius - p]).sum();
        (lo, hi, sum)
    }

    #[inline]
    fn tap(&self, p: usize, q: usize) -> f64 {
        self.taps[q + self.radius - p]
    }
}

/// Local statistics at every pixel and channel, kept for the backward pass.
struct SsimStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    /// Windowed variance `E[(a - mu_a)^2]`.
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
    ssim: Vec<f64>,
}

fn ssim_stats(a: &ImageGrid, b: &ImageGrid, cfg: &PhotometricConfig) -> SsimStats {
    let (h, w, ch) = a.dims();
    let win = &Window::new(cfg);
    let n = h * w * ch;
    let mut st = SsimStats {
        mu_a: vec![0.0; n],
        mu_b: vec![0.0; n],
        var_a: vec![0.0; n],
        var_b: vec![0.0; n],
        cov: vec![0.0; n],
        ssim: vec![0.0; n],
    };
    let (ad, bd) = (a.data(), b.data());
    for i in 0..h {
        let (r0, r1, rs) = win.span(i, h);
        for j in 0..w {
            let (c0, c1, cs) = win.span(j, w);
            let norm = rs * cs;
            for c in 0..ch {
                let taps = || {
                    (r0..=r1).flat_map(move |qi| {
                        let wr = win.tap(i, qi);
                        (c0..=c1)
                            .map(move |qj| (wr * win.tap(j, qj) / norm, (qi * w + qj) * ch + c))
                    })
                };
                let (mut ma, mut mb) = (0.0, 0.0);
                for (wq, k) in taps() {
                    ma += wq * ad[k];
                    mb += wq * bd[k];
                }
                // Centered second pass avoids cancellation in E[x^2] - mu^2.
                let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
                for (wq, k) in taps() {
                    let (x, y) = (ad[k] - ma, bd[k] - mb);
                    va += wq * x * x;
                    vb += wq * y * y;
                    cv += wq * x * y;
                }
                let k = (i * w + j) * ch + c;
                let num = (2.0 * ma * mb + cfg.c1) * (2.0 * cv + cfg.c2);
                let den = (ma * ma + mb * mb + cfg.c1) * (va + vb + cfg.c2);
                st.mu_a[k] = ma;
                st.mu_b[k] = mb;
                st.var_a[k] = va;
                st.var_b[k] = vb;
                st.cov[k] = cv;
                st.ssim[k] = num / den;
            }
        }
    }
    st
}

/// Per-pixel, per-channel SSIM.
pub fn ssim_map(a: &ImageGrid, b: &ImageGrid, cfg: &PhotometricConfig) -> Result<ImageGrid> {
    a.ensure_same_shape(b, "ssim_map")?;
    cfg.validate()?;
    let st = ssim_stats(a, b, cfg);
    ImageGrid::from_vec(a.height(), a.width(), a.channels(), st.ssim)
}

/// Back-propagates `g_ssim` (d loss / d ssim, per pixel and channel) to `b`.
fn ssim_backward_b(
    a: &ImageGrid,
    b: &ImageGrid,
    st: &SsimStats,
    g_ssim: &[f64],
    cfg: &PhotometricConfig,
) -> Vec<f64> {
    let (h, w, ch) = a.dims();
    let n = h * w * ch;
    // Per-pixel sensitivities to the windowed moments of b.
    let mut k_mu = vec![0.0; n];
    let mut k_bb = vec![0.0; n];
    let mut k_ab = vec![0.0; n];
    for k in 0..n {
        let g = g_ssim[k];
        if g == 0.0 {
            continue;
        }
        let (ma, mb) = (st.mu_a[k], st.mu_b[k]);
        let a1 = 2.0 * ma * mb + cfg.c1;
        let a2 = 2.0 * st.cov[k] + cfg.c2;
        let b1 = ma * ma + mb * mb + cfg.c1;
        let b2 = st.var_a[k] + st.var_b[k] + cfg.c2;
        let den = b1 * b2;
        let s = st.ssim[k];
        k_mu[k] = g * ((2.0 * ma * a2 - 2.0 * ma * a1) - s * (2.0 * mb * b2 - 2.0 * mb * b1)) / den;
        k_ab[k] = g * 2.0 * a1 / den;
        k_bb[k] = -g * s * b1 / den;
    }
    let win = Window::new(cfg);
    let (ad, bd) = (a.data(), b.data());
    let mut grad = vec![0.0; n];
    for i in 0..h {
        let (r0, r1, rs) = win.span(i, h);
        for j in 0..w {
            let (c0, c1, cs) = win.span(j, w);
            let norm = rs * cs;
            for c in 0..ch {
                let p = (i * w + j) * ch + c;
                let (km, kb, ka) = (k_mu[p], k_bb[p], k_ab[p]);
                if km == 0.0 && kb == 0.0 && ka == 0.0 {
                    continue;
                }
                for qi in r0..=r1 {
                    let wr = win.tap(i, qi);
                    for qj in c0..=c1 {
                        let wq = wr * win.tap(j, qj) / norm;
                        let q = (qi * w + qj) * ch + c;
                        grad[q] += wq * (km + 2.0 * bd[q] * kb + ad[q] * ka);
                    }
                }
            }
        }
    }
    grad
}

/// Intermediate state of [`photometric_error`] needed by its adjoint.
pub(crate) struct PhotometricEval {
    stats: SsimStats,
    pub error: ImageGrid,
}

pub(crate) fn photometric_eval(
    target: &ImageGrid,
    synth: &ImageGrid,
    mask: &ImageGrid,
    cfg: &PhotometricConfig,
) -> PhotometricEval {
    let (h, w, ch) = target.dims();
    let stats = ssim_stats(target, synth, cfg);
    let (td, sd) = (target.data(), synth.data());
    let error = ImageGrid::from_fn(h, w, 1, |i, j, _| {
        let m = mask.get(i, j, 0);
        if m == 0.0 {
            return 0.0;
        }
        let base = (i * w + j) * ch;
        let (mut ssim, mut l1) = (0.0, 0.0);
        for c in 0..ch {
            ssim += stats.ssim[base + c];
            l1 += (td[base + c] - sd[base + c]).abs();
        }
        let chf = ch as f64;
        m * (cfg.alpha * (1.0 - ssim / chf) / 2.0 + (1.0 - cfg.alpha) * l1 / chf)
    });
    PhotometricEval { stats, error }
}

/// d loss / d synth given d loss / d error.
pub(crate) fn photometric_backward(
    eval: &PhotometricEval,
    target: &ImageGrid,
    synth: &ImageGrid,
    mask: &ImageGrid,
    g_err: &[f64],
    cfg: &PhotometricConfig,
) -> ImageGrid {
    let (h, w, ch) = target.dims();
    let chf = ch as f64;
    let mut g_ssim = vec![0.0; h * w * ch];
    for p in 0..h * w {
        let g = g_err[p] * mask.data()[p];
        for c in 0..ch {
            g_ssim[p * ch + c] = -g * cfg.alpha / (2.0 * chf);
        }
    }
    let mut grad = ssim_backward_b(target, synth, &eval.stats, &g_ssim, cfg);
    let (td, sd) = (target.data(), synth.data());
    for p in 0..h * w {
        let g = g_err[p] * mask.data()[p];
        if g == 0.0 {
            continue;
        }
        for c in 0..ch {
            let k = p * ch + c;
            let diff = sd[k] - td[k];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[k] += g * (1.0 - cfg.alpha) / chf * sign;
        }
    }
    ImageGrid::from_vec(h, w, ch, grad).expect("gradient shape")
}

/// Per-pixel photometric error of `synth` against `target`, channel-averaged and
/// multiplied by `synth.mask`.
pub fn photometric_error(
    target: &ImageGrid,
    synth: &WarpResult,
    cfg: &PhotometricConfig,
) -> Result<ImageGrid> {
    target.ensure_same_shape(&synth.image, "photometric_error")?;
    if (
        synth.mask.height(),
        synth.mask.width(),
        synth.mask.channels(),
    ) != (target.height(), target.width(), 1)
    {
        return Err(contract(
            "photometric_error: mask must be a single-channel grid of image size",
        ));
    }
    cfg.validate()?;
    Ok(photometric_eval(target, &synth.image, &synth.mask, cfg).error)
}

/// `sum(err) / max(sum(mask), 1)`.
pub fn reduce_error(err: &ImageGrid, mask: &ImageGrid) -> Result<f64> {
    err.ensure_same_shape(mask, "reduce_error")?;
    let total: f64 = err.data().iter().sum();
    let count: f64 = mask.data().iter().sum();
    Ok(total / count.max(1.0))
}
