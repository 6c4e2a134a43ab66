//! View synthesis in both directions.
//!
//! *Inverse warping* gathers: every output pixel bilinearly samples the source
//! image at its projected location. *Forward warping* splats: every source
//! pixel lands at a continuous position in the target view and contributes to
//! the target pixels `[i, j]` with `|i - v| <= 1` and `|j - u| <= 1`, weighted
//! by `exp(-((i - v)^2 + (j - u)^2) / 2)` and normalized per target.

use crate::error::{contract, Result};
use crate::geometry::Projection;
use crate::image::ImageGrid;

/// Per-pixel landing positions in a target view.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// Target column.
    pub u: Vec<f64>,
    /// Target row.
    pub v: Vec<f64>,
    /// Target depth.
    pub z: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn new(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            u: vec![0.0; n],
            v: vec![0.0; n],
            z: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Every pixel maps onto itself at unit depth.
    pub fn identity(height: usize, width: usize) -> Self {
        let mut f = Self::new(height, width);
        for i in 0..height {
            for j in 0..width {
                f.set(
                    i,
                    j,
                    Projection {
                        u: j as f64,
                        v: i as f64,
                        z: 1.0,
                        valid: true,
                    },
                );
            }
        }
        f
    }

    /// Constant displacement `(du, dv)` of the identity flow.
    pub fn shifted(height: usize, width: usize, du: f64, dv: f64) -> Self {
        let mut f = Self::identity(height, width);
        f.u.iter_mut().for_each(|u| *u += du);
        f.v.iter_mut().for_each(|v| *v += dv);
        f
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> Projection {
        let k = i * self.width + j;
        Projection {
            u: self.u[k],
            v: self.v[k],
            z: self.z[k],
            valid: self.valid[k],
        }
    }

    /// Stores a projection, enforcing `valid = false` for non-positive depth or
    /// non-finite coordinates.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, p: Projection) {
        let k = i * self.width + j;
        self.u[k] = p.u;
        self.v[k] = p.v;
        self.z[k] = p.z;
        self.valid[k] = p.valid && p.z > 0.0 && p.u.is_finite() && p.v.is_finite();
    }

    #[inline]
    fn usable(&self, k: usize) -> bool {
        self.valid[k] && self.z[k] > 0.0 && self.u[k].is_finite() && self.v[k].is_finite()
    }
}

/// Synthesized image plus a `[0, 1]` mask that is exactly 0 where the value is undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub image: ImageGrid,
    pub mask: ImageGrid,
}

/// Bilinear taps for a coordinate inside `[0, n - 1]`: `(lo, hi, frac)`.
#[inline]
fn axis_interval(x: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let lo = (x.floor() as usize).min(n - 2);
    (lo, lo + 1, x - lo as f64)
}

/// Inverse warp together with the partial derivatives of every output sample
/// with respect to its own sampling coordinates.
pub(crate) struct InverseWarp {
    pub result: WarpResult,
    pub d_du: ImageGrid,
    pub d_dv: ImageGrid,
}

pub(crate) fn inverse_warp_with_grad(src: &ImageGrid, flow: &FlowField) -> InverseWarp {
    let (sh, sw, ch) = src.dims();
    let (h, w) = (flow.height(), flow.width());
    let mut image = ImageGrid::new(h, w, ch);
    let mut mask = ImageGrid::new(h, w, 1);
    let mut d_du = ImageGrid::new(h, w, ch);
    let mut d_dv = ImageGrid::new(h, w, ch);
    let (umax, vmax) = ((sw - 1) as f64, (sh - 1) as f64);
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            if !flow.usable(k) {
                continue;
            }
            let (u, v) = (flow.u[k], flow.v[k]);
            if !(0.0..=umax).contains(&u) || !(0.0..=vmax).contains(&v) {
                continue;
            }
            mask.set(i, j, 0, 1.0);
            let (x0, x1, fx) = axis_interval(u, sw);
            let (y0, y1, fy) = axis_interval(v, sh);
            for c in 0..ch {
                let a = src.get(y0, x0, c);
                let b = src.get(y0, x1, c);
                let d = src.get(y1, x0, c);
                let e = src.get(y1, x1, c);
                let val = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * d + fx * e);
                image.set(i, j, c, val);
                if sw > 1 {
                    d_du.set(i, j, c, (1.0 - fy) * (b - a) + fy * (e - d));
                }
                if sh > 1 {
                    d_dv.set(i, j, c, (1.0 - fx) * (d - a) + fx * (e - b));
                }
            }
        }
    }
    InverseWarp {
        result: WarpResult { image, mask },
        d_du,
        d_dv,
    }
}

/// Bilinear gather of `src` at `(flow.u, flow.v)`. Pixels whose sample point
/// leaves `[0, W-1] x [0, H-1]`, or whose flow is invalid, get mask 0 and value 0.
pub fn inverse_warp(src: &ImageGrid, flow: &FlowField) -> Result<WarpResult> {
    if flow.height() == 0 || flow.width() == 0 || src.pixels() == 0 {
        return Err(contract("inverse_warp on an empty grid"));
    }
    Ok(inverse_warp_with_grad(src, flow).result)
}

/// Source pixels bucketed by the integer cell of their landing point.
///
/// Each bucket is sorted by source index, so the gather that reads it is
/// independent of the order in which sources were inserted.
struct LandingBuckets {
    rows: usize,
    cols: usize,
    start: Vec<usize>,
    items: Vec<usize>,
}

impl LandingBuckets {
    /// Cells cover floor coordinates `-2..=H` by `-2..=W`, the only ones that
    /// can reach an in-range target.
    fn build(
        flow: &FlowField,
        out_h: usize,
        out_w: usize,
        order: impl Iterator<Item = usize> + Clone,
    ) -> Self {
        let rows = out_h + 3;
        let cols = out_w + 3;
        let cell_of = |k: usize| -> Option<usize> {
            if !flow.usable(k) {
                return None;
            }
            let fr = flow.v[k].floor();
            let fc = flow.u[k].floor();
            if fr < -2.0 || fc < -2.0 || fr > out_h as f64 || fc > out_w as f64 {
                return None;
            }
            Some((fr as isize + 2) as usize * cols + (fc as isize + 2) as usize)
        };
        let mut count = vec![0usize; rows * cols + 1];
        for k in order.clone() {
            if let Some(cell) = cell_of(k) {
                count[cell + 1] += 1;
            }
        }
        for c in 0..rows * cols {
            count[c + 1] += count[c];
        }
        let start = count.clone();
        let mut fill = count;
        let mut items = vec![0usize; start[rows * cols]];
        for k in order {
            if let Some(cell) = cell_of(k) {
                items[fill[cell]] = k;
                fill[cell] += 1;
            }
        }
        for c in 0..rows * cols {
            items[start[c]..start[c + 1]].sort_unstable();
        }
        Self {
            rows,
            cols,
            start,
            items,
        }
    }

    #[inline]
    fn cell(&self, r: isize, c: isize) -> &[usize] {
        let (r, c) = ((r + 2) as usize, (c + 2) as usize);
        if r >= self.rows || c >= self.cols {
            return &[];
        }
        let k = r * self.cols + c;
        &self.items[self.start[k]..self.start[k + 1]]
    }
}

/// Contributor lists of a forward splat, reusable for the backward pass.
pub(crate) struct ForwardSplat {
    out_h: usize,
    out_w: usize,
    /// CSR offsets into `sources` / `weights`, one range per target pixel.
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Vec<f64>,
    denom: Vec<f64>,
}

impl ForwardSplat {
    pub(crate) fn new(flow: &FlowField, out_h: usize, out_w: usize) -> Self {
        let n = flow.height() * flow.width();
        Self::with_order(flow, out_h, out_w, 0..n)
    }

    fn with_order(
        flow: &FlowField,
        out_h: usize,
        out_w: usize,
        order: impl Iterator<Item = usize> + Clone,
    ) -> Self {
        let buckets = LandingBuckets::build(flow, out_h, out_w, order);
        let mut offsets = Vec::with_capacity(out_h * out_w + 1);
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        let mut denom = Vec::with_capacity(out_h * out_w);
        offsets.push(0);
        for i in 0..out_h {
            for j in 0..out_w {
                let mut total = 0.0;
                for r in i as isize - 2..=i as isize + 1 {
                    for c in j as isize - 2..=j as isize + 1 {
                        for &k in buckets.cell(r, c) {
                            let dv = i as f64 - flow.v[k];
                            let du = j as f64 - flow.u[k];
                            if dv.abs() <= WINDOW_EDGE && du.abs() <= WINDOW_EDGE {
                                let wgt = (-(dv * dv + du * du) / 2.0).exp();
                                sources.push(k);
                                weights.push(wgt);
                                total += wgt;
                            }
                        }
                    }
                }
                denom.push(total);
                offsets.push(sources.len());
            }
        }
        Self {
            out_h,
            out_w,
            offsets,
            sources,
            weights,
            denom,
        }
    }

    pub(crate) fn apply(&self, src: &ImageGrid) -> WarpResult {
        let ch = src.channels();
        let mut image = ImageGrid::new(self.out_h, self.out_w, ch);
        let mut mask = ImageGrid::new(self.out_h, self.out_w, 1);
        let data = src.data();
        for t in 0..self.out_h * self.out_w {
            let (lo, hi) = (self.offsets[t], self.offsets[t + 1]);
            if lo == hi {
                continue;
            }
            mask.data_mut()[t] = 1.0;
            let d = self.denom[t];
            for c in 0..ch {
                let mut acc = 0.0;
                for e in lo..hi {
                    acc += self.weights[e] * data[self.sources[e] * ch + c];
                }
                image.data_mut()[t * ch + c] = acc / d;
            }
        }
        WarpResult { image, mask }
    }

    /// Sum of the normalized weights applied at each target (1 where masked in, 0 elsewhere).
    pub(crate) fn normalized_weight_sums(&self) -> Vec<f64> {
        (0..self.out_h * self.out_w)
            .map(|t| {
                (self.offsets[t]..self.offsets[t + 1])
                    .map(|e| self.weights[e] / self.denom[t])
                    .sum()
            })
            .collect()
    }

    /// Back-propagates `grad_out` (d loss / d output image) to the landing
    /// coordinates of each source pixel. Returns `(d/du, d/dv)` per source.
    pub(crate) fn backward(
        &self,
        flow: &FlowField,
        src: &ImageGrid,
        out: &ImageGrid,
        grad_out: &ImageGrid,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = flow.height() * flow.width();
        let ch = src.channels();
        let mut gu = vec![0.0; n];
        let mut gv = vec![0.0; n];
        let (sdata, odata, gdata) = (src.data(), out.data(), grad_out.data());
        for t in 0..self.out_h * self.out_w {
            let (lo, hi) = (self.offsets[t], self.offsets[t + 1]);
            if lo == hi {
                continue;
            }
            let (ti, tj) = ((t / self.out_w) as f64, (t % self.out_w) as f64);
            let d = self.denom[t];
            for e in lo..hi {
                let k = self.sources[e];
                let mut gw = 0.0;
                for c in 0..ch {
                    gw += gdata[t * ch + c] * (sdata[k * ch + c] - odata[t * ch + c]);
                }
                if gw == 0.0 {
                    continue;
                }
                let gw = gw / d * self.weights[e];
                gu[k] += gw * (tj - flow.u[k]);
                gv[k] += gw * (ti - flow.v[k]);
            }
        }
        (gu, gv)
    }
}

/// Forward warp with its per-target normalized weight sums.
#[derive(Clone, Debug)]
pub struct ForwardWarpDebug {
    pub result: WarpResult,
    pub weight_sums: ImageGrid,
}

fn check_forward(src: &ImageGrid, flow: &FlowField) -> Result<()> {
    if (src.height(), src.width()) != (flow.height(), flow.width()) {
        return Err(contract(format!(
            "forward_warp: flow {}x{} does not match source {}x{}",
            flow.height(),
            flow.width(),
            src.height(),
            src.width()
        )));
    }
    Ok(())
}

/// Half-width of the splat window. The slack keeps integer offsets produced
/// by projection roundoff inside the window.
const WINDOW_EDGE: f64 = 1.0 + 1e-9;

/// Normalized exponential splat of `src` into an `out_h x out_w` view.
/// Targets with no contributor get value 0 and mask 0.
pub fn forward_warp(
    src: &ImageGrid,
    flow: &FlowField,
    out_h: usize,
    out_w: usize,
) -> Result<WarpResult> {
    check_forward(src, flow)?;
    Ok(ForwardSplat::new(flow, out_h, out_w).apply(src))
}

pub fn forward_warp_debug(
    src: &ImageGrid,
    flow: &FlowField,
    out_h: usize,
    out_w: usize,
) -> Result<ForwardWarpDebug> {
    check_forward(src, flow)?;
    let splat = ForwardSplat::new(flow, out_h, out_w);
    let weight_sums = ImageGrid::from_vec(out_h, out_w, 1, splat.normalized_weight_sums())?;
    Ok(ForwardWarpDebug {
        result: splat.apply(src),
        weight_sums,
    })
}

/// Forward warp with source pixels inserted in an arbitrary order. The output
/// does not depend on `order`.
pub fn forward_warp_ordered(
    src: &ImageGrid,
    flow: &FlowField,
    out_h: usize,
    out_w: usize,
    order: &[usize],
) -> Result<WarpResult> {
    check_forward(src, flow)?;
    let n = src.pixels();
    let mut seen = vec![false; n];
    for &k in order {
        if k >= n || std::mem::replace(&mut seen[k], true) {
            return Err(contract("order must be a permutation of the source pixels"));
        }
    }
    if order.len() != n {
        return Err(contract("order must be a permutation of the source pixels"));
    }
    Ok(ForwardSplat::with_order(flow, out_h, out_w, order.iter().copied()).apply(src))
}

/// Elementwise minimum of two error maps.
pub fn occlusion_min_select(a: &ImageGrid, b: &ImageGrid) -> Result<ImageGrid> {
    a.ensure_same_shape(b, "occlusion_min_select")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x.min(y))
        .collect();
    ImageGrid::from_vec(a.height(), a.width(), a.channels(), data)
}
