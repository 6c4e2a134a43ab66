//! Raster containers, the box-filter pyramid and bilinear up-sampling.

use crate::error::{contract, Error, Result};

/// Row-major `height x width x channels` grid of `f64` samples.
///
/// Used for images, inverse-depth maps, masks and per-pixel vector fields alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(contract(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(row, col, channel)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.width + j) * self.channels + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[self.index(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, value: f64) {
        let k = self.index(i, j, c);
        self.data[k] = value;
    }

    /// All channels of pixel `(i, j)`.
    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let k = self.index(i, j, 0);
        &self.data[k..k + self.channels]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_shape(&self, other: &ImageGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(contract(format!(
                "{what}: shape {:?} does not match {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> ImageGrid {
        self.map(|v| v * factor)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Extracts one channel as a single-channel grid.
    pub fn channel(&self, c: usize) -> ImageGrid {
        ImageGrid::from_fn(self.height, self.width, 1, |i, j, _| self.get(i, j, c))
    }

    /// Mirrors the grid left to right.
    pub fn flipped_horizontally(&self) -> ImageGrid {
        ImageGrid::from_fn(self.height, self.width, self.channels, |i, j, c| {
            self.get(i, self.width - 1 - j, c)
        })
    }

    pub fn clamp01(&self) -> ImageGrid {
        self.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Output dimension after one ceil-halving step.
#[inline]
pub fn halved(n: usize) -> usize {
    n.div_ceil(2)
}

/// Dimensions of pyramid level `s` for a `height x width` base.
pub fn level_dims(height: usize, width: usize, s: usize) -> (usize, usize) {
    (0..s).fold((height, width), |(h, w), _| (halved(h), halved(w)))
}

/// 2x box-filter down-sampling. Output pixels on an odd trailing edge average
/// only the samples that exist.
pub fn downsample2x(img: &ImageGrid) -> Result<ImageGrid> {
    let (h, w, _) = img.dims();
    if h < 2 || w < 2 {
        return Err(Error::Degenerate(format!(
            "downsample2x needs at least 2x2 pixels, got {h}x{w}"
        )));
    }
    Ok(box_halve(img))
}

fn box_halve(img: &ImageGrid) -> ImageGrid {
    let (h, w, ch) = img.dims();
    let (oh, ow) = (halved(h), halved(w));
    ImageGrid::from_fn(oh, ow, ch, |i, j, c| {
        // Pairwise sums over 1, 2 or 4 taps divided by a power of two keep
        // constant inputs exact.
        let row_sum = |ii: usize| {
            if 2 * j + 1 < w {
                (img.get(ii, 2 * j, c) + img.get(ii, 2 * j + 1, c), 2)
            } else {
                (img.get(ii, 2 * j, c), 1)
            }
        };
        let (top, n) = row_sum(2 * i);
        if 2 * i + 1 < h {
            let (bottom, _) = row_sum(2 * i + 1);
            (top + bottom) / (2 * n) as f64
        } else {
            top / n as f64
        }
    })
}

/// Multiscale stack; level `s` is downscaled by `2^s`.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<ImageGrid>,
    pub scale_factors: Vec<usize>,
}

impl Pyramid {
    /// Builds `count` levels by repeated box-filter halving. A dimension that has
    /// reached 1 stays 1.
    pub fn build(base: &ImageGrid, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(contract("pyramid needs at least one level"));
        }
        let mut levels = vec![base.clone()];
        for _ in 1..count {
            let prev = levels.last().unwrap();
            let next = box_halve(prev);
            levels.push(next);
        }
        let scale_factors = (0..count).map(|s| 1usize << s).collect();
        Ok(Self {
            levels,
            scale_factors,
        })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// One bilinear tap set along a single axis: `(lo, hi, frac)` so that the
/// interpolated value is `(1 - frac) * x[lo] + frac * x[hi]`.
#[derive(Clone, Copy, Debug)]
struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<AxisTap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = if lo + 1 < n_in { lo + 1 } else { lo };
            AxisTap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Precomputed align-corners-false bilinear resize. Linear in its input, so the
/// same taps give the adjoint used for back-propagation.
#[derive(Clone, Debug)]
pub struct BilinearResize {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    rows: Vec<AxisTap>,
    cols: Vec<AxisTap>,
}

impl BilinearResize {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if in_h == 0 || in_w == 0 {
            return Err(Error::Degenerate("cannot resize an empty grid".into()));
        }
        if out_h < in_h || out_w < in_w {
            return Err(contract(format!(
                "upsample_bilinear cannot shrink {in_h}x{in_w} to {out_h}x{out_w}"
            )));
        }
        Ok(Self {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: axis_taps(in_h, out_h),
            cols: axis_taps(in_w, out_w),
        })
    }

    pub fn apply(&self, img: &ImageGrid) -> ImageGrid {
        assert_eq!((img.height(), img.width()), (self.in_h, self.in_w));
        ImageGrid::from_fn(self.out_h, self.out_w, img.channels(), |i, j, c| {
            let r = self.rows[i];
            let q = self.cols[j];
            let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
            let top = lerp(img.get(r.lo, q.lo, c), img.get(r.lo, q.hi, c), q.frac);
            let bot = lerp(img.get(r.hi, q.lo, c), img.get(r.hi, q.hi, c), q.frac);
            lerp(top, bot, r.frac)
        })
    }

    /// Transpose of [`apply`](Self::apply): scatters output-space gradients back
    /// onto the input grid.
    pub fn adjoint(&self, grad_out: &ImageGrid) -> ImageGrid {
        assert_eq!(
            (grad_out.height(), grad_out.width()),
            (self.out_h, self.out_w)
        );
        let ch = grad_out.channels();
        let mut g = ImageGrid::new(self.in_h, self.in_w, ch);
        for i in 0..self.out_h {
            let r = self.rows[i];
            for j in 0..self.out_w {
                let q = self.cols[j];
                for c in 0..ch {
                    let go = grad_out.get(i, j, c);
                    if go == 0.0 {
                        continue;
                    }
                    let taps = [
                        (r.lo, q.lo, (1.0 - r.frac) * (1.0 - q.frac)),
                        (r.lo, q.hi, (1.0 - r.frac) * q.frac),
                        (r.hi, q.lo, r.frac * (1.0 - q.frac)),
                        (r.hi, q.hi, r.frac * q.frac),
                    ];
                    for (a, b, wgt) in taps {
                        let k = g.index(a, b, c);
                        g.data_mut()[k] += wgt * go;
                    }
                }
            }
        }
        g
    }
}

/// Align-corners-false bilinear up-sampling to `out_h x out_w`.
pub fn upsample_bilinear(img: &ImageGrid, out_h: usize, out_w: usize) -> Result<ImageGrid> {
    Ok(BilinearResize::new(img.height(), img.width(), out_h, out_w)?.apply(img))
}
