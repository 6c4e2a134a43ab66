//! Depth evaluation: median alignment, capping and the seven standard metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BilinearResize, ImageGrid};
use crate::regularizer::normalize_inverse_depth;

pub const DEFAULT_MIN_DEPTH: f64 = 1e-3;
pub const DEFAULT_CAP: f64 = 80.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "AbsRel,SqRel,RMSE,RMSELog,δ<1.25,δ<1.25²,δ<1.25³";

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    /// One CSV row; `{:?}` formatting round-trips every value exactly.
    pub fn csv_row(&self) -> String {
        self.to_array()
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Compensated (Neumaier) running sum.
#[derive(Clone, Copy, Default)]
struct Accumulator {
    sum: f64,
    carry: f64,
}

impl Accumulator {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn check_pair(pred: &ImageGrid, gt: &ImageGrid, valid: &ImageGrid) -> Result<()> {
    let want = (gt.height(), gt.width(), 1);
    for (name, g) in [
        ("prediction", pred),
        ("ground truth", gt),
        ("valid mask", valid),
    ] {
        if g.dims() != want {
            return Err(Error::Evaluation(format!(
                "{name} is {:?}, expected {want:?}",
                g.dims()
            )));
        }
    }
    Ok(())
}

fn valid_indices(valid: &ImageGrid) -> Result<Vec<usize>> {
    let idx: Vec<usize> = valid
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(k, _)| k)
        .collect();
    if idx.is_empty() {
        return Err(Error::Evaluation("no valid pixels".into()));
    }
    Ok(idx)
}

/// Median with the mean of the two middle elements for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Scales `pred` so that its median over `valid` matches that of `gt`.
pub fn median_align(pred: &ImageGrid, gt: &ImageGrid, valid: &ImageGrid) -> Result<ImageGrid> {
    check_pair(pred, gt, valid)?;
    let idx = valid_indices(valid)?;
    let mut p: Vec<f64> = idx.iter().map(|&k| pred.data()[k]).collect();
    let mut g: Vec<f64> = idx.iter().map(|&k| gt.data()[k]).collect();
    if p.iter().chain(&g).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Evaluation(
            "depths must be positive on the valid set".into(),
        ));
    }
    let scale = median(&mut g) / median(&mut p);
    Ok(pred.map(|v| v * scale))
}

/// Metrics over `valid` after clamping both maps to `[min_depth, cap]`.
pub fn compute_metrics_with(
    pred: &ImageGrid,
    gt: &ImageGrid,
    valid: &ImageGrid,
    min_depth: f64,
    cap: f64,
) -> Result<DepthMetrics> {
    check_pair(pred, gt, valid)?;
    if !(cap > min_depth) || !(min_depth > 0.0) {
        return Err(Error::Evaluation(format!(
            "invalid depth range [{min_depth}, {cap}]"
        )));
    }
    let idx = valid_indices(valid)?;
    let n = idx.len() as f64;
    let mut acc = [Accumulator::default(); 7];
    for &k in &idx {
        let p = pred.data()[k].clamp(min_depth, cap);
        let g = gt.data()[k].clamp(min_depth, cap);
        if !p.is_finite() || !g.is_finite() {
            return Err(Error::Evaluation(format!("non-finite depth at pixel {k}")));
        }
        let d = p - g;
        let ratio = (p / g).max(g / p);
        let terms = [
            d.abs() / g,
            d * d / g,
            d * d,
            (p.ln() - g.ln()).powi(2),
            (ratio < 1.25) as u8 as f64,
            (ratio < 1.25f64.powi(2)) as u8 as f64,
            (ratio < 1.25f64.powi(3)) as u8 as f64,
        ];
        for (a, t) in acc.iter_mut().zip(terms) {
            a.add(t);
        }
    }
    let mean = |k: usize| acc[k].value() / n;
    Ok(DepthMetrics {
        abs_rel: mean(0),
        sq_rel: mean(1),
        rmse: mean(2).sqrt(),
        rmse_log: mean(3).sqrt(),
        delta1: mean(4),
        delta2: mean(5),
        delta3: mean(6),
    })
}

pub fn compute_metrics(
    pred: &ImageGrid,
    gt: &ImageGrid,
    valid: &ImageGrid,
    cap: f64,
) -> Result<DepthMetrics> {
    compute_metrics_with(pred, gt, valid, DEFAULT_MIN_DEPTH, cap)
}

/// Median alignment followed by [`compute_metrics`].
pub fn evaluate_depth(
    pred: &ImageGrid,
    gt: &ImageGrid,
    valid: &ImageGrid,
    cap: f64,
) -> Result<DepthMetrics> {
    compute_metrics(&median_align(pred, gt, valid)?, gt, valid, cap)
}

/// Averages the depth of every scale's normalized inverse depth after
/// bilinear up-sampling to the resolution of the first (finest) entry.
pub fn aggregate_depth_prediction(disps: &[ImageGrid]) -> Result<ImageGrid> {
    let first = disps
        .first()
        .ok_or_else(|| Error::Evaluation("no inverse-depth maps to aggregate".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut sum = ImageGrid::new(h, w, 1);
    for d in disps {
        let up =
            BilinearResize::new(d.height(), d.width(), h, w)?.apply(&normalize_inverse_depth(d)?);
        for (s, v) in sum.data_mut().iter_mut().zip(up.data()) {
            *s += 1.0 / v;
        }
    }
    let n = disps.len() as f64;
    Ok(sum.map(|v| v / n))
}
