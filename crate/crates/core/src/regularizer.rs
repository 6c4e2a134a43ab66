//! Smoothness and sparseness regularizers, and the mean normalization of
//! inverse depth that removes the global scale ambiguity.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::image::ImageGrid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    /// Mix between first-order (`beta`) and second-order (`1 - beta`) terms.
    pub beta: f64,
    /// Regularizer weight at full resolution.
    pub base_weight: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            beta: 0.25,
            base_weight: 0.01,
        }
    }
}

impl RegConfig {
    /// Weight for an output downscaled by `2^s`.
    pub fn weight(&self, s: usize) -> f64 {
        self.base_weight / (1u64 << s) as f64
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_stencil(grid: &ImageGrid) -> Result<()> {
    if grid.height() < 3 || grid.width() < 3 {
        return Err(Error::Degenerate(format!(
            "smoothness needs at least 3x3 pixels, got {}x{}",
            grid.height(),
            grid.width()
        )));
    }
    Ok(())
}

/// One finite-difference family: stencil taps `(row, col, coeff)`, how many
/// trailing rows / columns lack a full stencil, and the family weight.
struct Stencil {
    taps: &'static [(usize, usize, f64)],
    rows_short: usize,
    cols_short: usize,
    weight: f64,
}

fn stencils(beta: f64) -> [Stencil; 5] {
    [
        // d_x
        Stencil {
            taps: &[(0, 0, -1.0), (0, 1, 1.0)],
            rows_short: 0,
            cols_short: 1,
            weight: beta,
        },
        // d_y
        Stencil {
            taps: &[(0, 0, -1.0), (1, 0, 1.0)],
            rows_short: 1,
            cols_short: 0,
            weight: beta,
        },
        // d_xx
        Stencil {
            taps: &[(0, 0, 1.0), (0, 1, -2.0), (0, 2, 1.0)],
            rows_short: 0,
            cols_short: 2,
            weight: 1.0 - beta,
        },
        // d_yy
        Stencil {
            taps: &[(0, 0, 1.0), (1, 0, -2.0), (2, 0, 1.0)],
            rows_short: 2,
            cols_short: 0,
            weight: 1.0 - beta,
        },
        // d_xy and d_yx: composed forward differences commute, so the mixed
        // term enters twice.
        Stencil {
            taps: &[(0, 0, 1.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 1.0)],
            rows_short: 1,
            cols_short: 1,
            weight: 2.0 * (1.0 - beta),
        },
    ]
}

/// Calls `f(family, stencil, count, base_index, diff)` for every difference,
/// where `base_index` addresses the stencil origin.
fn for_each_difference(
    grid: &ImageGrid,
    beta: f64,
    mut f: impl FnMut(usize, &Stencil, f64, usize, f64),
) {
    let (h, w, ch) = grid.dims();
    let d = grid.data();
    for (fam, st) in stencils(beta).iter().enumerate() {
        let (rows, cols) = (h - st.rows_short, w - st.cols_short);
        let count = (rows * cols) as f64;
        for i in 0..rows {
            for j in 0..cols {
                for c in 0..ch {
                    let base = (i * w + j) * ch + c;
                    let diff: f64 = st
                        .taps
                        .iter()
                        .map(|&(di, dj, k)| k * d[base + (di * w + dj) * ch])
                        .sum();
                    f(fam, st, count, base, diff);
                }
            }
        }
    }
}

fn smoothness_impl(grid: &ImageGrid, beta: f64, mut grad: Option<&mut [f64]>, scale: f64) -> f64 {
    let (w, ch) = (grid.width(), grid.channels());
    let mut sums = [0.0; 5];
    for_each_difference(grid, beta, |fam, st, count, base, diff| {
        sums[fam] += diff.abs();
        if let Some(g) = grad.as_deref_mut() {
            let s = scale * st.weight * sign(diff) / count;
            if s != 0.0 {
                for &(di, dj, k) in st.taps {
                    g[base + (di * w + dj) * ch] += s * k;
                }
            }
        }
    });
    stencils(beta)
        .iter()
        .zip(sums)
        .zip(family_counts(grid))
        .map(|((st, sum), count)| st.weight * sum / count)
        .sum()
}

fn family_counts(grid: &ImageGrid) -> [f64; 5] {
    let (h, w) = (grid.height(), grid.width());
    stencils(0.0).map(|st| ((h - st.rows_short) * (w - st.cols_short)) as f64)
}

/// Every additive term of `scale * smoothness_loss(grid, beta)`, in a fixed order.
pub(crate) fn smoothness_terms(grid: &ImageGrid, beta: f64, scale: f64, out: &mut Vec<f64>) {
    for_each_difference(grid, beta, |_, st, count, _, diff| {
        out.push(scale * st.weight * diff.abs() / count)
    });
}

/// First/second-order L1 smoothness. Each difference family is the mean of its
/// absolute forward differences over the pixels where the stencil fits (the
/// trailing rows / columns are excluded); channels are summed.
pub fn smoothness_loss(grid: &ImageGrid, beta: f64) -> Result<f64> {
    check_stencil(grid)?;
    Ok(smoothness_impl(grid, beta, None, 0.0))
}

/// Loss and its subgradient scaled by `scale`, with `sign(0) = 0`.
pub(crate) fn smoothness_with_grad(
    grid: &ImageGrid,
    beta: f64,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    check_stencil(grid)?;
    Ok(smoothness_impl(grid, beta, Some(grad), scale))
}

/// Mean over pixels of `|tx| + |ty| + |tz|`.
pub fn sparseness_loss(field: &ImageGrid) -> f64 {
    if field.pixels() == 0 {
        return 0.0;
    }
    field.data().iter().map(|v| v.abs()).sum::<f64>() / field.pixels() as f64
}

pub(crate) fn sparseness_with_grad(field: &ImageGrid, scale: f64, grad: &mut [f64]) -> f64 {
    let n = field.pixels() as f64;
    for (g, v) in grad.iter_mut().zip(field.data()) {
        *g += scale * sign(*v) / n;
    }
    sparseness_loss(field)
}

pub(crate) fn sparseness_terms(field: &ImageGrid, scale: f64, out: &mut Vec<f64>) {
    let n = field.pixels() as f64;
    out.extend(field.data().iter().map(|v| scale * v.abs() / n));
}

/// Divides an inverse-depth grid by its mean.
pub fn normalize_inverse_depth(inv_depth: &ImageGrid) -> Result<ImageGrid> {
    let mean = inv_depth.mean();
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(contract(format!(
            "inverse depth mean {mean} must be positive"
        )));
    }
    Ok(inv_depth.map(|v| v / mean))
}

/// Adjoint of [`normalize_inverse_depth`] at `input`: maps d loss / d output to
/// d loss / d input.
pub(crate) fn normalize_backward(input: &ImageGrid, grad_out: &[f64]) -> Vec<f64> {
    let n = input.data().len() as f64;
    let mean = input.mean();
    let dot: f64 = grad_out.iter().zip(input.data()).map(|(g, x)| g * x).sum();
    let shared = dot / (mean * mean * n);
    grad_out.iter().map(|g| g / mean - shared).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_and_scale_weights() {
        let cfg = RegConfig::default();
        assert_eq!((cfg.beta, cfg.base_weight), (0.25, 0.01));
        assert_eq!(cfg.weight(0), 0.01);
        assert_eq!(cfg.weight(2), 0.0025);
    }

    #[test]
    fn constant_grid_is_smooth() {
        let g = ImageGrid::filled(5, 6, 3, 0.7);
        assert_eq!(smoothness_loss(&g, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn planar_ramp() {
        let g = ImageGrid::from_fn(5, 5, 1, |i, j, _| (i + j) as f64);
        // Hand count: |dx| = |dy| = 1 wherever defined, every second difference 0.
        assert_eq!(smoothness_loss(&g, 1.0).unwrap(), 2.0);
        assert_eq!(smoothness_loss(&g, 0.0).unwrap(), 0.0);
        assert_eq!(smoothness_loss(&g, 0.25).unwrap(), 0.5);

        // d = i * j has a unit mixed derivative and nothing else of second order.
        let g = ImageGrid::from_fn(4, 5, 1, |i, j, _| (i * j) as f64);
        assert!((smoothness_loss(&g, 0.0).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn too_small_grid_is_rejected() {
        assert!(matches!(
            smoothness_loss(&ImageGrid::new(2, 5, 1), 0.25),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn sparseness_examples() {
        assert_eq!(sparseness_loss(&ImageGrid::new(3, 3, 3)), 0.0);
        let f = ImageGrid::from_fn(4, 4, 3, |_, _, c| if c == 0 { 0.1 } else { 0.0 });
        assert!((sparseness_loss(&f) - 0.1).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = ImageGrid::from_fn(3, 5, 3, |_, _, _| rng.gen_range(-1.0..1.0));
        let mut sum = 0.0;
        for i in 0..3 {
            for j in 0..5 {
                sum += f.get(i, j, 0).abs() + f.get(i, j, 1).abs() + f.get(i, j, 2).abs();
            }
        }
        assert!((sparseness_loss(&f) - sum / 15.0).abs() < 1e-15);
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_inverse_depth(&ImageGrid::filled(3, 3, 1, 0.5)).unwrap();
        assert!(n.data().iter().all(|&v| v == 1.0));

        let g = ImageGrid::from_vec(1, 2, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(normalize_inverse_depth(&g).unwrap().data(), &[0.5, 1.5]);

        assert!(normalize_inverse_depth(&ImageGrid::new(2, 2, 1)).is_err());
    }

    #[test]
    fn smoothness_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ImageGrid::from_fn(5, 6, 2, |_, _, _| rng.gen());
        let mut grad = vec![0.0; g.data().len()];
        smoothness_with_grad(&g, 0.25, 1.0, &mut grad).unwrap();
        let h = 1e-7;
        for k in 0..grad.len() {
            let mut p = g.clone();
            let mut m = g.clone();
            p.data_mut()[k] += h;
            m.data_mut()[k] -= h;
            let fd = (smoothness_loss(&p, 0.25).unwrap() - smoothness_loss(&m, 0.25).unwrap())
                / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ImageGrid::from_fn(3, 4, 1, |_, _, _| rng.gen_range(0.5..2.0));
        let wts: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |x: &ImageGrid| -> f64 {
            normalize_inverse_depth(x)
                .unwrap()
                .data()
                .iter()
                .zip(&wts)
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = normalize_backward(&x, &wts);
        let h = 1e-6;
        for k in 0..12 {
            let mut p = x.clone();
            let mut m = x.clone();
            p.data_mut()[k] += h;
            m.data_mut()[k] -= h;
            assert!(((f(&p) - f(&m)) / (2.0 * h) - g[k]).abs() < 1e-8);
        }
    }

    fn grid_strategy() -> impl Strategy<Value = ImageGrid> {
        (3usize..8, 3usize..8).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0.05f64..3.0, h * w)
                .prop_map(move |d| ImageGrid::from_vec(h, w, 1, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn smoothness_scale_covariant(g in grid_strategy(), c in 0.1f64..10.0) {
            let a = smoothness_loss(&g.scaled(c), 0.25).unwrap();
            let b = c * smoothness_loss(&g, 0.25).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        #[test]
        fn smoothness_zero_only_for_constant(g in grid_strategy()) {
            let s = smoothness_loss(&g, 0.25).unwrap();
            let constant = g.data().iter().all(|&v| v == g.data()[0]);
            prop_assert_eq!(s == 0.0, constant);
        }

        #[test]
        fn normalization_properties(g in grid_strategy(), c in 0.01f64..100.0) {
            let n = normalize_inverse_depth(&g).unwrap();
            prop_assert!((n.mean() - 1.0).abs() < 1e-12);
            let nn = normalize_inverse_depth(&n).unwrap();
            for (a, b) in n.data().iter().zip(nn.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let nc = normalize_inverse_depth(&g.scaled(c)).unwrap();
            for (a, b) in n.data().iter().zip(nc.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
