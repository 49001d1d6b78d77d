//! Cornerness of iso-curve points: covariance of the Gaussian-weighted
//! point distribution and the rotation-invariant det/trace^2 measure,
//! with non-maximal suppression along the curve.

use thiserror::Error;

use crate::raster::{box_radius_for_sigma, iterated_box_filter_1d, Point};

#[derive(Debug, Error)]
pub enum CornernessError {
    #[error("fewer than 3 points carry non-negligible weight")]
    DegenerateSupport,
}

/// How the 1D Gaussian over arc indices is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Direct evaluation of exp(-d^2 / 2 sigma^2).
    Exact,
    /// Iterated box filter of an impulse, variance-matched to sigma.
    BoxApprox,
}

const BOX_PASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePointScore {
    pub index: usize,
    pub kappa: f64,
    pub eigen_major: f64,
    pub eigen_minor: f64,
}

fn arc_weights(n: usize, center: usize, sigma: f64, mode: WeightMode) -> Vec<f64> {
    match mode {
        WeightMode::Exact => (0..n)
            .map(|i| {
                let d = i as f64 - center as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect(),
        WeightMode::BoxApprox => {
            let mut imp = vec![0.0; n];
            imp[center] = 1.0;
            iterated_box_filter_1d(&imp, box_radius_for_sigma(sigma, BOX_PASSES), BOX_PASSES)
        }
    }
}

/// Weighted covariance of chain coordinates about their weighted mean,
/// Gaussian-weighted by arc distance from `index`. Coordinates may be
/// real-valued (rotation-invariance checks rotate them as reals).
pub fn covariance_at_f64(
    points: &[(f64, f64)],
    index: usize,
    sigma: f64,
    mode: WeightMode,
) -> Result<[[f64; 2]; 2], CornernessError> {
    assert!(index < points.len() && sigma > 0.0);
    let w = arc_weights(points.len(), index, sigma, mode);
    let support = w.iter().filter(|&&v| v > 1e-12).count();
    if support < 3 {
        return Err(CornernessError::DegenerateSupport);
    }
    let total: f64 = w.iter().sum();
    let (mut mx, mut my) = (0.0, 0.0);
    for (&(x, y), &wi) in points.iter().zip(&w) {
        mx += wi * x;
        my += wi * y;
    }
    mx /= total;
    my /= total;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&(x, y), &wi) in points.iter().zip(&w) {
        let (dx, dy) = (x - mx, y - my);
        sxx += wi * dx * dx;
        sxy += wi * dx * dy;
        syy += wi * dy * dy;
    }
    Ok([[sxx / total, sxy / total], [sxy / total, syy / total]])
}

pub fn covariance_at(
    points: &[Point],
    index: usize,
    sigma: f64,
    mode: WeightMode,
) -> Result<[[f64; 2]; 2], CornernessError> {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    covariance_at_f64(&pts, index, sigma, mode)
}

/// det / trace^2 of a PSD 2x2 matrix; 0 when the trace vanishes.
/// Bounded by 0.25, attained iff the eigenvalues are equal.
pub fn kappa(cov: [[f64; 2]; 2]) -> f64 {
    let trace = cov[0][0] + cov[1][1];
    if trace == 0.0 {
        return 0.0;
    }
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    det / (trace * trace)
}

/// Eigenvalues of a symmetric 2x2 matrix, major first, clamped to >= 0.
pub fn eigenvalues(cov: [[f64; 2]; 2]) -> (f64, f64) {
    let half_tr = (cov[0][0] + cov[1][1]) / 2.0;
    let half_diff = (cov[0][0] - cov[1][1]) / 2.0;
    let disc = (half_diff * half_diff + cov[0][1] * cov[0][1]).sqrt();
    ((half_tr + disc).max(0.0), (half_tr - disc).max(0.0))
}

/// Score every chain index: each index is the center of its own windowed
/// sub-segment of half-width `half_width`.
pub fn score_curve(
    points: &[Point],
    half_width: usize,
    sigma: f64,
    mode: WeightMode,
) -> Vec<CurvePointScore> {
    assert!(points.len() >= 3);
    let n = points.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half_width);
            let hi = (i + half_width).min(n - 1);
            let window = &points[lo..=hi];
            match covariance_at(window, i - lo, sigma, mode) {
                Ok(cov) => {
                    let (e1, e2) = eigenvalues(cov);
                    CurvePointScore {
                        index: i,
                        kappa: kappa(cov),
                        eigen_major: e1,
                        eigen_minor: e2,
                    }
                }
                Err(_) => CurvePointScore {
                    index: i,
                    kappa: 0.0,
                    eigen_major: 0.0,
                    eigen_minor: 0.0,
                },
            }
        })
        .collect()
}

/// Survivors whose kappa beats every neighbor within ± window along the
/// chain and clears `min_kappa`. Equal maxima resolve to the lower index.
pub fn nms_along_curve(
    scores: &[CurvePointScore],
    window: usize,
    min_kappa: f64,
) -> Vec<CurvePointScore> {
    assert!(window >= 1);
    let n = scores.len();
    let mut out = Vec::new();
    for i in 0..n {
        if scores[i].kappa < min_kappa {
            continue;
        }
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(n - 1);
        let wins = (lo..=hi).all(|j| {
            j == i
                || scores[i].kappa > scores[j].kappa
                || (scores[i].kappa == scores[j].kappa && i < j)
        });
        if wins {
            out.push(scores[i]);
        }
    }
    out
}
