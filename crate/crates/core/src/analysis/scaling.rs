use serde::{Deserialize, Serialize};

use crate::error::AnalysisError;

/// `L(D) = l_inf + (d_c / D)^alpha`. `D` may be in any unit as long as
/// `d_c` uses the same one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFitParams {
    pub l_inf: f64,
    pub d_c: f64,
    pub alpha: f64,
    /// Sum of squared residuals in loss space.
    pub residual: f64,
    /// False for flat data, where only `l_inf` is meaningful.
    pub identifiable: bool,
}

impl ScalingFitParams {
    pub fn predict(&self, d: f64) -> f64 {
        if !self.identifiable {
            return self.l_inf;
        }
        self.l_inf + (self.d_c / d).powf(self.alpha)
    }
}

pub const ALPHA_GRID: (f64, f64, usize) = (0.01, 2.0, 64);
const TOL: f64 = 1e-10;

/// Best `(l_inf, beta)` for fixed `alpha`, with `beta = d_c^alpha`, under
/// `l_inf >= 0`, `beta >= 0`. Returns `(l_inf, beta, sse)`.
fn solve_linear(points: &[(f64, f64)], alpha: f64) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.powf(-alpha)).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let mut beta = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let mut c = my - beta * mx;
    if c < 0.0 {
        c = 0.0;
        beta = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / xs.iter().map(|x| x * x).sum::<f64>();
    }
    if beta < 0.0 {
        beta = 0.0;
        c = my.max(0.0);
    }
    let sse = xs.iter().zip(&ys).map(|(x, y)| (y - c - beta * x).powi(2)).sum();
    (c, beta, sse)
}

/// Golden-section minimum of the profiled residual on `[a, b]`.
fn refine(points: &[(f64, f64)], mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let sse = |al: f64| solve_linear(points, al).2;
    let (mut x1, mut x2) = (b - g * (b - a), a + g * (b - a));
    let (mut f1, mut f2) = (sse(x1), sse(x2));
    while b - a > TOL {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = sse(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = sse(x2);
        }
    }
    (a + b) / 2.0
}

/// Least-squares fit in loss space. The linear parameters are solved in
/// closed form for each exponent; the exponent is searched from 64 starts
/// on `0.01..2`, and every local minimum on that grid is refined until the
/// exponent bracket is below 1e-10.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<ScalingFitParams, AnalysisError> {
    if points.len() < 3 {
        return Err(AnalysisError::InvalidInput(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(d, l)| !(d > 0.0) || !l.is_finite()) {
        return Err(AnalysisError::InvalidInput("data sizes must be positive and losses finite".into()));
    }
    let mut ds: Vec<f64> = points.iter().map(|p| p.0).collect();
    ds.sort_by(f64::total_cmp);
    if ds.windows(2).any(|w| w[0] == w[1]) {
        return Err(AnalysisError::InvalidInput("data sizes must be distinct".into()));
    }
    let l0 = points[0].1;
    if points.iter().all(|p| (p.1 - l0).abs() <= 1e-12 * l0.abs().max(1.0)) {
        log::warn!("all losses equal; exponent is unidentifiable");
        return Ok(ScalingFitParams { l_inf: l0, d_c: 0.0, alpha: f64::NAN, residual: 0.0, identifiable: false });
    }
    let (lo, hi, n) = ALPHA_GRID;
    let grid: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
    let sse: Vec<f64> = grid.iter().map(|&a| solve_linear(points, a).2).collect();
    let mut best = (f64::INFINITY, lo);
    for k in 0..n {
        let left = if k > 0 { sse[k - 1] } else { f64::INFINITY };
        let right = if k + 1 < n { sse[k + 1] } else { f64::INFINITY };
        if sse[k] <= left && sse[k] <= right {
            let a = refine(points, grid[k.saturating_sub(1)], grid[(k + 1).min(n - 1)]);
            let s = solve_linear(points, a).2;
            if s < best.0 {
                best = (s, a);
            }
        }
    }
    let alpha = best.1;
    let (l_inf, beta, residual) = solve_linear(points, alpha);
    Ok(ScalingFitParams { l_inf, d_c: beta.powf(1.0 / alpha), alpha, residual, identifiable: beta > 0.0 })
}
