//! Stineman's shape-preserving rational interpolation.
//!
//! Interior knot slopes use Stineman's weighted secant formula; the end
//! knots take the one-sided secant. Between two knots the interpolant is
//! the linear value corrected by a rational term built from the deviations
//! of the two tangent lines.
//!
//! Unscaled circle slopes next to a short interval can exceed the secant of
//! a long neighboring interval many times over, and the rational term then
//! overshoots. On evaluation a knot slope sharing the sign of the interval
//! secant is capped at three times that secant, the largest ratio for
//! which the rational form stays monotone and within its knots.

/// Knot slopes for strictly increasing `x`.
pub fn slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let m = x.len();
    assert_eq!(m, y.len(), "x and y differ in length");
    if m < 2 {
        return vec![0.0; m];
    }
    let dx: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let dy: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
    let mut yp = vec![0.0; m];
    yp[0] = dy[0] / dx[0];
    yp[m - 1] = dy[m - 2] / dx[m - 2];
    for i in 1..m - 1 {
        let wp = dx[i] * dx[i] + dy[i] * dy[i];
        let wm = dx[i - 1] * dx[i - 1] + dy[i - 1] * dy[i - 1];
        yp[i] = (dy[i - 1] * wp + dy[i] * wm) / (dx[i - 1] * wp + dx[i] * wm);
    }
    yp
}

/// Slope cap relative to the interval secant.
pub const MAX_SLOPE_RATIO: f64 = 3.0;

fn limit(slope: f64, secant: f64) -> f64 {
    if slope * secant > 0.0 && slope.abs() > MAX_SLOPE_RATIO * secant.abs() {
        MAX_SLOPE_RATIO * secant
    } else {
        slope
    }
}

/// Value at `xo` inside the knot interval `[x[i], x[i + 1]]`.
pub fn eval_in(x: &[f64], y: &[f64], yp: &[f64], i: usize, xo: f64) -> f64 {
    let (x0, x1) = (x[i], x[i + 1]);
    let s = (y[i + 1] - y[i]) / (x1 - x0);
    let y0 = y[i] + s * (xo - x0);
    let d1 = (limit(yp[i], s) - s) * (xo - x0);
    let d2 = (limit(yp[i + 1], s) - s) * (xo - x1);
    let p = d1 * d2;
    if p > 0.0 {
        y0 + p / (d1 + d2)
    } else if p < 0.0 {
        y0 + p * (2.0 * xo - x0 - x1) / ((d1 - d2) * (x1 - x0))
    } else {
        y0
    }
}

/// Interpolates at each `xo`; points outside the knot range are `None`.
pub fn interpolate(x: &[f64], y: &[f64], xo: &[f64]) -> Vec<Option<f64>> {
    let yp = slopes(x, y);
    xo.iter()
        .map(|&v| {
            if x.len() < 2 || v < x[0] || v > x[x.len() - 1] {
                return None;
            }
            let i = x.partition_point(|&k| k <= v).clamp(1, x.len() - 1) - 1;
            Some(eval_in(x, y, &yp, i, v))
        })
        .collect()
}
