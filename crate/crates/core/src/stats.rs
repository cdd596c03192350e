//! Descriptive statistics and least-squares fits.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Pearson correlation. `None` when either input has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = mean(&xs[..n]);
    let my = mean(&ys[..n]);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Result of a simple linear regression `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
}

/// Weighted ordinary least squares. Returns `None` if `x` is degenerate
/// (weighted variance below `min_var`).
pub fn weighted_linear_fit(xs: &[f64], ys: &[f64], ws: Option<&[f64]>, min_var: f64) -> Option<LinearFit> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let w = |i: usize| ws.map_or(1.0, |w| w[i]);
    let sw: f64 = (0..n).map(w).sum();
    if sw <= 0.0 {
        return None;
    }
    let mx = (0..n).map(|i| w(i) * xs[i]).sum::<f64>() / sw;
    let my = (0..n).map(|i| w(i) * ys[i]).sum::<f64>() / sw;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxy += w(i) * dx * dy;
        sxx += w(i) * dx * dx;
        syy += w(i) * dy * dy;
    }
    if sxx / sw <= min_var {
        return None;
    }
    let slope = sxy / sxx;
    let r = if syy > 0.0 { sxy / (sxx.sqrt() * syy.sqrt()) } else { 0.0 };
    Some(LinearFit { slope, intercept: my - slope * mx, r })
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    weighted_linear_fit(xs, ys, None, 0.0)
}
