//! Evaluation measures for regression with rare events: a log-density
//! distance between truth and prediction, density-conditioned mean square
//! error, and two rate-dependent classification scores.

use crate::density::{fit_log_density_gp, histogram_log_density, GpLogDensity};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Order-statistic quantile: the `ceil(q * m)`-th smallest value, with no
/// interpolation. `q = 0` returns the minimum, `q = 1` the maximum.
pub fn empirical_quantile(y: &[f64], q: f64) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidInput("empty input".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::BadParameter("quantile must lie in [0, 1]".into()));
    }
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = sorted.len();
    // guard the ceiling against floating-point drift on exact multiples
    let pos = q * m as f64;
    let k = if (pos - pos.round()).abs() < 1e-9 {
        pos.round() as usize
    } else {
        pos.ceil() as usize
    };
    Ok(sorted[k.clamp(1, m) - 1])
}

/// Settings for the density-distance computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityDistanceConfig {
    /// Histogram bins used to fit both densities.
    pub n_b: usize,
    /// Trapezoid grid resolution over the intersected support.
    pub grid_points: usize,
    /// Divide by the interval length instead of its square.
    pub normalize_by_length: bool,
}

impl Default for DensityDistanceConfig {
    fn default() -> DensityDistanceConfig {
        DensityDistanceConfig {
            n_b: crate::density::DEFAULT_BINS,
            grid_points: 200,
            normalize_by_length: false,
        }
    }
}

/// Integrated absolute difference of fitted log densities over the
/// intersection of the observed ranges, normalized by the squared length of
/// the intersection.
///
/// Both densities go through the same histogram-plus-GP pipeline with the
/// same bin count, so modeling bias partially cancels.
pub fn log_density_distance(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    log_density_distance_with(y_true, y_pred, &DensityDistanceConfig::default())
}

pub fn log_density_distance_with(
    y_true: &[f64],
    y_pred: &[f64],
    cfg: &DensityDistanceConfig,
) -> Result<f64> {
    for (name, v) in [("y_true", y_true), ("y_pred", y_pred)] {
        if v.len() < 5 * cfg.n_b {
            return Err(Error::TooFewSamples(format!(
                "{name} has {} samples, need at least {}",
                v.len(),
                5 * cfg.n_b
            )));
        }
    }
    let range = |v: &[f64]| {
        (
            v.iter().cloned().fold(f64::INFINITY, f64::min),
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (t_lo, t_hi) = range(y_true);
    let (p_lo, p_hi) = range(y_pred);
    let lo = t_lo.max(p_lo);
    let hi = t_hi.min(p_hi);
    if !(hi > lo) {
        return Err(Error::DisjointSupport);
    }
    let g_true = fit_log_density_gp(&histogram_log_density(y_true, cfg.n_b)?)?;
    let g_pred = fit_log_density_gp(&histogram_log_density(y_pred, cfg.n_b)?)?;

    let n = cfg.grid_points;
    let dx = (hi - lo) / (n - 1) as f64;
    let mut integral = 0.0;
    for i in 0..n {
        let x = lo + i as f64 * dx;
        let diff = (g_true.density_at(x).ln() - g_pred.density_at(x).ln()).abs();
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        integral += w * diff * dx;
    }
    let len = hi - lo;
    let norm = if cfg.normalize_by_length {
        len
    } else {
        len * len
    };
    Ok(integral / norm)
}

/// Mean square error over the samples whose true-target density is at most
/// `eps`, plus the qualifying count. `None` when no sample qualifies.
pub fn mse_below_eps(
    y: &[f64],
    y_hat: &[f64],
    g: &GpLogDensity,
    eps: f64,
) -> Result<Option<(f64, usize)>> {
    if y.len() != y_hat.len() {
        return Err(Error::LengthMismatch {
            expected: y.len(),
            got: y_hat.len(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::BadParameter("eps must be positive".into()));
    }
    let mut sq_errors: Vec<f64> = y
        .iter()
        .zip(y_hat)
        .filter(|(yi, _)| g.density_at(**yi) <= eps)
        .map(|(yi, pi)| (yi - pi) * (yi - pi))
        .collect();
    if sq_errors.is_empty() {
        return Ok(None);
    }
    // accumulate in sorted order so the result is independent of sample order
    sq_errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let count = sq_errors.len();
    Ok(Some((sq_errors.iter().sum::<f64>() / count as f64, count)))
}

/// Precision/recall point structure shared by the two classification scores.
fn threshold_of(y: &[f64], omega: f64) -> Result<f64> {
    if !(omega > 0.0 && omega < 1.0) {
        return Err(Error::BadParameter("omega must lie in (0, 1)".into()));
    }
    empirical_quantile(y, 1.0 - omega)
}

/// Area under the precision-recall curve at extreme-event rate `omega`.
///
/// True positives are samples with `y >= a` for the `(1-omega)` target
/// quantile `a`; the prediction threshold sweeps the distinct values of
/// `y_hat` from a sentinel below the minimum upward, and the area is the
/// step integral of precision over recall decrements. Invariant under any
/// strictly increasing transform of the predictions.
pub fn auprc_at_rate(y: &[f64], y_hat: &[f64], omega: f64) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::LengthMismatch {
            expected: y.len(),
            got: y_hat.len(),
        });
    }
    let a = threshold_of(y, omega)?;
    let total_pos = y.iter().filter(|v| **v >= a).count();
    if total_pos == 0 {
        return Err(Error::DegenerateRate);
    }
    // sort by prediction, descending; sweep thresholds over distinct values
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&i, &j| y_hat[j].partial_cmp(&y_hat[i]).unwrap());
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut k = 0;
    while k < order.len() {
        let threshold = y_hat[order[k]];
        // consume the whole tie group at this threshold
        while k < order.len() && y_hat[order[k]] == threshold {
            predicted += 1;
            if y[order[k]] >= a {
                tp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / predicted as f64;
        area += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Ok(area)
}

/// F1 score at extreme-event rate `omega`, classifying truth and prediction
/// with the same `(1-omega)` target quantile threshold. Zero when nothing
/// is predicted positive.
pub fn f1_at_rate(y: &[f64], y_hat: &[f64], omega: f64) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::LengthMismatch {
            expected: y.len(),
            got: y_hat.len(),
        });
    }
    let a = threshold_of(y, omega)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (yi, pi) in y.iter().zip(y_hat) {
        match (*yi >= a, *pi >= a) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fn_ == 0 {
        return Err(Error::DegenerateRate);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MseEpsPoint {
    pub eps: f64,
    pub mse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatePoint {
    pub omega: f64,
    pub value: f64,
}

/// All four measures for one model's predictions, plus the grids used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Log-density distance; `None` when the supports do not intersect
    /// (reported downstream as infinite).
    pub d: Option<f64>,
    pub mse_eps_curve: Vec<MseEpsPoint>,
    pub alpha_curve: Vec<RatePoint>,
    pub f1_curve: Vec<RatePoint>,
    pub eps_grid: Vec<f64>,
    pub omega_grid: Vec<f64>,
    /// Component errors that led to omitted points.
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn d_or_inf(&self) -> f64 {
        self.d.unwrap_or(f64::INFINITY)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::ParseFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MetricsReport> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::ParseFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// 30 log-spaced extreme-event rates in [0.005, 0.3].
pub fn default_omega_grid() -> Vec<f64> {
    log_spaced(0.005, 0.3, 30)
}

pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Density thresholds whose negative logs span the observed range of
/// `-ln density_at(y)` in `n` points, ascending in eps.
pub fn default_eps_grid(y: &[f64], g: &GpLogDensity, n: usize) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in y {
        let d = g.density_at(v);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if !(hi > lo) {
        return vec![hi];
    }
    let (nl_lo, nl_hi) = (-hi.ln(), -lo.ln());
    let mut grid: Vec<f64> = (0..n)
        .map(|i| (-(nl_lo + (nl_hi - nl_lo) * i as f64 / (n - 1) as f64)).exp())
        .collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid
}

fn strictly_increasing(grid: &[f64]) -> bool {
    grid.windows(2).all(|w| w[1] > w[0])
}

/// Assemble the full measure suite over the given grids. Component errors
/// become omitted points with a flag rather than failures.
pub fn full_report(
    y: &[f64],
    y_hat: &[f64],
    g: &GpLogDensity,
    eps_grid: &[f64],
    omega_grid: &[f64],
    dcfg: &DensityDistanceConfig,
) -> Result<MetricsReport> {
    if eps_grid.is_empty() || omega_grid.is_empty() {
        return Err(Error::BadParameter("grids must be nonempty".into()));
    }
    if !strictly_increasing(eps_grid) || !strictly_increasing(omega_grid) {
        return Err(Error::BadParameter("grids must be strictly increasing".into()));
    }
    let mut flags = Vec::new();
    let d = match log_density_distance_with(y, y_hat, dcfg) {
        Ok(v) => Some(v),
        Err(Error::DisjointSupport) => {
            flags.push("density distance: disjoint support".to_string());
            None
        }
        Err(e) => {
            flags.push(format!("density distance: {e}"));
            None
        }
    };
    let mut mse_eps_curve = Vec::new();
    for &eps in eps_grid {
        match mse_below_eps(y, y_hat, g, eps)? {
            Some((mse, count)) => mse_eps_curve.push(MseEpsPoint { eps, mse, count }),
            None => flags.push(format!("mse_eps: empty set at eps={eps}")),
        }
    }
    let mut alpha_curve = Vec::new();
    let mut f1_curve = Vec::new();
    for &omega in omega_grid {
        match auprc_at_rate(y, y_hat, omega) {
            Ok(v) => alpha_curve.push(RatePoint { omega, value: v }),
            Err(e) => flags.push(format!("alpha at omega={omega}: {e}")),
        }
        match f1_at_rate(y, y_hat, omega) {
            Ok(v) => f1_curve.push(RatePoint { omega, value: v }),
            Err(e) => flags.push(format!("f1 at omega={omega}: {e}")),
        }
    }
    Ok(MetricsReport {
        d,
        mse_eps_curve,
        alpha_curve,
        f1_curve,
        eps_grid: eps_grid.to_vec(),
        omega_grid: omega_grid.to_vec(),
        flags,
    })
}
