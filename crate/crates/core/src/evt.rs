//! Generalized Pareto tail model.
//!
//! The GPD with scale `σ > 0` and shape `ξ` has distribution function
//!
//! ```text
//! G(x) = 1 - (1 + ξ x / σ)^(-1/ξ)    ξ ≠ 0
//! G(x) = 1 - exp(-x / σ)             ξ = 0
//! ```
//!
//! on `x ≥ 0` (and `x < -σ/ξ` when `ξ < 0`).
//!
//! Maximum-likelihood fitting uses Grimshaw's reduction: substituting
//! `θ = ξ/σ` the profile likelihood is stationary where
//!
//! ```text
//! w(θ) = mean(1 / (1 + θ x)) · (1 + mean(ln(1 + θ x))) - 1 = 0
//! ```
//!
//! and each root maps back to `ξ = mean(ln(1 + θ x))`, `σ = ξ / θ`. All roots
//! inside `(-1/max x, 2 (mean - min) / min²)` are located and the one with the
//! highest likelihood wins, with the exponential fit (`θ = 0`) always in the
//! running.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this magnitude the shape is treated as exactly zero.
pub const SHAPE_ZERO_TOL: f64 = 1e-9;

/// Grid points used to bracket Grimshaw roots, split between the negative and
/// positive halves of the admissible `θ` interval.
pub const ROOT_GRID_POINTS: usize = 1000;

const BISECTION_TOL: f64 = 1e-10;
const BISECTION_MAX_ITER: usize = 200;

/// Distance from `θ = 0` (in units of `1 / mean`) kept out of the root scan.
/// `w` has a multiple root at zero and is pure rounding noise this close to it.
const ZERO_GAP: f64 = 1e-6;

/// Relative spread under which a sample counts as constant.
const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdParams {
    pub scale: f64,
    pub shape: f64,
}

impl GpdParams {
    pub fn new(scale: f64, shape: f64) -> Result<Self> {
        let params = GpdParams { scale, shape };
        params.validate()?;
        Ok(params)
    }

    pub fn exponential(scale: f64) -> Result<Self> {
        Self::new(scale, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Domain(format!(
                "GPD scale must be > 0, got {}",
                self.scale
            )));
        }
        if !self.shape.is_finite() {
            return Err(Error::Domain(format!(
                "GPD shape must be finite, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    fn is_exponential(&self) -> bool {
        self.shape.abs() < SHAPE_ZERO_TOL
    }

    /// Finite right end of the support, present only for negative shape.
    pub fn upper_endpoint(&self) -> Option<f64> {
        if self.is_exponential() || self.shape > 0.0 {
            None
        } else {
            Some(-self.scale / self.shape)
        }
    }

    /// `1 - G(x)`, evaluated directly so small tail probabilities keep
    /// their relative precision.
    pub fn survival(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        if self.is_exponential() {
            return (-x / self.scale).exp();
        }
        if let Some(end) = self.upper_endpoint() {
            if x >= end {
                return 0.0;
            }
        }
        let t = self.shape * x / self.scale;
        (-t.ln_1p() / self.shape).exp()
    }
}

/// Distribution function of the GPD at `x ≥ 0`.
pub fn gpd_cdf(x: f64, params: &GpdParams) -> Result<f64> {
    params.validate()?;
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!("GPD cdf needs x >= 0, got {x}")));
    }
    if params.is_exponential() {
        return Ok(-(-x / params.scale).exp_m1() + 0.0);
    }
    if let Some(end) = params.upper_endpoint() {
        if x >= end {
            return Ok(1.0);
        }
    }
    let t = params.shape * x / params.scale;
    Ok(-(-t.ln_1p() / params.shape).exp_m1() + 0.0)
}

/// GPD log-likelihood of a sample of excesses.
///
/// Points outside the support (negative, non-finite, or past the right
/// endpoint) give `f64::NEG_INFINITY` rather than an error, so the function
/// can be used as an objective directly.
pub fn gpd_log_likelihood(excesses: &[f64], params: &GpdParams) -> f64 {
    if params.validate().is_err() {
        return f64::NEG_INFINITY;
    }
    let n = excesses.len() as f64;
    let log_scale = params.scale.ln();
    if params.is_exponential() {
        let mut sum = 0.0;
        for &x in excesses {
            if !(x >= 0.0 && x.is_finite()) {
                return f64::NEG_INFINITY;
            }
            sum += x;
        }
        return -n * log_scale - sum / params.scale;
    }
    let ratio = params.shape / params.scale;
    let mut sum_log = 0.0;
    for &x in excesses {
        if !(x >= 0.0 && x.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let t = ratio * x;
        if t <= -1.0 {
            return f64::NEG_INFINITY;
        }
        sum_log += t.ln_1p();
    }
    -n * log_scale - (1.0 + 1.0 / params.shape) * sum_log
}

/// Grimshaw's function `w(θ)`; its nonzero roots are the stationary points
/// of the GPD profile likelihood. NaN where `1 + θ x ≤ 0` for some `x`.
pub fn grimshaw_function(excesses: &[f64], theta: f64) -> f64 {
    let n = excesses.len() as f64;
    let mut inv_sum = 0.0;
    let mut log_sum = 0.0;
    for &x in excesses {
        let t = theta * x;
        if t <= -1.0 {
            return f64::NAN;
        }
        inv_sum += 1.0 / (1.0 + t);
        log_sum += t.ln_1p();
    }
    (inv_sum / n) * (1.0 + log_sum / n) - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub log_likelihood: f64,
    /// `|w(θ)|` at the selected root; zero when the exponential fit wins.
    pub grimshaw_residual: f64,
    pub num_candidate_roots: usize,
    pub num_excesses: usize,
    /// `θ = ξ/σ` of the selected fit in the caller's units (0 for exponential).
    pub theta: f64,
    /// Set when the sample had no spread and the exponential fit was forced.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpdFit {
    pub params: GpdParams,
    pub diagnostics: FitDiagnostics,
}

/// Maximum-likelihood GPD fit of strictly positive excesses.
pub fn fit_gpd(excesses: &[f64]) -> Result<GpdFit> {
    let n = excesses.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "GPD fit needs at least 2 excesses, got {n}"
        )));
    }
    if let Some(bad) = excesses.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::Validation(format!(
            "excesses must be finite and > 0, found {bad}"
        )));
    }

    let mean = excesses.iter().sum::<f64>() / n as f64;
    let (min, max) = excesses
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));

    if max - min <= DEGENERATE_SPREAD * max {
        let params = GpdParams::exponential(mean)?;
        return Ok(GpdFit {
            params,
            diagnostics: FitDiagnostics {
                log_likelihood: gpd_log_likelihood(excesses, &params),
                grimshaw_residual: 0.0,
                num_candidate_roots: 0,
                num_excesses: n,
                theta: 0.0,
                degenerate: true,
            },
        });
    }

    // Work on x / mean so the grid and tolerances are scale free.
    let scaled: Vec<f64> = excesses.iter().map(|x| x / mean).collect();
    let scaled_max = max / mean;
    let scaled_min = min / mean;

    let roots = grimshaw_roots(&scaled, scaled_min, scaled_max);

    let mut best_theta = 0.0;
    let mut best = GpdParams::exponential(1.0)?;
    let mut best_ll = gpd_log_likelihood(&scaled, &best);
    for &theta in &roots {
        let shape = scaled.iter().map(|y| (theta * y).ln_1p()).sum::<f64>() / n as f64;
        let scale = shape / theta;
        let Ok(candidate) = GpdParams::new(scale, shape) else {
            continue;
        };
        let ll = gpd_log_likelihood(&scaled, &candidate);
        if ll > best_ll {
            best_ll = ll;
            best = candidate;
            best_theta = theta;
        }
    }

    let params = GpdParams::new(best.scale * mean, best.shape)?;
    let theta = best_theta / mean;
    let grimshaw_residual = if best_theta == 0.0 {
        0.0
    } else {
        grimshaw_function(excesses, theta).abs()
    };
    Ok(GpdFit {
        params,
        diagnostics: FitDiagnostics {
            log_likelihood: gpd_log_likelihood(excesses, &params),
            grimshaw_residual,
            num_candidate_roots: roots.len(),
            num_excesses: n,
            theta,
            degenerate: false,
        },
    })
}

/// Nonzero roots of `w` for a sample normalized to unit mean.
///
/// The negative side `(-1/max + ε, -gap)` is scanned on a uniform grid; the
/// positive side `(gap, upper)` on a geometric one, since the upper bound
/// can sit many orders of magnitude above the roots when `min` is small.
fn grimshaw_roots(scaled: &[f64], min: f64, max: f64) -> Vec<f64> {
    let lower = -1.0 / max + 1e-8 / max;
    let upper = 2.0 * (1.0 - min) / (min * min);
    let half = ROOT_GRID_POINTS / 2;

    let mut grid = Vec::with_capacity(ROOT_GRID_POINTS);
    let neg_end = -ZERO_GAP;
    if lower < neg_end {
        let step = (neg_end - lower) / (half - 1) as f64;
        grid.extend((0..half).map(|i| lower + step * i as f64));
    }
    let mut roots = Vec::new();
    scan_segment(scaled, &grid, &mut roots);

    if upper > ZERO_GAP {
        let ratio = (upper / ZERO_GAP).ln() / (half - 1) as f64;
        let pos: Vec<f64> = (0..half).map(|i| ZERO_GAP * (ratio * i as f64).exp()).collect();
        scan_segment(scaled, &pos, &mut roots);
    }
    roots
}

fn scan_segment(scaled: &[f64], grid: &[f64], roots: &mut Vec<f64>) {
    let values: Vec<f64> = grid.iter().map(|&t| grimshaw_function(scaled, t)).collect();
    for i in 0..grid.len() {
        if values[i] == 0.0 {
            roots.push(grid[i]);
            continue;
        }
        if i + 1 < grid.len()
            && values[i].is_finite()
            && values[i + 1].is_finite()
            && values[i + 1] != 0.0
            && values[i].signum() != values[i + 1].signum()
        {
            roots.push(bisect(scaled, grid[i], grid[i + 1], values[i]));
        }
    }
}

fn bisect(scaled: &[f64], mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    let mut mid = 0.5 * (a + b);
    for _ in 0..BISECTION_MAX_ITER {
        mid = 0.5 * (a + b);
        let fm = grimshaw_function(scaled, mid);
        if fm.abs() < BISECTION_TOL || mid == a || mid == b {
            break;
        }
        if fm.signum() == fa.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    mid
}

/// Draw from a GPD by inverting its distribution function at `u ∈ [0, 1)`.
pub fn gpd_quantile(u: f64, params: &GpdParams) -> f64 {
    if params.is_exponential() {
        -params.scale * (-u).ln_1p()
    } else {
        params.scale / params.shape * ((-params.shape * (-u).ln_1p()).exp_m1())
    }
}
