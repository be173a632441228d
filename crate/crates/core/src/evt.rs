use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_floor, Scalar};

/// Lower clamp of every exceedance probability; keeps log-likelihoods finite
/// inside the inference loops.
pub const PROB_FLOOR: f64 = 1e-12;

/// Heavy-tailed Frechet model of stress exceedances y = sigma - sigma_bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetTail<S: Scalar> {
    s: S,
    alpha: S,
    m: S,
    sigma_bar: S,
}

impl<S: Scalar> FrechetTail<S> {
    pub fn new(s: S, alpha: S, m: S, sigma_bar: S) -> Result<Self> {
        if !(s.is_finite() && alpha.is_finite() && m.is_finite() && sigma_bar.is_finite()) {
            return Err(Error::validation("non-finite tail parameter"));
        }
        if s <= S::zero() || alpha <= S::zero() {
            return Err(Error::validation(format!(
                "scale and shape must be positive, got s={}, alpha={}",
                s.f64(),
                alpha.f64()
            )));
        }
        Ok(FrechetTail { s, alpha, m, sigma_bar })
    }

    pub fn s(&self) -> S {
        self.s
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    pub fn m(&self) -> S {
        self.m
    }

    pub fn sigma_bar(&self) -> S {
        self.sigma_bar
    }

    /// Log-density at exceedance `y`; the log-floor sentinel outside the
    /// support y > m.
    pub fn log_pdf(&self, y: S) -> S {
        if y <= self.m {
            return log_floor::<S>();
        }
        let u = (y - self.m) / self.s;
        let ln_u = u.ln();
        self.alpha.ln() - self.s.ln() + (-self.alpha - S::one()) * ln_u
            - (-self.alpha * ln_u).exp()
    }

    /// exp(-((y-m)/s)^-alpha) for y > m, zero otherwise.
    pub fn cdf(&self, y: S) -> S {
        if y <= self.m {
            return S::zero();
        }
        let u = (y - self.m) / self.s;
        (-(-self.alpha * u.ln()).exp()).exp()
    }

    /// Inverse CDF: m + s * (-ln p)^(-1/alpha) for p in (0, 1).
    pub fn quantile(&self, p: S) -> Result<S> {
        if !(p > S::zero() && p < S::one()) {
            return Err(Error::validation("quantile probability outside (0, 1)"));
        }
        Ok(self.m + self.s * (-(-p.ln()).ln() / self.alpha).exp())
    }

    /// Probability that the true stress exceeds the threshold given the
    /// surrogate prediction, clamped to [PROB_FLOOR, 1]. Nondecreasing in the
    /// surrogate stress.
    pub fn exceedance_prob(&self, sigma_surrogate: S) -> S {
        let p = self.cdf(sigma_surrogate - self.sigma_bar);
        p.max(S::c(PROB_FLOOR)).min(S::one())
    }

    pub fn log_exceedance_prob(&self, sigma_surrogate: S) -> S {
        self.exceedance_prob(sigma_surrogate).ln()
    }

    pub fn log_likelihood(&self, ys: &[S]) -> S {
        ys.iter().map(|&y| self.log_pdf(y)).sum()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_json_file(path, &FrechetTailDto::from(self))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let dto: FrechetTailDto = crate::read_json_file(path)?;
        FrechetTail::new(S::c(dto.s), S::c(dto.alpha), S::c(dto.m), S::c(dto.sigma_bar))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FrechetTailDto {
    s: f64,
    alpha: f64,
    m: f64,
    sigma_bar: f64,
}

impl<S: Scalar> From<&FrechetTail<S>> for FrechetTailDto {
    fn from(t: &FrechetTail<S>) -> Self {
        FrechetTailDto {
            s: t.s.f64(),
            alpha: t.alpha.f64(),
            m: t.m.f64(),
            sigma_bar: t.sigma_bar.f64(),
        }
    }
}

/// Where the location parameter comes from during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TailLocation {
    /// m = 0: exceedances are already shifted to the threshold.
    #[default]
    Zero,
    /// Profile likelihood over a grid of locations in [0, min ys).
    Profile,
}

#[derive(Debug, Clone, Copy)]
pub struct FrechetFitOptions {
    pub location: TailLocation,
    /// Number of candidate locations when profiling.
    pub grid_size: usize,
}

impl Default for FrechetFitOptions {
    fn default() -> Self {
        FrechetFitOptions { location: TailLocation::Zero, grid_size: 33 }
    }
}

/// Maximum-likelihood fit of (s, alpha) on positive exceedances.
///
/// Internally optimized in f64 whatever the working scalar: the profile
/// gradient tolerance (1e-7 on the full-data gradient) is tighter than f32
/// arithmetic can evaluate. For fixed alpha the scale has the closed form
/// s = (N / sum y^-alpha)^(1/alpha); the remaining one-dimensional profile
/// score is strictly decreasing in alpha, so a bracketed Newton iteration
/// with bisection safeguards always converges to the unique root.
pub fn fit_frechet_mle<S: Scalar>(
    ys: &[S],
    sigma_bar: S,
    opts: FrechetFitOptions,
) -> Result<FrechetTail<S>> {
    if ys.len() < 10 {
        return Err(Error::validation(format!(
            "need at least 10 exceedances to fit a tail, got {}",
            ys.len()
        )));
    }
    let y64: Vec<f64> = ys.iter().map(|v| v.f64()).collect();
    if y64.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite exceedance"));
    }
    match opts.location {
        TailLocation::Zero => {
            let (s, alpha) = fit_scale_shape(&y64, 0.0)?;
            FrechetTail::new(S::c(s), S::c(alpha), S::zero(), sigma_bar)
        }
        TailLocation::Profile => {
            if opts.grid_size < 2 {
                return Err(Error::validation("location grid needs at least 2 points"));
            }
            let min_y = y64.iter().cloned().fold(f64::INFINITY, f64::min);
            if min_y <= 0.0 {
                return Err(Error::validation(
                    "non-positive exceedance: all values must lie above the threshold",
                ));
            }
            let mut best: Option<(f64, f64, f64, f64)> = None;
            for j in 0..opts.grid_size {
                let m = min_y * j as f64 / opts.grid_size as f64;
                let (s, alpha) = fit_scale_shape(&y64, m)?;
                let ll = FrechetTail::new(s, alpha, m, 0.0)?.log_likelihood(&y64);
                let better = match &best {
                    None => true,
                    Some((_, _, _, b)) => ll > *b,
                };
                if better {
                    best = Some((s, alpha, m, ll));
                }
            }
            let (s, alpha, m, _) = best.expect("grid is nonempty");
            FrechetTail::new(S::c(s), S::c(alpha), S::c(m), sigma_bar)
        }
    }
}

/// MLE of (s, alpha) at fixed location, via the strictly decreasing profile
/// score g(alpha) = N/alpha + N * sum(w_i ln u_i) - sum(ln u_i) with
/// w_i proportional to u_i^-alpha.
fn fit_scale_shape(ys: &[f64], m: f64) -> Result<(f64, f64)> {
    let us: Vec<f64> = ys.iter().map(|&y| y - m).collect();
    if us.iter().any(|&u| u <= 0.0) {
        return Err(Error::validation(
            "non-positive exceedance after location shift: all values must exceed the location",
        ));
    }
    let n = us.len() as f64;
    let ln_us: Vec<f64> = us.iter().map(|u| u.ln()).collect();
    let sum_ln: f64 = ln_us.iter().sum();

    let score_and_slope = |alpha: f64| -> (f64, f64) {
        // weights w_i = u_i^-alpha / sum, computed through log-sum-exp
        let logw_raw: Vec<f64> = ln_us.iter().map(|&l| -alpha * l).collect();
        let lse = crate::scalar::log_sum_exp(&logw_raw);
        let mut wmean = 0.0;
        let mut wsq = 0.0;
        for (lw, &l) in logw_raw.iter().zip(&ln_us) {
            let w = (lw - lse).exp();
            wmean += w * l;
            wsq += w * l * l;
        }
        let g = n / alpha + n * wmean - sum_ln;
        let dg = -n / (alpha * alpha) - n * (wsq - wmean * wmean);
        (g, dg)
    };

    let mut alpha = hill_initial_shape(&us).clamp(0.1, 50.0);
    // bracket the root: expand until the score changes sign
    let mut lo = alpha;
    let mut glo = score_and_slope(lo).0;
    let mut grow = 0;
    while glo <= 0.0 {
        lo /= 2.0;
        glo = score_and_slope(lo).0;
        grow += 1;
        if grow > 60 {
            return Err(Error::numerical(
                "tail shape bracketing failed at the small-shape end",
            ));
        }
    }
    let mut hi = alpha.max(lo * 2.0);
    let mut ghi = score_and_slope(hi).0;
    grow = 0;
    while ghi > 0.0 {
        hi *= 2.0;
        ghi = score_and_slope(hi).0;
        grow += 1;
        if grow > 60 {
            return Err(Error::numerical(format!(
                "tail shape bracketing failed at the large-shape end \
                 (score {ghi:.3e} at shape {hi:.3e}); the sample may be degenerate"
            )));
        }
    }

    alpha = alpha.clamp(lo, hi);
    let mut converged = false;
    let mut trace = (0usize, f64::NAN);
    for it in 0..200 {
        let (g, dg) = score_and_slope(alpha);
        trace = (it, g);
        if g.abs() < 1e-7 {
            converged = true;
            break;
        }
        if g > 0.0 {
            lo = alpha;
        } else {
            hi = alpha;
        }
        let newton = alpha - g / dg;
        alpha = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    if !converged {
        let (it, g) = trace;
        return Err(Error::numerical(format!(
            "tail shape iteration did not converge: after {} steps the score is {g:.3e} \
             at shape {alpha:.6}",
            it + 1
        )));
    }

    // closed-form scale at the fitted shape
    let neg_pow_sum: f64 = us.iter().map(|u| (-alpha * u.ln()).exp()).sum();
    let s = (n / neg_pow_sum).powf(1.0 / alpha);
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::numerical("tail scale evaluation failed"));
    }
    Ok((s, alpha))
}

/// Order-statistics estimate of the shape for initialization: the reciprocal
/// mean log-excess of the top decile over its smallest member.
fn hill_initial_shape(us: &[f64]) -> f64 {
    let mut sorted = us.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = (sorted.len() / 10).clamp(5, sorted.len() - 1);
    let pivot = sorted[k];
    let mean_excess: f64 =
        sorted[..k].iter().map(|&y| (y / pivot).ln()).sum::<f64>() / k as f64;
    if mean_excess > 1e-12 {
        1.0 / mean_excess
    } else {
        1.0
    }
}
