//! Martingale deviation machinery: per-step rate functions, their online
//! union bound over a step-size grid, and the Cramer-type worst-case
//! quantile / tail pair used for a-priori planning.
//!
//! For a process summand bounded through a rate function `Psi_t`, the deviation
//! of the weighted sum `(1/N) sum_t e_t` exceeds
//! `delta = min_i [ alpha_i ln(2*union_count/eps) + alpha_i sum_t Psi_t(Theta_t / (alpha_i N)) ]`
//! with probability at most `eps / union_count` per functional, where
//! `Theta_t` is the l1 norm of the step's policy row and `alpha_i` ranges
//! over a positive grid shared by all functionals in a suite.

use crate::model::{FeasibleSet, LinkFunction, RegressorWindow};
use std::collections::BTreeMap;
use thiserror::Error;

/// Exponent clamp: `exp` arguments above this saturate instead of
/// overflowing. Saturated evaluations can only inflate a candidate bound, so
/// minima over the grid remain correct.
pub const EXP_SATURATION: f64 = 700.0;

#[derive(Debug, Error)]
pub enum ConcentrationError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("rate evaluation saturated: argument {arg} exceeds {limit}")]
    Saturated { arg: f64, limit: f64 },
    #[error("chi is undefined: feasible set is unbounded")]
    ChiUndefined,
    #[error("supremum is numerically unbounded")]
    Unbounded,
}

/// Per-step deviation rate function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateFunction {
    /// `chi * (e^r - r - 1)`: Poisson observations with conditional-mean
    /// bound `chi` over the feasible set.
    Poisson { chi: f64 },
    /// Categorical/Bernoulli observations whose block probabilities never
    /// exceed `alpha_cap`; the rate maximizes the centered log-MGF envelope
    /// over the unknown probability.
    Categorical { alpha_cap: f64 },
}

impl RateFunction {
    /// Total saturating evaluation: arguments are clamped to
    /// `[0, EXP_SATURATION]`.
    pub fn eval(&self, r: f64) -> f64 {
        let r = r.clamp(0.0, EXP_SATURATION);
        match *self {
            RateFunction::Poisson { chi } => chi * (r.exp_m1() - r),
            RateFunction::Categorical { alpha_cap } => categorical_rate_clamped(r, alpha_cap),
        }
    }

    /// Checked evaluation: negative or saturating arguments are errors.
    pub fn eval_checked(&self, r: f64) -> Result<f64, ConcentrationError> {
        if !r.is_finite() || r < 0.0 {
            return Err(ConcentrationError::InvalidArgument(format!(
                "rate argument must be finite and nonnegative, got {r}"
            )));
        }
        if r > EXP_SATURATION {
            return Err(ConcentrationError::Saturated {
                arg: r,
                limit: EXP_SATURATION,
            });
        }
        match *self {
            RateFunction::Poisson { chi } if !(chi >= 0.0) => Err(
                ConcentrationError::InvalidArgument(format!("chi must be nonnegative, got {chi}")),
            ),
            RateFunction::Categorical { alpha_cap } if !(alpha_cap > 0.0 && alpha_cap <= 1.0) => {
                Err(ConcentrationError::InvalidArgument(format!(
                    "alpha_cap must lie in (0, 1], got {alpha_cap}"
                )))
            }
            _ => Ok(self.eval(r)),
        }
    }
}

/// `chi * (e^r - r - 1)`.
pub fn rate_poisson(r: f64, chi: f64) -> Result<f64, ConcentrationError> {
    RateFunction::Poisson { chi }.eval_checked(r)
}

/// Categorical rate: the larger of the two concave-in-`alpha` envelope
/// branches, each maximized over `alpha` in `[0, alpha_cap]` by ternary
/// search (absolute tolerance 1e-10 in `alpha`).
pub fn rate_categorical(s: f64, alpha_cap: f64) -> Result<f64, ConcentrationError> {
    RateFunction::Categorical { alpha_cap }.eval_checked(s)
}

fn categorical_rate_clamped(s: f64, alpha_cap: f64) -> f64 {
    let ep = s.exp() - 1.0; // s is pre-clamped at EXP_SATURATION
    let em = (-s).exp() - 1.0;
    let plus = |a: f64| (a * ep).ln_1p() - a * s;
    let minus = |a: f64| (a * em).ln_1p() + a * s;
    ternary_max(plus, 0.0, alpha_cap).max(ternary_max(minus, 0.0, alpha_cap))
}

/// Maximum of a concave function on `[lo, hi]` (endpoints may evaluate to
/// -inf; interior probes avoid them).
fn ternary_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    while hi - lo > 1e-10 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) < f(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    f(0.5 * (lo + hi)).max(flo)
}

/// Largest conditional-mean magnitude over the feasible set at this window:
/// all link components share the predictor range, so this is
/// `max(|Phi(lo)|, |Phi(hi)|)` with the closed-form range endpoints.
pub fn chi_t(
    window: &RegressorWindow<'_>,
    link: LinkFunction,
    feasible: &FeasibleSet,
) -> Result<f64, ConcentrationError> {
    let (lo, hi) = feasible.predictor_bounds(window);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(ConcentrationError::ChiUndefined);
    }
    Ok(link.value(lo).abs().max(link.value(hi).abs()))
}

/// Shared configuration of a bound suite.
#[derive(Debug, Clone)]
pub struct BoundConfig {
    /// Positive step-size grid the per-functional minimum ranges over.
    pub alpha_grid: Vec<f64>,
    /// Total failure budget of the suite.
    pub epsilon: f64,
    /// Number of (functional, grid) events sharing the budget; the log term
    /// is `ln(2 * union_count / epsilon)`.
    pub union_count: usize,
}

/// `10^(0.25 i - 4)` for `i = 0..=36`: thirty-seven log-spaced steps from
/// 1e-4 to 1e5.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=36).map(|i| 10f64.powf(0.25 * i as f64 - 4.0)).collect()
}

impl BoundConfig {
    pub fn new(alpha_grid: Vec<f64>, epsilon: f64, union_count: usize) -> Self {
        BoundConfig {
            alpha_grid,
            epsilon,
            union_count,
        }
    }

    fn validate(&self) -> Result<(), ConcentrationError> {
        if self.alpha_grid.is_empty() {
            return Err(ConcentrationError::InvalidArgument(
                "alpha grid is empty".into(),
            ));
        }
        if self.alpha_grid.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(ConcentrationError::InvalidArgument(
                "alpha grid entries must be positive and finite".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ConcentrationError::InvalidArgument(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.union_count == 0 {
            return Err(ConcentrationError::InvalidArgument(
                "union_count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn log_term(&self) -> f64 {
        (2.0 * self.union_count as f64 / self.epsilon).ln()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OnlineBound {
    pub delta: f64,
    /// Grid entry attaining the minimum.
    pub alpha: f64,
    pub alpha_index: usize,
}

/// Deviation level for one functional of a suite: minimizes
/// `alpha ln(2*union_count/eps) + alpha sum_t Psi_t(Theta_t / (alpha N))`
/// over the grid. Steps with equal `(rate, Theta)` are grouped before
/// evaluation (exact; identical summands), which keeps the scan cheap for
/// integer-valued windows.
pub fn online_bound(
    rates: &[RateFunction],
    thetas: &[f64],
    cfg: &BoundConfig,
) -> Result<OnlineBound, ConcentrationError> {
    cfg.validate()?;
    if rates.is_empty() || rates.len() != thetas.len() {
        return Err(ConcentrationError::InvalidArgument(format!(
            "need equal positive counts of rates and thetas, got {} and {}",
            rates.len(),
            thetas.len()
        )));
    }
    if thetas.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
        return Err(ConcentrationError::InvalidArgument(
            "thetas must be finite and nonnegative".into(),
        ));
    }
    let n = rates.len() as f64;
    // Group identical (rate, theta) pairs; BTreeMap keys give a fixed
    // summation order independent of input order.
    let mut groups: BTreeMap<(u8, u64, u64), f64> = BTreeMap::new();
    for (r, &th) in rates.iter().zip(thetas.iter()) {
        let key = match *r {
            RateFunction::Poisson { chi } => (0u8, chi.to_bits(), th.to_bits()),
            RateFunction::Categorical { alpha_cap } => (1u8, alpha_cap.to_bits(), th.to_bits()),
        };
        *groups.entry(key).or_insert(0.0) += 1.0;
    }
    let log_term = cfg.log_term();
    let mut best: Option<(f64, usize)> = None;
    for (i, &alpha) in cfg.alpha_grid.iter().enumerate() {
        let mut sum = 0.0;
        for (&(tag, param, th), &count) in &groups {
            let rate = match tag {
                0 => RateFunction::Poisson {
                    chi: f64::from_bits(param),
                },
                _ => RateFunction::Categorical {
                    alpha_cap: f64::from_bits(param),
                },
            };
            let r = f64::from_bits(th) / (alpha * n);
            sum += count * rate.eval(r);
        }
        let delta = alpha * log_term + alpha * sum;
        if best.map_or(true, |(d, _)| delta < d) {
            best = Some((delta, i));
        }
    }
    let (delta, alpha_index) = best.unwrap();
    Ok(OnlineBound {
        delta,
        alpha: cfg.alpha_grid[alpha_index],
        alpha_index,
    })
}

/// Legendre-Fenchel transform `Psi*(s) = sup_{g >= 0} [g s - Psi(g)]` by
/// bracket doubling plus golden-section (tolerance 1e-10 in `g`).
pub fn fenchel_transform(
    psi: impl Fn(f64) -> f64,
    s: f64,
) -> Result<f64, ConcentrationError> {
    if !s.is_finite() {
        return Err(ConcentrationError::InvalidArgument(format!(
            "transform argument must be finite, got {s}"
        )));
    }
    let g = |x: f64| x * s - psi(x);
    if s <= 0.0 {
        // psi is nonnegative and psi(0) = 0 for all our rates, so the
        // supremum sits at 0.
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while g(2.0 * hi) > g(hi) {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(ConcentrationError::Unbounded);
        }
    }
    hi *= 2.0;
    Ok(golden_max(g, 0.0, hi))
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut best = f1.max(f2).max(f(lo));
    while hi - lo > 1e-10 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        }
        best = best.max(f1).max(f2);
    }
    best
}

fn golden_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut lo, mut hi) = (lo, hi);
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut best = f1.min(f2);
    while hi - lo > tol {
        if f1 > f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        }
        best = best.min(f1).min(f2);
    }
    best
}

/// A-priori worst-case deviation quantile for `m` functionals sharing budget
/// `eps`, a homogeneous rate `psi`, and step norm `theta`:
/// `inf_{a > 0} [ a ln(2m/eps) + a N psi(theta / (N a)) ]`,
/// scanned on a 400-point log grid over `[1e-6, 1e3]` and refined by
/// golden-section around the grid minimum.
pub fn worst_case_quantile(
    psi: &RateFunction,
    theta: f64,
    n: usize,
    m: usize,
    epsilon: f64,
) -> Result<f64, ConcentrationError> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(ConcentrationError::InvalidArgument(format!(
            "theta must be positive and finite, got {theta}"
        )));
    }
    if n == 0 || m == 0 {
        return Err(ConcentrationError::InvalidArgument(
            "n and m must be positive".into(),
        ));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ConcentrationError::InvalidArgument(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    let log_term = (2.0 * m as f64 / epsilon).ln();
    let nf = n as f64;
    let f = |a: f64| a * log_term + a * nf * psi.eval(theta / (nf * a));
    let grid_pts = 400;
    let (lo_exp, hi_exp) = (-6.0, 3.0);
    let mut best = f64::INFINITY;
    let mut best_i = 0;
    for i in 0..grid_pts {
        let a = 10f64.powf(lo_exp + (hi_exp - lo_exp) * i as f64 / (grid_pts - 1) as f64);
        let v = f(a);
        if v < best {
            best = v;
            best_i = i;
        }
    }
    let exp_at = |i: i64| {
        10f64.powf(lo_exp + (hi_exp - lo_exp) * i.clamp(0, grid_pts - 1) as f64 / (grid_pts - 1) as f64)
    };
    let bracket_lo = exp_at(best_i as i64 - 1);
    let bracket_hi = exp_at(best_i as i64 + 1);
    let refined = golden_min(f, bracket_lo, bracket_hi, 1e-12 * bracket_hi.max(1.0));
    Ok(best.min(refined))
}

/// Cramer-type upper tail at level `delta`:
/// `2 m exp(-N Psi*(delta / theta))`.
pub fn worst_case_tail(
    psi: &RateFunction,
    theta: f64,
    n: usize,
    m: usize,
    delta: f64,
) -> Result<f64, ConcentrationError> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(ConcentrationError::InvalidArgument(format!(
            "theta must be positive and finite, got {theta}"
        )));
    }
    if !delta.is_finite() || delta < 0.0 {
        return Err(ConcentrationError::InvalidArgument(format!(
            "delta must be finite and nonnegative, got {delta}"
        )));
    }
    let star = fenchel_transform(|g| psi.eval(g), delta / theta)?;
    Ok(2.0 * m as f64 * (-(n as f64) * star).min(EXP_SATURATION).exp())
}
