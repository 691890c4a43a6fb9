//! Affine estimation certificates and LP-based confidence intervals.
//!
//! Under the identity link the empirical field is affine, so any
//! non-anticipating policy of per-step row vectors `E_t` (a weight per
//! location-mark channel, chosen from the past and the current regressors)
//! yields an observable affine function of the parameter,
//! `g(x) = (1/N) sum_t w_t <E_t, H_t^T x - z_t>`, whose value at the true
//! parameter concentrates near zero: `|g(beta)| <= delta` with the online
//! deviation level from `concentration::online_bound`. Intersecting these
//! bands with the feasible base set gives a confidence polytope; coordinate
//! intervals are extracted by linear programming with lazily generated
//! certificate rows.
//!
//! Two policy families are built: *basic* policies take `E_t` to be a row of
//! `H_t` (their stacked certificates reproduce the least-squares field), and
//! *advanced* policies greedily synthesize a target coordinate functional
//! under an l1 budget `theta` on each `E_t`.

use crate::concentration::{
    chi_t, online_bound, BoundConfig, ConcentrationError, RateFunction,
};
use crate::estimator::{assemble_ls_system, EstimatorError, Weights};
use crate::lp::{LinearProgram, LpError};
use crate::model::{
    project_l1_ball, Coord, FeasibleSet, LinkFunction, ModelShape, ParamVector, RegressorWindow,
    Trajectory,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Concentration(#[from] ConcentrationError),
    #[error("linear program failed: {0}")]
    Lp(#[from] LpError),
    #[error("confidence set is empty at the stated level")]
    EmptySet,
    #[error("certificates require the identity link (affine field)")]
    RequiresIdentityLink,
    #[error("interval extraction requires a box/row-sum feasible set")]
    RequiresBoundedBase,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One observable affine band `|<slope, x> + intercept| <= delta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineCertificate {
    pub slope: Vec<f64>,
    pub intercept: f64,
    pub delta: f64,
    pub policy: PolicyTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PolicyTag {
    /// Row `coord` of the regressor matrix at every step.
    Basic { coord: usize },
    /// Greedy l1-budgeted synthesis of the `target` coordinate functional.
    Advanced { target: usize, theta: f64 },
}

impl AffineCertificate {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.slope.iter().zip(x).map(|(s, v)| s * v).sum::<f64>() + self.intercept
    }

    pub fn holds_at(&self, x: &[f64], tol: f64) -> bool {
        self.evaluate(x).abs() <= self.delta + tol
    }
}

/// Suite parameters: the step-size grid shared by all deviation bounds, the
/// l1 budgets for advanced policies, and the overall failure budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub alpha_grid: Vec<f64>,
    pub theta_grid: Vec<f64>,
    pub epsilon: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            alpha_grid: crate::concentration::default_alpha_grid(),
            theta_grid: vec![0.5, 0.75, 1.0, 1.25, 2.0],
            epsilon: 0.01,
        }
    }
}

impl CertifyConfig {
    /// Number of policies in the full suite: one basic per coordinate plus
    /// one advanced per (coordinate, theta).
    pub fn suite_size(&self, kappa: usize) -> usize {
        kappa * (1 + self.theta_grid.len())
    }

    /// Union budget for a suite of `m` simultaneous certificates: every
    /// (policy, grid point) pair shares the failure probability.
    pub fn bound_config(&self, m: usize) -> BoundConfig {
        BoundConfig::new(
            self.alpha_grid.clone(),
            self.epsilon,
            self.alpha_grid.len() * m,
        )
    }
}

/// Per-step deviation rates: Poisson with the feasible-set mean bound for
/// count data, capped-probability categorical for indicator data.
pub fn step_rates(
    traj: &Trajectory,
    link: LinkFunction,
    feasible: &FeasibleSet,
) -> Result<Vec<RateFunction>, CertifyError> {
    let categorical = traj.is_categorical();
    let mut rates = Vec::with_capacity(traj.num_steps());
    for t in 1..=traj.num_steps() {
        let chi = chi_t(&traj.window(t), link, feasible)?;
        if categorical {
            if chi > 1.0 + 1e-9 {
                return Err(CertifyError::InvalidArgument(format!(
                    "categorical probability cap {chi} exceeds 1 at step {t}"
                )));
            }
            rates.push(RateFunction::Categorical {
                alpha_cap: chi.min(1.0),
            });
        } else {
            rates.push(RateFunction::Poisson { chi });
        }
    }
    Ok(rates)
}

/// Minimizer of `|| target - scale * H_t g ||_2` over `||g||_1 <= radius`.
/// The channels of `H_t` have disjoint support and a common squared norm, so
/// the quadratic is spherical and the solution is one l1-ball projection of
/// the unconstrained minimizer.
pub fn l1_constrained_lsq(
    target: &[f64],
    window: &RegressorWindow<'_>,
    scale: f64,
    radius: f64,
) -> Vec<f64> {
    assert!(scale != 0.0 && radius >= 0.0);
    let q = window.gram_diagonal();
    let mut g = vec![0.0; window.shape().state_dim()];
    window.transpose_apply_flat(target, &mut g);
    let c = 1.0 / (scale * q);
    for v in g.iter_mut() {
        *v *= c;
    }
    project_l1_ball(&mut g, radius);
    g
}

/// The full certificate suite: basic policies for every coordinate plus
/// advanced policies for every (coordinate, theta) pair, all sharing one
/// union budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateSuite {
    pub shape: ModelShape,
    pub feasible: FeasibleSet,
    pub epsilon: f64,
    pub union_count: usize,
    pub certificates: Vec<AffineCertificate>,
}

impl CertificateSuite {
    /// Membership in the confidence polytope: base set and every band.
    pub fn contains(&self, x: &ParamVector, tol: f64) -> bool {
        self.feasible.contains(&self.shape, x.as_flat(), tol)
            && self
                .certificates
                .iter()
                .all(|c| c.holds_at(x.as_flat(), tol))
    }

    pub fn basic(&self) -> Vec<&AffineCertificate> {
        self.certificates
            .iter()
            .filter(|c| matches!(c.policy, PolicyTag::Basic { .. }))
            .collect()
    }

    pub fn all(&self) -> Vec<&AffineCertificate> {
        self.certificates.iter().collect()
    }
}

/// Basic certificates for every coordinate. Slopes are the rows of the
/// weighted Gram matrix and intercepts the (negated) weighted moment vector,
/// so the stacked certificate values at `x` equal the empirical field.
pub fn basic_certificates(
    traj: &Trajectory,
    link: LinkFunction,
    weights: &Weights,
    feasible: &FeasibleSet,
    cfg: &CertifyConfig,
    suite_m: usize,
) -> Result<Vec<AffineCertificate>, CertifyError> {
    if link != LinkFunction::Identity {
        return Err(CertifyError::RequiresIdentityLink);
    }
    let rates = step_rates(traj, link, feasible)?;
    let bc = cfg.bound_config(suite_m);
    basic_with_rates(traj, weights, &rates, &bc)
}

/// Basic certificates with precomputed step rates and a shared union
/// budget, for callers assembling a suite policy by policy.
pub fn basic_with_rates(
    traj: &Trajectory,
    weights: &Weights,
    rates: &[RateFunction],
    bc: &BoundConfig,
) -> Result<Vec<AffineCertificate>, CertifyError> {
    let shape = *traj.shape();
    let (n, d, kappa) = (shape.state_dim(), shape.memory(), shape.kappa());
    let nsteps = traj.num_steps();
    let sys = assemble_ls_system(traj, weights)?;

    // The step-wise l1 norm of row j of H_t is w_t for base coordinates and
    // w_t * lag value for excitation coordinates, so deltas only depend on
    // the (lag, location-mark) class of the coordinate: 1 + d*n bounds cover
    // all kappa of them.
    let mut class_thetas: Vec<Vec<f64>> = vec![Vec::with_capacity(nsteps); 1 + d * n];
    for t in 1..=nsteps {
        let w = weights.inv(t - 1);
        let window = traj.window(t);
        class_thetas[0].push(w);
        for s in 1..=d {
            let lag = window.lag_state(s);
            for (l, &v) in lag.iter().enumerate() {
                class_thetas[1 + (s - 1) * n + l].push(w * v);
            }
        }
    }
    let mut class_delta = Vec::with_capacity(class_thetas.len());
    for thetas in &class_thetas {
        class_delta.push(online_bound(rates, thetas, bc)?.delta);
    }

    let mut certs = Vec::with_capacity(kappa);
    for j in 0..kappa {
        let delta = match shape.coord(j) {
            Coord::Base { .. } => class_delta[0],
            Coord::Lag { s, l, .. } => class_delta[1 + (s - 1) * n + l],
        };
        certs.push(AffineCertificate {
            slope: sys.gram[j * kappa..(j + 1) * kappa].to_vec(),
            intercept: -sys.linear[j],
            delta,
            policy: PolicyTag::Basic { coord: j },
        });
    }
    Ok(certs)
}

/// Advanced certificate targeting one coordinate functional under an l1
/// budget per step.
pub fn advanced_certificate(
    traj: &Trajectory,
    link: LinkFunction,
    weights: &Weights,
    feasible: &FeasibleSet,
    target: usize,
    theta: f64,
    cfg: &CertifyConfig,
    suite_m: usize,
) -> Result<AffineCertificate, CertifyError> {
    if link != LinkFunction::Identity {
        return Err(CertifyError::RequiresIdentityLink);
    }
    let rates = step_rates(traj, link, feasible)?;
    let bc = cfg.bound_config(suite_m);
    advanced_with_rates(traj, weights, target, theta, &rates, &bc)
}

/// Conservative upward snap to a 256-per-e-fold log lattice, keeping the
/// number of distinct step norms bounded for the grouped bound scan. Only
/// unsaturated steps ever need it; saturated steps use the exact budget.
fn quantize_up(v: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    ((256.0 * v.ln()).ceil() / 256.0).exp().max(v)
}

/// Advanced certificate with precomputed step rates and a shared union
/// budget. Policies are independent given `rates` and `bc`, so callers may
/// compute them in any order (or in parallel) and assemble the suite.
pub fn advanced_with_rates(
    traj: &Trajectory,
    weights: &Weights,
    target: usize,
    theta: f64,
    rates: &[RateFunction],
    bc: &BoundConfig,
) -> Result<AffineCertificate, CertifyError> {
    let shape = *traj.shape();
    let kappa = shape.kappa();
    if target >= kappa {
        return Err(CertifyError::InvalidArgument(format!(
            "target {target} out of range for kappa {kappa}"
        )));
    }
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(CertifyError::InvalidArgument(format!(
            "theta must be positive and finite, got {theta}"
        )));
    }
    let nsteps = traj.num_steps();
    let nf = nsteps as f64;
    let n = shape.state_dim();

    // Greedy residual-target recurrence: at each step pick the budgeted row
    // E_t minimizing || f_t - (w_t/N) H_t E_t ||_2, then remove the realized
    // part from the residual target. The slope telescopes to
    // e_target - f_final.
    let mut f = vec![0.0; kappa];
    f[target] = 1.0;
    let mut intercept = 0.0;
    let mut thetas = Vec::with_capacity(nsteps);
    let mut u = vec![0.0; n];
    for t in 1..=nsteps {
        let (window, state) = traj.step(t);
        let w = weights.inv(t - 1);
        let q = window.gram_diagonal();
        window.transpose_apply_flat(&f, &mut u);
        let scale = nf / (w * q);
        for v in u.iter_mut() {
            *v *= scale;
        }
        let pre_norm: f64 = u.iter().map(|v| v.abs()).sum();
        let saturated = pre_norm > theta;
        if saturated {
            project_l1_ball(&mut u, theta);
        }
        thetas.push(w * if saturated { theta } else { quantize_up(pre_norm) });
        window.apply_scaled_add(&u, -(w / nf), &mut f);
        intercept -= w / nf * u.iter().zip(state).map(|(a, b)| a * b).sum::<f64>();
    }
    let delta = online_bound(rates, &thetas, bc)?.delta;
    let mut slope: Vec<f64> = f.iter().map(|v| -v).collect();
    slope[target] += 1.0;
    Ok(AffineCertificate {
        slope,
        intercept,
        delta,
        policy: PolicyTag::Advanced { target, theta },
    })
}

/// Build the full suite (basic + advanced for every coordinate and theta)
/// under one union budget.
pub fn full_suite(
    traj: &Trajectory,
    link: LinkFunction,
    weights: &Weights,
    feasible: &FeasibleSet,
    cfg: &CertifyConfig,
) -> Result<CertificateSuite, CertifyError> {
    if link != LinkFunction::Identity {
        return Err(CertifyError::RequiresIdentityLink);
    }
    let shape = *traj.shape();
    let kappa = shape.kappa();
    let m = cfg.suite_size(kappa);
    let bc = cfg.bound_config(m);
    let rates = step_rates(traj, link, feasible)?;
    let mut certificates = basic_with_rates(traj, weights, &rates, &bc)?;
    certificates.reserve(kappa * cfg.theta_grid.len());
    for target in 0..kappa {
        for &theta in &cfg.theta_grid {
            certificates.push(advanced_with_rates(
                traj, weights, target, theta, &rates, &bc,
            )?);
        }
    }
    Ok(CertificateSuite {
        shape,
        feasible: feasible.clone(),
        epsilon: cfg.epsilon,
        union_count: bc.union_count,
        certificates,
    })
}

/// Which certificates constrain the polytope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertFilter {
    BasicOnly,
    All,
}

/// Closed-form coordinate ranges of the base set alone (the fallback when
/// the certificate polytope is empty).
pub fn base_intervals(
    shape: &ModelShape,
    feasible: &FeasibleSet,
) -> Result<(Vec<f64>, Vec<f64>), CertifyError> {
    let FeasibleSet::BoxRowSum { a_cap, b_cap } = *feasible else {
        return Err(CertifyError::RequiresBoundedBase);
    };
    let kappa = shape.kappa();
    let mut lo = vec![0.0; kappa];
    let mut hi = vec![0.0; kappa];
    for j in 0..kappa {
        hi[j] = match shape.coord(j) {
            Coord::Base { .. } => a_cap,
            Coord::Lag { .. } => b_cap,
        };
        lo[j] = 0.0;
    }
    Ok((lo, hi))
}

fn base_lp(shape: &ModelShape, a_cap: f64, b_cap: f64, objective: Vec<f64>) -> LinearProgram {
    let kappa = shape.kappa();
    let (n, d) = (shape.state_dim(), shape.memory());
    let mut lp = LinearProgram::minimize(objective);
    for j in 0..kappa {
        match shape.coord(j) {
            Coord::Base { .. } => lp.bound(j, 0.0, a_cap),
            Coord::Lag { .. } => lp.bound(j, 0.0, f64::INFINITY),
        };
    }
    for k in 0..n {
        let mut row = vec![0.0; kappa];
        for s in 1..=d {
            for l in 0..n {
                row[shape.flat_lag(s, k, l)] = 1.0;
            }
        }
        lp.leq(row, b_cap);
    }
    lp
}

/// Minimize a linear objective over the certificate polytope by lazy row
/// generation: solve with the base rows, add the most violated certificate
/// sides at the optimum, repeat until none are violated. The final point is
/// optimal for the full polytope (it is feasible for all rows and optimal
/// for a relaxation).
fn lazy_min(
    shape: &ModelShape,
    a_cap: f64,
    b_cap: f64,
    certs: &[&AffineCertificate],
    objective: &[f64],
) -> Result<f64, CertifyError> {
    const VIOL_TOL: f64 = 1e-9;
    const BATCH: usize = 16;
    // Band magnitudes vary across certificates by many orders (Gram rows
    // grow with the counts), so each row is equilibrated before entering the
    // tableau and violations are judged on a matching relative scale.
    let row_scale: Vec<f64> = certs
        .iter()
        .map(|c| c.slope.iter().fold(1.0f64, |m, v| m.max(v.abs())))
        .collect();
    let cap = a_cap.max(b_cap);
    let viol_tol: Vec<f64> = certs
        .iter()
        .map(|c| {
            let reach = c.slope.iter().map(|v| v.abs()).sum::<f64>() * cap;
            VIOL_TOL * (1.0 + reach + c.intercept.abs())
        })
        .collect();
    let mut active: Vec<(usize, bool)> = Vec::new();
    loop {
        let mut lp = base_lp(shape, a_cap, b_cap, objective.to_vec());
        for &(i, upper) in &active {
            let c = certs[i];
            let inv = 1.0 / row_scale[i];
            if upper {
                lp.leq(
                    c.slope.iter().map(|v| v * inv).collect(),
                    (c.delta - c.intercept) * inv,
                );
            } else {
                lp.leq(
                    c.slope.iter().map(|v| -v * inv).collect(),
                    (c.delta + c.intercept) * inv,
                );
            }
        }
        let sol = match lp.solve() {
            Ok(s) => s,
            Err(LpError::Infeasible(_)) => return Err(CertifyError::EmptySet),
            Err(e) => return Err(e.into()),
        };
        let mut violations: Vec<(f64, (usize, bool))> = Vec::new();
        for (i, c) in certs.iter().enumerate() {
            let g = c.evaluate(&sol.x);
            if g > c.delta + viol_tol[i] && !active.contains(&(i, true)) {
                violations.push(((g - c.delta) / row_scale[i], (i, true)));
            }
            if -g > c.delta + viol_tol[i] && !active.contains(&(i, false)) {
                violations.push(((-g - c.delta) / row_scale[i], (i, false)));
            }
        }
        if violations.is_empty() {
            return Ok(sol.objective);
        }
        violations.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for &(_, key) in violations.iter().take(BATCH) {
            active.push(key);
        }
    }
}

/// Per-coordinate intervals certified by each coordinate's own basic band
/// alone (intersected with the base set). A single band cannot pin the other
/// kappa - 1 coordinates, so these intervals stay near the base-set ranges;
/// they are the reference point the full-suite intervals are judged against.
pub fn basic_marginal_intervals(
    suite: &CertificateSuite,
) -> Result<(Vec<f64>, Vec<f64>), CertifyError> {
    let FeasibleSet::BoxRowSum { a_cap, b_cap } = suite.feasible else {
        return Err(CertifyError::RequiresBoundedBase);
    };
    let kappa = suite.shape.kappa();
    let mut by_coord: Vec<Option<&AffineCertificate>> = vec![None; kappa];
    for c in &suite.certificates {
        if let PolicyTag::Basic { coord } = c.policy {
            if coord < kappa && by_coord[coord].is_none() {
                by_coord[coord] = Some(c);
            }
        }
    }
    let mut lo = vec![0.0; kappa];
    let mut hi = vec![0.0; kappa];
    let mut objective = vec![0.0; kappa];
    for j in 0..kappa {
        let cert = by_coord[j].ok_or_else(|| {
            CertifyError::InvalidArgument(format!("no basic certificate for coordinate {j}"))
        })?;
        let band = [cert];
        objective[j] = 1.0;
        lo[j] = lazy_min(&suite.shape, a_cap, b_cap, &band, &objective)?;
        objective[j] = -1.0;
        hi[j] = -lazy_min(&suite.shape, a_cap, b_cap, &band, &objective)?;
        objective[j] = 0.0;
    }
    Ok((lo, hi))
}

/// Coordinate intervals of the certificate polytope (2 kappa LPs).
pub fn coordinate_intervals(
    suite: &CertificateSuite,
    filter: CertFilter,
) -> Result<(Vec<f64>, Vec<f64>), CertifyError> {
    let FeasibleSet::BoxRowSum { a_cap, b_cap } = suite.feasible else {
        return Err(CertifyError::RequiresBoundedBase);
    };
    let certs = match filter {
        CertFilter::BasicOnly => suite.basic(),
        CertFilter::All => suite.all(),
    };
    let kappa = suite.shape.kappa();
    let mut lo = vec![0.0; kappa];
    let mut hi = vec![0.0; kappa];
    let mut objective = vec![0.0; kappa];
    for j in 0..kappa {
        objective[j] = 1.0;
        lo[j] = lazy_min(&suite.shape, a_cap, b_cap, &certs, &objective)?;
        objective[j] = -1.0;
        hi[j] = -lazy_min(&suite.shape, a_cap, b_cap, &certs, &objective)?;
        objective[j] = 0.0;
    }
    Ok((lo, hi))
}

/// Per-coordinate certification outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordinateReport {
    pub coord: usize,
    pub estimate: f64,
    pub truth: Option<f64>,
    /// Interval certified by this coordinate's own basic band alone.
    pub basic_lo: f64,
    pub basic_hi: f64,
    /// Interval certified by the full suite.
    pub lo: f64,
    pub hi: f64,
}

impl CoordinateReport {
    /// Worst-case distance from the estimate guaranteed by the basic bands.
    pub fn basic_bound(&self) -> f64 {
        (self.basic_hi - self.estimate)
            .abs()
            .max((self.estimate - self.basic_lo).abs())
    }

    /// Worst-case distance guaranteed by the full suite.
    pub fn advanced_bound(&self) -> f64 {
        (self.hi - self.estimate)
            .abs()
            .max((self.estimate - self.lo).abs())
    }

    pub fn actual_error(&self) -> Option<f64> {
        self.truth.map(|t| (self.estimate - t).abs())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationReport {
    pub epsilon: f64,
    pub suite_size: usize,
    pub union_count: usize,
    /// False when an empty polytope forced the base-set fallback, leaving
    /// the stated coverage uncertified.
    pub coverage_certified: bool,
    pub coords: Vec<CoordinateReport>,
}

/// End-to-end certification: build the full suite, extract per-coordinate
/// single-band intervals and full-suite intervals, and tabulate them against
/// the estimate (and the truth when known). An empty polytope degrades to the
/// base-set ranges and clears `coverage_certified`.
pub fn certification_report(
    traj: &Trajectory,
    weights: &Weights,
    feasible: &FeasibleSet,
    beta_hat: &ParamVector,
    beta_true: Option<&ParamVector>,
    cfg: &CertifyConfig,
) -> Result<(CertificationReport, CertificateSuite), CertifyError> {
    let suite = full_suite(traj, LinkFunction::Identity, weights, feasible, cfg)?;
    let report = report_from_suite(&suite, beta_hat, beta_true)?;
    Ok((report, suite))
}

/// Tabulate coordinate intervals from a prebuilt suite.
pub fn report_from_suite(
    suite: &CertificateSuite,
    beta_hat: &ParamVector,
    beta_true: Option<&ParamVector>,
) -> Result<CertificationReport, CertifyError> {
    let mut certified = true;
    let fallback = |certified: &mut bool| -> Result<(Vec<f64>, Vec<f64>), CertifyError> {
        *certified = false;
        base_intervals(&suite.shape, &suite.feasible)
    };
    let (basic_lo, basic_hi) = match basic_marginal_intervals(suite) {
        Ok(iv) => iv,
        Err(CertifyError::EmptySet) => fallback(&mut certified)?,
        Err(e) => return Err(e),
    };
    let (lo, hi) = match coordinate_intervals(suite, CertFilter::All) {
        Ok(iv) => iv,
        Err(CertifyError::EmptySet) => fallback(&mut certified)?,
        Err(e) => return Err(e),
    };
    let kappa = suite.shape.kappa();
    let coords = (0..kappa)
        .map(|j| CoordinateReport {
            coord: j,
            estimate: beta_hat.as_flat()[j],
            truth: beta_true.map(|b| b.as_flat()[j]),
            basic_lo: basic_lo[j],
            basic_hi: basic_hi[j],
            lo: lo[j],
            hi: hi[j],
        })
        .collect();
    Ok(CertificationReport {
        epsilon: suite.epsilon,
        suite_size: suite.certificates.len(),
        union_count: suite.union_count,
        coverage_certified: certified,
        coords,
    })
}
