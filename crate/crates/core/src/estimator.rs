//! Sample-field evaluation and estimation solvers.
//!
//! The sample field at parameter `x` is
//! `F(x) = (1/N) sum_t w_t^{-1} H_t [Phi(H_t^T x) - state_t]`,
//! the gradient of the convex sample objective
//! `(1/N) sum_t w_t^{-1} [sum_k pot((H_t^T x)_k) - <H_t^T x, state_t>]`.
//! Estimation solves the variational inequality `<F(x*), x - x*> >= 0` over
//! the feasible set; for the identity link this is constrained least squares
//! (the two objectives differ by a constant in `x`).
//!
//! For small parameter counts the identity-link field collapses onto the
//! normal system `F(x) = G x - h` with `G = (1/N) sum_t w_t^{-1} H_t H_t^T`;
//! `G` is assembled from sparse channel-column outer products (the regressor
//! itself is never densified) and reused by the modulus computation and the
//! coordinate certificates.

use crate::model::{
    FeasibleSet, LinkFunction, ModelError, ModelShape, ParamVector, Trajectory,
};
use crate::sum;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Parameter count above which dense `kappa x kappa` assembly is refused.
pub const GRAM_KAPPA_LIMIT: usize = 2000;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trajectory has no response steps")]
    EmptyTrajectory,
    #[error("weights: expected {expected} positive entries, got {got}")]
    BadWeights { expected: usize, got: usize },
    #[error("weights must be strictly positive")]
    NonPositiveWeight,
    #[error("dense kappa x kappa assembly refused: kappa={kappa} exceeds {limit}")]
    KappaGuard { kappa: usize, limit: usize },
    #[error("monotonicity modulus unavailable: {0}")]
    ModulusUnavailable(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Per-step positive scale weights `w_t` (the field divides by them).
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Uniform,
    PerStep(Vec<f64>),
}

impl Weights {
    fn validate(&self, n_steps: usize) -> Result<(), EstimatorError> {
        match self {
            Weights::Uniform => Ok(()),
            Weights::PerStep(v) => {
                if v.len() != n_steps {
                    return Err(EstimatorError::BadWeights {
                        expected: n_steps,
                        got: v.len(),
                    });
                }
                if v.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
                    return Err(EstimatorError::NonPositiveWeight);
                }
                Ok(())
            }
        }
    }

    /// `1 / w_t` for the zero-based step index.
    #[inline]
    pub fn inv(&self, idx: usize) -> f64 {
        match self {
            Weights::Uniform => 1.0,
            Weights::PerStep(v) => 1.0 / v[idx],
        }
    }
}

fn check_inputs(
    traj: &Trajectory,
    x_shape: &ModelShape,
    weights: &Weights,
) -> Result<(), EstimatorError> {
    if traj.shape() != x_shape {
        return Err(EstimatorError::Model(ModelError::DimensionMismatch {
            expected: traj.shape().kappa(),
            got: x_shape.kappa(),
        }));
    }
    if traj.num_steps() == 0 {
        return Err(EstimatorError::EmptyTrajectory);
    }
    weights.validate(traj.num_steps())
}

/// The sample field `F(x)` as a flat `kappa`-vector.
pub fn empirical_field(
    traj: &Trajectory,
    x: &ParamVector,
    link: LinkFunction,
    weights: &Weights,
) -> Result<Vec<f64>, EstimatorError> {
    check_inputs(traj, x.shape(), weights)?;
    Ok(field_flat(traj, x.as_flat(), link, weights))
}

pub(crate) fn field_flat(
    traj: &Trajectory,
    x: &[f64],
    link: LinkFunction,
    weights: &Weights,
) -> Vec<f64> {
    let shape = *traj.shape();
    let n = shape.state_dim();
    let n_steps = traj.num_steps();
    let mut out = sum::chunked_sum_vec(n_steps, shape.kappa(), |range, acc| {
        let mut z = vec![0.0; n];
        for i in range {
            let (w, zeta) = traj.step(i + 1);
            w.transpose_apply_flat(x, &mut z);
            let wt = weights.inv(i);
            for (zj, &obs) in z.iter_mut().zip(zeta.iter()) {
                *zj = (link.value(*zj) - obs) * wt;
            }
            w.apply_scaled_add(&z, 1.0, acc);
        }
    });
    let scale = 1.0 / n_steps as f64;
    for v in &mut out {
        *v *= scale;
    }
    out
}

/// The sample objective whose gradient is the field.
pub fn objective_value(
    traj: &Trajectory,
    x: &ParamVector,
    link: LinkFunction,
    weights: &Weights,
) -> Result<f64, EstimatorError> {
    check_inputs(traj, x.shape(), weights)?;
    Ok(objective_flat(traj, x.as_flat(), link, weights))
}

fn objective_flat(traj: &Trajectory, x: &[f64], link: LinkFunction, weights: &Weights) -> f64 {
    let shape = *traj.shape();
    let n = shape.state_dim();
    let n_steps = traj.num_steps();
    let total = sum::chunked_sum(n_steps, |range| {
        let mut z = vec![0.0; n];
        let mut acc = 0.0;
        for i in range {
            let (w, zeta) = traj.step(i + 1);
            w.transpose_apply_flat(x, &mut z);
            let mut term = 0.0;
            for (&zj, &obs) in z.iter().zip(zeta.iter()) {
                term += link.potential(zj) - zj * obs;
            }
            acc += term * weights.inv(i);
        }
        acc
    });
    total / n_steps as f64
}

/// Normal system for the identity link: `F(x) = gram * x - linear`, and the
/// least-squares value is `x' gram x / 2 - <linear, x> + quad_const`.
#[derive(Debug, Clone)]
pub(crate) struct GramSystem {
    pub kappa: usize,
    pub gram: Vec<f64>,
    pub linear: Vec<f64>,
    pub quad_const: f64,
}

impl GramSystem {
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let k = self.kappa;
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.gram[r * k..(r + 1) * k];
            let mut acc = 0.0;
            for (g, xv) in row.iter().zip(x.iter()) {
                acc += g * xv;
            }
            *o = acc;
        }
    }

    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        self.matvec(x, out);
        for (o, l) in out.iter_mut().zip(self.linear.iter()) {
            *o -= l;
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let k = self.kappa;
        let mut quad = 0.0;
        let mut lin = 0.0;
        for r in 0..k {
            let row = &self.gram[r * k..(r + 1) * k];
            let mut acc = 0.0;
            for (g, xv) in row.iter().zip(x.iter()) {
                acc += g * xv;
            }
            quad += acc * x[r];
            lin += self.linear[r] * x[r];
        }
        0.5 * quad - lin + self.quad_const
    }
}

/// `(1/N) sum_t c_t H_t H_t^T` as a dense row-major matrix, built from the
/// sparse channel columns of each regressor (each column has `1 + d*n`
/// nonzeros). Sequential: the cost is one pass and determinism is free.
pub(crate) fn assemble_weighted_gram(
    traj: &Trajectory,
    per_step: impl Fn(usize) -> f64,
) -> Result<Vec<f64>, EstimatorError> {
    let shape = *traj.shape();
    let kappa = shape.kappa();
    if kappa > GRAM_KAPPA_LIMIT {
        return Err(EstimatorError::KappaGuard {
            kappa,
            limit: GRAM_KAPPA_LIMIT,
        });
    }
    let n = shape.state_dim();
    let d = shape.memory();
    let m = 1 + d * n;
    let n_steps = traj.num_steps();
    let mut gram = vec![0.0; kappa * kappa];
    let mut vals = vec![0.0; m];
    let mut idx = vec![0usize; m];
    for i in 0..n_steps {
        let (w, _) = traj.step(i + 1);
        let c = per_step(i);
        if c == 0.0 {
            continue;
        }
        vals[0] = 1.0;
        for s in 1..=d {
            vals[1 + (s - 1) * n..1 + s * n].copy_from_slice(w.lag_state(s));
        }
        for k in 0..n {
            idx[0] = k;
            let mut p = 1;
            for s in 1..=d {
                let base = n + (s - 1) * n * n + k * n;
                for l in 0..n {
                    idx[p] = base + l;
                    p += 1;
                }
            }
            for a in 0..m {
                let va = c * vals[a];
                if va == 0.0 {
                    continue;
                }
                let row = idx[a] * kappa;
                for b in 0..m {
                    gram[row + idx[b]] += va * vals[b];
                }
            }
        }
    }
    let scale = 1.0 / n_steps as f64;
    for g in &mut gram {
        *g *= scale;
    }
    Ok(gram)
}

pub(crate) fn assemble_ls_system(
    traj: &Trajectory,
    weights: &Weights,
) -> Result<GramSystem, EstimatorError> {
    let shape = *traj.shape();
    let kappa = shape.kappa();
    let gram = assemble_weighted_gram(traj, |i| weights.inv(i))?;
    let n_steps = traj.num_steps();
    let mut linear = vec![0.0; kappa];
    let mut quad_const = 0.0;
    for i in 0..n_steps {
        let (w, zeta) = traj.step(i + 1);
        let wt = weights.inv(i);
        w.apply_scaled_add(zeta, wt, &mut linear);
        quad_const += wt * zeta.iter().map(|z| z * z).sum::<f64>();
    }
    let scale = 1.0 / n_steps as f64;
    for l in &mut linear {
        *l *= scale;
    }
    quad_const *= 0.5 * scale;
    Ok(GramSystem {
        kappa,
        gram,
        linear,
        quad_const,
    })
}

/// Largest-eigenvalue estimate by power iteration (deterministic start).
pub(crate) fn lambda_max(dim: usize, mut matvec: impl FnMut(&[f64], &mut [f64])) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.5..1.5)).collect();
    let mut av = vec![0.0; dim];
    let mut rq = 0.0;
    for _ in 0..60 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in &mut v {
            *x /= norm;
        }
        matvec(&v, &mut av);
        rq = v.iter().zip(av.iter()).map(|(a, b)| a * b).sum::<f64>();
        std::mem::swap(&mut v, &mut av);
    }
    rq.max(0.0)
}

/// Per-step lower bounds on the link derivative over the reachable predictor
/// range; these multiply the Gram summands in the monotonicity modulus.
pub fn link_moduli(
    traj: &Trajectory,
    link: LinkFunction,
    feasible: &FeasibleSet,
) -> Result<Vec<f64>, EstimatorError> {
    if traj.num_steps() == 0 {
        return Err(EstimatorError::EmptyTrajectory);
    }
    if matches!(link, LinkFunction::Identity) {
        return Ok(vec![1.0; traj.num_steps()]);
    }
    (1..=traj.num_steps())
        .map(|t| {
            let w = traj.window(t);
            let (lo, hi) = feasible.predictor_bounds(&w);
            let inf = match link {
                LinkFunction::Identity => 1.0,
                // sigmoid' peaks at 0 and decays in |z|: the inf over an
                // interval sits at the endpoint of larger magnitude.
                LinkFunction::Sigmoid => {
                    if !lo.is_finite() || !hi.is_finite() {
                        0.0
                    } else {
                        link.derivative(if hi.abs() >= lo.abs() { hi } else { lo })
                    }
                }
                LinkFunction::Exp => {
                    if lo.is_finite() {
                        lo.exp()
                    } else {
                        0.0
                    }
                }
            };
            if inf > 0.0 {
                Ok(inf)
            } else {
                Err(EstimatorError::ModulusUnavailable(format!(
                    "link derivative is not bounded away from zero on the \
                     reachable range [{lo}, {hi}] of step {t}"
                )))
            }
        })
        .collect()
}

/// Smallest eigenvalue of `(1/N) sum_t gamma_t w_t^{-1} H_t H_t^T`, the
/// strong-monotonicity modulus of the sample field over the feasible set.
pub fn monotonicity_modulus(
    traj: &Trajectory,
    link: LinkFunction,
    feasible: &FeasibleSet,
    weights: &Weights,
) -> Result<f64, EstimatorError> {
    if traj.num_steps() == 0 {
        return Err(EstimatorError::EmptyTrajectory);
    }
    weights.validate(traj.num_steps())?;
    let gamma = link_moduli(traj, link, feasible)?;
    let gram = assemble_weighted_gram(traj, |i| gamma[i] * weights.inv(i))?;
    Ok(min_eigenvalue_symmetric(traj.shape().kappa(), &gram))
}

pub(crate) fn min_eigenvalue_symmetric(kappa: usize, gram: &[f64]) -> f64 {
    let mat = nalgebra::DMatrix::from_row_slice(kappa, kappa, gram);
    let eig = mat.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// `||F(beta_hat)||_inf / sqrt(theta_p * theta_1)`: the recovery bound in the
/// `p`-norm from a field norm at the estimate and the two monotonicity
/// moduli.
pub fn recovery_error_bound(
    field_inf_norm: f64,
    theta_p: f64,
    theta_1: f64,
) -> Result<f64, EstimatorError> {
    if !field_inf_norm.is_finite() || field_inf_norm < 0.0 {
        return Err(EstimatorError::InvalidArgument(
            "field norm must be finite and nonnegative".into(),
        ));
    }
    if !(theta_p > 0.0) || !(theta_1 > 0.0) {
        return Err(EstimatorError::InvalidArgument(
            "moduli must be strictly positive".into(),
        ));
    }
    Ok(field_inf_norm / (theta_p * theta_1).sqrt())
}

/// Euclidean-norm recovery bound using `theta_2 = lambda_min` and the norm
/// comparison `theta_1 >= theta_2 / kappa`.
pub fn recovery_bound_l2(
    field_inf_norm: f64,
    theta_2: f64,
    kappa: usize,
) -> Result<f64, EstimatorError> {
    recovery_error_bound(field_inf_norm, theta_2, theta_2 / kappa as f64)
}

/// Step-size policy for the iterative solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Constant step.
    Fixed(f64),
    /// Spectral (Barzilai-Borwein) trial step with Armijo halving; `shrink`
    /// is the backtracking factor.
    Backtracking { shrink: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Backtracking { shrink: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Stop when the sup-norm step (projected-gradient) or residual-map value
    /// (extragradient) drops to this.
    pub tol: f64,
    pub step_rule: StepRule,
    /// Record the objective after every accepted iteration.
    pub record_trace: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iters: 50_000,
            tol: 1e-9,
            step_rule: StepRule::default(),
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: ParamVector,
    pub iterations: usize,
    /// False means the iteration budget ran out; the final residual says how
    /// far from stationarity the returned point is.
    pub converged: bool,
    pub residual: f64,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Constrained least squares (identity link) by projected gradient descent
/// with spectral trial steps and Armijo backtracking. The objective is
/// nonincreasing across iterations under the backtracking rule.
pub fn fit_least_squares(
    traj: &Trajectory,
    feasible: &FeasibleSet,
    cfg: &FitConfig,
) -> Result<FitResult, EstimatorError> {
    let shape = *traj.shape();
    if traj.num_steps() == 0 {
        return Err(EstimatorError::EmptyTrajectory);
    }
    let kappa = shape.kappa();
    let weights = Weights::Uniform;

    // Value/gradient oracle: dense normal system when kappa permits,
    // streaming two-pass otherwise. Identical up to float rounding.
    let sys = if kappa <= GRAM_KAPPA_LIMIT {
        Some(assemble_ls_system(traj, &weights)?)
    } else {
        None
    };
    let grad = |x: &[f64], out: &mut [f64]| match &sys {
        Some(s) => s.grad(x, out),
        None => out.copy_from_slice(&field_flat(traj, x, LinkFunction::Identity, &weights)),
    };
    let value = |x: &[f64]| match &sys {
        Some(s) => s.value(x),
        None => ls_value_streaming(traj, x),
    };
    let lmax = match &sys {
        Some(s) => lambda_max(kappa, |v, out| s.matvec(v, out)),
        None => lambda_max(kappa, |v, out| {
            gram_matvec_streaming(traj, v, out);
        }),
    };
    let gamma0 = if lmax > 0.0 { 1.0 / (1.05 * lmax) } else { 1.0 };

    let mut x = vec![0.0; kappa];
    feasible.project(&shape, &mut x);
    let mut g = vec![0.0; kappa];
    grad(&x, &mut g);
    let mut fx = value(&x);
    let mut trace = Vec::new();
    if cfg.record_trace {
        trace.push(fx);
    }

    let mut prev_x: Option<Vec<f64>> = None;
    let mut prev_g: Option<Vec<f64>> = None;
    let mut cand = vec![0.0; kappa];
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iters = 0;

    for _ in 0..cfg.max_iters {
        iters += 1;
        let mut gamma = match cfg.step_rule {
            StepRule::Fixed(v) => v,
            StepRule::Backtracking { .. } => match (&prev_x, &prev_g) {
                (Some(px), Some(pg)) => {
                    let mut ss = 0.0;
                    let mut sy = 0.0;
                    for i in 0..kappa {
                        let s = x[i] - px[i];
                        let y = g[i] - pg[i];
                        ss += s * s;
                        sy += s * y;
                    }
                    if sy > 1e-300 {
                        (ss / sy).clamp(gamma0 * 1e-8, gamma0 * 1e8)
                    } else {
                        gamma0
                    }
                }
                _ => gamma0,
            },
        };

        let (fc, step_inf) = loop {
            for i in 0..kappa {
                cand[i] = x[i] - gamma * g[i];
            }
            feasible.project(&shape, &mut cand);
            let mut dn2 = 0.0;
            let mut gd = 0.0;
            for i in 0..kappa {
                let d = cand[i] - x[i];
                dn2 += d * d;
                gd += g[i] * d;
            }
            if dn2 == 0.0 {
                break (fx, 0.0);
            }
            match cfg.step_rule {
                StepRule::Fixed(_) => break (value(&cand), sup_diff(&cand, &x)),
                StepRule::Backtracking { shrink } => {
                    let fc = value(&cand);
                    if fc <= fx + gd + dn2 / (2.0 * gamma) || gamma <= gamma0 * 1e-12 {
                        break (fc, sup_diff(&cand, &x));
                    }
                    gamma *= shrink;
                }
            }
        };

        residual = step_inf;
        prev_x = Some(x.clone());
        prev_g = Some(g.clone());
        std::mem::swap(&mut x, &mut cand);
        fx = fc;
        grad(&x, &mut g);
        if cfg.record_trace {
            trace.push(fx);
        }
        if residual <= cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(FitResult {
        beta_hat: ParamVector::from_flat(shape, x)?,
        iterations: iters,
        converged,
        residual,
        objective: fx,
        objective_trace: trace,
    })
}

fn ls_value_streaming(traj: &Trajectory, x: &[f64]) -> f64 {
    let n = traj.shape().state_dim();
    let n_steps = traj.num_steps();
    let total = sum::chunked_sum(n_steps, |range| {
        let mut z = vec![0.0; n];
        let mut acc = 0.0;
        for i in range {
            let (w, zeta) = traj.step(i + 1);
            w.transpose_apply_flat(x, &mut z);
            for (&zj, &obs) in z.iter().zip(zeta.iter()) {
                acc += (zj - obs) * (zj - obs);
            }
        }
        acc
    });
    0.5 * total / n_steps as f64
}

fn gram_matvec_streaming(traj: &Trajectory, v: &[f64], out: &mut [f64]) {
    let n = traj.shape().state_dim();
    let n_steps = traj.num_steps();
    let acc = sum::chunked_sum_vec(n_steps, traj.shape().kappa(), |range, acc| {
        let mut z = vec![0.0; n];
        for i in range {
            let (w, _) = traj.step(i + 1);
            w.transpose_apply_flat(v, &mut z);
            w.apply_scaled_add(&z, 1.0, acc);
        }
    });
    let scale = 1.0 / n_steps as f64;
    for (o, a) in out.iter_mut().zip(acc.iter()) {
        *o = a * scale;
    }
}

/// Solves the variational inequality for a general monotone link by the
/// extragradient method with a fixed step calibrated to a Lipschitz estimate
/// of the field. The residual is `||x - P(x - gamma F(x))||_inf`.
pub fn fit_vi_extragradient(
    traj: &Trajectory,
    link: LinkFunction,
    feasible: &FeasibleSet,
    cfg: &FitConfig,
) -> Result<FitResult, EstimatorError> {
    let shape = *traj.shape();
    if traj.num_steps() == 0 {
        return Err(EstimatorError::EmptyTrajectory);
    }
    let kappa = shape.kappa();
    let weights = Weights::Uniform;

    let sys = if matches!(link, LinkFunction::Identity) && kappa <= GRAM_KAPPA_LIMIT {
        Some(assemble_ls_system(traj, &weights)?)
    } else {
        None
    };
    let field = |x: &[f64], out: &mut [f64]| match &sys {
        Some(s) => s.grad(x, out),
        None => out.copy_from_slice(&field_flat(traj, x, link, &weights)),
    };

    let mut x = vec![0.0; kappa];
    feasible.project(&shape, &mut x);

    // Lipschitz estimate: power iteration on the field Jacobian at the start
    // point, (1/N) sum_t H_t diag(Phi'(H_t^T x0)) H_t^T.
    let x0 = x.clone();
    let lmax = match &sys {
        Some(s) => lambda_max(kappa, |v, out| s.matvec(v, out)),
        None => lambda_max(kappa, |v, out| {
            jacobian_matvec_streaming(traj, link, &x0, v, out);
        }),
    };
    let mut gamma = match cfg.step_rule {
        StepRule::Fixed(v) => v,
        StepRule::Backtracking { .. } => {
            if lmax > 0.0 {
                0.9 / lmax
            } else {
                1.0
            }
        }
    };

    let mut fx = vec![0.0; kappa];
    let mut mid = vec![0.0; kappa];
    let mut fmid = vec![0.0; kappa];
    let mut next = vec![0.0; kappa];
    let mut residual = f64::INFINITY;
    let mut first_residual = f64::INFINITY;
    let mut converged = false;
    let mut iters = 0;
    let mut trace = Vec::new();

    for _ in 0..cfg.max_iters {
        iters += 1;
        field(&x, &mut fx);
        for i in 0..kappa {
            mid[i] = x[i] - gamma * fx[i];
        }
        feasible.project(&shape, &mut mid);
        residual = sup_diff(&mid, &x);
        if cfg.record_trace {
            trace.push(residual);
        }
        if residual <= cfg.tol {
            converged = true;
            break;
        }
        if !first_residual.is_finite() || iters == 1 {
            first_residual = residual;
        }
        // Safeguard: a monotone field with gamma < 1/L cannot blow up; if the
        // residual still explodes the Lipschitz estimate was too optimistic.
        if residual > 1e4 * first_residual && residual > 1.0 {
            gamma *= 0.5;
            continue;
        }
        field(&mid, &mut fmid);
        for i in 0..kappa {
            next[i] = x[i] - gamma * fmid[i];
        }
        feasible.project(&shape, &mut next);
        std::mem::swap(&mut x, &mut next);
    }

    let objective = objective_flat(traj, &x, link, &weights);
    Ok(FitResult {
        beta_hat: ParamVector::from_flat(shape, x)?,
        iterations: iters,
        converged,
        residual,
        objective,
        objective_trace: trace,
    })
}

fn jacobian_matvec_streaming(
    traj: &Trajectory,
    link: LinkFunction,
    x_ref: &[f64],
    v: &[f64],
    out: &mut [f64],
) {
    let n = traj.shape().state_dim();
    let n_steps = traj.num_steps();
    let acc = sum::chunked_sum_vec(n_steps, traj.shape().kappa(), |range, acc| {
        let mut z = vec![0.0; n];
        let mut hv = vec![0.0; n];
        for i in range {
            let (w, _) = traj.step(i + 1);
            w.transpose_apply_flat(x_ref, &mut z);
            w.transpose_apply_flat(v, &mut hv);
            for (h, &zr) in hv.iter_mut().zip(z.iter()) {
                *h *= link.derivative(zr);
            }
            w.apply_scaled_add(&hv, 1.0, acc);
        }
    });
    let scale = 1.0 / n_steps as f64;
    for (o, a) in out.iter_mut().zip(acc.iter()) {
        *o = a * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RegressorWindow;

    fn shape(l: usize, d: usize, mu: usize) -> ModelShape {
        ModelShape::new(l, d, mu).unwrap()
    }

    fn traj(shape: ModelShape, states: Vec<Vec<f64>>) -> Trajectory {
        Trajectory::new(shape, states).unwrap()
    }

    /// Densified regressor for oracle computations: column j is H e_j.
    fn dense_regressor(w: &RegressorWindow<'_>) -> Vec<Vec<f64>> {
        let n = w.shape().state_dim();
        (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                w.apply(&e)
            })
            .collect()
    }

    fn field_dense_oracle(
        traj: &Trajectory,
        x: &[f64],
        link: LinkFunction,
        weights: &Weights,
    ) -> Vec<f64> {
        let shape = traj.shape();
        let kappa = shape.kappa();
        let n = shape.state_dim();
        let n_steps = traj.num_steps();
        let mut out = vec![0.0; kappa];
        for t in 1..=n_steps {
            let (w, zeta) = traj.step(t);
            let cols = dense_regressor(&w);
            // H^T x by explicit dot products with columns.
            let mut z = vec![0.0; n];
            for j in 0..n {
                z[j] = cols[j].iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            }
            let wt = weights.inv(t - 1);
            for j in 0..n {
                let r = (link.value(z[j]) - zeta[j]) * wt;
                for i in 0..kappa {
                    out[i] += cols[j][i] * r;
                }
            }
        }
        for v in &mut out {
            *v /= n_steps as f64;
        }
        out
    }

    #[test]
    fn field_matches_two_step_worked_example() {
        // d = L = 1, states (t=0,1,2) = 1, 2, 0; x = (0.5, 0.5).
        let sh = shape(1, 1, 1);
        let tr = traj(sh, vec![vec![1.0], vec![2.0], vec![0.0]]);
        let x = ParamVector::from_flat(sh, vec![0.5, 0.5]).unwrap();
        let f = empirical_field(&tr, &x, LinkFunction::Identity, &Weights::Uniform).unwrap();
        assert!((f[0] - 0.25).abs() <= 1e-15);
        assert!((f[1] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn field_matches_dense_oracle_all_links() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..60 {
            let sh = shape(rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=2));
            let n = sh.state_dim();
            let n_states = sh.memory() + rng.gen_range(1..=6);
            let states: Vec<Vec<f64>> = (0..n_states)
                .map(|_| (0..n).map(|_| rng.gen_range(0..5) as f64).collect())
                .collect();
            let tr = traj(sh, states);
            let x: Vec<f64> = (0..sh.kappa()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let weights = if trial % 2 == 0 {
                Weights::Uniform
            } else {
                Weights::PerStep(
                    (0..tr.num_steps()).map(|_| rng.gen_range(0.5..2.0)).collect(),
                )
            };
            for link in [LinkFunction::Identity, LinkFunction::Sigmoid, LinkFunction::Exp] {
                let xp = ParamVector::from_flat(sh, x.clone()).unwrap();
                let got = empirical_field(&tr, &xp, link, &weights).unwrap();
                let want = field_dense_oracle(&tr, &x, link, &weights);
                for (g, w) in got.iter().zip(want.iter()) {
                    assert!((g - w).abs() <= 1e-12, "trial {trial} {link:?}");
                }
            }
        }
    }

    #[test]
    fn field_is_gradient_of_objective() {
        // Central differences at h = 1e-6, relative tolerance 1e-6.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-6;
        for link in [LinkFunction::Identity, LinkFunction::Sigmoid, LinkFunction::Exp] {
            for _ in 0..5 {
                let sh = shape(2, 2, 1);
                let n = sh.state_dim();
                let states: Vec<Vec<f64>> = (0..sh.memory() + 5)
                    .map(|_| (0..n).map(|_| rng.gen_range(0..4) as f64).collect())
                    .collect();
                let tr = traj(sh, states);
                let x: Vec<f64> = (0..sh.kappa()).map(|_| rng.gen_range(-0.4..0.4)).collect();
                let xp = ParamVector::from_flat(sh, x.clone()).unwrap();
                let grad =
                    empirical_field(&tr, &xp, link, &Weights::Uniform).unwrap();
                for j in 0..sh.kappa() {
                    let mut xp_h = x.clone();
                    xp_h[j] += h;
                    let mut xm_h = x.clone();
                    xm_h[j] -= h;
                    let fp = objective_value(
                        &tr,
                        &ParamVector::from_flat(sh, xp_h).unwrap(),
                        link,
                        &Weights::Uniform,
                    )
                    .unwrap();
                    let fm = objective_value(
                        &tr,
                        &ParamVector::from_flat(sh, xm_h).unwrap(),
                        link,
                        &Weights::Uniform,
                    )
                    .unwrap();
                    let num = (fp - fm) / (2.0 * h);
                    let denom = 1.0f64.max(grad[j].abs());
                    assert!(
                        (num - grad[j]).abs() / denom <= 1e-6,
                        "{link:?} coord {j}: numeric {num} vs {}",
                        grad[j]
                    );
                }
            }
        }
    }

    #[test]
    fn gram_system_agrees_with_streaming_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let sh = shape(2, 2, 1);
        let n = sh.state_dim();
        let states: Vec<Vec<f64>> = (0..sh.memory() + 40)
            .map(|_| (0..n).map(|_| rng.gen_range(0..6) as f64).collect())
            .collect();
        let tr = traj(sh, states);
        let sys = assemble_ls_system(&tr, &Weights::Uniform).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..sh.kappa()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = vec![0.0; sh.kappa()];
            sys.grad(&x, &mut g);
            let f = field_flat(&tr, &x, LinkFunction::Identity, &Weights::Uniform);
            for (a, b) in g.iter().zip(f.iter()) {
                assert!((a - b).abs() <= 1e-10);
            }
            // Values agree too (same constant convention).
            let lhs = sys.value(&x);
            let rhs = ls_value_streaming(&tr, &x);
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn ls_fit_matches_normal_equations() {
        // Unconstrained 2x2 system solved in closed form.
        let sh = shape(1, 1, 1);
        let tr = traj(
            sh,
            vec![vec![1.0], vec![3.0], vec![0.0], vec![2.0], vec![1.0]],
        );
        let sys = assemble_ls_system(&tr, &Weights::Uniform).unwrap();
        let (g, h) = (&sys.gram, &sys.linear);
        let det = g[0] * g[3] - g[1] * g[2];
        assert!(det.abs() > 1e-12);
        let want = [
            (h[0] * g[3] - h[1] * g[1]) / det,
            (g[0] * h[1] - g[2] * h[0]) / det,
        ];
        let cfg = FitConfig {
            tol: 1e-12,
            ..FitConfig::default()
        };
        let fit = fit_least_squares(&tr, &FeasibleSet::Unconstrained, &cfg).unwrap();
        assert!(fit.converged);
        for (got, want) in fit.beta_hat.as_flat().iter().zip(want.iter()) {
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn ls_fit_objective_is_monotone_under_backtracking() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let sh = shape(2, 2, 1);
        let n = sh.state_dim();
        let states: Vec<Vec<f64>> = (0..sh.memory() + 60)
            .map(|_| (0..n).map(|_| rng.gen_range(0..5) as f64).collect())
            .collect();
        let tr = traj(sh, states);
        let cfg = FitConfig {
            record_trace: true,
            tol: 1e-11,
            ..FitConfig::default()
        };
        let set = FeasibleSet::BoxRowSum {
            a_cap: 1.1,
            b_cap: 0.55,
        };
        let fit = fit_least_squares(&tr, &set, &cfg).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()));
        }
        assert!(set.contains(&sh, fit.beta_hat.as_flat(), 1e-9));
    }

    #[test]
    fn ls_fit_recovers_noiseless_linear_dynamics() {
        // Real-valued states evolving exactly as the conditional mean: the
        // field has a root at the truth and the fit should find it.
        let sh = shape(2, 1, 1);
        let mut truth = ParamVector::zeros(sh);
        truth.set_base(0, 0.4);
        truth.set_base(1, 0.2);
        truth.set_lag(1, 0, 0, 0.3);
        truth.set_lag(1, 0, 1, 0.1);
        truth.set_lag(1, 1, 0, 0.2);
        truth.set_lag(1, 1, 1, 0.25);
        let mut tr = traj(sh, vec![vec![2.0, 0.5]]);
        for t in 1..=60 {
            let w = tr.window(t);
            let z = w.transpose_apply(&truth);
            tr.push_state(z).unwrap();
        }
        let cfg = FitConfig {
            tol: 1e-13,
            max_iters: 200_000,
            ..FitConfig::default()
        };
        let fit = fit_least_squares(&tr, &FeasibleSet::NonnegativeOnly, &cfg).unwrap();
        let err = sup_diff(fit.beta_hat.as_flat(), truth.as_flat());
        assert!(err <= 1e-6, "recovery error {err}");
    }

    #[test]
    fn first_order_optimality_at_constrained_solution() {
        // <grad, x - x_hat> >= -1e-6 for sampled feasible x.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let sh = shape(2, 1, 1);
        let n = sh.state_dim();
        let states: Vec<Vec<f64>> = (0..sh.memory() + 50)
            .map(|_| (0..n).map(|_| rng.gen_range(0..6) as f64).collect())
            .collect();
        let tr = traj(sh, states);
        let set = FeasibleSet::BoxRowSum {
            a_cap: 0.3,
            b_cap: 0.2,
        };
        let cfg = FitConfig {
            tol: 1e-12,
            ..FitConfig::default()
        };
        let fit = fit_least_squares(&tr, &set, &cfg).unwrap();
        let g = field_flat(
            &tr,
            fit.beta_hat.as_flat(),
            LinkFunction::Identity,
            &Weights::Uniform,
        );
        for _ in 0..200 {
            let mut x: Vec<f64> = (0..sh.kappa()).map(|_| rng.gen_range(-0.5..0.8)).collect();
            set.project(&sh, &mut x);
            let inner: f64 = g
                .iter()
                .zip(x.iter().zip(fit.beta_hat.as_flat().iter()))
                .map(|(gi, (xi, bi))| gi * (xi - bi))
                .sum();
            assert!(inner >= -1e-6, "optimality violated: {inner}");
        }
    }

    #[test]
    fn extragradient_solves_noiseless_sigmoid() {
        // States equal to sigmoid means exactly; the field root is the truth.
        let sh = shape(1, 2, 1);
        let mut truth = ParamVector::zeros(sh);
        truth.set_base(0, 0.5);
        truth.set_lag(1, 0, 0, 0.3);
        truth.set_lag(2, 0, 0, 0.15);
        let mut tr = traj(sh, vec![vec![0.6], vec![0.3]]);
        for t in 1..=80 {
            let w = tr.window(t);
            let z = w.transpose_apply(&truth);
            tr.push_state(z.iter().map(|&v| LinkFunction::Sigmoid.value(v)).collect())
                .unwrap();
        }
        let set = FeasibleSet::BoxRowSum {
            a_cap: 1.0,
            b_cap: 0.9,
        };
        let cfg = FitConfig {
            tol: 1e-10,
            max_iters: 200_000,
            ..FitConfig::default()
        };
        let fit = fit_vi_extragradient(&tr, LinkFunction::Sigmoid, &set, &cfg).unwrap();
        assert!(fit.converged);
        let f = field_flat(
            &tr,
            fit.beta_hat.as_flat(),
            LinkFunction::Sigmoid,
            &Weights::Uniform,
        );
        let fnorm = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(fnorm <= 1e-6, "field norm {fnorm}");
    }

    #[test]
    fn extragradient_identity_agrees_with_ls() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let sh = shape(2, 1, 1);
        let n = sh.state_dim();
        let states: Vec<Vec<f64>> = (0..sh.memory() + 50)
            .map(|_| (0..n).map(|_| rng.gen_range(0..5) as f64).collect())
            .collect();
        let tr = traj(sh, states);
        let set = FeasibleSet::BoxRowSum {
            a_cap: 1.0,
            b_cap: 0.6,
        };
        let cfg = FitConfig {
            tol: 1e-12,
            max_iters: 300_000,
            ..FitConfig::default()
        };
        let a = fit_least_squares(&tr, &set, &cfg).unwrap();
        let b = fit_vi_extragradient(&tr, LinkFunction::Identity, &set, &cfg).unwrap();
        assert!(sup_diff(a.beta_hat.as_flat(), b.beta_hat.as_flat()) <= 1e-6);
    }

    #[test]
    fn modulus_rank_deficient_example_is_zero() {
        // Single step, single lag count 1: Gram = [[1,1],[1,1]], lambda_min 0.
        let sh = shape(1, 1, 1);
        let tr = traj(sh, vec![vec![1.0], vec![2.0]]);
        let m = monotonicity_modulus(
            &tr,
            LinkFunction::Identity,
            &FeasibleSet::Unconstrained,
            &Weights::Uniform,
        )
        .unwrap();
        assert!(m.abs() <= 1e-12, "lambda_min {m}");
    }

    #[test]
    fn modulus_positive_for_varied_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let sh = shape(1, 1, 1);
        let states: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.gen_range(0..4) as f64]).collect();
        let tr = traj(sh, states);
        let m = monotonicity_modulus(
            &tr,
            LinkFunction::Identity,
            &FeasibleSet::Unconstrained,
            &Weights::Uniform,
        )
        .unwrap();
        assert!(m > 1e-3, "lambda_min {m}");
    }

    #[test]
    fn link_moduli_respect_reachable_ranges() {
        let sh = shape(1, 1, 1);
        let tr = traj(sh, vec![vec![3.0], vec![1.0]]);
        let set = FeasibleSet::BoxRowSum {
            a_cap: 1.0,
            b_cap: 0.5,
        };
        assert_eq!(
            link_moduli(&tr, LinkFunction::Identity, &set).unwrap(),
            vec![1.0]
        );
        // Sigmoid: inf of derivative over [0, 1 + 0.5*3] = sigma'(2.5).
        let got = link_moduli(&tr, LinkFunction::Sigmoid, &set).unwrap();
        assert!((got[0] - LinkFunction::Sigmoid.derivative(2.5)).abs() <= 1e-15);
        // Exp on a set reaching -inf predictors has no positive lower bound.
        assert!(matches!(
            link_moduli(&tr, LinkFunction::Exp, &FeasibleSet::Unconstrained),
            Err(EstimatorError::ModulusUnavailable(_))
        ));
        // Exp on nonnegative predictors: inf e^z = e^0.
        assert_eq!(
            link_moduli(&tr, LinkFunction::Exp, &FeasibleSet::NonnegativeOnly).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn recovery_bound_formula_and_validation() {
        let b = recovery_error_bound(0.02, 0.5, 0.125).unwrap();
        assert!((b - 0.02 / 0.25).abs() <= 1e-15);
        assert!(recovery_error_bound(0.02, 0.0, 0.1).is_err());
        assert!(recovery_error_bound(-1.0, 0.1, 0.1).is_err());
        let b2 = recovery_bound_l2(0.01, 0.4, 4).unwrap();
        assert!((b2 - 0.01 / (0.4 * 0.1f64).sqrt()).abs() <= 1e-15);
    }

    #[test]
    fn field_is_bitwise_thread_count_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let sh = shape(2, 2, 1);
        let n = sh.state_dim();
        let states: Vec<Vec<f64>> = (0..sh.memory() + 9000)
            .map(|_| (0..n).map(|_| rng.gen_range(0..5) as f64).collect())
            .collect();
        let tr = traj(sh, states);
        let x: Vec<f64> = (0..sh.kappa()).map(|_| rng.gen_range(0.0..0.3)).collect();
        let xp = ParamVector::from_flat(sh, x).unwrap();
        let run =
            || empirical_field(&tr, &xp, LinkFunction::Identity, &Weights::Uniform).unwrap();
        let base = run();
        for threads in [1usize, 3] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let got = pool.install(run);
            for (a, b) in got.iter().zip(base.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn weight_validation_errors() {
        let sh = shape(1, 1, 1);
        let tr = traj(sh, vec![vec![1.0], vec![2.0], vec![0.0]]);
        let x = ParamVector::zeros(sh);
        assert!(matches!(
            empirical_field(
                &tr,
                &x,
                LinkFunction::Identity,
                &Weights::PerStep(vec![1.0])
            ),
            Err(EstimatorError::BadWeights { expected: 2, got: 1 })
        ));
        assert!(matches!(
            empirical_field(
                &tr,
                &x,
                LinkFunction::Identity,
                &Weights::PerStep(vec![1.0, 0.0])
            ),
            Err(EstimatorError::NonPositiveWeight)
        ));
    }
}
