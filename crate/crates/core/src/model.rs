//! Model primitives: parameter layout, link functions, feasible sets,
//! trajectories, and the implicit lagged-regressor operator.
//!
//! Parameters consist of a birth-rate vector `beta0` (one entry per location
//! channel) and `d` excitation matrices `beta_s`, where `beta_s[k][l]` is the
//! influence of channel `l`'s count at time `t - s` on channel `k`'s mean at
//! time `t`. The flat layout is `[beta0, lag 1 row-major, ..., lag d]`, for a
//! total of `kappa = n + d*n^2` coordinates with `n = mu * L`.
//!
//! The per-step regressor is a `kappa x n` matrix determined by the `d`
//! preceding states. It is never materialized: `RegressorWindow` exposes its
//! action (`apply`) and adjoint action (`transpose_apply`) directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{context}: non-finite value")]
    NonFinite { context: &'static str },
    #[error("{context}: negative value {value}")]
    Negative { context: &'static str, value: f64 },
    #[error("trajectory needs at least d pre-sample states")]
    TooShort,
}

/// Dimensions of the process: `L` locations, `mu` marks per location
/// (1 for plain counts), memory depth `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    l: usize,
    d: usize,
    mu: usize,
}

/// Identifies one flat parameter coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coord {
    /// Birth-rate entry for channel `k`.
    Base { k: usize },
    /// Excitation entry: influence of channel `l` at lag `s` on channel `k`.
    Lag { s: usize, k: usize, l: usize },
}

impl ModelShape {
    pub fn new(l: usize, d: usize, mu: usize) -> Result<Self, ModelError> {
        if l == 0 || d == 0 || mu == 0 {
            return Err(ModelError::InvalidShape(format!(
                "L, d, mu must be positive (got L={l}, d={d}, mu={mu})"
            )));
        }
        Ok(ModelShape { l, d, mu })
    }

    pub fn locations(&self) -> usize {
        self.l
    }

    pub fn memory(&self) -> usize {
        self.d
    }

    pub fn marks(&self) -> usize {
        self.mu
    }

    /// Number of state channels `n = mu * L`.
    pub fn state_dim(&self) -> usize {
        self.mu * self.l
    }

    /// Total parameter count `n + d*n^2`.
    pub fn kappa(&self) -> usize {
        let n = self.state_dim();
        n + self.d * n * n
    }

    pub fn flat_base(&self, k: usize) -> usize {
        debug_assert!(k < self.state_dim());
        k
    }

    /// Flat index of the lag-`s` entry `(k, l)`, `1 <= s <= d`.
    pub fn flat_lag(&self, s: usize, k: usize, l: usize) -> usize {
        let n = self.state_dim();
        debug_assert!(s >= 1 && s <= self.d && k < n && l < n);
        n + (s - 1) * n * n + k * n + l
    }

    pub fn coord(&self, flat: usize) -> Coord {
        let n = self.state_dim();
        if flat < n {
            Coord::Base { k: flat }
        } else {
            let r = flat - n;
            let s = r / (n * n) + 1;
            let within = r % (n * n);
            Coord::Lag {
                s,
                k: within / n,
                l: within % n,
            }
        }
    }
}

/// Componentwise monotone link applied to the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkFunction {
    /// `Phi(z) = z`; turns estimation into least squares.
    Identity,
    /// `Phi(z) = 1 / (1 + exp(-z))`, for Bernoulli-style marks.
    Sigmoid,
    /// `Phi(z) = exp(z)`.
    Exp,
}

impl LinkFunction {
    pub fn value(&self, z: f64) -> f64 {
        match self {
            LinkFunction::Identity => z,
            LinkFunction::Sigmoid => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            LinkFunction::Exp => z.exp(),
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            LinkFunction::Identity => 1.0,
            LinkFunction::Sigmoid => {
                let v = self.value(z);
                v * (1.0 - v)
            }
            LinkFunction::Exp => z.exp(),
        }
    }

    /// Convex potential whose derivative is the link: `z^2/2`, `softplus`,
    /// `exp`. Its existence makes the sample field a gradient field.
    pub fn potential(&self, z: f64) -> f64 {
        match self {
            LinkFunction::Identity => 0.5 * z * z,
            // log(1 + e^z), computed without overflow for large |z|.
            LinkFunction::Sigmoid => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            LinkFunction::Exp => z.exp(),
        }
    }
}

/// Feasible parameter set for estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FeasibleSet {
    /// Nonnegative entries; `beta0[k] <= a_cap`; for every channel `k` the
    /// total excitation weight `sum_{s,l} beta_s[k][l] <= b_cap`.
    BoxRowSum { a_cap: f64, b_cap: f64 },
    /// Nonnegative entries only (not compact).
    NonnegativeOnly,
    /// All of `R^kappa`.
    Unconstrained,
}

impl FeasibleSet {
    pub fn is_bounded(&self) -> bool {
        matches!(self, FeasibleSet::BoxRowSum { .. })
    }

    pub fn contains(&self, shape: &ModelShape, x: &[f64], tol: f64) -> bool {
        let n = shape.state_dim();
        match *self {
            FeasibleSet::Unconstrained => true,
            FeasibleSet::NonnegativeOnly => x.iter().all(|&v| v >= -tol),
            FeasibleSet::BoxRowSum { a_cap, b_cap } => {
                if x.iter().any(|&v| v < -tol) {
                    return false;
                }
                if x[..n].iter().any(|&v| v > a_cap + tol) {
                    return false;
                }
                (0..n).all(|k| row_sum(shape, x, k) <= b_cap + tol)
            }
        }
    }

    /// Range of one linear-predictor coordinate over the set, given the
    /// window: `[0, a_cap + b_cap * max_lag]` for the capped set (the maximum
    /// puts all excitation weight on the largest lag entry; every channel has
    /// the same caps, so the range is channel-independent). Unbounded sets
    /// yield infinite endpoints.
    pub fn predictor_bounds(&self, w: &RegressorWindow<'_>) -> (f64, f64) {
        match *self {
            FeasibleSet::BoxRowSum { a_cap, b_cap } => {
                (0.0, a_cap + b_cap * w.max_lag_entry())
            }
            FeasibleSet::NonnegativeOnly => (0.0, f64::INFINITY),
            FeasibleSet::Unconstrained => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Euclidean projection onto the set, in place.
    ///
    /// Decomposes coordinatewise over channels: `beta0[k]` clamps to
    /// `[0, a_cap]`; the `d*n` excitation entries of channel `k` project onto
    /// the capped simplex `{y >= 0, sum y <= b_cap}`.
    pub fn project(&self, shape: &ModelShape, x: &mut [f64]) {
        debug_assert_eq!(x.len(), shape.kappa());
        let n = shape.state_dim();
        match *self {
            FeasibleSet::Unconstrained => {}
            FeasibleSet::NonnegativeOnly => {
                for v in x.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            FeasibleSet::BoxRowSum { a_cap, b_cap } => {
                for v in x[..n].iter_mut() {
                    *v = v.clamp(0.0, a_cap);
                }
                let mut row = vec![0.0; shape.memory() * n];
                for k in 0..n {
                    gather_row(shape, x, k, &mut row);
                    project_capped_simplex(&mut row, b_cap);
                    scatter_row(shape, x, k, &row);
                }
            }
        }
    }
}

/// Sum of the excitation entries feeding channel `k`.
pub fn row_sum(shape: &ModelShape, x: &[f64], k: usize) -> f64 {
    let n = shape.state_dim();
    let mut acc = 0.0;
    for s in 1..=shape.memory() {
        let base = n + (s - 1) * n * n + k * n;
        for l in 0..n {
            acc += x[base + l];
        }
    }
    acc
}

fn gather_row(shape: &ModelShape, x: &[f64], k: usize, out: &mut [f64]) {
    let n = shape.state_dim();
    for s in 0..shape.memory() {
        let base = n + s * n * n + k * n;
        out[s * n..(s + 1) * n].copy_from_slice(&x[base..base + n]);
    }
}

fn scatter_row(shape: &ModelShape, x: &mut [f64], k: usize, row: &[f64]) {
    let n = shape.state_dim();
    for s in 0..shape.memory() {
        let base = n + s * n * n + k * n;
        x[base..base + n].copy_from_slice(&row[s * n..(s + 1) * n]);
    }
}

/// Euclidean projection onto `{y >= 0, sum y <= cap}`, in place.
///
/// Clips negatives; if the clipped sum still exceeds the cap, applies the
/// sort-based simplex threshold (the threshold is positive in that case, so
/// clipping first does not change the result).
pub fn project_capped_simplex(y: &mut [f64], cap: f64) {
    debug_assert!(cap >= 0.0);
    let mut sum = 0.0;
    for v in y.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
        sum += *v;
    }
    if sum <= cap {
        return;
    }
    let mut u: Vec<f64> = y.to_vec();
    u.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        acc += uj;
        let t = (acc - cap) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    for v in y.iter_mut() {
        *v = (*v - tau).max(0.0);
    }
}

/// Euclidean projection onto the l1 ball of the given radius: soft
/// thresholding with the exact sort-based threshold.
pub fn project_l1_ball(x: &mut [f64], radius: f64) {
    debug_assert!(radius >= 0.0);
    let norm: f64 = x.iter().map(|v| v.abs()).sum();
    if norm <= radius {
        return;
    }
    let mut u: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    u.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        acc += uj;
        let t = (acc - radius) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    for v in x.iter_mut() {
        *v = v.signum() * (v.abs() - tau).max(0.0);
    }
}

/// Structured parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    shape: ModelShape,
    flat: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(shape: ModelShape) -> Self {
        let flat = vec![0.0; shape.kappa()];
        ParamVector { shape, flat }
    }

    pub fn from_flat(shape: ModelShape, flat: Vec<f64>) -> Result<Self, ModelError> {
        if flat.len() != shape.kappa() {
            return Err(ModelError::DimensionMismatch {
                expected: shape.kappa(),
                got: flat.len(),
            });
        }
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite {
                context: "parameter vector",
            });
        }
        Ok(ParamVector { shape, flat })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn base(&self, k: usize) -> f64 {
        self.flat[self.shape.flat_base(k)]
    }

    pub fn lag(&self, s: usize, k: usize, l: usize) -> f64 {
        self.flat[self.shape.flat_lag(s, k, l)]
    }

    pub fn set_base(&mut self, k: usize, v: f64) {
        let i = self.shape.flat_base(k);
        self.flat[i] = v;
    }

    pub fn set_lag(&mut self, s: usize, k: usize, l: usize, v: f64) {
        let i = self.shape.flat_lag(s, k, l);
        self.flat[i] = v;
    }

    pub fn row_sum(&self, k: usize) -> f64 {
        row_sum(&self.shape, &self.flat, k)
    }
}

/// Flatten a structured parameter vector (identity on the internal layout;
/// kept as the documented packing entry point).
pub fn pack_params(p: &ParamVector) -> Vec<f64> {
    p.as_flat().to_vec()
}

/// Inverse of [`pack_params`]; validates length and finiteness.
pub fn unpack_params(shape: ModelShape, flat: &[f64]) -> Result<ParamVector, ModelError> {
    ParamVector::from_flat(shape, flat.to_vec())
}

/// Observed path: `d` pre-sample states followed by `N` responses.
///
/// `states[i]` is the state at time `i - d + 1`, so times run from `-d+1`
/// through `N`; the window feeding time `t` is `states[t-1 .. t+d-1]`
/// (oldest first).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    shape: ModelShape,
    states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(shape: ModelShape, states: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        if states.len() < shape.memory() {
            return Err(ModelError::TooShort);
        }
        for st in &states {
            validate_state(&shape, st)?;
        }
        Ok(Trajectory { shape, states })
    }

    /// All-zero pre-sample prefix, no responses yet.
    pub fn with_zero_history(shape: ModelShape) -> Self {
        let n = shape.state_dim();
        let states = vec![vec![0.0; n]; shape.memory()];
        Trajectory { shape, states }
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    /// Number of response steps `N`.
    pub fn num_steps(&self) -> usize {
        self.states.len() - self.shape.memory()
    }

    /// State at time `t`, `-d+1 <= t <= N`.
    pub fn state(&self, t: i64) -> &[f64] {
        let i = t + self.shape.memory() as i64 - 1;
        &self.states[i as usize]
    }

    /// Raw state storage (time `-d+1` first).
    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    /// Regressor window feeding time `t`, `1 <= t <= N + 1` (the `N + 1`
    /// window is what a one-step forecast from the end of the path uses).
    pub fn window(&self, t: usize) -> RegressorWindow<'_> {
        debug_assert!(t >= 1 && t <= self.num_steps() + 1);
        RegressorWindow {
            shape: self.shape,
            lags: &self.states[t - 1..t - 1 + self.shape.memory()],
        }
    }

    /// Window and realized response at time `t`, `1 <= t <= N`.
    pub fn step(&self, t: usize) -> (RegressorWindow<'_>, &[f64]) {
        (self.window(t), self.state(t as i64))
    }

    pub fn push_state(&mut self, st: Vec<f64>) -> Result<(), ModelError> {
        validate_state(&self.shape, &st)?;
        self.states.push(st);
        Ok(())
    }

    /// True when every state is a 0/1 vector with at most one nonzero entry
    /// per location block (categorical marks).
    pub fn is_categorical(&self) -> bool {
        let mu = self.shape.marks();
        self.states.iter().all(|st| {
            st.iter().all(|&v| v == 0.0 || v == 1.0)
                && st.chunks(mu).all(|b| b.iter().sum::<f64>() <= 1.0)
        })
    }
}

fn validate_state(shape: &ModelShape, st: &[f64]) -> Result<(), ModelError> {
    if st.len() != shape.state_dim() {
        return Err(ModelError::DimensionMismatch {
            expected: shape.state_dim(),
            got: st.len(),
        });
    }
    for &v in st {
        if !v.is_finite() {
            return Err(ModelError::NonFinite { context: "state" });
        }
        if v < 0.0 {
            return Err(ModelError::Negative {
                context: "state",
                value: v,
            });
        }
    }
    Ok(())
}

/// View of the `d` states feeding one time step (oldest first). Stands in for
/// the `kappa x n` regressor matrix `H_t`, whose explicit form is never built.
#[derive(Debug, Clone, Copy)]
pub struct RegressorWindow<'a> {
    shape: ModelShape,
    lags: &'a [Vec<f64>],
}

impl<'a> RegressorWindow<'a> {
    pub fn from_lags(shape: ModelShape, lags: &'a [Vec<f64>]) -> Result<Self, ModelError> {
        if lags.len() != shape.memory() {
            return Err(ModelError::DimensionMismatch {
                expected: shape.memory(),
                got: lags.len(),
            });
        }
        for st in lags {
            validate_state(&shape, st)?;
        }
        Ok(RegressorWindow { shape, lags })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    /// State at lag `s` (`1` = most recent), i.e. `state_{t-s}`.
    pub fn lag_state(&self, s: usize) -> &[f64] {
        debug_assert!(s >= 1 && s <= self.shape.memory());
        &self.lags[self.shape.memory() - s]
    }

    /// Adjoint action `H^T x`: the linear predictor
    /// `beta0 + sum_s beta_s * state_{t-s}` as an `n`-vector.
    pub fn transpose_apply(&self, x: &ParamVector) -> Vec<f64> {
        let mut out = vec![0.0; self.shape.state_dim()];
        self.transpose_apply_flat(x.as_flat(), &mut out);
        out
    }

    /// Flat-slice version of [`Self::transpose_apply`], writing into `out`.
    pub fn transpose_apply_flat(&self, x: &[f64], out: &mut [f64]) {
        let n = self.shape.state_dim();
        debug_assert_eq!(x.len(), self.shape.kappa());
        debug_assert_eq!(out.len(), n);
        out.copy_from_slice(&x[..n]);
        for s in 1..=self.shape.memory() {
            let v = self.lag_state(s);
            let block = n + (s - 1) * n * n;
            for k in 0..n {
                let row = &x[block + k * n..block + (k + 1) * n];
                let mut acc = 0.0;
                for (xr, vl) in row.iter().zip(v.iter()) {
                    acc += xr * vl;
                }
                out[k] += acc;
            }
        }
    }

    /// Forward action `H u` as a flat `kappa`-vector.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.shape.kappa()];
        self.apply_scaled_add(u, 1.0, &mut out);
        out
    }

    /// `acc += c * H u`. The base block receives `c*u`; the lag-`s` block
    /// receives the outer product `c * u (state_{t-s})^T`.
    pub fn apply_scaled_add(&self, u: &[f64], c: f64, acc: &mut [f64]) {
        let n = self.shape.state_dim();
        debug_assert_eq!(u.len(), n);
        debug_assert_eq!(acc.len(), self.shape.kappa());
        for k in 0..n {
            acc[k] += c * u[k];
        }
        for s in 1..=self.shape.memory() {
            let v = self.lag_state(s);
            let block = n + (s - 1) * n * n;
            for k in 0..n {
                let cu = c * u[k];
                if cu == 0.0 {
                    continue;
                }
                let row = &mut acc[block + k * n..block + (k + 1) * n];
                for (a, vl) in row.iter_mut().zip(v.iter()) {
                    *a += cu * vl;
                }
            }
        }
    }

    /// `H`'s row `flat` is `scale * e_k^T`; returns `(k, scale)`.
    /// Base rows have scale 1; the lag-`(s,k,l)` row has scale
    /// `state_{t-s}[l]`.
    pub fn row_structure(&self, flat: usize) -> (usize, f64) {
        match self.shape.coord(flat) {
            Coord::Base { k } => (k, 1.0),
            Coord::Lag { s, k, l } => (k, self.lag_state(s)[l]),
        }
    }

    /// Largest single lag entry in the window (0 for an empty-count window).
    pub fn max_lag_entry(&self) -> f64 {
        let mut m = 0.0;
        for st in self.lags {
            for &v in st {
                if v > m {
                    m = v;
                }
            }
        }
        m
    }

    /// `1 + sum_s ||state_{t-s}||_2^2`, the common diagonal of `H^T H`.
    /// (Columns of `H` have disjoint support outside the base block, so
    /// `H^T H` is this multiple of the identity.)
    pub fn gram_diagonal(&self) -> f64 {
        let mut q = 1.0;
        for st in self.lags {
            for &v in st {
                q += v * v;
            }
        }
        q
    }
}
