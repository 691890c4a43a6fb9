//! Dense two-phase tableau simplex for the small linear programs behind
//! coordinate-interval extraction.
//!
//! Problems here have at most a few hundred variables and rows, so a dense
//! tableau with Dantzig pricing (falling back to Bland's rule when progress
//! stalls, which rules out cycling) is simpler and entirely adequate. Every
//! solve is verified a posteriori: primal residuals in the original problem
//! and dual feasibility of the final reduced costs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("infeasible: phase-1 objective {0} > 0")]
    Infeasible(f64),
    #[error("objective is unbounded below")]
    Unbounded,
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
    #[error("invalid program: {0}")]
    InvalidArgument(String),
    #[error("solution failed verification: {0}")]
    Verification(String),
}

/// `min c.x` subject to `rows[i].0 . x <= rows[i].1` and `lower <= x <= upper`
/// (entries may be infinite).
#[derive(Debug, Clone)]
pub struct LinearProgram {
    n: usize,
    c: Vec<f64>,
    rows: Vec<(Vec<f64>, f64)>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;

impl LinearProgram {
    pub fn minimize(c: Vec<f64>) -> Self {
        let n = c.len();
        LinearProgram {
            n,
            c,
            rows: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn bound(&mut self, j: usize, lo: f64, hi: f64) -> &mut Self {
        assert!(j < self.n && lo <= hi, "bad bound for variable {j}");
        self.lower[j] = lo;
        self.upper[j] = hi;
        self
    }

    /// `coeffs . x <= rhs`.
    pub fn leq(&mut self, coeffs: Vec<f64>, rhs: f64) -> &mut Self {
        assert_eq!(coeffs.len(), self.n);
        self.rows.push((coeffs, rhs));
        self
    }

    /// `coeffs . x >= rhs`.
    pub fn geq(&mut self, coeffs: Vec<f64>, rhs: f64) -> &mut Self {
        let neg: Vec<f64> = coeffs.iter().map(|v| -v).collect();
        self.leq(neg, -rhs)
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        if self.n == 0 {
            return Err(LpError::InvalidArgument("no variables".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.c) || self.rows.iter().any(|(a, b)| !finite(a) || !b.is_finite()) {
            return Err(LpError::InvalidArgument(
                "coefficients must be finite".into(),
            ));
        }

        // --- transform to standard form: min c'.y, A y = b, y >= 0 ---
        // Finite lower bounds are shifted out; variables without one are
        // split into a positive and a negative part. Finite upper bounds
        // become extra rows.
        #[derive(Clone, Copy)]
        enum VarMap {
            Shifted { col: usize, shift: f64 },
            Split { pos: usize, neg: usize },
        }
        let mut maps = Vec::with_capacity(self.n);
        let mut ncols = 0usize;
        for j in 0..self.n {
            if self.lower[j].is_finite() {
                maps.push(VarMap::Shifted {
                    col: ncols,
                    shift: self.lower[j],
                });
                ncols += 1;
            } else {
                maps.push(VarMap::Split {
                    pos: ncols,
                    neg: ncols + 1,
                });
                ncols += 2;
            }
        }
        let mut std_rows: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut push_row = |coeffs: &[f64], rhs: f64| {
            let mut row = vec![0.0; ncols];
            let mut adj = rhs;
            for (j, &a) in coeffs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                match maps[j] {
                    VarMap::Shifted { col, shift } => {
                        row[col] += a;
                        adj -= a * shift;
                    }
                    VarMap::Split { pos, neg } => {
                        row[pos] += a;
                        row[neg] -= a;
                    }
                }
            }
            std_rows.push((row, adj));
        };
        for (a, b) in &self.rows {
            push_row(a, *b);
        }
        for j in 0..self.n {
            if self.upper[j].is_finite() {
                let mut e = vec![0.0; self.n];
                e[j] = 1.0;
                push_row(&e, self.upper[j]);
            }
        }
        let m = std_rows.len();

        // Tableau columns: structural | slack (one per row) | artificial
        // (rows whose rhs was negative). Last column holds the rhs.
        let mut art_of_row: Vec<Option<usize>> = vec![None; m];
        let mut n_art = 0usize;
        for (i, (_, b)) in std_rows.iter().enumerate() {
            if *b < 0.0 {
                art_of_row[i] = Some(n_art);
                n_art += 1;
            }
        }
        let total = ncols + m + n_art;
        let width = total + 1;
        let mut t = vec![vec![0.0; width]; m + 1];
        let mut basis = vec![0usize; m];
        for (i, (row, b)) in std_rows.iter().enumerate() {
            let sign = if *b < 0.0 { -1.0 } else { 1.0 };
            for (j, &v) in row.iter().enumerate() {
                t[i][j] = sign * v;
            }
            t[i][ncols + i] = sign; // slack
            t[i][total] = sign * b;
            if let Some(k) = art_of_row[i] {
                t[i][ncols + m + k] = 1.0;
                basis[i] = ncols + m + k;
            } else {
                basis[i] = ncols + i;
            }
        }

        let max_iters = 200 * (m + total + 1);

        // --- phase 1: drive artificials to zero ---
        if n_art > 0 {
            for j in 0..n_art {
                t[m][ncols + m + j] = 1.0;
            }
            // Make reduced costs of the artificial basis zero.
            for i in 0..m {
                if art_of_row[i].is_some() {
                    for j in 0..width {
                        t[m][j] -= t[i][j];
                    }
                }
            }
            run_simplex(&mut t, &mut basis, total, max_iters, |_| true)?;
            let p1 = -t[m][total];
            if p1 > FEAS_TOL {
                return Err(LpError::Infeasible(p1));
            }
            // Pivot any artificial still in the basis out on a structural or
            // slack column; a fully zero row is redundant and can stay (the
            // artificial is banned from re-entering below).
            for i in 0..m {
                if basis[i] >= ncols + m {
                    if let Some(j) = (0..ncols + m).find(|&j| t[i][j].abs() > PIVOT_TOL) {
                        pivot(&mut t, i, j);
                        basis[i] = j;
                    }
                }
            }
        }

        // --- phase 2 ---
        for v in t[m].iter_mut() {
            *v = 0.0;
        }
        for j in 0..self.n {
            match maps[j] {
                VarMap::Shifted { col, .. } => t[m][col] += self.c[j],
                VarMap::Split { pos, neg } => {
                    t[m][pos] += self.c[j];
                    t[m][neg] -= self.c[j];
                }
            }
        }
        for i in 0..m {
            let cb = t[m][basis[i]];
            if cb != 0.0 {
                for j in 0..width {
                    t[m][j] -= cb * t[i][j];
                }
            }
        }
        let allowed = |j: usize| j < ncols + m; // artificials stay out
        run_simplex(&mut t, &mut basis, total, max_iters, allowed)?;

        // Dual feasibility of the final reduced costs.
        for j in 0..ncols + m {
            if t[m][j] < -FEAS_TOL {
                return Err(LpError::Verification(format!(
                    "reduced cost {} on column {j}",
                    t[m][j]
                )));
            }
        }

        // --- recover the original variables ---
        let mut y = vec![0.0; total];
        for i in 0..m {
            y[basis[i]] = t[i][total];
        }
        let mut x = vec![0.0; self.n];
        for j in 0..self.n {
            x[j] = match maps[j] {
                VarMap::Shifted { col, shift } => shift + y[col],
                VarMap::Split { pos, neg } => y[pos] - y[neg],
            };
        }
        let objective: f64 = self.c.iter().zip(&x).map(|(c, v)| c * v).sum();

        // Primal residuals in the original problem.
        for (i, (a, b)) in self.rows.iter().enumerate() {
            let lhs: f64 = a.iter().zip(&x).map(|(c, v)| c * v).sum();
            if lhs > b + FEAS_TOL * (1.0 + b.abs()) {
                return Err(LpError::Verification(format!(
                    "row {i} violated: {lhs} > {b}"
                )));
            }
        }
        for j in 0..self.n {
            if x[j] < self.lower[j] - FEAS_TOL * (1.0 + self.lower[j].abs())
                || x[j] > self.upper[j] + FEAS_TOL * (1.0 + self.upper[j].abs())
            {
                return Err(LpError::Verification(format!(
                    "variable {j} = {} outside [{}, {}]",
                    x[j], self.lower[j], self.upper[j]
                )));
            }
        }
        Ok(LpSolution { x, objective })
    }
}

fn pivot(t: &mut [Vec<f64>], r: usize, j: usize) {
    let width = t[0].len();
    let piv = t[r][j];
    for v in t[r].iter_mut() {
        *v /= piv;
    }
    for i in 0..t.len() {
        if i == r {
            continue;
        }
        let f = t[i][j];
        if f != 0.0 {
            for k in 0..width {
                let d = f * t[r][k];
                t[i][k] -= d;
            }
            t[i][j] = 0.0;
        }
    }
    t[r][j] = 1.0;
}

/// Minimizing simplex on a tableau whose last row holds reduced costs and
/// last column the rhs. Dantzig pricing, switching to Bland's rule after
/// `m + total` iterations without objective progress.
fn run_simplex(
    t: &mut [Vec<f64>],
    basis: &mut [usize],
    total: usize,
    max_iters: usize,
    allowed: impl Fn(usize) -> bool,
) -> Result<(), LpError> {
    let m = t.len() - 1;
    let stall_limit = m + total + 8;
    let mut last_obj = -t[m][total];
    let mut stalled = 0usize;
    for _ in 0..max_iters {
        let bland = stalled > stall_limit;
        let mut enter: Option<usize> = None;
        if bland {
            for j in 0..total {
                if allowed(j) && t[m][j] < -COST_TOL {
                    enter = Some(j);
                    break;
                }
            }
        } else {
            let mut best = -COST_TOL;
            for j in 0..total {
                if allowed(j) && t[m][j] < best {
                    best = t[m][j];
                    enter = Some(j);
                }
            }
        }
        let Some(j) = enter else {
            return Ok(());
        };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[i][j] > PIVOT_TOL {
                let ratio = t[i][total] / t[i][j];
                let better = match leave {
                    None => true,
                    Some((li, lr)) => {
                        ratio < lr - 1e-12
                            || (ratio < lr + 1e-12
                                && (if bland {
                                    basis[i] < basis[li]
                                } else {
                                    t[i][j] > t[li][j]
                                }))
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let Some((r, _)) = leave else {
            return Err(LpError::Unbounded);
        };
        pivot(t, r, j);
        basis[r] = j;
        let obj = -t[m][total];
        if obj < last_obj - 1e-12 * (1.0 + last_obj.abs()) {
            last_obj = obj;
            stalled = 0;
        } else {
            stalled += 1;
        }
    }
    Err(LpError::IterationLimit(max_iters))
}
