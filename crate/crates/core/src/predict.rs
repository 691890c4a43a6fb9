//! Multi-step count forecasting: conditional-mean recursions, calibrated
//! Poisson prediction intervals, rolling noncoverage tables, and the
//! test-window average-rate metrics (with simulated and seasonal baselines).

use crate::model::{LinkFunction, ModelError, ParamVector, RegressorWindow, Trajectory};
use crate::rng::{derive_stream, tag};
use crate::simulate::sampling;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal, Poisson};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("seasonal baseline undefined: no training time has phase {phase} of period {period}")]
    SeasonalUndefined { period: usize, phase: usize },
}

/// Conditional-mean forecast for `horizon` steps after step `origin`
/// (0 forecasts from the initial history alone). Unobserved future states
/// are replaced by their conditional means — exact for the identity link —
/// and intensities are clamped at zero.
pub fn conditional_mean(
    beta: &ParamVector,
    link: LinkFunction,
    traj: &Trajectory,
    origin: usize,
    horizon: usize,
) -> Result<Vec<Vec<f64>>, PredictError> {
    let shape = *beta.shape();
    if shape != *traj.shape() {
        return Err(PredictError::InvalidArgument(
            "parameter and trajectory shapes differ".into(),
        ));
    }
    if origin > traj.num_steps() {
        return Err(PredictError::InvalidArgument(format!(
            "origin {origin} beyond the {} observed steps",
            traj.num_steps()
        )));
    }
    if horizon == 0 {
        return Err(PredictError::InvalidArgument("horizon must be positive".into()));
    }
    let d = shape.memory();
    let mut lags: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            traj.state(origin as i64 - d as i64 + 1 + i as i64)
                .to_vec()
        })
        .collect();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let intensity: Vec<f64> = {
            let window = RegressorWindow::from_lags(shape, &lags)?;
            window
                .transpose_apply(beta)
                .iter()
                .map(|&z| link.value(z).max(0.0))
                .collect()
        };
        lags.remove(0);
        lags.push(intensity.clone());
        out.push(intensity);
    }
    Ok(out)
}

/// The previous observation, as a one-step baseline forecast for step `t`.
pub fn persistent_baseline(traj: &Trajectory, t: usize) -> &[f64] {
    traj.state(t as i64 - 1)
}

/// Seasonal baseline for absolute step `t`: the average of training states
/// (steps `1..=n_train`) sharing `t`'s phase modulo `period`.
pub fn seasonal_baseline(
    traj: &Trajectory,
    n_train: usize,
    period: usize,
    t: usize,
) -> Result<Vec<f64>, PredictError> {
    if period == 0 || n_train == 0 || n_train > traj.num_steps() {
        return Err(PredictError::InvalidArgument(format!(
            "need positive period and 1 <= n_train <= {}, got period={period} n_train={n_train}",
            traj.num_steps()
        )));
    }
    let phase = t % period;
    let n = traj.shape().state_dim();
    let mut acc = vec![0.0; n];
    let mut count = 0usize;
    for tp in 1..=n_train {
        if tp % period == phase {
            for (a, v) in acc.iter_mut().zip(traj.state(tp as i64)) {
                *a += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(PredictError::SeasonalUndefined { period, phase });
    }
    for a in acc.iter_mut() {
        *a /= count as f64;
    }
    Ok(acc)
}

/// Central Poisson interval: `lo` is the smallest count with
/// `CDF >= (1-level)/2` and `hi` the smallest with `CDF >= (1+level)/2`, so
/// the enclosed mass is at least `level`. Small rates walk the pmf
/// directly; large ones locate each endpoint from a normal-approximation
/// seed refined against the exact CDF.
pub fn poisson_interval(lambda: f64, level: f64) -> Result<(u64, u64), PredictError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(PredictError::InvalidArgument(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(PredictError::InvalidArgument(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    if lambda == 0.0 {
        return Ok((0, 0));
    }
    let lo_target = (1.0 - level) / 2.0;
    let hi_target = (1.0 + level) / 2.0;
    if lambda <= 100.0 {
        let mut p = (-lambda).exp();
        let mut cum = p;
        let mut k = 0u64;
        let mut lo: Option<u64> = None;
        let limit = (10.0 * lambda) as u64 + 200;
        loop {
            if lo.is_none() && cum >= lo_target {
                lo = Some(k);
            }
            if cum >= hi_target || k >= limit {
                return Ok((lo.unwrap_or(k), k));
            }
            k += 1;
            p *= lambda / k as f64;
            cum += p;
        }
    }
    let dist = Poisson::new(lambda).expect("validated");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let seeded = |target: f64| -> u64 {
        let z = normal.inverse_cdf(target);
        let mut k = (lambda + z * lambda.sqrt()).floor().max(0.0) as u64;
        while k > 0 && dist.cdf(k - 1) >= target {
            k -= 1;
        }
        while dist.cdf(k) < target {
            k += 1;
        }
        k
    };
    Ok((seeded(lo_target), seeded(hi_target)))
}

/// Empirical noncoverage of the level-`level` interval for `p`-step-ahead
/// forecasts, per horizon and location, over one shared set of target steps
/// (`p_max..=T`, so every horizon forecasts the same targets).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoncoverageTable {
    pub level: f64,
    /// Horizons `1..=p_max`.
    pub p_values: Vec<usize>,
    /// `rates[p-1][k]`: fraction of targets where the observed count at
    /// location-mark channel `k` fell outside the forecast interval.
    pub rates: Vec<Vec<f64>>,
    /// One-step noncoverage of the persistent baseline (the previous
    /// observation used as the intensity).
    pub persistent: Vec<f64>,
    /// Number of target steps behind every rate.
    pub targets: usize,
}

pub fn noncoverage_table(
    beta: &ParamVector,
    link: LinkFunction,
    traj: &Trajectory,
    p_max: usize,
    level: f64,
) -> Result<NoncoverageTable, PredictError> {
    let t_end = traj.num_steps();
    if p_max == 0 || p_max > t_end {
        return Err(PredictError::InvalidArgument(format!(
            "need 1 <= p_max <= {t_end}, got {p_max}"
        )));
    }
    let n = traj.shape().state_dim();
    let targets: Vec<usize> = (p_max..=t_end).collect();
    let mut misses = vec![vec![0usize; n]; p_max];
    // One forecast sweep per origin covers all horizons: the forecast from
    // origin o supplies the p-step prediction of target o + p.
    for origin in 0..t_end {
        let horizon = p_max.min(t_end - origin);
        let first_useful = targets[0].saturating_sub(origin);
        if first_useful > horizon {
            continue;
        }
        let means = conditional_mean(beta, link, traj, origin, horizon)?;
        for (j, mean) in means.iter().enumerate() {
            let p = j + 1;
            let u = origin + p;
            if u < targets[0] {
                continue;
            }
            let observed = traj.state(u as i64);
            for k in 0..n {
                let (lo, hi) = poisson_interval(mean[k], level)?;
                let obs = observed[k];
                if obs < lo as f64 || obs > hi as f64 {
                    misses[p - 1][k] += 1;
                }
            }
        }
    }
    let count = targets.len() as f64;
    let rates = misses
        .iter()
        .map(|row| row.iter().map(|&m| m as f64 / count).collect())
        .collect();
    // Persistent one-step baseline over the same targets.
    let mut persistent = vec![0usize; n];
    for &u in &targets {
        let prev = persistent_baseline(traj, u).to_vec();
        let observed = traj.state(u as i64);
        for k in 0..n {
            let (lo, hi) = poisson_interval(prev[k], level)?;
            if observed[k] < lo as f64 || observed[k] > hi as f64 {
                persistent[k] += 1;
            }
        }
    }
    Ok(NoncoverageTable {
        level,
        p_values: (1..=p_max).collect(),
        rates,
        persistent: persistent.iter().map(|&m| m as f64 / count).collect(),
        targets: targets.len(),
    })
}

/// Average-rate comparison over the test window `n_train+1..=T`: observed
/// frequencies, one-step conditional means from observed lags, a
/// simulation-based check (independent Poisson replicas at the predicted
/// intensities), and the seasonal baseline, with mean absolute errors
/// against the observed rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
    pub simulated: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub mae_predicted: f64,
    pub mae_simulated: f64,
    pub mae_seasonal: f64,
    pub test_steps: usize,
    pub replicas: usize,
}

pub fn evaluate_metrics(
    traj: &Trajectory,
    n_train: usize,
    beta: &ParamVector,
    link: LinkFunction,
    replicas: usize,
    period: usize,
    seed: u64,
) -> Result<MetricsReport, PredictError> {
    let t_end = traj.num_steps();
    if n_train == 0 || n_train >= t_end {
        return Err(PredictError::InvalidArgument(format!(
            "need 1 <= n_train < {t_end}, got {n_train}"
        )));
    }
    if replicas == 0 {
        return Err(PredictError::InvalidArgument("need at least one replica".into()));
    }
    let n = traj.shape().state_dim();
    let test_steps = t_end - n_train;
    let scale = 1.0 / test_steps as f64;

    let mut observed = vec![0.0; n];
    let mut predicted = vec![0.0; n];
    let mut seasonal = vec![0.0; n];
    let mut intensities: Vec<Vec<f64>> = Vec::with_capacity(test_steps);
    for t in (n_train + 1)..=t_end {
        let state = traj.state(t as i64);
        // One-step conditional mean from the observed lags at t.
        let mean: Vec<f64> = traj
            .window(t)
            .transpose_apply(beta)
            .iter()
            .map(|&z| link.value(z).max(0.0))
            .collect();
        let season = seasonal_baseline(traj, n_train, period, t)?;
        for k in 0..n {
            observed[k] += scale * state[k];
            predicted[k] += scale * mean[k];
            seasonal[k] += scale * season[k];
        }
        intensities.push(mean);
    }

    // Simulation check: every replica redraws all test counts from the
    // predicted intensities with its own derived stream, so replicas are
    // independent and reproducible.
    let mut simulated = vec![0.0; n];
    let rep_scale = scale / replicas as f64;
    for i in 0..replicas {
        let mut rng = derive_stream(seed, tag::REPLICA_BASE + i as u64);
        for mean in &intensities {
            for k in 0..n {
                simulated[k] += rep_scale * sampling::poisson(&mut rng, mean[k]) as f64;
            }
        }
    }

    let mae = |xs: &[f64]| -> f64 {
        xs.iter()
            .zip(&observed)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64
    };
    Ok(MetricsReport {
        mae_predicted: mae(&predicted),
        mae_simulated: mae(&simulated),
        mae_seasonal: mae(&seasonal),
        observed,
        predicted,
        simulated,
        seasonal,
        test_steps,
        replicas,
    })
}

/// Forecast intervals at every horizon from one origin (the usual CLI
/// surface): intensities plus their central intervals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastTable {
    pub origin: usize,
    pub level: f64,
    /// `rows[p-1][k] = (intensity, lo, hi)` for horizon `p`.
    pub rows: Vec<Vec<(f64, u64, u64)>>,
}

pub fn forecast_intervals(
    beta: &ParamVector,
    link: LinkFunction,
    traj: &Trajectory,
    origin: usize,
    horizon: usize,
    level: f64,
) -> Result<ForecastTable, PredictError> {
    let means = conditional_mean(beta, link, traj, origin, horizon)?;
    let mut rows = Vec::with_capacity(horizon);
    for mean in &means {
        let mut row = Vec::with_capacity(mean.len());
        for &m in mean {
            let (lo, hi) = poisson_interval(m, level)?;
            row.push((m, lo, hi));
        }
        rows.push(row);
    }
    Ok(ForecastTable {
        origin,
        level,
        rows,
    })
}
