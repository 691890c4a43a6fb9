//! Trajectory simulation: parameter generation and the Poisson /
//! categorical self-exciting recursions.

use crate::model::{LinkFunction, ModelError, ModelShape, ParamVector, Trajectory};
use crate::rng::{derive_stream, tag};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard ceiling on a single sampled count; a run whose intensity pushes past
/// it is reported as an error carrying the truncation step instead of
/// silently saturating.
pub const COUNT_CAP: u64 = 1_000_000_000;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("count cap {cap} exceeded at step {t} (intensity {lambda})")]
    CountCap { t: usize, lambda: f64, cap: u64 },
    #[error("invalid block probabilities at step {t}: {detail}")]
    BadProbabilities { t: usize, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Recipe for a synthetic parameter vector: every birth rate equals `a` and
/// every channel's excitation weights are drawn uniformly, then rescaled so
/// the row sums equal `b` (largest weight absorbs the rounding residue).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenSpec {
    pub shape: ModelShape,
    pub a: f64,
    pub b: f64,
    pub seed: u64,
}

pub fn generate_params(spec: &GenSpec) -> Result<ParamVector, SimulateError> {
    if !(spec.a >= 0.0) || !spec.a.is_finite() || !(spec.b >= 0.0) || !spec.b.is_finite() {
        return Err(SimulateError::InvalidArgument(format!(
            "a and b must be finite and nonnegative, got a={} b={}",
            spec.a, spec.b
        )));
    }
    let shape = spec.shape;
    let (n, d) = (shape.state_dim(), shape.memory());
    let mut rng = derive_stream(spec.seed, tag::PARAMS);
    let mut beta = ParamVector::zeros(shape);
    for k in 0..n {
        beta.set_base(k, spec.a);
    }
    if spec.b > 0.0 {
        let mut weights = vec![0.0; d * n];
        for k in 0..n {
            let mut sum = 0.0;
            for w in weights.iter_mut() {
                let mut u: f64 = rng.gen();
                while u == 0.0 {
                    u = rng.gen();
                }
                *w = u;
                sum += u;
            }
            let scale = spec.b / sum;
            for w in weights.iter_mut() {
                *w *= scale;
            }
            // Pin the sum to b exactly by absorbing the rounding residue
            // into the largest weight.
            let total: f64 = weights.iter().sum();
            let argmax = (0..weights.len())
                .max_by(|&i, &j| weights[i].partial_cmp(&weights[j]).unwrap())
                .unwrap();
            weights[argmax] -= total - spec.b;
            let mut idx = 0;
            for s in 1..=d {
                for l in 0..n {
                    beta.set_lag(s, k, l, weights[idx]);
                    idx += 1;
                }
            }
        }
    }
    Ok(beta)
}

/// Count and indicator samplers used by the simulators.
pub mod sampling {
    use rand::Rng;
    use statrs::function::gamma::ln_gamma;

    /// Poisson draw: sequential-search inversion below rate 10, transformed
    /// rejection with squeeze (PTRS) above.
    pub fn poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
        debug_assert!(lambda.is_finite() && lambda >= 0.0);
        if lambda <= 0.0 {
            0
        } else if lambda < 10.0 {
            inversion(rng, lambda)
        } else {
            ptrs(rng, lambda)
        }
    }

    fn inversion<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
        let mut p = (-lambda).exp();
        let mut cum = p;
        let mut k = 0u64;
        let u: f64 = rng.gen();
        while u > cum {
            k += 1;
            p *= lambda / k as f64;
            cum += p;
            if k > 2000 {
                break; // unreachable for lambda < 10; numeric backstop
            }
        }
        k
    }

    fn ptrs<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
        let b = 0.931 + 2.53 * lambda.sqrt();
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        let log_lambda = lambda.ln();
        loop {
            let u: f64 = rng.gen::<f64>() - 0.5;
            let v: f64 = rng.gen();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            if (v * inv_alpha / (a / (us * us) + b)).ln()
                <= k * log_lambda - lambda - ln_gamma(k + 1.0)
            {
                return k as u64;
            }
        }
    }

    /// One categorical block: `probs` are the per-mark success
    /// probabilities (sum <= 1); returns the selected mark or `None`.
    pub fn categorical_block<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> Option<usize> {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (m, &p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return Some(m);
            }
        }
        None
    }
}

fn initial_states(
    shape: ModelShape,
    init: Option<&[Vec<f64>]>,
) -> Result<Trajectory, SimulateError> {
    match init {
        None => Ok(Trajectory::with_zero_history(shape)),
        Some(states) => {
            if states.len() != shape.memory() {
                return Err(SimulateError::InvalidArgument(format!(
                    "initial history must supply exactly {} states, got {}",
                    shape.memory(),
                    states.len()
                )));
            }
            Ok(Trajectory::new(shape, states.to_vec())?)
        }
    }
}

/// Self-exciting count recursion: each step draws independent Poisson counts
/// with means `Phi` of the current predictor. Any intensity or draw beyond
/// `COUNT_CAP` aborts with the truncation step.
pub fn simulate_poisson(
    beta: &ParamVector,
    link: LinkFunction,
    nsteps: usize,
    seed: u64,
    init: Option<&[Vec<f64>]>,
) -> Result<Trajectory, SimulateError> {
    let shape = *beta.shape();
    let n = shape.state_dim();
    let mut traj = initial_states(shape, init)?;
    let mut rng = derive_stream(seed, tag::TRAJECTORY);
    for t in 1..=nsteps {
        let z = traj.window(t).transpose_apply(beta);
        let mut state = vec![0.0; n];
        for (k, &zk) in z.iter().enumerate() {
            let lambda = link.value(zk);
            if !lambda.is_finite() || lambda < 0.0 || lambda > COUNT_CAP as f64 {
                return Err(SimulateError::CountCap {
                    t,
                    lambda,
                    cap: COUNT_CAP,
                });
            }
            let x = sampling::poisson(&mut rng, lambda);
            if x > COUNT_CAP {
                return Err(SimulateError::CountCap {
                    t,
                    lambda,
                    cap: COUNT_CAP,
                });
            }
            state[k] = x as f64;
        }
        traj.push_state(state)?;
    }
    Ok(traj)
}

/// Self-exciting categorical recursion: per location, at most one of the
/// `mu` marks fires each step, with probabilities `Phi` of the predictor.
/// Probabilities are validated at runtime (each in [0, 1], block sums at
/// most 1, up to a 1e-9 slack that is clamped).
pub fn simulate_categorical(
    beta: &ParamVector,
    link: LinkFunction,
    nsteps: usize,
    seed: u64,
    init: Option<&[Vec<f64>]>,
) -> Result<Trajectory, SimulateError> {
    const SLACK: f64 = 1e-9;
    let shape = *beta.shape();
    let (n, mu) = (shape.state_dim(), shape.marks());
    let mut traj = initial_states(shape, init)?;
    let mut rng = derive_stream(seed, tag::TRAJECTORY);
    for t in 1..=nsteps {
        let z = traj.window(t).transpose_apply(beta);
        let mut state = vec![0.0; n];
        for (block, zs) in z.chunks(mu).enumerate() {
            let mut probs = Vec::with_capacity(mu);
            for (m, &zk) in zs.iter().enumerate() {
                let p = link.value(zk);
                if !p.is_finite() || p < -SLACK || p > 1.0 + SLACK {
                    return Err(SimulateError::BadProbabilities {
                        t,
                        detail: format!("mark {m} of location {block} has probability {p}"),
                    });
                }
                probs.push(p.clamp(0.0, 1.0));
            }
            let total: f64 = probs.iter().sum();
            if total > 1.0 + SLACK {
                return Err(SimulateError::BadProbabilities {
                    t,
                    detail: format!("location {block} probabilities sum to {total}"),
                });
            }
            if total > 1.0 {
                for p in probs.iter_mut() {
                    *p /= total;
                }
            }
            if let Some(m) = sampling::categorical_block(&mut rng, &probs) {
                state[block * mu + m] = 1.0;
            }
        }
        traj.push_state(state)?;
    }
    Ok(traj)
}
