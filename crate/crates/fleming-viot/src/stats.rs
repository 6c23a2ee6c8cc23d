//! Replica batches and the estimators built on them: moment errors with
//! batch-mean standard errors, log-log rate fits, deviation tails,
//! derivative probes of the flow and the backward error process.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::dynamics::{mutate, DynamicsSpec};
use crate::engine::{run, EngineConfig, InitialLaw};
use crate::error::{Error, Result};
use crate::oracle::SemigroupOracle;
use crate::rng::ReplicaRng;
use crate::types::{Point, ProbabilityVector, TestFunction};

/// Least-squares line through (x, y) points: (slope, intercept, r^2).
pub fn ols_line(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

#[derive(Debug, Clone)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fit err ~ C N^slope through a log-log regression on (N, err) pairs.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 2 {
        return Err(Error::InsufficientReplicas {
            need: 2,
            have: points.len(),
        });
    }
    let mut pts = Vec::with_capacity(points.len());
    for &(n, e) in points {
        if !(e > 0.0) {
            return Err(Error::NonpositiveError(e));
        }
        pts.push((n.ln(), e.ln()));
    }
    let (slope, intercept, r_squared) = ols_line(&pts);
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
    })
}

/// eta^N_t(f) across independent replicas of one scenario, with the
/// exact flow attached when an oracle is available.
#[derive(Debug, Clone)]
pub struct ReplicaBatch {
    pub n_particles: usize,
    pub base_seed: u64,
    pub fingerprint: u64,
    pub times: Vec<f64>,
    /// replicas x times
    pub values: Vec<Vec<f64>>,
    /// Phi_t(eta_0)(f) per observation time
    pub oracle: Option<Vec<f64>>,
}

impl ReplicaBatch {
    pub fn replicas(&self) -> usize {
        self.values.len()
    }

    /// Column of replica values at one observation time.
    pub fn column(&self, time_idx: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[time_idx]).collect()
    }
}

/// The initial law as a probability vector (finite chains only).
pub fn initial_vector(config: &EngineConfig) -> Result<ProbabilityVector> {
    let d = match &config.dynamics {
        DynamicsSpec::FiniteChain(g) => g.dim(),
        _ => return Err(Error::OracleUnavailable),
    };
    match &config.initial_law {
        InitialLaw::Finite(p) => Ok(p.clone()),
        InitialLaw::PointMassState(s) => Ok(ProbabilityVector::dirac(d, *s)),
        _ => Err(Error::OracleUnavailable),
    }
}

/// Run independent replicas in parallel, each with its own derived RNG,
/// recording eta^N_t(f) at the configured observation times.
pub fn run_replicas(
    config: &EngineConfig,
    f: &TestFunction,
    replicas: usize,
    base_seed: u64,
    fingerprint: u64,
    oracle: Option<&SemigroupOracle>,
) -> Result<ReplicaBatch> {
    if replicas == 0 {
        return Err(Error::InsufficientReplicas { need: 1, have: 0 });
    }
    config.validate()?;
    let times = config.obs_times.clone();
    let oracle_values = match oracle {
        Some(o) => {
            let eta0 = initial_vector(config)?;
            let mut vals = Vec::with_capacity(times.len());
            for &t in &times {
                vals.push(o.normalized_flow(&eta0, t, f)?);
            }
            Some(vals)
        }
        None => None,
    };

    let values: Vec<Vec<f64>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ReplicaRng::new(base_seed, fingerprint, config.n_particles, r);
            let mut row = Vec::with_capacity(times.len());
            run(config, &mut rng, |_, eta| row.push(eta.integrate(f)))
                .map_err(|e| Error::ReplicaFailed {
                    replica: r,
                    source: Box::new(e),
                })?;
            Ok(row)
        })
        .collect::<Result<_>>()?;

    Ok(ReplicaBatch {
        n_particles: config.n_particles,
        base_seed,
        fingerprint,
        times,
        values,
        oracle: oracle_values,
    })
}

#[derive(Debug, Clone)]
pub struct MomentError {
    pub time: f64,
    pub bias: f64,
    pub bias_se: f64,
    pub lp: f64,
    pub lp_se: f64,
}

/// Minimum replica count for batch-mean standard errors.
pub const MIN_REPLICAS: usize = 30;

/// Bias and L^p error of eta^N_t(f) against the exact flow, with
/// batch-mean standard errors (30 contiguous batches).
pub fn moment_errors(batch: &ReplicaBatch, p: f64) -> Result<Vec<MomentError>> {
    let r = batch.replicas();
    if r < MIN_REPLICAS {
        return Err(Error::InsufficientReplicas {
            need: MIN_REPLICAS,
            have: r,
        });
    }
    let oracle = batch.oracle.as_ref().ok_or(Error::OracleUnavailable)?;
    let n_batches = MIN_REPLICAS;
    let mut out = Vec::with_capacity(batch.times.len());
    for (ti, (&t, &exact)) in batch.times.iter().zip(oracle).enumerate() {
        let devs: Vec<f64> = batch.values.iter().map(|row| row[ti] - exact).collect();
        let bias = mean(&devs);
        let lp = mean_pow(&devs, p).powf(1.0 / p);
        let (bias_se, lp_se) = {
            let mut bias_batches = Vec::with_capacity(n_batches);
            let mut lp_batches = Vec::with_capacity(n_batches);
            for b in 0..n_batches {
                let lo = b * r / n_batches;
                let hi = (b + 1) * r / n_batches;
                let chunk = &devs[lo..hi];
                bias_batches.push(mean(chunk));
                lp_batches.push(mean_pow(chunk, p).powf(1.0 / p));
            }
            (se_of_mean(&bias_batches), se_of_mean(&lp_batches))
        };
        out.push(MomentError {
            time: t,
            bias,
            bias_se,
            lp,
            lp_se,
        });
    }
    Ok(out)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn mean_pow(xs: &[f64], p: f64) -> f64 {
    xs.iter().map(|x| x.abs().powf(p)).sum::<f64>() / xs.len() as f64
}

/// SE of the grand mean from batch means.
fn se_of_mean(batch_means: &[f64]) -> f64 {
    (variance(batch_means) / batch_means.len() as f64).sqrt()
}

/// Exponential-concentration prefactor 2 e^{1/2}.
pub const TAIL_PREFACTOR: f64 = 3.297442541400256; // 2 sqrt(e)

#[derive(Debug, Clone)]
pub struct TailPoint {
    pub u: f64,
    pub freq: f64,
    /// Wilson upper confidence bound on the tail probability (99%)
    pub upper: f64,
    pub exceed_count: usize,
}

#[derive(Debug, Clone)]
pub struct TailEstimate {
    pub points: Vec<TailPoint>,
    /// largest constant c compatible with the observed tails on the
    /// statistically resolvable part of the grid
    pub fitted_c: Option<f64>,
}

/// Wilson score upper bound at confidence z.
fn wilson_upper(count: usize, total: usize, z: f64) -> f64 {
    let n = total as f64;
    let p = count as f64 / n;
    let z2 = z * z;
    ((p + z2 / (2.0 * n) + z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt())
        / (1.0 + z2 / n))
        .min(1.0)
}

/// Empirical deviation tails of |eta^N_t(f) - Phi_t(f)| / sup|f| at one
/// observation time, with the implied constant in the envelope
/// prefactor * exp(-N c u^2 / (1 + u)).
///
/// Only levels with at least 5 exceedances enter the fit: below that
/// the Wilson bound says nothing about the exponent.
pub fn concentration_tail(
    batch: &ReplicaBatch,
    time_idx: usize,
    u_grid: &[f64],
    f_sup: f64,
) -> Result<TailEstimate> {
    let oracle = batch.oracle.as_ref().ok_or(Error::OracleUnavailable)?;
    let exact = oracle[time_idx];
    let r = batch.replicas();
    if r < MIN_REPLICAS {
        return Err(Error::InsufficientReplicas {
            need: MIN_REPLICAS,
            have: r,
        });
    }
    if !(f_sup > 0.0) {
        return Err(Error::NonpositiveError(f_sup));
    }
    let devs: Vec<f64> = batch
        .values
        .iter()
        .map(|row| (row[time_idx] - exact).abs() / f_sup)
        .collect();
    let n = batch.n_particles as f64;
    let mut points = Vec::with_capacity(u_grid.len());
    let mut fitted: Option<f64> = None;
    for &u in u_grid {
        let count = devs.iter().filter(|&&d| d > u).count();
        let upper = wilson_upper(count, r, 2.576);
        if count >= 5 && upper < 1.0 {
            let c_u = (TAIL_PREFACTOR / upper).ln() * (1.0 + u) / (n * u * u);
            if c_u > 0.0 {
                fitted = Some(fitted.map_or(c_u, |c: f64| c.min(c_u)));
            }
        }
        points.push(TailPoint {
            u,
            freq: count as f64 / r as f64,
            upper,
            exceed_count: count,
        });
    }
    Ok(TailEstimate {
        points,
        fitted_c: fitted,
    })
}

/// One trajectory of the backward error process
/// t -> Phi_{T-t}(eta^N_t)(f), evaluated on the configured observation
/// grid with the propagators cached per remaining time.
pub fn backward_error_trace(
    oracle: &SemigroupOracle,
    config: &EngineConfig,
    f: &TestFunction,
    rng: &mut ReplicaRng,
) -> Result<Vec<(f64, f64)>> {
    let fv = oracle.table_of(f)?;
    let horizon = config.horizon;
    let props: Vec<DMatrix<f64>> = config
        .obs_times
        .iter()
        .map(|&t| oracle.propagator(horizon - t))
        .collect::<Result<_>>()?;
    let d = oracle.dim();
    let mut trace = Vec::with_capacity(config.obs_times.len());
    let mut err = None;
    run(config, rng, |t, eta| {
        if err.is_some() {
            return;
        }
        let idx = trace.len();
        let res = eta
            .occupancy(d)
            .and_then(|occ| oracle.normalized_flow_with(&props[idx], occ.weights(), &fv));
        match res {
            Ok(phi) => trace.push((t, phi)),
            Err(e) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(trace)
}

/// Flat derivative x -> d/d eta [Phi_r(eta)(f)](x) of the normalized
/// flow at a (normalized) weight vector, centered so that its
/// eta-integral vanishes:
/// D(x) = Q(fbar)(x) / eta Q(1) - eta Q(fbar) / (eta Q(1))^2 * Q(1)(x),
/// with fbar = f - center.
pub fn flat_derivative(
    oracle: &SemigroupOracle,
    eta: &ProbabilityVector,
    remaining: f64,
    f: &TestFunction,
    center: f64,
) -> Result<Vec<f64>> {
    let d = oracle.dim();
    if eta.len() != d {
        return Err(Error::DimensionMismatch("flat derivative weights".into()));
    }
    let fbar: Vec<f64> = oracle.table_of(f)?.iter().map(|v| v - center).collect();
    let p = oracle.propagator(remaining)?;
    let qf = oracle.apply_propagator(&p, &fbar);
    let q1 = oracle.apply_propagator(&p, &vec![1.0; d]);
    let den = eta.integrate(&q1);
    if den < 1e-300 {
        return Err(Error::DegenerateNormalizer(den));
    }
    let num = eta.integrate(&qf);
    Ok(qf
        .iter()
        .zip(&q1)
        .map(|(a, b)| a / den - num / (den * den) * b)
        .collect())
}

#[derive(Debug, Clone)]
pub struct DiscreteDerivative {
    /// N (phi(eta + nu/N) - phi(eta))
    pub first: f64,
    /// directional flat derivative nu(D)
    pub flat_direction: f64,
    /// 2N (first - flat_direction)
    pub second: f64,
    /// exact dominating envelope for |second|
    pub envelope: f64,
}

/// Discrete first and second derivative of phi(eta) = Phi_r(eta)(fbar)
/// along the swap direction nu = delta_{x_in} - delta_{x_out}, for an
/// empirical measure given by state counts summing to N.
pub fn discrete_derivative(
    oracle: &SemigroupOracle,
    counts: &[f64],
    x_out: usize,
    x_in: usize,
    remaining: f64,
    f: &TestFunction,
    center: f64,
) -> Result<DiscreteDerivative> {
    let d = oracle.dim();
    if counts.len() != d {
        return Err(Error::DimensionMismatch("discrete derivative counts".into()));
    }
    for (i, s) in [(x_out, "out"), (x_in, "in")] {
        if i >= d {
            return Err(Error::IndexOutOfRange { index: i, size: d });
        }
        let _ = s;
    }
    if counts[x_out] < 1.0 {
        return Err(Error::InvalidInitialLaw(format!(
            "no particle at state {x_out} to move"
        )));
    }
    let n: f64 = counts.iter().sum();
    let fbar: Vec<f64> = oracle.table_of(f)?.iter().map(|v| v - center).collect();
    let p = oracle.propagator(remaining)?;
    let qf = oracle.apply_propagator(&p, &fbar);
    let q1 = oracle.apply_propagator(&p, &vec![1.0; d]);

    let phi = |w: &[f64]| -> Result<f64> {
        let num: f64 = w.iter().zip(&qf).map(|(a, b)| a * b).sum();
        let den: f64 = w.iter().zip(&q1).map(|(a, b)| a * b).sum();
        let mass: f64 = w.iter().sum();
        if den / mass < 1e-300 {
            return Err(Error::DegenerateNormalizer(den / mass));
        }
        Ok(num / den)
    };

    let mut moved = counts.to_vec();
    moved[x_out] -= 1.0;
    moved[x_in] += 1.0;
    let first = n * (phi(&moved)? - phi(counts)?);

    let eta = ProbabilityVector::normalized(counts.to_vec())?;
    let flat = flat_derivative(oracle, &eta, remaining, f, center)?;
    let flat_direction = flat[x_in] - flat[x_out];
    let second = 2.0 * n * (first - flat_direction);

    // envelope with the x_out particle removed: eta^(i) has mass (N-1)/N
    let nu_qf = qf[x_in] - qf[x_out];
    let nu_q1 = q1[x_in] - q1[x_out];
    let eta_q1 = eta.integrate(&q1);
    let eta_qf = eta.integrate(&qf);
    let eta_i_q1 = eta_q1 - q1[x_out] / n;
    let phi_fbar = eta_qf / eta_q1;
    let envelope =
        2.0 / (eta_i_q1 * eta_i_q1) * ((nu_qf * nu_q1).abs() + phi_fbar.abs() * nu_q1 * nu_q1);

    Ok(DiscreteDerivative {
        first,
        flat_direction,
        second,
        envelope,
    })
}

/// Limit of Var(f(Y_h)) / h as h -> 0, estimated by Monte Carlo on a
/// grid of h values and extrapolated to zero through the OLS intercept
/// of (h, Var/h). Equals 2 Gamma(f)(x) for the generator at hand.
pub fn infinitesimal_variance<R: Rng>(
    dynamics: &DynamicsSpec,
    f: &TestFunction,
    x: &Point,
    h_grid: &[f64],
    replicas: usize,
    rng: &mut R,
) -> Result<f64> {
    if h_grid.len() < 2 {
        return Err(Error::InsufficientReplicas {
            need: 2,
            have: h_grid.len(),
        });
    }
    let mut pts = Vec::with_capacity(h_grid.len());
    for &h in h_grid {
        if !(h > 0.0) {
            return Err(Error::NegativeTime(h));
        }
        let mut vals = Vec::with_capacity(replicas);
        for _ in 0..replicas {
            let y = mutate(dynamics, x, h, rng)?;
            vals.push(f.eval(&y));
        }
        pts.push((h, variance(&vals) / h));
    }
    let (_, intercept, _) = ols_line(&pts);
    Ok(intercept)
}

/// Paired comparison of squared deviations under two kernels run on
/// the same replica seeds; t > 0 favors the second (lower-variance)
/// sample.
#[derive(Debug, Clone)]
pub struct PairedVarianceTest {
    pub var_first: f64,
    pub var_second: f64,
    pub t_stat: f64,
}

pub fn paired_variance_test(first: &[f64], second: &[f64], exact: f64) -> PairedVarianceTest {
    assert_eq!(first.len(), second.len());
    let d: Vec<f64> = first
        .iter()
        .zip(second)
        .map(|(a, b)| (a - exact) * (a - exact) - (b - exact) * (b - exact))
        .collect();
    let r = d.len() as f64;
    let md = mean(&d);
    let sd = variance(&d).sqrt();
    PairedVarianceTest {
        var_first: mean(&first.iter().map(|a| (a - exact) * (a - exact)).collect::<Vec<_>>()),
        var_second: mean(&second.iter().map(|b| (b - exact) * (b - exact)).collect::<Vec<_>>()),
        t_stat: md / (sd / r.sqrt()),
    }
}
