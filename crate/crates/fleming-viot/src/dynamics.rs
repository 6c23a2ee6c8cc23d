//! Mutation backends: exact event-driven finite-chain simulation and
//! Euler-Maruyama integration of additive-noise diffusions
//! dX = b(X) dt + sqrt(2) dB, plus the Lyapunov-condition checker.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::oracle::GeneratorMatrix;
use crate::types::{HSpec, Point, Potential, PotentialForm};

/// Largest admissible Euler-Maruyama substep.
pub const MAX_EM_STEP: f64 = 0.1;

/// Drift field b, applied coordinate-wise in dimension > 1.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftSpec {
    /// b(x) = sum_k c_k x^k.
    Polynomial { coefficients: Vec<f64> },
    /// b(x) = -mu x.
    OrnsteinUhlenbeck { mu: f64 },
    /// b(x) = -x |x|: quadratic growth pointing at the origin; the
    /// confining drift behind the d = 1 quadratic example.
    ConfiningQuadratic,
    /// b(x) = -x^3.
    NegativeCubic,
}

impl DriftSpec {
    pub fn eval_scalar(&self, x: f64) -> f64 {
        match self {
            DriftSpec::Polynomial { coefficients } => {
                let mut acc = 0.0;
                for &c in coefficients.iter().rev() {
                    acc = acc * x + c;
                }
                acc
            }
            DriftSpec::OrnsteinUhlenbeck { mu } => -mu * x,
            DriftSpec::ConfiningQuadratic => -x * x.abs(),
            DriftSpec::NegativeCubic => -x * x * x,
        }
    }
}

/// Which mutation backend is in force.
#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsSpec {
    FiniteChain(GeneratorMatrix),
    Diffusion {
        drift: DriftSpec,
        dim: usize,
        step: f64,
    },
}

impl DynamicsSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DynamicsSpec::FiniteChain(_) => Ok(()),
            DynamicsSpec::Diffusion { dim, step, .. } => {
                if *dim == 0 {
                    return Err(Error::DimensionMismatch(
                        "diffusion dimension must be positive".into(),
                    ));
                }
                if !(*step > 0.0 && *step <= MAX_EM_STEP) {
                    return Err(Error::DimensionMismatch(format!(
                        "diffusion step {step} outside (0, {MAX_EM_STEP}]"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Free mutation of a single particle over a window of length `dt`.
///
/// Finite chains are simulated exactly (exponential holding times, jump
/// law proportional to the off-diagonal row); diffusions take
/// Euler-Maruyama substeps of size <= `step`, the last one truncated.
pub fn mutate<R: Rng>(spec: &DynamicsSpec, x: &Point, dt: f64, rng: &mut R) -> Result<Point> {
    if dt < 0.0 {
        return Err(Error::NegativeTime(dt));
    }
    match (spec, x) {
        (DynamicsSpec::FiniteChain(g), Point::State(s)) => {
            Ok(Point::State(mutate_chain(g, *s, dt, rng)))
        }
        (DynamicsSpec::Diffusion { drift, dim, step }, Point::Euclid(p)) => {
            if p.len() != *dim {
                return Err(Error::DimensionMismatch(format!(
                    "point has {} coordinates, diffusion has {dim}",
                    p.len()
                )));
            }
            let mut y = p.clone();
            mutate_diffusion(drift, &mut y, dt, *step, rng)?;
            Ok(Point::Euclid(y))
        }
        _ => Err(Error::DimensionMismatch(
            "point type does not match the dynamics".into(),
        )),
    }
}

pub(crate) fn mutate_chain<R: Rng>(
    g: &GeneratorMatrix,
    mut s: usize,
    dt: f64,
    rng: &mut R,
) -> usize {
    let mut remaining = dt;
    loop {
        let rate = g.exit_rate(s);
        if rate <= 0.0 {
            return s;
        }
        let hold = Exp::new(rate).unwrap().sample(rng);
        if hold >= remaining {
            return s;
        }
        remaining -= hold;
        s = sample_jump_target(g, s, rng);
    }
}

pub(crate) fn sample_jump_target<R: Rng>(g: &GeneratorMatrix, s: usize, rng: &mut R) -> usize {
    let d = g.dim();
    let total = g.exit_rate(s);
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = s;
    for j in 0..d {
        if j != s {
            let q = g.entries()[(s, j)];
            if q > 0.0 {
                acc += q;
                last = j;
                if u < acc {
                    return j;
                }
            }
        }
    }
    last
}

pub(crate) fn mutate_diffusion<R: Rng>(
    drift: &DriftSpec,
    y: &mut [f64],
    dt: f64,
    step: f64,
    rng: &mut R,
) -> Result<()> {
    let mut remaining = dt;
    while remaining > 0.0 {
        let delta = remaining.min(step);
        let noise_scale = (2.0 * delta).sqrt();
        for c in y.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *c += drift.eval_scalar(*c) * delta + noise_scale * z;
            if !c.is_finite() {
                return Err(Error::NonFiniteState(dt - remaining));
            }
        }
        remaining -= delta;
    }
    Ok(())
}

/// Residual of the Lyapunov condition for the bounded test function
/// phi(x) = 2(1 - (1+m)/|x|), with delta = 1 and L = d^2/dx^2 + b d/dx:
/// returns L(phi)(x) + (1 - V(x) + lambda) phi(x) per grid point.
/// Negative values certify the condition at that point.
pub fn lyapunov_residual(
    drift: &DriftSpec,
    m: f64,
    v: &Potential,
    lambda: f64,
    grid: &[f64],
) -> Result<Vec<f64>> {
    const SINGULAR_RADIUS: f64 = 1e-3;
    if let Some(&x) = grid.iter().find(|x| x.abs() < SINGULAR_RADIUS) {
        return Err(Error::GridTouchesSingularity(x.abs()));
    }
    let mut out = Vec::with_capacity(grid.len());
    for &x in grid {
        let r = x.abs();
        let phi = 2.0 * (1.0 - (1.0 + m) / r);
        let dphi = 2.0 * (1.0 + m) * x.signum() / (r * r);
        let d2phi = -4.0 * (1.0 + m) / (r * r * r);
        let l_phi = d2phi + drift.eval_scalar(x) * dphi;
        let vx = v.eval(&Point::Euclid(vec![x]));
        out.push(l_phi + (1.0 - vx + lambda) * phi);
    }
    Ok(out)
}

/// Manufacture the bounded potential V = (h'' + b h') / h from a
/// closed-form positive eigenfunction candidate, with a sup bound probed
/// on a wide grid. Candidates whose potential keeps growing toward the
/// grid edge are rejected.
pub fn eigen_potential_from_h(h: &HSpec, drift: &DriftSpec) -> Result<Potential> {
    let pot = Potential {
        form: PotentialForm::EigenFromH {
            h: h.clone(),
            drift: drift.clone(),
        },
        sup_bound: 0.0,
    };
    // probe |x| <= 60 in bands of width 5; an unbounded V shows up as
    // monotone growth of the outermost band maxima
    let mut band_max = vec![0.0_f64; 12];
    let mut x = -60.0;
    while x <= 60.0 {
        let vx = pot.eval(&Point::Euclid(vec![x]));
        if !vx.is_finite() {
            return Err(Error::UnboundedResult(format!("V({x}) is not finite")));
        }
        let band = ((x.abs() / 5.0) as usize).min(11);
        band_max[band] = band_max[band].max(vx.abs());
        x += 0.01;
    }
    let tail_growing = band_max[9] < band_max[10] && band_max[10] < band_max[11];
    if tail_growing && band_max[11] > 1e-9 {
        return Err(Error::UnboundedResult(format!(
            "potential grows toward the probe edge: band maxima {:?}",
            &band_max[9..]
        )));
    }
    let sup = band_max.iter().fold(0.0_f64, |m, &v| m.max(v)) * (1.0 + 1e-6);
    Ok(Potential {
        sup_bound: sup,
        ..pot
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::sech2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_state() -> GeneratorMatrix {
        GeneratorMatrix::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap()
    }

    #[test]
    fn zero_window_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chain = DynamicsSpec::FiniteChain(two_state());
        assert_eq!(
            mutate(&chain, &Point::State(1), 0.0, &mut rng).unwrap(),
            Point::State(1)
        );
        let diff = DynamicsSpec::Diffusion {
            drift: DriftSpec::OrnsteinUhlenbeck { mu: 1.0 },
            dim: 1,
            step: 0.01,
        };
        assert_eq!(
            mutate(&diff, &Point::Euclid(vec![0.5]), 0.0, &mut rng).unwrap(),
            Point::Euclid(vec![0.5])
        );
        assert!(mutate(&chain, &Point::State(0), -1.0, &mut rng).is_err());
    }

    #[test]
    fn chain_occupancy_matches_matrix_exponential() {
        // P(X_1 = 1 | X_0 = 0) = (1 - e^{-2}) / 2 for the unit-rate chain
        let chain = DynamicsSpec::FiniteChain(two_state());
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let reps = 100_000;
        let mut ones = 0u64;
        for _ in 0..reps {
            if mutate(&chain, &Point::State(0), 1.0, &mut rng).unwrap() == Point::State(1) {
                ones += 1;
            }
        }
        let p = ones as f64 / reps as f64;
        let expect = (1.0 - (-2.0_f64).exp()) / 2.0;
        let se = (expect * (1.0 - expect) / reps as f64).sqrt();
        assert!((p - expect).abs() < 3.0 * se, "p={p} expect={expect}");
    }

    #[test]
    fn chain_never_leaves_state_set() {
        let g = GeneratorMatrix::from_rows(&[
            vec![-2.0, 1.5, 0.5],
            vec![0.3, -0.3, 0.0],
            vec![1.0, 1.0, -2.0],
        ])
        .unwrap();
        let chain = DynamicsSpec::FiniteChain(g);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Point::State(0);
        for _ in 0..2000 {
            x = mutate(&chain, &x, 0.5, &mut rng).unwrap();
            assert!(x.state().unwrap() < 3);
        }
    }

    #[test]
    fn chain_markov_property_in_law() {
        // one window of 1.0 vs two windows of 0.4 + 0.6: same occupancy law
        let chain = DynamicsSpec::FiniteChain(two_state());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reps = 100_000;
        let mut count_single = 0u64;
        let mut count_split = 0u64;
        for _ in 0..reps {
            if mutate(&chain, &Point::State(0), 1.0, &mut rng).unwrap() == Point::State(1) {
                count_single += 1;
            }
            let mid = mutate(&chain, &Point::State(0), 0.4, &mut rng).unwrap();
            if mutate(&chain, &mid, 0.6, &mut rng).unwrap() == Point::State(1) {
                count_split += 1;
            }
        }
        // two-sample chi-square on the 2x2 occupancy table
        let n = reps as f64;
        let p_pool = (count_single + count_split) as f64 / (2.0 * n);
        let mut chi2 = 0.0;
        for &c in &[count_single, count_split] {
            for (obs, exp) in [(c as f64, n * p_pool), (n - c as f64, n * (1.0 - p_pool))] {
                chi2 += (obs - exp) * (obs - exp) / exp;
            }
        }
        assert!(chi2 < 10.828, "chi2={chi2}"); // dof 1 at significance 1e-3
    }

    #[test]
    fn ou_moments_at_unit_time() {
        let diff = DynamicsSpec::Diffusion {
            drift: DriftSpec::OrnsteinUhlenbeck { mu: 1.0 },
            dim: 1,
            step: 1e-3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let reps = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..reps {
            let p = mutate(&diff, &Point::Euclid(vec![1.0]), 1.0, &mut rng).unwrap();
            let x = match p {
                Point::Euclid(v) => v[0],
                _ => unreachable!(),
            };
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / reps as f64;
        let var = sum2 / reps as f64 - mean * mean;
        let exact_mean = (-1.0_f64).exp();
        let exact_var = 1.0 - (-2.0_f64).exp();
        let se_mean = (exact_var / reps as f64).sqrt();
        // SE of the sample variance of a Gaussian: var * sqrt(2/(R-1))
        let se_var = exact_var * (2.0 / (reps as f64 - 1.0)).sqrt();
        assert!((mean - exact_mean).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - exact_var).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn em_weak_error_is_first_order() {
        // |E X_1 - e^{-1} x_0| for the OU drift scales linearly in the
        // step; fitted on steps coarse enough for the bias to dominate
        // the Monte Carlo noise.
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let reps = 4_000_000;
        let mut pts = Vec::new();
        for &step in &[0.08_f64, 0.04, 0.02] {
            let mut y = vec![0.0_f64; 1];
            let mut sum = 0.0;
            for _ in 0..reps {
                y[0] = 1.0;
                mutate_diffusion(
                    &DriftSpec::OrnsteinUhlenbeck { mu: 1.0 },
                    &mut y,
                    1.0,
                    step,
                    &mut rng,
                )
                .unwrap();
                sum += y[0];
            }
            let err = (sum / reps as f64 - (-1.0_f64).exp()).abs();
            pts.push((step.ln(), err.ln()));
        }
        let (slope, _, _) = crate::stats::ols_line(&pts);
        assert!((slope - 1.0).abs() < 0.3, "weak-error slope {slope}");
    }

    #[test]
    fn blowup_raises_non_finite_state() {
        // explosive drift +x^3 started far out blows past the float range
        let diff = DynamicsSpec::Diffusion {
            drift: DriftSpec::Polynomial {
                coefficients: vec![0.0, 0.0, 0.0, 1.0],
            },
            dim: 1,
            step: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = mutate(&diff, &Point::Euclid(vec![1e60]), 1.0, &mut rng);
        assert!(matches!(r, Err(Error::NonFiniteState(_))));
    }

    #[test]
    fn lyapunov_quadratic_example_is_negative_outside() {
        let drift = DriftSpec::ConfiningQuadratic;
        let v = eigen_potential_from_h(&HSpec::ExpTanh, &drift).unwrap();
        let m = (-v.min_value()).max(0.0);
        let grid: Vec<f64> = vec![-50.0, -10.0, -5.0, 5.0, 10.0, 50.0];
        let res = lyapunov_residual(&drift, m, &v, 0.0, &grid).unwrap();
        for (x, r) in grid.iter().zip(&res) {
            assert!(*r <= 0.0, "residual {r} at x={x}");
        }
    }

    #[test]
    fn lyapunov_inside_compact_region_unconstrained() {
        // near the origin the residual may well be positive; only check
        // that the evaluation is finite
        let drift = DriftSpec::ConfiningQuadratic;
        let v = eigen_potential_from_h(&HSpec::ExpTanh, &drift).unwrap();
        let res = lyapunov_residual(&drift, 0.5, &v, 0.0, &[0.5, 1.0]).unwrap();
        assert!(res.iter().all(|r| r.is_finite()));
    }

    #[test]
    fn lyapunov_ou_counter_case_is_positive_for_large_x() {
        let drift = DriftSpec::OrnsteinUhlenbeck { mu: 1.0 };
        let v = Potential::constant(0.0);
        let res = lyapunov_residual(&drift, 0.0, &v, 0.0, &[-20.0, 20.0, 50.0]).unwrap();
        for r in res {
            assert!(r > 0.0, "OU residual {r} should be positive");
        }
    }

    #[test]
    fn lyapunov_grid_singularity_is_rejected() {
        let drift = DriftSpec::ConfiningQuadratic;
        let v = Potential::constant(0.0);
        assert!(matches!(
            lyapunov_residual(&drift, 0.0, &v, 0.0, &[5.0, 1e-9]),
            Err(Error::GridTouchesSingularity(_))
        ));
    }

    #[test]
    fn eigen_potential_trivial_h() {
        let b = DriftSpec::Polynomial {
            coefficients: vec![0.0, 0.0, 1.0],
        };
        for h in [HSpec::One, HSpec::ExpConst(0.8)] {
            let v = eigen_potential_from_h(&h, &b).unwrap();
            for &x in &[-3.0, 0.0, 2.5] {
                assert_eq!(v.eval(&Point::Euclid(vec![x])), 0.0);
            }
            assert!(v.sup_bound < 1e-9);
        }
    }

    #[test]
    fn eigen_potential_exp_tanh_closed_form() {
        // V(x) = sech^4 x - 2 tanh x sech^2 x + x^2 sech^2 x for b(x) = x^2
        let b = DriftSpec::Polynomial {
            coefficients: vec![0.0, 0.0, 1.0],
        };
        let v = eigen_potential_from_h(&HSpec::ExpTanh, &b).unwrap();
        for &x in &[-4.0, -1.0, 0.0, 0.5, 2.0, 8.0] {
            let s2 = sech2(x);
            let expect = s2 * s2 - 2.0 * x.tanh() * s2 + x * x * s2;
            let got = v.eval(&Point::Euclid(vec![x]));
            assert!((got - expect).abs() < 1e-12, "x={x}: {got} vs {expect}");
        }
        assert!(v.sup_bound.is_finite() && v.sup_bound > 0.0);
    }

    #[test]
    fn eigen_potential_rejects_unbounded_candidates() {
        let b = DriftSpec::Polynomial {
            coefficients: vec![0.0, 0.0, 1.0],
        };
        assert!(matches!(
            eigen_potential_from_h(&HSpec::ExpLinear(0.5), &b),
            Err(Error::UnboundedResult(_))
        ));
    }
}
