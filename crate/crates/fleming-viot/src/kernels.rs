//! The two mean-field selection kernels: Fleming-Viot (kill at rate V,
//! clone uniformly) and the low-variance centered variant (selective
//! killing / uniform cloning plus uniform killing / selective cloning).

use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{EmpiricalMeasure, Point, Potential};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariant {
    FlemingViot,
    Centered,
}

/// Which kernel is in force plus its dominating rate K*.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionKernelSpec {
    pub variant: KernelVariant,
    pub rate_bound: f64,
}

impl SelectionKernelSpec {
    /// Build the spec for a potential; a degenerate K* = 0 (which makes
    /// the engine run selection-free) is stored as 0 rather than erroring.
    pub fn new(variant: KernelVariant, v: &Potential) -> Result<Self> {
        if variant == KernelVariant::FlemingViot && v.min_value() < 0.0 {
            return Err(Error::NegativePotentialForFV(v.min_value()));
        }
        let bound = match rate_bound(variant, v) {
            Ok(b) => b,
            Err(Error::ZeroPotential) => 0.0,
            Err(e) => return Err(e),
        };
        Ok(Self {
            variant,
            rate_bound: bound,
        })
    }
}

/// The dominating constant K* of the kernel.
///
/// Fleming-Viot: K_eta(1)(x) = V(x) <= ||V||_inf. Centered:
/// K_eta(1)(x) = (V(x) - eta V)_+ + eta((V - eta V)_-) <= osc(V) <= 2||V||_inf,
/// identically zero for constant V.
pub fn rate_bound(variant: KernelVariant, v: &Potential) -> Result<f64> {
    let bound = match variant {
        KernelVariant::FlemingViot => v.sup_bound,
        KernelVariant::Centered => {
            if potential_is_constant(v) {
                0.0
            } else {
                2.0 * v.sup_bound
            }
        }
    };
    if bound == 0.0 {
        return Err(Error::ZeroPotential);
    }
    Ok(bound)
}

fn potential_is_constant(v: &Potential) -> bool {
    use crate::types::PotentialForm::*;
    match &v.form {
        Constant(_) => true,
        Table(t) => {
            let lo = t.iter().fold(f64::INFINITY, |m, x| m.min(*x));
            let hi = t.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
            lo == hi
        }
        EigenFromH { .. } => false,
    }
}

/// Empirical-measure statistics the centered kernel needs: the mean
/// eta(V) and the negative-part mean eta((V - eta V)_-).
pub fn centered_stats(pot_values: &[f64]) -> (f64, f64) {
    let n = pot_values.len() as f64;
    let mean = pot_values.iter().sum::<f64>() / n;
    let neg_mean = pot_values.iter().map(|v| (v - mean).min(0.0).abs()).sum::<f64>() / n;
    (mean, neg_mean)
}

/// K_eta(1) at a point with potential value `v_x`, given the empirical
/// statistics of the current sample.
pub fn rate_from_value(
    variant: KernelVariant,
    v_x: f64,
    mean: f64,
    neg_mean: f64,
) -> f64 {
    match variant {
        KernelVariant::FlemingViot => v_x,
        KernelVariant::Centered => (v_x - mean).max(0.0) + neg_mean,
    }
}

/// Total selection rate K_eta(1)(x) of the kernel at x under eta.
pub fn total_rate(
    spec: &SelectionKernelSpec,
    v: &Potential,
    eta: &EmpiricalMeasure,
    x: &Point,
) -> Result<f64> {
    let v_x = v.eval(x);
    if spec.variant == KernelVariant::FlemingViot && v_x < 0.0 {
        return Err(Error::NegativePotentialForFV(v_x));
    }
    let pot: Vec<f64> = eta.positions().iter().map(|p| v.eval(p)).collect();
    let (mean, neg_mean) = centered_stats(&pot);
    Ok(rate_from_value(spec.variant, v_x, mean, neg_mean))
}

/// Draw the replacement target index for a particle killed at a point
/// with potential value `v_x`. Cumulative-sum inversion in index order,
/// ties to the lowest index.
pub fn replacement_index<R: Rng>(
    variant: KernelVariant,
    v_x: f64,
    pot_values: &[f64],
    rng: &mut R,
) -> Result<usize> {
    let n = pot_values.len();
    match variant {
        KernelVariant::FlemingViot => {
            if v_x <= 0.0 {
                return Err(Error::ZeroRate);
            }
            // replacement law is eta itself: uniform over positions
            Ok(cumulative_uniform(n, rng))
        }
        KernelVariant::Centered => {
            let (mean, neg_mean) = centered_stats(pot_values);
            let uniform_mass = (v_x - mean).max(0.0);
            let weighted_mass = neg_mean;
            let total = uniform_mass + weighted_mass;
            if total <= 0.0 {
                return Err(Error::ZeroRate);
            }
            // pick the part proportional to its mass, then the target
            if rng.random::<f64>() * total < uniform_mass {
                Ok(cumulative_uniform(n, rng))
            } else {
                let weights: Vec<f64> =
                    pot_values.iter().map(|v| (v - mean).min(0.0).abs()).collect();
                Ok(cumulative_inversion(&weights, rng))
            }
        }
    }
}

/// Spec-level replacement sampling returning one of eta's positions.
pub fn sample_replacement<R: Rng>(
    spec: &SelectionKernelSpec,
    v: &Potential,
    eta: &EmpiricalMeasure,
    x: &Point,
    rng: &mut R,
) -> Result<Point> {
    let pot: Vec<f64> = eta.positions().iter().map(|p| v.eval(p)).collect();
    let idx = replacement_index(spec.variant, v.eval(x), &pot, rng)?;
    Ok(eta.positions()[idx].clone())
}

pub(crate) fn cumulative_uniform<R: Rng>(n: usize, rng: &mut R) -> usize {
    let u = rng.random::<f64>() * n as f64;
    (u as usize).min(n - 1)
}

/// Inversion of the cumulative sum of nonnegative weights in fixed
/// index order.
pub(crate) fn cumulative_inversion<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    // roundoff fallthrough: last index with positive weight
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}

/// |eta(S_eta f) - [eta(f) eta(V) - eta(V f)]|, with eta(S_eta f)
/// evaluated by explicit double summation over particles and kernel mass.
pub fn mean_field_identity_residual(
    spec: &SelectionKernelSpec,
    v: &Potential,
    eta: &EmpiricalMeasure,
    f: &crate::types::TestFunction,
) -> f64 {
    let n = eta.n();
    let nf = n as f64;
    let pot: Vec<f64> = eta.positions().iter().map(|p| v.eval(p)).collect();
    let fv: Vec<f64> = eta.positions().iter().map(|p| f.eval(p)).collect();
    let (mean, neg_mean) = centered_stats(&pot);
    let _ = neg_mean;

    // eta(S_eta f) = (1/N) sum_j sum_k (f_k - f_j) K(x_j, {x_k}) with the
    // per-target kernel mass written out for each variant.
    let mut lhs = 0.0;
    for j in 0..n {
        for k in 0..n {
            let mass = match spec.variant {
                KernelVariant::FlemingViot => pot[j] / nf,
                KernelVariant::Centered => {
                    ((pot[j] - mean).max(0.0) + (pot[k] - mean).min(0.0).abs()) / nf
                }
            };
            lhs += (fv[k] - fv[j]) * mass;
        }
    }
    lhs /= nf;

    let eta_f = fv.iter().sum::<f64>() / nf;
    let eta_v = mean;
    let eta_vf = pot.iter().zip(&fv).map(|(a, b)| a * b).sum::<f64>() / nf;
    let rhs = eta_f * eta_v - eta_vf;
    (lhs - rhs).abs()
}
