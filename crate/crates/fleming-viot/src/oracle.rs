//! Exact finite-state evaluation of the tilted semigroup, the normalized
//! flow, principal eigen-elements, the h-transform and related diagnostics.
//!
//! Everything here is dense linear algebra on small generators (d <= 64);
//! this module is the ground-truth side of the statistical tests.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats::ols_line;
use crate::types::{ProbabilityVector, TestFunction};

/// Row-sum tolerance for generator validation.
pub const GENERATOR_ROW_SUM_TOL: f64 = 1e-12;
/// Residual target for the cached eigen-elements.
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-9;
/// Spectral gap below which the principal eigenvalue is declared non-simple.
pub const EIGEN_GAP_TOL: f64 = 1e-10;

/// Rate matrix of a finite-state Markov jump process (the generator L).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    entries: DMatrix<f64>,
}

impl GeneratorMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() < 2 {
            return Err(Error::NotAGenerator(format!(
                "expected a square matrix of size >= 2, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let d = entries.nrows();
        for i in 0..d {
            let mut row_sum = 0.0;
            for j in 0..d {
                let q = entries[(i, j)];
                if i != j && q < 0.0 {
                    return Err(Error::NotAGenerator(format!(
                        "negative off-diagonal entry {q} at ({i},{j})"
                    )));
                }
                row_sum += q;
            }
            if row_sum.abs() > GENERATOR_ROW_SUM_TOL {
                return Err(Error::NotAGenerator(format!(
                    "row {i} sums to {row_sum:e}"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::NotAGenerator("ragged rate matrix".into()));
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// L f as a per-state vector.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let v = &self.entries * DVector::from_column_slice(f);
        v.as_slice().to_vec()
    }

    /// Exit rate -Q(x,x) of a state.
    pub fn exit_rate(&self, x: usize) -> f64 {
        -self.entries[(x, x)]
    }
}

/// Principal eigen-elements, stored with the sign convention
/// `Q_t^V h = e^{-lambda t} h` (lambda = -(principal eigenvalue of M)).
#[derive(Debug, Clone)]
pub struct EigenElements {
    pub lambda: f64,
    /// Positive right eigenvector, normalized to max entry 1.
    pub h: Vec<f64>,
    /// Quasi-stationary distribution (normalized left eigenvector).
    pub qsd: ProbabilityVector,
}

#[derive(Debug, Clone)]
enum EigenFailure {
    Reducible,
    Degenerate(f64),
    Nonpositive,
}

impl From<EigenFailure> for Error {
    fn from(f: EigenFailure) -> Error {
        match f {
            EigenFailure::Reducible => Error::Reducible,
            EigenFailure::Degenerate(g) => Error::DegenerateSpectrum(g),
            EigenFailure::Nonpositive => Error::NonpositiveEigenfunction,
        }
    }
}

/// Sampled Assumption-style diagnostics on a time grid.
#[derive(Debug, Clone)]
pub struct AssumptionDiagnostics {
    pub c_minus: f64,
    pub c_plus: f64,
    /// (t, sup_x |e^{lambda t} Q_t^V (f - eta_inf f)(x)| / ||f||_inf).
    pub w1_profile: Vec<(f64, f64)>,
    /// Least-squares slope of log w1 over the tail half of the grid.
    pub fitted_decay_rate: f64,
}

/// Exact evaluator of the tilted semigroup exp(t(L - diag V)) and of the
/// normalized flow built from it.
#[derive(Debug, Clone)]
pub struct SemigroupOracle {
    generator: GeneratorMatrix,
    potential: Vec<f64>,
    tilted: DMatrix<f64>,
    eigen: std::result::Result<EigenElements, EigenFailure>,
}

/// Build the oracle from a generator and a tabulated potential.
pub fn build_oracle(l: &GeneratorMatrix, v: &crate::types::Potential) -> Result<SemigroupOracle> {
    let d = l.dim();
    let values: Vec<f64> = match v.table_values() {
        Some(t) => {
            if t.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "potential has {} entries for {} states",
                    t.len(),
                    d
                )));
            }
            t.to_vec()
        }
        None => match &v.form {
            crate::types::PotentialForm::Constant(c) => vec![*c; d],
            _ => return Err(Error::OracleUnavailable),
        },
    };
    SemigroupOracle::new(l.clone(), values)
}

impl SemigroupOracle {
    pub fn new(generator: GeneratorMatrix, potential: Vec<f64>) -> Result<Self> {
        let d = generator.dim();
        if potential.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "potential has {} entries for {} states",
                potential.len(),
                d
            )));
        }
        let mut tilted = generator.entries().clone();
        for i in 0..d {
            tilted[(i, i)] -= potential[i];
        }
        let eigen = compute_principal_eigen(&tilted, generator.entries());
        Ok(Self {
            generator,
            potential,
            tilted,
            eigen,
        })
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    pub fn generator(&self) -> &GeneratorMatrix {
        &self.generator
    }

    pub fn potential_values(&self) -> &[f64] {
        &self.potential
    }

    /// The tilted generator M = L - diag(V).
    pub fn tilted_generator(&self) -> &DMatrix<f64> {
        &self.tilted
    }

    /// Dense propagator exp(t M); callers that reuse a time repeatedly
    /// should cache the returned matrix.
    pub fn propagator(&self, t: f64) -> Result<DMatrix<f64>> {
        if t < 0.0 {
            return Err(Error::NegativeTime(t));
        }
        Ok(expm(&(&self.tilted * t)))
    }

    /// Q_t^V f as a per-state vector.
    pub fn unnormalized_semigroup(&self, t: f64, f: &TestFunction) -> Result<Vec<f64>> {
        let fv = self.table_of(f)?;
        Ok(self.apply_propagator(&self.propagator(t)?, &fv))
    }

    pub fn apply_propagator(&self, p: &DMatrix<f64>, f: &[f64]) -> Vec<f64> {
        let v = p * DVector::from_column_slice(f);
        v.as_slice().to_vec()
    }

    /// Phi_t(eta)(f) = eta Q_t^V(f) / eta Q_t^V(1).
    pub fn normalized_flow(
        &self,
        eta: &ProbabilityVector,
        t: f64,
        f: &TestFunction,
    ) -> Result<f64> {
        let p = self.propagator(t)?;
        let fv = self.table_of(f)?;
        self.normalized_flow_with(&p, eta.weights(), &fv)
    }

    /// Flow evaluation against a precomputed propagator and raw weights
    /// (weights need not be normalized; the ratio is scale-invariant).
    pub fn normalized_flow_with(
        &self,
        p: &DMatrix<f64>,
        weights: &[f64],
        f: &[f64],
    ) -> Result<f64> {
        let d = self.dim();
        if weights.len() != d || f.len() != d {
            return Err(Error::DimensionMismatch(
                "flow weights/test function size".into(),
            ));
        }
        let qf = self.apply_propagator(p, f);
        let q1 = self.apply_propagator(p, &vec![1.0; d]);
        let num: f64 = weights.iter().zip(&qf).map(|(w, v)| w * v).sum();
        let den: f64 = weights.iter().zip(&q1).map(|(w, v)| w * v).sum();
        let mass: f64 = weights.iter().sum();
        if den / mass < 1e-300 {
            return Err(Error::DegenerateNormalizer(den / mass));
        }
        Ok(num / den)
    }

    /// Cached principal eigen-elements.
    pub fn principal_eigen(&self) -> Result<EigenElements> {
        match &self.eigen {
            Ok(e) => Ok(e.clone()),
            Err(f) => Err(f.clone().into()),
        }
    }

    /// h-transform P_t^h f = e^{lambda t} h^{-1} Q_t^V (h f).
    pub fn h_transform(
        &self,
        eig: &EigenElements,
        t: f64,
        f: &TestFunction,
    ) -> Result<Vec<f64>> {
        if eig.h.iter().any(|&x| x <= 0.0) {
            return Err(Error::NonpositiveEigenfunction);
        }
        let fv = self.table_of(f)?;
        let hf: Vec<f64> = eig.h.iter().zip(&fv).map(|(h, f)| h * f).collect();
        let qhf = self.apply_propagator(&self.propagator(t)?, &hf);
        let scale = (eig.lambda * t).exp();
        Ok(qhf
            .iter()
            .zip(&eig.h)
            .map(|(q, h)| scale * q / h)
            .collect())
    }

    /// Sample c_-, C_+ and the w1 profile on a regular time grid.
    pub fn assumption_diagnostics(
        &self,
        eig: &EigenElements,
        f: &TestFunction,
        horizon: f64,
        grid_step: f64,
    ) -> Result<AssumptionDiagnostics> {
        if !(horizon > 0.0) || !(grid_step > 0.0) {
            return Err(Error::NegativeTime(horizon.min(grid_step)));
        }
        let d = self.dim();
        let fv = self.table_of(f)?;
        let f_sup = fv.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
        let eta_inf_f = eig.qsd.integrate(&fv);
        let centered: Vec<f64> = fv.iter().map(|v| v - eta_inf_f).collect();
        let ones = vec![1.0; d];

        let mut c_minus = f64::INFINITY;
        let mut c_plus = f64::NEG_INFINITY;
        let mut w1_profile = Vec::new();
        let step_prop = self.propagator(grid_step)?;
        let mut prop = DMatrix::identity(d, d);
        let n_steps = (horizon / grid_step).round() as usize;
        for k in 0..=n_steps {
            let t = k as f64 * grid_step;
            let scale = (eig.lambda * t).exp();
            let q1 = self.apply_propagator(&prop, &ones);
            for &v in &q1 {
                c_minus = c_minus.min(scale * v);
                c_plus = c_plus.max(scale * v);
            }
            let qc = self.apply_propagator(&prop, &centered);
            let w1 = qc.iter().fold(0.0_f64, |m, v| m.max(scale * v.abs())) / f_sup;
            w1_profile.push((t, w1));
            prop = &step_prop * prop;
        }

        // fit log w1 over the tail half of the grid
        let tail = &w1_profile[w1_profile.len() / 2..];
        let pts: Vec<(f64, f64)> = tail
            .iter()
            .map(|&(t, w)| (t, w.max(1e-300).ln()))
            .collect();
        let (slope, _intercept, _r2) = ols_line(&pts);
        Ok(AssumptionDiagnostics {
            c_minus,
            c_plus,
            w1_profile,
            fitted_decay_rate: slope,
        })
    }

    /// Central-difference residual of the Kolmogorov equation for the
    /// normalized flow, with the mean-field term in closed form:
    /// Phi(S_Phi f) = Phi(f) Phi(V) - Phi(V f).
    pub fn kolmogorov_residual(
        &self,
        eta: &ProbabilityVector,
        f: &TestFunction,
        t: f64,
        dt: f64,
    ) -> Result<f64> {
        if t < 0.0 {
            return Err(Error::NegativeTime(t));
        }
        if !(dt > 0.0 && dt <= 1e-3) {
            return Err(Error::NegativeTime(dt));
        }
        let fv = self.table_of(f)?;
        let phi = |s: f64, g: &[f64]| -> Result<f64> {
            self.normalized_flow_with(&self.propagator(s)?, eta.weights(), g)
        };
        // second-order time derivative estimate
        let dphi = if t >= dt {
            (phi(t + dt, &fv)? - phi(t - dt, &fv)?) / (2.0 * dt)
        } else {
            (-3.0 * phi(t, &fv)? + 4.0 * phi(t + dt, &fv)? - phi(t + 2.0 * dt, &fv)?)
                / (2.0 * dt)
        };
        let lf = self.generator.apply(&fv);
        let vf: Vec<f64> = self.potential.iter().zip(&fv).map(|(v, f)| v * f).collect();
        let p = self.propagator(t)?;
        let phi_lf = self.normalized_flow_with(&p, eta.weights(), &lf)?;
        let phi_f = self.normalized_flow_with(&p, eta.weights(), &fv)?;
        let phi_v = self.normalized_flow_with(&p, eta.weights(), &self.potential)?;
        let phi_vf = self.normalized_flow_with(&p, eta.weights(), &vf)?;
        let rhs = phi_lf + phi_f * phi_v - phi_vf;
        Ok((dphi - rhs).abs())
    }

    pub(crate) fn table_of(&self, f: &TestFunction) -> Result<Vec<f64>> {
        let d = self.dim();
        match f.table_values() {
            Some(t) if t.len() == d => Ok(t.to_vec()),
            Some(t) => Err(Error::DimensionMismatch(format!(
                "test function has {} entries for {} states",
                t.len(),
                d
            ))),
            None => match &f.form {
                crate::types::TestFunctionForm::Constant(c) => Ok(vec![*c; d]),
                _ => Err(Error::OracleUnavailable),
            },
        }
    }
}

/// Carre du champ of a jump generator at one state:
/// Gamma_G(f)(x) = 1/2 sum_{x'} (f(x') - f(x))^2 G(x, x').
pub fn carre_du_champ_jump(g: &GeneratorMatrix, f: &TestFunction, x: usize) -> Result<f64> {
    let d = g.dim();
    if x >= d {
        return Err(Error::IndexOutOfRange { index: x, size: d });
    }
    let fv = match f.table_values() {
        Some(t) if t.len() == d => t.to_vec(),
        _ => match &f.form {
            crate::types::TestFunctionForm::Constant(c) => vec![*c; d],
            _ => return Err(Error::OracleUnavailable),
        },
    };
    let mut acc = 0.0;
    for xp in 0..d {
        if xp != x {
            let df = fv[xp] - fv[x];
            acc += df * df * g.entries()[(x, xp)];
        }
    }
    Ok(0.5 * acc)
}

/// Scaling-and-squaring matrix exponential with the degree-13 rational
/// approximation (dense, d <= 64).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    const THETA_13: f64 = 5.371_920_351_148_152;
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let d = a.nrows();
    let norm = one_norm(a);
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2.0_f64.powi(s);
    let id = DMatrix::<f64>::identity(d, d);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let u_inner = &a6 * (B[13] * &a6 + B[11] * &a4 + B[9] * &a2)
        + B[7] * &a6
        + B[5] * &a4
        + B[3] * &a2
        + B[1] * &id;
    let u = &a * u_inner;
    let v = &a6 * (B[12] * &a6 + B[10] * &a4 + B[8] * &a2)
        + B[6] * &a6
        + B[4] * &a4
        + B[2] * &a2
        + B[0] * &id;
    let num = &v + &u;
    let den = &v - &u;
    let mut x = den
        .lu()
        .solve(&num)
        .expect("Pade denominator must be invertible");
    for _ in 0..s {
        x = &x * &x;
    }
    x
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    let mut best = 0.0_f64;
    for j in 0..a.ncols() {
        let col_sum: f64 = (0..a.nrows()).map(|i| a[(i, j)].abs()).sum();
        best = best.max(col_sum);
    }
    best
}

fn compute_principal_eigen(
    m: &DMatrix<f64>,
    l: &DMatrix<f64>,
) -> std::result::Result<EigenElements, EigenFailure> {
    let d = m.nrows();
    if !strongly_connected(l) {
        return Err(EigenFailure::Reducible);
    }
    // locate the principal eigenvalue and check simplicity through the
    // full complex spectrum
    let spectrum = m.clone().complex_eigenvalues();
    let mut reals: Vec<(f64, f64)> = spectrum.iter().map(|z| (z.re, z.im)).collect();
    reals.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mu1 = reals[0].0;
    if reals[0].1.abs() > 1e-8 {
        return Err(EigenFailure::Degenerate(0.0));
    }
    let gap = if d > 1 { mu1 - reals[1].0 } else { f64::INFINITY };
    if gap < EIGEN_GAP_TOL {
        return Err(EigenFailure::Degenerate(gap));
    }

    // inverse iteration with a slightly off-shifted LU for both sides
    let shift = mu1 + gap.min(1.0) * 1e-6;
    let shifted = m - DMatrix::<f64>::identity(d, d) * shift;
    let right = inverse_iteration(&shifted, false)?;
    let left = inverse_iteration(&shifted, true)?;
    // Rayleigh refinement of the eigenvalue with both eigenvectors
    let mh = m * &right;
    let num: f64 = left.iter().zip(mh.iter()).map(|(a, b)| a * b).sum();
    let den: f64 = left.iter().zip(right.iter()).map(|(a, b)| a * b).sum();
    let mu = num / den;

    let h_max = right.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let h: Vec<f64> = right.iter().map(|&x| x / h_max).collect();
    if h.iter().any(|&x| x <= 0.0) {
        return Err(EigenFailure::Nonpositive);
    }
    let mass: f64 = left.iter().sum();
    let qsd_w: Vec<f64> = left.iter().map(|&x| (x / mass).max(0.0)).collect();
    let qsd = ProbabilityVector::normalized(qsd_w).map_err(|_| EigenFailure::Nonpositive)?;
    Ok(EigenElements {
        lambda: -mu,
        h,
        qsd,
    })
}

fn inverse_iteration(
    shifted: &DMatrix<f64>,
    transpose: bool,
) -> std::result::Result<DVector<f64>, EigenFailure> {
    let mat = if transpose {
        shifted.transpose()
    } else {
        shifted.clone()
    };
    let lu = mat.lu();
    let d = shifted.nrows();
    let mut v = DVector::from_element(d, 1.0 / d as f64);
    for _ in 0..200 {
        let mut next = lu.solve(&v).ok_or(EigenFailure::Degenerate(0.0))?;
        let norm = next.amax();
        next /= norm;
        // Perron vector is signed; orient positively
        let sum: f64 = next.iter().sum();
        if sum < 0.0 {
            next = -next;
        }
        let delta = (&next - &v).amax();
        v = next;
        if delta < 1e-14 {
            break;
        }
    }
    Ok(v)
}

fn strongly_connected(l: &DMatrix<f64>) -> bool {
    let d = l.nrows();
    let reach = |forward: bool| -> usize {
        let mut seen = vec![false; d];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for j in 0..d {
                let rate = if forward { l[(i, j)] } else { l[(j, i)] };
                if i != j && rate > 0.0 && !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count
    };
    reach(true) == d && reach(false) == d
}
