//! Shared domain types: state points, probability vectors, potentials,
//! test functions and empirical measures.

use crate::dynamics::DriftSpec;
use crate::error::{Error, Result};

/// Absolute tolerance on probability-vector normalization.
pub const PROB_TOL: f64 = 1e-12;

/// A point of the state space: either a finite-chain state index or a
/// Euclidean position.
#[derive(Debug, Clone, PartialEq)]
pub enum Point {
    State(usize),
    Euclid(Vec<f64>),
}

impl Point {
    pub fn state(&self) -> Option<usize> {
        match self {
            Point::State(s) => Some(*s),
            Point::Euclid(_) => None,
        }
    }
}

/// A finite state space of `size` states, optionally labelled.
#[derive(Debug, Clone)]
pub struct FiniteStateSpace {
    size: usize,
    labels: Option<Vec<String>>,
}

impl FiniteStateSpace {
    pub fn new(size: usize, labels: Option<Vec<String>>) -> Result<Self> {
        if size < 2 {
            return Err(Error::DimensionMismatch(format!(
                "state space needs at least 2 states, got {size}"
            )));
        }
        if let Some(ref l) = labels {
            if l.len() != size {
                return Err(Error::DimensionMismatch(format!(
                    "{} labels for {} states",
                    l.len(),
                    size
                )));
            }
            let mut sorted = l.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != size {
                return Err(Error::DimensionMismatch("duplicate state labels".into()));
            }
        }
        Ok(Self { size, labels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn label(&self, i: usize) -> Option<&str> {
        self.labels.as_ref().map(|l| l[i].as_str())
    }
}

/// A probability vector on a finite state space (entries sum to one).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    weights: Vec<f64>,
}

impl ProbabilityVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidInitialLaw(
                "probability weights must be nonnegative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidInitialLaw(format!(
                "probability weights sum to {sum}, not 1"
            )));
        }
        Ok(Self { weights })
    }

    /// Normalize an arbitrary nonnegative vector into a probability vector.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidInitialLaw("zero-mass weight vector".into()));
        }
        for w in &mut weights {
            *w /= sum;
        }
        Self::new(weights)
    }

    pub fn uniform(d: usize) -> Self {
        Self {
            weights: vec![1.0 / d as f64; d],
        }
    }

    pub fn dirac(d: usize, state: usize) -> Self {
        let mut w = vec![0.0; d];
        w[state] = 1.0;
        Self { weights: w }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Integration eta(g) against per-state values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(values)
            .map(|(w, v)| w * v)
            .sum()
    }
}

/// Closed-form eigenfunction candidates `h` with two explicit derivatives,
/// used to manufacture bounded potentials via V = (h'' + b h') / h.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HSpec {
    /// h = 1.
    One,
    /// h(x) = exp(c), a positive constant.
    ExpConst(f64),
    /// h(x) = exp(tanh x); log h and its derivatives are bounded.
    ExpTanh,
    /// h(x) = exp(c x); log h unbounded, kept as a rejection case.
    ExpLinear(f64),
}

impl HSpec {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            HSpec::One => 1.0,
            HSpec::ExpConst(c) => c.exp(),
            HSpec::ExpTanh => x.tanh().exp(),
            HSpec::ExpLinear(c) => (c * x).exp(),
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match self {
            HSpec::One | HSpec::ExpConst(_) => 0.0,
            HSpec::ExpTanh => {
                let s2 = sech2(x);
                s2 * self.eval(x)
            }
            HSpec::ExpLinear(c) => c * self.eval(x),
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match self {
            HSpec::One | HSpec::ExpConst(_) => 0.0,
            HSpec::ExpTanh => {
                // (sech^2 x)' = -2 sech^2 x tanh x
                let s2 = sech2(x);
                (s2 * s2 - 2.0 * s2 * x.tanh()) * self.eval(x)
            }
            HSpec::ExpLinear(c) => c * c * self.eval(x),
        }
    }
}

pub(crate) fn sech2(x: f64) -> f64 {
    let c = x.cosh();
    1.0 / (c * c)
}

/// A bounded potential V with a declared sup bound.
#[derive(Debug, Clone, PartialEq)]
pub enum PotentialForm {
    /// Tabulated per-state values (finite state space).
    Table(Vec<f64>),
    /// V = (h'' + b h') / h on the real line, d = 1.
    EigenFromH { h: HSpec, drift: DriftSpec },
    /// Constant potential on any state space.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    pub form: PotentialForm,
    pub sup_bound: f64,
}

impl Potential {
    pub fn table(values: Vec<f64>) -> Self {
        let sup = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        Self {
            form: PotentialForm::Table(values),
            sup_bound: sup,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            form: PotentialForm::Constant(c),
            sup_bound: c.abs(),
        }
    }

    pub fn eval(&self, x: &Point) -> f64 {
        match (&self.form, x) {
            (PotentialForm::Table(v), Point::State(s)) => v[*s],
            (PotentialForm::Constant(c), _) => *c,
            (PotentialForm::EigenFromH { h, drift }, Point::Euclid(p)) => {
                let x = p[0];
                (h.d2(x) + drift.eval_scalar(x) * h.d1(x)) / h.eval(x)
            }
            _ => panic!("potential form does not match point type"),
        }
    }

    pub fn table_values(&self) -> Option<&[f64]> {
        match &self.form {
            PotentialForm::Table(v) => Some(v),
            _ => None,
        }
    }

    pub fn min_value(&self) -> f64 {
        match &self.form {
            PotentialForm::Table(v) => v.iter().fold(f64::INFINITY, |m, x| m.min(*x)),
            PotentialForm::Constant(c) => *c,
            PotentialForm::EigenFromH { .. } => {
                // probe grid; the form is one-dimensional by construction
                let mut m = f64::INFINITY;
                let mut x = -60.0;
                while x <= 60.0 {
                    m = m.min(self.eval(&Point::Euclid(vec![x])));
                    x += 0.01;
                }
                m
            }
        }
    }
}

/// A bounded test function with declared sup (and, for diffusions,
/// Lipschitz) bounds.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunctionForm {
    Table(Vec<f64>),
    /// f(x) = x_i on Euclidean points.
    Coordinate(usize),
    /// f(x) = tanh(scale * x_0), bounded with Lipschitz bound `scale`.
    TanhCoordinate { scale: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub form: TestFunctionForm,
    pub sup_bound: f64,
    pub lip_bound: f64,
}

impl TestFunction {
    pub fn table(values: Vec<f64>) -> Self {
        let sup = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        Self {
            form: TestFunctionForm::Table(values),
            sup_bound: sup,
            lip_bound: f64::INFINITY,
        }
    }

    /// Indicator of one state of a finite chain.
    pub fn indicator(d: usize, state: usize) -> Self {
        let mut v = vec![0.0; d];
        v[state] = 1.0;
        Self::table(v)
    }

    pub fn one(d: usize) -> Self {
        Self::table(vec![1.0; d])
    }

    pub fn constant(c: f64) -> Self {
        Self {
            form: TestFunctionForm::Constant(c),
            sup_bound: c.abs(),
            lip_bound: 0.0,
        }
    }

    pub fn coordinate(i: usize, sup_bound: f64) -> Self {
        Self {
            form: TestFunctionForm::Coordinate(i),
            sup_bound,
            lip_bound: 1.0,
        }
    }

    pub fn tanh_coordinate(scale: f64) -> Self {
        Self {
            form: TestFunctionForm::TanhCoordinate { scale },
            sup_bound: 1.0,
            lip_bound: scale,
        }
    }

    pub fn eval(&self, x: &Point) -> f64 {
        match (&self.form, x) {
            (TestFunctionForm::Table(v), Point::State(s)) => v[*s],
            (TestFunctionForm::Constant(c), _) => *c,
            (TestFunctionForm::Coordinate(i), Point::Euclid(p)) => p[*i],
            (TestFunctionForm::TanhCoordinate { scale }, Point::Euclid(p)) => {
                (scale * p[0]).tanh()
            }
            _ => panic!("test function form does not match point type"),
        }
    }

    pub fn table_values(&self) -> Option<&[f64]> {
        match &self.form {
            TestFunctionForm::Table(v) => Some(v),
            _ => None,
        }
    }

    /// Scale the function by a constant (used to normalize for
    /// concentration bounds).
    pub fn scaled(&self, a: f64) -> Self {
        let form = match &self.form {
            TestFunctionForm::Table(v) => {
                TestFunctionForm::Table(v.iter().map(|x| a * x).collect())
            }
            TestFunctionForm::Constant(c) => TestFunctionForm::Constant(a * c),
            other => panic!("scaled() only supports tabulated or constant forms, got {other:?}"),
        };
        Self {
            form,
            sup_bound: self.sup_bound * a.abs(),
            lip_bound: self.lip_bound * a.abs(),
        }
    }
}

/// The empirical measure of N particles with uniform weights 1/N.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    positions: Vec<Point>,
}

impl EmpiricalMeasure {
    pub fn new(positions: Vec<Point>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInitialLaw("empty particle sample".into()));
        }
        Ok(Self { positions })
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    /// eta(g) = (1/N) sum_j g(positions[j]).
    pub fn integrate(&self, f: &TestFunction) -> f64 {
        let n = self.positions.len() as f64;
        self.positions.iter().map(|p| f.eval(p)).sum::<f64>() / n
    }

    pub fn integrate_potential(&self, v: &Potential) -> f64 {
        let n = self.positions.len() as f64;
        self.positions.iter().map(|p| v.eval(p)).sum::<f64>() / n
    }

    /// State-occupancy probability vector for finite-chain samples.
    pub fn occupancy(&self, d: usize) -> Result<ProbabilityVector> {
        let mut counts = vec![0.0; d];
        for p in &self.positions {
            match p {
                Point::State(s) if *s < d => counts[*s] += 1.0,
                Point::State(s) => {
                    return Err(Error::IndexOutOfRange { index: *s, size: d })
                }
                Point::Euclid(_) => return Err(Error::OracleUnavailable),
            }
        }
        ProbabilityVector::normalized(counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![-0.5, 1.5]).is_err());
        let p = ProbabilityVector::normalized(vec![2.0, 2.0]).unwrap();
        assert_eq!(p.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn state_space_invariants() {
        assert!(FiniteStateSpace::new(1, None).is_err());
        assert!(FiniteStateSpace::new(2, Some(vec!["a".into(), "a".into()])).is_err());
        let s = FiniteStateSpace::new(2, Some(vec!["a".into(), "b".into()])).unwrap();
        assert_eq!(s.label(1), Some("b"));
    }

    #[test]
    fn empirical_measure_integrates_with_uniform_weights() {
        let eta =
            EmpiricalMeasure::new(vec![Point::State(0), Point::State(1), Point::State(1)])
                .unwrap();
        let f = TestFunction::indicator(2, 1);
        assert!((eta.integrate(&f) - 2.0 / 3.0).abs() < 1e-15);
        assert!((eta.integrate(&TestFunction::one(2)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hspec_derivatives_match_finite_differences() {
        let eps = 1e-5;
        for h in [HSpec::ExpTanh, HSpec::ExpLinear(0.3), HSpec::ExpConst(1.2)] {
            for &x in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
                let fd1 = (h.eval(x + eps) - h.eval(x - eps)) / (2.0 * eps);
                let fd2 = (h.eval(x + eps) - 2.0 * h.eval(x) + h.eval(x - eps)) / (eps * eps);
                assert!((h.d1(x) - fd1).abs() < 1e-6, "{h:?} d1 at {x}");
                assert!((h.d2(x) - fd2).abs() < 1e-4, "{h:?} d2 at {x}");
            }
        }
    }
}
