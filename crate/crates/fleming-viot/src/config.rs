//! Scenario configs: JSON schema, whole-file validation, fingerprinting
//! and conversion into engine-level objects.

use serde::{Deserialize, Serialize};

use crate::dynamics::{eigen_potential_from_h, DriftSpec, DynamicsSpec, MAX_EM_STEP};
use crate::engine::{EngineConfig, InitialLaw};
use crate::error::{Error, Result};
use crate::kernels::{KernelVariant, SelectionKernelSpec};
use crate::oracle::{build_oracle, GeneratorMatrix, SemigroupOracle};
use crate::types::{HSpec, Potential, ProbabilityVector, TestFunction};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DynamicsConfig {
    FiniteChain { rates: Vec<Vec<f64>> },
    Diffusion { drift: DriftSpec, dim: usize, step: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum PotentialConfig {
    Table(Vec<f64>),
    Constant(f64),
    /// V = (h'' + b h') / h with the drift taken from the dynamics
    EigenFromH { h: HSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum TestFunctionConfig {
    Table(Vec<f64>),
    Indicator { state: usize },
    Coordinate { index: usize, sup_bound: f64 },
    TanhCoordinate { scale: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum InitialLawConfig {
    Weights(Vec<f64>),
    PointState(usize),
    Point(Vec<f64>),
    Gaussian { mean: Vec<f64>, std: f64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Assertions {
    /// admissible [lo, hi] for the fitted L^2-error exponent in N
    pub l2_slope_range: Option<[f64; 2]>,
    /// admissible [lo, hi] for the fitted bias exponent in N
    pub bias_slope_range: Option<[f64; 2]>,
}

impl Assertions {
    pub fn is_empty(&self) -> bool {
        self.l2_slope_range.is_none() && self.bias_slope_range.is_none()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub dynamics: DynamicsConfig,
    pub potential: PotentialConfig,
    pub kernel: KernelVariant,
    pub test_function: TestFunctionConfig,
    pub initial_law: InitialLawConfig,
    pub n_grid: Vec<usize>,
    pub horizon: f64,
    pub obs_times: Vec<f64>,
    pub replicas: usize,
    pub base_seed: u64,
    /// output directory for CSV/summary files (CLI --out overrides)
    #[serde(default)]
    pub outputs: Option<String>,
    #[serde(default)]
    pub assertions: Assertions,
}

/// Parse a scenario from JSON text. Malformed JSON maps to a
/// position-carrying syntax error; a well-formed config is then
/// validated as a whole, reporting every violation at once.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| Error::SyntaxError {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ScenarioConfig {
    /// Collect every violation instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.name.is_empty() {
            errs.push("name must be nonempty".into());
        }
        if self.n_grid.is_empty() {
            errs.push("n_grid must be nonempty".into());
        }
        if self.n_grid.iter().any(|&n| n == 0) {
            errs.push("n_grid entries must be positive".into());
        }
        if !(self.horizon > 0.0) {
            errs.push(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.obs_times.is_empty() {
            errs.push("obs_times must be nonempty".into());
        }
        if self.obs_times.windows(2).any(|w| w[1] < w[0]) {
            errs.push("obs_times must be nondecreasing".into());
        }
        if self
            .obs_times
            .iter()
            .any(|&t| t < 0.0 || t > self.horizon)
        {
            errs.push("obs_times must lie in [0, horizon]".into());
        }
        if self.replicas == 0 {
            errs.push("replicas must be positive".into());
        }

        let chain_dim = match &self.dynamics {
            DynamicsConfig::FiniteChain { rates } => {
                match GeneratorMatrix::from_rows(rates) {
                    Ok(g) => Some(g.dim()),
                    Err(e) => {
                        errs.push(format!("dynamics: {e}"));
                        None
                    }
                }
            }
            DynamicsConfig::Diffusion { dim, step, .. } => {
                if *dim == 0 {
                    errs.push("diffusion dim must be positive".into());
                }
                if !(*step > 0.0 && *step <= MAX_EM_STEP) {
                    errs.push(format!("diffusion step {step} outside (0, {MAX_EM_STEP}]"));
                }
                None
            }
        };

        match (&self.dynamics, &self.potential) {
            (DynamicsConfig::FiniteChain { .. }, PotentialConfig::EigenFromH { .. }) => {
                errs.push("eigen_from_h potential requires diffusion dynamics".into());
            }
            (DynamicsConfig::Diffusion { .. }, PotentialConfig::Table(_)) => {
                errs.push("tabulated potential requires finite-chain dynamics".into());
            }
            (DynamicsConfig::FiniteChain { .. }, PotentialConfig::Table(t)) => {
                if let Some(d) = chain_dim {
                    if t.len() != d {
                        errs.push(format!(
                            "potential table has {} entries for {} states",
                            t.len(),
                            d
                        ));
                    }
                }
                if self.kernel == KernelVariant::FlemingViot && t.iter().any(|&v| v < 0.0) {
                    errs.push(
                        "fleming_viot kernel requires a nonnegative potential".into(),
                    );
                }
            }
            _ => {}
        }
        if self.kernel == KernelVariant::FlemingViot {
            if let PotentialConfig::Constant(c) = &self.potential {
                if *c < 0.0 {
                    errs.push(
                        "fleming_viot kernel requires a nonnegative potential".into(),
                    );
                }
            }
        }

        match (&self.dynamics, &self.test_function) {
            (DynamicsConfig::FiniteChain { .. }, TestFunctionConfig::Table(t)) => {
                if let Some(d) = chain_dim {
                    if t.len() != d {
                        errs.push(format!(
                            "test function table has {} entries for {} states",
                            t.len(),
                            d
                        ));
                    }
                }
            }
            (DynamicsConfig::FiniteChain { .. }, TestFunctionConfig::Indicator { state }) => {
                if let Some(d) = chain_dim {
                    if *state >= d {
                        errs.push(format!("indicator state {state} out of range for {d}"));
                    }
                }
            }
            (
                DynamicsConfig::FiniteChain { .. },
                TestFunctionConfig::Coordinate { .. } | TestFunctionConfig::TanhCoordinate { .. },
            ) => {
                errs.push("coordinate test functions require diffusion dynamics".into());
            }
            (
                DynamicsConfig::Diffusion { .. },
                TestFunctionConfig::Table(_) | TestFunctionConfig::Indicator { .. },
            ) => {
                errs.push("tabulated test functions require finite-chain dynamics".into());
            }
            (DynamicsConfig::Diffusion { dim, .. }, TestFunctionConfig::Coordinate { index, .. }) => {
                if index >= dim {
                    errs.push(format!("coordinate index {index} out of range for dim {dim}"));
                }
            }
            _ => {}
        }

        match (&self.dynamics, &self.initial_law) {
            (DynamicsConfig::FiniteChain { .. }, InitialLawConfig::Weights(w)) => {
                if let Some(d) = chain_dim {
                    if w.len() != d {
                        errs.push(format!(
                            "initial law has {} weights for {} states",
                            w.len(),
                            d
                        ));
                    }
                }
                if ProbabilityVector::normalized(w.clone()).is_err() {
                    errs.push("initial weights must be nonnegative with positive mass".into());
                }
            }
            (DynamicsConfig::FiniteChain { .. }, InitialLawConfig::PointState(s)) => {
                if let Some(d) = chain_dim {
                    if *s >= d {
                        errs.push(format!("initial state {s} out of range for {d}"));
                    }
                }
            }
            (
                DynamicsConfig::FiniteChain { .. },
                InitialLawConfig::Point(_) | InitialLawConfig::Gaussian { .. },
            ) => {
                errs.push("Euclidean initial laws require diffusion dynamics".into());
            }
            (
                DynamicsConfig::Diffusion { .. },
                InitialLawConfig::Weights(_) | InitialLawConfig::PointState(_),
            ) => {
                errs.push("finite initial laws require finite-chain dynamics".into());
            }
            (DynamicsConfig::Diffusion { dim, .. }, InitialLawConfig::Point(x)) => {
                if x.len() != *dim {
                    errs.push("initial point dimension mismatch".into());
                }
            }
            (DynamicsConfig::Diffusion { dim, .. }, InitialLawConfig::Gaussian { mean, std }) => {
                if mean.len() != *dim {
                    errs.push("initial mean dimension mismatch".into());
                }
                if !(*std >= 0.0) {
                    errs.push("initial std must be nonnegative".into());
                }
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::ValidationError(errs))
        }
    }

    /// Stable 64-bit fingerprint of the scenario content: FNV-1a over
    /// the canonical (struct-ordered) serialization, so reordering the
    /// fields of the JSON source does not change it.
    pub fn fingerprint(&self) -> u64 {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canon.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn dynamics_spec(&self) -> Result<DynamicsSpec> {
        match &self.dynamics {
            DynamicsConfig::FiniteChain { rates } => {
                Ok(DynamicsSpec::FiniteChain(GeneratorMatrix::from_rows(rates)?))
            }
            DynamicsConfig::Diffusion { drift, dim, step } => Ok(DynamicsSpec::Diffusion {
                drift: drift.clone(),
                dim: *dim,
                step: *step,
            }),
        }
    }

    pub fn potential_value(&self) -> Result<Potential> {
        match (&self.potential, &self.dynamics) {
            (PotentialConfig::Table(t), _) => Ok(Potential::table(t.clone())),
            (PotentialConfig::Constant(c), _) => Ok(Potential::constant(*c)),
            (PotentialConfig::EigenFromH { h }, DynamicsConfig::Diffusion { drift, .. }) => {
                eigen_potential_from_h(h, drift)
            }
            (PotentialConfig::EigenFromH { .. }, _) => Err(Error::ValidationError(vec![
                "eigen_from_h potential requires diffusion dynamics".into(),
            ])),
        }
    }

    pub fn test_function_value(&self) -> Result<TestFunction> {
        Ok(match &self.test_function {
            TestFunctionConfig::Table(t) => TestFunction::table(t.clone()),
            TestFunctionConfig::Indicator { state } => {
                let d = match self.dynamics_spec()? {
                    DynamicsSpec::FiniteChain(g) => g.dim(),
                    _ => return Err(Error::OracleUnavailable),
                };
                TestFunction::indicator(d, *state)
            }
            TestFunctionConfig::Coordinate { index, sup_bound } => {
                TestFunction::coordinate(*index, *sup_bound)
            }
            TestFunctionConfig::TanhCoordinate { scale } => {
                TestFunction::tanh_coordinate(*scale)
            }
            TestFunctionConfig::Constant(c) => TestFunction::constant(*c),
        })
    }

    pub fn initial_law_value(&self) -> Result<InitialLaw> {
        Ok(match &self.initial_law {
            InitialLawConfig::Weights(w) => {
                InitialLaw::Finite(ProbabilityVector::normalized(w.clone())?)
            }
            InitialLawConfig::PointState(s) => InitialLaw::PointMassState(*s),
            InitialLawConfig::Point(x) => InitialLaw::PointMassEuclid(x.clone()),
            InitialLawConfig::Gaussian { mean, std } => InitialLaw::GaussianEuclid {
                mean: mean.clone(),
                std: *std,
            },
        })
    }

    /// Engine configuration for one particle count from the grid.
    pub fn engine_config(&self, n_particles: usize) -> Result<EngineConfig> {
        let potential = self.potential_value()?;
        let kernel = SelectionKernelSpec::new(self.kernel, &potential)?;
        Ok(EngineConfig {
            n_particles,
            horizon: self.horizon,
            obs_times: self.obs_times.clone(),
            dynamics: self.dynamics_spec()?,
            kernel,
            potential,
            initial_law: self.initial_law_value()?,
        })
    }

    /// Exact oracle, available for finite-chain scenarios only.
    pub fn oracle(&self) -> Result<Option<SemigroupOracle>> {
        match self.dynamics_spec()? {
            DynamicsSpec::FiniteChain(g) => {
                Ok(Some(build_oracle(&g, &self.potential_value()?)?))
            }
            DynamicsSpec::Diffusion { .. } => Ok(None),
        }
    }
}
