//! The N-particle mean-field system.
//!
//! Between selection events every particle mutates freely. Selection
//! runs on a global Poisson clock of intensity N K*; each tick picks a
//! kill with probability (total selection rate)/(N K*) (thinning), the
//! victim proportionally to its own rate, and the replacement position
//! from the kernel's replacement law evaluated in the pre-event
//! configuration.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::dynamics::{mutate_diffusion, sample_jump_target, DriftSpec, DynamicsSpec};
use crate::error::{Error, Result};
use crate::kernels::{
    centered_stats, cumulative_inversion, rate_from_value, replacement_index, KernelVariant,
    SelectionKernelSpec,
};
use crate::rng::ReplicaRng;
use crate::types::{EmpiricalMeasure, Point, Potential, ProbabilityVector};

/// Relative slack on the dominating-rate check N K* >= total rate.
const RATE_BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    /// iid draws from a law on the finite state space.
    Finite(ProbabilityVector),
    /// all particles at one chain state.
    PointMassState(usize),
    /// all particles at one Euclidean point.
    PointMassEuclid(Vec<f64>),
    /// iid isotropic Gaussian draws.
    GaussianEuclid { mean: Vec<f64>, std: f64 },
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub n_particles: usize,
    pub horizon: f64,
    /// nondecreasing observation times within [0, horizon]
    pub obs_times: Vec<f64>,
    pub dynamics: DynamicsSpec,
    pub kernel: SelectionKernelSpec,
    pub potential: Potential,
    pub initial_law: InitialLaw,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidInitialLaw("need at least one particle".into()));
        }
        if self.horizon < 0.0 {
            return Err(Error::NegativeTime(self.horizon));
        }
        self.dynamics.validate()?;
        for w in self.obs_times.windows(2) {
            if w[1] < w[0] {
                return Err(Error::DimensionMismatch(
                    "observation times must be nondecreasing".into(),
                ));
            }
        }
        if let (Some(&first), Some(&last)) = (self.obs_times.first(), self.obs_times.last()) {
            if first < 0.0 || last > self.horizon {
                return Err(Error::DimensionMismatch(
                    "observation times must lie in [0, horizon]".into(),
                ));
            }
        }
        match (&self.dynamics, &self.initial_law) {
            (DynamicsSpec::FiniteChain(g), InitialLaw::Finite(p)) => {
                if p.len() != g.dim() {
                    return Err(Error::InvalidInitialLaw(format!(
                        "initial law on {} states, chain has {}",
                        p.len(),
                        g.dim()
                    )));
                }
            }
            (DynamicsSpec::FiniteChain(g), InitialLaw::PointMassState(s)) => {
                if *s >= g.dim() {
                    return Err(Error::IndexOutOfRange {
                        index: *s,
                        size: g.dim(),
                    });
                }
            }
            (DynamicsSpec::Diffusion { dim, .. }, InitialLaw::PointMassEuclid(x)) => {
                if x.len() != *dim {
                    return Err(Error::InvalidInitialLaw(
                        "initial point dimension mismatch".into(),
                    ));
                }
            }
            (DynamicsSpec::Diffusion { dim, .. }, InitialLaw::GaussianEuclid { mean, std }) => {
                if mean.len() != *dim {
                    return Err(Error::InvalidInitialLaw(
                        "initial mean dimension mismatch".into(),
                    ));
                }
                if !(*std >= 0.0) {
                    return Err(Error::InvalidInitialLaw("negative initial std".into()));
                }
            }
            _ => {
                return Err(Error::InvalidInitialLaw(
                    "initial law type does not match the dynamics".into(),
                ))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParticleSystemState {
    pub positions: Vec<Point>,
    pub time: f64,
    /// accepted selection events so far
    pub event_count: u64,
}

/// Draw the initial particle sample.
pub fn init(config: &EngineConfig, rng: &mut ReplicaRng) -> Result<ParticleSystemState> {
    config.validate()?;
    let n = config.n_particles;
    let r = &mut rng.init;
    let positions = match &config.initial_law {
        InitialLaw::Finite(p) => (0..n)
            .map(|_| Point::State(cumulative_inversion(p.weights(), r)))
            .collect(),
        InitialLaw::PointMassState(s) => vec![Point::State(*s); n],
        InitialLaw::PointMassEuclid(x) => vec![Point::Euclid(x.clone()); n],
        InitialLaw::GaussianEuclid { mean, std } => (0..n)
            .map(|_| {
                Point::Euclid(
                    mean.iter()
                        .map(|m| {
                            let z: f64 = rand_distr::StandardNormal.sample(r);
                            m + std * z
                        })
                        .collect(),
                )
            })
            .collect(),
    };
    Ok(ParticleSystemState {
        positions,
        time: 0.0,
        event_count: 0,
    })
}

/// Run the system to the horizon, firing `on_observe` at each requested
/// observation time (observations at an event time see the pre-event
/// configuration).
pub fn run(
    config: &EngineConfig,
    rng: &mut ReplicaRng,
    on_observe: impl FnMut(f64, &EmpiricalMeasure),
) -> Result<ParticleSystemState> {
    run_with_events(config, rng, on_observe, |_| {})
}

/// `run` plus a callback at each accepted selection event.
pub fn run_with_events(
    config: &EngineConfig,
    rng: &mut ReplicaRng,
    mut on_observe: impl FnMut(f64, &EmpiricalMeasure),
    mut on_event: impl FnMut(f64),
) -> Result<ParticleSystemState> {
    let state = init(config, rng)?;
    let n = config.n_particles;
    let kstar_n = config.kernel.rate_bound * n as f64;

    let mut driver = Driver::new(config, &state.positions)?;
    let mut event_count = 0u64;
    let mut obs_idx = 0usize;
    let clock = if kstar_n > 0.0 {
        Some(Exp::new(kstar_n).unwrap())
    } else {
        None
    };
    let mut next_event = clock
        .as_ref()
        .map(|c| c.sample(&mut rng.clock))
        .unwrap_or(f64::INFINITY);

    loop {
        let t_obs = config
            .obs_times
            .get(obs_idx)
            .copied()
            .unwrap_or(f64::INFINITY);
        let t_next = next_event.min(t_obs).min(config.horizon);
        driver.advance_to(t_next, &mut rng.mutation)?;

        if t_obs <= next_event && t_obs <= config.horizon {
            let eta = EmpiricalMeasure::new(driver.positions())?;
            on_observe(t_obs, &eta);
            obs_idx += 1;
            continue;
        }
        if next_event <= config.horizon {
            let t = next_event;
            let accepted = selection_tick(config, &mut driver, t, kstar_n, rng)?;
            if accepted {
                event_count += 1;
                on_event(t);
            }
            next_event = t + clock.as_ref().unwrap().sample(&mut rng.clock);
            continue;
        }
        break;
    }

    Ok(ParticleSystemState {
        positions: driver.positions(),
        time: config.horizon,
        event_count,
    })
}

/// One tick of the dominating Poisson clock: thinning, victim choice,
/// replacement. Returns whether a kill was accepted.
fn selection_tick(
    config: &EngineConfig,
    driver: &mut Driver<'_>,
    t: f64,
    kstar_n: f64,
    rng: &mut ReplicaRng,
) -> Result<bool> {
    let variant = config.kernel.variant;
    let (total, mean, neg_mean) = {
        let pot = driver.pot_values();
        match variant {
            KernelVariant::FlemingViot => (driver.pot_sum(), 0.0, 0.0),
            KernelVariant::Centered => {
                let (mean, neg_mean) = centered_stats(pot);
                // sum of positive parts equals sum of negative parts
                (2.0 * neg_mean * pot.len() as f64, mean, neg_mean)
            }
        }
    };
    if total > kstar_n * (1.0 + RATE_BOUND_SLACK) {
        return Err(Error::RateBoundViolated {
            observed: total,
            bound: kstar_n,
        });
    }
    if rng.thinning.random::<f64>() * kstar_n >= total {
        return Ok(false);
    }

    let victim = {
        let pot = driver.pot_values();
        match variant {
            KernelVariant::FlemingViot => cumulative_inversion(pot, &mut rng.victim),
            KernelVariant::Centered => {
                let rates: Vec<f64> = pot
                    .iter()
                    .map(|&v| rate_from_value(variant, v, mean, neg_mean))
                    .collect();
                cumulative_inversion(&rates, &mut rng.victim)
            }
        }
    };
    let target = {
        let pot = driver.pot_values();
        replacement_index(variant, pot[victim], pot, &mut rng.replacement)?
    };
    driver.clone_particle(victim, target, t, &mut rng.mutation);
    Ok(true)
}

// ---------------------------------------------------------------------
// mutation drivers

enum Driver<'a> {
    Chain(ChainDriver<'a>),
    Diffusion(DiffDriver<'a>),
}

impl<'a> Driver<'a> {
    fn new(config: &'a EngineConfig, positions: &[Point]) -> Result<Self> {
        match &config.dynamics {
            DynamicsSpec::FiniteChain(g) => {
                let states: Vec<usize> = positions
                    .iter()
                    .map(|p| p.state().ok_or(Error::OracleUnavailable))
                    .collect::<Result<_>>()?;
                Ok(Driver::Chain(ChainDriver::new(
                    g,
                    &config.potential,
                    states,
                )))
            }
            DynamicsSpec::Diffusion { drift, dim, step } => {
                let pts: Vec<Vec<f64>> = positions
                    .iter()
                    .map(|p| match p {
                        Point::Euclid(x) => Ok(x.clone()),
                        Point::State(_) => Err(Error::OracleUnavailable),
                    })
                    .collect::<Result<_>>()?;
                Ok(Driver::Diffusion(DiffDriver {
                    drift,
                    dim: *dim,
                    step: *step,
                    potential: &config.potential,
                    now: 0.0,
                    positions: pts,
                    pot: Vec::new(),
                    pot_fresh: false,
                }))
            }
        }
    }

    fn advance_to(&mut self, t: f64, rng: &mut impl Rng) -> Result<()> {
        match self {
            Driver::Chain(d) => {
                d.advance_to(t, rng);
                Ok(())
            }
            Driver::Diffusion(d) => d.advance_to(t, rng),
        }
    }

    fn pot_values(&mut self) -> &[f64] {
        match self {
            Driver::Chain(d) => &d.pot,
            Driver::Diffusion(d) => d.pot_values(),
        }
    }

    fn pot_sum(&self) -> f64 {
        match self {
            Driver::Chain(d) => d.pot_sum,
            Driver::Diffusion(d) => d.pot.iter().sum(),
        }
    }

    fn clone_particle(&mut self, victim: usize, target: usize, t: f64, rng: &mut impl Rng) {
        match self {
            Driver::Chain(d) => d.clone_particle(victim, target, t, rng),
            Driver::Diffusion(d) => {
                d.positions[victim] = d.positions[target].clone();
                d.pot_fresh = false;
            }
        }
    }

    fn positions(&self) -> Vec<Point> {
        match self {
            Driver::Chain(d) => d.states.iter().map(|&s| Point::State(s)).collect(),
            Driver::Diffusion(d) => d
                .positions
                .iter()
                .map(|x| Point::Euclid(x.clone()))
                .collect(),
        }
    }
}

/// Scheduled next jump of one particle; stale entries are recognized by
/// a generation counter bumped on cloning.
struct JumpEntry {
    time: f64,
    idx: u32,
    gen: u32,
}

impl PartialEq for JumpEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for JumpEntry {}
impl PartialOrd for JumpEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for JumpEntry {
    // reversed: BinaryHeap pops the earliest jump first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

/// Exact event-driven chain simulation with lazily invalidated
/// next-jump times and an incrementally maintained potential sum.
struct ChainDriver<'a> {
    g: &'a crate::oracle::GeneratorMatrix,
    pot_table: Vec<f64>,
    states: Vec<usize>,
    pot: Vec<f64>,
    pot_sum: f64,
    gen: Vec<u32>,
    heap: BinaryHeap<JumpEntry>,
    now: f64,
    seeded: bool,
}

impl<'a> ChainDriver<'a> {
    fn new(g: &'a crate::oracle::GeneratorMatrix, v: &Potential, states: Vec<usize>) -> Self {
        let pot_table: Vec<f64> = (0..g.dim()).map(|s| v.eval(&Point::State(s))).collect();
        let pot: Vec<f64> = states.iter().map(|&s| pot_table[s]).collect();
        let pot_sum = pot.iter().sum();
        let n = states.len();
        Self {
            g,
            pot_table,
            states,
            pot,
            pot_sum,
            gen: vec![0; n],
            heap: BinaryHeap::with_capacity(2 * n),
            now: 0.0,
            seeded: false,
        }
    }

    fn schedule(&mut self, idx: usize, from: f64, rng: &mut impl Rng) {
        let rate = self.g.exit_rate(self.states[idx]);
        if rate > 0.0 {
            let t = from + Exp::new(rate).unwrap().sample(rng);
            self.heap.push(JumpEntry {
                time: t,
                idx: idx as u32,
                gen: self.gen[idx],
            });
        }
    }

    fn advance_to(&mut self, t_end: f64, rng: &mut impl Rng) {
        if !self.seeded {
            // holding-time draws are deferred to the first advance so
            // that `init` costs no mutation randomness
            for i in 0..self.states.len() {
                self.schedule(i, 0.0, rng);
            }
            self.seeded = true;
        }
        while let Some(top) = self.heap.peek() {
            if top.time > t_end {
                break;
            }
            let e = self.heap.pop().unwrap();
            let idx = e.idx as usize;
            if e.gen != self.gen[idx] {
                continue; // invalidated by a clone
            }
            let s_new = sample_jump_target(self.g, self.states[idx], rng);
            self.pot_sum += self.pot_table[s_new] - self.pot[idx];
            self.states[idx] = s_new;
            self.pot[idx] = self.pot_table[s_new];
            self.schedule(idx, e.time, rng);
        }
        self.now = t_end;
    }

    fn clone_particle(&mut self, victim: usize, target: usize, t: f64, rng: &mut impl Rng) {
        let s = self.states[target];
        self.pot_sum += self.pot_table[s] - self.pot[victim];
        self.states[victim] = s;
        self.pot[victim] = self.pot_table[s];
        // memorylessness of the exponential holding time lets the clone
        // redraw its clock instead of inheriting the target's residual
        self.gen[victim] += 1;
        self.schedule(victim, t, rng);
    }
}

struct DiffDriver<'a> {
    drift: &'a DriftSpec,
    dim: usize,
    step: f64,
    potential: &'a Potential,
    now: f64,
    positions: Vec<Vec<f64>>,
    pot: Vec<f64>,
    pot_fresh: bool,
}

impl DiffDriver<'_> {
    fn advance_to(&mut self, t_end: f64, rng: &mut impl Rng) -> Result<()> {
        let dt = t_end - self.now;
        if dt > 0.0 {
            for p in &mut self.positions {
                mutate_diffusion(self.drift, p, dt, self.step, rng)?;
            }
            self.pot_fresh = false;
            self.now = t_end;
        }
        Ok(())
    }

    fn pot_values(&mut self) -> &[f64] {
        if !self.pot_fresh {
            self.pot = self
                .positions
                .iter()
                .map(|x| self.potential.eval(&Point::Euclid(x.clone())))
                .collect();
            self.pot_fresh = true;
        }
        &self.pot
    }

    // dim is carried for config validation and future multi-d use
    #[allow(dead_code)]
    fn dim(&self) -> usize {
        self.dim
    }
}
