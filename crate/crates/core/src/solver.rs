//! Stochastic-approximation engines: the vanilla recursion, the
//! variance-reduced ROOT-SA recursion with burn-in, a restarting wrapper,
//! and the stepsize/burn-in tuning rules.
//!
//! A single run is strictly sequential; concurrency across runs is the
//! caller's business (each run owns its `RngStream`).

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use libm::{ceil, log, sqrt};

use crate::oracle::{draw_sample, empirical_operator_at, OracleError, RngStream};
use crate::problems::{ProblemError, ProblemInstance};
use crate::vecspace::{DenseVector, NormSpec, VecSpaceError};

/// Iterates whose sup norm passes this guard are treated as divergent.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// Errors from solver configuration and execution.
#[derive(Debug, Clone, PartialEq)]
pub enum SolverError {
    InvalidConfig(String),
    /// A stepsize fell outside (0, 1].
    InvalidStepsize { alpha: f64 },
    InvalidDelta { delta: f64 },
    InvalidGamma { gamma: f64 },
    /// Restart epochs consumed the sample budget before the final epoch.
    BudgetExhausted { needed: usize, available: usize },
    NonFinite,
    Problem(ProblemError),
    Oracle(OracleError),
    VecSpace(VecSpaceError),
}

impl fmt::Display for SolverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverError::InvalidConfig(what) => write!(f, "invalid config: {what}"),
            SolverError::InvalidStepsize { alpha } => {
                write!(f, "stepsize must lie in (0, 1], got {alpha}")
            }
            SolverError::InvalidDelta { delta } => {
                write!(f, "failure probability must lie in (0, 1), got {delta}")
            }
            SolverError::InvalidGamma { gamma } => {
                write!(f, "contraction factor must lie in [0, 1), got {gamma}")
            }
            SolverError::BudgetExhausted { needed, available } => {
                write!(f, "restart epochs need {needed} samples, only {available} available")
            }
            SolverError::NonFinite => write!(f, "iterate became non-finite"),
            SolverError::Problem(e) => write!(f, "{e}"),
            SolverError::Oracle(e) => write!(f, "{e}"),
            SolverError::VecSpace(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SolverError {}

impl From<ProblemError> for SolverError {
    fn from(e: ProblemError) -> Self {
        SolverError::Problem(e)
    }
}

impl From<OracleError> for SolverError {
    fn from(e: OracleError) -> Self {
        SolverError::Oracle(e)
    }
}

impl From<VecSpaceError> for SolverError {
    fn from(e: VecSpaceError) -> Self {
        SolverError::VecSpace(e)
    }
}

/// Wall-clock source. The core never reads a clock itself; callers inject
/// one (or none) so runs stay reproducible and `no_std`.
pub trait Clock {
    fn now_ms(&self) -> f64;
}

/// The do-nothing clock: every timestamp is zero.
pub struct NoClock;

impl Clock for NoClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

/// Stepsize schedule for the vanilla recursion.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `alpha_t = coeff / (t + 1)^exponent`
    Polynomial { coeff: f64, exponent: f64 },
}

impl StepSchedule {
    fn at(&self, t: usize) -> f64 {
        match self {
            StepSchedule::Constant(a) => *a,
            StepSchedule::Polynomial { coeff, exponent } => {
                coeff / libm::pow((t + 1) as f64, *exponent)
            }
        }
    }
}

/// Tuned run parameters for the ROOT-SA recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct RootSaConfig {
    pub alpha: f64,
    pub burn_in: usize,
    pub horizon: usize,
    pub restarts: usize,
    /// Restart epoch length multiplier: each short epoch runs for
    /// `ceil(epoch_mult * burn_in)` samples.
    pub epoch_mult: f64,
    /// Global sample indices at which diagnostics are recorded.
    pub checkpoints: Vec<usize>,
}

impl RootSaConfig {
    pub fn new(alpha: f64, burn_in: usize, horizon: usize) -> Result<Self, SolverError> {
        let cfg = Self {
            alpha,
            burn_in,
            horizon,
            restarts: 0,
            epoch_mult: 2.0,
            checkpoints: default_checkpoints(burn_in, horizon),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_epoch_mult(mut self, epoch_mult: f64) -> Self {
        self.epoch_mult = epoch_mult;
        self
    }

    pub fn with_checkpoints(mut self, checkpoints: Vec<usize>) -> Self {
        self.checkpoints = checkpoints;
        self
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(SolverError::InvalidStepsize { alpha: self.alpha });
        }
        if self.burn_in < 2 {
            return Err(SolverError::InvalidConfig(String::from("burn-in must be at least 2")));
        }
        if self.horizon < 2 * self.burn_in {
            return Err(SolverError::InvalidConfig(String::from(
                "horizon must be at least twice the burn-in",
            )));
        }
        if self.epoch_mult <= 1.0 {
            return Err(SolverError::InvalidConfig(String::from(
                "epoch multiplier must exceed 1",
            )));
        }
        if self.checkpoints.iter().any(|&c| c > self.horizon) {
            return Err(SolverError::InvalidConfig(String::from(
                "checkpoints must not exceed the horizon",
            )));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SolverError::InvalidConfig(String::from(
                "checkpoints must be strictly increasing",
            )));
        }
        Ok(())
    }

    fn epoch_len(&self) -> usize {
        ceil(self.epoch_mult * self.burn_in as f64) as usize
    }
}

/// Geometric checkpoint spacing `{ceil(B0 * 2^k)}` plus the horizon itself.
pub fn default_checkpoints(burn_in: usize, horizon: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut t = burn_in.max(1);
    while t < horizon {
        out.push(t);
        t = t.saturating_mul(2);
    }
    out.push(horizon);
    out.dedup();
    out
}

/// Algorithm state between recursion steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RootSaState {
    /// Samples consumed so far.
    pub t: usize,
    pub theta: DenseVector,
    /// The variance-reduced defect tracker.
    pub v: DenseVector,
    /// The one-step lag the coupled recursion evaluates alongside theta.
    pub theta_prev: DenseVector,
}

/// Per-checkpoint diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: usize,
    /// Operator defect of the current iterate in the trace norm.
    pub defect: f64,
    /// Estimation error when the fixed point is known.
    pub error: Option<f64>,
    /// `|| h(theta_{t-1}) - theta_{t-1} - v_t ||`: how far the tracker is
    /// from the exact defect vector. Zero in the noiseless case.
    pub tracker_gap: Option<f64>,
    pub wall_ms: f64,
}

/// Everything a run reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub checkpoints: Vec<Checkpoint>,
    pub final_theta: DenseVector,
    pub samples_used: u64,
    pub diverged: bool,
}

impl RunTrace {
    pub fn final_defect(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.defect)
    }
}

/// What to measure along a run.
pub struct TraceSpec {
    pub norm: NormSpec,
    pub theta_star: Option<DenseVector>,
}

impl TraceSpec {
    pub fn new(norm: NormSpec) -> Self {
        Self { norm, theta_star: None }
    }

    pub fn with_theta_star(mut self, theta_star: DenseVector) -> Self {
        self.theta_star = Some(theta_star);
        self
    }

    fn measure(
        &self,
        problem: &ProblemInstance,
        t: usize,
        theta: &DenseVector,
        v_against_prev: Option<(&DenseVector, &DenseVector)>,
        wall_ms: f64,
    ) -> Result<Checkpoint, SolverError> {
        let h = problem.population(theta)?;
        let defect = self.norm.eval(&h.sub(theta)?)?;
        let error = match &self.theta_star {
            Some(star) => Some(self.norm.eval(&theta.sub(star)?)?),
            None => None,
        };
        let tracker_gap = match v_against_prev {
            Some((v, theta_prev)) => {
                let h_prev = problem.population(theta_prev)?;
                let exact = h_prev.sub(theta_prev)?;
                Some(exact.sub(v)?.sup_norm())
            }
            None => None,
        };
        Ok(Checkpoint { t, defect, error, tracker_gap, wall_ms })
    }
}

fn guard(theta: &DenseVector) -> bool {
    theta.is_finite() && theta.sup_norm() <= DIVERGENCE_GUARD
}

/// Vanilla stochastic approximation:
/// `theta_{t+1} = theta_t + alpha_t (H_t(theta_t) - theta_t)`,
/// one oracle sample per step.
pub fn vanilla_sa_run(
    problem: &ProblemInstance,
    theta0: &DenseVector,
    schedule: &StepSchedule,
    n: usize,
    trace: &TraceSpec,
    rng: &mut RngStream,
    clock: &dyn Clock,
) -> Result<RunTrace, SolverError> {
    let start = clock.now_ms();
    let mut theta = theta0.clone();
    let mut checkpoints = Vec::new();
    let mut samples = 0u64;
    let mut diverged = false;
    // Vanilla runs don't carry a tuned burn-in; record on the generic
    // geometric grid plus the endpoint.
    let schedule_points = default_checkpoints(1, n);
    for t in 0..n {
        let alpha = schedule.at(t);
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(SolverError::InvalidStepsize { alpha });
        }
        let sample = draw_sample(problem, rng);
        samples += 1;
        let h = empirical_operator_at(problem, &sample, &theta)?;
        let next = theta.add_scaled(alpha, &h.sub(&theta)?)?;
        if !guard(&next) {
            diverged = true;
            break;
        }
        theta = next;
        if is_checkpoint(t + 1, &schedule_points) {
            checkpoints.push(trace.measure(
                problem,
                t + 1,
                &theta,
                None,
                clock.now_ms() - start,
            )?);
        }
    }
    Ok(RunTrace { checkpoints, final_theta: theta, samples_used: samples, diverged })
}

fn is_checkpoint(t: usize, schedule: &[usize]) -> bool {
    schedule.binary_search(&t).is_ok()
}

/// Burn-in: stream `b0` samples at the initial point and average their
/// defects into the tracker; the iterate does not move.
pub fn rootsa_burn_in(
    problem: &ProblemInstance,
    theta0: &DenseVector,
    b0: usize,
    rng: &mut RngStream,
) -> Result<RootSaState, SolverError> {
    if b0 < 2 {
        return Err(SolverError::InvalidConfig(String::from("burn-in must be at least 2")));
    }
    let mut acc = DenseVector::zeros(theta0.dim());
    for _ in 0..b0 {
        let sample = draw_sample(problem, rng);
        let h = empirical_operator_at(problem, &sample, theta0)?;
        acc = acc.add_scaled(1.0, &h.sub(theta0)?)?;
    }
    Ok(RootSaState {
        t: b0,
        theta: theta0.clone(),
        v: acc.scale(1.0 / b0 as f64),
        theta_prev: theta0.clone(),
    })
}

/// One variance-reduced step. Draws a single sample, evaluates the coupled
/// pair `H_t(theta_{t-1})`, `H_t(theta_{t-2})`, updates the tracker
///
/// `v_t = (H_t(theta_{t-1}) - theta_{t-1})
///        + ((t-1)/t) (v_{t-1} - (H_t(theta_{t-2}) - theta_{t-2}))`
///
/// and moves the iterate by `alpha * v_t`.
pub fn rootsa_step(
    state: RootSaState,
    problem: &ProblemInstance,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<RootSaState, SolverError> {
    let sample = draw_sample(problem, rng);
    let h_curr = empirical_operator_at(problem, &sample, &state.theta)?;
    let h_prev = empirical_operator_at(problem, &sample, &state.theta_prev)?;
    let t = state.t + 1;
    let weight = (t - 1) as f64 / t as f64;
    let defect_curr = h_curr.sub(&state.theta)?;
    let defect_prev = h_prev.sub(&state.theta_prev)?;
    let v = defect_curr.add_scaled(weight, &state.v.sub(&defect_prev)?)?;
    let theta = state.theta.add_scaled(alpha, &v)?;
    if !theta.is_finite() || !v.is_finite() {
        return Err(SolverError::NonFinite);
    }
    Ok(RootSaState { t, theta_prev: state.theta, theta, v })
}

struct EpochOutcome {
    state: RootSaState,
    diverged: bool,
}

/// Runs one burn-in plus recursion epoch of `samples` total samples,
/// recording any global checkpoints that fall inside it.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    problem: &ProblemInstance,
    theta0: &DenseVector,
    alpha: f64,
    b0: usize,
    samples: usize,
    offset: usize,
    trace: &TraceSpec,
    schedule: &[usize],
    out: &mut Vec<Checkpoint>,
    rng: &mut RngStream,
    clock: &dyn Clock,
    start_ms: f64,
) -> Result<EpochOutcome, SolverError> {
    debug_assert!(samples > b0);
    // Burn-in, checking the schedule sample by sample.
    let mut acc = DenseVector::zeros(theta0.dim());
    for k in 1..=b0 {
        let sample = draw_sample(problem, rng);
        let h = empirical_operator_at(problem, &sample, theta0)?;
        acc = acc.add_scaled(1.0, &h.sub(theta0)?)?;
        let global = offset + k;
        if k < b0 && is_checkpoint(global, schedule) {
            out.push(trace.measure(problem, global, theta0, None, clock.now_ms() - start_ms)?);
        }
    }
    let mut state = RootSaState {
        t: b0,
        theta: theta0.clone(),
        v: acc.scale(1.0 / b0 as f64),
        theta_prev: theta0.clone(),
    };
    if is_checkpoint(offset + b0, schedule) {
        out.push(trace.measure(
            problem,
            offset + b0,
            &state.theta,
            Some((&state.v, &state.theta_prev)),
            clock.now_ms() - start_ms,
        )?);
    }
    for local_t in (b0 + 1)..=samples {
        state = match rootsa_step(state, problem, alpha, rng) {
            Ok(s) => s,
            Err(SolverError::NonFinite) => {
                return Ok(EpochOutcome { state: diverged_placeholder(theta0), diverged: true })
            }
            Err(e) => return Err(e),
        };
        if !guard(&state.theta) {
            return Ok(EpochOutcome { state, diverged: true });
        }
        if is_checkpoint(offset + local_t, schedule) {
            out.push(trace.measure(
                problem,
                offset + local_t,
                &state.theta,
                Some((&state.v, &state.theta_prev)),
                clock.now_ms() - start_ms,
            )?);
        }
    }
    Ok(EpochOutcome { state, diverged: false })
}

fn diverged_placeholder(theta0: &DenseVector) -> RootSaState {
    RootSaState {
        t: 0,
        theta: theta0.clone(),
        v: DenseVector::zeros(theta0.dim()),
        theta_prev: theta0.clone(),
    }
}

/// A full ROOT-SA run: burn-in, then `n - B0` recursion steps; exactly `n`
/// oracle samples in total.
pub fn rootsa_run(
    config: &RootSaConfig,
    problem: &ProblemInstance,
    theta0: &DenseVector,
    trace: &TraceSpec,
    rng: &mut RngStream,
    clock: &dyn Clock,
) -> Result<RunTrace, SolverError> {
    config.validate()?;
    let start = clock.now_ms();
    let before = rng.samples_drawn();
    let mut checkpoints = Vec::new();
    let outcome = run_epoch(
        problem,
        theta0,
        config.alpha,
        config.burn_in,
        config.horizon,
        0,
        trace,
        &config.checkpoints,
        &mut checkpoints,
        rng,
        clock,
        start,
    )?;
    Ok(RunTrace {
        checkpoints,
        final_theta: outcome.state.theta,
        samples_used: rng.samples_drawn() - before,
        diverged: outcome.diverged,
    })
}

/// ROOT-SA with restarting: `R` short epochs of `ceil(epoch_mult * B0)`
/// samples, each warm-starting the next, then one long epoch on the
/// remaining budget. Total samples equal the horizon exactly.
pub fn rootsa_restart_run(
    config: &RootSaConfig,
    problem: &ProblemInstance,
    theta0: &DenseVector,
    trace: &TraceSpec,
    rng: &mut RngStream,
    clock: &dyn Clock,
) -> Result<RunTrace, SolverError> {
    config.validate()?;
    let start = clock.now_ms();
    let before = rng.samples_drawn();
    let epoch_len = config.epoch_len();
    let needed = config.restarts * epoch_len + 2 * config.burn_in;
    if needed > config.horizon {
        return Err(SolverError::BudgetExhausted { needed, available: config.horizon });
    }
    let mut checkpoints = Vec::new();
    let mut theta = theta0.clone();
    let mut offset = 0usize;
    let mut diverged = false;
    for _ in 0..config.restarts {
        let outcome = run_epoch(
            problem,
            &theta,
            config.alpha,
            config.burn_in,
            epoch_len,
            offset,
            trace,
            &config.checkpoints,
            &mut checkpoints,
            rng,
            clock,
            start,
        )?;
        theta = outcome.state.theta;
        offset += epoch_len;
        if outcome.diverged {
            diverged = true;
            break;
        }
    }
    if !diverged {
        let remaining = config.horizon - offset;
        let outcome = run_epoch(
            problem,
            &theta,
            config.alpha,
            config.burn_in,
            remaining,
            offset,
            trace,
            &config.checkpoints,
            &mut checkpoints,
            rng,
            clock,
            start,
        )?;
        theta = outcome.state.theta;
        diverged = outcome.diverged;
    }
    Ok(RunTrace {
        checkpoints,
        final_theta: theta,
        samples_used: rng.samples_drawn() - before,
        diverged,
    })
}

// ---------------------------------------------------------------------------
// Tuning rules
// ---------------------------------------------------------------------------

/// Which family's tuning rule applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TuningFamily {
    /// SSP and Markov games: `alpha = c / (sqrt(n log D) log(n/delta))`
    /// with `D` the number of Q coordinates over the full state space.
    SspOrGame { dim_product: usize },
    /// Average-cost evaluation: same form with `D = |X|`.
    AvgCost { states: usize },
    /// Generic contractive operators with per-sample Lipschitz constant `L`
    /// and the finite-dimensional `sqrt(log D)` entropy proxy.
    Generic { lipschitz: f64, dim_product: usize },
}

/// Contraction structure entering the burn-in rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContractionKind {
    Contractive { gamma: f64 },
    /// The operator is non-expansive and its m-fold composition halves
    /// distances.
    MultiStep { m: usize },
}

/// Raw stepsize formula `c / (L sqrt(n log_d) log(n/delta))`; exposed so
/// unit plug-ins can exercise it outside the validated range.
pub fn stepsize_formula(c: f64, lipschitz: f64, n: f64, log_dim: f64, delta: f64) -> f64 {
    c / (lipschitz * sqrt(n * log_dim) * log(n / delta))
}

/// Family-specific default stepsize.
pub fn default_stepsize(
    family: TuningFamily,
    n: usize,
    delta: f64,
    c: f64,
) -> Result<f64, SolverError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SolverError::InvalidDelta { delta });
    }
    if n < 2 {
        return Err(SolverError::InvalidConfig(String::from("n must be at least 2")));
    }
    if c <= 0.0 {
        return Err(SolverError::InvalidConfig(String::from("stepsize constant must be positive")));
    }
    let (lipschitz, dim) = match family {
        TuningFamily::SspOrGame { dim_product } => (1.0, dim_product),
        TuningFamily::AvgCost { states } => (1.0, states),
        TuningFamily::Generic { lipschitz, dim_product } => (lipschitz, dim_product),
    };
    if dim < 2 {
        return Err(SolverError::InvalidConfig(String::from("dimension product must be at least 2")));
    }
    if lipschitz <= 0.0 {
        return Err(SolverError::InvalidConfig(String::from("Lipschitz constant must be positive")));
    }
    let alpha = stepsize_formula(c, lipschitz, n as f64, log(dim as f64), delta);
    Ok(alpha.min(1.0))
}

/// Default burn-in: `ceil(c1 log(n/delta) / ((1-gamma)^2 alpha))` for
/// contractive operators, `ceil(c1 m log(n/delta) / alpha)` for m-step
/// contraction.
pub fn default_burnin(
    alpha: f64,
    contraction: ContractionKind,
    n: usize,
    delta: f64,
    c1: f64,
) -> Result<usize, SolverError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SolverError::InvalidDelta { delta });
    }
    if !(alpha > 0.0) {
        return Err(SolverError::InvalidStepsize { alpha });
    }
    let log_term = log(n as f64 / delta);
    let raw = match contraction {
        ContractionKind::Contractive { gamma } => {
            if !(0.0..1.0).contains(&gamma) {
                return Err(SolverError::InvalidGamma { gamma });
            }
            c1 * log_term / ((1.0 - gamma) * (1.0 - gamma) * alpha)
        }
        ContractionKind::MultiStep { m } => {
            if m == 0 {
                return Err(SolverError::InvalidConfig(String::from("m must be at least 1")));
            }
            c1 * m as f64 * log_term / alpha
        }
    };
    Ok(ceil(raw).max(2.0) as usize)
}

/// Default restart count `ceil(2 log n)`, used when the initialization
/// condition cannot be checked because the noise scale is unknown at
/// launch.
pub fn default_restarts(n: usize) -> usize {
    ceil(2.0 * log(n as f64)).max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{generator, NoiseSpec, TabularMdp};

    /// One state, one action, self-loop, zero reward: `h(q) = gamma * q`.
    fn scalar_problem(gamma: f64) -> ProblemInstance {
        let kernel = vec![vec![vec![1.0]]];
        let mdp = TabularMdp::new(kernel, vec![vec![0.0]], gamma, NoiseSpec::None).unwrap();
        ProblemInstance::Mdp(mdp)
    }

    fn sup_trace() -> TraceSpec {
        TraceSpec::new(NormSpec::Sup)
    }

    #[test]
    fn vanilla_scalar_examples() {
        let problem = scalar_problem(0.5);
        let theta0 = DenseVector::new(vec![1.0]).unwrap();
        let mut rng = RngStream::new(1, 0);
        // theta_1 = 1 + 0.5 (0.5 - 1) = 0.75
        let trace = vanilla_sa_run(
            &problem,
            &theta0,
            &StepSchedule::Constant(0.5),
            1,
            &sup_trace(),
            &mut rng,
            &NoClock,
        )
        .unwrap();
        assert!(libm::fabs(trace.final_theta[0] - 0.75) <= 1e-15);

        // Full step lands on h(theta0).
        let trace = vanilla_sa_run(
            &problem,
            &theta0,
            &StepSchedule::Constant(1.0),
            1,
            &sup_trace(),
            &mut rng,
            &NoClock,
        )
        .unwrap();
        assert!(libm::fabs(trace.final_theta[0] - 0.5) <= 1e-15);

        // Started at the fixed point, it stays there.
        let star = DenseVector::zeros(1);
        let trace = vanilla_sa_run(
            &problem,
            &star,
            &StepSchedule::Constant(0.5),
            100,
            &sup_trace(),
            &mut rng,
            &NoClock,
        )
        .unwrap();
        assert_eq!(trace.final_theta[0], 0.0);
        assert_eq!(trace.samples_used, 100);
    }

    #[test]
    fn vanilla_rejects_bad_stepsize() {
        let problem = scalar_problem(0.5);
        let theta0 = DenseVector::zeros(1);
        let mut rng = RngStream::new(1, 0);
        let err = vanilla_sa_run(
            &problem,
            &theta0,
            &StepSchedule::Constant(1.5),
            1,
            &sup_trace(),
            &mut rng,
            &NoClock,
        );
        assert!(matches!(err, Err(SolverError::InvalidStepsize { .. })));
    }

    #[test]
    fn burn_in_scalar_examples() {
        let problem = scalar_problem(0.5);
        let theta0 = DenseVector::new(vec![1.0]).unwrap();
        let mut rng = RngStream::new(2, 0);
        let state = rootsa_burn_in(&problem, &theta0, 2, &mut rng).unwrap();
        assert_eq!(state.t, 2);
        assert!(libm::fabs(state.v[0] + 0.5) <= 1e-15);
        assert_eq!(state.theta, theta0);
        assert_eq!(state.theta_prev, theta0);

        // At the fixed point the tracker is zero.
        let star = DenseVector::zeros(1);
        let state = rootsa_burn_in(&problem, &star, 5, &mut rng).unwrap();
        assert_eq!(state.v[0], 0.0);

        assert!(rootsa_burn_in(&problem, &theta0, 1, &mut rng).is_err());
    }

    #[test]
    fn rootsa_step_hand_values() {
        let problem = scalar_problem(0.5);
        let theta0 = DenseVector::new(vec![1.0]).unwrap();
        let mut rng = RngStream::new(3, 0);
        let state = rootsa_burn_in(&problem, &theta0, 2, &mut rng).unwrap();

        let state = rootsa_step(state, &problem, 0.1, &mut rng).unwrap();
        assert_eq!(state.t, 3);
        assert!(libm::fabs(state.v[0] + 0.5) <= 1e-15);
        assert!(libm::fabs(state.theta[0] - 0.95) <= 1e-15);

        let state = rootsa_step(state, &problem, 0.1, &mut rng).unwrap();
        assert_eq!(state.t, 4);
        assert!(libm::fabs(state.v[0] + 0.475) <= 1e-15);
        assert!(libm::fabs(state.theta[0] - 0.9025) <= 1e-15);

        // (1 - alpha (1 - gamma))^2 from theta0, the damped iteration.
        assert!(libm::fabs(state.theta[0] - 0.95 * 0.95) <= 1e-15);
    }

    #[test]
    fn rootsa_step_fixed_point_is_stationary() {
        let problem = scalar_problem(0.5);
        let star = DenseVector::zeros(1);
        let mut rng = RngStream::new(4, 0);
        let state = rootsa_burn_in(&problem, &star, 4, &mut rng).unwrap();
        let state = rootsa_step(state, &problem, 0.3, &mut rng).unwrap();
        assert_eq!(state.v[0], 0.0);
        assert_eq!(state.theta[0], 0.0);
    }

    #[test]
    fn rootsa_step_costs_one_sample() {
        let problem = scalar_problem(0.5);
        let theta0 = DenseVector::new(vec![1.0]).unwrap();
        let mut rng = RngStream::new(5, 0);
        let state = rootsa_burn_in(&problem, &theta0, 2, &mut rng).unwrap();
        assert_eq!(rng.samples_drawn(), 2);
        let _ = rootsa_step(state, &problem, 0.1, &mut rng).unwrap();
        assert_eq!(rng.samples_drawn(), 3);
    }

    #[test]
    fn noiseless_reduction_on_random_mdp() {
        // With a zero-noise oracle (deterministic kernel, no cost noise) the
        // tracker equals the exact defect vector at every post-burn-in step
        // and the defect decays geometrically.
        let mdp = generator::deterministic_mdp(41, 5, 3, 0.8).unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let theta0 = DenseVector::zeros(problem.dim());
        let alpha = 0.2;
        let n = 120;
        let config = RootSaConfig::new(alpha, 4, n)
            .unwrap()
            .with_checkpoints((4..=n).collect());
        let mut rng = RngStream::new(42, 0);
        let trace = rootsa_run(&config, &problem, &theta0, &sup_trace(), &mut rng, &NoClock)
            .unwrap();
        assert_eq!(trace.samples_used, n as u64);
        assert!(!trace.diverged);
        for c in &trace.checkpoints {
            if let Some(gap) = c.tracker_gap {
                assert!(gap <= 1e-12, "tracker gap {gap} at t={}", c.t);
            }
        }
        // Geometric decay bound on the final defect.
        let h0 = problem.population(&theta0).unwrap();
        let d0 = h0.sub(&theta0).unwrap().sup_norm();
        let rate = 1.0 - alpha * (1.0 - 0.8);
        let bound = libm::pow(rate, (n - 4) as f64) * d0 * (1.0 + 1e-9);
        assert!(trace.final_defect().unwrap() <= bound);
    }

    #[test]
    fn accounting_and_determinism() {
        let mdp = generator::mdp(51, 4, 2, 0.7, 1.0, NoiseSpec::Rademacher { amplitude: 1.0 })
            .unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let theta0 = DenseVector::zeros(problem.dim());
        let config = RootSaConfig::new(0.05, 8, 16).unwrap();
        let mut rng = RngStream::new(52, 7);
        let trace = rootsa_run(&config, &problem, &theta0, &sup_trace(), &mut rng, &NoClock)
            .unwrap();
        // n = 2 B0 leaves exactly B0 recursion steps, n samples total.
        assert_eq!(trace.samples_used, 16);
        assert_eq!(rng.samples_drawn(), 16);

        let mut rng2 = RngStream::new(52, 7);
        let trace2 = rootsa_run(&config, &problem, &theta0, &sup_trace(), &mut rng2, &NoClock)
            .unwrap();
        assert_eq!(trace, trace2);
    }

    #[test]
    fn restart_zero_equals_plain_run() {
        let mdp = generator::mdp(61, 4, 2, 0.7, 1.0, NoiseSpec::Rademacher { amplitude: 1.0 })
            .unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let theta0 = DenseVector::zeros(problem.dim());
        let config = RootSaConfig::new(0.05, 8, 64).unwrap();
        let mut a = RngStream::new(62, 0);
        let mut b = RngStream::new(62, 0);
        let plain = rootsa_run(&config, &problem, &theta0, &sup_trace(), &mut a, &NoClock)
            .unwrap();
        let restarted =
            rootsa_restart_run(&config, &problem, &theta0, &sup_trace(), &mut b, &NoClock)
                .unwrap();
        assert_eq!(plain, restarted);
    }

    #[test]
    fn restart_epoch_decay_noiseless() {
        // Tuned so each epoch at least halves the defect:
        // (1 - alpha (1 - gamma))^(epoch steps) <= 1/2.
        let mdp = generator::deterministic_mdp(63, 4, 2, 0.5).unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let theta0 = DenseVector::constant(problem.dim(), 50.0);
        let b0 = 10;
        let epoch = 20;
        let n = 3 * epoch + 4 * b0;
        let config = RootSaConfig::new(0.2, b0, n)
            .unwrap()
            .with_restarts(3)
            .with_checkpoints(vec![epoch, 2 * epoch, 3 * epoch, n]);
        let mut rng = RngStream::new(64, 0);
        let trace =
            rootsa_restart_run(&config, &problem, &theta0, &sup_trace(), &mut rng, &NoClock)
                .unwrap();
        assert_eq!(trace.samples_used, n as u64);
        let h0 = problem.population(&theta0).unwrap();
        let mut prev = h0.sub(&theta0).unwrap().sup_norm();
        for c in &trace.checkpoints[..3] {
            assert!(c.defect <= prev / 2.0, "epoch end defect {} vs {}", c.defect, prev);
            prev = c.defect;
        }

        // Starting at the fixed point, every epoch stays there.
        let star = crate::problems::fixed_point_oracle(&problem, 1e-13).unwrap();
        let mut rng = RngStream::new(65, 0);
        let trace =
            rootsa_restart_run(&config, &problem, &star, &sup_trace(), &mut rng, &NoClock)
                .unwrap();
        assert!(trace.final_defect().unwrap() <= 1e-12);
    }

    #[test]
    fn restart_budget_checked() {
        let mdp = generator::mdp(66, 4, 2, 0.5, 1.0, NoiseSpec::None).unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let theta0 = DenseVector::zeros(problem.dim());
        let config = RootSaConfig::new(0.2, 10, 50).unwrap().with_restarts(3);
        let mut rng = RngStream::new(67, 0);
        let err =
            rootsa_restart_run(&config, &problem, &theta0, &sup_trace(), &mut rng, &NoClock);
        assert!(matches!(err, Err(SolverError::BudgetExhausted { .. })));
    }

    #[test]
    fn tracker_identity_zero_noise() {
        // t z_t stays zero in the noiseless case for all t >= B0.
        let mdp = generator::deterministic_mdp(68, 3, 2, 0.6).unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let theta0 = DenseVector::from_fn(problem.dim(), |i| 1.0 + i as f64);
        let mut rng = RngStream::new(69, 0);
        let mut state = rootsa_burn_in(&problem, &theta0, 3, &mut rng).unwrap();
        for _ in 0..50 {
            // v_t tracks the defect at the previous iterate.
            let h = problem.population(&state.theta_prev).unwrap();
            let exact = h.sub(&state.theta_prev).unwrap();
            let z = exact.sub(&state.v).unwrap().sup_norm();
            assert!(z <= 1e-12);
            state = rootsa_step(state, &problem, 0.15, &mut rng).unwrap();
        }
    }

    #[test]
    fn tracker_recursion_identity_with_noise() {
        // t z_t = B0 z_B0 - sum_{k>B0} [k e_k(theta_{k-1}) - (k-1) e_k(theta_{k-2})]
        // where e_k(theta) = H_k(theta) - h(theta). Checked exactly by
        // replaying each step's sample from a cloned stream.
        use crate::oracle::{draw_sample, empirical_operator_at};
        let mdp = generator::mdp(70, 3, 2, 0.7, 1.0, NoiseSpec::Rademacher { amplitude: 1.0 })
            .unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let dim = problem.dim();
        let theta0 = DenseVector::from_fn(dim, |i| 0.5 * i as f64);
        let b0 = 4usize;
        let mut rng = RngStream::new(71, 0);
        let mut state = rootsa_burn_in(&problem, &theta0, b0, &mut rng).unwrap();

        let z_of = |state: &RootSaState| {
            let h = problem.population(&state.theta_prev).unwrap();
            h.sub(&state.theta_prev).unwrap().sub(&state.v).unwrap()
        };
        // Accumulates B0 z_B0 minus the noise terms.
        let mut expected = z_of(&state).scale(b0 as f64);
        for _ in 0..40 {
            let mut preview = rng.clone();
            let sample = draw_sample(&problem, &mut preview);
            let k = (state.t + 1) as f64;
            let eps_at = |theta: &DenseVector| {
                let emp = empirical_operator_at(&problem, &sample, theta).unwrap();
                emp.sub(&problem.population(theta).unwrap()).unwrap()
            };
            let eps_curr = eps_at(&state.theta);
            let eps_prev = eps_at(&state.theta_prev);
            expected = expected
                .add_scaled(-k, &eps_curr)
                .unwrap()
                .add_scaled(k - 1.0, &eps_prev)
                .unwrap();
            state = rootsa_step(state, &problem, 0.05, &mut rng).unwrap();
            let got = z_of(&state).scale(state.t as f64);
            assert!(got.sub(&expected).unwrap().sup_norm() <= 1e-10);
        }
    }

    #[test]
    fn vanilla_polynomial_schedule() {
        // alpha_t = 0.8 / (t + 1): two noiseless steps from theta0 = 1 give
        // theta_2 = (1 - 0.8 * 0.5)(1 - 0.4 * 0.5).
        let problem = scalar_problem(0.5);
        let theta0 = DenseVector::new(vec![1.0]).unwrap();
        let mut rng = RngStream::new(6, 0);
        let schedule = StepSchedule::Polynomial { coeff: 0.8, exponent: 1.0 };
        let trace = vanilla_sa_run(&problem, &theta0, &schedule, 2, &sup_trace(), &mut rng, &NoClock)
            .unwrap();
        let expected = (1.0 - 0.8 * 0.5) * (1.0 - 0.4 * 0.5);
        assert!(libm::fabs(trace.final_theta[0] - expected) <= 1e-15);
    }

    #[test]
    fn restart_checkpoints_strictly_increasing() {
        let mdp = generator::mdp(72, 4, 2, 0.7, 1.0, NoiseSpec::Rademacher { amplitude: 1.0 })
            .unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let theta0 = DenseVector::zeros(problem.dim());
        let n = 400;
        let config = RootSaConfig::new(0.05, 10, n)
            .unwrap()
            .with_restarts(3)
            .with_checkpoints((1..n).step_by(7).chain(core::iter::once(n)).collect());
        let mut rng = RngStream::new(73, 0);
        let trace =
            rootsa_restart_run(&config, &problem, &theta0, &sup_trace(), &mut rng, &NoClock)
                .unwrap();
        assert!(trace.checkpoints.windows(2).all(|w| w[0].t < w[1].t));
        assert_eq!(trace.checkpoints.last().unwrap().t, n);
        assert_eq!(trace.samples_used, n as u64);
    }

    #[test]
    fn stepsize_formula_examples() {
        // SSP plug-in: n = 1e4, D = 10, delta = 0.1, c = 1.
        let alpha = default_stepsize(TuningFamily::SspOrGame { dim_product: 10 }, 10_000, 0.1, 1.0)
            .unwrap();
        assert!(libm::fabs(alpha - 5.724e-4) <= 5e-7);
        // Monotone in n.
        let alpha2 =
            default_stepsize(TuningFamily::SspOrGame { dim_product: 10 }, 20_000, 0.1, 1.0)
                .unwrap();
        assert!(alpha2 < alpha);
        // Unit plug-in on the raw formula: log D = 1, log(n/delta) = 1, n = 1.
        assert!(libm::fabs(stepsize_formula(1.0, 1.0, 1.0, 1.0, 1.0 / core::f64::consts::E) - 1.0) <= 1e-12);
        // Invalid delta is rejected.
        assert!(default_stepsize(TuningFamily::AvgCost { states: 4 }, 100, 1.0, 1.0).is_err());
    }

    #[test]
    fn burnin_formula_examples() {
        // gamma = 0.75, alpha = 1, c1 log(n/delta) = 1 -> 16.
        let delta = 2.0 / core::f64::consts::E;
        let b = default_burnin(1.0, ContractionKind::Contractive { gamma: 0.75 }, 2, delta, 1.0)
            .unwrap();
        assert_eq!(b, 16);
        // m = 1, alpha = 0.5, c1 log(n/delta) = 1 -> 2.
        let b = default_burnin(0.5, ContractionKind::MultiStep { m: 1 }, 2, delta, 1.0).unwrap();
        assert_eq!(b, 2);
        // Halving alpha doubles the burn-in.
        let b1 = default_burnin(0.2, ContractionKind::Contractive { gamma: 0.5 }, 100, 0.1, 2.0)
            .unwrap();
        let b2 = default_burnin(0.1, ContractionKind::Contractive { gamma: 0.5 }, 100, 0.1, 2.0)
            .unwrap();
        assert!((b2 as i64 - 2 * b1 as i64).abs() <= 1);
        // gamma outside [0, 1) is rejected.
        assert!(matches!(
            default_burnin(0.1, ContractionKind::Contractive { gamma: 1.0 }, 100, 0.1, 2.0),
            Err(SolverError::InvalidGamma { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(RootSaConfig::new(0.0, 4, 100).is_err());
        assert!(RootSaConfig::new(0.5, 1, 100).is_err());
        assert!(RootSaConfig::new(0.5, 4, 7).is_err());
        let bad = RootSaConfig::new(0.5, 4, 100)
            .unwrap()
            .with_checkpoints(vec![5, 200]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_checkpoints_geometric() {
        assert_eq!(default_checkpoints(4, 40), vec![4, 8, 16, 32, 40]);
        assert_eq!(default_checkpoints(8, 16), vec![8, 16]);
    }
}
