//! Instance-dependent diagnostics: operator defect and estimation error,
//! noise covariance at the fixed point, Monte Carlo Gaussian complexity,
//! resolvent functionals, local linearization sets with their complexity
//! functionals, the rate fixed-point equation, mixing-time estimation, and
//! contraction audits.
//!
//! Monte Carlo estimates always carry standard errors; directional
//! variances are propagated exactly through covariance algebra rather than
//! sampled.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use libm::{fabs, log, pow, sqrt};

use crate::oracle::{draw_sample, empirical_operator_at, OracleError, RngStream};
use crate::problems::{
    policy_transition_operator, ProblemError, ProblemInstance, SspInstance, TabularMdp,
    WeightVector,
};
use crate::vecspace::{
    quotient_solve, DenseVector, LinearOperator, NormSpec, VecSpaceError,
};

/// Default sample count for covariance estimation.
pub const DEFAULT_COV_SAMPLES: usize = 100_000;
/// Default Monte Carlo draw count for Gaussian functionals.
pub const DEFAULT_MC_DRAWS: usize = 10_000;

/// Errors from diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub enum DiagnosticsError {
    InvalidInput(String),
    /// Covariance factorization failed even after jitter escalation.
    FactorizationFailed,
    /// The linearization set has more policies than the enumeration cap.
    EnumerationCap { per_state: Vec<usize> },
    /// The set is enumerable but too large for complexity evaluation.
    ComplexityCap { set_size: usize },
    /// The rate equation had no crossing on the scanned grid; the trace of
    /// `(s, rhs(s))` pairs is attached.
    NoCrossing { trace: Vec<(f64, f64)> },
    Problem(ProblemError),
    VecSpace(VecSpaceError),
    Oracle(OracleError),
}

impl fmt::Display for DiagnosticsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiagnosticsError::InvalidInput(s) => write!(f, "invalid input: {s}"),
            DiagnosticsError::FactorizationFailed => {
                write!(f, "covariance factorization failed after jitter")
            }
            DiagnosticsError::EnumerationCap { per_state } => {
                write!(f, "linearization set exceeds enumeration cap; per-state counts {per_state:?}")
            }
            DiagnosticsError::ComplexityCap { set_size } => {
                write!(f, "linearization set too large for complexity evaluation ({set_size})")
            }
            DiagnosticsError::NoCrossing { trace } => {
                write!(f, "rate equation has no crossing on [{:e}, {:e}] ({} scan points)",
                    trace.last().map_or(0.0, |p| p.0),
                    trace.first().map_or(0.0, |p| p.0),
                    trace.len())
            }
            DiagnosticsError::Problem(e) => write!(f, "{e}"),
            DiagnosticsError::VecSpace(e) => write!(f, "{e}"),
            DiagnosticsError::Oracle(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for DiagnosticsError {}

impl From<ProblemError> for DiagnosticsError {
    fn from(e: ProblemError) -> Self {
        DiagnosticsError::Problem(e)
    }
}

impl From<VecSpaceError> for DiagnosticsError {
    fn from(e: VecSpaceError) -> Self {
        DiagnosticsError::VecSpace(e)
    }
}

impl From<OracleError> for DiagnosticsError {
    fn from(e: OracleError) -> Self {
        DiagnosticsError::Oracle(e)
    }
}

// ---------------------------------------------------------------------------
// Defect and error measurements
// ---------------------------------------------------------------------------

/// Operator defect `|| h(theta) - theta ||` under the population operator.
pub fn operator_defect(
    problem: &ProblemInstance,
    theta: &DenseVector,
    norm: &NormSpec,
) -> Result<f64, DiagnosticsError> {
    let h = problem.population(theta)?;
    Ok(norm.eval(&h.sub(theta)?)?)
}

/// Estimation error `|| theta - theta_star ||`.
pub fn estimation_error(
    theta: &DenseVector,
    theta_star: &DenseVector,
    norm: &NormSpec,
) -> Result<f64, DiagnosticsError> {
    Ok(norm.eval(&theta.sub(theta_star)?)?)
}

/// Worst-case conversion from operator defect to estimation error,
/// `defect / (1 - gamma)`.
pub fn defect_to_error_bound(defect: f64, gamma: f64) -> Result<f64, DiagnosticsError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(DiagnosticsError::InvalidInput(String::from(
            "contraction factor must lie in [0, 1)",
        )));
    }
    Ok(defect / (1.0 - gamma))
}

// ---------------------------------------------------------------------------
// Covariance estimation and Gaussian draws
// ---------------------------------------------------------------------------

/// Empirical mean and covariance of the noise `H(theta*) - theta*`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovEstimate {
    dim: usize,
    mean: DenseVector,
    /// Row-major symmetric covariance matrix.
    cov: Vec<f64>,
    samples: u64,
}

impl CovEstimate {
    /// Wraps an explicit covariance matrix (for synthetic diagnostics).
    pub fn from_matrix(cov: Vec<f64>, dim: usize) -> Result<Self, DiagnosticsError> {
        if cov.len() != dim * dim {
            return Err(DiagnosticsError::InvalidInput(String::from(
                "covariance must be dim x dim",
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                if fabs(cov[i * dim + j] - cov[j * dim + i]) > 1e-12 {
                    return Err(DiagnosticsError::InvalidInput(String::from(
                        "covariance must be symmetric",
                    )));
                }
            }
        }
        Ok(Self { dim, mean: DenseVector::zeros(dim), cov, samples: 0 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &DenseVector {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.dim + j]
    }

    /// Covariance scaled by `c` (diagnostic what-ifs and tests).
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            mean: self.mean.clone(),
            cov: self.cov.iter().map(|x| c * x).collect(),
            samples: self.samples,
        }
    }

    /// Lower Cholesky factor with the documented diagonal jitter
    /// (`1e-12 * trace / dim`), treating tiny pivots as zero so rank
    /// deficiency is fine. Jitter escalates a few times before failing.
    fn cholesky(&self) -> Result<Vec<f64>, DiagnosticsError> {
        let d = self.dim;
        let trace: f64 = (0..d).map(|i| self.cov[i * d + i]).sum();
        let mut jitter = 1e-12 * trace / d.max(1) as f64;
        for _ in 0..4 {
            if let Some(l) = cholesky_psd(&self.cov, d, jitter) {
                return Ok(l);
            }
            jitter = (jitter * 100.0).max(1e-12 * trace.max(1e-300) / d.max(1) as f64);
        }
        Err(DiagnosticsError::FactorizationFailed)
    }
}

fn cholesky_psd(a: &[f64], d: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    let scale: f64 = (0..d).map(|i| fabs(a[i * d + i])).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-12 * scale;
    for j in 0..d {
        let mut diag = a[j * d + j] + jitter;
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if diag < -tol {
            return None;
        }
        if diag <= tol {
            // Semi-definite direction: zero column.
            continue;
        }
        let root = sqrt(diag);
        l[j * d + j] = root;
        for i in (j + 1)..d {
            let mut acc = a[i * d + j];
            for k in 0..j {
                acc -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = acc / root;
        }
    }
    Some(l)
}

/// Estimates mean and covariance of `H(theta*) - theta*` from `k`
/// independent generative samples.
pub fn noise_covariance(
    problem: &ProblemInstance,
    theta_star: &DenseVector,
    k: usize,
    rng: &mut RngStream,
) -> Result<CovEstimate, DiagnosticsError> {
    if k < 2 {
        return Err(DiagnosticsError::InvalidInput(String::from(
            "covariance needs at least 2 samples",
        )));
    }
    let d = problem.dim();
    let mut sum = vec![0.0; d];
    let mut outer = vec![0.0; d * d];
    for _ in 0..k {
        let sample = draw_sample(problem, rng);
        let h = empirical_operator_at(problem, &sample, theta_star)?;
        let x = h.sub(theta_star)?;
        let xs = x.as_slice();
        for i in 0..d {
            sum[i] += xs[i];
            for j in 0..=i {
                outer[i * d + j] += xs[i] * xs[j];
            }
        }
    }
    let kf = k as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / kf).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let c = (outer[i * d + j] - kf * mean[i] * mean[j]) / (kf - 1.0);
            cov[i * d + j] = c;
            cov[j * d + i] = c;
        }
    }
    Ok(CovEstimate { dim: d, mean: DenseVector::new(mean)?, cov, samples: k as u64 })
}

/// Exact maximal directional standard deviation of a Gaussian with
/// covariance `cov` over the extreme functionals generating `norm`.
fn exact_directional_sd(cov: &[f64], d: usize, norm: &NormSpec) -> Result<f64, DiagnosticsError> {
    let var = match norm {
        NormSpec::Sup => (0..d).map(|i| cov[i * d + i]).fold(0.0, f64::max),
        NormSpec::WeightedSup(w) => {
            if w.len() != d {
                return Err(DiagnosticsError::VecSpace(VecSpaceError::DimensionMismatch {
                    expected: d,
                    got: w.len(),
                }));
            }
            (0..d)
                .map(|i| cov[i * d + i] / (w[i] * w[i]))
                .fold(0.0, f64::max)
        }
        NormSpec::Span => {
            let mut m = 0.0f64;
            for i in 0..d {
                for j in (i + 1)..d {
                    m = m.max(cov[i * d + i] + cov[j * d + j] - 2.0 * cov[i * d + j]);
                }
            }
            m
        }
        NormSpec::CoordinateSet { functionals, .. } => {
            let mut m = 0.0f64;
            for u in functionals {
                if u.len() != d {
                    return Err(DiagnosticsError::VecSpace(VecSpaceError::DimensionMismatch {
                        expected: d,
                        got: u.len(),
                    }));
                }
                let mut quad = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        quad += u[i] * cov[i * d + j] * u[j];
                    }
                }
                m = m.max(quad);
            }
            m
        }
    };
    Ok(sqrt(var.max(0.0)))
}

/// Monte Carlo Gaussian complexity: `wbar` estimates the expected norm of
/// the Gaussian, `nu` is the exact maximal directional standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComplexity {
    pub wbar: f64,
    pub wbar_se: f64,
    pub nu: f64,
    pub samples: u64,
}

/// Draws `mc` Gaussian vectors through a symmetric factorization of the
/// covariance and averages their norms; the directional term is computed
/// exactly from the covariance.
pub fn gaussian_complexity(
    cov: &CovEstimate,
    norm: &NormSpec,
    mc: usize,
    rng: &mut RngStream,
) -> Result<GaussianComplexity, DiagnosticsError> {
    functional_with_matrix(None, cov, norm, mc, rng).map(|r| GaussianComplexity {
        wbar: r.mean,
        wbar_se: r.std_error,
        nu: r.directional_sd,
        samples: mc as u64,
    })
}

/// Monte Carlo estimate of `E || M W ||` with its standard error, plus the
/// exact maximal directional standard deviation of `M W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolventEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub directional_sd: f64,
}

fn functional_with_matrix(
    map: Option<&LinearOperator>,
    cov: &CovEstimate,
    norm: &NormSpec,
    mc: usize,
    rng: &mut RngStream,
) -> Result<ResolventEstimate, DiagnosticsError> {
    if mc == 0 {
        return Err(DiagnosticsError::InvalidInput(String::from("mc draws must be positive")));
    }
    let d = cov.dim();
    let chol = cov.cholesky()?;
    // Exact covariance propagation for the directional term.
    let propagated = match map {
        Some(m) => propagate_cov(cov.cov(), m),
        None => cov.cov().to_vec(),
    };
    let directional_sd = exact_directional_sd(&propagated, d, norm)?;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..mc {
        let w = gaussian_draw(&chol, d, rng);
        let y = match map {
            Some(m) => m.apply(&w)?,
            None => w,
        };
        let v = norm.eval(&y)?;
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / mc as f64;
    let var = (sumsq / mc as f64 - mean * mean).max(0.0);
    let std_error = sqrt(var / mc as f64);
    Ok(ResolventEstimate { mean, std_error, directional_sd })
}

fn propagate_cov(cov: &[f64], m: &LinearOperator) -> Vec<f64> {
    let d = m.dim();
    // tmp = M * cov
    let mut tmp = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let a = m.get(i, k);
            if a == 0.0 {
                continue;
            }
            for j in 0..d {
                tmp[i * d + j] += a * cov[k * d + j];
            }
        }
    }
    // out = tmp * M'
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += tmp[i * d + k] * m.get(j, k);
            }
            out[i * d + j] = acc;
        }
    }
    out
}

fn gaussian_draw(chol: &[f64], d: usize, rng: &mut RngStream) -> DenseVector {
    let mut step = rng.step_rng();
    let z: Vec<f64> = (0..d).map(|_| step.next_gaussian()).collect();
    DenseVector::from_fn(d, |i| {
        let mut acc = 0.0;
        for (k, zk) in z.iter().enumerate().take(i + 1) {
            acc += chol[i * d + k] * zk;
        }
        acc
    })
}

/// Monte Carlo estimate of `E || (I - A)^{-1} W ||` in the given norm.
pub fn resolvent_functional(
    a: &LinearOperator,
    cov: &CovEstimate,
    norm: &NormSpec,
    mc: usize,
    rng: &mut RngStream,
) -> Result<ResolventEstimate, DiagnosticsError> {
    let m = a.resolvent_matrix(1e-10)?;
    functional_with_matrix(Some(&m), cov, norm, mc, rng)
}

/// Monte Carlo estimate of `E || (I - P)^+ W ||` where the pseudo-inverse
/// acts on the span quotient (stationary-weighted mean zero).
pub fn quotient_resolvent_functional(
    p: &LinearOperator,
    xi: &[f64],
    cov: &CovEstimate,
    norm: &NormSpec,
    mc: usize,
    rng: &mut RngStream,
) -> Result<ResolventEstimate, DiagnosticsError> {
    let d = p.dim();
    let mut m = LinearOperator::zeros(d);
    for j in 0..d {
        let mut e = DenseVector::zeros(d);
        e.as_mut_slice()[j] = 1.0;
        let col = quotient_solve(p, xi, &e)?.solution;
        for i in 0..d {
            m.set(i, j, col[i]);
        }
    }
    functional_with_matrix(Some(&m), cov, norm, mc, rng)
}

// ---------------------------------------------------------------------------
// Local linearization sets and complexity functionals
// ---------------------------------------------------------------------------

const ENUMERATION_CAP: usize = 1_000_000;
const COMPLEXITY_CAP: usize = 4096;

/// A set of candidate local linearizations: the policies greedy for some
/// point within a given radius of the fixed point, with their transition
/// operators (scaled by the discount for discounted problems).
#[derive(Debug, Clone)]
pub struct LinearizationSet {
    pub policies: Vec<Vec<usize>>,
    pub operators: Vec<LinearOperator>,
}

fn candidate_actions(
    values: &[f64],
    n_states: usize,
    n_actions: usize,
    radius: f64,
    maximize: bool,
) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(n_states);
    for x in 0..n_states {
        let row = &values[x * n_actions..(x + 1) * n_actions];
        let best = if maximize {
            row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        } else {
            row.iter().fold(f64::INFINITY, |m, &v| m.min(v))
        };
        let mut cands = Vec::new();
        for (u, &v) in row.iter().enumerate() {
            let inside = if maximize { v >= best - 2.0 * radius } else { v <= best + 2.0 * radius };
            if inside {
                cands.push(u);
            }
        }
        out.push(cands);
    }
    out
}

fn enumerate_policies(candidates: &[Vec<usize>], cap: usize) -> Result<Vec<Vec<usize>>, DiagnosticsError> {
    let mut total = 1usize;
    for c in candidates {
        total = match total.checked_mul(c.len()) {
            Some(t) if t <= cap => t,
            _ => {
                return Err(DiagnosticsError::EnumerationCap {
                    per_state: candidates.iter().map(|c| c.len()).collect(),
                })
            }
        };
    }
    let mut out = Vec::with_capacity(total);
    let mut current = vec![0usize; candidates.len()];
    loop {
        out.push(current.iter().zip(candidates).map(|(&i, c)| c[i]).collect());
        // Odometer increment over the candidate lists.
        let mut pos = candidates.len();
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            current[pos] += 1;
            if current[pos] < candidates[pos].len() {
                break;
            }
            current[pos] = 0;
        }
    }
}

/// All policies greedy for some Q in the sup-ball of radius `s` around the
/// optimal Q-function: `Q*(x, pi(x)) >= max_u Q*(x, u) - 2 s` per state.
/// Operators are the discounted transition matrices `gamma P^pi`.
pub fn linearization_set_q(
    mdp: &TabularMdp,
    q_star: &DenseVector,
    s: f64,
) -> Result<LinearizationSet, DiagnosticsError> {
    if s < 0.0 {
        return Err(DiagnosticsError::InvalidInput(String::from("radius must be nonnegative")));
    }
    if q_star.dim() != mdp.dim() {
        return Err(DiagnosticsError::Problem(ProblemError::DimensionMismatch {
            expected: mdp.dim(),
            got: q_star.dim(),
        }));
    }
    let candidates = candidate_actions(q_star.as_slice(), mdp.states(), mdp.actions(), s, true);
    let policies = enumerate_policies(&candidates, ENUMERATION_CAP)?;
    let instance = ProblemInstance::Mdp(mdp.clone());
    let mut operators = Vec::with_capacity(policies.len());
    for policy in &policies {
        let op = policy_transition_operator(&instance, policy)?;
        operators.push(op.scale(mdp.discount()));
    }
    Ok(LinearizationSet { policies, operators })
}

/// The SSP analogue with argmin greedy sets; operators are the unscaled
/// substochastic `P^pi` restricted to non-absorbing coordinates.
pub fn linearization_set_ssp(
    ssp: &SspInstance,
    q_star: &DenseVector,
    s: f64,
) -> Result<LinearizationSet, DiagnosticsError> {
    if s < 0.0 {
        return Err(DiagnosticsError::InvalidInput(String::from("radius must be nonnegative")));
    }
    if q_star.dim() != ssp.dim() {
        return Err(DiagnosticsError::Problem(ProblemError::DimensionMismatch {
            expected: ssp.dim(),
            got: q_star.dim(),
        }));
    }
    let candidates =
        candidate_actions(q_star.as_slice(), ssp.states() - 1, ssp.actions(), s, false);
    let policies = enumerate_policies(&candidates, ENUMERATION_CAP)?;
    let instance = ProblemInstance::Ssp(ssp.clone());
    let mut operators = Vec::with_capacity(policies.len());
    for policy in &policies {
        operators.push(policy_transition_operator(&instance, policy)?);
    }
    Ok(LinearizationSet { policies, operators })
}

/// Which family's linearization sets a complexity model enumerates.
enum SetFamily {
    Mdp { mdp: TabularMdp, q_star: DenseVector },
    Ssp { ssp: SspInstance, q_star: DenseVector, w_max: f64 },
}

impl SetFamily {
    fn candidates(&self, s: f64) -> Vec<Vec<usize>> {
        match self {
            SetFamily::Mdp { mdp, q_star } => {
                candidate_actions(q_star.as_slice(), mdp.states(), mdp.actions(), s, true)
            }
            SetFamily::Ssp { ssp, q_star, .. } => {
                candidate_actions(q_star.as_slice(), ssp.states() - 1, ssp.actions(), s, false)
            }
        }
    }

    fn operator(&self, policy: &[usize]) -> Result<LinearOperator, DiagnosticsError> {
        match self {
            SetFamily::Mdp { mdp, .. } => {
                let inst = ProblemInstance::Mdp(mdp.clone());
                Ok(policy_transition_operator(&inst, policy)?.scale(mdp.discount()))
            }
            SetFamily::Ssp { ssp, .. } => {
                let inst = ProblemInstance::Ssp(ssp.clone());
                Ok(policy_transition_operator(&inst, policy)?)
            }
        }
    }

    /// Exact bounds on the resolvent gain `||(I - A)^{-1}||` over the set:
    /// every draw satisfies `||v|| * lo <= ||(I-A)^{-1} v|| <= ||v|| * hi`.
    fn gain_bounds(&self) -> (f64, f64) {
        match self {
            SetFamily::Mdp { mdp, .. } => {
                let g = mdp.discount();
                (1.0 / (1.0 + g), 1.0 / (1.0 - g))
            }
            SetFamily::Ssp { w_max, .. } => (0.5, *w_max),
        }
    }
}

struct PolicyData {
    /// `|| (I - A)^{-1} w_i ||_sup` for each frozen draw.
    draw_norms: Vec<f64>,
    /// Exact maximal directional standard deviation of `(I - A)^{-1} W`.
    nu: f64,
}

/// Evaluates the local complexity functionals `G(s)` and `nu(s)` over a
/// frozen set of Gaussian draws, caching per-policy resolvents so the rate
/// fixed-point solver can query many radii cheaply.
pub struct LocalComplexityModel {
    family: SetFamily,
    cov: Vec<f64>,
    dim: usize,
    draws: Vec<DenseVector>,
    cache: BTreeMap<Vec<usize>, PolicyData>,
}

impl LocalComplexityModel {
    pub fn new_mdp(
        mdp: &TabularMdp,
        q_star: &DenseVector,
        cov: &CovEstimate,
        mc: usize,
        rng: &mut RngStream,
    ) -> Result<Self, DiagnosticsError> {
        Self::build(
            SetFamily::Mdp { mdp: mdp.clone(), q_star: q_star.clone() },
            cov,
            mc,
            rng,
        )
    }

    pub fn new_ssp(
        ssp: &SspInstance,
        q_star: &DenseVector,
        weights: &WeightVector,
        cov: &CovEstimate,
        mc: usize,
        rng: &mut RngStream,
    ) -> Result<Self, DiagnosticsError> {
        Self::build(
            SetFamily::Ssp {
                ssp: ssp.clone(),
                q_star: q_star.clone(),
                w_max: weights.w_max(),
            },
            cov,
            mc,
            rng,
        )
    }

    fn build(
        family: SetFamily,
        cov: &CovEstimate,
        mc: usize,
        rng: &mut RngStream,
    ) -> Result<Self, DiagnosticsError> {
        if mc == 0 {
            return Err(DiagnosticsError::InvalidInput(String::from("mc draws must be positive")));
        }
        let dim = cov.dim();
        let chol = cov.cholesky()?;
        let draws = (0..mc).map(|_| gaussian_draw(&chol, dim, rng)).collect();
        Ok(Self { family, cov: cov.cov().to_vec(), dim, draws, cache: BTreeMap::new() })
    }

    /// Mean sup norm of the frozen draws (the Monte Carlo `E||W||`).
    pub fn frozen_wbar(&self) -> f64 {
        let total: f64 = self.draws.iter().map(|w| w.sup_norm()).sum();
        total / self.draws.len() as f64
    }

    /// Exact `nu` of the base covariance in the sup norm.
    pub fn base_nu(&self) -> f64 {
        exact_directional_sd(&self.cov, self.dim, &NormSpec::Sup).unwrap_or(0.0)
    }

    pub fn gain_bounds(&self) -> (f64, f64) {
        self.family.gain_bounds()
    }

    fn ensure_policy(&mut self, policy: Vec<usize>) -> Result<(), DiagnosticsError> {
        if self.cache.contains_key(&policy) {
            return Ok(());
        }
        let a = self.family.operator(&policy)?;
        let m = a.resolvent_matrix(1e-10)?;
        let draw_norms = self
            .draws
            .iter()
            .map(|w| m.apply(w).map(|y| y.sup_norm()))
            .collect::<Result<Vec<f64>, _>>()?;
        let propagated = propagate_cov(&self.cov, &m);
        let nu = exact_directional_sd(&propagated, self.dim, &NormSpec::Sup)?;
        self.cache.insert(policy, PolicyData { draw_norms, nu });
        Ok(())
    }

    /// `(G(s), nu(s))` over the linearization set at radius `s`.
    pub fn g_nu_at(&mut self, s: f64) -> Result<(f64, f64), DiagnosticsError> {
        let candidates = self.family.candidates(s);
        let policies = enumerate_policies(&candidates, ENUMERATION_CAP)?;
        if policies.len() > COMPLEXITY_CAP {
            return Err(DiagnosticsError::ComplexityCap { set_size: policies.len() });
        }
        for p in &policies {
            self.ensure_policy(p.clone())?;
        }
        let n = self.draws.len();
        let mut best = vec![f64::NEG_INFINITY; n];
        let mut nu = 0.0f64;
        for p in &policies {
            let data = &self.cache[p];
            for (b, &v) in best.iter_mut().zip(&data.draw_norms) {
                if v > *b {
                    *b = v;
                }
            }
            nu = nu.max(data.nu);
        }
        let g = best.iter().sum::<f64>() / n as f64;
        Ok((g, nu))
    }
}

/// One-shot `(G(s), nu(s))` for a discounted MDP.
pub fn local_complexity(
    mdp: &TabularMdp,
    q_star: &DenseVector,
    cov: &CovEstimate,
    s: f64,
    mc: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64), DiagnosticsError> {
    let mut model = LocalComplexityModel::new_mdp(mdp, q_star, cov, mc, rng)?;
    model.g_nu_at(s)
}

// ---------------------------------------------------------------------------
// The rate fixed-point equation
// ---------------------------------------------------------------------------

/// Constants entering the higher-order proxy and the rate equation.
#[derive(Debug, Clone, PartialEq)]
pub struct RateParams {
    pub delta: f64,
    /// Contraction factor of the population operator (for SSP use
    /// `1 - 1/w_max`).
    pub gamma: f64,
    /// Per-sample Lipschitz constant of the empirical operator.
    pub lipschitz: f64,
    /// Almost-sure bound on the noise at the fixed point.
    pub b_star: f64,
    /// Number of coordinates `D` entering the entropy proxies
    /// `sqrt(log D)` and `log D`.
    pub dim_product: f64,
    /// Multiplier on the whole higher-order term (the theory fixes only its
    /// shape, not its constant).
    pub hot_constant: f64,
    /// Stepsize; `None` plugs in the optimal-order formula.
    pub alpha: Option<f64>,
}

/// Stepsize of optimal order for the higher-order proxy.
pub fn optimal_stepsize_proxy(n: f64, p: &RateParams) -> f64 {
    let j2 = sqrt(log(p.dim_product));
    1.0 / (p.lipschitz * j2 * log(n / p.delta) * sqrt(n))
}

/// Higher-order term of the rate equation with the finite-dimensional
/// entropy proxies `J2 = sqrt(log D)`, `J1 = log D`.
pub fn higher_order_term(n: f64, wbar: f64, p: &RateParams) -> f64 {
    let log_nd = log(n / p.delta);
    let j2 = sqrt(log(p.dim_product));
    let j1 = log(p.dim_product);
    let alpha = p.alpha.unwrap_or_else(|| optimal_stepsize_proxy(n, p));
    let one_minus = 1.0 - p.gamma;
    let first = (j2 * p.lipschitz * sqrt(alpha / n) + 1.0 / (n * sqrt(alpha))) * wbar;
    let second = (j2 * p.lipschitz * alpha / sqrt(n) + 1.0 / n) * p.b_star * (j1 + log_nd);
    p.hot_constant * log_nd / (one_minus * one_minus) * (first + second)
}

/// Largest solution of `s = rhs(s)` on `[s_lo, s_hi]`: a 256-point
/// geometric downward scan finds the highest sign change, then bisection
/// refines it. With no crossing anywhere, the scan trace is returned in the
/// error.
pub fn solve_rate_fixed_point<F>(
    mut rhs: F,
    s_lo: f64,
    s_hi: f64,
) -> Result<f64, DiagnosticsError>
where
    F: FnMut(f64) -> Result<f64, DiagnosticsError>,
{
    if !(s_lo > 0.0 && s_hi > s_lo) {
        return Err(DiagnosticsError::InvalidInput(String::from(
            "need 0 < s_lo < s_hi",
        )));
    }
    const GRID: usize = 256;
    let ratio = s_lo / s_hi;
    let mut trace = Vec::with_capacity(GRID);
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..GRID {
        let s = s_hi * pow(ratio, k as f64 / (GRID - 1) as f64);
        let r = rhs(s)?;
        trace.push((s, r));
        let g = r - s;
        if g == 0.0 {
            return Ok(s);
        }
        if let Some((ps, pg)) = prev {
            // Scanning downward: the first bracket where the residual turns
            // positive contains the largest root.
            if pg < 0.0 && g > 0.0 {
                return bisect_root(&mut rhs, s, ps);
            }
        }
        prev = Some((s, g));
    }
    Err(DiagnosticsError::NoCrossing { trace })
}

fn bisect_root<F>(rhs: &mut F, mut lo: f64, mut hi: f64) -> Result<f64, DiagnosticsError>
where
    F: FnMut(f64) -> Result<f64, DiagnosticsError>,
{
    // Invariant: rhs(lo) - lo > 0, rhs(hi) - hi < 0.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let g = rhs(mid)? - mid;
        if g == 0.0 {
            return Ok(mid);
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-9 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Solution of the instance rate equation, with the exact uniform band the
/// largest root must fall in.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSolution {
    pub s_star: f64,
    pub lower: f64,
    pub upper: f64,
    pub wbar: f64,
    pub nu: f64,
    pub higher_order: f64,
}

/// Solves `s = G(2s)/sqrt(n) + nu(2s) sqrt(log(1/delta)/n) + H_n` for the
/// largest root over a frozen-draw complexity model.
pub fn solve_rate_equation(
    model: &mut LocalComplexityModel,
    n: usize,
    params: &RateParams,
) -> Result<RateSolution, DiagnosticsError> {
    if !(params.delta > 0.0 && params.delta < 1.0) {
        return Err(DiagnosticsError::InvalidInput(String::from("delta must lie in (0,1)")));
    }
    if params.dim_product < 2.0 {
        return Err(DiagnosticsError::InvalidInput(String::from(
            "dim_product must be at least 2 for the entropy proxies",
        )));
    }
    let nf = n as f64;
    let wbar = model.frozen_wbar();
    let nu = model.base_nu();
    let hot = higher_order_term(nf, wbar, params);
    let (gain_lo, gain_hi) = model.gain_bounds();
    let log_term = sqrt(log(1.0 / params.delta) / nf);
    let upper = gain_hi * (wbar / sqrt(nf) + nu * log_term) + hot;
    let lower = gain_lo * (wbar / sqrt(nf) + nu * log_term) + hot;
    if !upper.is_finite() {
        return Err(DiagnosticsError::InvalidInput(String::from(
            "rate equation bound is not finite",
        )));
    }
    // A noiseless instance solves the equation trivially.
    if upper <= 0.0 {
        return Ok(RateSolution { s_star: 0.0, lower, upper, wbar, nu, higher_order: hot });
    }
    let s_hi = upper * 1.001;
    let s_lo = (lower * 1e-6).max(upper * 1e-12);
    let s_star = solve_rate_fixed_point(
        |s| {
            let (g, nu_s) = model.g_nu_at(2.0 * s)?;
            Ok(g / sqrt(nf) + nu_s * log_term + hot)
        },
        s_lo,
        s_hi,
    )?;
    Ok(RateSolution { s_star, lower, upper, wbar, nu, higher_order: hot })
}

// ---------------------------------------------------------------------------
// Mixing time and contraction audits
// ---------------------------------------------------------------------------

/// Mixing-time estimate: the smallest power of the kernel whose rows are
/// pairwise within total-variation distance one half.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingEstimate {
    pub t_mix: Option<usize>,
    /// Max pairwise TV at `t_mix` on success, at the cap on failure.
    pub max_tv: f64,
}

/// Power iteration (no squaring) computing exact pairwise row TV at each
/// step; failure to mix within `cap` steps is a value, not an error.
pub fn mixing_time(p: &LinearOperator, cap: usize) -> MixingEstimate {
    let mut m = p.clone();
    let mut tv = max_pairwise_tv(&m);
    for t in 1..=cap {
        if t > 1 {
            m = m.matmul(p).expect("square");
            tv = max_pairwise_tv(&m);
        }
        if tv <= 0.5 {
            return MixingEstimate { t_mix: Some(t), max_tv: tv };
        }
    }
    MixingEstimate { t_mix: None, max_tv: tv }
}

fn max_pairwise_tv(m: &LinearOperator) -> f64 {
    let d = m.dim();
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in (i + 1)..d {
            let mut tv = 0.0;
            for k in 0..d {
                tv += fabs(m.get(i, k) - m.get(j, k));
            }
            worst = worst.max(0.5 * tv);
        }
    }
    worst
}

/// Max ratio `|| op^steps(a) - op^steps(b) || / || a - b ||` over random
/// coordinatewise-uniform pairs. Pairs closer than 1e-12 are discarded.
pub fn operator_contraction_audit<F>(
    mut op: F,
    dim: usize,
    norm: &NormSpec,
    pairs: usize,
    rng: &mut RngStream,
    steps: usize,
) -> Result<f64, DiagnosticsError>
where
    F: FnMut(&DenseVector) -> Result<DenseVector, DiagnosticsError>,
{
    if pairs == 0 || steps == 0 {
        return Err(DiagnosticsError::InvalidInput(String::from(
            "audit needs at least one pair and one step",
        )));
    }
    let span = matches!(norm, NormSpec::Span);
    let mut worst = 0.0f64;
    let mut done = 0usize;
    while done < pairs {
        let mut step = rng.step_rng();
        let mut a = DenseVector::from_fn(dim, |_| step.next_symmetric());
        let mut b = DenseVector::from_fn(dim, |_| step.next_symmetric());
        if span {
            a = canonicalize_min_zero(&a);
            b = canonicalize_min_zero(&b);
        }
        let denom = norm.eval(&a.sub(&b)?)?;
        if denom < 1e-12 {
            continue;
        }
        let mut ya = a;
        let mut yb = b;
        for _ in 0..steps {
            ya = op(&ya)?;
            yb = op(&yb)?;
        }
        let num = norm.eval(&ya.sub(&yb)?)?;
        worst = worst.max(num / denom);
        done += 1;
    }
    Ok(worst)
}

fn canonicalize_min_zero(v: &DenseVector) -> DenseVector {
    let lo = v.as_slice().iter().fold(f64::INFINITY, |m, &x| m.min(x));
    DenseVector::from_fn(v.dim(), |i| v[i] - lo)
}

/// Contraction audit of a problem's population operator.
pub fn contraction_audit(
    problem: &ProblemInstance,
    norm: &NormSpec,
    pairs: usize,
    rng: &mut RngStream,
    steps: usize,
) -> Result<f64, DiagnosticsError> {
    operator_contraction_audit(
        |theta| problem.population(theta).map_err(DiagnosticsError::from),
        problem.dim(),
        norm,
        pairs,
        rng,
        steps,
    )
}

// ---------------------------------------------------------------------------
// Structured-text audit reports
// ---------------------------------------------------------------------------

/// One key-value block of an audit report.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditCheck {
    pub name: String,
    pub passed: bool,
    pub fields: Vec<(String, String)>,
}

impl AuditCheck {
    pub fn new(name: &str, passed: bool) -> Self {
        Self { name: String::from(name), passed, fields: Vec::new() }
    }

    pub fn field(mut self, key: &str, value: String) -> Self {
        self.fields.push((String::from(key), value));
        self
    }
}

/// A machine-parsable audit report: one `[check ...]` block per check.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn push(&mut self, check: AuditCheck) {
        self.checks.push(check);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        use core::fmt::Write;
        let mut out = String::new();
        for check in &self.checks {
            let _ = writeln!(out, "[check {}]", check.name);
            let _ = writeln!(out, "status = {}", if check.passed { "pass" } else { "fail" });
            for (k, v) in &check.fields {
                let _ = writeln!(out, "{k} = {v}");
            }
            let _ = writeln!(out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{
        fixed_point_oracle, generator, ssp_weights, NoiseSpec, SspInstance, TabularMdp,
    };

    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

    fn chain_ssp() -> SspInstance {
        let kernel = vec![vec![
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ]];
        let costs = vec![vec![0.0], vec![1.0], vec![1.0]];
        SspInstance::new(kernel, costs, NoiseSpec::None).unwrap()
    }

    #[test]
    fn defect_and_error_examples() {
        let mdp = generator::mdp(71, 4, 2, 0.8, 1.0, NoiseSpec::None).unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let star = fixed_point_oracle(&problem, 1e-13).unwrap();
        assert!(operator_defect(&problem, &star, &NormSpec::Sup).unwrap() <= 1e-12);
        assert!(estimation_error(&star, &star, &NormSpec::Sup).unwrap() == 0.0);

        // SSP chain at zero: defect is ||(1,1)||.
        let ssp = ProblemInstance::Ssp(chain_ssp());
        let zero = DenseVector::zeros(2);
        assert!(fabs(operator_defect(&ssp, &zero, &NormSpec::Sup).unwrap() - 1.0) <= 1e-12);
        let w = ssp_weights(&chain_ssp()).unwrap();
        assert!(fabs(operator_defect(&ssp, &zero, &w.norm()).unwrap() - 1.0) <= 1e-9);

        // Applying h contracts the defect.
        let mut rng = RngStream::new(72, 0);
        let mut step = rng.step_rng();
        let mdp = generator::mdp(73, 4, 2, 0.8, 1.0, NoiseSpec::None).unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        for _ in 0..20 {
            let theta = DenseVector::from_fn(8, |_| 3.0 * step.next_symmetric());
            let d0 = operator_defect(&problem, &theta, &NormSpec::Sup).unwrap();
            let h = problem.population(&theta).unwrap();
            let d1 = operator_defect(&problem, &h, &NormSpec::Sup).unwrap();
            assert!(d1 <= 0.8 * d0 + 1e-12);
        }

        // gamma = 0: the bound equals the defect.
        assert_eq!(defect_to_error_bound(0.37, 0.0).unwrap(), 0.37);
        assert!(defect_to_error_bound(1.0, 1.0).is_err());
    }

    #[test]
    fn error_bounded_by_defect_conversion() {
        let mut rng = RngStream::new(74, 0);
        for seed in 0..10 {
            let mdp = generator::mdp(100 + seed, 4, 2, 0.75, 1.0, NoiseSpec::None).unwrap();
            let problem = ProblemInstance::Mdp(mdp);
            let star = fixed_point_oracle(&problem, 1e-13).unwrap();
            let mut step = rng.step_rng();
            let theta = DenseVector::from_fn(8, |_| 2.0 * step.next_symmetric());
            let err = estimation_error(&theta, &star, &NormSpec::Sup).unwrap();
            let defect = operator_defect(&problem, &theta, &NormSpec::Sup).unwrap();
            let bound = defect_to_error_bound(defect, 0.75).unwrap();
            assert!(err <= bound + 1e-10);
        }
    }

    #[test]
    fn covariance_zero_noise() {
        let kernel = vec![vec![vec![0.0, 1.0], vec![0.0, 1.0]]];
        let mdp = TabularMdp::new(kernel, vec![vec![1.0], vec![0.0]], 0.5, NoiseSpec::None)
            .unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let star = fixed_point_oracle(&problem, 1e-14).unwrap();
        let mut rng = RngStream::new(75, 0);
        let cov = noise_covariance(&problem, &star, 100, &mut rng).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(fabs(cov.entry(i, j)) <= 1e-20);
            }
        }
    }

    #[test]
    fn covariance_rademacher_identity() {
        // Deterministic kernel, unit Rademacher cost noise: the noise at the
        // fixed point is exactly the reward noise, so the covariance is the
        // identity.
        let kernel = vec![vec![vec![0.0, 1.0], vec![0.0, 1.0]]];
        let mdp = TabularMdp::new(
            kernel,
            vec![vec![1.0], vec![0.0]],
            0.5,
            NoiseSpec::Rademacher { amplitude: 1.0 },
        )
        .unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let star = fixed_point_oracle(&problem, 1e-14).unwrap();
        let mut rng = RngStream::new(76, 0);
        let k = 1_000_000;
        let cov = noise_covariance(&problem, &star, k, &mut rng).unwrap();
        for i in 0..2 {
            assert!(fabs(cov.entry(i, i) - 1.0) <= 0.02);
        }
        assert!(fabs(cov.entry(0, 1)) <= 0.02);
        // Unbiasedness: mean within 5 standard errors of zero.
        let se = 1.0 / sqrt(k as f64);
        assert!(cov.mean().sup_norm() <= 5.0 * se);
    }

    #[test]
    fn gaussian_complexity_examples() {
        // Zero covariance.
        let cov = CovEstimate::from_matrix(vec![0.0], 1).unwrap();
        let mut rng = RngStream::new(77, 0);
        let gc = gaussian_complexity(&cov, &NormSpec::Sup, 1000, &mut rng).unwrap();
        assert_eq!(gc.wbar, 0.0);
        assert_eq!(gc.nu, 0.0);

        // Unit variance in dimension one: E|Z| = sqrt(2/pi), nu = 1 exactly.
        let cov = CovEstimate::from_matrix(vec![1.0], 1).unwrap();
        let mut rng = RngStream::new(78, 0);
        let gc = gaussian_complexity(&cov, &NormSpec::Sup, 20_000, &mut rng).unwrap();
        assert!(fabs(gc.wbar - SQRT_2_OVER_PI) <= 3.0 * gc.wbar_se);
        assert_eq!(gc.nu, 1.0);

        // Scaling the covariance by 4 doubles nu exactly and wbar within
        // Monte Carlo error.
        let scaled = cov.scaled(4.0);
        let mut rng = RngStream::new(79, 0);
        let gc4 = gaussian_complexity(&scaled, &NormSpec::Sup, 20_000, &mut rng).unwrap();
        assert_eq!(gc4.nu, 2.0);
        assert!(fabs(gc4.wbar - 2.0 * gc.wbar) <= 3.0 * (gc4.wbar_se + 2.0 * gc.wbar_se));
    }

    #[test]
    fn directional_sd_per_norm() {
        // 2x2 covariance with correlation.
        let cov = vec![1.0, 0.5, 0.5, 2.0];
        assert!(fabs(exact_directional_sd(&cov, 2, &NormSpec::Sup).unwrap() - sqrt(2.0)) <= 1e-15);
        let w = NormSpec::WeightedSup(vec![1.0, 4.0]);
        assert!(fabs(exact_directional_sd(&cov, 2, &w).unwrap() - 1.0) <= 1e-15);
        // Span: var(W1 - W2) = 1 + 2 - 2*0.5 = 2.
        assert!(fabs(exact_directional_sd(&cov, 2, &NormSpec::Span).unwrap() - sqrt(2.0)) <= 1e-15);
        let cs = NormSpec::coordinate_set(vec![vec![1.0, 1.0]], 2.0).unwrap();
        // var(W1 + W2) = 1 + 2 + 2*0.5 = 4.
        assert!(fabs(exact_directional_sd(&cov, 2, &cs).unwrap() - 2.0) <= 1e-15);
    }

    #[test]
    fn resolvent_functional_examples() {
        let cov = CovEstimate::from_matrix(vec![1.0], 1).unwrap();
        // A = 0 reduces to the Gaussian complexity (same stream, same draws).
        let a = LinearOperator::zeros(1);
        let mut r1 = RngStream::new(80, 0);
        let mut r2 = RngStream::new(80, 0);
        let via_res = resolvent_functional(&a, &cov, &NormSpec::Sup, 5000, &mut r1).unwrap();
        let via_gc = gaussian_complexity(&cov, &NormSpec::Sup, 5000, &mut r2).unwrap();
        assert!(fabs(via_res.mean - via_gc.wbar) <= 1e-15);

        // Zero covariance gives zero.
        let zero = CovEstimate::from_matrix(vec![0.0], 1).unwrap();
        let mut rng = RngStream::new(81, 0);
        let est = resolvent_functional(&a, &zero, &NormSpec::Sup, 100, &mut rng).unwrap();
        assert_eq!(est.mean, 0.0);

        // Scalar resolvent 1/(1 - 0.5) doubles the half-normal mean.
        let half = LinearOperator::from_rows(vec![vec![0.5]]).unwrap();
        let mut rng = RngStream::new(82, 0);
        let est = resolvent_functional(&half, &cov, &NormSpec::Sup, 20_000, &mut rng).unwrap();
        assert!(fabs(est.mean - 2.0 * SQRT_2_OVER_PI) <= 3.0 * est.std_error);
        assert!(fabs(est.directional_sd - 2.0) <= 1e-12);
    }

    #[test]
    fn resolvent_bounded_by_contraction_gain() {
        let mdp = generator::mdp(83, 4, 2, 0.7, 1.0, NoiseSpec::Rademacher { amplitude: 1.0 })
            .unwrap();
        let problem = ProblemInstance::Mdp(mdp.clone());
        let star = fixed_point_oracle(&problem, 1e-12).unwrap();
        let mut rng = RngStream::new(84, 0);
        let cov = noise_covariance(&problem, &star, 20_000, &mut rng).unwrap();
        let policy = crate::problems::greedy_policy(&star, 4, 2, crate::problems::Sense::Max)
            .unwrap();
        let a = policy_transition_operator(&problem, &policy).unwrap().scale(0.7);
        let gc = gaussian_complexity(&cov, &NormSpec::Sup, 5000, &mut rng).unwrap();
        let est = resolvent_functional(&a, &cov, &NormSpec::Sup, 5000, &mut rng).unwrap();
        assert!(est.mean <= gc.wbar / (1.0 - 0.7) + 3.0 * (est.std_error + gc.wbar_se));
    }

    #[test]
    fn quotient_resolvent_matches_direct_construction() {
        let mrp = generator::chain(85, 4, NoiseSpec::Rademacher { amplitude: 1.0 }).unwrap();
        let problem = ProblemInstance::AvgCost(mrp.clone());
        let star = fixed_point_oracle(&problem, 1e-12).unwrap();
        let mut rng = RngStream::new(86, 0);
        let cov = noise_covariance(&problem, &star, 20_000, &mut rng).unwrap();
        let est = quotient_resolvent_functional(
            mrp.kernel(),
            mrp.stationary(),
            &cov,
            &NormSpec::Span,
            2000,
            &mut rng,
        )
        .unwrap();
        assert!(est.mean > 0.0);
        assert!(est.directional_sd > 0.0);
        // The quotient solve of each draw agrees with the matrix route.
        let mut rng2 = RngStream::new(87, 0);
        let chol = cov.cholesky().unwrap();
        let w = gaussian_draw(&chol, 4, &mut rng2);
        let direct = quotient_solve(mrp.kernel(), mrp.stationary(), &w).unwrap().solution;
        // Rebuild the matrix the same way the functional does.
        let mut m = LinearOperator::zeros(4);
        for j in 0..4 {
            let mut e = DenseVector::zeros(4);
            e.as_mut_slice()[j] = 1.0;
            let col = quotient_solve(mrp.kernel(), mrp.stationary(), &e).unwrap().solution;
            for i in 0..4 {
                m.set(i, j, col[i]);
            }
        }
        let via_matrix = m.apply(&w).unwrap();
        assert!(via_matrix.sub(&direct).unwrap().sup_norm() <= 1e-9);
    }

    #[test]
    fn linearization_set_examples() {
        // One state, two actions, Q* = (1, 0.6).
        let kernel = vec![vec![vec![1.0]], vec![vec![1.0]]];
        let mdp = TabularMdp::new(kernel, vec![vec![1.0, 0.6]], 0.0, NoiseSpec::None).unwrap();
        let q_star = DenseVector::new(vec![1.0, 0.6]).unwrap();
        let set = linearization_set_q(&mdp, &q_star, 0.1).unwrap();
        assert_eq!(set.policies, vec![vec![0]]);
        let set = linearization_set_q(&mdp, &q_star, 0.25).unwrap();
        assert_eq!(set.policies, vec![vec![0], vec![1]]);
        // s = 0 with a strict argmax gives exactly the optimal policy.
        let set = linearization_set_q(&mdp, &q_star, 0.0).unwrap();
        assert_eq!(set.policies, vec![vec![0]]);
    }

    #[test]
    fn local_complexity_examples() {
        let mdp = generator::mdp(88, 3, 2, 0.6, 1.0, NoiseSpec::Rademacher { amplitude: 1.0 })
            .unwrap();
        let problem = ProblemInstance::Mdp(mdp.clone());
        let star = fixed_point_oracle(&problem, 1e-12).unwrap();
        let mut rng = RngStream::new(89, 0);
        let cov = noise_covariance(&problem, &star, 20_000, &mut rng).unwrap();

        // Zero covariance collapses both functionals.
        let zero = CovEstimate::from_matrix(vec![0.0; 36], 6).unwrap();
        let mut r0 = RngStream::new(90, 0);
        let (g, nu) = local_complexity(&mdp, &star, &zero, 0.01, 500, &mut r0).unwrap();
        assert_eq!((g, nu), (0.0, 0.0));

        // A singleton set matches the resolvent functional on shared draws.
        let set = linearization_set_q(&mdp, &star, 0.0).unwrap();
        assert_eq!(set.operators.len(), 1);
        let mut r1 = RngStream::new(91, 0);
        let mut r2 = RngStream::new(91, 0);
        let (g, nu) = local_complexity(&mdp, &star, &cov, 0.0, 3000, &mut r1).unwrap();
        let est = resolvent_functional(&set.operators[0], &cov, &NormSpec::Sup, 3000, &mut r2)
            .unwrap();
        assert!(fabs(g - est.mean) <= 1e-12);
        assert!(fabs(nu - est.directional_sd) <= 1e-12);

        // G grows with the radius.
        let mut model = LocalComplexityModel::new_mdp(&mdp, &star, &cov, 2000, &mut rng).unwrap();
        let mut prev = 0.0;
        for s in [0.0, 0.05, 0.1, 0.5, 2.0] {
            let (g, _) = model.g_nu_at(s).unwrap();
            assert!(g >= prev - 1e-12);
            prev = g;
        }
    }

    #[test]
    fn rate_fixed_point_analytic_examples() {
        // Constant right-hand side.
        let s = solve_rate_fixed_point(|_| Ok(3.7), 0.01, 100.0).unwrap();
        assert!(fabs(s - 3.7) / 3.7 <= 1e-6);
        // Affine: s = 0.5 s + 1 has the root 2.
        let s = solve_rate_fixed_point(|x| Ok(0.5 * x + 1.0), 0.01, 100.0).unwrap();
        assert!(fabs(s - 2.0) / 2.0 <= 1e-6);
        // Downward step whose upper plateau ends before the identity
        // reaches it: the largest crossing is at the jump.
        let s = solve_rate_fixed_point(|x| Ok(if x < 1.0 { 2.0 } else { 0.5 }), 0.01, 100.0)
            .unwrap();
        assert!(fabs(s - 1.0) / 1.0 <= 1e-6);
        // Step whose plateau extends past its own height: the largest root
        // sits on the plateau.
        let s = solve_rate_fixed_point(|x| Ok(if x < 3.0 { 2.0 } else { 0.5 }), 0.01, 100.0)
            .unwrap();
        assert!(fabs(s - 2.0) / 2.0 <= 1e-6);
        // No crossing: rhs below the identity everywhere on the range.
        let err = solve_rate_fixed_point(|_| Ok(0.001), 1.0, 100.0);
        assert!(matches!(err, Err(DiagnosticsError::NoCrossing { .. })));
    }

    #[test]
    fn rate_solution_stays_in_uniform_band() {
        let mdp = generator::mdp(92, 4, 2, 0.7, 1.0, NoiseSpec::Rademacher { amplitude: 1.0 })
            .unwrap();
        let problem = ProblemInstance::Mdp(mdp.clone());
        let star = fixed_point_oracle(&problem, 1e-12).unwrap();
        let mut rng = RngStream::new(93, 0);
        let cov = noise_covariance(&problem, &star, 20_000, &mut rng).unwrap();
        let mut model = LocalComplexityModel::new_mdp(&mdp, &star, &cov, 2000, &mut rng).unwrap();
        let params = RateParams {
            delta: 0.1,
            gamma: 0.7,
            lipschitz: 0.7,
            b_star: 2.0,
            dim_product: 8.0,
            hot_constant: 1.0,
            alpha: None,
        };
        for n in [1 << 12, 1 << 16, 1 << 20] {
            let sol = solve_rate_equation(&mut model, n, &params).unwrap();
            assert!(sol.s_star >= sol.lower * (1.0 - 1e-6), "{sol:?}");
            assert!(sol.s_star <= sol.upper * (1.0 + 1e-6), "{sol:?}");
        }
    }

    #[test]
    fn mixing_time_examples() {
        // Uniform rows mix in one step.
        let p = LinearOperator::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let est = mixing_time(&p, 100);
        assert_eq!(est.t_mix, Some(1));
        assert_eq!(est.max_tv, 0.0);

        // The identity never mixes.
        let est = mixing_time(&LinearOperator::identity(3), 50);
        assert_eq!(est.t_mix, None);
        assert_eq!(est.max_tv, 1.0);

        // Lazy two-state chain: TV decays as 0.8^t, crossing 1/2 at t = 4.
        let p = LinearOperator::from_rows(vec![vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let est = mixing_time(&p, 100);
        assert_eq!(est.t_mix, Some(4));
        assert!(fabs(est.max_tv - 0.4096) <= 1e-12);
    }

    #[test]
    fn mixing_monotone_on_random_chains() {
        for seed in 0..5 {
            let mrp = generator::chain(200 + seed, 5, NoiseSpec::None).unwrap();
            let p = mrp.kernel();
            let mut m = p.clone();
            let mut prev = max_pairwise_tv(&m);
            for _ in 0..20 {
                m = m.matmul(p).unwrap();
                let tv = max_pairwise_tv(&m);
                assert!(tv <= prev + 1e-12);
                prev = tv;
            }
        }
    }

    #[test]
    fn contraction_audits() {
        let mut rng = RngStream::new(94, 0);
        // Discounted MDP: gamma-contractive in sup norm.
        let mdp = generator::mdp(95, 4, 2, 0.9, 1.0, NoiseSpec::None).unwrap();
        let problem = ProblemInstance::Mdp(mdp);
        let ratio = contraction_audit(&problem, &NormSpec::Sup, 1000, &mut rng, 1).unwrap();
        assert!(ratio <= 0.9 + 1e-12);

        // Average-cost chain: non-expansive in span, halves after 2 t_mix.
        let mrp = generator::chain(96, 5, NoiseSpec::None).unwrap();
        let est = mixing_time(mrp.kernel(), 10_000);
        let t_mix = est.t_mix.unwrap();
        let problem = ProblemInstance::AvgCost(mrp);
        let one_step = contraction_audit(&problem, &NormSpec::Span, 1000, &mut rng, 1).unwrap();
        assert!(one_step <= 1.0 + 1e-12);
        let multi =
            contraction_audit(&problem, &NormSpec::Span, 1000, &mut rng, 2 * t_mix).unwrap();
        assert!(multi <= 0.5 + 1e-12);

        // SSP: contractive in the hitting-time weighted norm.
        let ssp = generator::ssp(97, 6, 2, 0.2, NoiseSpec::None).unwrap();
        let w = ssp_weights(&ssp).unwrap();
        let problem = ProblemInstance::Ssp(ssp);
        let ratio = contraction_audit(&problem, &w.norm(), 1000, &mut rng, 1).unwrap();
        assert!(ratio <= w.contraction_factor() + 1e-12);

        // The identity operator audits at exactly one.
        let ratio = operator_contraction_audit(
            |v| Ok(v.clone()),
            4,
            &NormSpec::Sup,
            100,
            &mut rng,
            1,
        )
        .unwrap();
        assert!(fabs(ratio - 1.0) <= 1e-15);
    }

    #[test]
    fn quotient_resolvent_gain_bounded_by_mixing() {
        // span((I - P)^+ v) <= 2 m span(v) with m = 2 t_mix.
        let mut rng = RngStream::new(98, 0);
        for seed in 0..5 {
            let mrp = generator::chain(300 + seed, 6, NoiseSpec::None).unwrap();
            let est = mixing_time(mrp.kernel(), 10_000);
            let m = 2 * est.t_mix.unwrap();
            let mut step = rng.step_rng();
            for _ in 0..20 {
                let v = DenseVector::from_fn(6, |_| step.next_symmetric());
                let x = quotient_solve(mrp.kernel(), mrp.stationary(), &v).unwrap().solution;
                let ratio = NormSpec::Span.eval(&x).unwrap()
                    / NormSpec::Span.eval(&v).unwrap().max(1e-12);
                assert!(ratio <= 2.0 * m as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn audit_report_format() {
        let mut report = AuditReport::default();
        report.push(
            AuditCheck::new("kernel_stochasticity", true)
                .field("max_row_deviation", String::from("1e-16")),
        );
        report.push(AuditCheck::new("contraction", false).field("ratio", String::from("1.2")));
        assert!(!report.passed());
        let text = report.to_text();
        assert!(text.contains("[check kernel_stochasticity]"));
        assert!(text.contains("status = pass"));
        assert!(text.contains("status = fail"));
        assert!(text.contains("max_row_deviation = 1e-16"));
    }
}
