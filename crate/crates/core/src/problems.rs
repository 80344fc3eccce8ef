//! The four tabular fixed-point problem families, their population and
//! single-sample empirical Bellman operators, hitting-time weights, greedy
//! policies, policy transition operators, the matrix-game minimax solver,
//! and exact fixed-point oracles for testing.
//!
//! Indexing conventions:
//! - Q-functions for MDPs are laid out as `(state, action)` with index
//!   `x * actions + u`.
//! - SSP instances designate state 0 as the cost-free absorbing state;
//!   Q-vectors exclude its coordinates, so coordinate `(x, u)` maps to
//!   `(x - 1) * actions + u`.
//! - Markov-game Q-functions use `((x * actions1) + u1) * actions2 + u2`,
//!   with player one the maximizer.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use libm::fabs;

use crate::oracle::{GenerativeSample, RngStream};
use crate::vecspace::{
    quotient_solve, stationary_distribution, DenseMatrix, DenseVector, LinearOperator, NormSpec,
    VecSpaceError,
};

const KERNEL_ROW_TOL: f64 = 1e-12;

/// Errors from problem construction and operator evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemError {
    InvalidKernel { row: usize, deviation: f64 },
    InvalidDiscount { value: f64 },
    AbsorbingStateViolation,
    EmptyProblem,
    DimensionMismatch { expected: usize, got: usize },
    /// Hitting-time weight iteration failed to converge: some policy never
    /// reaches the absorbing state.
    ImproperPolicy,
    SimplexIterationCap { iterations: usize },
    IterationCap { iterations: usize },
    InvalidPolicy { state: usize, action: usize },
    VecSpace(VecSpaceError),
}

impl fmt::Display for ProblemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemError::InvalidKernel { row, deviation } => {
                write!(f, "kernel row {row} is not a distribution (deviation {deviation:e})")
            }
            ProblemError::InvalidDiscount { value } => {
                write!(f, "discount must lie in [0, 1), got {value}")
            }
            ProblemError::AbsorbingStateViolation => {
                write!(f, "state 0 must be absorbing and cost-free")
            }
            ProblemError::EmptyProblem => write!(f, "problem must have states and actions"),
            ProblemError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            ProblemError::ImproperPolicy => {
                write!(f, "hitting-time weights did not converge: improper policy exists")
            }
            ProblemError::SimplexIterationCap { iterations } => {
                write!(f, "simplex exceeded its iteration cap ({iterations})")
            }
            ProblemError::IterationCap { iterations } => {
                write!(f, "fixed-point iteration exceeded its cap ({iterations})")
            }
            ProblemError::InvalidPolicy { state, action } => {
                write!(f, "policy assigns invalid action {action} at state {state}")
            }
            ProblemError::VecSpace(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ProblemError {}

impl From<VecSpaceError> for ProblemError {
    fn from(e: VecSpaceError) -> Self {
        ProblemError::VecSpace(e)
    }
}

/// Zero-mean bounded noise added to cost/reward observations.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    None,
    Rademacher { amplitude: f64 },
    Uniform { amplitude: f64 },
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Rademacher { amplitude: 1.0 }
    }
}

impl NoiseSpec {
    pub fn amplitude(&self) -> f64 {
        match self {
            NoiseSpec::None => 0.0,
            NoiseSpec::Rademacher { amplitude } | NoiseSpec::Uniform { amplitude } => *amplitude,
        }
    }
}

fn check_row(row: &[f64], index: usize) -> Result<(), ProblemError> {
    let mut sum = 0.0;
    for &p in row {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(ProblemError::InvalidKernel { row: index, deviation: f64::NAN });
        }
        sum += p;
    }
    let deviation = fabs(sum - 1.0);
    if deviation > KERNEL_ROW_TOL {
        return Err(ProblemError::InvalidKernel { row: index, deviation });
    }
    Ok(())
}

/// Direction of the per-state optimization in a greedy policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Max,
    Min,
}

// ---------------------------------------------------------------------------
// Discounted tabular MDP (Q-learning)
// ---------------------------------------------------------------------------

/// A discounted tabular MDP whose Bellman optimality operator acts on
/// Q-functions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    states: usize,
    actions: usize,
    /// `kernel[(u * states + x) * states + x']`
    kernel: Vec<f64>,
    /// `rewards[x * actions + u]`
    rewards: Vec<f64>,
    discount: f64,
    noise: NoiseSpec,
    reward_max: f64,
}

impl TabularMdp {
    /// `kernel[u][x][x']`, `rewards[x][u]`.
    pub fn new(
        kernel: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<f64>>,
        discount: f64,
        noise: NoiseSpec,
    ) -> Result<Self, ProblemError> {
        let actions = kernel.len();
        let states = kernel.first().map_or(0, |k| k.len());
        if actions == 0 || states == 0 {
            return Err(ProblemError::EmptyProblem);
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(ProblemError::InvalidDiscount { value: discount });
        }
        let mut flat_kernel = Vec::with_capacity(actions * states * states);
        for (u, per_action) in kernel.iter().enumerate() {
            if per_action.len() != states {
                return Err(ProblemError::DimensionMismatch {
                    expected: states,
                    got: per_action.len(),
                });
            }
            for (x, row) in per_action.iter().enumerate() {
                if row.len() != states {
                    return Err(ProblemError::DimensionMismatch {
                        expected: states,
                        got: row.len(),
                    });
                }
                check_row(row, u * states + x)?;
                flat_kernel.extend_from_slice(row);
            }
        }
        if rewards.len() != states {
            return Err(ProblemError::DimensionMismatch { expected: states, got: rewards.len() });
        }
        let mut flat_rewards = Vec::with_capacity(states * actions);
        let mut reward_max = 0.0f64;
        for row in &rewards {
            if row.len() != actions {
                return Err(ProblemError::DimensionMismatch {
                    expected: actions,
                    got: row.len(),
                });
            }
            for &r in row {
                if !r.is_finite() {
                    return Err(ProblemError::VecSpace(VecSpaceError::NonFinite));
                }
                reward_max = reward_max.max(fabs(r));
                flat_rewards.push(r);
            }
        }
        Ok(Self {
            states,
            actions,
            kernel: flat_kernel,
            rewards: flat_rewards,
            discount,
            noise,
            reward_max,
        })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward_max(&self) -> f64 {
        self.reward_max
    }

    pub fn dim(&self) -> usize {
        self.states * self.actions
    }

    pub fn kernel_row(&self, x: usize, u: usize) -> &[f64] {
        let base = (u * self.states + x) * self.states;
        &self.kernel[base..base + self.states]
    }

    pub fn reward(&self, x: usize, u: usize) -> f64 {
        self.rewards[x * self.actions + u]
    }
}

/// Bellman optimality operator for Q-functions:
/// `h(Q)(x,u) = r(x,u) + gamma * sum_x' P_u(x'|x) max_u' Q(x',u')`.
pub fn bellman_optimality(mdp: &TabularMdp, q: &DenseVector) -> Result<DenseVector, ProblemError> {
    if q.dim() != mdp.dim() {
        return Err(ProblemError::DimensionMismatch { expected: mdp.dim(), got: q.dim() });
    }
    let maxes = per_state_opt(q.as_slice(), mdp.states, mdp.actions, Sense::Max);
    let mut out = Vec::with_capacity(mdp.dim());
    for x in 0..mdp.states {
        for u in 0..mdp.actions {
            let row = mdp.kernel_row(x, u);
            let future: f64 = row.iter().zip(&maxes).map(|(p, m)| p * m).sum();
            out.push(mdp.reward(x, u) + mdp.discount * future);
        }
    }
    Ok(DenseVector::new(out).expect("finite"))
}

/// Single-sample empirical Bellman optimality operator: the kernel row is
/// replaced by a point mass at the sampled successor and the reward by its
/// noisy draw.
pub fn empirical_bellman_optimality(
    mdp: &TabularMdp,
    q: &DenseVector,
    sample: &GenerativeSample,
) -> Result<DenseVector, ProblemError> {
    if q.dim() != mdp.dim() {
        return Err(ProblemError::DimensionMismatch { expected: mdp.dim(), got: q.dim() });
    }
    let maxes = per_state_opt(q.as_slice(), mdp.states, mdp.actions, Sense::Max);
    let mut out = Vec::with_capacity(mdp.dim());
    for x in 0..mdp.states {
        for u in 0..mdp.actions {
            let c = x * mdp.actions + u;
            let next = sample.next_state[c];
            out.push(mdp.reward(x, u) + sample.noise[c] + mdp.discount * maxes[next]);
        }
    }
    Ok(DenseVector::new(out).expect("finite"))
}

fn per_state_opt(q: &[f64], states: usize, actions: usize, sense: Sense) -> Vec<f64> {
    let mut out = Vec::with_capacity(states);
    for x in 0..states {
        let row = &q[x * actions..(x + 1) * actions];
        let v = match sense {
            Sense::Max => row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)),
            Sense::Min => row.iter().fold(f64::INFINITY, |m, &x| m.min(x)),
        };
        out.push(v);
    }
    out
}

// ---------------------------------------------------------------------------
// Stochastic shortest paths
// ---------------------------------------------------------------------------

/// A stochastic shortest path instance. State 0 is absorbing and cost-free;
/// Q-vectors run over the non-absorbing `(state, action)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SspInstance {
    states: usize,
    actions: usize,
    /// `kernel[(u * states + x) * states + x']`, rows over all states.
    kernel: Vec<f64>,
    /// `costs[x * actions + u]`, zero for x = 0.
    costs: Vec<f64>,
    cost_max: f64,
    noise: NoiseSpec,
}

impl SspInstance {
    /// `kernel[u][x][x']`, `costs[x][u]`; state 0 must self-loop with
    /// probability one under every action and carry zero cost.
    pub fn new(
        kernel: Vec<Vec<Vec<f64>>>,
        costs: Vec<Vec<f64>>,
        noise: NoiseSpec,
    ) -> Result<Self, ProblemError> {
        let actions = kernel.len();
        let states = kernel.first().map_or(0, |k| k.len());
        if actions == 0 || states < 2 {
            return Err(ProblemError::EmptyProblem);
        }
        let mut flat_kernel = Vec::with_capacity(actions * states * states);
        for (u, per_action) in kernel.iter().enumerate() {
            if per_action.len() != states {
                return Err(ProblemError::DimensionMismatch {
                    expected: states,
                    got: per_action.len(),
                });
            }
            for (x, row) in per_action.iter().enumerate() {
                if row.len() != states {
                    return Err(ProblemError::DimensionMismatch {
                        expected: states,
                        got: row.len(),
                    });
                }
                check_row(row, u * states + x)?;
                if x == 0 && fabs(row[0] - 1.0) > KERNEL_ROW_TOL {
                    return Err(ProblemError::AbsorbingStateViolation);
                }
                flat_kernel.extend_from_slice(row);
            }
        }
        if costs.len() != states {
            return Err(ProblemError::DimensionMismatch { expected: states, got: costs.len() });
        }
        let mut flat_costs = Vec::with_capacity(states * actions);
        let mut cost_max = 0.0f64;
        for (x, row) in costs.iter().enumerate() {
            if row.len() != actions {
                return Err(ProblemError::DimensionMismatch {
                    expected: actions,
                    got: row.len(),
                });
            }
            for &c in row {
                if !c.is_finite() {
                    return Err(ProblemError::VecSpace(VecSpaceError::NonFinite));
                }
                if x == 0 && c != 0.0 {
                    return Err(ProblemError::AbsorbingStateViolation);
                }
                cost_max = cost_max.max(fabs(c));
                flat_costs.push(c);
            }
        }
        Ok(Self { states, actions, kernel: flat_kernel, costs: flat_costs, cost_max, noise })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn cost_max(&self) -> f64 {
        self.cost_max
    }

    /// Number of Q coordinates: non-absorbing states times actions.
    pub fn dim(&self) -> usize {
        (self.states - 1) * self.actions
    }

    /// Coordinate index for the non-absorbing pair `(x, u)`, `x >= 1`.
    pub fn coord(&self, x: usize, u: usize) -> usize {
        (x - 1) * self.actions + u
    }

    pub fn kernel_row(&self, x: usize, u: usize) -> &[f64] {
        let base = (u * self.states + x) * self.states;
        &self.kernel[base..base + self.states]
    }

    pub fn cost(&self, x: usize, u: usize) -> f64 {
        self.costs[x * self.actions + u]
    }

    /// Minimum over actions of `q` at non-absorbing state `x`; the absorbing
    /// state contributes zero.
    fn state_value(&self, q: &[f64], x: usize) -> f64 {
        if x == 0 {
            return 0.0;
        }
        let base = (x - 1) * self.actions;
        q[base..base + self.actions]
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }
}

/// SSP Bellman operator with minimization over actions; the absorbing state
/// is excluded from the sum.
pub fn ssp_bellman(ssp: &SspInstance, q: &DenseVector) -> Result<DenseVector, ProblemError> {
    if q.dim() != ssp.dim() {
        return Err(ProblemError::DimensionMismatch { expected: ssp.dim(), got: q.dim() });
    }
    let mins: Vec<f64> = (0..ssp.states).map(|x| ssp.state_value(q.as_slice(), x)).collect();
    let mut out = Vec::with_capacity(ssp.dim());
    for x in 1..ssp.states {
        for u in 0..ssp.actions {
            let row = ssp.kernel_row(x, u);
            let future: f64 = row
                .iter()
                .zip(&mins)
                .skip(1)
                .map(|(p, m)| p * m)
                .sum();
            out.push(ssp.cost(x, u) + future);
        }
    }
    Ok(DenseVector::new(out).expect("finite"))
}

/// Single-sample empirical SSP Bellman operator.
pub fn ssp_empirical_bellman(
    ssp: &SspInstance,
    q: &DenseVector,
    sample: &GenerativeSample,
) -> Result<DenseVector, ProblemError> {
    if q.dim() != ssp.dim() {
        return Err(ProblemError::DimensionMismatch { expected: ssp.dim(), got: q.dim() });
    }
    let mut out = Vec::with_capacity(ssp.dim());
    for x in 1..ssp.states {
        for u in 0..ssp.actions {
            let c = ssp.coord(x, u);
            let next = sample.next_state[c];
            let future = ssp.state_value(q.as_slice(), next);
            out.push(ssp.cost(x, u) + sample.noise[c] + future);
        }
    }
    Ok(DenseVector::new(out).expect("finite"))
}

/// Worst-case expected hitting-time weights for an SSP instance.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
    w_max: f64,
    w_min: f64,
}

impl WeightVector {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn w_min(&self) -> f64 {
        self.w_min
    }

    /// Certified contraction factor `1 - 1/w_max` of the SSP Bellman
    /// operator in the weighted sup norm.
    pub fn contraction_factor(&self) -> f64 {
        1.0 - 1.0 / self.w_max
    }

    pub fn norm(&self) -> NormSpec {
        NormSpec::WeightedSup(self.weights.clone())
    }
}

/// Computes hitting-time weights by value iteration on
/// `T w(x,u) = 1 + sum_{x' != 0} P_u(x'|x) max_u' w(x',u')`.
///
/// Divergence (signaled by hitting the iteration cap) means some policy
/// never reaches the absorbing state.
pub fn ssp_weights(ssp: &SspInstance) -> Result<WeightVector, ProblemError> {
    let dim = ssp.dim();
    let mut w = vec![1.0; dim];
    let cap = 100_000;
    for _ in 0..cap {
        // max over actions of w at each non-absorbing state
        let mut state_max = vec![0.0; ssp.states];
        for x in 1..ssp.states {
            let base = (x - 1) * ssp.actions;
            state_max[x] = w[base..base + ssp.actions]
                .iter()
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        }
        let mut next = Vec::with_capacity(dim);
        let mut diff = 0.0f64;
        for x in 1..ssp.states {
            for u in 0..ssp.actions {
                let row = ssp.kernel_row(x, u);
                let future: f64 = row.iter().zip(&state_max).skip(1).map(|(p, m)| p * m).sum();
                let val = 1.0 + future;
                diff = diff.max(fabs(val - w[ssp.coord(x, u)]));
                next.push(val);
            }
        }
        w = next;
        if w.iter().any(|x| !x.is_finite() || *x > 1e12) {
            return Err(ProblemError::ImproperPolicy);
        }
        if diff <= 1e-10 {
            let w_max = w.iter().fold(1.0f64, |m, &v| m.max(v));
            let w_min = w.iter().fold(f64::INFINITY, |m, &v| m.min(v));
            return Ok(WeightVector { weights: w, w_max, w_min });
        }
    }
    Err(ProblemError::ImproperPolicy)
}

// ---------------------------------------------------------------------------
// Zero-sum matrix games and Markov games
// ---------------------------------------------------------------------------

/// Exact minimax solution of a two-player zero-sum matrix game, with the row
/// player maximizing.
#[derive(Debug, Clone, PartialEq)]
pub struct MinimaxSolution {
    pub value: f64,
    pub row_strategy: Vec<f64>,
    pub col_strategy: Vec<f64>,
}

/// Solves the matrix game by linear programming: payoffs are shifted
/// positive and the resulting LP is solved with a dense simplex using
/// Bland's rule, so cycling cannot occur. Strategies are recovered from the
/// optimal tableau by normalization.
pub fn matrix_game_solve(payoff: &DenseMatrix) -> Result<MinimaxSolution, ProblemError> {
    let m = payoff.rows();
    let n = payoff.cols();
    if m == 0 || n == 0 {
        return Err(ProblemError::EmptyProblem);
    }
    let mut min_entry = f64::INFINITY;
    for i in 0..m {
        for j in 0..n {
            min_entry = min_entry.min(payoff.get(i, j));
        }
    }
    // Shift so every entry is at least one; the shifted game value is then
    // positive and the LP below is bounded with a trivially feasible start.
    let shift = 1.0 - min_entry;

    // Maximize sum(y) subject to (A + shift) y <= 1, y >= 0. The optimal
    // objective is 1 / value(shifted game); the dual solution (read off the
    // slack columns) normalizes to the row player's strategy.
    let width = n + m + 1;
    let mut tableau = vec![0.0f64; (m + 1) * width];
    for i in 0..m {
        for j in 0..n {
            tableau[i * width + j] = payoff.get(i, j) + shift;
        }
        tableau[i * width + n + i] = 1.0;
        tableau[i * width + n + m] = 1.0;
    }
    for j in 0..n {
        tableau[m * width + j] = -1.0;
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    let eps = 1e-11;
    let cap = 50_000;
    let mut iterations = 0;
    loop {
        // Bland's rule: smallest-index column with a negative objective-row
        // coefficient enters the basis.
        let mut entering = None;
        for j in 0..n + m {
            if tableau[m * width + j] < -eps {
                entering = Some(j);
                break;
            }
        }
        let Some(col) = entering else { break };
        let mut leaving: Option<(usize, f64)> = None;
        for i in 0..m {
            let a = tableau[i * width + col];
            if a > eps {
                let ratio = tableau[i * width + n + m] / a;
                let better = match leaving {
                    None => true,
                    Some((prev, best)) => {
                        ratio < best - eps || (fabs(ratio - best) <= eps && basis[i] < basis[prev])
                    }
                };
                if better {
                    leaving = Some((i, ratio));
                }
            }
        }
        let Some((row, _)) = leaving else {
            // Unbounded cannot occur for a shifted game; treat as numeric
            // failure rather than returning silently wrong strategies.
            return Err(ProblemError::SimplexIterationCap { iterations });
        };
        pivot(&mut tableau, m + 1, width, row, col);
        basis[row] = col;
        iterations += 1;
        if iterations > cap {
            return Err(ProblemError::SimplexIterationCap { iterations });
        }
    }

    let objective = tableau[m * width + n + m];
    if objective <= 0.0 {
        return Err(ProblemError::SimplexIterationCap { iterations });
    }
    let mut col_strategy = vec![0.0; n];
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            col_strategy[b] = tableau[i * width + n + m].max(0.0);
        }
    }
    let mut row_strategy = vec![0.0; m];
    for i in 0..m {
        row_strategy[i] = tableau[m * width + n + i].max(0.0);
    }
    let col_total: f64 = col_strategy.iter().sum();
    let row_total: f64 = row_strategy.iter().sum();
    if col_total <= 0.0 || row_total <= 0.0 {
        return Err(ProblemError::SimplexIterationCap { iterations });
    }
    for y in &mut col_strategy {
        *y /= col_total;
    }
    for x in &mut row_strategy {
        *x /= row_total;
    }
    Ok(MinimaxSolution { value: 1.0 / objective - shift, row_strategy, col_strategy })
}

fn pivot(tableau: &mut [f64], rows: usize, width: usize, prow: usize, pcol: usize) {
    let pivot_val = tableau[prow * width + pcol];
    for j in 0..width {
        tableau[prow * width + j] /= pivot_val;
    }
    for i in 0..rows {
        if i == prow {
            continue;
        }
        let factor = tableau[i * width + pcol];
        if factor == 0.0 {
            continue;
        }
        for j in 0..width {
            tableau[i * width + j] -= factor * tableau[prow * width + j];
        }
        tableau[i * width + pcol] = 0.0;
    }
}

/// A two-player zero-sum Markov game; player one maximizes.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovGame {
    states: usize,
    actions1: usize,
    actions2: usize,
    /// `kernel[(((u1 * actions2) + u2) * states + x) * states + x']`
    kernel: Vec<f64>,
    /// `rewards[((x * actions1) + u1) * actions2 + u2]`
    rewards: Vec<f64>,
    discount: f64,
    noise: NoiseSpec,
    reward_max: f64,
}

impl MarkovGame {
    /// `kernel[u1][u2][x][x']`, `rewards[x][u1][u2]`.
    pub fn new(
        kernel: Vec<Vec<Vec<Vec<f64>>>>,
        rewards: Vec<Vec<Vec<f64>>>,
        discount: f64,
        noise: NoiseSpec,
    ) -> Result<Self, ProblemError> {
        let actions1 = kernel.len();
        let actions2 = kernel.first().map_or(0, |k| k.len());
        let states = kernel
            .first()
            .and_then(|k| k.first())
            .map_or(0, |k| k.len());
        if actions1 == 0 || actions2 == 0 || states == 0 {
            return Err(ProblemError::EmptyProblem);
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(ProblemError::InvalidDiscount { value: discount });
        }
        let mut flat_kernel = Vec::with_capacity(actions1 * actions2 * states * states);
        for (u1, per1) in kernel.iter().enumerate() {
            if per1.len() != actions2 {
                return Err(ProblemError::DimensionMismatch {
                    expected: actions2,
                    got: per1.len(),
                });
            }
            for (u2, per2) in per1.iter().enumerate() {
                if per2.len() != states {
                    return Err(ProblemError::DimensionMismatch {
                        expected: states,
                        got: per2.len(),
                    });
                }
                for (x, row) in per2.iter().enumerate() {
                    if row.len() != states {
                        return Err(ProblemError::DimensionMismatch {
                            expected: states,
                            got: row.len(),
                        });
                    }
                    check_row(row, ((u1 * actions2) + u2) * states + x)?;
                    flat_kernel.extend_from_slice(row);
                }
            }
        }
        if rewards.len() != states {
            return Err(ProblemError::DimensionMismatch { expected: states, got: rewards.len() });
        }
        let mut flat_rewards = Vec::with_capacity(states * actions1 * actions2);
        let mut reward_max = 0.0f64;
        for per_state in &rewards {
            if per_state.len() != actions1 {
                return Err(ProblemError::DimensionMismatch {
                    expected: actions1,
                    got: per_state.len(),
                });
            }
            for row in per_state {
                if row.len() != actions2 {
                    return Err(ProblemError::DimensionMismatch {
                        expected: actions2,
                        got: row.len(),
                    });
                }
                for &r in row {
                    if !r.is_finite() {
                        return Err(ProblemError::VecSpace(VecSpaceError::NonFinite));
                    }
                    reward_max = reward_max.max(fabs(r));
                    flat_rewards.push(r);
                }
            }
        }
        Ok(Self {
            states,
            actions1,
            actions2,
            kernel: flat_kernel,
            rewards: flat_rewards,
            discount,
            noise,
            reward_max,
        })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions1(&self) -> usize {
        self.actions1
    }

    pub fn actions2(&self) -> usize {
        self.actions2
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward_max(&self) -> f64 {
        self.reward_max
    }

    pub fn dim(&self) -> usize {
        self.states * self.actions1 * self.actions2
    }

    pub fn coord(&self, x: usize, u1: usize, u2: usize) -> usize {
        ((x * self.actions1) + u1) * self.actions2 + u2
    }

    pub fn kernel_row(&self, x: usize, u1: usize, u2: usize) -> &[f64] {
        let base = (((u1 * self.actions2) + u2) * self.states + x) * self.states;
        &self.kernel[base..base + self.states]
    }

    pub fn reward(&self, x: usize, u1: usize, u2: usize) -> f64 {
        self.rewards[self.coord(x, u1, u2)]
    }

    /// Payoff matrix `Q(x, ., .)` seen by the matrix-game solver.
    pub fn payoff_at(&self, q: &[f64], x: usize) -> DenseMatrix {
        let mut p = DenseMatrix::zeros(self.actions1, self.actions2);
        for u1 in 0..self.actions1 {
            for u2 in 0..self.actions2 {
                p.set(u1, u2, q[self.coord(x, u1, u2)]);
            }
        }
        p
    }

    /// Minimax value of `Q(x, ., .)` for each state, computed once per
    /// operator application and shared across all source coordinates.
    fn state_values(&self, q: &[f64]) -> Result<Vec<f64>, ProblemError> {
        let mut vals = Vec::with_capacity(self.states);
        for x in 0..self.states {
            vals.push(matrix_game_solve(&self.payoff_at(q, x))?.value);
        }
        Ok(vals)
    }
}

/// Markov-game Bellman operator: the continuation value at each successor
/// state is the exact minimax value of its payoff matrix.
pub fn game_bellman(game: &MarkovGame, q: &DenseVector) -> Result<DenseVector, ProblemError> {
    if q.dim() != game.dim() {
        return Err(ProblemError::DimensionMismatch { expected: game.dim(), got: q.dim() });
    }
    let vals = game.state_values(q.as_slice())?;
    let mut out = Vec::with_capacity(game.dim());
    for x in 0..game.states {
        for u1 in 0..game.actions1 {
            for u2 in 0..game.actions2 {
                let row = game.kernel_row(x, u1, u2);
                let future: f64 = row.iter().zip(&vals).map(|(p, v)| p * v).sum();
                out.push(game.reward(x, u1, u2) + game.discount * future);
            }
        }
    }
    Ok(DenseVector::new(out).expect("finite"))
}

/// Single-sample empirical Markov-game Bellman operator.
pub fn game_empirical_bellman(
    game: &MarkovGame,
    q: &DenseVector,
    sample: &GenerativeSample,
) -> Result<DenseVector, ProblemError> {
    if q.dim() != game.dim() {
        return Err(ProblemError::DimensionMismatch { expected: game.dim(), got: q.dim() });
    }
    // Only the sampled successor states need their game solved.
    let mut vals: Vec<Option<f64>> = vec![None; game.states];
    let mut out = Vec::with_capacity(game.dim());
    for x in 0..game.states {
        for u1 in 0..game.actions1 {
            for u2 in 0..game.actions2 {
                let c = game.coord(x, u1, u2);
                let next = sample.next_state[c];
                let v = match vals[next] {
                    Some(v) => v,
                    None => {
                        let v = matrix_game_solve(&game.payoff_at(q.as_slice(), next))?.value;
                        vals[next] = Some(v);
                        v
                    }
                };
                out.push(game.reward(x, u1, u2) + sample.noise[c] + game.discount * v);
            }
        }
    }
    Ok(DenseVector::new(out).expect("finite"))
}

// ---------------------------------------------------------------------------
// Average-cost policy evaluation
// ---------------------------------------------------------------------------

/// An undiscounted Markov reward process for average-cost policy
/// evaluation; the chain must be irreducible so a stationary distribution
/// exists and is cached at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgCostMrp {
    kernel: LinearOperator,
    costs: Vec<f64>,
    cost_max: f64,
    noise: NoiseSpec,
    stationary: Vec<f64>,
}

impl AvgCostMrp {
    pub fn new(
        kernel: Vec<Vec<f64>>,
        costs: Vec<f64>,
        noise: NoiseSpec,
    ) -> Result<Self, ProblemError> {
        let states = kernel.len();
        if states == 0 {
            return Err(ProblemError::EmptyProblem);
        }
        for (x, row) in kernel.iter().enumerate() {
            if row.len() != states {
                return Err(ProblemError::DimensionMismatch { expected: states, got: row.len() });
            }
            check_row(row, x)?;
        }
        if costs.len() != states {
            return Err(ProblemError::DimensionMismatch { expected: states, got: costs.len() });
        }
        let mut cost_max = 0.0f64;
        for &c in &costs {
            if !c.is_finite() {
                return Err(ProblemError::VecSpace(VecSpaceError::NonFinite));
            }
            cost_max = cost_max.max(fabs(c));
        }
        let op = LinearOperator::from_rows(kernel)?;
        let stationary = stationary_distribution(&op)?;
        // Sanity: the computed distribution must actually be stationary.
        let mut residual = 0.0f64;
        for j in 0..states {
            let col: f64 = (0..states).map(|i| stationary[i] * op.get(i, j)).sum();
            residual = residual.max(fabs(col - stationary[j]));
        }
        if residual > 1e-10 {
            return Err(ProblemError::VecSpace(VecSpaceError::NotStationary { residual }));
        }
        Ok(Self { kernel: op, costs, cost_max, noise, stationary })
    }

    pub fn states(&self) -> usize {
        self.costs.len()
    }

    pub fn dim(&self) -> usize {
        self.costs.len()
    }

    pub fn kernel(&self) -> &LinearOperator {
        &self.kernel
    }

    pub fn kernel_row(&self, x: usize) -> &[f64] {
        self.kernel.row(x)
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn cost_max(&self) -> f64 {
        self.cost_max
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Average cost under the stationary distribution.
    pub fn average_cost(&self) -> f64 {
        self.stationary
            .iter()
            .zip(&self.costs)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Average-cost Bellman operator `h(theta) = P theta + c`.
pub fn avgcost_bellman(mrp: &AvgCostMrp, theta: &DenseVector) -> Result<DenseVector, ProblemError> {
    if theta.dim() != mrp.dim() {
        return Err(ProblemError::DimensionMismatch { expected: mrp.dim(), got: theta.dim() });
    }
    let p = mrp.kernel.apply(theta)?;
    let out = p
        .as_slice()
        .iter()
        .zip(&mrp.costs)
        .map(|(a, c)| a + c)
        .collect();
    Ok(DenseVector::new(out).expect("finite"))
}

/// Empirical average-cost operator `H(theta) = Z theta + C` with sampled
/// row point-masses and noisy costs.
pub fn avgcost_empirical_bellman(
    mrp: &AvgCostMrp,
    theta: &DenseVector,
    sample: &GenerativeSample,
) -> Result<DenseVector, ProblemError> {
    if theta.dim() != mrp.dim() {
        return Err(ProblemError::DimensionMismatch { expected: mrp.dim(), got: theta.dim() });
    }
    let out = (0..mrp.dim())
        .map(|x| theta[sample.next_state[x]] + mrp.costs[x] + sample.noise[x])
        .collect();
    Ok(DenseVector::new(out).expect("finite"))
}

// ---------------------------------------------------------------------------
// Policies and transition operators
// ---------------------------------------------------------------------------

/// Per-state argmax (or argmin) of a `(state, action)`-indexed vector, ties
/// broken by the smallest action index.
pub fn greedy_policy(
    q: &DenseVector,
    n_states: usize,
    n_actions: usize,
    sense: Sense,
) -> Result<Vec<usize>, ProblemError> {
    if q.dim() != n_states * n_actions {
        return Err(ProblemError::DimensionMismatch {
            expected: n_states * n_actions,
            got: q.dim(),
        });
    }
    let mut policy = Vec::with_capacity(n_states);
    for x in 0..n_states {
        let row = &q.as_slice()[x * n_actions..(x + 1) * n_actions];
        let mut best = 0;
        for (u, &v) in row.iter().enumerate().skip(1) {
            let better = match sense {
                Sense::Max => v > row[best],
                Sense::Min => v < row[best],
            };
            if better {
                best = u;
            }
        }
        policy.push(best);
    }
    Ok(policy)
}

/// The right-linear operator `P^pi` on Q-space:
/// `(P^pi Q)(x,u) = sum_x' P_u(x'|x) Q(x', pi(x'))`.
///
/// For discounted problems the caller scales by the discount to form the
/// local linearization `gamma * P^pi`. SSP rows omit the absorbing state, so
/// they may sum to less than one.
pub fn policy_transition_operator(
    problem: &ProblemInstance,
    policy: &[usize],
) -> Result<LinearOperator, ProblemError> {
    match problem {
        ProblemInstance::Mdp(mdp) => {
            validate_policy(policy, mdp.states, mdp.actions)?;
            let dim = mdp.dim();
            let mut op = LinearOperator::zeros(dim);
            for x in 0..mdp.states {
                for u in 0..mdp.actions {
                    let row = mdp.kernel_row(x, u);
                    let from = x * mdp.actions + u;
                    for (x_next, &p) in row.iter().enumerate() {
                        if p != 0.0 {
                            op.set(from, x_next * mdp.actions + policy[x_next], p);
                        }
                    }
                }
            }
            Ok(op)
        }
        ProblemInstance::Ssp(ssp) => {
            // Policy is indexed by non-absorbing state (x - 1).
            validate_policy(policy, ssp.states - 1, ssp.actions)?;
            let dim = ssp.dim();
            let mut op = LinearOperator::zeros(dim);
            for x in 1..ssp.states {
                for u in 0..ssp.actions {
                    let row = ssp.kernel_row(x, u);
                    let from = ssp.coord(x, u);
                    for (x_next, &p) in row.iter().enumerate().skip(1) {
                        if p != 0.0 {
                            op.set(from, ssp.coord(x_next, policy[x_next - 1]), p);
                        }
                    }
                }
            }
            Ok(op)
        }
        ProblemInstance::Game(game) => {
            if game.actions2 != 1 {
                return Err(ProblemError::InvalidPolicy { state: 0, action: 0 });
            }
            validate_policy(policy, game.states, game.actions1)?;
            let dim = game.dim();
            let mut op = LinearOperator::zeros(dim);
            for x in 0..game.states {
                for u1 in 0..game.actions1 {
                    let row = game.kernel_row(x, u1, 0);
                    let from = game.coord(x, u1, 0);
                    for (x_next, &p) in row.iter().enumerate() {
                        if p != 0.0 {
                            op.set(from, game.coord(x_next, policy[x_next], 0), p);
                        }
                    }
                }
            }
            Ok(op)
        }
        // A reward process has no actions; the transition operator is the
        // kernel itself.
        ProblemInstance::AvgCost(mrp) => Ok(mrp.kernel.clone()),
    }
}

fn validate_policy(policy: &[usize], n_states: usize, n_actions: usize) -> Result<(), ProblemError> {
    if policy.len() != n_states {
        return Err(ProblemError::DimensionMismatch { expected: n_states, got: policy.len() });
    }
    for (x, &u) in policy.iter().enumerate() {
        if u >= n_actions {
            return Err(ProblemError::InvalidPolicy { state: x, action: u });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// The tagged union and shared entry points
// ---------------------------------------------------------------------------

/// Any of the four concrete problem families.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemInstance {
    Mdp(TabularMdp),
    Ssp(SspInstance),
    Game(MarkovGame),
    AvgCost(AvgCostMrp),
}

impl ProblemInstance {
    pub fn dim(&self) -> usize {
        match self {
            ProblemInstance::Mdp(p) => p.dim(),
            ProblemInstance::Ssp(p) => p.dim(),
            ProblemInstance::Game(p) => p.dim(),
            ProblemInstance::AvgCost(p) => p.dim(),
        }
    }

    /// Number of states a sampled successor index ranges over.
    pub fn n_successor_states(&self) -> usize {
        match self {
            ProblemInstance::Mdp(p) => p.states,
            ProblemInstance::Ssp(p) => p.states,
            ProblemInstance::Game(p) => p.states,
            ProblemInstance::AvgCost(p) => p.states(),
        }
    }

    pub fn noise(&self) -> &NoiseSpec {
        match self {
            ProblemInstance::Mdp(p) => &p.noise,
            ProblemInstance::Ssp(p) => &p.noise,
            ProblemInstance::Game(p) => &p.noise,
            ProblemInstance::AvgCost(p) => &p.noise,
        }
    }

    /// Kernel row governing the successor draw for one Q coordinate.
    pub fn kernel_row(&self, coord: usize) -> &[f64] {
        match self {
            ProblemInstance::Mdp(p) => {
                let x = coord / p.actions;
                let u = coord % p.actions;
                p.kernel_row(x, u)
            }
            ProblemInstance::Ssp(p) => {
                let x = 1 + coord / p.actions;
                let u = coord % p.actions;
                p.kernel_row(x, u)
            }
            ProblemInstance::Game(p) => {
                let x = coord / (p.actions1 * p.actions2);
                let rem = coord % (p.actions1 * p.actions2);
                p.kernel_row(x, rem / p.actions2, rem % p.actions2)
            }
            ProblemInstance::AvgCost(p) => p.kernel_row(coord),
        }
    }

    /// Population operator `h`.
    pub fn population(&self, theta: &DenseVector) -> Result<DenseVector, ProblemError> {
        match self {
            ProblemInstance::Mdp(p) => bellman_optimality(p, theta),
            ProblemInstance::Ssp(p) => ssp_bellman(p, theta),
            ProblemInstance::Game(p) => game_bellman(p, theta),
            ProblemInstance::AvgCost(p) => avgcost_bellman(p, theta),
        }
    }

    /// Empirical operator `H` defined by one generative sample. Dimensions
    /// are checked by the caller in `oracle::empirical_operator_at`.
    pub(crate) fn empirical(&self, sample: &GenerativeSample, theta: &DenseVector) -> DenseVector {
        let out = match self {
            ProblemInstance::Mdp(p) => empirical_bellman_optimality(p, theta, sample),
            ProblemInstance::Ssp(p) => ssp_empirical_bellman(p, theta, sample),
            ProblemInstance::Game(p) => game_empirical_bellman(p, theta, sample),
            ProblemInstance::AvgCost(p) => avgcost_empirical_bellman(p, theta, sample),
        };
        out.expect("dimensions already checked")
    }

    /// The norm the family's theory is stated in (weighted norms for SSP
    /// must be computed separately via `ssp_weights`).
    pub fn default_norm(&self) -> NormSpec {
        match self {
            ProblemInstance::AvgCost(_) => NormSpec::Span,
            _ => NormSpec::Sup,
        }
    }

    pub fn discount(&self) -> Option<f64> {
        match self {
            ProblemInstance::Mdp(p) => Some(p.discount),
            ProblemInstance::Game(p) => Some(p.discount),
            _ => None,
        }
    }
}

/// Exact fixed point for testing: value iteration for the contractive
/// families, a quotient-space solve for average-cost problems.
pub fn fixed_point_oracle(
    problem: &ProblemInstance,
    tol: f64,
) -> Result<DenseVector, ProblemError> {
    match problem {
        ProblemInstance::AvgCost(mrp) => {
            let c = DenseVector::new(mrp.costs.clone())?;
            let q = quotient_solve(mrp.kernel(), mrp.stationary(), &c)?;
            Ok(q.solution)
        }
        _ => {
            let mut q = DenseVector::zeros(problem.dim());
            let cap = 2_000_000;
            for _ in 0..cap {
                let next = problem.population(&q)?;
                let diff = next.sub(&q)?.sup_norm();
                q = next;
                if diff <= tol {
                    return Ok(q);
                }
            }
            Err(ProblemError::IterationCap { iterations: cap })
        }
    }
}

// ---------------------------------------------------------------------------
// Seeded random instance generators
// ---------------------------------------------------------------------------

/// Seeded random instance generators used by experiments and audits.
pub mod generator {
    use super::*;

    // Generator streams use run ids far away from experiment horizons.
    const GEN_RUN: u64 = u64::MAX - 0x47454e;

    fn random_row(step: &mut crate::oracle::StepRng, n: usize, sparsity: f64) -> Vec<f64> {
        let mut row = vec![0.0; n];
        let mut any = false;
        for slot in row.iter_mut() {
            if step.next_uniform() < sparsity {
                *slot = 0.05 + step.next_uniform();
                any = true;
            }
        }
        if !any {
            let idx = (step.next_uniform() * n as f64) as usize % n;
            row[idx] = 1.0;
        }
        let total: f64 = row.iter().sum();
        for x in &mut row {
            *x /= total;
        }
        row
    }

    /// Random discounted MDP with strictly valid kernel rows.
    pub fn mdp(
        seed: u64,
        states: usize,
        actions: usize,
        discount: f64,
        sparsity: f64,
        noise: NoiseSpec,
    ) -> Result<TabularMdp, ProblemError> {
        let mut rng = RngStream::new(seed, GEN_RUN);
        let mut step = rng.step_rng();
        let mut kernel = Vec::with_capacity(actions);
        for _ in 0..actions {
            let mut per_action = Vec::with_capacity(states);
            for _ in 0..states {
                per_action.push(random_row(&mut step, states, sparsity));
            }
            kernel.push(per_action);
        }
        let rewards = (0..states)
            .map(|_| (0..actions).map(|_| step.next_uniform()).collect())
            .collect();
        TabularMdp::new(kernel, rewards, discount, noise)
    }

    /// Random proper SSP: every row routes at least `absorb_min` probability
    /// straight to the absorbing state, so every policy is proper.
    pub fn ssp(
        seed: u64,
        states: usize,
        actions: usize,
        absorb_min: f64,
        noise: NoiseSpec,
    ) -> Result<SspInstance, ProblemError> {
        let mut rng = RngStream::new(seed, GEN_RUN ^ 1);
        let mut step = rng.step_rng();
        let mut kernel = Vec::with_capacity(actions);
        for _ in 0..actions {
            let mut per_action = Vec::with_capacity(states);
            // Absorbing state self-loops under every action.
            let mut absorbing_row = vec![0.0; states];
            absorbing_row[0] = 1.0;
            per_action.push(absorbing_row);
            for _ in 1..states {
                let mut row = random_row(&mut step, states, 1.0);
                for x in &mut row {
                    *x *= 1.0 - absorb_min;
                }
                row[0] += absorb_min;
                per_action.push(row);
            }
            kernel.push(per_action);
        }
        let mut costs = Vec::with_capacity(states);
        costs.push(vec![0.0; actions]);
        for _ in 1..states {
            costs.push((0..actions).map(|_| 0.5 + step.next_uniform()).collect());
        }
        SspInstance::new(kernel, costs, noise)
    }

    /// Random MDP with point-mass transition rows. With zero cost noise the
    /// empirical operator coincides with the population operator, which is
    /// what noiseless-reduction checks need.
    pub fn deterministic_mdp(
        seed: u64,
        states: usize,
        actions: usize,
        discount: f64,
    ) -> Result<TabularMdp, ProblemError> {
        let mut rng = RngStream::new(seed, GEN_RUN ^ 4);
        let mut step = rng.step_rng();
        let mut kernel = Vec::with_capacity(actions);
        for _ in 0..actions {
            let mut per_action = Vec::with_capacity(states);
            for _ in 0..states {
                let mut row = vec![0.0; states];
                let idx = (step.next_uniform() * states as f64) as usize % states;
                row[idx] = 1.0;
                per_action.push(row);
            }
            kernel.push(per_action);
        }
        let rewards = (0..states)
            .map(|_| (0..actions).map(|_| step.next_uniform()).collect())
            .collect();
        TabularMdp::new(kernel, rewards, discount, NoiseSpec::None)
    }

    /// Random zero-sum Markov game with rewards in [-1, 1].
    pub fn game(
        seed: u64,
        states: usize,
        actions1: usize,
        actions2: usize,
        discount: f64,
        sparsity: f64,
        noise: NoiseSpec,
    ) -> Result<MarkovGame, ProblemError> {
        let mut rng = RngStream::new(seed, GEN_RUN ^ 2);
        let mut step = rng.step_rng();
        let mut kernel = Vec::with_capacity(actions1);
        for _ in 0..actions1 {
            let mut per1 = Vec::with_capacity(actions2);
            for _ in 0..actions2 {
                let mut per2 = Vec::with_capacity(states);
                for _ in 0..states {
                    per2.push(random_row(&mut step, states, sparsity));
                }
                per1.push(per2);
            }
            kernel.push(per1);
        }
        let rewards = (0..states)
            .map(|_| {
                (0..actions1)
                    .map(|_| (0..actions2).map(|_| step.next_symmetric()).collect())
                    .collect()
            })
            .collect();
        MarkovGame::new(kernel, rewards, discount, noise)
    }

    /// Random ergodic chain (strictly positive rows) with costs in [0, 1).
    pub fn chain(seed: u64, states: usize, noise: NoiseSpec) -> Result<AvgCostMrp, ProblemError> {
        let mut rng = RngStream::new(seed, GEN_RUN ^ 3);
        let mut step = rng.step_rng();
        let kernel: Vec<Vec<f64>> = (0..states)
            .map(|_| {
                let mut row: Vec<f64> = (0..states).map(|_| 0.05 + step.next_uniform()).collect();
                let total: f64 = row.iter().sum();
                for x in &mut row {
                    *x /= total;
                }
                row
            })
            .collect();
        let costs = (0..states).map(|_| step.next_uniform()).collect();
        AvgCostMrp::new(kernel, costs, noise)
    }
}
