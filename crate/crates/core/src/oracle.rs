//! Deterministic seeded randomness and the generative stochastic oracle.
//!
//! A [`RngStream`] is keyed by `(seed, run)` and hands out one [`StepRng`]
//! per oracle step; the step generator is a counter-based ChaCha8 instance
//! keyed by `(seed, run, step)`, so identical keys always reproduce
//! identical draws and distinct keys give independent streams. Streams are
//! value types: parallel sweeps give each worker its own stream and never
//! share state.
//!
//! One [`GenerativeSample`] holds, for every coordinate of the problem, a
//! sampled successor state and a noise realization. Applying the same sample
//! at two different points realizes the coupled pair of empirical-operator
//! evaluations that the variance-reduced recursion consumes per step.

use alloc::vec::Vec;
use core::fmt;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::problems::{NoiseSpec, ProblemInstance};
use crate::vecspace::DenseVector;

/// Errors from oracle operations.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    DimensionMismatch { expected: usize, got: usize },
    ZeroBatch,
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            OracleError::ZeroBatch => write!(f, "batch size must be at least 1"),
        }
    }
}

impl core::error::Error for OracleError {}

/// A reproducible stream of per-step generators keyed by `(seed, run)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    run: u64,
    next_step: u64,
    samples_drawn: u64,
}

impl RngStream {
    pub fn new(seed: u64, run: u64) -> Self {
        Self { seed, run, next_step: 0, samples_drawn: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn run(&self) -> u64 {
        self.run
    }

    /// Number of generative samples drawn so far (the oracle budget).
    pub fn samples_drawn(&self) -> u64 {
        self.samples_drawn
    }

    /// Steps consumed so far, including non-sample uses such as Monte Carlo
    /// draws in diagnostics.
    pub fn steps_consumed(&self) -> u64 {
        self.next_step
    }

    /// Hands out the generator for the next step and advances the stream.
    pub fn step_rng(&mut self) -> StepRng {
        let step = self.next_step;
        self.next_step += 1;
        StepRng::keyed(self.seed, self.run, step)
    }

    /// The generator for a fixed step, without advancing the stream.
    pub fn step_rng_at(&self, step: u64) -> StepRng {
        StepRng::keyed(self.seed, self.run, step)
    }
}

/// Generator for a single step, keyed by `(seed, run, step)`.
pub struct StepRng {
    inner: ChaCha8Rng,
    gauss_spare: Option<f64>,
}

impl StepRng {
    fn keyed(seed: u64, run: u64, step: u64) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&run.to_le_bytes());
        key[16..24].copy_from_slice(&step.to_le_bytes());
        key[24..32].copy_from_slice(&0x9e37_79b9_7f4a_7c15u64.to_le_bytes());
        Self { inner: ChaCha8Rng::from_seed(key), gauss_spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `(0, 1]`, safe inside logarithms.
    pub fn next_open_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[-1, 1)`.
    pub fn next_symmetric(&mut self) -> f64 {
        2.0 * self.next_uniform() - 1.0
    }

    /// Standard normal draw via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        let u1 = self.next_open_uniform();
        let u2 = self.next_uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.gauss_spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// One noise realization for the given cost/reward noise family.
    pub fn next_noise(&mut self, noise: &NoiseSpec) -> f64 {
        match noise {
            NoiseSpec::None => 0.0,
            NoiseSpec::Rademacher { amplitude } => {
                if self.next_uniform() < 0.5 {
                    *amplitude
                } else {
                    -*amplitude
                }
            }
            NoiseSpec::Uniform { amplitude } => amplitude * self.next_symmetric(),
        }
    }
}

/// One draw from the generative model: a successor state and a noise
/// realization for every coordinate of the problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeSample {
    pub next_state: Vec<usize>,
    pub noise: Vec<f64>,
}

impl GenerativeSample {
    pub fn dim(&self) -> usize {
        self.next_state.len()
    }
}

/// Draws one generative sample: for each coordinate, an independent
/// successor from the kernel row (inverse CDF, fixed traversal order) and a
/// zero-mean noise realization for the cost/reward observation.
pub fn draw_sample(problem: &ProblemInstance, rng: &mut RngStream) -> GenerativeSample {
    let dim = problem.dim();
    let mut step = rng.step_rng();
    rng.samples_drawn += 1;
    let mut next_state = Vec::with_capacity(dim);
    for coord in 0..dim {
        let row = problem.kernel_row(coord);
        next_state.push(sample_index(row, step.next_uniform()));
    }
    let noise_spec = problem.noise();
    let noise = (0..dim).map(|_| step.next_noise(noise_spec)).collect();
    GenerativeSample { next_state, noise }
}

fn sample_index(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Falls through only on accumulated rounding at the top of the CDF.
    row.len() - 1
}

/// Applies the empirical operator defined by `sample` at the point `theta`.
///
/// Calling this twice with the same sample at two points yields the coupled
/// pair of evaluations the variance-reduced recursion needs.
pub fn empirical_operator_at(
    problem: &ProblemInstance,
    sample: &GenerativeSample,
    theta: &DenseVector,
) -> Result<DenseVector, OracleError> {
    if theta.dim() != problem.dim() {
        return Err(OracleError::DimensionMismatch {
            expected: problem.dim(),
            got: theta.dim(),
        });
    }
    if sample.dim() != problem.dim() {
        return Err(OracleError::DimensionMismatch {
            expected: problem.dim(),
            got: sample.dim(),
        });
    }
    Ok(problem.empirical(sample, theta))
}

/// Mean of `k` independent empirical-operator evaluations at `theta`.
pub fn empirical_mean_operator(
    problem: &ProblemInstance,
    theta: &DenseVector,
    k: usize,
    rng: &mut RngStream,
) -> Result<DenseVector, OracleError> {
    if k == 0 {
        return Err(OracleError::ZeroBatch);
    }
    let dim = problem.dim();
    if theta.dim() != dim {
        return Err(OracleError::DimensionMismatch { expected: dim, got: theta.dim() });
    }
    let mut acc = DenseVector::zeros(dim);
    for _ in 0..k {
        let sample = draw_sample(problem, rng);
        let h = problem.empirical(&sample, theta);
        acc = acc.add_scaled(1.0, &h).expect("dims agree");
    }
    Ok(acc.scale(1.0 / k as f64))
}
