//! Experiment configuration: a single TOML file holding the problem
//! description (inline or generator), algorithm selection, tuning, and
//! output options.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub tuning: TuningSection,
    pub problem: ProblemSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub dryrun: Option<DryRunSection>,
    #[serde(default)]
    pub estimate: EstimateSection,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub norm: NormChoice,
    #[serde(default)]
    pub theta0: Theta0Spec,
    /// Explicit checkpoint indices; empty selects the geometric default.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
}

fn default_algorithm() -> Algorithm {
    Algorithm::RootSa
}

fn default_delta() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
pub enum Algorithm {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "rootsa")]
    RootSa,
    #[serde(rename = "rootsa-restart")]
    RootSaRestart,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Vanilla => "vanilla",
            Algorithm::RootSa => "rootsa",
            Algorithm::RootSaRestart => "rootsa-restart",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormChoice {
    /// Family default: sup for MDPs and games, hitting-time weighted for
    /// SSP, span for average-cost.
    #[default]
    Auto,
    Sup,
    Span,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Theta0Spec {
    Named(Theta0Named),
    /// Fixed point shifted by a constant vector (sup distance = |shift|).
    Shifted { shift: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theta0Named {
    Zero,
    FixedPoint,
}

impl Default for Theta0Spec {
    fn default() -> Self {
        Theta0Spec::Named(Theta0Named::Zero)
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningSection {
    /// Explicit stepsize; `None` resolves the family formula.
    pub alpha: Option<f64>,
    /// Explicit burn-in; `None` resolves the family formula (clamped to the
    /// feasible range for the horizon).
    pub burnin: Option<usize>,
    /// Restart count for `rootsa-restart`; `None` uses `ceil(2 log n)`.
    pub restarts: Option<usize>,
    pub epoch_mult: f64,
    /// Constant in the stepsize formula.
    pub stepsize_c: f64,
    /// Constant in the burn-in formula.
    pub burnin_c: f64,
    /// Vanilla stepsize decay exponent (`alpha_t = alpha / (t+1)^exp`).
    pub vanilla_exponent: f64,
}

impl Default for TuningSection {
    fn default() -> Self {
        Self {
            alpha: None,
            burnin: None,
            restarts: None,
            epoch_mult: 2.0,
            stepsize_c: 1.0,
            burnin_c: 2.0,
            vanilla_exponent: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    #[serde(default)]
    pub generator: Option<GeneratorSection>,
    #[serde(default)]
    pub inline: Option<InlineSection>,
    #[serde(default)]
    pub noise: NoiseSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Mdp,
    Ssp,
    Game,
    Avgcost,
}

impl ProblemKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::Mdp => "mdp",
            ProblemKind::Ssp => "ssp",
            ProblemKind::Game => "game",
            ProblemKind::Avgcost => "avgcost",
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub seed: u64,
    pub states: usize,
    #[serde(default = "one")]
    pub actions: usize,
    /// Column player's action count for games.
    #[serde(default = "one")]
    pub actions2: usize,
    #[serde(default)]
    pub discount: f64,
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    /// Minimum per-step probability of absorbing for generated SSPs.
    #[serde(default = "default_absorb_min")]
    pub absorb_min: f64,
    /// Point-mass transition rows (a zero-noise oracle when combined with
    /// `noise.kind = "none"`).
    #[serde(default)]
    pub deterministic: bool,
}

fn one() -> usize {
    1
}

fn default_sparsity() -> f64 {
    1.0
}

fn default_absorb_min() -> f64 {
    0.2
}

/// Explicit problem description. Kernels are nested row-stochastic arrays:
/// `kernel_mdp[u][x][x']`, `kernel_game[u1][u2][x][x']`,
/// `kernel_chain[x][x']`.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct InlineSection {
    pub kernel_mdp: Option<Vec<Vec<Vec<f64>>>>,
    pub kernel_game: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    pub kernel_chain: Option<Vec<Vec<f64>>>,
    /// `rewards[x][u]` for MDPs and SSP costs alike.
    pub rewards: Option<Vec<Vec<f64>>>,
    /// `rewards_game[x][u1][u2]`.
    pub rewards_game: Option<Vec<Vec<Vec<f64>>>>,
    /// Per-state costs for average-cost chains.
    pub costs: Option<Vec<f64>>,
    pub discount: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "default_noise_kind")]
    pub kind: NoiseKind,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { kind: NoiseKind::Rademacher, amplitude: 1.0 }
    }
}

fn default_noise_kind() -> NoiseKind {
    NoiseKind::Rademacher
}

fn default_amplitude() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    None,
    Rademacher,
    Uniform,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<String>,
}

/// Injected per-horizon series replayed through the reporting path when
/// `--dry-run` is set.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DryRunSection {
    /// `[[n, defect], ...]`
    pub series: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSection {
    pub cov_samples: usize,
    pub mc_draws: usize,
    /// Horizons the predicted leading-order errors are reported at.
    pub rate_horizons: Vec<usize>,
    pub hot_constant: f64,
    /// Failure probability for the rate equation; defaults to the
    /// experiment delta.
    pub rate_delta: Option<f64>,
    /// Estimate the covariance at the exact fixed point or at the final
    /// iterate of a short calibration run.
    pub at: CovAt,
    /// Existing records.csv whose measured errors are compared against the
    /// predictions.
    pub runs_csv: Option<String>,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            cov_samples: rootsa_core::diagnostics::DEFAULT_COV_SAMPLES,
            mc_draws: rootsa_core::diagnostics::DEFAULT_MC_DRAWS,
            rate_horizons: vec![],
            hot_constant: 1.0,
            rate_delta: None,
            at: CovAt::FixedPoint,
            runs_csv: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovAt {
    FixedPoint,
    FinalIterate,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Config = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let e = &self.experiment;
        if e.horizons.is_empty() {
            return Err(CliError::Config("experiment.horizons must be non-empty".into()));
        }
        if e.seeds.is_empty() {
            return Err(CliError::Config("experiment.seeds must be non-empty".into()));
        }
        if !(e.delta > 0.0 && e.delta < 1.0) {
            return Err(CliError::Config(format!(
                "experiment.delta must lie in (0, 1), got {}",
                e.delta
            )));
        }
        if let Some(alpha) = self.tuning.alpha {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(CliError::Config(format!(
                    "tuning.alpha must lie in (0, 1], got {alpha}"
                )));
            }
        }
        if self.tuning.epoch_mult <= 1.0 {
            return Err(CliError::Config("tuning.epoch_mult must exceed 1".into()));
        }
        if self.problem.generator.is_none() && self.problem.inline.is_none() {
            return Err(CliError::Config(
                "problem needs either a [problem.generator] or a [problem.inline] section".into(),
            ));
        }
        if self.problem.noise.amplitude < 0.0 {
            return Err(CliError::Config("problem.noise.amplitude must be nonnegative".into()));
        }
        Ok(())
    }
}
