//! Resolution from a parsed config to a runnable problem context: the
//! instance itself, its measurement norm, the exact fixed point, the
//! contraction structure, and per-horizon tuning.

use rootsa_core::diagnostics::mixing_time;
use rootsa_core::problems::{
    fixed_point_oracle, generator, ssp_weights, AvgCostMrp, MarkovGame, NoiseSpec,
    ProblemInstance, SspInstance, TabularMdp, WeightVector,
};
use rootsa_core::solver::{
    default_burnin, default_restarts, default_stepsize, ContractionKind, TuningFamily,
};
use rootsa_core::vecspace::{DenseVector, NormSpec};
use serde::Serialize;

use crate::config::{
    Algorithm, Config, NoiseKind, NormChoice, ProblemKind, Theta0Named, Theta0Spec,
};
use crate::CliError;

const MIXING_CAP: usize = 10_000;
const ORACLE_TOL: f64 = 1e-11;

/// A fully resolved problem: everything the runner and the diagnostics
/// commands need beyond per-horizon tuning.
pub struct ProblemContext {
    pub id: String,
    pub kind: ProblemKind,
    pub instance: ProblemInstance,
    pub norm: NormSpec,
    pub theta_star: DenseVector,
    pub contraction: ContractionKind,
    pub tuning_family: TuningFamily,
    pub weights: Option<WeightVector>,
    pub t_mix: Option<usize>,
}

fn noise_spec(section: &crate::config::NoiseSection) -> NoiseSpec {
    match section.kind {
        NoiseKind::None => NoiseSpec::None,
        NoiseKind::Rademacher => NoiseSpec::Rademacher { amplitude: section.amplitude },
        NoiseKind::Uniform => NoiseSpec::Uniform { amplitude: section.amplitude },
    }
}

/// Builds just the instance (the audit command reports construction
/// failures instead of propagating them).
pub fn build_instance(config: &Config) -> Result<(ProblemInstance, String), CliError> {
    let section = &config.problem;
    let noise = noise_spec(&section.noise);
    let runtime = |e: rootsa_core::problems::ProblemError| CliError::Config(format!("problem: {e}"));
    if let Some(g) = &section.generator {
        let id = format!("{}-gen{}", section.kind.name(), g.seed);
        let instance = match section.kind {
            ProblemKind::Mdp => {
                let mdp = if g.deterministic {
                    let det = generator::deterministic_mdp(g.seed, g.states, g.actions, g.discount)
                        .map_err(runtime)?;
                    if matches!(noise, NoiseSpec::None) {
                        det
                    } else {
                        return Err(CliError::Config(
                            "deterministic generator expects noise.kind = \"none\"".into(),
                        ));
                    }
                } else {
                    generator::mdp(g.seed, g.states, g.actions, g.discount, g.sparsity, noise)
                        .map_err(runtime)?
                };
                ProblemInstance::Mdp(mdp)
            }
            ProblemKind::Ssp => ProblemInstance::Ssp(
                generator::ssp(g.seed, g.states, g.actions, g.absorb_min, noise)
                    .map_err(runtime)?,
            ),
            ProblemKind::Game => ProblemInstance::Game(
                generator::game(
                    g.seed, g.states, g.actions, g.actions2, g.discount, g.sparsity, noise,
                )
                .map_err(runtime)?,
            ),
            ProblemKind::Avgcost => {
                ProblemInstance::AvgCost(generator::chain(g.seed, g.states, noise).map_err(runtime)?)
            }
        };
        return Ok((instance, id));
    }
    let inline = section.inline.as_ref().expect("validated");
    let id = format!("{}-inline", section.kind.name());
    let missing = |what: &str| CliError::Config(format!("problem.inline.{what} is required"));
    let instance = match section.kind {
        ProblemKind::Mdp => {
            let kernel = inline.kernel_mdp.clone().ok_or_else(|| missing("kernel_mdp"))?;
            let rewards = inline.rewards.clone().ok_or_else(|| missing("rewards"))?;
            let discount = inline.discount.ok_or_else(|| missing("discount"))?;
            ProblemInstance::Mdp(
                TabularMdp::new(kernel, rewards, discount, noise).map_err(runtime)?,
            )
        }
        ProblemKind::Ssp => {
            let kernel = inline.kernel_mdp.clone().ok_or_else(|| missing("kernel_mdp"))?;
            let costs = inline.rewards.clone().ok_or_else(|| missing("rewards"))?;
            ProblemInstance::Ssp(SspInstance::new(kernel, costs, noise).map_err(runtime)?)
        }
        ProblemKind::Game => {
            let kernel = inline.kernel_game.clone().ok_or_else(|| missing("kernel_game"))?;
            let rewards = inline.rewards_game.clone().ok_or_else(|| missing("rewards_game"))?;
            let discount = inline.discount.ok_or_else(|| missing("discount"))?;
            ProblemInstance::Game(
                MarkovGame::new(kernel, rewards, discount, noise).map_err(runtime)?,
            )
        }
        ProblemKind::Avgcost => {
            let kernel = inline.kernel_chain.clone().ok_or_else(|| missing("kernel_chain"))?;
            let costs = inline.costs.clone().ok_or_else(|| missing("costs"))?;
            ProblemInstance::AvgCost(AvgCostMrp::new(kernel, costs, noise).map_err(runtime)?)
        }
    };
    Ok((instance, id))
}

pub fn build_context(config: &Config) -> Result<ProblemContext, CliError> {
    let (instance, id) = build_instance(config)?;
    let kind = config.problem.kind;
    let runtime = |what: String| CliError::Runtime(what);

    let mut weights = None;
    let mut t_mix = None;
    let (contraction, tuning_family) = match &instance {
        ProblemInstance::Mdp(mdp) => (
            ContractionKind::Contractive { gamma: mdp.discount() },
            TuningFamily::SspOrGame { dim_product: mdp.dim() },
        ),
        ProblemInstance::Game(game) => (
            ContractionKind::Contractive { gamma: game.discount() },
            TuningFamily::SspOrGame { dim_product: game.dim() },
        ),
        ProblemInstance::Ssp(ssp) => {
            let w = ssp_weights(ssp).map_err(|e| runtime(format!("ssp weights: {e}")))?;
            let gamma = w.contraction_factor();
            let dim_product = ssp.states() * ssp.actions();
            weights = Some(w);
            (
                ContractionKind::Contractive { gamma },
                TuningFamily::SspOrGame { dim_product },
            )
        }
        ProblemInstance::AvgCost(mrp) => {
            let est = mixing_time(mrp.kernel(), MIXING_CAP);
            let tm = est.t_mix.ok_or_else(|| {
                runtime(format!("chain failed to mix within {MIXING_CAP} steps"))
            })?;
            t_mix = Some(tm);
            (
                ContractionKind::MultiStep { m: 2 * tm },
                TuningFamily::AvgCost { states: mrp.states() },
            )
        }
    };

    let norm = match config.experiment.norm {
        NormChoice::Sup => NormSpec::Sup,
        NormChoice::Span => NormSpec::Span,
        NormChoice::Weighted => {
            let w = weights
                .as_ref()
                .ok_or_else(|| CliError::Config("weighted norm needs an SSP problem".into()))?;
            w.norm()
        }
        NormChoice::Auto => match &instance {
            ProblemInstance::Ssp(_) => weights.as_ref().expect("ssp weights").norm(),
            other => other.default_norm(),
        },
    };

    let theta_star = fixed_point_oracle(&instance, ORACLE_TOL)
        .map_err(|e| runtime(format!("fixed-point oracle: {e}")))?;

    Ok(ProblemContext {
        id,
        kind,
        instance,
        norm,
        theta_star,
        contraction,
        tuning_family,
        weights,
        t_mix,
    })
}

impl ProblemContext {
    pub fn theta0(&self, spec: &Theta0Spec) -> DenseVector {
        match spec {
            Theta0Spec::Named(Theta0Named::Zero) => DenseVector::zeros(self.instance.dim()),
            Theta0Spec::Named(Theta0Named::FixedPoint) => self.theta_star.clone(),
            Theta0Spec::Shifted { shift } => self
                .theta_star
                .add_scaled(*shift, &DenseVector::constant(self.instance.dim(), 1.0))
                .expect("dims agree"),
        }
    }

    /// The `(1 - gamma)` scale used in higher-order proxies: for multi-step
    /// contraction the effective factor over one composition block is 1/2.
    pub fn effective_gamma(&self) -> f64 {
        match self.contraction {
            ContractionKind::Contractive { gamma } => gamma,
            ContractionKind::MultiStep { .. } => 0.5,
        }
    }
}

/// Per-horizon tuning after resolving "auto" fields, with the formula value
/// kept for the summary echo.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTuning {
    pub n: usize,
    pub alpha: f64,
    pub burnin: usize,
    /// Burn-in the formula asked for before feasibility clamping.
    pub formula_burnin: usize,
    pub clamped: bool,
    pub restarts: usize,
    pub epoch_mult: f64,
}

pub fn resolve_tuning(
    ctx: &ProblemContext,
    config: &Config,
    n: usize,
) -> Result<ResolvedTuning, CliError> {
    let t = &config.tuning;
    let delta = config.experiment.delta;
    let alpha = match t.alpha {
        Some(a) => a,
        None => default_stepsize(ctx.tuning_family, n, delta, t.stepsize_c)
            .map_err(|e| CliError::Config(format!("stepsize resolution: {e}")))?,
    };
    let restarts = match config.experiment.algorithm {
        Algorithm::RootSaRestart => t.restarts.unwrap_or_else(|| default_restarts(n)),
        _ => 0,
    };
    // Feasibility ceiling on the burn-in: a plain run needs n >= 2 B0, a
    // restarted run additionally spends restarts * epoch_mult * B0.
    let denom = restarts as f64 * t.epoch_mult + 2.0;
    let cap = ((n as f64 / denom).floor() as usize).max(2);
    let formula_burnin = match t.burnin {
        Some(b) => b,
        None => default_burnin(alpha, ctx.contraction, n, delta, t.burnin_c)
            .map_err(|e| CliError::Config(format!("burn-in resolution: {e}")))?,
    };
    let (burnin, clamped) = if t.burnin.is_some() {
        (formula_burnin, false)
    } else {
        (formula_burnin.min(cap), formula_burnin > cap)
    };
    if n < 2 * burnin {
        return Err(CliError::Config(format!(
            "horizon {n} is below twice the burn-in {burnin}"
        )));
    }
    Ok(ResolvedTuning {
        n,
        alpha,
        burnin,
        formula_burnin,
        clamped,
        restarts,
        epoch_mult: t.epoch_mult,
    })
}

/// Checkpoint schedule for one run: an explicit list is filtered to the
/// horizon, sorted, and always ends at the horizon itself.
pub fn resolve_checkpoints(config: &Config, burnin: usize, n: usize) -> Vec<usize> {
    if config.experiment.checkpoints.is_empty() {
        rootsa_core::solver::default_checkpoints(burnin, n)
    } else {
        let mut out: Vec<usize> = config
            .experiment
            .checkpoints
            .iter()
            .copied()
            .filter(|&c| c >= 1 && c <= n)
            .collect();
        out.sort_unstable();
        out.dedup();
        if out.last() != Some(&n) {
            out.push(n);
        }
        out
    }
}
