//! The four subcommands: run, sweep, audit, estimate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rootsa_core::diagnostics::{
    contraction_audit, gaussian_complexity, mixing_time, noise_covariance,
    quotient_resolvent_functional, resolvent_functional, solve_rate_equation, AuditCheck,
    AuditReport, CovEstimate, LocalComplexityModel, RateParams, ResolventEstimate,
};
use rootsa_core::oracle::RngStream;
use rootsa_core::problems::{greedy_policy, policy_transition_operator, ProblemInstance, Sense};
use rootsa_core::solver::{rootsa_run, RootSaConfig, TraceSpec};
use rootsa_core::vecspace::{rate_slope, DenseVector, NormSpec};
use serde_json::json;

use crate::config::{Config, CovAt, ProblemKind, Theta0Named, Theta0Spec};
use crate::context::{build_context, resolve_tuning, ProblemContext, ResolvedTuning};
use crate::runner::{
    aggregate, fmt_float, records_to_csv, run_grid, HorizonAggregate, RunRecord, WallClock,
};
use crate::{CliError, CmdOptions};

const LIB_VERSION: &str = env!("CARGO_PKG_VERSION");
const AUDIT_PAIRS: usize = 1000;
const AUDIT_TOL: f64 = 1e-9;
const MIXING_CAP: usize = 10_000;

fn out_dir(opts: &CmdOptions, config: &Config) -> Result<PathBuf, CliError> {
    let dir = match &opts.out {
        Some(d) => d.clone(),
        None => PathBuf::from(config.output.dir.clone().unwrap_or_else(|| "out".to_string())),
    };
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn resolve_all_tunings(
    ctx: &ProblemContext,
    config: &Config,
) -> Result<Vec<ResolvedTuning>, CliError> {
    config
        .experiment
        .horizons
        .iter()
        .map(|&n| resolve_tuning(ctx, config, n))
        .collect()
}

fn summary_json(
    command: &str,
    config: &Config,
    ctx: Option<&ProblemContext>,
    tunings: &[ResolvedTuning],
    records: &[RunRecord],
    aggregates: &[HorizonAggregate],
    extra: serde_json::Value,
) -> serde_json::Value {
    json!({
        "version": LIB_VERSION,
        "command": command,
        "problem": ctx.map(|c| c.id.clone()),
        "config": config,
        "resolved_tuning": tunings,
        "aggregates": aggregates,
        "records": records,
        "report": extra,
    })
}

/// `run`: one run per (seed, horizon) pair; records.csv plus summary.json.
pub fn cmd_run(opts: &CmdOptions) -> Result<(), CliError> {
    let config = Config::load(&opts.config)?;
    let dir = out_dir(opts, &config)?;
    let ctx = build_context(&config)?;
    let tunings = resolve_all_tunings(&ctx, &config)?;
    let records = run_grid(&config, &ctx, &tunings, opts.workers, opts.seed_offset)?;
    let aggregates = aggregate(&records, &config.experiment.horizons);
    write_file(&dir.join("records.csv"), &records_to_csv(&records))?;
    let summary = summary_json("run", &config, Some(&ctx), &tunings, &records, &aggregates, json!({}));
    write_file(&dir.join("summary.json"), &pretty(&summary))?;
    Ok(())
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// `sweep`: seed x horizon grid with per-horizon means and a log-log slope
/// fit of the mean defect (and error, when the fixed point is known).
pub fn cmd_sweep(opts: &CmdOptions) -> Result<(), CliError> {
    let config = Config::load(&opts.config)?;
    if config.experiment.horizons.len() < 3 {
        return Err(CliError::Config("sweep needs at least 3 horizons".into()));
    }
    if config.experiment.seeds.len() < 5 {
        return Err(CliError::Config("sweep needs at least 5 seeds".into()));
    }
    let dir = out_dir(opts, &config)?;

    if opts.dry_run {
        return dry_run_sweep(&config, &dir);
    }

    let ctx = build_context(&config)?;
    let tunings = resolve_all_tunings(&ctx, &config)?;
    let records = run_grid(&config, &ctx, &tunings, opts.workers, opts.seed_offset)?;
    let aggregates = aggregate(&records, &config.experiment.horizons);
    write_file(&dir.join("records.csv"), &records_to_csv(&records))?;

    let slope_report = slope_report(&aggregates)?;
    let summary = summary_json(
        "sweep",
        &config,
        Some(&ctx),
        &tunings,
        &records,
        &aggregates,
        slope_report,
    );
    write_file(&dir.join("summary.json"), &pretty(&summary))?;
    Ok(())
}

fn slope_report(aggregates: &[HorizonAggregate]) -> Result<serde_json::Value, CliError> {
    let defect_points: Vec<(u64, f64)> =
        aggregates.iter().map(|a| (a.n as u64, a.mean_defect)).collect();
    let defect_slope = rate_slope(&defect_points)
        .map_err(|e| CliError::Runtime(format!("defect slope fit: {e}")))?;
    let error_points: Vec<(u64, f64)> = aggregates
        .iter()
        .filter_map(|a| a.mean_error.map(|m| (a.n as u64, m)))
        .collect();
    let error_slope = if error_points.len() == aggregates.len() {
        rate_slope(&error_points).ok()
    } else {
        None
    };
    Ok(json!({
        "defect_slope": defect_slope,
        "error_slope": error_slope,
    }))
}

/// Replays an injected per-horizon series through the reporting path,
/// bypassing the solver entirely.
fn dry_run_sweep(config: &Config, dir: &Path) -> Result<(), CliError> {
    let section = config
        .dryrun
        .as_ref()
        .ok_or_else(|| CliError::Config("--dry-run needs a [dryrun] section".into()))?;
    let table: BTreeMap<usize, f64> = section.series.iter().copied().collect();
    let mut records = Vec::new();
    for &n in &config.experiment.horizons {
        let defect = *table
            .get(&n)
            .ok_or_else(|| CliError::Config(format!("dryrun.series has no entry for n = {n}")))?;
        for &seed in &config.experiment.seeds {
            records.push(RunRecord {
                problem: "dry-run".to_string(),
                algorithm: config.experiment.algorithm.name().to_string(),
                seed,
                n,
                alpha: f64::NAN,
                burnin: 0,
                restarts: 0,
                diverged: false,
                final_defect: defect,
                final_error: None,
                wall_ms: 0.0,
                checkpoints: vec![],
            });
        }
    }
    let aggregates = aggregate(&records, &config.experiment.horizons);
    write_file(&dir.join("records.csv"), &records_to_csv(&records))?;
    let report = slope_report(&aggregates)?;
    let summary = summary_json("sweep", config, None, &[], &records, &aggregates, report);
    write_file(&dir.join("summary.json"), &pretty(&summary))?;
    Ok(())
}

/// `audit`: kernel stochasticity, contraction certificates, hitting-time
/// weight convergence, and mixing checks. Violations are report content;
/// the process exits 3 when any check fails.
pub fn cmd_audit(opts: &CmdOptions) -> Result<(), CliError> {
    let config = Config::load(&opts.config)?;
    let dir = out_dir(opts, &config)?;
    let mut report = AuditReport::default();

    raw_kernel_check(&config, &mut report);
    if report.passed() {
        match crate::context::build_instance(&config) {
            Ok((instance, id)) => {
                report.push(
                    AuditCheck::new("instance", true)
                        .field("id", id)
                        .field("dim", format!("{}", instance.dim())),
                );
                instance_checks(&instance, &mut report)?;
            }
            Err(e) => {
                report.push(
                    AuditCheck::new("construction", false).field("error", format!("{e}")),
                );
            }
        }
    }

    let text = report.to_text();
    write_file(&dir.join("audit.txt"), &text)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::AuditViolation(format!(
            "{} (see {})",
            report
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name.clone())
                .collect::<Vec<_>>()
                .join(", "),
            dir.join("audit.txt").display()
        )))
    }
}

/// Stochasticity of the raw inline kernel rows, before construction can
/// reject them.
fn raw_kernel_check(config: &Config, report: &mut AuditReport) {
    let Some(inline) = &config.problem.inline else {
        report.push(
            AuditCheck::new("kernel_stochasticity", true)
                .field("source", "generator".to_string())
                .field("max_row_deviation", fmt_float(0.0)),
        );
        return;
    };
    let mut max_dev = 0.0f64;
    let mut bad_entry = false;
    let mut check_row = |row: &[f64]| {
        let mut sum = 0.0;
        for &p in row {
            if !(0.0..=1.0).contains(&p) {
                bad_entry = true;
            }
            sum += p;
        }
        max_dev = max_dev.max((sum - 1.0).abs());
    };
    if let Some(k) = &inline.kernel_mdp {
        for per_action in k {
            for row in per_action {
                check_row(row);
            }
        }
    }
    if let Some(k) = &inline.kernel_game {
        for a in k {
            for b in a {
                for row in b {
                    check_row(row);
                }
            }
        }
    }
    if let Some(k) = &inline.kernel_chain {
        for row in k {
            check_row(row);
        }
    }
    let passed = max_dev <= 1e-12 && !bad_entry;
    report.push(
        AuditCheck::new("kernel_stochasticity", passed)
            .field("source", "inline".to_string())
            .field("max_row_deviation", fmt_float(max_dev))
            .field("entries_in_range", format!("{}", !bad_entry)),
    );
}

fn instance_checks(instance: &ProblemInstance, report: &mut AuditReport) -> Result<(), CliError> {
    let mut rng = RngStream::new(0xa0d17, 0);
    let audit_err = |e: rootsa_core::diagnostics::DiagnosticsError| {
        CliError::Runtime(format!("audit failed to execute: {e}"))
    };
    match instance {
        ProblemInstance::Mdp(mdp) => {
            let gamma = mdp.discount();
            let ratio = contraction_audit(instance, &NormSpec::Sup, AUDIT_PAIRS, &mut rng, 1)
                .map_err(audit_err)?;
            report.push(
                AuditCheck::new("sup_contraction", ratio <= gamma + AUDIT_TOL)
                    .field("max_ratio", fmt_float(ratio))
                    .field("certified_factor", fmt_float(gamma)),
            );
        }
        ProblemInstance::Game(game) => {
            let gamma = game.discount();
            let ratio = contraction_audit(instance, &NormSpec::Sup, AUDIT_PAIRS, &mut rng, 1)
                .map_err(audit_err)?;
            report.push(
                AuditCheck::new("sup_contraction", ratio <= gamma + AUDIT_TOL)
                    .field("max_ratio", fmt_float(ratio))
                    .field("certified_factor", fmt_float(gamma)),
            );
        }
        ProblemInstance::Ssp(ssp) => match rootsa_core::problems::ssp_weights(ssp) {
            Ok(w) => {
                report.push(
                    AuditCheck::new("ssp_weights_convergence", true)
                        .field("w_max", fmt_float(w.w_max()))
                        .field("w_min", fmt_float(w.w_min())),
                );
                let factor = w.contraction_factor();
                let ratio =
                    contraction_audit(instance, &w.norm(), AUDIT_PAIRS, &mut rng, 1)
                        .map_err(audit_err)?;
                report.push(
                    AuditCheck::new("weighted_contraction", ratio <= factor + AUDIT_TOL)
                        .field("max_ratio", fmt_float(ratio))
                        .field("certified_factor", fmt_float(factor)),
                );
            }
            Err(e) => {
                report.push(
                    AuditCheck::new("ssp_weights_convergence", false)
                        .field("error", format!("{e}")),
                );
            }
        },
        ProblemInstance::AvgCost(mrp) => {
            let est = mixing_time(mrp.kernel(), MIXING_CAP);
            match est.t_mix {
                Some(t_mix) => {
                    report.push(
                        AuditCheck::new("mixing_time", true)
                            .field("t_mix", format!("{t_mix}"))
                            .field("max_pairwise_tv", fmt_float(est.max_tv)),
                    );
                    let one = contraction_audit(instance, &NormSpec::Span, AUDIT_PAIRS, &mut rng, 1)
                        .map_err(audit_err)?;
                    report.push(
                        AuditCheck::new("span_nonexpansive", one <= 1.0 + AUDIT_TOL)
                            .field("max_ratio", fmt_float(one)),
                    );
                    let multi = contraction_audit(
                        instance,
                        &NormSpec::Span,
                        AUDIT_PAIRS,
                        &mut rng,
                        2 * t_mix,
                    )
                    .map_err(audit_err)?;
                    report.push(
                        AuditCheck::new("span_multistep_contraction", multi <= 0.5 + AUDIT_TOL)
                            .field("steps", format!("{}", 2 * t_mix))
                            .field("max_ratio", fmt_float(multi)),
                    );
                }
                None => {
                    report.push(
                        AuditCheck::new("mixing_time", false)
                            .field("cap", format!("{MIXING_CAP}"))
                            .field("max_pairwise_tv", fmt_float(est.max_tv)),
                    );
                }
            }
        }
    }
    Ok(())
}

/// `estimate`: covariance at the fixed point, Gaussian complexity,
/// resolvent functionals, rate fixed points for MDP/SSP, and predicted
/// leading-order errors (with measured-vs-predicted ratios when a
/// records.csv is supplied).
pub fn cmd_estimate(opts: &CmdOptions) -> Result<(), CliError> {
    let config = Config::load(&opts.config)?;
    let dir = out_dir(opts, &config)?;
    let ctx = build_context(&config)?;
    let est = &config.estimate;
    let diag_err =
        |e: rootsa_core::diagnostics::DiagnosticsError| CliError::Runtime(format!("estimate: {e}"));

    // Covariance at the certified fixed point (or, bootstrap-style, at the
    // final iterate of one calibration run).
    let cov_point = match est.at {
        CovAt::FixedPoint => ctx.theta_star.clone(),
        CovAt::FinalIterate => calibration_iterate(&config, &ctx)?,
    };
    let mut rng = RngStream::new(0xe571, 0);
    let cov = noise_covariance(&ctx.instance, &cov_point, est.cov_samples, &mut rng)
        .map_err(diag_err)?;
    let gc = gaussian_complexity(&cov, &ctx.norm, est.mc_draws, &mut rng).map_err(diag_err)?;

    let resolvent = leading_resolvent(&ctx, &cov, est.mc_draws, &mut rng)?;

    // Rate fixed points (MDP and SSP only; the local-linearity construction
    // is not available for games with a non-degenerate column player).
    let measured = match &est.runs_csv {
        Some(path) => Some(read_measured_errors(Path::new(path))?),
        None => None,
    };
    let mut predictions = Vec::new();
    for &n in &est.rate_horizons {
        let predicted = resolvent.as_ref().map(|r| r.mean / (n as f64).sqrt());
        let rate = solve_rate_for(&ctx, &cov, n, &config, est.mc_draws, &mut rng)?;
        let (measured_mean, measured_rms, ratio) = match (&measured, predicted) {
            (Some(m), Some(p)) if m.contains_key(&n) => {
                let errs = &m[&n];
                let mean = errs.iter().sum::<f64>() / errs.len() as f64;
                let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
                (Some(mean), Some(rms), Some(mean / p))
            }
            _ => (None, None, None),
        };
        predictions.push(json!({
            "n": n,
            "predicted_error": predicted,
            "rate_fixed_point": rate.as_ref().map(|r| r.s_star),
            "rate_band_lower": rate.as_ref().map(|r| r.lower),
            "rate_band_upper": rate.as_ref().map(|r| r.upper),
            "higher_order": rate.as_ref().map(|r| r.higher_order),
            "measured_mean_error": measured_mean,
            "measured_rms_error": measured_rms,
            "measured_over_predicted": ratio,
        }));
    }

    let report = json!({
        "wbar": gc.wbar,
        "wbar_se": gc.wbar_se,
        "nu": gc.nu,
        "mc_draws": est.mc_draws,
        "cov_samples": est.cov_samples,
        "resolvent": resolvent.as_ref().map(|r| json!({
            "mean": r.mean,
            "std_error": r.std_error,
            "directional_sd": r.directional_sd,
        })),
        "b_star": b_star(&ctx),
        "predictions": predictions,
    });
    let summary = summary_json("estimate", &config, Some(&ctx), &[], &[], &[], report.clone());
    write_file(&dir.join("summary.json"), &pretty(&summary))?;
    write_file(&dir.join("estimate.txt"), &estimate_text(&ctx, &report))?;
    Ok(())
}

fn estimate_text(ctx: &ProblemContext, report: &serde_json::Value) -> String {
    let mut out = String::new();
    out.push_str(&format!("[estimate {}]\n", ctx.id));
    flatten_json("", report, &mut out);
    out.push('\n');
    out
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut String) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, val) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, val, out);
            }
        }
        serde_json::Value::Array(items) => {
            for (i, val) in items.iter().enumerate() {
                flatten_json(&format!("{prefix}.{i}"), val, out);
            }
        }
        other => {
            out.push_str(&format!("{prefix} = {other}\n"));
        }
    }
}

fn calibration_iterate(config: &Config, ctx: &ProblemContext) -> Result<DenseVector, CliError> {
    let n = config.experiment.horizons.iter().copied().max().unwrap_or(1 << 12);
    let tuning = resolve_tuning(ctx, config, n)?;
    let run_config = RootSaConfig::new(tuning.alpha, tuning.burnin, n)
        .map_err(|e| CliError::Runtime(format!("calibration run: {e}")))?;
    let theta0 = ctx.theta0(&Theta0Spec::Named(Theta0Named::Zero));
    let trace_spec = TraceSpec::new(ctx.norm.clone());
    let seed = config.experiment.seeds.first().copied().unwrap_or(0);
    let mut rng = RngStream::new(seed, n as u64);
    let trace = rootsa_run(&run_config, &ctx.instance, &theta0, &trace_spec, &mut rng, &WallClock::new())
        .map_err(|e| CliError::Runtime(format!("calibration run: {e}")))?;
    Ok(trace.final_theta)
}

/// The family's local-asymptotic error-scale functional.
fn leading_resolvent(
    ctx: &ProblemContext,
    cov: &CovEstimate,
    mc: usize,
    rng: &mut RngStream,
) -> Result<Option<ResolventEstimate>, CliError> {
    let diag_err =
        |e: rootsa_core::diagnostics::DiagnosticsError| CliError::Runtime(format!("estimate: {e}"));
    let prob_err =
        |e: rootsa_core::problems::ProblemError| CliError::Runtime(format!("estimate: {e}"));
    match &ctx.instance {
        ProblemInstance::Mdp(mdp) => {
            let policy = greedy_policy(&ctx.theta_star, mdp.states(), mdp.actions(), Sense::Max)
                .map_err(prob_err)?;
            let a = policy_transition_operator(&ctx.instance, &policy)
                .map_err(prob_err)?
                .scale(mdp.discount());
            Ok(Some(resolvent_functional(&a, cov, &ctx.norm, mc, rng).map_err(diag_err)?))
        }
        ProblemInstance::Ssp(ssp) => {
            let policy =
                greedy_policy(&ctx.theta_star, ssp.states() - 1, ssp.actions(), Sense::Min)
                    .map_err(prob_err)?;
            let a = policy_transition_operator(&ctx.instance, &policy).map_err(prob_err)?;
            Ok(Some(resolvent_functional(&a, cov, &ctx.norm, mc, rng).map_err(diag_err)?))
        }
        ProblemInstance::AvgCost(mrp) => Ok(Some(
            quotient_resolvent_functional(
                mrp.kernel(),
                mrp.stationary(),
                cov,
                &ctx.norm,
                mc,
                rng,
            )
            .map_err(diag_err)?,
        )),
        // No local-linearity construction for a non-degenerate column
        // player; model such games with actions2 = 1 as an MDP instead.
        ProblemInstance::Game(_) => Ok(None),
    }
}

fn b_star(ctx: &ProblemContext) -> f64 {
    let amp = ctx.instance.noise().amplitude();
    match &ctx.instance {
        ProblemInstance::Mdp(mdp) => mdp.reward_max() + amp + ctx.theta_star.sup_norm(),
        ProblemInstance::Game(game) => game.reward_max() + amp + ctx.theta_star.sup_norm(),
        ProblemInstance::Ssp(ssp) => {
            let w = ctx.weights.as_ref().expect("ssp context has weights");
            let weighted_star = w.norm().eval(&ctx.theta_star).unwrap_or(0.0);
            (ssp.cost_max() + amp) / w.w_min() + weighted_star
        }
        ProblemInstance::AvgCost(_) => {
            let span = NormSpec::Span.eval(&ctx.theta_star).unwrap_or(0.0);
            amp + span
        }
    }
}

fn solve_rate_for(
    ctx: &ProblemContext,
    cov: &CovEstimate,
    n: usize,
    config: &Config,
    mc: usize,
    rng: &mut RngStream,
) -> Result<Option<rootsa_core::diagnostics::RateSolution>, CliError> {
    let diag_err =
        |e: rootsa_core::diagnostics::DiagnosticsError| CliError::Runtime(format!("rate equation: {e}"));
    let mut model = match &ctx.instance {
        ProblemInstance::Mdp(mdp) => {
            LocalComplexityModel::new_mdp(mdp, &ctx.theta_star, cov, mc, rng).map_err(diag_err)?
        }
        ProblemInstance::Ssp(ssp) => LocalComplexityModel::new_ssp(
            ssp,
            &ctx.theta_star,
            ctx.weights.as_ref().expect("ssp context has weights"),
            cov,
            mc,
            rng,
        )
        .map_err(diag_err)?,
        _ => return Ok(None),
    };
    let est = &config.estimate;
    let gamma = ctx.effective_gamma();
    let params = RateParams {
        delta: est.rate_delta.unwrap_or(config.experiment.delta),
        gamma,
        lipschitz: match ctx.kind {
            ProblemKind::Mdp | ProblemKind::Game => gamma,
            _ => 1.0,
        },
        b_star: b_star(ctx),
        // The entropy proxies log(D) degenerate below two coordinates.
        dim_product: ctx.instance.dim().max(2) as f64,
        hot_constant: est.hot_constant,
        alpha: None,
    };
    let solution = solve_rate_equation(&mut model, n, &params).map_err(diag_err)?;
    if solution.s_star < solution.lower * (1.0 - 1e-6)
        || solution.s_star > solution.upper * (1.0 + 1e-6)
    {
        return Err(CliError::Runtime(format!(
            "rate fixed point {} escaped its uniform band [{}, {}]",
            solution.s_star, solution.lower, solution.upper
        )));
    }
    Ok(Some(solution))
}

/// Reads `n -> final errors` back out of a records.csv.
fn read_measured_errors(path: &Path) -> Result<BTreeMap<usize, Vec<f64>>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 11 {
            return Err(CliError::Config(format!(
                "{}:{}: expected 11 columns, got {}",
                path.display(),
                idx + 1,
                cols.len()
            )));
        }
        let n: usize = cols[3]
            .parse()
            .map_err(|e| CliError::Config(format!("{}:{}: bad n: {e}", path.display(), idx + 1)))?;
        if !cols[9].is_empty() {
            let err: f64 = cols[9].parse().map_err(|e| {
                CliError::Config(format!("{}:{}: bad final_error: {e}", path.display(), idx + 1))
            })?;
            out.entry(n).or_default().push(err);
        }
    }
    Ok(out)
}
