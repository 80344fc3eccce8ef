//! Task scheduling and record serialization. A bounded worker pool executes
//! the (seed, horizon) grid; every worker owns its stream, and records are
//! merged back in task order, so output bytes are identical for any worker
//! count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rootsa_core::oracle::RngStream;
use rootsa_core::solver::{
    rootsa_restart_run, rootsa_run, vanilla_sa_run, Clock, RootSaConfig, RunTrace, StepSchedule,
    TraceSpec,
};
use serde::Serialize;

use crate::config::{Algorithm, Config};
use crate::context::{resolve_checkpoints, ProblemContext, ResolvedTuning};
use crate::CliError;

pub struct WallClock {
    start: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self { start: Instant::now() }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointRecord {
    pub t: usize,
    pub defect: f64,
    pub error: Option<f64>,
    pub tracker_gap: Option<f64>,
}

/// One row of records.csv (wall time is reported in the JSON summary only,
/// so the CSV stays byte-identical across reruns).
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub problem: String,
    pub algorithm: String,
    pub seed: u64,
    pub n: usize,
    pub alpha: f64,
    pub burnin: usize,
    pub restarts: usize,
    pub diverged: bool,
    pub final_defect: f64,
    pub final_error: Option<f64>,
    pub wall_ms: f64,
    pub checkpoints: Vec<CheckpointRecord>,
}

fn record_from_trace(
    ctx: &ProblemContext,
    algorithm: Algorithm,
    seed: u64,
    tuning: &ResolvedTuning,
    trace: &RunTrace,
    wall_ms: f64,
) -> RunRecord {
    let last = trace.checkpoints.last();
    RunRecord {
        problem: ctx.id.clone(),
        algorithm: algorithm.name().to_string(),
        seed,
        n: tuning.n,
        alpha: tuning.alpha,
        burnin: tuning.burnin,
        restarts: tuning.restarts,
        diverged: trace.diverged,
        final_defect: last.map_or(f64::NAN, |c| c.defect),
        final_error: last.and_then(|c| c.error),
        wall_ms,
        checkpoints: trace
            .checkpoints
            .iter()
            .map(|c| CheckpointRecord {
                t: c.t,
                defect: c.defect,
                error: c.error,
                tracker_gap: c.tracker_gap,
            })
            .collect(),
    }
}

/// Executes one (seed, horizon) task.
pub fn execute_task(
    config: &Config,
    ctx: &ProblemContext,
    tuning: &ResolvedTuning,
    seed: u64,
    seed_offset: u64,
) -> Result<RunRecord, CliError> {
    let algorithm = config.experiment.algorithm;
    let theta0 = ctx.theta0(&config.experiment.theta0);
    let trace_spec = TraceSpec::new(ctx.norm.clone()).with_theta_star(ctx.theta_star.clone());
    let mut rng = RngStream::new(seed.wrapping_add(seed_offset), tuning.n as u64);
    let clock = WallClock::new();
    let run_err = |e: rootsa_core::solver::SolverError| CliError::Runtime(format!("run failed: {e}"));
    let trace = match algorithm {
        Algorithm::Vanilla => {
            let schedule = if config.tuning.vanilla_exponent == 0.0 {
                StepSchedule::Constant(tuning.alpha)
            } else {
                StepSchedule::Polynomial {
                    coeff: tuning.alpha,
                    exponent: config.tuning.vanilla_exponent,
                }
            };
            vanilla_sa_run(
                &ctx.instance,
                &theta0,
                &schedule,
                tuning.n,
                &trace_spec,
                &mut rng,
                &clock,
            )
            .map_err(run_err)?
        }
        Algorithm::RootSa | Algorithm::RootSaRestart => {
            let checkpoints = resolve_checkpoints(config, tuning.burnin, tuning.n);
            let run_config = RootSaConfig::new(tuning.alpha, tuning.burnin, tuning.n)
                .map_err(run_err)?
                .with_restarts(tuning.restarts)
                .with_epoch_mult(tuning.epoch_mult)
                .with_checkpoints(checkpoints);
            if algorithm == Algorithm::RootSaRestart {
                rootsa_restart_run(&run_config, &ctx.instance, &theta0, &trace_spec, &mut rng, &clock)
                    .map_err(run_err)?
            } else {
                rootsa_run(&run_config, &ctx.instance, &theta0, &trace_spec, &mut rng, &clock)
                    .map_err(run_err)?
            }
        }
    };
    Ok(record_from_trace(ctx, algorithm, seed, tuning, &trace, clock.now_ms()))
}

/// Runs the full (horizon x seed) grid on `workers` threads; records come
/// back in deterministic task order.
pub fn run_grid(
    config: &Config,
    ctx: &ProblemContext,
    tunings: &[ResolvedTuning],
    workers: usize,
    seed_offset: u64,
) -> Result<Vec<RunRecord>, CliError> {
    let mut tasks = Vec::new();
    for tuning in tunings {
        for &seed in &config.experiment.seeds {
            tasks.push((tuning, seed));
        }
    }
    let workers = workers.max(1).min(tasks.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRecord, CliError>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= tasks.len() {
                    break;
                }
                let (tuning, seed) = tasks[idx];
                let record = execute_task(config, ctx, tuning, seed, seed_offset);
                results.lock().expect("poisoned")[idx] = Some(record);
            });
        }
    });
    let collected = results.into_inner().expect("poisoned");
    let mut out = Vec::with_capacity(tasks.len());
    for slot in collected {
        out.push(slot.expect("every task executed")?);
    }
    Ok(out)
}

/// 17 significant digits: enough for exact f64 round-trips.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.16e}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

pub const CSV_HEADER: &str =
    "problem,algorithm,seed,n,alpha,burnin,restarts,diverged,final_defect,final_error,series";

/// Stable CSV serialization. The series cell packs the checkpoint records
/// as `t:defect:error:tracker_gap` tokens joined by ';' with empty slots
/// for absent values.
pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let series: Vec<String> = r
            .checkpoints
            .iter()
            .map(|c| {
                format!(
                    "{}:{}:{}:{}",
                    c.t,
                    fmt_float(c.defect),
                    fmt_opt(c.error),
                    fmt_opt(c.tracker_gap)
                )
            })
            .collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.problem,
            r.algorithm,
            r.seed,
            r.n,
            fmt_float(r.alpha),
            r.burnin,
            r.restarts,
            r.diverged,
            fmt_float(r.final_defect),
            fmt_opt(r.final_error),
            series.join(";")
        ));
    }
    out
}

/// Per-horizon aggregate statistics over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct HorizonAggregate {
    pub n: usize,
    pub runs: usize,
    pub diverged: usize,
    pub mean_defect: f64,
    pub se_defect: f64,
    pub mean_error: Option<f64>,
    pub se_error: Option<f64>,
    pub rms_error: Option<f64>,
}

pub fn aggregate(records: &[RunRecord], horizons: &[usize]) -> Vec<HorizonAggregate> {
    horizons
        .iter()
        .map(|&n| {
            let rows: Vec<&RunRecord> = records.iter().filter(|r| r.n == n).collect();
            let defects: Vec<f64> = rows.iter().map(|r| r.final_defect).collect();
            let errors: Vec<f64> = rows.iter().filter_map(|r| r.final_error).collect();
            let (mean_defect, se_defect) = mean_se(&defects);
            let (mean_error, se_error, rms_error) = if errors.len() == rows.len() && !errors.is_empty()
            {
                let (m, s) = mean_se(&errors);
                let rms =
                    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
                (Some(m), Some(s), Some(rms))
            } else {
                (None, None, None)
            };
            HorizonAggregate {
                n,
                runs: rows.len(),
                diverged: rows.iter().filter(|r| r.diverged).count(),
                mean_defect,
                se_defect,
                mean_error,
                se_error,
                rms_error,
            }
        })
        .collect()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
