//! The server/agents loop.
//!
//! Per iteration `k`: every agent takes one chain step and evaluates its
//! operator at the broadcast `θ_k` (the down-link is instantaneous); the
//! report enters the up-link; the server takes the freshest arrived report
//! per agent, aggregates, and steps. Runs are deterministic given the seeds.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::BufRead;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    dasa_direction, delayed_average_direction, mean_of, selection_size, server_step,
    OperatorReport, ParameterHistory,
};
use crate::delay::{DelayAccumulator, DelayModel, StalenessSource};
use crate::exec::{self, ExecMode};
use crate::markov::AgentStreams;
use crate::seed;
use crate::td::{Observation, SaProblem};
use crate::{Error, Result, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Median-filtered, gated average over the least stale half.
    Dasa,
    /// Plain average of all delayed reports.
    DelayedAverage,
    /// Plain average of all fresh operators; delays are ignored.
    NonDelayed,
}

impl Aggregator {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::Dasa => "dasa",
            Aggregator::DelayedAverage => "delayed_average",
            Aggregator::NonDelayed => "non_delayed",
        }
    }
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dasa" => Ok(Aggregator::Dasa),
            "delayed_average" | "delayed" => Ok(Aggregator::DelayedAverage),
            "non_delayed" => Ok(Aggregator::NonDelayed),
            other => Err(Error::invalid(format!("unknown aggregator `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_agents: usize,
    /// Iteration cap `T`.
    pub horizon: usize,
    pub alpha: f64,
    pub aggregator: Aggregator,
    pub delay: DelayModel,
    pub chain_seed: u64,
    pub delay_seed: u64,
    /// Past iterates kept for staleness errors; `None` keeps whatever is
    /// still referenced.
    pub history_depth: Option<usize>,
    /// Stop once this many server updates have been applied.
    pub update_budget: Option<u64>,
    /// Record every `trace_stride`-th iteration (and the last one).
    pub trace_stride: usize,
    /// Record `(updates, k, δ²)` every this many server updates.
    pub checkpoint_every: Option<u64>,
    /// Overrides `M = ceil(N/2)`; diagnostic only.
    pub selection_size: Option<usize>,
    pub replications: usize,
}

impl RunConfig {
    pub fn new(n_agents: usize, horizon: usize, alpha: f64, aggregator: Aggregator) -> Self {
        Self {
            n_agents,
            horizon,
            alpha,
            aggregator,
            delay: DelayModel::Constant { delay: 0 },
            chain_seed: 0,
            delay_seed: 0,
            history_depth: None,
            update_budget: None,
            trace_stride: 1,
            checkpoint_every: None,
            selection_size: None,
            replications: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::config("run.n_agents", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("run.horizon", "must be at least 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("run.alpha", format!("must be positive, got {}", self.alpha)));
        }
        if self.replications == 0 {
            return Err(Error::config("run.replications", "must be at least 1"));
        }
        if self.trace_stride == 0 {
            return Err(Error::config("run.trace_stride", "must be at least 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("run.checkpoint_every", "must be at least 1"));
        }
        if let Some(m) = self.selection_size {
            if m == 0 || m > self.n_agents {
                return Err(Error::config(
                    "run.selection_size",
                    format!("must lie in 1..={}", self.n_agents),
                ));
            }
        }
        self.delay.validate()
    }

    pub fn selection_size(&self) -> usize {
        self.selection_size.unwrap_or_else(|| selection_size(self.n_agents))
    }

    /// Seeds for replication `r`.
    pub fn replication(&self, r: usize) -> RunConfig {
        RunConfig {
            chain_seed: seed::derive(self.chain_seed, r as u64),
            delay_seed: seed::derive(self.delay_seed, r as u64),
            replications: 1,
            ..self.clone()
        }
    }
}

/// One recorded iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    /// `‖θ_k − θ*‖²`, before the update at `k`.
    pub delta_sq: f64,
    pub gate: bool,
    pub median_error: f64,
    pub epsilon: f64,
    pub mean_staleness: f64,
}

/// Error after a given number of server updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub updates: u64,
    /// Iterations executed when the checkpoint was taken.
    pub iterations: usize,
    pub delta_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub aggregator: Aggregator,
    pub n_agents: usize,
    pub selection_size: usize,
    pub alpha: f64,
    pub iterations: usize,
    pub update_count: u64,
    pub tau_avg: f64,
    pub tau_max_observed: usize,
    /// `ceil(T / (8 (τ_avg + 1)))` over the executed iterations.
    pub min_updates_bound: u64,
    /// `‖θ_T − θ*‖²` after the last executed iteration.
    pub final_delta_sq: f64,
    pub checkpoints: Vec<Checkpoint>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub summary: RunSummary,
}

pub const TRACE_HEADER: &str = "k,delta_sq,gate,median_error,epsilon,mean_staleness";

impl RunTrace {
    /// CSV with [`TRACE_HEADER`]; floats in shortest round-trip exponent form.
    pub fn to_csv_string(&self) -> String {
        rows_to_csv(&self.rows)
    }
}

pub fn rows_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:e},{},{:e},{:e},{:e}",
            r.k,
            r.delta_sq,
            u8::from(r.gate),
            r.median_error,
            r.epsilon,
            r.mean_staleness
        );
    }
    out
}

/// Parses a trace CSV written by [`rows_to_csv`].
pub fn rows_from_csv<R: BufRead>(reader: R) -> Result<Vec<TraceRow>> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| parse_err(1, 1, e.to_string()))?
        .unwrap_or_default();
    if header.trim_end() != TRACE_HEADER {
        return Err(parse_err(1, 1, format!("expected header `{TRACE_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let row = idx + 2;
        let line = line.map_err(|e| parse_err(row, 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(row, f.len(), format!("expected 6 fields, found {}", f.len())));
        }
        let float = |c: usize| -> Result<f64> {
            f[c].parse().map_err(|e| parse_err(row, c + 1, format!("`{}`: {e}", f[c])))
        };
        rows.push(TraceRow {
            k: f[0].parse().map_err(|e| parse_err(row, 1, format!("`{}`: {e}", f[0])))?,
            delta_sq: float(1)?,
            gate: match f[2] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(row, 3, format!("gate must be 0 or 1, got `{other}`"))),
            },
            median_error: float(3)?,
            epsilon: float(4)?,
            mean_staleness: float(5)?,
        });
    }
    Ok(rows)
}

fn parse_err(row: usize, column: usize, message: String) -> Error {
    Error::Parse {
        row,
        column,
        message,
    }
}

/// Runs one configuration, building the delay source from `config.delay`.
pub fn run<P: SaProblem + ?Sized>(problem: &P, config: &RunConfig) -> Result<RunTrace> {
    config.validate()?;
    let mut source = config
        .delay
        .source(config.n_agents, config.horizon, config.delay_seed)?;
    run_with_source(problem, config, source.as_mut())
}

/// Runs one configuration against an explicit staleness source.
pub fn run_with_source<P: SaProblem + ?Sized>(
    problem: &P,
    config: &RunConfig,
    source: &mut dyn StalenessSource,
) -> Result<RunTrace> {
    config.validate()?;
    let n = config.n_agents;
    if source.n_agents() != n {
        return Err(Error::invalid(format!(
            "delay source has {} agents, run has {n}",
            source.n_agents()
        )));
    }
    let started = Instant::now();
    let m = config.selection_size();
    let alpha = config.alpha;
    let theta_star = problem.theta_star().clone();
    let kernel = problem.chain().kernel();
    let mut streams = AgentStreams::new(n, problem.chain().stationary(), config.chain_seed);

    let mut theta = problem.theta0();
    let uses_delays = config.aggregator != Aggregator::NonDelayed;
    let mut history = (config.aggregator == Aggregator::Dasa)
        .then(|| ParameterHistory::new(theta.clone(), config.history_depth));
    let mut buffers: Vec<VecDeque<OperatorReport>> = vec![VecDeque::new(); n];
    let mut spare: Vec<Vector> = Vec::new();
    let mut fresh: Vec<Vector> = vec![Vector::zeros(problem.dim()); n];
    let mut computed_at = vec![0usize; n];
    let mut held = vec![0usize; n];
    let mut delays = DelayAccumulator::default();
    let mut rows = Vec::with_capacity(config.horizon / config.trace_stride + 2);
    let mut updates = 0u64;
    let mut iterations = 0usize;
    let mut checkpoints = Vec::new();
    if config.checkpoint_every.is_some() {
        checkpoints.push(Checkpoint {
            updates: 0,
            iterations: 0,
            delta_sq: (&theta - &theta_star).norm_squared(),
        });
    }

    for k in 0..config.horizon {
        if config.update_budget.is_some_and(|b| updates >= b) {
            break;
        }
        iterations = k + 1;
        for i in 0..n {
            let s = streams.state(i);
            let obs = Observation::new(s, streams.step(kernel, i));
            if uses_delays {
                let mut g = spare.pop().unwrap_or_else(|| Vector::zeros(problem.dim()));
                problem.operator_into(&theta, obs, &mut g);
                buffers[i].push_back(OperatorReport::new(i, k, g));
            } else {
                problem.operator_into(&theta, obs, &mut fresh[i]);
            }
        }

        let mut staleness_sum = 0usize;
        if uses_delays {
            source.advance(k, &mut computed_at)?;
            for i in 0..n {
                let t = computed_at[i];
                if t > k || t < held[i] {
                    return Err(Error::InvariantViolation(format!(
                        "agent {i} at iteration {k}: report from {t} after holding {}",
                        held[i]
                    )));
                }
                if config.history_depth.is_some_and(|d| k - t > d) {
                    return Err(Error::HistoryUnderflow {
                        agent: i,
                        iteration: k,
                        computed_at: t,
                    });
                }
                held[i] = t;
                while buffers[i].front().is_some_and(|r| r.computed_at < t) {
                    spare.push(buffers[i].pop_front().expect("non-empty").direction);
                }
                staleness_sum += k - t;
            }
            delays.record_row(computed_at.iter().map(|&t| k - t));
        } else {
            delays.record_row(std::iter::repeat_n(0, n));
        }

        let delta_sq = (&theta - &theta_star).norm_squared();
        let (next, gate, median_error, epsilon) = match config.aggregator {
            Aggregator::Dasa => {
                let reports: Vec<&OperatorReport> =
                    buffers.iter().map(|b| b.front().expect("report held")).collect();
                let history = history.as_ref().expect("dasa keeps history");
                let step = dasa_direction(history, &reports, k, alpha, m)?;
                let next = server_step(&theta, step.direction.as_ref(), alpha)?;
                if !step.gate_open && next != theta {
                    return Err(Error::InvariantViolation(format!("θ moved at iteration {k} with the gate closed")));
                }
                (next, step.gate_open, step.selection.median_error, step.epsilon)
            }
            Aggregator::DelayedAverage => {
                let reports: Vec<&OperatorReport> =
                    buffers.iter().map(|b| b.front().expect("report held")).collect();
                let v = delayed_average_direction(&reports)?;
                (server_step(&theta, Some(&v), alpha)?, true, 0.0, 0.0)
            }
            Aggregator::NonDelayed => {
                let v = mean_of(fresh.iter())?;
                (server_step(&theta, Some(&v), alpha)?, true, 0.0, 0.0)
            }
        };

        let last = k + 1 == config.horizon
            || config.update_budget.is_some_and(|b| updates + u64::from(gate) >= b);
        if k % config.trace_stride == 0 || last {
            rows.push(TraceRow {
                k,
                delta_sq,
                gate,
                median_error,
                epsilon,
                mean_staleness: staleness_sum as f64 / n as f64,
            });
        }
        updates += u64::from(gate);
        theta = next;
        if gate && config.checkpoint_every.is_some_and(|c| updates.is_multiple_of(c)) {
            checkpoints.push(Checkpoint {
                updates,
                iterations,
                delta_sq: (&theta - &theta_star).norm_squared(),
            });
        }
        if let Some(history) = history.as_mut() {
            history.push(theta.clone());
            let oldest = computed_at.iter().copied().min().unwrap_or(k);
            history.prune_before(oldest);
        }
    }
    let min_updates_bound = delays.min_updates();
    let summary = RunSummary {
        aggregator: config.aggregator,
        n_agents: n,
        selection_size: m,
        alpha,
        iterations,
        update_count: updates,
        tau_avg: delays.tau_avg(),
        tau_max_observed: delays.max,
        min_updates_bound,
        final_delta_sq: (&theta - &theta_star).norm_squared(),
        checkpoints,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if config.aggregator == Aggregator::Dasa && updates < min_updates_bound {
        return Err(Error::InvariantViolation(format!(
            "{updates} updates in {iterations} iterations, below the bound {min_updates_bound} \
             (τ_avg = {})",
            summary.tau_avg
        )));
    }
    Ok(RunTrace { rows, summary })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub mean_delta_sq: f64,
    pub stderr_delta_sq: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicatedRun {
    pub traces: Vec<RunTrace>,
    /// Pointwise mean and standard error over the rows common to all
    /// replications.
    pub curve: Vec<CurvePoint>,
    pub final_mean: f64,
    pub final_stderr: f64,
    /// Mean and standard error of δ² against the update count, over the
    /// checkpoints common to all replications.
    pub update_curve: Vec<UpdatePoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdatePoint {
    pub updates: u64,
    pub mean_delta_sq: f64,
    pub stderr_delta_sq: f64,
}

/// Runs `config.replications` copies with derived seeds.
pub fn run_replicated<P: SaProblem + ?Sized>(
    problem: &P,
    config: &RunConfig,
    mode: ExecMode,
) -> Result<ReplicatedRun> {
    config.validate()?;
    let traces = exec::try_map_indexed(mode, config.replications, |r| {
        run(problem, &config.replication(r))
    })?;
    Ok(summarise(traces))
}

pub fn summarise(traces: Vec<RunTrace>) -> ReplicatedRun {
    let common = traces
        .iter()
        .map(|t| t.rows.len())
        .min()
        .unwrap_or(0);
    let mut curve = Vec::with_capacity(common);
    for j in 0..common {
        let k = traces[0].rows[j].k;
        if traces.iter().any(|t| t.rows[j].k != k) {
            break;
        }
        let (mean, stderr) = mean_stderr(traces.iter().map(|t| t.rows[j].delta_sq));
        curve.push(CurvePoint {
            k,
            mean_delta_sq: mean,
            stderr_delta_sq: stderr,
        });
    }
    let (final_mean, final_stderr) = mean_stderr(traces.iter().map(|t| t.summary.final_delta_sq));
    let common = traces
        .iter()
        .map(|t| t.summary.checkpoints.len())
        .min()
        .unwrap_or(0);
    let update_curve = (0..common)
        .map(|j| {
            let (mean, stderr) =
                mean_stderr(traces.iter().map(|t| t.summary.checkpoints[j].delta_sq));
            UpdatePoint {
                updates: traces[0].summary.checkpoints[j].updates,
                mean_delta_sq: mean,
                stderr_delta_sq: stderr,
            }
        })
        .collect();
    ReplicatedRun {
        traces,
        curve,
        final_mean,
        final_stderr,
        update_curve,
    }
}

/// Sample mean and standard error of the mean (0 for a single sample).
pub fn mean_stderr(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    // Shifted by the first sample so identical samples give exactly zero spread.
    let first = values.clone().next().expect("non-empty");
    let mean = first + values.clone().map(|v| v - first).sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `mu / (c1 L² tau_mix)`.
pub fn theorem1_step_size(mu: f64, l: f64, tau_mix: f64, c1: f64) -> Result<f64> {
    check_positive(&[("mu", mu), ("L", l), ("tau_mix", tau_mix)])?;
    if !(c1 >= 1.0) {
        return Err(Error::invalid(format!("safety constant must be >= 1, got {c1}")));
    }
    Ok(mu / (c1 * l * l * tau_mix))
}

/// `mu / (c1 L² (tau_mix + tau_max))`, the non-adaptive baseline's step.
pub fn baseline_delayed_step_size(mu: f64, l: f64, tau_mix: f64, tau_max: f64, c1: f64) -> Result<f64> {
    if !(tau_max >= 0.0) {
        return Err(Error::invalid(format!("tau_max must be non-negative, got {tau_max}")));
    }
    theorem1_step_size(mu, l, tau_mix + tau_max, c1)
}

fn check_positive(values: &[(&str, f64)]) -> Result<()> {
    match values.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
        Some((name, v)) => Err(Error::invalid(format!("{name} must be positive, got {v}"))),
        None => Ok(()),
    }
}

/// Step sizes and the constants behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSizeReport {
    pub mu: f64,
    pub l: f64,
    pub sigma: f64,
    pub omega: f64,
    pub c1: f64,
    pub tau_max: usize,
    /// `(alpha, tau_mix(alpha))` for each fixed-point pass, starting from
    /// `alpha_0 = mu / (c1 L²)`.
    pub passes: Vec<(f64, usize)>,
    pub tau_mix: usize,
    pub alpha_dasa: f64,
    pub alpha_delayed: f64,
    pub spectral_k: f64,
}

pub const STEP_SIZE_PASSES: usize = 2;

/// Resolves the `alpha ↔ tau_mix(alpha)` dependence by two fixed-point
/// passes, flooring `tau_mix` at 1.
pub fn calibrate_step_sizes<P: SaProblem + ?Sized>(
    problem: &P,
    c1: f64,
    tau_max: usize,
) -> Result<StepSizeReport> {
    let c = problem.constants();
    let chain = problem.chain();
    let mut alpha = theorem1_step_size(c.mu, c.l, 1.0, c1)?.min(1.0);
    let mut passes = Vec::with_capacity(STEP_SIZE_PASSES);
    let mut tau_mix = 1;
    for _ in 0..STEP_SIZE_PASSES {
        tau_mix = chain.mixing_time_for_alpha(alpha, c.l)?.max(1);
        passes.push((alpha, tau_mix));
        alpha = theorem1_step_size(c.mu, c.l, tau_mix as f64, c1)?;
    }
    Ok(StepSizeReport {
        mu: c.mu,
        l: c.l,
        sigma: c.sigma,
        omega: c.omega,
        c1,
        tau_max,
        passes,
        tau_mix,
        alpha_dasa: alpha,
        alpha_delayed: baseline_delayed_step_size(c.mu, c.l, tau_mix as f64, tau_max as f64, c1)?,
        spectral_k: chain.spectral_mixing_bound(alpha, c.l).k_constant,
    })
}
