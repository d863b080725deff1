//! Configuration-driven experiments.
//!
//! An experiment is one problem instance, a base run configuration and a
//! sweep over aggregators, agent counts, step sizes and delay models. Every
//! point is executed with `run_replicated`; outputs are only written once
//! all points have finished, so a failing experiment leaves nothing behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::delay::{DelayModel, DelaySchedule};
use crate::exec::ExecMode;
use crate::seed;
use crate::sim::{
    calibrate_step_sizes, run_replicated, Aggregator, CurvePoint, ReplicatedRun, RunConfig,
    RunTrace, StepSizeReport, UpdatePoint,
};
use crate::td::{check_assumptions, LinearSaProblem, Problem, ProblemSnapshot, TdProblem};
use crate::{Error, Result};

/// Upper bound on `points × replications`.
pub const MAX_RUNS: usize = 10_000;

/// Samples drawn by the problem gate before any run starts.
pub const GATE_SAMPLES: usize = 1000;

pub const CURVE_HEADER: &str = "k,mean_delta_sq,stderr_delta_sq";
pub const UPDATE_CURVE_HEADER: &str = "updates,mean_delta_sq,stderr_delta_sq";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROBLEM_FILE: &str = "problem.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub output_dir: PathBuf,
    pub problem: ProblemSpec,
    pub run: RunSection,
    pub delay: DelayModel,
    #[serde(default)]
    pub step: StepSpec,
    #[serde(default)]
    pub seeds: SeedSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Td {
        n_states: usize,
        n_features: usize,
        gamma: f64,
        seed: u64,
    },
    Linear {
        dim: usize,
        seed: u64,
    },
    /// A problem previously written with `ProblemSnapshot::to_json`.
    Snapshot {
        path: PathBuf,
    },
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Problem> {
        match self {
            ProblemSpec::Td {
                n_states,
                n_features,
                gamma,
                seed,
            } => Ok(Problem::Td(TdProblem::build(*n_states, *n_features, *gamma, *seed)?)),
            ProblemSpec::Linear { dim, seed } => Ok(Problem::Linear(LinearSaProblem::build(*dim, *seed)?)),
            ProblemSpec::Snapshot { path } => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                ProblemSnapshot::from_json(&text)?.restore()
            }
        }
    }

    fn gate_seed(&self) -> u64 {
        match self {
            ProblemSpec::Td { seed, .. } | ProblemSpec::Linear { seed, .. } => seed::derive(*seed, 5),
            ProblemSpec::Snapshot { .. } => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Used when `sweep.n_agents` is empty.
    #[serde(default)]
    pub n_agents: Option<usize>,
    pub horizon: usize,
    #[serde(default)]
    pub update_budget: Option<u64>,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default = "one")]
    pub trace_stride: usize,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub history_depth: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Delay-adaptive step for dasa and non_delayed, the `tau_max`-penalised
    /// step for delayed_average.
    #[default]
    Auto,
    /// The delay-adaptive step for every aggregator.
    Theorem1,
    /// `step.alpha` or `sweep.alpha` verbatim.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    #[serde(default)]
    pub rule: StepRule,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Defaults to the delay model's maximum.
    #[serde(default)]
    pub tau_max: Option<usize>,
}

fn default_c1() -> f64 {
    1.0
}

impl Default for StepSpec {
    fn default() -> Self {
        StepSpec {
            rule: StepRule::Auto,
            c1: default_c1(),
            alpha: None,
            tau_max: None,
        }
    }
}

/// Either a master seed or explicit chain/delay seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    #[serde(default)]
    pub master: Option<u64>,
    #[serde(default)]
    pub chain: Option<u64>,
    #[serde(default)]
    pub delay: Option<u64>,
}

impl SeedSpec {
    pub fn chain_seed(&self) -> u64 {
        self.chain
            .unwrap_or_else(|| seed::derive(self.master.unwrap_or(0), 1))
    }

    pub fn delay_seed(&self) -> u64 {
        self.delay
            .unwrap_or_else(|| seed::derive(self.master.unwrap_or(0), 2))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub aggregator: Vec<Aggregator>,
    #[serde(default)]
    pub n_agents: Vec<usize>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub delay: Vec<DelayModel>,
}

/// One cell of the sweep before step sizes are resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub id: String,
    pub aggregator: Aggregator,
    pub n_agents: usize,
    pub alpha: Option<f64>,
    pub delay: DelayModel,
}

impl ExperimentSpec {
    /// Parses TOML; relative paths inside the file resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(toml_error)?;
        let mut spec: ExperimentSpec =
            serde_path_to_error::deserialize(de).map_err(|e| {
                let key = e.path().to_string();
                Error::config(key, e.into_inner().message().to_string())
            })?;
        spec.resolve_paths(base_dir);
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ProblemSpec::Snapshot { path } = &mut self.problem {
            fix(path);
        }
        for model in std::iter::once(&mut self.delay).chain(self.sweep.delay.iter_mut()) {
            if let DelayModel::File { path } = model {
                fix(path);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file-name-safe string"));
        }
        match &self.problem {
            ProblemSpec::Td {
                n_states,
                n_features,
                gamma,
                ..
            } => {
                if *n_features == 0 || n_features > n_states {
                    return Err(Error::config("problem.n_features", "must lie in 1..=n_states"));
                }
                if !(*gamma > 0.0 && *gamma < 1.0) {
                    return Err(Error::config("problem.gamma", "must lie in (0, 1)"));
                }
            }
            ProblemSpec::Linear { dim, .. } if *dim == 0 => {
                return Err(Error::config("problem.dim", "must be at least 1"));
            }
            ProblemSpec::Snapshot { path } if !path.is_file() => {
                return Err(Error::config("problem.path", format!("{} not found", path.display())));
            }
            _ => {}
        }
        if !(self.step.c1 > 0.0) || !self.step.c1.is_finite() {
            return Err(Error::config("step.c1", "must be positive"));
        }
        match (self.step.rule, self.step.alpha, self.sweep.alpha.is_empty()) {
            (StepRule::Fixed, None, true) => {
                return Err(Error::config("step.alpha", "required when step.rule = \"fixed\""));
            }
            (StepRule::Fixed, _, _) => {}
            (_, Some(_), _) => {
                return Err(Error::config("step.alpha", "only allowed with step.rule = \"fixed\""));
            }
            (_, None, false) => {
                return Err(Error::config("sweep.alpha", "only allowed with step.rule = \"fixed\""));
            }
            _ => {}
        }
        if self.run.n_agents.is_none() && self.sweep.n_agents.is_empty() {
            return Err(Error::config("run.n_agents", "set run.n_agents or sweep.n_agents"));
        }
        check_delay(&self.delay, "delay")?;
        for (i, d) in self.sweep.delay.iter().enumerate() {
            check_delay(d, &format!("sweep.delay[{i}]"))?;
        }
        let points = self.points();
        if points.len() * self.run.replications > MAX_RUNS {
            return Err(Error::config(
                "sweep",
                format!(
                    "{} points × {} replications exceeds {MAX_RUNS} runs",
                    points.len(),
                    self.run.replications
                ),
            ));
        }
        for p in &points {
            let config = self.run_config(p, p.alpha.or(self.step.alpha).unwrap_or(1.0));
            config.validate().map_err(|e| match e {
                Error::Config { key, message } => Error::config(
                    key.replace("run.alpha", "step.alpha"),
                    format!("{message} (point {})", p.id),
                ),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Cross product of the sweep axes, in a fixed order.
    pub fn points(&self) -> Vec<SweepPoint> {
        let aggregators = non_empty(&self.sweep.aggregator, Aggregator::Dasa);
        let agents = non_empty(&self.sweep.n_agents, self.run.n_agents.unwrap_or(1));
        let alphas: Vec<Option<f64>> = if self.sweep.alpha.is_empty() {
            vec![None]
        } else {
            self.sweep.alpha.iter().copied().map(Some).collect()
        };
        let delays = non_empty(&self.sweep.delay, self.delay.clone());
        let mut out = Vec::new();
        for (di, delay) in delays.iter().enumerate() {
            for (ai, alpha) in alphas.iter().enumerate() {
                for &n in &agents {
                    for &aggregator in &aggregators {
                        let mut id = format!("{aggregator}_n{n}");
                        if alphas.len() > 1 {
                            let _ = write!(id, "_a{ai}");
                        }
                        if delays.len() > 1 {
                            let _ = write!(id, "_d{di}");
                        }
                        out.push(SweepPoint {
                            id,
                            aggregator,
                            n_agents: n,
                            alpha: *alpha,
                            delay: delay.clone(),
                        });
                    }
                }
            }
        }
        out
    }

    fn run_config(&self, point: &SweepPoint, alpha: f64) -> RunConfig {
        let mut c = RunConfig::new(point.n_agents, self.run.horizon, alpha, point.aggregator);
        c.delay = point.delay.clone();
        c.chain_seed = self.seeds.chain_seed();
        c.delay_seed = self.seeds.delay_seed();
        c.history_depth = self.run.history_depth;
        c.update_budget = self.run.update_budget;
        c.trace_stride = self.run.trace_stride;
        c.checkpoint_every = self.run.checkpoint_every;
        c.replications = self.run.replications;
        c
    }

    fn tau_max_for(&self, delay: &DelayModel) -> Result<usize> {
        if let Some(t) = self.step.tau_max {
            return Ok(t);
        }
        match delay.max_delay() {
            Some(t) => Ok(t),
            None => match delay {
                DelayModel::File { path } => {
                    let s = DelaySchedule::load(path)?;
                    Ok((0..s.horizon())
                        .flat_map(|k| s.row(k).iter().copied())
                        .max()
                        .unwrap_or(0))
                }
                _ => unreachable!("only file schedules lack an a-priori maximum"),
            },
        }
    }
}

fn check_delay(model: &DelayModel, key: &str) -> Result<()> {
    model.validate().map_err(|e| match e {
        Error::Config { key: k, message } => Error::config(k.replacen("delay", key, 1), message),
        other => other,
    })?;
    if let DelayModel::File { path } = model {
        if !path.is_file() {
            return Err(Error::config(format!("{key}.path"), format!("{} not found", path.display())));
        }
    }
    Ok(())
}

fn non_empty<T: Clone>(values: &[T], fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    Error::config("<toml>", e.message().to_string())
}

/// Result of one sweep point.
#[derive(Clone, Debug)]
pub struct PointResult {
    pub point: SweepPoint,
    pub config: RunConfig,
    pub step: StepSizeReport,
    pub run: ReplicatedRun,
}

impl PointResult {
    /// Replication 0's trace.
    pub fn trace(&self) -> &RunTrace {
        &self.run.traces[0]
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub problem: ProblemSnapshot,
    pub points: Vec<PointResult>,
}

/// Builds the problem, runs its gate and executes every sweep point.
pub fn run_experiment(spec: &ExperimentSpec, mode: ExecMode) -> Result<ExperimentResult> {
    spec.validate()?;
    let problem = spec.problem.build()?;
    let gate = check_assumptions(&problem, GATE_SAMPLES, spec.problem.gate_seed());
    if !gate.passed() {
        return Err(Error::ProblemConstruction(format!("assumption gate failed: {gate:?}")));
    }
    let mut points = Vec::new();
    for point in spec.points() {
        let tau_max = spec.tau_max_for(&point.delay)?;
        let step = calibrate_step_sizes(&problem, spec.step.c1, tau_max)?;
        let alpha = match (point.alpha, spec.step.rule) {
            (Some(a), _) => a,
            (None, StepRule::Fixed) => spec.step.alpha.expect("validated"),
            (None, StepRule::Theorem1) => step.alpha_dasa,
            (None, StepRule::Auto) => match point.aggregator {
                Aggregator::DelayedAverage => step.alpha_delayed,
                Aggregator::Dasa | Aggregator::NonDelayed => step.alpha_dasa,
            },
        };
        let config = spec.run_config(&point, alpha);
        let run = run_replicated(&problem, &config, mode)?;
        points.push(PointResult {
            point,
            config,
            step,
            run,
        });
    }
    Ok(ExperimentResult {
        spec: spec.clone(),
        problem: problem.snapshot(),
        points,
    })
}

/// Metadata sidecar for one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMeta {
    pub experiment: String,
    pub point: String,
    pub aggregator: Aggregator,
    pub n_agents: usize,
    pub selection_size: usize,
    pub alpha: f64,
    pub step_rule: StepRule,
    pub delay: DelayModel,
    pub delay_label: String,
    pub seeds: MetaSeeds,
    pub constants: MetaConstants,
    pub horizon: usize,
    pub update_budget: Option<u64>,
    pub replications: Vec<ReplicationMeta>,
    pub final_mean: f64,
    pub final_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaSeeds {
    pub problem: Option<u64>,
    pub chain: u64,
    pub delay: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConstants {
    pub mu: f64,
    pub l: f64,
    pub sigma: f64,
    pub omega: f64,
    pub tau_mix: usize,
    pub tau_max: usize,
    pub c1: f64,
    pub alpha_dasa: f64,
    pub alpha_delayed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMeta {
    pub chain_seed: u64,
    pub delay_seed: u64,
    pub iterations: usize,
    pub update_count: u64,
    pub min_updates_bound: u64,
    pub tau_avg: f64,
    pub tau_max_observed: usize,
    pub final_delta_sq: f64,
}

/// Entry of `manifest.json`; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub aggregator: Aggregator,
    pub n_agents: usize,
    pub alpha: f64,
    pub delay: String,
    pub trace: String,
    pub curve: String,
    pub update_curve: String,
    pub meta: String,
    pub final_mean: f64,
    pub final_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub problem: String,
    pub points: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            row: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

impl ExperimentResult {
    pub fn point(&self, id: &str) -> Option<&PointResult> {
        self.points.iter().find(|p| p.point.id == id)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            name: self.spec.name.clone(),
            problem: PROBLEM_FILE.to_string(),
            points: self
                .points
                .iter()
                .map(|p| {
                    let id = &p.point.id;
                    ManifestEntry {
                        id: id.clone(),
                        aggregator: p.point.aggregator,
                        n_agents: p.point.n_agents,
                        alpha: p.config.alpha,
                        delay: p.point.delay.label(),
                        trace: format!("{id}.csv"),
                        curve: format!("{id}.curve.csv"),
                        update_curve: format!("{id}.updates.csv"),
                        meta: format!("{id}.meta.json"),
                        final_mean: p.run.final_mean,
                        final_stderr: p.run.final_stderr,
                    }
                })
                .collect(),
        }
    }

    fn meta(&self, p: &PointResult) -> PointMeta {
        PointMeta {
            experiment: self.spec.name.clone(),
            point: p.point.id.clone(),
            aggregator: p.point.aggregator,
            n_agents: p.point.n_agents,
            selection_size: p.config.selection_size(),
            alpha: p.config.alpha,
            step_rule: if p.point.alpha.is_some() {
                StepRule::Fixed
            } else {
                self.spec.step.rule
            },
            delay: p.point.delay.clone(),
            delay_label: p.point.delay.label(),
            seeds: MetaSeeds {
                problem: match &self.spec.problem {
                    ProblemSpec::Td { seed, .. } | ProblemSpec::Linear { seed, .. } => Some(*seed),
                    ProblemSpec::Snapshot { .. } => None,
                },
                chain: p.config.chain_seed,
                delay: p.config.delay_seed,
            },
            constants: MetaConstants {
                mu: p.step.mu,
                l: p.step.l,
                sigma: p.step.sigma,
                omega: p.step.omega,
                tau_mix: p.step.tau_mix,
                tau_max: p.step.tau_max,
                c1: p.step.c1,
                alpha_dasa: p.step.alpha_dasa,
                alpha_delayed: p.step.alpha_delayed,
            },
            horizon: p.config.horizon,
            update_budget: p.config.update_budget,
            replications: p
                .run
                .traces
                .iter()
                .enumerate()
                .map(|(r, t)| {
                    let c = p.config.replication(r);
                    ReplicationMeta {
                        chain_seed: c.chain_seed,
                        delay_seed: c.delay_seed,
                        iterations: t.summary.iterations,
                        update_count: t.summary.update_count,
                        min_updates_bound: t.summary.min_updates_bound,
                        tau_avg: t.summary.tau_avg,
                        tau_max_observed: t.summary.tau_max_observed,
                        final_delta_sq: t.summary.final_delta_sq,
                    }
                })
                .collect(),
            final_mean: p.run.final_mean,
            final_stderr: p.run.final_stderr,
        }
    }

    /// Every output file as `(name, contents)`. Contents depend only on the
    /// configuration and seeds, never on timing or thread count.
    pub fn files(&self) -> Vec<(String, String)> {
        let mut files = vec![(PROBLEM_FILE.to_string(), self.problem.to_json())];
        for p in &self.points {
            let id = &p.point.id;
            files.push((format!("{id}.csv"), p.trace().to_csv_string()));
            files.push((format!("{id}.curve.csv"), curve_to_csv(&p.run.curve)));
            files.push((format!("{id}.updates.csv"), update_curve_to_csv(&p.run.update_curve)));
            files.push((format!("{id}.meta.json"), to_json(&self.meta(p))));
        }
        files.push((MANIFEST_FILE.to_string(), to_json(&self.manifest())));
        files
    }

    /// Writes all files into `dir`, each through a temporary name and a
    /// rename.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = self.files();
        let mut staged = Vec::with_capacity(files.len());
        for (name, contents) in &files {
            let tmp = dir.join(format!(".{name}.tmp"));
            if let Err(e) = fs::write(&tmp, contents) {
                for (t, _) in &staged {
                    let _ = fs::remove_file(t);
                }
                return Err(Error::io(tmp, e));
            }
            staged.push((tmp, dir.join(name)));
        }
        let mut written = Vec::with_capacity(staged.len());
        for (tmp, dest) in staged {
            fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
            written.push(dest);
        }
        Ok(written)
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("metadata serialises");
    s.push('\n');
    s
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in curve {
        let _ = writeln!(out, "{},{:e},{:e}", p.k, p.mean_delta_sq, p.stderr_delta_sq);
    }
    out
}

pub fn update_curve_to_csv(curve: &[UpdatePoint]) -> String {
    let mut out = String::from(UPDATE_CURVE_HEADER);
    out.push('\n');
    for p in curve {
        let _ = writeln!(out, "{},{:e},{:e}", p.updates, p.mean_delta_sq, p.stderr_delta_sq);
    }
    out
}
