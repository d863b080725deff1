//! Self-checking suites: the update-count bound, the problem gate, mixing
//! times against closed forms, and operator oracles.
//!
//! Each suite is a list of cases. A case carries everything needed to rerun
//! it, so failing cases can be dumped as JSON and replayed with
//! [`replay`].

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::delay::{DelayModel, DelaySchedule};
use crate::exec::{self, ExecMode};
use crate::markov::FiniteMarkovChain;
use crate::seed;
use crate::sim::{run, Aggregator, RunConfig};
use crate::td::{
    check_assumptions, enumerate_expected_operator, LinearSaProblem, SaProblem, TdProblem,
};
use crate::{Error, Matrix, Result, Vector};

pub const LEMMA1_CASES: usize = 200;
pub const LEMMA1_MAX_HORIZON: usize = 10_000;
pub const LEMMA1_MAX_AGENTS: usize = 32;
pub const ASSUMPTION_INSTANCES: usize = 20;
pub const ASSUMPTION_SAMPLES: usize = 1000;
pub const MIXING_CASES: usize = 10;
pub const ORACLE_TOL: f64 = 1e-10;
pub const GEOMETRIC_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lemma1,
    Assumptions,
    Mixing,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Lemma1, Suite::Assumptions, Suite::Mixing, Suite::Oracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::Assumptions => "assumptions",
            Suite::Mixing => "mixing",
            Suite::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown suite `{s}`")))
    }
}

/// Hand-built staleness patterns that try to keep the gate shut.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversary {
    /// All agents hold one report until a common, rare refresh.
    Burst,
    /// `N - M + 1` agents never refresh; the rest are always fresh.
    StaleMajority,
    /// Nobody ever refreshes.
    Frozen,
    /// Each agent jumps forward at random sparse instants.
    RandomJumps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelaySource {
    Model(DelayModel),
    /// Written to a schedule file and read back through the file model.
    Adversarial { pattern: Adversary },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Case {
    pub index: usize,
    pub n_agents: usize,
    pub horizon: usize,
    pub alpha: f64,
    pub chain_seed: u64,
    pub delay_seed: u64,
    pub source: DelaySource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCase {
    pub index: usize,
    pub n_states: usize,
    pub n_features: usize,
    pub gamma: f64,
    pub seed: u64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingCase {
    pub index: usize,
    pub a: f64,
    pub b: f64,
    pub precision: f64,
}

impl MixingCase {
    /// `max_s TV(P^t(s,·), π) = |1-a-b|^t · max(a,b)/(a+b)`; smallest `t`
    /// bringing it under the precision.
    pub fn analytic(&self) -> usize {
        let lambda = (1.0 - self.a - self.b).abs();
        let c = self.a.max(self.b) / (self.a + self.b);
        (0..)
            .find(|&t| lambda.powi(t as i32) * c <= self.precision)
            .expect("|λ| < 1")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleCase {
    Td {
        index: usize,
        n_states: usize,
        n_features: usize,
        gamma: f64,
        seed: u64,
    },
    Linear {
        index: usize,
        dim: usize,
        seed: u64,
    },
    Geometric {
        a: f64,
        b: f64,
        alpha: f64,
        steps: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "suite", rename_all = "snake_case")]
pub enum Case {
    Lemma1(Lemma1Case),
    Assumptions(AssumptionCase),
    Mixing(MixingCase),
    Oracle(OracleCase),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case: Case,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub outcomes: Vec<CaseOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }

    /// The failing cases alone, as a JSON array accepted by [`replay_json`].
    pub fn failures_json(&self) -> String {
        let cases: Vec<&Case> = self.failures().map(|o| &o.case).collect();
        serde_json::to_string_pretty(&cases).expect("cases serialise")
    }
}

pub fn cases(suite: Suite, seed: u64) -> Vec<Case> {
    match suite {
        Suite::Lemma1 => lemma1_cases(seed).into_iter().map(Case::Lemma1).collect(),
        Suite::Assumptions => (0..ASSUMPTION_INSTANCES)
            .map(|i| {
                Case::Assumptions(AssumptionCase {
                    index: i,
                    n_states: 30,
                    n_features: 10,
                    gamma: 0.5,
                    seed: seed::derive(seed, i as u64),
                    samples: ASSUMPTION_SAMPLES,
                })
            })
            .collect(),
        Suite::Mixing => mixing_cases(seed).into_iter().map(Case::Mixing).collect(),
        Suite::Oracle => oracle_cases(seed).into_iter().map(Case::Oracle).collect(),
    }
}

/// Runs every case of `suite`. Errors are reserved for setup failures;
/// a case that errors counts as failed.
pub fn run_suite(suite: Suite, seed: u64, mode: ExecMode) -> Result<SuiteReport> {
    let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let cases = cases(suite, seed);
    let outcomes = exec::map_indexed(mode, cases.len(), |i| evaluate(&cases[i], scratch.path()));
    Ok(SuiteReport {
        suite,
        seed,
        outcomes,
    })
}

/// Reruns cases previously dumped with [`SuiteReport::failures_json`].
pub fn replay_json(text: &str) -> Result<Vec<CaseOutcome>> {
    let cases: Vec<Case> = serde_json::from_str(text).map_err(|e| Error::Parse {
        row: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    replay(&cases)
}

pub fn replay(cases: &[Case]) -> Result<Vec<CaseOutcome>> {
    let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    Ok(cases.iter().map(|c| evaluate(c, scratch.path())).collect())
}

pub fn evaluate(case: &Case, scratch: &Path) -> CaseOutcome {
    let result = match case {
        Case::Lemma1(c) => lemma1(c, scratch),
        Case::Assumptions(c) => assumptions(c),
        Case::Mixing(c) => mixing(c),
        Case::Oracle(c) => oracle(c),
    };
    let (passed, detail) = match result {
        Ok(v) => v,
        Err(e) => (false, e.to_string()),
    };
    CaseOutcome {
        case: case.clone(),
        passed,
        detail,
    }
}

fn lemma1_cases(seed: u64) -> Vec<Lemma1Case> {
    (0..LEMMA1_CASES)
        .map(|i| {
            let mut rng = seed::rng(seed::derive(seed, i as u64));
            let horizon = log_uniform(&mut rng, LEMMA1_MAX_HORIZON);
            let n_agents = rng.random_range(1..=LEMMA1_MAX_AGENTS);
            let tau = rng.random_range(0..=horizon);
            let source = match i % 8 {
                0 => DelaySource::Model(DelayModel::Constant { delay: tau }),
                1 | 2 => DelaySource::Model(DelayModel::Uniform { tau_max: tau }),
                3 | 4 => DelaySource::Model(DelayModel::Straggler {
                    probability: rng.random_range(0.0..=1.0),
                    tau_max: tau,
                }),
                5 => DelaySource::Adversarial {
                    pattern: Adversary::Burst,
                },
                6 => DelaySource::Adversarial {
                    pattern: if i % 16 == 6 {
                        Adversary::StaleMajority
                    } else {
                        Adversary::Frozen
                    },
                },
                _ => DelaySource::Adversarial {
                    pattern: Adversary::RandomJumps,
                },
            };
            Lemma1Case {
                index: i,
                n_agents,
                horizon,
                alpha: 10f64.powf(rng.random_range(-3.0..0.0)),
                chain_seed: rng.random(),
                delay_seed: rng.random(),
                source,
            }
        })
        .collect()
}

fn log_uniform<R: Rng>(rng: &mut R, max: usize) -> usize {
    let x = rng.random_range(0.0..(max as f64).ln());
    (x.exp().round() as usize).clamp(1, max)
}

/// Builds the computed-at matrix for an adversarial pattern.
pub fn adversarial_schedule(
    pattern: Adversary,
    n_agents: usize,
    horizon: usize,
    seed: u64,
) -> Result<DelaySchedule> {
    let mut rng = seed::rng(seed);
    let m = n_agents.div_ceil(2);
    let mut rows = vec![vec![0usize; n_agents]; horizon];
    match pattern {
        Adversary::Burst => {
            let gap = rng.random_range(1..=horizon.max(1));
            for (k, row) in rows.iter_mut().enumerate() {
                row.fill(k - k % gap);
            }
        }
        Adversary::StaleMajority => {
            for (k, row) in rows.iter_mut().enumerate() {
                for (i, t) in row.iter_mut().enumerate() {
                    *t = if i < m - 1 { k } else { 0 };
                }
            }
        }
        Adversary::Frozen => {}
        Adversary::RandomJumps => {
            let rate: f64 = rng.random_range(0.001..0.5);
            let mut current = vec![0usize; n_agents];
            for (k, row) in rows.iter_mut().enumerate() {
                for (i, t) in row.iter_mut().enumerate() {
                    if rng.random_bool(rate) {
                        current[i] = rng.random_range(current[i]..=k);
                    }
                    *t = current[i];
                }
            }
        }
    }
    DelaySchedule::from_computed_at(&rows)
}

fn lemma1(case: &Lemma1Case, scratch: &Path) -> Result<(bool, String)> {
    let problem = TdProblem::build(6, 3, 0.5, seed::derive(case.chain_seed, 9))?;
    let delay = match &case.source {
        DelaySource::Model(m) => m.clone(),
        DelaySource::Adversarial { pattern } => {
            let schedule =
                adversarial_schedule(*pattern, case.n_agents, case.horizon, case.delay_seed)?;
            let path = scratch.join(format!("lemma1-{}.csv", case.index));
            schedule.save(&path)?;
            DelayModel::File { path }
        }
    };
    let mut config = RunConfig::new(case.n_agents, case.horizon, case.alpha, Aggregator::Dasa);
    config.delay = delay;
    config.chain_seed = case.chain_seed;
    config.delay_seed = case.delay_seed;
    config.trace_stride = case.horizon;
    match run(&problem, &config) {
        Ok(trace) => {
            let s = &trace.summary;
            Ok((
                s.update_count >= s.min_updates_bound,
                format!(
                    "updates {} ≥ bound {} (T = {}, τ_avg = {:.3})",
                    s.update_count, s.min_updates_bound, s.iterations, s.tau_avg
                ),
            ))
        }
        Err(e @ Error::InvariantViolation(_)) => Ok((false, e.to_string())),
        Err(e) => Err(e),
    }
}

fn assumptions(case: &AssumptionCase) -> Result<(bool, String)> {
    let problem = TdProblem::build(case.n_states, case.n_features, case.gamma, case.seed)?;
    let report = check_assumptions(&problem, case.samples, seed::derive(case.seed, 77));
    Ok((report.passed(), format!("{report:?}")))
}

fn mixing_cases(seed: u64) -> Vec<MixingCase> {
    let mut rng = seed::rng(seed::derive(seed, 0x6d69));
    let mut out = Vec::with_capacity(MIXING_CASES);
    while out.len() < MIXING_CASES {
        let a: f64 = rng.random_range(0.05..0.95);
        let b: f64 = rng.random_range(0.05..0.95);
        let precision = 10f64.powf(rng.random_range(-6.0..-2.0));
        let lambda = (1.0 - a - b).abs();
        if lambda < 0.05 {
            continue;
        }
        let case = MixingCase {
            index: out.len(),
            a,
            b,
            precision,
        };
        // Keep away from ties where rounding could move the crossing.
        let t = case.analytic() as i32;
        let c = a.max(b) / (a + b);
        let near = |t: i32| ((lambda.powi(t) * c - precision) / precision).abs() < 1e-6;
        if t == 0 || near(t) || near(t - 1) {
            continue;
        }
        out.push(case);
    }
    out
}

fn mixing(case: &MixingCase) -> Result<(bool, String)> {
    let p = Matrix::from_row_slice(2, 2, &[1.0 - case.a, case.a, case.b, 1.0 - case.b]);
    let chain = FiniteMarkovChain::new(p)?;
    let got = chain.tv_mixing_time(case.precision)?;
    let want = case.analytic();
    Ok((got == want, format!("computed {got}, closed form {want}")))
}

fn oracle_cases(seed: u64) -> Vec<OracleCase> {
    let mut out = Vec::new();
    for i in 0..10 {
        let n_states = 2 + i % 9;
        out.push(OracleCase::Td {
            index: i,
            n_states,
            n_features: 1 + i % n_states,
            gamma: [0.2, 0.5, 0.9][i % 3],
            seed: seed::derive(seed, i as u64),
        });
    }
    for i in 0..5 {
        out.push(OracleCase::Linear {
            index: i,
            dim: 1 + i,
            seed: seed::derive(seed, 100 + i as u64),
        });
    }
    out.push(OracleCase::Geometric {
        a: 0.8,
        b: 1.6,
        alpha: 0.1,
        steps: 100,
    });
    out
}

fn enumeration_gap<P: SaProblem>(problem: &P, seed: u64) -> f64 {
    let mut rng = seed::rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let theta = Vector::from_fn(problem.dim(), |_, _| rng.random_range(-5.0..5.0));
        let closed = problem.expected_operator(&theta);
        let brute = enumerate_expected_operator(problem, &theta);
        worst = worst.max((closed - brute).amax());
    }
    worst
}

fn oracle(case: &OracleCase) -> Result<(bool, String)> {
    match *case {
        OracleCase::Td {
            n_states,
            n_features,
            gamma,
            seed,
            ..
        } => {
            let p = TdProblem::build(n_states, n_features, gamma, seed)?;
            let gap = enumeration_gap(&p, seed);
            Ok((gap <= ORACLE_TOL, format!("max |closed - enumerated| = {gap:e}")))
        }
        OracleCase::Linear { dim, seed, .. } => {
            let p = LinearSaProblem::build(dim, seed)?;
            let gap = enumeration_gap(&p, seed);
            Ok((gap <= ORACLE_TOL, format!("max |closed - enumerated| = {gap:e}")))
        }
        OracleCase::Geometric { a, b, alpha, steps } => {
            let p = LinearSaProblem::scalar(a, &[b, b])?;
            let mut config = RunConfig::new(1, steps, alpha, Aggregator::NonDelayed);
            config.delay = DelayModel::Uniform { tau_max: 9 };
            let trace = run(&p, &config)?;
            let d0 = trace.rows[0].delta_sq;
            let worst = trace
                .rows
                .iter()
                .map(|r| {
                    let want = (1.0 - alpha * a).powi(2 * r.k as i32) * d0;
                    ((r.delta_sq - want) / want).abs()
                })
                .fold(0.0, f64::max);
            Ok((
                worst <= GEOMETRIC_TOL,
                format!("max relative error {worst:e} over {steps} steps"),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn lemma1_cases_cover_every_source() {
        let cases = lemma1_cases(1);
        assert_eq!(cases.len(), LEMMA1_CASES);
        let count = |f: &dyn Fn(&DelaySource) -> bool| cases.iter().filter(|c| f(&c.source)).count();
        assert!(count(&|s| matches!(s, DelaySource::Model(DelayModel::Constant { .. }))) > 0);
        assert!(count(&|s| matches!(s, DelaySource::Model(DelayModel::Uniform { .. }))) > 0);
        assert!(count(&|s| matches!(s, DelaySource::Model(DelayModel::Straggler { .. }))) > 0);
        for p in [Adversary::Burst, Adversary::StaleMajority, Adversary::Frozen, Adversary::RandomJumps] {
            assert!(count(&|s| *s == DelaySource::Adversarial { pattern: p }) > 0, "{p:?}");
        }
        assert!(cases.iter().all(|c| c.horizon <= LEMMA1_MAX_HORIZON && c.n_agents <= LEMMA1_MAX_AGENTS));
        assert!(cases.iter().any(|c| c.horizon > 1000));
    }

    #[test]
    fn adversarial_schedules_are_valid_and_stale() {
        for p in [Adversary::Burst, Adversary::StaleMajority, Adversary::Frozen, Adversary::RandomJumps] {
            let s = adversarial_schedule(p, 5, 300, 4).unwrap();
            assert_eq!((s.n_agents(), s.horizon()), (5, 300));
        }
        let frozen = adversarial_schedule(Adversary::Frozen, 3, 10, 0).unwrap();
        assert_eq!(frozen.staleness(9, 2), 9);
        let stale = adversarial_schedule(Adversary::StaleMajority, 5, 10, 0).unwrap();
        assert_eq!(stale.row(9), &[0, 0, 9, 9, 9]);
    }

    #[test]
    fn mixing_cases_agree_with_the_closed_form() {
        let report = run_suite(Suite::Mixing, 3, ExecMode::Sequential).unwrap();
        assert_eq!(report.outcomes.len(), MIXING_CASES);
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn oracle_suite_passes() {
        let report = run_suite(Suite::Oracle, 3, ExecMode::Sequential).unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn failing_cases_replay_from_json() {
        let bad = Case::Mixing(MixingCase {
            index: 0,
            a: 0.3,
            b: 0.2,
            precision: 1e-3,
        });
        let mut outcome = evaluate(&bad, Path::new("."));
        assert!(outcome.passed);
        outcome.passed = false;
        let report = SuiteReport {
            suite: Suite::Mixing,
            seed: 0,
            outcomes: vec![outcome],
        };
        let replayed = replay_json(&report.failures_json()).unwrap();
        assert_eq!(replayed.len(), 1);
        assert_eq!(replayed[0].case, bad);
    }

    #[test]
    fn lemma1_bound_holds_on_adversarial_files() {
        for (i, pattern) in [Adversary::Burst, Adversary::StaleMajority, Adversary::Frozen, Adversary::RandomJumps]
            .into_iter()
            .enumerate()
        {
            let case = Case::Lemma1(Lemma1Case {
                index: i,
                n_agents: 7,
                horizon: 2000,
                alpha: 0.05,
                chain_seed: 1,
                delay_seed: 2,
                source: DelaySource::Adversarial { pattern },
            });
            let dir = tempfile::tempdir().unwrap();
            let o = evaluate(&case, dir.path());
            assert!(o.passed, "{pattern:?}: {}", o.detail);
        }
    }
}
