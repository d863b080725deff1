//! Up-link delays: staleness schedules, the arrival process that induces
//! them, and average-delay statistics.
//!
//! A schedule stores `τ_{i,k}` for iterations `k = 0..horizon`. Every schedule
//! satisfies `τ_{i,k} <= k` and keeps `t_{i,k} = k − τ_{i,k}` non-decreasing
//! in `k`, so the server never falls back to an older report.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

/// Staleness matrix `τ_{i,k}`, row-major by iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DelaySchedule {
    n_agents: usize,
    horizon: usize,
    tau: Vec<usize>,
}

impl DelaySchedule {
    pub fn new(n_agents: usize, horizon: usize, tau: Vec<usize>) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::invalid("schedule needs at least one agent"));
        }
        if tau.len() != n_agents * horizon {
            return Err(Error::invalid(format!(
                "schedule has {} entries, expected {n_agents} x {horizon}",
                tau.len()
            )));
        }
        let schedule = Self {
            n_agents,
            horizon,
            tau,
        };
        if let Some((k, i, msg)) = schedule.first_violation() {
            return Err(Error::InvariantViolation(format!(
                "schedule entry (k={k}, agent={i}): {msg}"
            )));
        }
        Ok(schedule)
    }

    /// Builds a schedule from rows `rows[k][i] = τ_{i,k}`.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let n_agents = rows.first().map_or(0, Vec::len);
        if let Some(k) = rows.iter().position(|r| r.len() != n_agents) {
            return Err(Error::invalid(format!("row {k} has the wrong number of agents")));
        }
        Self::new(n_agents, rows.len(), rows.concat())
    }

    /// Builds a schedule from compute-time indices `t_{i,k}`.
    pub fn from_computed_at(rows: &[Vec<usize>]) -> Result<Self> {
        let tau: Vec<Vec<usize>> = rows
            .iter()
            .enumerate()
            .map(|(k, row)| {
                row.iter()
                    .map(|&t| {
                        k.checked_sub(t).ok_or_else(|| {
                            Error::InvariantViolation(format!(
                                "report computed at {t} used at iteration {k}"
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Self::from_rows(&tau)
    }

    fn first_violation(&self) -> Option<(usize, usize, &'static str)> {
        for k in 0..self.horizon {
            for i in 0..self.n_agents {
                let tau = self.staleness(k, i);
                if tau > k {
                    return Some((k, i, "staleness exceeds the iteration index"));
                }
                if k > 0 && self.computed_at(k, i) < self.computed_at(k - 1, i) {
                    return Some((k, i, "report is older than the one held at k-1"));
                }
            }
        }
        None
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn staleness(&self, k: usize, agent: usize) -> usize {
        self.tau[k * self.n_agents + agent]
    }

    pub fn computed_at(&self, k: usize, agent: usize) -> usize {
        k - self.staleness(k, agent)
    }

    pub fn row(&self, k: usize) -> &[usize] {
        &self.tau[k * self.n_agents..(k + 1) * self.n_agents]
    }

    /// First `horizon` rows of this schedule.
    pub fn truncated(&self, horizon: usize) -> Result<Self> {
        if horizon > self.horizon {
            return Err(Error::invalid(format!(
                "schedule covers {} iterations, {horizon} requested",
                self.horizon
            )));
        }
        Ok(Self {
            n_agents: self.n_agents,
            horizon,
            tau: self.tau[..horizon * self.n_agents].to_vec(),
        })
    }

    pub fn cursor(&self) -> ScheduleCursor<'_> {
        ScheduleCursor { schedule: self }
    }

    /// CSV text: header `k,agent0,...,agentN-1`, then one row per iteration.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("k");
        for i in 0..self.n_agents {
            let _ = write!(out, ",agent{i}");
        }
        out.push('\n');
        for k in 0..self.horizon {
            let _ = write!(out, "{k}");
            for tau in self.row(k) {
                let _ = write!(out, ",{tau}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.to_csv_string().as_bytes())
    }

    /// Parses the CSV format written by [`DelaySchedule::write_csv`].
    ///
    /// Rows and columns in errors are 1-based positions in the file.
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            row: 1,
            column: 1,
            message: "empty schedule file".into(),
        })?;
        let header = header.map_err(|e| parse_err(1, 1, e.to_string()))?;
        let fields: Vec<&str> = header.trim_end().split(',').collect();
        if fields[0].trim() != "k" {
            return Err(parse_err(1, 1, format!("expected `k`, found `{}`", fields[0])));
        }
        for (c, f) in fields.iter().enumerate().skip(1) {
            if f.trim() != format!("agent{}", c - 1) {
                return Err(parse_err(1, c + 1, format!("expected `agent{}`, found `{f}`", c - 1)));
            }
        }
        let n_agents = fields.len() - 1;
        if n_agents == 0 {
            return Err(parse_err(1, 2, "no agent columns".into()));
        }
        let mut tau = Vec::new();
        let mut horizon = 0usize;
        for (idx, line) in lines {
            let row = idx + 1;
            let line = line.map_err(|e| parse_err(row, 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.trim_end().split(',').collect();
            if cells.len() != n_agents + 1 {
                return Err(parse_err(
                    row,
                    cells.len().min(n_agents + 1),
                    format!("expected {} fields, found {}", n_agents + 1, cells.len()),
                ));
            }
            let k: usize = cells[0]
                .trim()
                .parse()
                .map_err(|e| parse_err(row, 1, format!("bad iteration index: {e}")))?;
            if k != horizon {
                return Err(parse_err(row, 1, format!("expected iteration {horizon}, found {k}")));
            }
            for (c, cell) in cells.iter().enumerate().skip(1) {
                let value: usize = cell
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(row, c + 1, format!("bad delay `{cell}`: {e}")))?;
                if value > k {
                    return Err(parse_err(row, c + 1, format!("delay {value} exceeds k = {k}")));
                }
                if k > 0 {
                    let prev_t = (k - 1) - tau[(k - 1) * n_agents + (c - 1)];
                    if k - value < prev_t {
                        return Err(parse_err(
                            row,
                            c + 1,
                            format!("report computed at {} is older than {prev_t}", k - value),
                        ));
                    }
                }
                tau.push(value);
            }
            horizon += 1;
        }
        Self::new(n_agents, horizon, tau)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

fn parse_err(row: usize, column: usize, message: String) -> Error {
    Error::Parse {
        row,
        column,
        message,
    }
}

/// Per-iteration source of the compute times `t_{i,k}` the server holds.
pub trait StalenessSource: Send {
    fn n_agents(&self) -> usize;

    /// Fills `computed_at[i] = t_{i,k}`. Called once per iteration, `k = 0, 1, ...`.
    fn advance(&mut self, k: usize, computed_at: &mut [usize]) -> Result<()>;
}

/// Replays a materialised schedule.
#[derive(Debug)]
pub struct ScheduleCursor<'a> {
    schedule: &'a DelaySchedule,
}

impl StalenessSource for ScheduleCursor<'_> {
    fn n_agents(&self) -> usize {
        self.schedule.n_agents
    }

    fn advance(&mut self, k: usize, computed_at: &mut [usize]) -> Result<()> {
        if k >= self.schedule.horizon {
            return Err(Error::invalid(format!(
                "schedule covers {} iterations, iteration {k} requested",
                self.schedule.horizon
            )));
        }
        for (i, slot) in computed_at.iter_mut().enumerate() {
            *slot = self.schedule.computed_at(k, i);
        }
        Ok(())
    }
}

impl StalenessSource for DelaySchedule {
    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn advance(&mut self, k: usize, computed_at: &mut [usize]) -> Result<()> {
        self.cursor().advance(k, computed_at)
    }
}

/// Named delay models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    /// Every dispatch takes `delay` iterations in transit.
    Constant { delay: usize },
    /// Transit drawn uniformly from `0..=tau_max`.
    Uniform { tau_max: usize },
    /// Transit `tau_max` with the given probability, else 0.
    Straggler { probability: f64, tau_max: usize },
    /// Staleness matrix read from a schedule CSV.
    File { path: PathBuf },
}

impl DelayModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            DelayModel::Straggler { probability, .. } if !(0.0..=1.0).contains(probability) => {
                Err(Error::config(
                    "delay.probability",
                    format!("must lie in [0, 1], got {probability}"),
                ))
            }
            _ => Ok(()),
        }
    }

    /// Largest staleness this model can produce, when it is known a priori.
    pub fn max_delay(&self) -> Option<usize> {
        match self {
            DelayModel::Constant { delay } => Some(*delay),
            DelayModel::Uniform { tau_max } | DelayModel::Straggler { tau_max, .. } => {
                Some(*tau_max)
            }
            DelayModel::File { .. } => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            DelayModel::Constant { delay } => format!("constant({delay})"),
            DelayModel::Uniform { tau_max } => format!("uniform(0..={tau_max})"),
            DelayModel::Straggler {
                probability,
                tau_max,
            } => format!("straggler(p={probability}, tau_max={tau_max})"),
            DelayModel::File { path } => format!("file({})", path.display()),
        }
    }

    /// A streaming source for `n_agents`; transit models never materialise
    /// the full matrix.
    pub fn source(
        &self,
        n_agents: usize,
        horizon: usize,
        seed: u64,
    ) -> Result<Box<dyn StalenessSource>> {
        self.validate()?;
        let transit = match self {
            DelayModel::File { path } => {
                let schedule = DelaySchedule::load(path)?;
                if schedule.n_agents() != n_agents {
                    return Err(Error::config(
                        "delay.path",
                        format!(
                            "schedule has {} agents, run has {n_agents}",
                            schedule.n_agents()
                        ),
                    ));
                }
                if schedule.horizon() < horizon {
                    return Err(Error::config(
                        "delay.path",
                        format!(
                            "schedule covers {} iterations, run needs {horizon}",
                            schedule.horizon()
                        ),
                    ));
                }
                return Ok(Box::new(schedule));
            }
            DelayModel::Constant { delay } => Transit::Constant(*delay),
            DelayModel::Uniform { tau_max } => Transit::Uniform {
                tau_max: *tau_max,
                rngs: agent_rngs(seed, n_agents),
            },
            DelayModel::Straggler {
                probability,
                tau_max,
            } => Transit::Straggler {
                probability: *probability,
                tau_max: *tau_max,
                rngs: agent_rngs(seed, n_agents),
            },
        };
        Ok(Box::new(ArrivalProcess::new(n_agents, transit)))
    }
}

fn agent_rngs(seed: u64, n_agents: usize) -> Vec<ChaCha8Rng> {
    (0..n_agents)
        .map(|i| seed::stream_rng(seed, i as u64))
        .collect()
}

/// Materialises `horizon` iterations of a delay model.
pub fn generate_schedule(
    model: &DelayModel,
    n_agents: usize,
    horizon: usize,
    seed: u64,
) -> Result<DelaySchedule> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if n_agents == 0 {
        return Err(Error::invalid("need at least one agent"));
    }
    if let DelayModel::File { path } = model {
        let schedule = DelaySchedule::load(path)?;
        if schedule.n_agents() != n_agents {
            return Err(Error::invalid(format!(
                "schedule has {} agents, {n_agents} requested",
                schedule.n_agents()
            )));
        }
        return schedule.truncated(horizon);
    }
    let mut source = model.source(n_agents, horizon, seed)?;
    collect_schedule(source.as_mut(), horizon)
}

fn collect_schedule(source: &mut dyn StalenessSource, horizon: usize) -> Result<DelaySchedule> {
    let n = source.n_agents();
    let mut tau = Vec::with_capacity(n * horizon);
    let mut row = vec![0; n];
    for k in 0..horizon {
        source.advance(k, &mut row)?;
        tau.extend(row.iter().map(|&t| k - t));
    }
    DelaySchedule::new(n, horizon, tau)
}

/// Schedule induced by per-dispatch transit delays `transit[i][j] = d_{i,j}`.
///
/// Agent `i`'s report computed at `j` arrives at `j + d_{i,j}`; the server
/// holds the freshest arrived report. The report from iteration 0 is
/// available from the start.
pub fn simulate_arrivals(transit: &[Vec<usize>]) -> Result<DelaySchedule> {
    let horizon = transit.first().map_or(0, Vec::len);
    if transit.is_empty() || horizon == 0 {
        return Err(Error::invalid("transit matrix is empty"));
    }
    if transit.iter().any(|row| row.len() != horizon) {
        return Err(Error::invalid("transit rows differ in length"));
    }
    let mut process = ArrivalProcess::new(transit.len(), Transit::Matrix(transit.to_vec()));
    collect_schedule(&mut process, horizon)
}

enum Transit {
    Constant(usize),
    Uniform {
        tau_max: usize,
        rngs: Vec<ChaCha8Rng>,
    },
    Straggler {
        probability: f64,
        tau_max: usize,
        rngs: Vec<ChaCha8Rng>,
    },
    Matrix(Vec<Vec<usize>>),
}

impl Transit {
    fn bound(&self) -> usize {
        match self {
            Transit::Constant(d) => *d,
            Transit::Uniform { tau_max, .. } | Transit::Straggler { tau_max, .. } => *tau_max,
            Transit::Matrix(m) => m.iter().flatten().copied().max().unwrap_or(0),
        }
    }

    fn draw(&mut self, agent: usize, k: usize) -> usize {
        match self {
            Transit::Constant(d) => *d,
            Transit::Uniform { tau_max, rngs } => rngs[agent].random_range(0..=*tau_max),
            Transit::Straggler {
                probability,
                tau_max,
                rngs,
            } => {
                if rngs[agent].random_bool(*probability) {
                    *tau_max
                } else {
                    0
                }
            }
            Transit::Matrix(m) => m[agent][k],
        }
    }
}

/// Online up-link simulation.
///
/// Arrivals are bucketed in a ring indexed by arrival time modulo
/// `max_transit + 1`; a bucket only ever holds arrivals for one time step
/// between consumptions.
struct ArrivalProcess {
    transit: Transit,
    window: usize,
    // rings[i][a % window] = freshest compute time arriving at a
    rings: Vec<Vec<Option<usize>>>,
    freshest: Vec<usize>,
    next_k: usize,
}

impl ArrivalProcess {
    fn new(n_agents: usize, transit: Transit) -> Self {
        let window = transit.bound() + 1;
        Self {
            transit,
            window,
            rings: vec![vec![None; window]; n_agents],
            freshest: vec![0; n_agents],
            next_k: 0,
        }
    }
}

impl StalenessSource for ArrivalProcess {
    fn n_agents(&self) -> usize {
        self.freshest.len()
    }

    fn advance(&mut self, k: usize, computed_at: &mut [usize]) -> Result<()> {
        if k != self.next_k {
            return Err(Error::invalid(format!(
                "arrival process expected iteration {}, got {k}",
                self.next_k
            )));
        }
        self.next_k += 1;
        for (i, slot) in computed_at.iter_mut().enumerate() {
            let delay = if k == 0 { 0 } else { self.transit.draw(i, k) };
            let ring = &mut self.rings[i];
            let bucket = &mut ring[(k + delay) % self.window];
            *bucket = Some(bucket.map_or(k, |t| t.max(k)));
            if let Some(t) = ring[k % self.window].take() {
                self.freshest[i] = self.freshest[i].max(t);
            }
            *slot = self.freshest[i];
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub tau_avg: f64,
    pub tau_max_observed: usize,
    /// `τ_k = (1/N) Σ_i τ_{i,k}` per iteration.
    pub per_iteration_mean: Vec<f64>,
}

pub fn delay_stats(schedule: &DelaySchedule) -> DelayStats {
    let n = schedule.n_agents as f64;
    let per_iteration_mean = (0..schedule.horizon)
        .map(|k| schedule.row(k).iter().sum::<usize>() as f64 / n)
        .collect();
    let total: u64 = schedule.tau.iter().map(|&t| t as u64).sum();
    DelayStats {
        tau_avg: if schedule.tau.is_empty() {
            0.0
        } else {
            total as f64 / schedule.tau.len() as f64
        },
        tau_max_observed: schedule.tau.iter().copied().max().unwrap_or(0),
        per_iteration_mean,
    }
}

/// Running totals of staleness, for runs that never materialise a schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DelayAccumulator {
    pub total: u64,
    pub entries: u64,
    pub iterations: u64,
    pub max: usize,
}

impl DelayAccumulator {
    pub fn record_row(&mut self, staleness: impl IntoIterator<Item = usize>) {
        for tau in staleness {
            self.total += tau as u64;
            self.entries += 1;
            self.max = self.max.max(tau);
        }
        self.iterations += 1;
    }

    pub fn tau_avg(&self) -> f64 {
        if self.entries == 0 {
            0.0
        } else {
            self.total as f64 / self.entries as f64
        }
    }

    /// The update-count lower bound in exact integer arithmetic:
    /// `ceil(T / (8 (τ_avg + 1)))` with `τ_avg = total / entries`.
    pub fn min_updates(&self) -> u64 {
        if self.entries == 0 {
            return 0;
        }
        let t = self.iterations as u128;
        let num = t * self.entries as u128;
        let den = 8 * (self.total as u128 + self.entries as u128);
        num.div_ceil(den) as u64
    }
}

/// `ceil(T / (8 τ_avg + 8))`, the guaranteed number of server updates.
pub fn lemma1_min_updates(horizon: u64, tau_avg: f64) -> u64 {
    if horizon == 0 {
        return 0;
    }
    (horizon as f64 / (8.0 * (tau_avg + 1.0))).ceil() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(tau: usize, n: usize, horizon: usize) -> DelaySchedule {
        generate_schedule(&DelayModel::Constant { delay: tau }, n, horizon, 0).unwrap()
    }

    #[test]
    fn constant_zero_is_fresh() {
        let s = constant(0, 3, 20);
        assert!((0..20).all(|k| s.row(k).iter().all(|&t| t == 0)));
    }

    #[test]
    fn constant_three_clamps_warmup() {
        let s = constant(3, 2, 10);
        for k in 0..10 {
            assert_eq!(s.row(k), &[k.min(3), k.min(3)]);
        }
    }

    #[test]
    fn uniform_is_deterministic_given_seed() {
        let m = DelayModel::Uniform { tau_max: 50 };
        let a = generate_schedule(&m, 4, 500, 9).unwrap();
        let b = generate_schedule(&m, 4, 500, 9).unwrap();
        let c = generate_schedule(&m, 4, 500, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(delay_stats(&a).tau_max_observed <= 50);
    }

    #[test]
    fn arrivals_hand_trace() {
        // d = (0, 5, 0, 0): report 1 is still in flight at k = 1.
        let s = simulate_arrivals(&[vec![0, 5, 0, 0]]).unwrap();
        assert_eq!(s.staleness(0, 0), 0);
        assert_eq!(s.staleness(1, 0), 1);
        assert_eq!(s.staleness(2, 0), 0);
        assert_eq!(s.staleness(3, 0), 0);
    }

    #[test]
    fn constant_transit_by_enumeration() {
        // Transit 2: report j arrives at j + 2, except report 0 which is
        // present from the start. At k the freshest arrival is k − 2 (k ≥ 2).
        let s = simulate_arrivals(&[vec![2; 6]]).unwrap();
        let expected = [0usize, 1, 2, 2, 2, 2];
        for (k, &e) in expected.iter().enumerate() {
            assert_eq!(s.staleness(k, 0), e, "k = {k}");
        }
    }

    #[test]
    fn stats_examples() {
        let zero = constant(0, 2, 5);
        assert_eq!(delay_stats(&zero).tau_avg, 0.0);
        let ramp = DelaySchedule::from_rows(&[vec![0], vec![1], vec![2], vec![3]]).unwrap();
        let st = delay_stats(&ramp);
        assert_eq!(st.tau_avg, 1.5);
        assert_eq!(st.tau_max_observed, 3);
        assert_eq!(st.per_iteration_mean, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn min_updates_examples() {
        assert_eq!(lemma1_min_updates(80, 0.0), 10);
        assert_eq!(lemma1_min_updates(100, 4.0), 3);
        assert_eq!(lemma1_min_updates(1, 0.0), 1);
        assert_eq!(lemma1_min_updates(1, 1e6), 1);
    }

    #[test]
    fn accumulator_matches_float_bound() {
        let mut acc = DelayAccumulator::default();
        for k in 0..100usize {
            acc.record_row([k % 5, (k * 7) % 11]);
        }
        assert_eq!(acc.min_updates(), lemma1_min_updates(100, acc.tau_avg()));
    }

    #[test]
    fn rejects_regressing_schedule() {
        // t = (0, 1, 0): the server would go back to an older report.
        let err = DelaySchedule::from_rows(&[vec![0], vec![0], vec![2]]).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
        assert!(DelaySchedule::from_rows(&[vec![1]]).is_err());
    }

    #[test]
    fn csv_parse_errors_carry_position() {
        let text = "k,agent0,agent1\n0,0,0\n1,1,x\n";
        match DelaySchedule::read_csv(text.as_bytes()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 3)),
            other => panic!("unexpected {other:?}"),
        }
        let text = "k,agent0\n0,0\n1,2\n";
        match DelaySchedule::read_csv(text.as_bytes()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("unexpected {other:?}"),
        }
        let text = "k,agentX\n0,0\n";
        assert!(matches!(
            DelaySchedule::read_csv(text.as_bytes()),
            Err(Error::Parse { row: 1, column: 2, .. })
        ));
        let text = "k,agent0\n0,0\n2,0\n";
        assert!(matches!(
            DelaySchedule::read_csv(text.as_bytes()),
            Err(Error::Parse { row: 3, column: 1, .. })
        ));
    }

    #[test]
    fn straggler_extremes() {
        let never = DelayModel::Straggler { probability: 0.0, tau_max: 30 };
        let s = generate_schedule(&never, 3, 100, 1).unwrap();
        assert_eq!(delay_stats(&s).tau_max_observed, 0);
        let always = DelayModel::Straggler { probability: 1.0, tau_max: 30 };
        let s = generate_schedule(&always, 3, 100, 1).unwrap();
        assert_eq!(s, constant(30, 3, 100));
        let bad = DelayModel::Straggler { probability: 1.5, tau_max: 3 };
        assert!(generate_schedule(&bad, 3, 10, 1).is_err());
    }

    fn transit_strategy() -> impl Strategy<Value = Vec<Vec<usize>>> {
        (1usize..5, 1usize..80).prop_flat_map(|(n, h)| {
            prop::collection::vec(prop::collection::vec(0usize..20, h), n)
        })
    }

    proptest! {
        #[test]
        fn arrivals_replay_against_log(transit in transit_strategy()) {
            let s = simulate_arrivals(&transit).unwrap();
            for i in 0..s.n_agents() {
                for k in 0..s.horizon() {
                    let t = s.computed_at(k, i);
                    // Held report has arrived...
                    prop_assert!(t == 0 || t + transit[i][t] <= k);
                    // ...and nothing fresher has.
                    for j in (t + 1)..=k {
                        prop_assert!(j + transit[i][j] > k);
                    }
                }
            }
        }

        #[test]
        fn csv_round_trip(transit in transit_strategy()) {
            let s = simulate_arrivals(&transit).unwrap();
            let back = DelaySchedule::read_csv(s.to_csv_string().as_bytes()).unwrap();
            prop_assert_eq!(s, back);
        }

        #[test]
        fn generated_schedules_hold_invariants(
            tau_max in 0usize..60,
            p in 0.0f64..1.0,
            n in 1usize..8,
            horizon in 1usize..300,
            seed in any::<u64>(),
        ) {
            for m in [
                DelayModel::Uniform { tau_max },
                DelayModel::Straggler { probability: p, tau_max },
                DelayModel::Constant { delay: tau_max },
            ] {
                // DelaySchedule::new re-validates both invariants.
                let s = generate_schedule(&m, n, horizon, seed).unwrap();
                let st = delay_stats(&s);
                prop_assert!(st.tau_avg <= st.tau_max_observed as f64);
                prop_assert!(st.tau_max_observed <= tau_max);
            }
        }
    }
}
