//! Server-side aggregation of delayed operator reports.
//!
//! The delay-adaptive rule keeps the `M = ceil(N/2)` reports whose compute-time
//! iterate is closest to the current iterate, and only moves when the median
//! of those staleness errors is below `epsilon = max(alpha^1.5, alpha/sqrt(M))`.

use std::collections::VecDeque;

use crate::{Error, Result, Vector};

/// An agent's operator value tagged with the iteration it was computed at.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorReport {
    pub agent: usize,
    pub computed_at: usize,
    pub direction: Vector,
}

impl OperatorReport {
    pub fn new(agent: usize, computed_at: usize, direction: Vector) -> Self {
        Self {
            agent,
            computed_at,
            direction,
        }
    }
}

impl AsRef<OperatorReport> for OperatorReport {
    fn as_ref(&self) -> &OperatorReport {
        self
    }
}

/// Server iterates indexed by iteration number.
///
/// Entries older than the oldest iterate any agent can still reference are
/// pruned by the caller via [`ParameterHistory::prune_before`]; an optional
/// depth additionally caps how many past iterates are kept.
#[derive(Clone, Debug)]
pub struct ParameterHistory {
    base: usize,
    items: VecDeque<Vector>,
    depth: Option<usize>,
}

impl ParameterHistory {
    /// Starts a history at iteration 0 holding `theta0`.
    pub fn new(theta0: Vector, depth: Option<usize>) -> Self {
        let mut items = VecDeque::new();
        items.push_back(theta0);
        Self {
            base: 0,
            items,
            depth,
        }
    }

    /// Builds a history for iterations `0..iterates.len()`.
    pub fn from_iterates(iterates: impl IntoIterator<Item = Vector>) -> Result<Self> {
        let items: VecDeque<Vector> = iterates.into_iter().collect();
        if items.is_empty() {
            return Err(Error::invalid("history needs at least one iterate"));
        }
        Ok(Self {
            base: 0,
            items,
            depth: None,
        })
    }

    /// Index of the most recent iterate.
    pub fn latest_index(&self) -> usize {
        self.base + self.items.len() - 1
    }

    pub fn latest(&self) -> &Vector {
        self.items.back().expect("history is never empty")
    }

    pub fn oldest_index(&self) -> usize {
        self.base
    }

    pub fn get(&self, iteration: usize) -> Option<&Vector> {
        iteration
            .checked_sub(self.base)
            .and_then(|offset| self.items.get(offset))
    }

    /// Appends the next iterate, evicting beyond the depth bound.
    pub fn push(&mut self, theta: Vector) {
        self.items.push_back(theta);
        if let Some(depth) = self.depth {
            while self.items.len() > depth + 1 {
                self.items.pop_front();
                self.base += 1;
            }
        }
    }

    /// Drops every iterate with index `< iteration` (never the latest).
    pub fn prune_before(&mut self, iteration: usize) {
        while self.base < iteration && self.items.len() > 1 {
            self.items.pop_front();
            self.base += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `‖θ_{t_j} − θ_k‖` for each report `j`.
pub fn staleness_errors<R: AsRef<OperatorReport>>(
    history: &ParameterHistory,
    reports: &[R],
    k: usize,
) -> Result<Vec<f64>> {
    let current = history.get(k).ok_or(Error::HistoryUnderflow {
        agent: 0,
        iteration: k,
        computed_at: k,
    })?;
    reports
        .iter()
        .map(|r| {
            let r = r.as_ref();
            if r.computed_at > k {
                return Err(Error::invalid(format!(
                    "agent {} report computed at {} is ahead of iteration {k}",
                    r.agent, r.computed_at
                )));
            }
            let past = history.get(r.computed_at).ok_or(Error::HistoryUnderflow {
                agent: r.agent,
                iteration: k,
                computed_at: r.computed_at,
            })?;
            if past.len() != current.len() {
                return Err(Error::DimensionMismatch {
                    expected: current.len(),
                    found: past.len(),
                });
            }
            Ok(distance(past, current))
        })
        .collect()
}

fn distance(a: &Vector, b: &Vector) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The `M` least-stale agents and the median agent among them.
#[derive(Clone, Debug, PartialEq)]
pub struct MedianSet {
    /// The selected agent with the largest error (the M-th order statistic).
    pub median_agent: usize,
    /// Exactly `M` agent indices, ascending by (error, index).
    pub selected: Vec<usize>,
    pub median_error: f64,
}

/// `ceil(n / 2)`, the size of the selected set.
pub fn selection_size(n_agents: usize) -> usize {
    n_agents.div_ceil(2)
}

/// Picks the `m` smallest errors, breaking ties by ascending agent index.
pub fn select_median_set(errors: &[f64], m: usize) -> Result<MedianSet> {
    if errors.is_empty() {
        return Err(Error::invalid("cannot select from zero agents"));
    }
    if m == 0 || m > errors.len() {
        return Err(Error::invalid(format!(
            "selection size {m} outside 1..={}",
            errors.len()
        )));
    }
    if let Some(j) = errors.iter().position(|e| !(*e >= 0.0)) {
        return Err(Error::invalid(format!(
            "staleness error for agent {j} is {}",
            errors[j]
        )));
    }
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
    order.truncate(m);
    let median_agent = order[m - 1];
    Ok(MedianSet {
        median_agent,
        median_error: errors[median_agent],
        selected: order,
    })
}

/// `max(alpha^1.5, alpha / sqrt(m))`.
pub fn epsilon_threshold(alpha: f64, m: usize) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("step size must be positive, got {alpha}")));
    }
    if m == 0 {
        return Err(Error::invalid("selection size must be at least 1"));
    }
    Ok(alpha.powf(1.5).max(alpha / (m as f64).sqrt()))
}

/// Outcome of one delay-adaptive aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct DasaStep {
    pub selection: MedianSet,
    pub epsilon: f64,
    /// `median_error <= epsilon`.
    pub gate_open: bool,
    /// Mean of the selected directions; `None` when the gate is closed.
    pub direction: Option<Vector>,
}

/// Delay-adaptive direction over `m` selected reports.
///
/// `reports[j]` must belong to agent `j`.
pub fn dasa_direction<R: AsRef<OperatorReport>>(
    history: &ParameterHistory,
    reports: &[R],
    k: usize,
    alpha: f64,
    m: usize,
) -> Result<DasaStep> {
    check_agent_order(reports)?;
    let errors = staleness_errors(history, reports, k)?;
    let selection = select_median_set(&errors, m)?;
    let epsilon = epsilon_threshold(alpha, m)?;
    let gate_open = selection.median_error <= epsilon;
    let direction = if gate_open {
        Some(mean_of(selection.selected.iter().map(|&j| &reports[j].as_ref().direction))?)
    } else {
        None
    };
    Ok(DasaStep {
        selection,
        epsilon,
        gate_open,
        direction,
    })
}

/// Unfiltered mean of every (possibly stale) report.
pub fn delayed_average_direction<R: AsRef<OperatorReport>>(reports: &[R]) -> Result<Vector> {
    mean_of(reports.iter().map(|r| &r.as_ref().direction))
}

/// `θ + alpha·v`, or `θ` unchanged when there is no direction.
pub fn server_step(theta: &Vector, direction: Option<&Vector>, alpha: f64) -> Result<Vector> {
    match direction {
        None => Ok(theta.clone()),
        Some(v) if v.len() != theta.len() => Err(Error::DimensionMismatch {
            expected: theta.len(),
            found: v.len(),
        }),
        Some(v) => Ok(theta + v * alpha),
    }
}

pub(crate) fn mean_of<'a>(vectors: impl IntoIterator<Item = &'a Vector>) -> Result<Vector> {
    let mut iter = vectors.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::invalid("cannot average zero reports"))?;
    let mut sum = first.clone();
    let mut count = 1usize;
    for v in iter {
        if v.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                expected: sum.len(),
                found: v.len(),
            });
        }
        sum += v;
        count += 1;
    }
    Ok(sum / count as f64)
}

fn check_agent_order<R: AsRef<OperatorReport>>(reports: &[R]) -> Result<()> {
    match reports.iter().enumerate().find(|(j, r)| r.as_ref().agent != *j) {
        Some((j, r)) => Err(Error::invalid(format!(
            "report at position {j} belongs to agent {}",
            r.as_ref().agent
        ))),
        None => Ok(()),
    }
}
