//! Finite ergodic Markov chains for the agents' observation processes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::seed;
use crate::{Error, Matrix, Result, Vector};

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_RESIDUAL_TOL: f64 = 1e-10;
const POWER_ITERATION_CAP: usize = 1_000_000;
const POWER_ITERATION_TOL: f64 = 1e-12;
/// Default iteration cap for [`FiniteMarkovChain::tv_mixing_time`].
pub const MIXING_CAP: usize = 100_000;

/// A validated row-stochastic matrix with precomputed cumulative rows.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticMatrix {
    transition: Matrix,
    cumulative: Vec<Vec<f64>>,
}

impl StochasticMatrix {
    pub fn new(transition: Matrix) -> Result<Self> {
        let n = transition.nrows();
        if n == 0 || transition.ncols() != n {
            return Err(Error::invalid(format!(
                "transition matrix must be square and non-empty, got {}x{}",
                transition.nrows(),
                transition.ncols()
            )));
        }
        let mut cumulative = Vec::with_capacity(n);
        for s in 0..n {
            let row = transition.row(s);
            if let Some(p) = row.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid(format!("row {s} has entry {p}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("row {s} sums to {sum}")));
            }
            let mut acc = 0.0;
            cumulative.push(
                row.iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect(),
            );
        }
        Ok(Self {
            transition,
            cumulative,
        })
    }

    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.transition
    }

    /// Draws the successor of `state`.
    pub fn sample_next<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let cum = &self.cumulative[state];
        let u: f64 = rng.random::<f64>() * cum[cum.len() - 1];
        cum.partition_point(|&c| c <= u).min(cum.len() - 1)
    }

    /// Single strongly connected component (reachability on the support).
    pub fn is_irreducible(&self) -> bool {
        let n = self.n_states();
        let forward = reachable(n, |a, b| self.transition[(a, b)] > 0.0);
        let backward = reachable(n, |a, b| self.transition[(b, a)] > 0.0);
        forward && backward
    }

    pub fn has_self_loop(&self) -> bool {
        (0..self.n_states()).any(|s| self.transition[(s, s)] > 0.0)
    }
}

fn reachable(n: usize, edge: impl Fn(usize, usize) -> bool) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(a) = stack.pop() {
        for b in 0..n {
            if !seen[b] && edge(a, b) {
                seen[b] = true;
                stack.push(b);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// An aperiodic irreducible chain together with its stationary law.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMarkovChain {
    kernel: StochasticMatrix,
    stationary: Vector,
}

impl FiniteMarkovChain {
    /// Validates ergodicity (irreducible support plus a self-loop) and
    /// computes the stationary distribution.
    pub fn new(transition: Matrix) -> Result<Self> {
        let kernel = StochasticMatrix::new(transition)?;
        if !kernel.is_irreducible() {
            return Err(Error::invalid("chain is not irreducible"));
        }
        if !kernel.has_self_loop() {
            return Err(Error::invalid("chain has no self-loop; aperiodicity not guaranteed"));
        }
        let stationary = stationary_distribution(kernel.matrix())?;
        if let Some((s, p)) = stationary.iter().enumerate().find(|(_, p)| !(**p > 0.0)) {
            return Err(Error::invalid(format!("stationary mass of state {s} is {p}")));
        }
        Ok(Self { kernel, stationary })
    }

    /// Rows drawn from a flat Dirichlet, then blended with the identity row
    /// with weight `self_loop_floor`.
    pub fn random_ergodic(n_states: usize, self_loop_floor: f64, seed: u64) -> Result<Self> {
        if n_states < 2 {
            return Err(Error::invalid("need at least two states"));
        }
        if !(self_loop_floor > 0.0 && self_loop_floor < 1.0) {
            return Err(Error::invalid(format!(
                "self-loop floor must lie in (0, 1), got {self_loop_floor}"
            )));
        }
        let mut rng = seed::rng(seed);
        let mut p = Matrix::zeros(n_states, n_states);
        for s in 0..n_states {
            let draws: Vec<f64> = (0..n_states).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            for (j, d) in draws.iter().enumerate() {
                p[(s, j)] = (1.0 - self_loop_floor) * d / total;
            }
            p[(s, s)] += self_loop_floor;
            let sum: f64 = p.row(s).iter().sum();
            p.row_mut(s).unscale_mut(sum);
        }
        Self::new(p)
    }

    pub fn n_states(&self) -> usize {
        self.kernel.n_states()
    }

    pub fn transition(&self) -> &Matrix {
        self.kernel.matrix()
    }

    pub fn kernel(&self) -> &StochasticMatrix {
        &self.kernel
    }

    pub fn stationary(&self) -> &Vector {
        &self.stationary
    }

    /// `max_s TV(P^t(s,·), π)` for `t = 0, 1, ..., len-1`.
    pub fn tv_profile(&self, len: usize) -> Vec<f64> {
        let mut powered = Matrix::identity(self.n_states(), self.n_states());
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.max_tv(&powered));
            powered = &powered * self.transition();
        }
        out
    }

    fn max_tv(&self, powered: &Matrix) -> f64 {
        (0..self.n_states())
            .map(|s| {
                0.5 * powered
                    .row(s)
                    .iter()
                    .zip(self.stationary.iter())
                    .map(|(p, q)| (p - q).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Smallest `t >= 0` with `max_s TV(P^t(s,·), π) <= precision`.
    pub fn tv_mixing_time(&self, precision: f64) -> Result<usize> {
        self.tv_mixing_time_capped(precision, MIXING_CAP)
    }

    pub fn tv_mixing_time_capped(&self, precision: f64, cap: usize) -> Result<usize> {
        if !(precision > 0.0) {
            return Err(Error::invalid(format!("precision must be positive, got {precision}")));
        }
        let mut powered = Matrix::identity(self.n_states(), self.n_states());
        let mut last = f64::INFINITY;
        for t in 0..=cap {
            let tv = self.max_tv(&powered);
            debug_assert!(tv <= last + 1e-12, "TV increased at t = {t}");
            if tv <= precision {
                return Ok(t);
            }
            last = tv;
            powered = &powered * self.transition();
        }
        Err(Error::Numeric {
            what: "tv_mixing_time",
            residual: last,
            iterations: cap,
        })
    }

    /// Mixing time at precision `alpha² / (2 operator_scale)`: the TV level
    /// that keeps the conditional-mean deviation of an operator bounded by
    /// `operator_scale (‖θ‖ + σ)` below `alpha² (‖θ‖ + σ)`.
    pub fn mixing_time_for_alpha(&self, alpha: f64, operator_scale: f64) -> Result<usize> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid(format!("step size must lie in (0, 1], got {alpha}")));
        }
        if !(operator_scale >= 1.0) {
            return Err(Error::invalid(format!(
                "operator scale must be at least 1, got {operator_scale}"
            )));
        }
        self.tv_mixing_time(alpha * alpha / (2.0 * operator_scale))
    }

    /// Second-largest eigenvalue modulus of `P`.
    pub fn second_eigenvalue_modulus(&self) -> f64 {
        let mut moduli: Vec<f64> = self
            .transition()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .collect();
        moduli.sort_by(|a, b| b.total_cmp(a));
        moduli.get(1).copied().unwrap_or(0.0)
    }

    /// Detailed balance `π_i P_ij = π_j P_ji` within `tol`.
    pub fn is_reversible(&self, tol: f64) -> bool {
        let n = self.n_states();
        let p = self.transition();
        (0..n).all(|i| {
            (0..n).all(|j| {
                (self.stationary[i] * p[(i, j)] - self.stationary[j] * p[(j, i)]).abs() <= tol
            })
        })
    }

    /// Spectral-gap estimate of the mixing time at the precision used by
    /// [`mixing_time_for_alpha`](Self::mixing_time_for_alpha), and the
    /// constant `K = bound / ln(1/alpha)`.
    ///
    /// Uses `TV(t) <= ½ sqrt((1 − π_min)/π_min) λ*^t`, which holds for
    /// reversible chains.
    pub fn spectral_mixing_bound(&self, alpha: f64, operator_scale: f64) -> MixingBound {
        let slem = self.second_eigenvalue_modulus();
        let precision = alpha * alpha / (2.0 * operator_scale);
        let pi_min = self.stationary.min();
        let prefactor = 0.5 * ((1.0 - pi_min) / pi_min).sqrt();
        let tau_bound = if slem <= 0.0 || prefactor <= precision {
            1.0
        } else {
            ((prefactor / precision).ln() / (1.0 / slem).ln()).ceil().max(1.0)
        };
        MixingBound {
            slem,
            reversible: self.is_reversible(1e-10),
            tau_bound,
            k_constant: tau_bound / (1.0 / alpha).ln(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixingBound {
    pub slem: f64,
    pub reversible: bool,
    pub tau_bound: f64,
    pub k_constant: f64,
}

/// Power iteration `πᵀ ← πᵀP` from the uniform law.
pub fn stationary_distribution(transition: &Matrix) -> Result<Vector> {
    let n = transition.nrows();
    if n == 0 || transition.ncols() != n {
        return Err(Error::invalid("transition matrix must be square and non-empty"));
    }
    let pt = transition.transpose();
    let mut pi = Vector::from_element(n, 1.0 / n as f64);
    let mut change = f64::INFINITY;
    for _ in 0..POWER_ITERATION_CAP {
        let mut next = &pt * &pi;
        let total = next.sum();
        next.unscale_mut(total);
        change = (&next - &pi).lp_norm(1);
        pi = next;
        if change <= POWER_ITERATION_TOL {
            let residual = (&pt * &pi - &pi).lp_norm(1);
            if residual <= STATIONARY_RESIDUAL_TOL {
                return Ok(pi);
            }
        }
    }
    Err(Error::Numeric {
        what: "stationary_distribution",
        residual: change,
        iterations: POWER_ITERATION_CAP,
    })
}

/// One independent random stream and current state per agent.
#[derive(Clone, Debug)]
pub struct AgentStreams {
    states: Vec<usize>,
    rngs: Vec<ChaCha8Rng>,
}

impl AgentStreams {
    /// Agent `i` uses stream `i` of `master_seed`; initial states are drawn
    /// from `initial` on that stream.
    pub fn new(n_agents: usize, initial: &Vector, master_seed: u64) -> Self {
        let mut rngs: Vec<ChaCha8Rng> = (0..n_agents)
            .map(|i| seed::stream_rng(master_seed, i as u64))
            .collect();
        let states = rngs
            .iter_mut()
            .map(|rng| sample_categorical(initial.as_slice(), rng))
            .collect();
        Self { states, rngs }
    }

    /// Streams started from the given states.
    pub fn with_states(states: Vec<usize>, master_seed: u64) -> Self {
        let rngs = (0..states.len())
            .map(|i| seed::stream_rng(master_seed, i as u64))
            .collect();
        Self { states, rngs }
    }

    pub fn n_agents(&self) -> usize {
        self.states.len()
    }

    pub fn state(&self, agent: usize) -> usize {
        self.states[agent]
    }

    /// Advances only `agent`'s chain and stream; returns the new state.
    pub fn step(&mut self, kernel: &StochasticMatrix, agent: usize) -> usize {
        let next = kernel.sample_next(self.states[agent], &mut self.rngs[agent]);
        self.states[agent] = next;
        next
    }
}

/// Free-function form of [`AgentStreams::step`].
pub fn step(chain: &FiniteMarkovChain, streams: &mut AgentStreams, agent: usize) -> usize {
    streams.step(chain.kernel(), agent)
}

fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (j, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return j;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(a: f64, b: f64) -> FiniteMarkovChain {
        FiniteMarkovChain::new(Matrix::from_row_slice(2, 2, &[1.0 - a, a, b, 1.0 - b])).unwrap()
    }

    /// Smallest t with |1−a−b|^t · max(a,b)/(a+b) <= precision, by scanning
    /// the closed form.
    fn analytic_two_state_mixing(a: f64, b: f64, precision: f64) -> usize {
        let lambda = (1.0 - a - b).abs();
        let c = a.max(b) / (a + b);
        (0..).find(|&t| lambda.powi(t as i32) * c <= precision).unwrap()
    }

    #[test]
    fn random_chain_floor_and_rows() {
        for seed in 0..5 {
            let c = FiniteMarkovChain::random_ergodic(2, 0.5, seed).unwrap();
            assert!(c.transition()[(0, 0)] >= 0.5 && c.transition()[(1, 1)] >= 0.5);
            let c = FiniteMarkovChain::random_ergodic(12, 0.1, seed).unwrap();
            for s in 0..12 {
                assert!((c.transition().row(s).sum() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn random_chain_stationary_matches_brute_force_power() {
        let c = FiniteMarkovChain::random_ergodic(30, 0.1, 2024).unwrap();
        // Independent oracle: push a point mass through P many times.
        let p = c.transition();
        let mut dist = vec![0.0; 30];
        dist[0] = 1.0;
        for _ in 0..5000 {
            let mut next = vec![0.0; 30];
            for i in 0..30 {
                for j in 0..30 {
                    next[j] += dist[i] * p[(i, j)];
                }
            }
            dist = next;
        }
        for j in 0..30 {
            assert!((dist[j] - c.stationary()[j]).abs() <= 1e-8);
        }
    }

    #[test]
    fn stationary_examples() {
        let half = stationary_distribution(&Matrix::from_element(2, 2, 0.5)).unwrap();
        assert!((half[0] - 0.5).abs() < 1e-14 && (half[1] - 0.5).abs() < 1e-14);
        let c = two_state(0.1, 0.5);
        assert!((c.stationary()[0] - 5.0 / 6.0).abs() < 1e-11);
        assert!((c.stationary()[1] - 1.0 / 6.0).abs() < 1e-11);
        for seed in 0..5 {
            let c = FiniteMarkovChain::random_ergodic(8, 0.2, seed).unwrap();
            let residual = (c.transition().transpose() * c.stationary() - c.stationary()).lp_norm(1);
            assert!(residual <= 1e-10);
        }
    }

    #[test]
    fn periodic_chain_rejected() {
        let flip = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(FiniteMarkovChain::new(flip).is_err());
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(StochasticMatrix::new(Matrix::from_row_slice(2, 2, &[0.5, 0.6, 0.5, 0.5])).is_err());
        assert!(StochasticMatrix::new(Matrix::from_row_slice(2, 2, &[1.5, -0.5, 0.5, 0.5])).is_err());
        // Reducible: state 1 never leaves.
        let red = Matrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 1.0]);
        assert!(FiniteMarkovChain::new(red).is_err());
    }

    #[test]
    fn deterministic_kernel_follows_successor() {
        let perm = Matrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let kernel = StochasticMatrix::new(perm).unwrap();
        let mut streams = AgentStreams::with_states(vec![0], 5);
        let path: Vec<usize> = (0..6).map(|_| streams.step(&kernel, 0)).collect();
        assert_eq!(path, vec![1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn empirical_transitions_within_three_se() {
        let p = Matrix::from_row_slice(3, 3, &[0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.25, 0.25, 0.5]);
        let chain = FiniteMarkovChain::new(p.clone()).unwrap();
        let mut streams = AgentStreams::with_states(vec![0], 77);
        let mut counts = [[0u64; 3]; 3];
        let mut s = 0;
        for _ in 0..1_000_000 {
            let next = step(&chain, &mut streams, 0);
            counts[s][next] += 1;
            s = next;
        }
        for i in 0..3 {
            let n_i: u64 = counts[i].iter().sum();
            for j in 0..3 {
                let phat = counts[i][j] as f64 / n_i as f64;
                let se = (p[(i, j)] * (1.0 - p[(i, j)]) / n_i as f64).sqrt();
                assert!((phat - p[(i, j)]).abs() <= 3.0 * se, "({i},{j}) {phat}");
            }
        }
    }

    #[test]
    fn agent_streams_are_independent() {
        let chain = two_state(0.5, 0.5);
        let mut streams = AgentStreams::new(2, chain.stationary(), 99);
        let n = 100_000;
        let (a, b): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|_| {
                let x = step(&chain, &mut streams, 0) as f64;
                let y = step(&chain, &mut streams, 1) as f64;
                (x, y)
            })
            .unzip();
        assert_ne!(a, b);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n as f64;
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n as f64;
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n as f64;
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() <= 4.0 / (n as f64).sqrt(), "corr = {corr}");
    }

    #[test]
    fn mixing_of_already_mixed_chain() {
        // Rows equal to π: one step reaches stationarity; t = 0 is the point
        // mass itself.
        let p = Matrix::from_row_slice(2, 2, &[0.3, 0.7, 0.3, 0.7]);
        let c = FiniteMarkovChain::new(p).unwrap();
        assert_eq!(c.tv_mixing_time(1e-9).unwrap(), 1);
        assert_eq!(c.tv_mixing_time(1.0).unwrap(), 0);
    }

    #[test]
    fn two_state_mixing_matches_closed_form() {
        let c = two_state(0.3, 0.3);
        for prec in [1e-3, 1e-6, 0.05] {
            assert_eq!(
                c.tv_mixing_time(prec).unwrap(),
                analytic_two_state_mixing(0.3, 0.3, prec)
            );
        }
    }

    #[test]
    fn tv_profile_is_non_increasing() {
        for seed in 0..4 {
            let c = FiniteMarkovChain::random_ergodic(10, 0.05, seed).unwrap();
            let prof = c.tv_profile(60);
            assert!(prof.windows(2).all(|w| w[1] <= w[0] + 1e-14));
        }
    }

    #[test]
    fn mixing_cap_reports_last_tv() {
        let c = two_state(0.001, 0.001);
        match c.tv_mixing_time_capped(1e-9, 10) {
            Err(Error::Numeric { residual, .. }) => assert!(residual > 0.4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixing_for_alpha_properties() {
        let c = two_state(0.3, 0.3);
        let t1 = c.mixing_time_for_alpha(0.1, 1.0).unwrap();
        let t2 = c.mixing_time_for_alpha(0.01, 1.0).unwrap();
        assert_eq!(t1, analytic_two_state_mixing(0.3, 0.3, 0.005));
        assert_eq!(t2, analytic_two_state_mixing(0.3, 0.3, 0.000_05));
        let ratio = t2 as f64 / t1 as f64;
        assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
        let mut last = 0;
        for alpha in [0.8, 0.4, 0.2, 0.1, 0.05, 0.025] {
            let t = c.mixing_time_for_alpha(alpha, 2.0).unwrap();
            assert!(t >= last);
            last = t;
        }
        // Spectral bound on the reversible two-state chain: λ* = 0.4.
        for alpha in [0.1, 0.01, 0.001] {
            let b = c.spectral_mixing_bound(alpha, 1.0);
            assert!(b.reversible);
            assert!((b.slem - 0.4).abs() < 1e-12);
            let t = c.mixing_time_for_alpha(alpha, 1.0).unwrap() as f64;
            assert!(t <= b.k_constant * (1.0 / alpha).ln() + 1e-9);
        }
    }

    #[test]
    fn tv_bounds_conditional_expectation_deviation() {
        // For g bounded by G on states, |E[g(o_t) | o_0 = s] − E_π g| <= 2 G TV_t.
        let c = FiniteMarkovChain::random_ergodic(5, 0.2, 3).unwrap();
        let g = [0.7, -1.0, 0.2, 0.9, -0.4];
        let big_g = 1.0;
        let mean_pi: f64 = (0..5).map(|j| c.stationary()[j] * g[j]).sum();
        let prof = c.tv_profile(15);
        let mut pt = Matrix::identity(5, 5);
        for tv in prof {
            for s in 0..5 {
                let cond: f64 = (0..5).map(|j| pt[(s, j)] * g[j]).sum();
                assert!((cond - mean_pi).abs() <= 2.0 * big_g * tv + 1e-15);
            }
            pt = &pt * c.transition();
        }
    }
}
