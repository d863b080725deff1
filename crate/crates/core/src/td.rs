//! Stochastic-approximation problem instances.
//!
//! Both instances here have operators affine in the parameter,
//! `g(θ, o) = c_o − B_o θ`, observed through a finite Markov chain where an
//! observation is one transition `(s, s')`:
//!
//! - [`TdProblem`]: TD(0) policy evaluation with linear features,
//!   `g(θ, (s, s')) = φ(s) (r(s) + γ φ(s')ᵀθ − φ(s)ᵀθ)` and
//!   `ḡ(θ) = b − Aθ`, `A = ΦᵀD(I − γP)Φ`, `b = ΦᵀD r`.
//! - [`LinearSaProblem`]: a tiny strongly monotone instance
//!   `g(θ, (s, s')) = b_s − A_s θ` used for closed-form checks.

use nalgebra::linalg::SymmetricEigen;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::markov::FiniteMarkovChain;
use crate::seed;
use crate::{Error, Matrix, Result, Vector};

/// A chain transition `(s, s')`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub state: usize,
    pub next_state: usize,
}

impl Observation {
    pub fn new(state: usize, next_state: usize) -> Self {
        Self { state, next_state }
    }
}

/// Strong monotonicity `mu`, Lipschitz scale `l`, noise scale `sigma`, and
/// the curvature `omega` that `mu` is derived from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub mu: f64,
    pub l: f64,
    pub sigma: f64,
    pub omega: f64,
}

pub trait SaProblem: Sync {
    fn dim(&self) -> usize;

    fn chain(&self) -> &FiniteMarkovChain;

    /// Writes `g(θ, o)` into `out`.
    fn operator_into(&self, theta: &Vector, obs: Observation, out: &mut Vector);

    fn operator(&self, theta: &Vector, obs: Observation) -> Vector {
        let mut out = Vector::zeros(self.dim());
        self.operator_into(theta, obs, &mut out);
        out
    }

    /// Closed-form `ḡ(θ)`.
    fn expected_operator(&self, theta: &Vector) -> Vector;

    /// `(c_o, B_o)` with `g(θ, o) = c_o − B_o θ`.
    fn affine_parts(&self, obs: Observation) -> (Vector, Matrix);

    fn theta_star(&self) -> &Vector;

    fn constants(&self) -> ProblemConstants;

    fn theta0(&self) -> Vector {
        Vector::zeros(self.dim())
    }
}

/// `Σ_{s,s'} π(s) P(s,s') g(θ, (s, s'))`, evaluated by exhaustive enumeration.
pub fn enumerate_expected_operator<P: SaProblem + ?Sized>(problem: &P, theta: &Vector) -> Vector {
    let chain = problem.chain();
    let n = chain.n_states();
    let mut total = Vector::zeros(problem.dim());
    for s in 0..n {
        for s2 in 0..n {
            let w = chain.stationary()[s] * chain.transition()[(s, s2)];
            if w > 0.0 {
                total += problem.operator(theta, Observation::new(s, s2)) * w;
            }
        }
    }
    total
}

/// TD(0) with linear function approximation over a policy-induced chain.
#[derive(Clone, Debug)]
pub struct TdProblem {
    chain: FiniteMarkovChain,
    features: Matrix,
    feature_rows: Vec<Vec<f64>>,
    rewards: Vector,
    gamma: f64,
    seed: Option<u64>,
    a_matrix: Matrix,
    b_vector: Vector,
    theta_star: Vector,
    constants: ProblemConstants,
}

/// Self-loop weight mixed into every generated transition row.
pub const TD_SELF_LOOP_FLOOR: f64 = 0.1;
const RANK_ATTEMPTS: u64 = 5;

impl TdProblem {
    /// Random ergodic chain, orthonormal random features and rewards uniform
    /// in `[0, 1]`; deterministic given `seed`.
    pub fn build(n_states: usize, n_features: usize, gamma: f64, seed: u64) -> Result<Self> {
        if n_features == 0 || n_features > n_states {
            return Err(Error::invalid(format!(
                "need 1 <= features ({n_features}) <= states ({n_states})"
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("discount must lie in (0, 1), got {gamma}")));
        }
        let chain = FiniteMarkovChain::random_ergodic(n_states, TD_SELF_LOOP_FLOOR, seed::derive(seed, 0))?;
        let features = (0..RANK_ATTEMPTS)
            .map(|attempt| orthonormal_features(n_states, n_features, seed::derive(seed, 1 + attempt)))
            .find(|phi| smallest_singular_value(phi) > 1e-8)
            .ok_or_else(|| {
                Error::ProblemConstruction(format!(
                    "feature matrix rank deficient after {RANK_ATTEMPTS} attempts"
                ))
            })?;
        let mut rng = seed::rng(seed::derive(seed, 100));
        let rewards = Vector::from_fn(n_states, |_, _| rng.random::<f64>());
        let mut problem = Self::from_parts(chain, features, rewards, gamma)?;
        problem.seed = Some(seed);
        Ok(problem)
    }

    /// Assembles a problem from explicit parts (e.g. `Φ = I`).
    pub fn from_parts(
        chain: FiniteMarkovChain,
        features: Matrix,
        rewards: Vector,
        gamma: f64,
    ) -> Result<Self> {
        let n = chain.n_states();
        if features.nrows() != n || rewards.len() != n {
            return Err(Error::invalid(format!(
                "features are {}x{}, rewards {}, chain has {n} states",
                features.nrows(),
                features.ncols(),
                rewards.len()
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("discount must lie in [0, 1), got {gamma}")));
        }
        if smallest_singular_value(&features) <= 1e-8 {
            return Err(Error::ProblemConstruction("features are not full column rank".into()));
        }
        let d = Matrix::from_diagonal(chain.stationary());
        let identity = Matrix::identity(n, n);
        let a_matrix = features.transpose() * &d * (identity - chain.transition() * gamma) * &features;
        let b_vector = features.transpose() * &d * &rewards;
        let theta_star = a_matrix
            .clone()
            .lu()
            .solve(&b_vector)
            .ok_or_else(|| Error::ProblemConstruction("A is singular".into()))?;
        let residual = (&a_matrix * &theta_star - &b_vector).norm();
        if residual > 1e-8 {
            return Err(Error::ProblemConstruction(format!("A θ* − b residual {residual:e}")));
        }
        let gram = features.transpose() * &d * &features;
        let omega = SymmetricEigen::new(gram).eigenvalues.min();
        if !(omega > 0.0) {
            return Err(Error::ProblemConstruction(format!("λ_min(ΦᵀDΦ) = {omega}")));
        }
        let feature_rows: Vec<Vec<f64>> = (0..n)
            .map(|s| features.row(s).iter().copied().collect())
            .collect();
        let row_norms: Vec<f64> = (0..n).map(|s| features.row(s).norm()).collect();
        let mut l = 1.0f64;
        for s in 0..n {
            for s2 in 0..n {
                let diff = (features.row(s) - features.row(s2) * gamma).norm();
                l = l.max(row_norms[s] * diff);
            }
        }
        let max_reward = rewards.amax();
        let max_row = row_norms.iter().copied().fold(0.0, f64::max);
        let sigma = 1.0f64
            .max(max_reward * max_row / l)
            .max(theta_star.norm());
        Ok(Self {
            chain,
            features,
            feature_rows,
            rewards,
            gamma,
            seed: None,
            a_matrix,
            b_vector,
            theta_star,
            constants: ProblemConstants {
                mu: (1.0 - gamma) * omega,
                l,
                sigma,
                omega,
            },
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn rewards(&self) -> &Vector {
        &self.rewards
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn a_matrix(&self) -> &Matrix {
        &self.a_matrix
    }

    pub fn b_vector(&self) -> &Vector {
        &self.b_vector
    }

    /// The TD(0) semi-gradient direction.
    pub fn td_operator(&self, theta: &Vector, obs: Observation) -> Vector {
        self.operator(theta, obs)
    }

    /// Recomputes `(mu, L, sigma, omega)`.
    pub fn estimate_constants(&self) -> ProblemConstants {
        self.constants
    }

    pub fn snapshot(&self) -> ProblemSnapshot {
        ProblemSnapshot::Td {
            n_states: self.chain.n_states(),
            n_features: self.features.ncols(),
            gamma: self.gamma,
            seed: self.seed,
            transition: rows_of(self.chain.transition()),
            features: rows_of(&self.features),
            rewards: self.rewards.iter().copied().collect(),
        }
    }
}

impl SaProblem for TdProblem {
    fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn chain(&self) -> &FiniteMarkovChain {
        &self.chain
    }

    fn operator_into(&self, theta: &Vector, obs: Observation, out: &mut Vector) {
        let phi = &self.feature_rows[obs.state];
        let phi_next = &self.feature_rows[obs.next_state];
        let mut v = 0.0;
        let mut v_next = 0.0;
        for ((a, b), t) in phi.iter().zip(phi_next).zip(theta.iter()) {
            v += a * t;
            v_next += b * t;
        }
        let td_error = self.rewards[obs.state] + self.gamma * v_next - v;
        for (o, a) in out.iter_mut().zip(phi) {
            *o = a * td_error;
        }
    }

    fn expected_operator(&self, theta: &Vector) -> Vector {
        &self.b_vector - &self.a_matrix * theta
    }

    fn affine_parts(&self, obs: Observation) -> (Vector, Matrix) {
        let phi = self.features.row(obs.state).transpose();
        let diff = (self.features.row(obs.state) - self.features.row(obs.next_state) * self.gamma)
            .transpose();
        (&phi * self.rewards[obs.state], &phi * diff.transpose())
    }

    fn theta_star(&self) -> &Vector {
        &self.theta_star
    }

    fn constants(&self) -> ProblemConstants {
        self.constants
    }
}

fn orthonormal_features(n: usize, r: usize, seed: u64) -> Matrix {
    let mut rng = seed::rng(seed);
    let raw = Matrix::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng));
    raw.qr().q()
}

fn smallest_singular_value(m: &Matrix) -> f64 {
    m.clone().svd(false, false).singular_values.min()
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], key: &str) -> Result<Matrix> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::config(key, "rows must be non-empty and equally long"));
    }
    Ok(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// `g(θ, (s, s')) = b_s − A_s θ` with `E_π[A_s]` symmetric positive definite.
#[derive(Clone, Debug)]
pub struct LinearSaProblem {
    chain: FiniteMarkovChain,
    a_mats: Vec<Matrix>,
    b_vecs: Vec<Vector>,
    a_mean: Matrix,
    b_mean: Vector,
    theta_star: Vector,
    constants: ProblemConstants,
}

impl LinearSaProblem {
    pub fn new(chain: FiniteMarkovChain, a_mats: Vec<Matrix>, b_vecs: Vec<Vector>) -> Result<Self> {
        let n = chain.n_states();
        if a_mats.len() != n || b_vecs.len() != n {
            return Err(Error::invalid("need one (A, b) pair per chain state"));
        }
        let dim = b_vecs[0].len();
        if dim == 0
            || b_vecs.iter().any(|b| b.len() != dim)
            || a_mats.iter().any(|a| a.nrows() != dim || a.ncols() != dim)
        {
            return Err(Error::invalid("inconsistent operator dimensions"));
        }
        let pi = chain.stationary();
        let mut a_mean = Matrix::zeros(dim, dim);
        let mut b_mean = Vector::zeros(dim);
        for s in 0..n {
            a_mean += &a_mats[s] * pi[s];
            b_mean += &b_vecs[s] * pi[s];
        }
        if (&a_mean - a_mean.transpose()).amax() > 1e-12 {
            return Err(Error::ProblemConstruction("E[A] is not symmetric".into()));
        }
        let mu = SymmetricEigen::new(a_mean.clone()).eigenvalues.min();
        if !(mu > 0.0) {
            return Err(Error::ProblemConstruction(format!("λ_min(E[A]) = {mu}")));
        }
        let theta_star = a_mean
            .clone()
            .lu()
            .solve(&b_mean)
            .ok_or_else(|| Error::ProblemConstruction("E[A] is singular".into()))?;
        let l = a_mats
            .iter()
            .map(|a| a.clone().svd(false, false).singular_values.max())
            .fold(1.0, f64::max);
        let max_b = b_vecs.iter().map(|b| b.norm()).fold(0.0, f64::max);
        let sigma = 1.0f64.max(max_b / l).max(theta_star.norm());
        Ok(Self {
            chain,
            a_mats,
            b_vecs,
            a_mean,
            b_mean,
            theta_star,
            constants: ProblemConstants {
                mu,
                l,
                sigma,
                omega: mu,
            },
        })
    }

    /// Observations drawn i.i.d. with the given weights (every row of `P`
    /// equals `weights`).
    pub fn iid(weights: &[f64], a_mats: Vec<Matrix>, b_vecs: Vec<Vector>) -> Result<Self> {
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        let p = Matrix::from_fn(n, n, |_, j| weights[j] / total);
        Self::new(FiniteMarkovChain::new(p)?, a_mats, b_vecs)
    }

    /// One-dimensional instance `g(θ, o) = b_o − a θ`, equally likely `b_o`.
    pub fn scalar(a: f64, b_values: &[f64]) -> Result<Self> {
        let weights = vec![1.0; b_values.len()];
        let a_mats = vec![Matrix::from_element(1, 1, a); b_values.len()];
        let b_vecs = b_values.iter().map(|&b| Vector::from_element(1, b)).collect();
        Self::iid(&weights, a_mats, b_vecs)
    }

    /// Random instance with 3 to 5 observations and i.i.d. sampling.
    pub fn build(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        let mut rng = seed::rng(seed);
        let n_obs: usize = rng.random_range(3..=5);
        let weights: Vec<f64> = (0..n_obs).map(|_| rng.random_range(0.5..1.5)).collect();
        let mut a_mats = Vec::with_capacity(n_obs);
        let mut b_vecs = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            let g = Matrix::from_fn(dim, dim, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * z
            });
            let a = &g * g.transpose() / dim as f64 + Matrix::identity(dim, dim) * 0.5;
            a_mats.push((&a + a.transpose()) * 0.5);
            b_vecs.push(Vector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng)));
        }
        Self::iid(&weights, a_mats, b_vecs)
    }

    pub fn a_mean(&self) -> &Matrix {
        &self.a_mean
    }

    pub fn b_mean(&self) -> &Vector {
        &self.b_mean
    }
}

impl SaProblem for LinearSaProblem {
    fn dim(&self) -> usize {
        self.b_mean.len()
    }

    fn chain(&self) -> &FiniteMarkovChain {
        &self.chain
    }

    fn operator_into(&self, theta: &Vector, obs: Observation, out: &mut Vector) {
        out.copy_from(&self.b_vecs[obs.state]);
        out.gemv(-1.0, &self.a_mats[obs.state], theta, 1.0);
    }

    fn expected_operator(&self, theta: &Vector) -> Vector {
        &self.b_mean - &self.a_mean * theta
    }

    fn affine_parts(&self, obs: Observation) -> (Vector, Matrix) {
        (self.b_vecs[obs.state].clone(), self.a_mats[obs.state].clone())
    }

    fn theta_star(&self) -> &Vector {
        &self.theta_star
    }

    fn constants(&self) -> ProblemConstants {
        self.constants
    }
}

/// Serialisable description sufficient to rebuild a problem exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSnapshot {
    Td {
        n_states: usize,
        n_features: usize,
        gamma: f64,
        seed: Option<u64>,
        transition: Vec<Vec<f64>>,
        features: Vec<Vec<f64>>,
        rewards: Vec<f64>,
    },
    Linear {
        transition: Vec<Vec<f64>>,
        a: Vec<Vec<Vec<f64>>>,
        b: Vec<Vec<f64>>,
    },
}

impl ProblemSnapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            row: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn restore(&self) -> Result<Problem> {
        match self {
            ProblemSnapshot::Td {
                gamma,
                seed,
                transition,
                features,
                rewards,
                ..
            } => {
                let chain = FiniteMarkovChain::new(matrix_from_rows(transition, "transition")?)?;
                let mut p = TdProblem::from_parts(
                    chain,
                    matrix_from_rows(features, "features")?,
                    Vector::from_column_slice(rewards),
                    *gamma,
                )?;
                p.seed = *seed;
                Ok(Problem::Td(p))
            }
            ProblemSnapshot::Linear { transition, a, b } => {
                let chain = FiniteMarkovChain::new(matrix_from_rows(transition, "transition")?)?;
                let a_mats = a
                    .iter()
                    .map(|m| matrix_from_rows(m, "a"))
                    .collect::<Result<Vec<_>>>()?;
                let b_vecs = b.iter().map(|v| Vector::from_column_slice(v)).collect();
                Ok(Problem::Linear(LinearSaProblem::new(chain, a_mats, b_vecs)?))
            }
        }
    }
}

/// Either problem family, for configuration-driven runs.
#[derive(Clone, Debug)]
pub enum Problem {
    Td(TdProblem),
    Linear(LinearSaProblem),
}

impl Problem {
    pub fn snapshot(&self) -> ProblemSnapshot {
        match self {
            Problem::Td(p) => p.snapshot(),
            Problem::Linear(p) => ProblemSnapshot::Linear {
                transition: rows_of(p.chain.transition()),
                a: p.a_mats.iter().map(rows_of).collect(),
                b: p.b_vecs.iter().map(|v| v.iter().copied().collect()).collect(),
            },
        }
    }

    fn inner(&self) -> &dyn SaProblem {
        match self {
            Problem::Td(p) => p,
            Problem::Linear(p) => p,
        }
    }
}

impl SaProblem for Problem {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn chain(&self) -> &FiniteMarkovChain {
        self.inner().chain()
    }

    fn operator_into(&self, theta: &Vector, obs: Observation, out: &mut Vector) {
        match self {
            Problem::Td(p) => p.operator_into(theta, obs, out),
            Problem::Linear(p) => p.operator_into(theta, obs, out),
        }
    }

    fn expected_operator(&self, theta: &Vector) -> Vector {
        self.inner().expected_operator(theta)
    }

    fn affine_parts(&self, obs: Observation) -> (Vector, Matrix) {
        self.inner().affine_parts(obs)
    }

    fn theta_star(&self) -> &Vector {
        self.inner().theta_star()
    }

    fn constants(&self) -> ProblemConstants {
        self.inner().constants()
    }
}

/// Worst observed values of each assumption check over random samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub samples: usize,
    /// max of `⟨θ−θ*, ḡ(θ)−ḡ(θ*)⟩ + μ‖θ−θ*‖²`; must be `<= 1e-10`.
    pub monotonicity_slack: f64,
    /// max of `‖g(θ₁,o) − g(θ₂,o)‖ / (L‖θ₁−θ₂‖)`; must be `<= 1`.
    pub lipschitz_ratio: f64,
    /// max of `‖g(θ,o)‖ / (L(‖θ‖ + σ))`; must be `<= 1`.
    pub growth_ratio: f64,
    /// `‖ḡ(θ*)‖`; must be `<= 1e-8`.
    pub fixed_point_residual: f64,
    pub sigma_ok: bool,
}

pub const MONOTONICITY_SLACK_TOL: f64 = 1e-10;
pub const FIXED_POINT_TOL: f64 = 1e-8;
const RATIO_TOL: f64 = 1e-12;

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.monotonicity_slack <= MONOTONICITY_SLACK_TOL
            && self.lipschitz_ratio <= 1.0 + RATIO_TOL
            && self.growth_ratio <= 1.0 + RATIO_TOL
            && self.fixed_point_residual <= FIXED_POINT_TOL
            && self.sigma_ok
    }
}

/// Samples strong monotonicity, the Lipschitz bound and the growth bound.
pub fn check_assumptions<P: SaProblem + ?Sized>(
    problem: &P,
    samples: usize,
    seed: u64,
) -> AssumptionReport {
    let dim = problem.dim();
    let n = problem.chain().n_states();
    let c = problem.constants();
    let star = problem.theta_star();
    let g_star = problem.expected_operator(star);
    let scale = 1.0 + star.norm();
    let mut rng = seed::rng(seed);
    let random_theta = |rng: &mut rand_chacha::ChaCha8Rng| {
        let radius = rng.random_range(0.0..10.0) * scale;
        let dir = Vector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let norm = dir.norm().max(f64::MIN_POSITIVE);
        dir * (radius / norm)
    };
    let mut report = AssumptionReport {
        samples,
        monotonicity_slack: f64::NEG_INFINITY,
        lipschitz_ratio: 0.0,
        growth_ratio: 0.0,
        fixed_point_residual: g_star.norm(),
        sigma_ok: c.sigma >= 1.0 && c.sigma >= star.norm() && c.sigma >= problem.theta0().norm(),
    };
    for _ in 0..samples {
        let theta = star + random_theta(&mut rng);
        let diff = &theta - star;
        let inner = diff.dot(&(problem.expected_operator(&theta) - &g_star));
        report.monotonicity_slack = report.monotonicity_slack.max(inner + c.mu * diff.norm_squared());

        let obs = Observation::new(rng.random_range(0..n), rng.random_range(0..n));
        let other = random_theta(&mut rng);
        let gap = (problem.operator(&theta, obs) - problem.operator(&other, obs)).norm();
        let dist = (&theta - &other).norm();
        if dist > 0.0 {
            report.lipschitz_ratio = report.lipschitz_ratio.max(gap / (c.l * dist));
        }
        let g = problem.operator(&other, obs).norm();
        report.growth_ratio = report.growth_ratio.max(g / (c.l * (other.norm() + c.sigma)));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_features_problem(p: &[f64], r: &[f64], gamma: f64) -> TdProblem {
        let chain = FiniteMarkovChain::new(Matrix::from_row_slice(2, 2, p)).unwrap();
        TdProblem::from_parts(chain, Matrix::identity(2, 2), Vector::from_column_slice(r), gamma)
            .unwrap()
    }

    #[test]
    fn identity_features_recover_value_function() {
        // P = [[0.7, 0.3], [0.4, 0.6]], r = (1, 2), γ = 0.5.
        // V = r + γ P V  ⇒  (I − γP) V = r:
        //   0.65 V0 − 0.15 V1 = 1
        //  −0.20 V0 + 0.70 V1 = 2
        // det = 0.455 − 0.03 = 0.425; V0 = (0.7 + 0.3)/0.425, V1 = (1.3 + 0.2)/0.425.
        let prob = identity_features_problem(&[0.7, 0.3, 0.4, 0.6], &[1.0, 2.0], 0.5);
        let v0 = 1.0 / 0.425;
        let v1 = 1.5 / 0.425;
        assert!((prob.theta_star()[0] - v0).abs() < 1e-12);
        assert!((prob.theta_star()[1] - v1).abs() < 1e-12);
    }

    #[test]
    fn no_bootstrapping_gives_rewards() {
        let prob = identity_features_problem(&[0.7, 0.3, 0.4, 0.6], &[0.25, -1.0], 0.0);
        assert!((prob.theta_star()[0] - 0.25).abs() < 1e-14);
        assert!((prob.theta_star()[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn uniform_two_state_constants() {
        let prob = identity_features_problem(&[0.5, 0.5, 0.5, 0.5], &[1.0, 0.0], 0.5);
        let c = prob.estimate_constants();
        assert!((c.omega - 0.5).abs() < 1e-12);
        assert!((c.mu - 0.25).abs() < 1e-12);
    }

    #[test]
    fn thirty_state_instance_passes_gate() {
        let prob = TdProblem::build(30, 10, 0.5, 7).unwrap();
        assert_eq!(prob.dim(), 10);
        let report = check_assumptions(&prob, 1000, 1);
        assert!(report.passed(), "{report:?}");
        let ftf = prob.features().transpose() * prob.features();
        assert!((ftf - Matrix::identity(10, 10)).amax() < 1e-12);
    }

    #[test]
    fn operator_at_fixed_point_averages_to_zero() {
        let prob = TdProblem::build(10, 4, 0.5, 3).unwrap();
        let mean = enumerate_expected_operator(&prob, prob.theta_star());
        assert!(mean.norm() < 1e-8);
    }

    #[test]
    fn identity_features_direction_is_one_hot() {
        let prob = identity_features_problem(&[0.7, 0.3, 0.4, 0.6], &[1.0, 2.0], 0.5);
        let theta = Vector::from_column_slice(&[0.3, -0.2]);
        for s in 0..2 {
            let g = prob.td_operator(&theta, Observation::new(s, 1 - s));
            assert_ne!(g[s], 0.0);
            assert_eq!(g[1 - s], 0.0);
        }
    }

    #[test]
    fn operator_matches_scalar_evaluation() {
        let prob = TdProblem::build(12, 5, 0.5, 21).unwrap();
        let mut rng = seed::rng(4);
        for _ in 0..50 {
            let theta = Vector::from_fn(5, |_, _| rng.random_range(-3.0..3.0));
            let obs = Observation::new(rng.random_range(0..12), rng.random_range(0..12));
            let phi = prob.features();
            let mut vs = 0.0;
            let mut vn = 0.0;
            for j in 0..5 {
                vs += phi[(obs.state, j)] * theta[j];
                vn += phi[(obs.next_state, j)] * theta[j];
            }
            let delta = prob.rewards()[obs.state] + 0.5 * vn - vs;
            let g = prob.td_operator(&theta, obs);
            for j in 0..5 {
                assert!((g[j] - phi[(obs.state, j)] * delta).abs() < 1e-14);
            }
            let (c, b) = prob.affine_parts(obs);
            assert!((c - &b * &theta - &g).norm() < 1e-13);
        }
    }

    #[test]
    fn expected_operator_closed_form() {
        let prob = TdProblem::build(5, 3, 0.5, 8).unwrap();
        assert!(prob.expected_operator(prob.theta_star()).norm() < 1e-12);
        assert_eq!(prob.expected_operator(&Vector::zeros(3)), *prob.b_vector());
        let mut rng = seed::rng(9);
        for _ in 0..20 {
            let theta = Vector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            let closed = prob.expected_operator(&theta);
            let enumerated = enumerate_expected_operator(&prob, &theta);
            assert!((closed - enumerated).amax() <= 1e-10);
        }
    }

    #[test]
    fn builds_are_deterministic() {
        let a = TdProblem::build(8, 3, 0.5, 5).unwrap();
        let b = TdProblem::build(8, 3, 0.5, 5).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        assert_ne!(a.snapshot(), TdProblem::build(8, 3, 0.5, 6).unwrap().snapshot());
        assert!(TdProblem::build(3, 4, 0.5, 1).is_err());
        assert!(TdProblem::build(3, 2, 1.0, 1).is_err());
    }

    #[test]
    fn snapshot_round_trips_exactly() {
        let prob = TdProblem::build(9, 4, 0.5, 12).unwrap();
        let snap = prob.snapshot();
        let back = ProblemSnapshot::from_json(&snap.to_json()).unwrap();
        assert_eq!(snap, back);
        let restored = back.restore().unwrap();
        assert_eq!(restored.theta_star(), prob.theta_star());
        assert_eq!(restored.constants(), prob.constants());
    }

    #[test]
    fn scalar_linear_instance() {
        let p = LinearSaProblem::scalar(1.0, &[0.5, 1.5]).unwrap();
        assert!((p.theta_star()[0] - 1.0).abs() < 1e-12);
        assert!((p.constants().mu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_linear_instance_solves() {
        let p = LinearSaProblem::build(2, 17).unwrap();
        let direct = p.a_mean().clone().lu().solve(p.b_mean()).unwrap();
        assert!((direct - p.theta_star()).norm() < 1e-12);
        assert!(check_assumptions(&p, 500, 2).passed());
        let restored = Problem::Linear(p.clone()).snapshot().restore().unwrap();
        assert_eq!(restored.theta_star(), p.theta_star());
    }

    #[test]
    fn zero_noise_linear_recursion_is_monotone() {
        let p = LinearSaProblem::scalar(1.0, &[2.0, 2.0, 2.0]).unwrap();
        let alpha = 0.3;
        let mut theta = Vector::zeros(1);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let g = p.operator(&theta, Observation::new(0, 0));
            theta += g * alpha;
            let err = (&theta - p.theta_star()).norm();
            assert!(err < last);
            last = err;
        }
    }
}
