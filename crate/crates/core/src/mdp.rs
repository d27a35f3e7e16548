//! Exact tabular MDPs, policies and value tables.
//!
//! All matrices over state-action pairs use the flattened index
//! `x * num_actions + a`. The transition kernel of a policy is
//! `P^pi((x, a), (y, b)) = p(y | x, a) * pi(b | y)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Uniform};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, sum_abs, ResolventSolver};
use crate::rng;

const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Discount used by the random-MDP generator.
pub const DEFAULT_DISCOUNT: f64 = 0.9;

/// Finite MDP with deterministic rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct Mdp {
    num_states: usize,
    num_actions: usize,
    /// `p(y | x, a)` stored at `(x * num_actions + a) * num_states + y`.
    transition: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
}

impl Mdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidArgument(
                "an MDP needs at least one state and one action".into(),
            ));
        }
        let pairs = num_states * num_actions;
        if transition.len() != pairs * num_states {
            return Err(Error::DimensionMismatch(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                pairs * num_states
            )));
        }
        if reward.len() != pairs {
            return Err(Error::DimensionMismatch(format!(
                "reward has {} entries, expected {}",
                reward.len(),
                pairs
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie in [0, 1), got {discount}"
            )));
        }
        for (pair, row) in transition.chunks(num_states).enumerate() {
            check_distribution(row, || format!("transition row of pair {pair}"))?;
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite reward {r}")));
        }
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            discount,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn index(&self, state: usize, action: usize) -> usize {
        state * self.num_actions + action
    }

    pub fn transition_prob(&self, state: usize, action: usize, next: usize) -> f64 {
        self.transition[self.index(state, action) * self.num_states + next]
    }

    /// Next-state distribution `p(. | x, a)`.
    pub fn next_state_dist(&self, state: usize, action: usize) -> &[f64] {
        let start = self.index(state, action) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.reward[self.index(state, action)]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn reward_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.reward)
    }

    /// `max_{x,a} |r(x, a)|`.
    pub fn r_max(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Same dynamics with a different reward table.
    pub fn with_rewards(&self, reward: Vec<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            reward,
            self.discount,
        )
    }

    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie in [0, 1), got {discount}"
            )));
        }
        self.discount = discount;
        Ok(self)
    }

    /// Radius `(1 - gamma) / gamma` of the Taylor expansion in `||pi - mu||_1`.
    pub fn convergence_radius(&self) -> f64 {
        convergence_radius(self.discount)
    }

    pub fn check_state(&self, state: usize) -> Result<()> {
        if state >= self.num_states {
            return Err(Error::InvalidArgument(format!(
                "state {state} out of range for {} states",
                self.num_states
            )));
        }
        Ok(())
    }

    pub(crate) fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.num_states(),
                policy.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }
}

pub fn convergence_radius(gamma: f64) -> f64 {
    if gamma == 0.0 {
        f64::INFINITY
    } else {
        (1.0 - gamma) / gamma
    }
}

fn check_distribution(row: &[f64], what: impl Fn() -> String) -> Result<()> {
    if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidDistribution(format!(
            "{} has a negative or non-finite entry",
            what()
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!(
            "{} sums to {sum}",
            what()
        )));
    }
    Ok(())
}

/// Per-state action distribution `pi(a | x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidArgument("empty policy".into()));
        }
        if probs.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                num_states * num_actions
            )));
        }
        for (x, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row, || format!("policy row of state {x}"))?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    /// Dirac policy choosing `actions[x]` in state `x`.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (x, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::InvalidArgument(format!("action {a} out of range")));
            }
            probs[x * num_actions + a] = 1.0;
        }
        Self::new(actions.len(), num_actions, probs)
    }

    /// Rows sampled independently from a symmetric Dirichlet distribution.
    pub fn random<R: Rng + ?Sized>(
        num_states: usize,
        num_actions: usize,
        concentration: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut probs = Vec::with_capacity(num_states * num_actions);
        for _ in 0..num_states {
            probs.extend(sample_dirichlet(num_actions, concentration, rng)?);
        }
        Self::new(num_states, num_actions, probs)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.num_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.probs)
    }

    /// Errors with the first `(x, a)` where the policy puts zero mass.
    pub fn check_strictly_positive(&self) -> Result<()> {
        match self.probs.iter().position(|&p| p <= 0.0) {
            Some(i) => Err(Error::ZeroBehaviorProbability {
                state: i / self.num_actions,
                action: i % self.num_actions,
            }),
            None => Ok(()),
        }
    }

    /// Joint start distribution `pi_0(x, a) = pi(a | x) [x = start]`.
    pub fn start_vector(&self, start: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.num_states * self.num_actions);
        for a in 0..self.num_actions {
            v[start * self.num_actions + a] = self.prob(start, a);
        }
        v
    }

    /// Importance ratios `pi(a|x) / mu(a|x)` over all pairs.
    pub fn ratios(&self, behavior: &TabularPolicy) -> Result<DVector<f64>> {
        same_shape(self, behavior)?;
        behavior.check_strictly_positive()?;
        Ok(DVector::from_iterator(
            self.probs.len(),
            self.probs.iter().zip(&behavior.probs).map(|(p, m)| p / m),
        ))
    }
}

fn same_shape(p: &TabularPolicy, q: &TabularPolicy) -> Result<()> {
    if p.num_states != q.num_states || p.num_actions != q.num_actions {
        return Err(Error::DimensionMismatch(format!(
            "policies are {}x{} and {}x{}",
            p.num_states, p.num_actions, q.num_states, q.num_actions
        )));
    }
    Ok(())
}

/// Value table indexed by state-action pair.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    num_actions: usize,
    values: DVector<f64>,
}

impl QTable {
    pub fn new(num_actions: usize, values: DVector<f64>) -> Self {
        assert!(num_actions > 0 && values.len().is_multiple_of(num_actions));
        Self {
            num_actions,
            values,
        }
    }

    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self::new(num_actions, DVector::zeros(num_states * num_actions))
    }

    /// `Q(x, a) = v(x)` for every action.
    pub fn broadcast(v: &VTable, num_actions: usize) -> Self {
        let n = v.len();
        Self::new(
            num_actions,
            DVector::from_fn(n * num_actions, |i, _| v.get(i / num_actions)),
        )
    }

    pub fn num_states(&self) -> usize {
        self.values.len() / self.num_actions
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.num_actions + action]
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    /// `max_{x,a} |Q(x, a)|`.
    pub fn norm_inf(&self) -> f64 {
        max_abs(&self.values)
    }

    /// Sum of absolute entries.
    pub fn norm_l1(&self) -> f64 {
        sum_abs(&self.values)
    }

    pub fn sub(&self, other: &QTable) -> QTable {
        QTable::new(self.num_actions, &self.values - &other.values)
    }

    pub fn add(&self, other: &QTable) -> QTable {
        QTable::new(self.num_actions, &self.values + &other.values)
    }

    /// `V(x) = sum_a pi(a|x) Q(x, a)`.
    pub fn state_values(&self, policy: &TabularPolicy) -> VTable {
        let s = self.num_states();
        VTable::new(DVector::from_fn(s, |x, _| {
            (0..self.num_actions)
                .map(|a| policy.prob(x, a) * self.get(x, a))
                .sum()
        }))
    }
}

/// Value table indexed by state.
#[derive(Clone, Debug, PartialEq)]
pub struct VTable {
    values: DVector<f64>,
}

impl VTable {
    pub fn new(values: DVector<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(num_states: usize) -> Self {
        Self::new(DVector::zeros(num_states))
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self::new(DVector::from_vec(values))
    }

    pub fn get(&self, state: usize) -> f64 {
        self.values[state]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }
}

/// Dense `P^pi` over state-action pairs.
pub fn transition_kernel(mdp: &Mdp, policy: &TabularPolicy) -> Result<DMatrix<f64>> {
    mdp.check_policy(policy)?;
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let n = ns * na;
    let mut p = DMatrix::zeros(n, n);
    for row in 0..n {
        let next = &mdp.transition[row * ns..(row + 1) * ns];
        for (y, &pxy) in next.iter().enumerate() {
            if pxy == 0.0 {
                continue;
            }
            for b in 0..na {
                p[(row, y * na + b)] = pxy * policy.prob(y, b);
            }
        }
    }
    Ok(p)
}

/// `P^{c mu}((x,a),(y,b)) = p(y|x,a) * weights(y,b)` for arbitrary
/// per-pair weights, used for sub-stochastic trace kernels.
pub fn weighted_kernel(mdp: &Mdp, weights: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let n = ns * na;
    if weights.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "weights have {} entries, expected {n}",
            weights.len()
        )));
    }
    Ok(DMatrix::from_fn(n, n, |row, col| {
        mdp.transition[row * ns + col / na] * weights[col]
    }))
}

/// State-to-state next distribution matrix `Phi((x,a), y) = p(y|x,a)`.
pub fn next_state_matrix(mdp: &Mdp) -> DMatrix<f64> {
    let ns = mdp.num_states;
    DMatrix::from_fn(mdp.num_pairs(), ns, |row, y| mdp.transition[row * ns + y])
}

/// `Q^pi = (I - gamma P^pi)^{-1} R`.
pub fn exact_q(mdp: &Mdp, policy: &TabularPolicy) -> Result<QTable> {
    exact_q_with_rewards(mdp, policy, &mdp.reward_vector())
}

/// `(I - gamma P^pi)^{-1} R` for an arbitrary reward vector (e.g. an
/// empirical estimate).
pub fn exact_q_with_rewards(
    mdp: &Mdp,
    policy: &TabularPolicy,
    reward: &DVector<f64>,
) -> Result<QTable> {
    let p = transition_kernel(mdp, policy)?;
    let solver = ResolventSolver::new(&p, mdp.discount)?;
    Ok(QTable::new(mdp.num_actions, solver.solve(reward)?))
}

pub fn exact_v(mdp: &Mdp, policy: &TabularPolicy) -> Result<VTable> {
    Ok(exact_q(mdp, policy)?.state_values(policy))
}

/// `A^pi = Q^pi - V^pi`.
pub fn advantage(mdp: &Mdp, policy: &TabularPolicy) -> Result<QTable> {
    let q = exact_q(mdp, policy)?;
    let v = q.state_values(policy);
    Ok(q.sub(&QTable::broadcast(&v, mdp.num_actions)))
}

/// `max_x sum_a |p(a|x) - q(a|x)|`.
pub fn policy_l1_distance(p: &TabularPolicy, q: &TabularPolicy) -> Result<f64> {
    same_shape(p, q)?;
    Ok((0..p.num_states)
        .map(|x| {
            p.row(x)
                .iter()
                .zip(q.row(x))
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max))
}

/// Symmetric Dirichlet sample via normalized Gamma draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(
    dim: usize,
    concentration: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if dim == 0 || !(concentration > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Dirichlet needs dim >= 1 and positive concentration, got dim {dim}, concentration {concentration}"
        )));
    }
    if dim == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("gamma distribution: {e}")))?;
    loop {
        let mut draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            draws.iter_mut().for_each(|d| *d /= total);
            return Ok(draws);
        }
    }
}

/// Random MDP: Dirichlet transitions per pair, rewards uniform on `[-1, 1]`,
/// discount [`DEFAULT_DISCOUNT`].
pub fn random_mdp(
    num_states: usize,
    num_actions: usize,
    dirichlet_concentration: f64,
    seed: u64,
) -> Result<Mdp> {
    if num_states == 0 || num_actions == 0 {
        return Err(Error::InvalidArgument(
            "random MDP needs at least one state and one action".into(),
        ));
    }
    let mut rng = rng::seeded(seed);
    let pairs = num_states * num_actions;
    let mut transition = Vec::with_capacity(pairs * num_states);
    for _ in 0..pairs {
        transition.extend(sample_dirichlet(
            num_states,
            dirichlet_concentration,
            &mut rng,
        )?);
    }
    let uniform = Uniform::new_inclusive(-1.0, 1.0)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let reward = (0..pairs).map(|_| uniform.sample(&mut rng)).collect();
    Mdp::new(
        num_states,
        num_actions,
        transition,
        reward,
        DEFAULT_DISCOUNT,
    )
}

/// Behavior policy in the l1 vicinity of `base`.
///
/// Each state row is mixed toward a Dirichlet(1) draw `u`:
/// `mu(.|x) = (1 - beta_x) base(.|x) + beta_x u`, with
/// `beta_x = min(1, epsilon / ||u - base(.|x)||_1)`, so every row sits at l1
/// distance `min(epsilon, ||u - base||_1)` from the base row.
pub fn perturbed_policy(base: &TabularPolicy, epsilon: f64, seed: u64) -> Result<TabularPolicy> {
    if !(0.0..=2.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [0, 2], got {epsilon}"
        )));
    }
    if epsilon == 0.0 {
        return Ok(base.clone());
    }
    let mut rng = rng::seeded(seed);
    let na = base.num_actions;
    let mut probs = Vec::with_capacity(base.probs.len());
    for x in 0..base.num_states {
        let row = base.row(x);
        let u = sample_dirichlet(na, 1.0, &mut rng)?;
        let dist: f64 = row.iter().zip(&u).map(|(p, q)| (p - q).abs()).sum();
        let beta = if dist > 0.0 {
            (epsilon / dist).min(1.0)
        } else {
            0.0
        };
        probs.extend(row.iter().zip(&u).map(|(p, q)| (1.0 - beta) * p + beta * q));
    }
    TabularPolicy::new(base.num_states, na, probs)
}

/// `J(pi) = pi_0^T Q^pi = V^pi(x_0)`.
pub fn objective(mdp: &Mdp, policy: &TabularPolicy, start_state: usize) -> Result<f64> {
    mdp.check_state(start_state)?;
    let q = exact_q(mdp, policy)?;
    Ok(objective_from_q(&q, policy, start_state))
}

pub fn objective_from_q(q: &QTable, policy: &TabularPolicy, start_state: usize) -> f64 {
    (0..q.num_actions())
        .map(|a| policy.prob(start_state, a) * q.get(start_state, a))
        .sum()
}

/// Normalized discounted visitation distribution over pairs, starting from
/// `(x_0, a_0)`.
///
/// `tau = 0`: `d = (1 - gamma) sum_{t>=0} gamma^t e^T (P^pi)^t`.
/// `tau = 1`: `d = (1 - gamma) sum_{t>=1} gamma^{t-1} e^T (P^pi)^t`, the
/// distribution of the pair reached after a delay of at least one step.
pub fn discounted_visitation(
    mdp: &Mdp,
    policy: &TabularPolicy,
    start: (usize, usize),
    tau: u8,
) -> Result<DVector<f64>> {
    let (x0, a0) = start;
    mdp.check_state(x0)?;
    if a0 >= mdp.num_actions {
        return Err(Error::InvalidArgument(format!("action {a0} out of range")));
    }
    if tau > 1 {
        return Err(Error::InvalidArgument(format!("tau must be 0 or 1, got {tau}")));
    }
    let p = transition_kernel(mdp, policy)?;
    let solver = ResolventSolver::new(&p, mdp.discount)?;
    let mut e = DVector::zeros(mdp.num_pairs());
    e[mdp.index(x0, a0)] = 1.0;
    let rhs = if tau == 0 { e } else { p.transpose() * e };
    Ok(solver.solve_transpose(&rhs)? * (1.0 - mdp.discount))
}

/// Optimal control by value iteration; greedy ties go to the lowest action.
#[derive(Clone, Debug)]
pub struct OptimalSolution {
    pub values: VTable,
    pub policy: TabularPolicy,
    pub iterations: usize,
}

pub fn value_iteration(mdp: &Mdp, tolerance: f64, max_iterations: usize) -> Result<OptimalSolution> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let gamma = mdp.discount;
    let backup = |v: &[f64], x: usize, a: usize| {
        mdp.reward(x, a)
            + gamma
                * mdp
                    .next_state_dist(x, a)
                    .iter()
                    .zip(v)
                    .map(|(p, v)| p * v)
                    .sum::<f64>()
    };
    let mut v = vec![0.0; ns];
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let next: Vec<f64> = (0..ns)
            .map(|x| {
                (0..na)
                    .map(|a| backup(&v, x, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let delta = next
            .iter()
            .zip(&v)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        if delta < tolerance {
            break;
        }
    }
    let actions: Vec<usize> = (0..ns)
        .map(|x| {
            let mut best = 0;
            let mut best_q = backup(&v, x, 0);
            for a in 1..na {
                let q = backup(&v, x, a);
                if q > best_q {
                    best = a;
                    best_q = q;
                }
            }
            best
        })
        .collect();
    Ok(OptimalSolution {
        values: VTable::from_vec(v),
        policy: TabularPolicy::deterministic(na, &actions)?,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_state(reward: Vec<f64>, gamma: f64) -> Mdp {
        let na = reward.len();
        Mdp::new(1, na, vec![1.0; na], reward, gamma).unwrap()
    }

    /// Two-state deterministic chain: action 0 stays, action 1 switches.
    fn switch_chain() -> Mdp {
        Mdp::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.5, -1.0],
            0.9,
        )
        .unwrap()
    }

    /// Policy evaluation by fixed-point iteration.
    fn iterate_q(mdp: &Mdp, policy: &TabularPolicy, iterations: usize) -> Vec<f64> {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let mut q = vec![0.0; ns * na];
        for _ in 0..iterations {
            let v: Vec<f64> = (0..ns)
                .map(|y| (0..na).map(|b| policy.prob(y, b) * q[y * na + b]).sum())
                .collect();
            q = (0..ns * na)
                .map(|i| {
                    let (x, a) = (i / na, i % na);
                    mdp.reward(x, a)
                        + mdp.discount()
                            * (0..ns)
                                .map(|y| mdp.transition_prob(x, a, y) * v[y])
                                .sum::<f64>()
                })
                .collect();
        }
        q
    }

    fn random_setup(seed: u64) -> (Mdp, TabularPolicy) {
        let mdp = random_mdp(10, 5, 1.0, seed).unwrap();
        let pi = TabularPolicy::random(10, 5, 1.0, &mut rng::seeded(seed + 100)).unwrap();
        (mdp, pi)
    }

    #[test]
    fn rejects_invalid_mdps() {
        assert!(Mdp::new(1, 1, vec![1.0], vec![0.0], 1.0).is_err());
        assert!(Mdp::new(1, 1, vec![0.9], vec![0.0], 0.5).is_err());
        assert!(Mdp::new(1, 1, vec![1.0], vec![f64::NAN], 0.5).is_err());
        assert!(Mdp::new(2, 1, vec![1.0], vec![0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn kernel_of_single_pair_is_one() {
        let mdp = one_state(vec![1.0], 0.9);
        let p = transition_kernel(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert_eq!(p, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn kernel_of_deterministic_chain_is_zero_one() {
        let mdp = switch_chain();
        let pi = TabularPolicy::deterministic(2, &[1, 0]).unwrap();
        let p = transition_kernel(&mdp, &pi).unwrap();
        // (0,0) -> state 0 -> action 1; (0,1) -> state 1 -> action 0, ...
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 0.0,
            ],
        );
        assert_eq!(p, expected);
    }

    #[test]
    fn kernel_matches_triple_loop() {
        let (mdp, pi) = random_setup(3);
        let p = transition_kernel(&mdp, &pi).unwrap();
        for i in 0..p.nrows() {
            assert!((p.row(i).sum() - 1.0).abs() < 1e-10);
        }
        for x in 0..10 {
            for a in 0..5 {
                for y in 0..10 {
                    for b in 0..5 {
                        let expected = mdp.transition_prob(x, a, y) * pi.prob(y, b);
                        assert_eq!(p[(x * 5 + a, y * 5 + b)], expected);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_rejects_shape_mismatch() {
        let mdp = switch_chain();
        assert!(transition_kernel(&mdp, &TabularPolicy::uniform(3, 2)).is_err());
    }

    #[test]
    fn exact_q_geometric_series() {
        let mdp = one_state(vec![1.0], 0.9);
        let q = exact_q(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((q.get(0, 0) - 10.0).abs() < 1e-12);

        let zero = random_mdp(4, 3, 1.0, 1).unwrap().with_rewards(vec![0.0; 12]).unwrap();
        let q = exact_q(&zero, &TabularPolicy::uniform(4, 3)).unwrap();
        assert_eq!(q.norm_inf(), 0.0);
    }

    #[test]
    fn exact_q_matches_value_iteration_oracle() {
        let (mdp, pi) = random_setup(11);
        let q = exact_q(&mdp, &pi).unwrap();
        let oracle = iterate_q(&mdp, &pi, 10_000);
        for (a, b) in q.values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_q_bellman_residual_and_norm_bound() {
        for seed in 0..5 {
            let (mdp, pi) = random_setup(seed);
            let q = exact_q(&mdp, &pi).unwrap();
            let p = transition_kernel(&mdp, &pi).unwrap();
            let residual = q.values() - (mdp.reward_vector() + &p * q.values() * mdp.discount());
            assert!(max_abs(&residual) < 1e-10);
            assert!(q.norm_inf() <= mdp.r_max() / (1.0 - mdp.discount()) + 1e-9);
        }
    }

    #[test]
    fn advantage_is_centered_and_matches_loop() {
        let (mdp, pi) = random_setup(5);
        let adv = advantage(&mdp, &pi).unwrap();
        let q = exact_q(&mdp, &pi).unwrap();
        for x in 0..10 {
            let v: f64 = (0..5).map(|a| pi.prob(x, a) * q.get(x, a)).sum();
            let centered: f64 = (0..5).map(|a| pi.prob(x, a) * adv.get(x, a)).sum();
            assert!(centered.abs() < 1e-10);
            for a in 0..5 {
                assert!((adv.get(x, a) - (q.get(x, a) - v)).abs() < 1e-12);
            }
        }
        let single = random_mdp(3, 1, 1.0, 2).unwrap();
        let adv = advantage(&single, &TabularPolicy::uniform(3, 1)).unwrap();
        assert!(adv.norm_inf() < 1e-12);
    }

    #[test]
    fn advantage_of_deterministic_policy() {
        let mdp = switch_chain();
        let pi = TabularPolicy::deterministic(2, &[1, 0]).unwrap();
        let adv = advantage(&mdp, &pi).unwrap();
        assert_eq!(adv.get(0, 1), 0.0);
        assert_eq!(adv.get(1, 0), 0.0);
        let q = exact_q(&mdp, &pi).unwrap();
        assert!((adv.get(0, 0) - (q.get(0, 0) - q.get(0, 1))).abs() < 1e-12);
    }

    #[test]
    fn l1_distance_examples() {
        let p = TabularPolicy::new(1, 2, vec![0.6, 0.4]).unwrap();
        let q = TabularPolicy::new(1, 2, vec![0.5, 0.5]).unwrap();
        assert!((policy_l1_distance(&p, &q).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(policy_l1_distance(&p, &p).unwrap(), 0.0);
        let d0 = TabularPolicy::deterministic(2, &[0]).unwrap();
        let d1 = TabularPolicy::deterministic(2, &[1]).unwrap();
        assert_eq!(policy_l1_distance(&d0, &d1).unwrap(), 2.0);
        assert!(policy_l1_distance(&p, &TabularPolicy::uniform(2, 2)).is_err());
    }

    #[test]
    fn random_mdp_is_deterministic_and_valid() {
        let a = random_mdp(10, 5, 1.0, 42).unwrap();
        let b = random_mdp(10, 5, 1.0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.discount(), 0.9);
        for pair in 0..50 {
            let row = &a.transition[pair * 10..(pair + 1) * 10];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(a.rewards().iter().all(|r| (-1.0..=1.0).contains(r)));
        let single = random_mdp(1, 3, 1.0, 0).unwrap();
        assert!(single.transition.iter().all(|&p| p == 1.0));
        assert!(random_mdp(0, 3, 1.0, 0).is_err());
        assert!(random_mdp(2, 3, 0.0, 0).is_err());
    }

    #[test]
    fn perturbed_policy_stays_in_ball() {
        let pi = TabularPolicy::random(10, 5, 1.0, &mut rng::seeded(9)).unwrap();
        assert_eq!(perturbed_policy(&pi, 0.0, 1).unwrap(), pi);
        let mu1 = perturbed_policy(&pi, 0.1, 1).unwrap();
        let mu2 = perturbed_policy(&pi, 0.1, 2).unwrap();
        assert_ne!(mu1, mu2);
        for mu in [&mu1, &mu2] {
            assert!(policy_l1_distance(&pi, mu).unwrap() <= 0.1 + 1e-12);
            mu.check_strictly_positive().unwrap();
        }
        assert!(perturbed_policy(&pi, 2.5, 1).is_err());
        assert!(perturbed_policy(&pi, -0.1, 1).is_err());
    }

    #[test]
    fn objective_examples() {
        let mdp = random_mdp(4, 3, 1.0, 8).unwrap().with_rewards(vec![0.5; 12]).unwrap();
        let pi = TabularPolicy::random(4, 3, 1.0, &mut rng::seeded(1)).unwrap();
        assert!((objective(&mdp, &pi, 2).unwrap() - 5.0).abs() < 1e-10);

        let bandit = one_state(vec![1.0, -1.0], 0.5);
        let pi = TabularPolicy::new(1, 2, vec![0.25, 0.75]).unwrap();
        let q = exact_q(&bandit, &pi).unwrap();
        let j = objective(&bandit, &pi, 0).unwrap();
        assert!((j - (0.25 * q.get(0, 0) + 0.75 * q.get(0, 1))).abs() < 1e-14);
        assert!(objective(&bandit, &pi, 1).is_err());
    }

    #[test]
    fn objective_equals_state_value() {
        let (mdp, pi) = random_setup(4);
        let v = exact_v(&mdp, &pi).unwrap();
        for x in 0..10 {
            assert!((objective(&mdp, &pi, x).unwrap() - v.get(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn visitation_matches_power_series() {
        let (mdp, pi) = random_setup(21);
        let p = transition_kernel(&mdp, &pi).unwrap();
        let gamma = mdp.discount();
        for tau in [0u8, 1] {
            let d = discounted_visitation(&mdp, &pi, (3, 2), tau).unwrap();
            // truncated power series with gamma^T < 1e-12
            let mut row = DVector::zeros(50);
            row[3 * 5 + 2] = 1.0;
            if tau == 1 {
                row = p.transpose() * row;
            }
            let mut acc = DVector::zeros(50);
            let mut weight = 1.0 - gamma;
            for _ in 0..300 {
                acc += &row * weight;
                row = p.transpose() * row;
                weight *= gamma;
            }
            assert!((&d - acc).amax() < 1e-10);
            assert!((d.sum() - 1.0).abs() < 1e-10);
            assert!(d.iter().all(|&v| v >= -1e-14));
        }
    }

    #[test]
    fn visitation_limits() {
        let mdp = one_state(vec![0.3], 0.9);
        let d = discounted_visitation(&mdp, &TabularPolicy::uniform(1, 1), (0, 0), 0).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);

        let (mdp, pi) = random_setup(2);
        let mdp = mdp.with_discount(1e-9).unwrap();
        let d = discounted_visitation(&mdp, &pi, (1, 4), 0).unwrap();
        assert!(d[5 + 4] > 1.0 - 1e-8);
        assert!(discounted_visitation(&mdp, &pi, (1, 4), 2).is_err());
    }

    #[test]
    fn value_iteration_dominates_random_policies() {
        let mdp = random_mdp(5, 3, 1.0, 3).unwrap();
        let opt = value_iteration(&mdp, 1e-12, 10_000).unwrap();
        let j_opt = objective(&mdp, &opt.policy, 0).unwrap();
        assert!((j_opt - opt.values.get(0)).abs() < 1e-9);
        for seed in 0..20 {
            let pi = TabularPolicy::random(5, 3, 1.0, &mut rng::seeded(seed)).unwrap();
            assert!(objective(&mdp, &pi, 0).unwrap() <= j_opt + 1e-9);
        }
    }
}
