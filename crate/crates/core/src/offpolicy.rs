//! Return-based off-policy evaluation.
//!
//! The dense operator is `R_c Q = Q + (I - gamma P^{c mu})^{-1} (r + gamma P^pi Q - Q)`
//! where `P^{c mu}((x,a),(y,b)) = p(y|x,a) mu(b|y) c(y,b)`. With `c = 1` it is
//! affine, `R_1 Q = Q^mu + M Q`, so `K` applications to `Q^mu` reproduce the
//! order-`K` expansion. The sample-based part covers value-target recursions
//! along trajectories and V-trace.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, ResolventSolver};
use crate::mdp::{exact_q, transition_kernel, weighted_kernel, Mdp, QTable, TabularPolicy, VTable};
use crate::sampling::Trajectory;
use crate::taylor::Expansion;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceKind {
    /// `c = lambda`.
    ConstantLambda,
    /// `c = lambda * min(1, pi/mu)`.
    Retrace,
    /// `c = lambda * min(clip, pi/mu)`.
    VtraceClip,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceCoefficients {
    pub kind: TraceKind,
    pub lambda: f64,
    /// Truncation level; only read by [`TraceKind::VtraceClip`].
    pub clip: f64,
}

impl TraceCoefficients {
    pub fn constant(lambda: f64) -> Self {
        Self {
            kind: TraceKind::ConstantLambda,
            lambda,
            clip: 1.0,
        }
    }

    pub fn retrace(lambda: f64) -> Self {
        Self {
            kind: TraceKind::Retrace,
            lambda,
            clip: 1.0,
        }
    }

    pub fn vtrace(clip: f64) -> Self {
        Self {
            kind: TraceKind::VtraceClip,
            lambda: 1.0,
            clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "trace lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.kind == TraceKind::VtraceClip && !(self.clip >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "trace clip must be non-negative, got {}",
                self.clip
            )));
        }
        Ok(())
    }

    /// `c(x,a)` given `pi(a|x)` and `mu(a|x) > 0`.
    pub fn coefficient(&self, target_prob: f64, behavior_prob: f64) -> f64 {
        match self.kind {
            TraceKind::ConstantLambda => self.lambda,
            TraceKind::Retrace => self.lambda * (target_prob / behavior_prob).min(1.0),
            TraceKind::VtraceClip => self.lambda * (target_prob / behavior_prob).min(self.clip),
        }
    }

    /// `mu(a|x) c(x,a)`, well defined also where `mu` vanishes.
    fn behavior_weight(&self, target_prob: f64, behavior_prob: f64) -> f64 {
        match self.kind {
            TraceKind::ConstantLambda => self.lambda * behavior_prob,
            TraceKind::Retrace => self.lambda * target_prob.min(behavior_prob),
            TraceKind::VtraceClip => {
                if self.clip.is_infinite() {
                    self.lambda * target_prob
                } else {
                    self.lambda * target_prob.min(self.clip * behavior_prob)
                }
            }
        }
    }
}

/// Dense return operator for one `(pi, mu, c)` with its factorization cached.
#[derive(Clone, Debug)]
pub struct ReturnOperator {
    gamma: f64,
    num_actions: usize,
    reward: DVector<f64>,
    p_target: DMatrix<f64>,
    solver: ResolventSolver,
}

impl ReturnOperator {
    pub fn new(
        mdp: &Mdp,
        target: &TabularPolicy,
        behavior: &TabularPolicy,
        coeffs: &TraceCoefficients,
    ) -> Result<Self> {
        coeffs.validate()?;
        mdp.check_policy(behavior)?;
        let p_target = transition_kernel(mdp, target)?;
        let weights = DVector::from_iterator(
            mdp.num_pairs(),
            target
                .probs()
                .iter()
                .zip(behavior.probs())
                .map(|(&pi, &mu)| coeffs.behavior_weight(pi, mu)),
        );
        let p_trace = weighted_kernel(mdp, &weights)?;
        Ok(Self {
            gamma: mdp.discount(),
            num_actions: mdp.num_actions(),
            reward: mdp.reward_vector(),
            p_target,
            solver: ResolventSolver::new(&p_trace, mdp.discount())?,
        })
    }

    pub fn apply(&self, q: &QTable) -> Result<QTable> {
        if q.values().len() != self.reward.len() {
            return Err(Error::DimensionMismatch(format!(
                "Q table has {} entries, expected {}",
                q.values().len(),
                self.reward.len()
            )));
        }
        let q = q.values();
        let td = &self.reward + &self.p_target * q * self.gamma - q;
        Ok(QTable::new(self.num_actions, q + self.solver.solve(&td)?))
    }
}

pub fn apply_return_operator(
    mdp: &Mdp,
    q: &QTable,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    coeffs: &TraceCoefficients,
) -> Result<QTable> {
    ReturnOperator::new(mdp, target, behavior, coeffs)?.apply(q)
}

/// `||(R_1)^K Q^mu - (Q^mu + sum_{k<=K} U_k)||_inf`, both sides computed
/// independently.
pub fn operator_expansion_gap(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    max_order: usize,
) -> Result<f64> {
    if max_order == 0 {
        return Err(Error::InvalidArgument("expansion order must be at least 1".into()));
    }
    let op = ReturnOperator::new(mdp, target, behavior, &TraceCoefficients::constant(1.0))?;
    let mut q = exact_q(mdp, behavior)?;
    for _ in 0..max_order {
        q = op.apply(&q)?;
    }
    let series = Expansion::new(mdp, target, behavior)?.partial_sum(max_order)?;
    Ok(max_abs(&(q.values() - series.values())))
}

/// On-policy `Q(lambda)` applied to `Q_init(x,a) = V(x)`, minus `V`.
pub fn gae_advantage_tabular(
    mdp: &Mdp,
    policy: &TabularPolicy,
    v_baseline: &VTable,
    lambda: f64,
) -> Result<QTable> {
    if v_baseline.len() != mdp.num_states() {
        return Err(Error::DimensionMismatch(format!(
            "baseline has {} states, MDP has {}",
            v_baseline.len(),
            mdp.num_states()
        )));
    }
    let init = QTable::broadcast(v_baseline, mdp.num_actions());
    let q = apply_return_operator(mdp, &init, policy, policy, &TraceCoefficients::constant(lambda))?;
    Ok(q.sub(&init))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetVariant {
    ZeroOrder,
    FirstOrder,
    SecondOrder,
    Retrace,
    /// `first + eta (second - first)`.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetSpec {
    pub variant: TargetVariant,
    pub eta: f64,
    /// Retrace trace level.
    pub lambda: f64,
    /// Window length: each target looks at most `n` steps ahead before
    /// bootstrapping from the reference table. `None` uses the whole
    /// trajectory.
    pub nstep: Option<usize>,
}

pub const DEFAULT_VALUE_ETA: f64 = 0.2;
pub const DEFAULT_POLICY_ETA: f64 = 1.0;
pub const DEFAULT_NSTEP: usize = 3;

impl TargetSpec {
    pub fn new(variant: TargetVariant) -> Self {
        Self {
            variant,
            eta: DEFAULT_VALUE_ETA,
            lambda: 1.0,
            nstep: Some(DEFAULT_NSTEP),
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_nstep(mut self, nstep: Option<usize>) -> Self {
        self.nstep = nstep;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.nstep == Some(0) {
            return Err(Error::InvalidArgument("nstep must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step quantities read by the target recursions.
struct StepTable {
    gamma: f64,
    reward: Vec<f64>,
    /// `q_ref(x_t, a_t)`
    q_taken: Vec<f64>,
    /// `E_pi q_ref(x_t, .)`
    q_expected: Vec<f64>,
    /// `pi(a_t | x_t)`
    target_prob: Vec<f64>,
    /// `lambda min(1, pi/mu)` at step `t`
    trace: Vec<f64>,
}

impl StepTable {
    fn zero_order(&self, start: usize, end: usize) -> Vec<f64> {
        let mut out = vec![0.0; end - start + 1];
        let mut g = self.q_taken[end];
        out[end - start] = g;
        for t in (start..end).rev() {
            g = self.reward[t] + self.gamma * g;
            out[t - start] = g;
        }
        out
    }

    fn first_order(&self, start: usize, end: usize) -> Vec<f64> {
        let gamma = self.gamma;
        let mut out = vec![0.0; end - start + 1];
        let mut g = self.q_taken[end];
        out[end - start] = g;
        for t in (start..end).rev() {
            g = self.reward[t] + gamma * (self.q_expected[t + 1] - self.q_taken[t + 1]) + gamma * g;
            out[t - start] = g;
        }
        out
    }

    fn retrace(&self, start: usize, end: usize) -> Vec<f64> {
        let gamma = self.gamma;
        let mut out = vec![0.0; end - start + 1];
        let mut g = self.q_taken[end];
        out[end - start] = g;
        for t in (start..end).rev() {
            let c = self.trace[t + 1];
            g = self.reward[t] + gamma * (self.q_expected[t + 1] - c * self.q_taken[t + 1]) + gamma * c * g;
            out[t - start] = g;
        }
        out
    }

    /// Second-order targets given the first-order ones on the same segment.
    /// Off-trajectory actions inside the expectation keep the reference value.
    fn second_order(&self, start: usize, end: usize, first: &[f64]) -> Vec<f64> {
        let gamma = self.gamma;
        let mut out = vec![0.0; end - start + 1];
        let mut g = self.q_taken[end];
        out[end - start] = g;
        for t in (start..end).rev() {
            let next_first = first[t + 1 - start];
            let expected = self.q_expected[t + 1]
                + self.target_prob[t + 1] * (next_first - self.q_taken[t + 1]);
            g = self.reward[t] + gamma * (expected - next_first) + gamma * g;
            out[t - start] = g;
        }
        out
    }

    fn segment(&self, spec: &TargetSpec, start: usize, end: usize) -> Vec<f64> {
        match spec.variant {
            TargetVariant::ZeroOrder => self.zero_order(start, end),
            TargetVariant::FirstOrder => self.first_order(start, end),
            TargetVariant::Retrace => self.retrace(start, end),
            TargetVariant::SecondOrder => {
                let first = self.first_order(start, end);
                self.second_order(start, end, &first)
            }
            TargetVariant::Mixed => {
                let first = self.first_order(start, end);
                let second = self.second_order(start, end, &first);
                first
                    .iter()
                    .zip(&second)
                    .map(|(f, s)| f + spec.eta * (s - f))
                    .collect()
            }
        }
    }
}

/// Regression targets for `Q^pi(x_t, a_t)` along a trajectory collected under
/// `mu`. The last step is the bootstrap pair: its target is `q_ref` there.
pub fn value_targets(
    traj: &Trajectory,
    q_ref: &QTable,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    gamma: f64,
    spec: &TargetSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let len = traj.len();
    if len < 2 {
        return Err(Error::TrajectoryTooShort { len, min: 2 });
    }
    if q_ref.num_actions() != target.num_actions() || q_ref.num_states() != target.num_states() {
        return Err(Error::DimensionMismatch("reference Q table does not match the policy".into()));
    }
    let ratios = traj.ratios(target, behavior)?;
    let na = target.num_actions();
    let table = StepTable {
        gamma,
        reward: traj.steps.iter().map(|s| s.reward).collect(),
        q_taken: traj.steps.iter().map(|s| q_ref.get(s.state, s.action)).collect(),
        q_expected: traj
            .steps
            .iter()
            .map(|s| (0..na).map(|a| target.prob(s.state, a) * q_ref.get(s.state, a)).sum())
            .collect(),
        target_prob: traj.steps.iter().map(|s| target.prob(s.state, s.action)).collect(),
        trace: ratios.iter().map(|r| spec.lambda * r.min(1.0)).collect(),
    };
    match spec.nstep {
        None => Ok(table.segment(spec, 0, len - 1)),
        Some(n) => Ok((0..len)
            .map(|t| table.segment(spec, t, (t + n).min(len - 1))[0])
            .collect()),
    }
}

/// V-trace value targets `v(x_t)` and advantages `r_t + gamma v(x_{t+1}) - v(x_t)`,
/// bootstrapped with `V` at the state reached after the last step.
#[allow(clippy::too_many_arguments)]
pub fn vtrace_targets(
    traj: &Trajectory,
    v: &VTable,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    gamma: f64,
    rho_bar: f64,
    c_bar: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = traj.len();
    if len < 2 {
        return Err(Error::TrajectoryTooShort { len, min: 2 });
    }
    if !(rho_bar >= 0.0 && c_bar >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip levels must be non-negative, got rho {rho_bar}, c {c_bar}"
        )));
    }
    if v.len() != target.num_states() {
        return Err(Error::DimensionMismatch("value table does not match the policy".into()));
    }
    let ratios = traj.ratios(target, behavior)?;
    let mut values = vec![0.0; len];
    let mut next_state = traj.final_state;
    let mut next_target = v.get(next_state);
    for t in (0..len).rev() {
        let step = traj.steps[t];
        let rho = ratios[t].min(rho_bar);
        let c = ratios[t].min(c_bar);
        let v_here = v.get(step.state);
        let v_next = v.get(next_state);
        let td = rho * (step.reward + gamma * v_next - v_here);
        values[t] = v_here + td + gamma * c * (next_target - v_next);
        next_target = values[t];
        next_state = step.state;
    }
    let advantages = (0..len)
        .map(|t| {
            let next = if t + 1 < len { values[t + 1] } else { v.get(traj.final_state) };
            traj.steps[t].reward + gamma * next - values[t]
        })
        .collect();
    Ok((values, advantages))
}
