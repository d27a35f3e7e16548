//! Tabular softmax policy optimization.
//!
//! [`TayPoTrainer`] runs the sample-based loop: collect trajectories under a
//! possibly stale behavior snapshot, estimate advantages against the exact
//! behavior value, and ascend `L1_hat + eta * L2_hat`. [`generalized_trpo_step`]
//! works on the exact objective orders instead and returns the lower-bound
//! certificate of the new policy.

use std::collections::VecDeque;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::ResolventSolver;
use crate::mdp::{
    exact_q, exact_v, next_state_matrix, objective, policy_l1_distance, transition_kernel, Mdp,
    TabularPolicy,
};
use crate::rng::{self, LabRng};
use crate::sampling::{estimate_l2_enumeration, naive_advantage, simulate_trajectory, Trajectory};
use crate::taylor::{improvement_gap, objective_terms, within_radius};

/// Logit table `theta(x, a)` with `pi(a|x) = softmax_a theta(x, .)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxPolicyParams {
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

impl SoftmaxPolicyParams {
    pub fn new(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || logits.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch(format!(
                "{} logits for {num_states} states and {num_actions} actions",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument("logits must be finite".into()));
        }
        Ok(Self {
            num_states,
            num_actions,
            logits,
        })
    }

    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            logits: vec![0.0; num_states * num_actions],
        }
    }

    /// Logits `ln pi`, which reproduce a strictly positive policy exactly up
    /// to rounding.
    pub fn from_policy(policy: &TabularPolicy) -> Result<Self> {
        policy.check_strictly_positive()?;
        Self::new(
            policy.num_states(),
            policy.num_actions(),
            policy.probs().iter().map(|p| p.ln()).collect(),
        )
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Adds `delta` to every logit of `state`.
    pub fn shift_state(&mut self, state: usize, delta: f64) {
        let na = self.num_actions;
        for l in &mut self.logits[state * na..(state + 1) * na] {
            *l += delta;
        }
    }

    pub fn policy(&self) -> TabularPolicy {
        let na = self.num_actions;
        let mut probs = Vec::with_capacity(self.logits.len());
        for row in self.logits.chunks(na) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            probs.extend(exps.iter().map(|e| e / total));
        }
        TabularPolicy::new(self.num_states, na, probs).expect("softmax rows are distributions")
    }
}

/// Chains `dF/dpi(a|x)` through the softmax: `pi(a|x) (g(x,a) - sum_b pi(b|x) g(x,b))`.
pub fn softmax_chain(policy: &TabularPolicy, prob_gradient: &[f64]) -> Vec<f64> {
    let na = policy.num_actions();
    let mut out = vec![0.0; prob_gradient.len()];
    for x in 0..policy.num_states() {
        let row = policy.row(x);
        let g = &prob_gradient[x * na..(x + 1) * na];
        let mean: f64 = row.iter().zip(g).map(|(p, gi)| p * gi).sum();
        for a in 0..na {
            out[x * na + a] = row[a] * (g[a] - mean);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    /// 1 or 2.
    pub order: u8,
    /// Weight of the second-order term.
    pub eta: f64,
    pub learning_rate: f64,
    /// Per-state L1 ball around the behavior policy applied after each step.
    pub trust_region_epsilon: Option<f64>,
    /// Iterations of parameter staleness of the behavior policy.
    pub delay: usize,
    /// Trajectories per iteration.
    pub batch: usize,
    pub horizon: usize,
    pub seed: u64,
    pub start_state: usize,
    /// Ratio clipping of the first-order term, as in PPO.
    pub ppo_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            order: 2,
            eta: 1.0,
            learning_rate: 1.0,
            trust_region_epsilon: None,
            delay: 0,
            batch: 8,
            horizon: 50,
            seed: 0,
            start_state: 0,
            ppo_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.order != 1 && self.order != 2 {
            return fail(format!("order must be 1 or 2, got {}", self.order));
        }
        if !(self.eta >= 0.0) {
            return fail(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if let Some(eps) = self.trust_region_epsilon {
            if !(eps >= 0.0) {
                return fail(format!("trust region must be >= 0, got {eps}"));
            }
        }
        if let Some(clip) = self.ppo_clip {
            if !(clip >= 0.0) {
                return fail(format!("clip must be >= 0, got {clip}"));
            }
        }
        if self.batch == 0 {
            return fail("batch must be positive".into());
        }
        let min_horizon = if self.order == 2 { 2 } else { 1 };
        if self.horizon < min_horizon {
            return fail(format!("horizon must be at least {min_horizon}"));
        }
        Ok(())
    }
}

/// Surrogate value and its gradient in logit space, averaged over the batch.
///
/// Per trajectory of length `T`, `L1_hat = (1/T) sum_t (rho_t - 1) A_t` and
/// `L2_hat` is the enumeration estimate. Advantages and `mu` are constants.
pub fn surrogate_and_gradient(
    params: &SoftmaxPolicyParams,
    behavior: &TabularPolicy,
    trajectories: &[Trajectory],
    advantages: &[Vec<f64>],
    gamma: f64,
    config: &OptimizerConfig,
) -> Result<(f64, Vec<f64>)> {
    if trajectories.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if advantages.len() != trajectories.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} advantage rows for {} trajectories",
            advantages.len(),
            trajectories.len()
        )));
    }
    let target = params.policy();
    let na = params.num_actions();
    let mut value = 0.0;
    let mut grad = vec![0.0; params.logits.len()];
    for (traj, adv) in trajectories.iter().zip(advantages) {
        let len = traj.len();
        if len == 0 || adv.len() != len {
            return Err(Error::DimensionMismatch(format!(
                "{} advantages for a trajectory of length {len}",
                adv.len()
            )));
        }
        let ratios = traj.ratios(&target, behavior)?;
        let scale = 1.0 / len as f64;

        // d surrogate / d rho_t
        let mut d_rho = vec![0.0; len];
        let mut first = 0.0;
        for t in 0..len {
            let (term, slope) = first_order_term(ratios[t], adv[t], config.ppo_clip);
            first += term;
            d_rho[t] = slope * scale;
        }
        first *= scale;

        let mut total = first;
        if config.order == 2 {
            let second = estimate_l2_enumeration(traj, &target, behavior, adv, gamma)?;
            total = first + config.eta * second;
            // suffix S_t = sum_{t'>t} gamma^{t'-t} (rho_t' - 1) A_t'
            // prefix P_t = sum_{t<t'} gamma^{t'-t} (rho_t - 1)
            let mut suffix = vec![0.0; len];
            for t in (0..len - 1).rev() {
                suffix[t] = gamma * ((ratios[t + 1] - 1.0) * adv[t + 1] + suffix[t + 1]);
            }
            let mut prefix = 0.0;
            for t in 0..len {
                if t > 0 {
                    prefix = gamma * (prefix + ratios[t - 1] - 1.0);
                }
                d_rho[t] += config.eta * scale * (suffix[t] + prefix * adv[t]);
            }
        }
        value += total;

        for (t, step) in traj.steps.iter().enumerate() {
            // d rho_t / d theta(x_t, b) = rho_t (1{b = a_t} - pi(b|x_t))
            let coef = d_rho[t] * ratios[t];
            if coef == 0.0 {
                continue;
            }
            let row = target.row(step.state);
            for b in 0..na {
                let indicator = if b == step.action { 1.0 } else { 0.0 };
                grad[step.state * na + b] += coef * (indicator - row[b]);
            }
        }
    }
    let n = trajectories.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((value / n, grad))
}

/// `(rho - 1) A` or its clipped variant, with the derivative in `rho`.
fn first_order_term(ratio: f64, adv: f64, clip: Option<f64>) -> (f64, f64) {
    match clip {
        None => ((ratio - 1.0) * adv, adv),
        Some(eps) => {
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
            let plain = ratio * adv;
            let cut = clipped * adv;
            if plain <= cut {
                (plain - adv, adv)
            } else {
                (cut - adv, 0.0)
            }
        }
    }
}

/// Per-state mixing `pi <- mu + beta_x (pi - mu)` with the largest
/// `beta_x <= 1` such that `sum_a |pi - mu| <= epsilon` at every state.
pub fn project_l1_ball(
    policy: &TabularPolicy,
    center: &TabularPolicy,
    epsilon: f64,
) -> Result<TabularPolicy> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    policy_l1_distance(policy, center)?;
    let na = policy.num_actions();
    let mut probs = Vec::with_capacity(policy.probs().len());
    for x in 0..policy.num_states() {
        let (p, c) = (policy.row(x), center.row(x));
        let dist: f64 = p.iter().zip(c).map(|(a, b)| (a - b).abs()).sum();
        if dist <= epsilon {
            probs.extend_from_slice(p);
            continue;
        }
        let beta = epsilon / dist;
        probs.extend((0..na).map(|a| c[a] + beta * (p[a] - c[a])));
    }
    TabularPolicy::new(policy.num_states(), na, probs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    /// Exact `J(pi_theta)` after the update.
    pub objective: f64,
    pub surrogate: f64,
    /// `||pi_theta - mu||_1` before the update, with `mu` the behavior snapshot.
    pub l1_distance: f64,
    pub gradient_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub initial_objective: f64,
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn final_objective(&self) -> f64 {
        self.rows.last().map_or(self.initial_objective, |r| r.objective)
    }
}

/// Sample-based optimization loop with a staleness queue of past parameters.
#[derive(Clone, Debug)]
pub struct TayPoTrainer {
    mdp: Mdp,
    config: OptimizerConfig,
    params: SoftmaxPolicyParams,
    history: VecDeque<SoftmaxPolicyParams>,
    iteration: usize,
}

impl TayPoTrainer {
    pub fn new(mdp: Mdp, config: OptimizerConfig, params: SoftmaxPolicyParams) -> Result<Self> {
        config.validate()?;
        mdp.check_state(config.start_state)?;
        if params.num_states() != mdp.num_states() || params.num_actions() != mdp.num_actions() {
            return Err(Error::DimensionMismatch("parameters do not match the MDP".into()));
        }
        let history = VecDeque::from([params.clone()]);
        Ok(Self {
            mdp,
            config,
            params,
            history,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &SoftmaxPolicyParams {
        &self.params
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Parameters `delay` iterations old, or the oldest kept ones early on.
    pub fn behavior_params(&self) -> &SoftmaxPolicyParams {
        self.history.front().expect("history is never empty")
    }

    fn collect(&self, behavior: &TabularPolicy) -> Result<Vec<Trajectory>> {
        let root = rng::derive(self.config.seed, self.iteration as u64);
        (0..self.config.batch)
            .into_par_iter()
            .map(|i| {
                let mut gen: LabRng = rng::split(root, i as u64);
                simulate_trajectory(
                    &self.mdp,
                    behavior,
                    self.config.start_state,
                    self.config.horizon,
                    &mut gen,
                )
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<LogRow> {
        let behavior = self.behavior_params().policy();
        let trajectories = self.collect(&behavior)?;
        let baseline = exact_v(&self.mdp, &behavior)?;
        let gamma = self.mdp.discount();
        let advantages: Vec<Vec<f64>> = trajectories
            .iter()
            .map(|t| naive_advantage(t, &baseline, gamma))
            .collect();
        let (surrogate, grad) = surrogate_and_gradient(
            &self.params,
            &behavior,
            &trajectories,
            &advantages,
            gamma,
            &self.config,
        )?;
        let l1_distance = policy_l1_distance(&self.params.policy(), &behavior)?;

        let mut next = self.params.clone();
        for (l, g) in next.logits.iter_mut().zip(&grad) {
            *l += self.config.learning_rate * g;
        }
        if let Some(eps) = self.config.trust_region_epsilon {
            next = SoftmaxPolicyParams::from_policy(&project_l1_ball(&next.policy(), &behavior, eps)?)?;
        }
        self.params = next;
        self.history.push_back(self.params.clone());
        while self.history.len() > self.config.delay + 1 {
            self.history.pop_front();
        }
        self.iteration += 1;
        Ok(LogRow {
            iteration: self.iteration,
            objective: objective(&self.mdp, &self.params.policy(), self.config.start_state)?,
            surrogate,
            l1_distance,
            gradient_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        })
    }

    pub fn run(&mut self, iterations: usize) -> Result<TrainingLog> {
        let mut log = TrainingLog {
            initial_objective: objective(&self.mdp, &self.params.policy(), self.config.start_state)?,
            rows: Vec::with_capacity(iterations),
        };
        for _ in 0..iterations {
            log.rows.push(self.step()?);
        }
        Ok(log)
    }
}

/// Runs `iterations` steps from uniform logits.
pub fn train(mdp: &Mdp, config: &OptimizerConfig, iterations: usize) -> Result<(SoftmaxPolicyParams, TrainingLog)> {
    let params = SoftmaxPolicyParams::zeros(mdp.num_states(), mdp.num_actions());
    let mut trainer = TayPoTrainer::new(mdp.clone(), config.clone(), params)?;
    let log = trainer.run(iterations)?;
    Ok((trainer.params, log))
}

/// Clipped-ratio policy gradient `mean_t min(rho_bar, rho_t) grad log pi(a_t|x_t) a_t`
/// with V-trace advantages `a_t`.
pub fn vtrace_policy_gradient(
    params: &SoftmaxPolicyParams,
    behavior: &TabularPolicy,
    traj: &Trajectory,
    advantages: &[f64],
    rho_bar: f64,
) -> Result<Vec<f64>> {
    if advantages.len() != traj.len() || traj.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} advantages for a trajectory of length {}",
            advantages.len(),
            traj.len()
        )));
    }
    let target = params.policy();
    let ratios = traj.ratios(&target, behavior)?;
    let na = params.num_actions();
    let scale = 1.0 / traj.len() as f64;
    let mut grad = vec![0.0; params.logits.len()];
    for (t, step) in traj.steps.iter().enumerate() {
        let coef = ratios[t].min(rho_bar) * advantages[t] * scale;
        let row = target.row(step.state);
        for b in 0..na {
            let indicator = if b == step.action { 1.0 } else { 0.0 };
            grad[step.state * na + b] += coef * (indicator - row[b]);
        }
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneralizedTrpoConfig {
    /// Expansion order `K >= 1`.
    pub max_order: usize,
    /// Per-state L1 radius around the current policy.
    pub epsilon: f64,
    pub step_size: f64,
    pub inner_steps: usize,
    /// Adjoint gradient when true, central finite differences otherwise.
    pub analytic: bool,
    pub start_state: usize,
}

impl Default for GeneralizedTrpoConfig {
    fn default() -> Self {
        Self {
            max_order: 2,
            epsilon: 0.05,
            step_size: 1.0,
            inner_steps: 20,
            analytic: true,
            start_state: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrpoOutcome {
    pub params: SoftmaxPolicyParams,
    /// `sum_{k<=K} L_k` of the projected policy.
    pub surrogate: f64,
    pub behavior_objective: f64,
    pub objective: f64,
    /// `J(mu) + sum L_k - G_K`; `None` outside the convergence radius.
    pub certificate: Option<f64>,
    pub l1_distance: f64,
}

impl TrpoOutcome {
    pub fn certificate_holds(&self) -> bool {
        self.certificate.is_none_or(|c| self.objective >= c - 1e-9)
    }
}

fn expansion_sum(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start: usize,
    max_order: usize,
) -> Result<f64> {
    Ok(objective_terms(mdp, target, behavior, start, max_order)?.iter().sum())
}

/// Gradient of `sum_{k<=K} L_k(pi, mu)` in `pi(b|y)`, treated as free entries.
///
/// With `U_k = M^k Q^mu`, the sum is `sum_k c_k^T U_k` plus the start-row
/// dependence of `pi_0`; each `c_k^T U_k` is differentiated by propagating
/// `c_k` backwards through `M^T`.
pub fn expansion_sum_policy_gradient(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start: usize,
    max_order: usize,
) -> Result<Vec<f64>> {
    if max_order == 0 {
        return Err(Error::InvalidArgument("expansion order must be at least 1".into()));
    }
    mdp.check_state(start)?;
    let gamma = mdp.discount();
    let na = mdp.num_actions();
    let p_target = transition_kernel(mdp, target)?;
    let p_behavior = transition_kernel(mdp, behavior)?;
    let solver = ResolventSolver::new(&p_behavior, gamma)?;
    let p_diff_t = (p_target - &p_behavior).transpose();
    let phi_t = next_state_matrix(mdp).transpose();

    // U_0..U_K
    let mut terms = vec![exact_q(mdp, behavior)?.into_values()];
    for k in 0..max_order {
        let next = solver.solve(&(&p_diff_t.transpose() * &terms[k]))? * gamma;
        terms.push(next);
    }

    let mu0 = behavior.start_vector(start);
    let w = &target.start_vector(start) - &mu0;
    let mut grad = vec![0.0; mdp.num_pairs()];
    for k in 1..=max_order {
        let mut lambda: DVector<f64> = if k < max_order { &w + &mu0 } else { mu0.clone() };
        for j in 0..k {
            let h = solver.solve_transpose(&lambda)? * gamma;
            let nu = &phi_t * &h;
            let u = &terms[k - 1 - j];
            for y in 0..mdp.num_states() {
                for b in 0..na {
                    grad[y * na + b] += nu[y] * u[y * na + b];
                }
            }
            lambda = &p_diff_t * h;
        }
    }
    // direct dependence through pi_0 = pi(.|x_0)
    for b in 0..na {
        grad[start * na + b] += terms[..max_order].iter().map(|u| u[start * na + b]).sum::<f64>();
    }
    Ok(grad)
}

fn expansion_sum_logit_gradient(
    mdp: &Mdp,
    params: &SoftmaxPolicyParams,
    behavior: &TabularPolicy,
    cfg: &GeneralizedTrpoConfig,
) -> Result<Vec<f64>> {
    let target = params.policy();
    if cfg.analytic {
        let g = expansion_sum_policy_gradient(mdp, &target, behavior, cfg.start_state, cfg.max_order)?;
        return Ok(softmax_chain(&target, &g));
    }
    const STEP: f64 = 1e-6;
    let mut grad = vec![0.0; params.logits.len()];
    let mut probe = params.clone();
    for i in 0..grad.len() {
        let orig = probe.logits[i];
        probe.logits[i] = orig + STEP;
        let up = expansion_sum(mdp, &probe.policy(), behavior, cfg.start_state, cfg.max_order)?;
        probe.logits[i] = orig - STEP;
        let down = expansion_sum(mdp, &probe.policy(), behavior, cfg.start_state, cfg.max_order)?;
        probe.logits[i] = orig;
        grad[i] = (up - down) / (2.0 * STEP);
    }
    Ok(grad)
}

/// One outer step: gradient ascent on `sum_{k<=K} L_k(., mu)` from
/// `mu = pi_params`, projection into the L1 ball of radius `epsilon` around
/// `mu`, and the certificate `J(mu) + sum L_k - G_K` of the result.
pub fn generalized_trpo_step(
    params: &SoftmaxPolicyParams,
    mdp: &Mdp,
    cfg: &GeneralizedTrpoConfig,
) -> Result<TrpoOutcome> {
    if cfg.max_order == 0 {
        return Err(Error::InvalidArgument("expansion order must be at least 1".into()));
    }
    if !(cfg.epsilon >= 0.0) || !(cfg.step_size >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon and step size must be >= 0, got {} and {}",
            cfg.epsilon, cfg.step_size
        )));
    }
    let behavior = params.policy();
    let mut inner = params.clone();
    for _ in 0..cfg.inner_steps {
        let grad = expansion_sum_logit_gradient(mdp, &inner, &behavior, cfg)?;
        for (l, g) in inner.logits.iter_mut().zip(&grad) {
            *l += cfg.step_size * g;
        }
    }
    let projected = project_l1_ball(&inner.policy(), &behavior, cfg.epsilon)?;
    let surrogate = expansion_sum(mdp, &projected, &behavior, cfg.start_state, cfg.max_order)?;
    let behavior_objective = objective(mdp, &behavior, cfg.start_state)?;
    let gamma = mdp.discount();
    let certificate = if within_radius(cfg.epsilon, gamma) {
        let gap = improvement_gap(cfg.epsilon, gamma, mdp.r_max(), cfg.max_order)?;
        Some(behavior_objective + surrogate - gap)
    } else {
        None
    };
    Ok(TrpoOutcome {
        params: SoftmaxPolicyParams::from_policy(&projected)?,
        surrogate,
        behavior_objective,
        objective: objective(mdp, &projected, cfg.start_state)?,
        certificate,
        l1_distance: policy_l1_distance(&projected, &behavior)?,
    })
}
