//! Taylor expansion of `Q^pi` around `Q^mu` and of `J(pi) - J(mu)`.
//!
//! With `M = gamma (I - gamma P^mu)^{-1} (P^pi - P^mu)`, the expansion terms
//! are `U_k = M^k Q^mu`, the finite-order residual is
//! `E_K = Q^pi - Q^mu - sum_{k<=K} U_k = M^{K+1} Q^pi`, and the objective
//! orders are `L_1 = (pi_0 - mu_0)^T Q^mu + mu_0^T U_1`,
//! `L_k = (pi_0 - mu_0)^T U_{k-1} + mu_0^T U_k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::ResolventSolver;
use crate::mdp::{
    convergence_radius, exact_q, exact_q_with_rewards, objective_from_q, policy_l1_distance,
    transition_kernel, Mdp, QTable, TabularPolicy,
};

/// Precomputed pieces shared by every expansion quantity of one `(pi, mu)`
/// pair. One LU factorization of `I - gamma P^mu` is reused for all orders.
#[derive(Clone, Debug)]
pub struct Expansion {
    gamma: f64,
    num_actions: usize,
    p_diff: DMatrix<f64>,
    solver: ResolventSolver,
    q_behavior: QTable,
}

impl Expansion {
    pub fn new(mdp: &Mdp, target: &TabularPolicy, behavior: &TabularPolicy) -> Result<Self> {
        Self::with_rewards(mdp, target, behavior, &mdp.reward_vector())
    }

    /// Expansion around `(I - gamma P^mu)^{-1} reward` for an arbitrary
    /// reward vector, e.g. an empirical estimate.
    pub fn with_rewards(
        mdp: &Mdp,
        target: &TabularPolicy,
        behavior: &TabularPolicy,
        reward: &DVector<f64>,
    ) -> Result<Self> {
        let p_target = transition_kernel(mdp, target)?;
        let p_behavior = transition_kernel(mdp, behavior)?;
        let solver = ResolventSolver::new(&p_behavior, mdp.discount())?;
        let q_behavior = QTable::new(mdp.num_actions(), solver.solve(reward)?);
        Ok(Self {
            gamma: mdp.discount(),
            num_actions: mdp.num_actions(),
            p_diff: p_target - &p_behavior,
            solver,
            q_behavior,
        })
    }

    pub fn q_behavior(&self) -> &QTable {
        &self.q_behavior
    }

    /// `M v = gamma (I - gamma P^mu)^{-1} (P^pi - P^mu) v`.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.solver.solve(&(&self.p_diff * v))? * self.gamma)
    }

    /// `U_1..U_K`.
    pub fn terms(&self, max_order: usize) -> Result<Vec<QTable>> {
        let mut terms = Vec::with_capacity(max_order);
        let mut current = self.q_behavior.values().clone();
        for _ in 0..max_order {
            current = self.apply(&current)?;
            terms.push(QTable::new(self.num_actions, current.clone()));
        }
        Ok(terms)
    }

    /// `Q^mu + sum_{k<=K} U_k`.
    pub fn partial_sum(&self, max_order: usize) -> Result<QTable> {
        Ok(self
            .terms(max_order)?
            .iter()
            .fold(self.q_behavior.clone(), |acc, u| acc.add(u)))
    }

    /// `M^{K+1} v`.
    pub fn power_apply(&self, v: &DVector<f64>, power: usize) -> Result<DVector<f64>> {
        let mut current = v.clone();
        for _ in 0..power {
            current = self.apply(&current)?;
        }
        Ok(current)
    }

    /// Sum of the objective orders `L_1..L_K` given the terms `U_0..U_K`.
    fn objective_orders(
        &self,
        target: &TabularPolicy,
        behavior: &TabularPolicy,
        start: usize,
        max_order: usize,
    ) -> Result<Vec<f64>> {
        let pi0 = target.start_vector(start);
        let mu0 = behavior.start_vector(start);
        let diff0 = &pi0 - &mu0;
        let mut previous = self.q_behavior.values().clone();
        let mut orders = Vec::with_capacity(max_order);
        for _ in 0..max_order {
            let current = self.apply(&previous)?;
            orders.push(diff0.dot(&previous) + mu0.dot(&current));
            previous = current;
        }
        Ok(orders)
    }
}

fn require_order(max_order: usize, min: usize) -> Result<()> {
    if max_order < min {
        return Err(Error::InvalidArgument(format!(
            "expansion order must be at least {min}, got {max_order}"
        )));
    }
    Ok(())
}

/// `U_1..U_K` through `M = gamma (I - gamma P^mu)^{-1} (P^pi - P^mu)`.
pub fn expansion_terms(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    max_order: usize,
) -> Result<Vec<QTable>> {
    require_order(max_order, 1)?;
    Expansion::new(mdp, target, behavior)?.terms(max_order)
}

/// `U_1..U_K` through the ratio form
/// `gamma (I - gamma P^mu)^{-1} P^mu (D_{pi/mu} - I)`; requires `mu > 0`.
pub fn expansion_terms_ratio_form(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    max_order: usize,
) -> Result<Vec<QTable>> {
    require_order(max_order, 1)?;
    let ratios = target.ratios(behavior)?;
    let p_behavior = transition_kernel(mdp, behavior)?;
    let solver = ResolventSolver::new(&p_behavior, mdp.discount())?;
    let deviation = DMatrix::from_diagonal(&ratios.map(|r| r - 1.0));
    let step = &p_behavior * deviation;
    let mut current = exact_q(mdp, behavior)?.into_values();
    let mut terms = Vec::with_capacity(max_order);
    for _ in 0..max_order {
        current = solver.solve(&(&step * &current))? * mdp.discount();
        terms.push(QTable::new(mdp.num_actions(), current.clone()));
    }
    Ok(terms)
}

/// `E_K = Q^pi - Q^mu - sum_{k<=K} U_k` (subtraction form).
pub fn residual(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    max_order: usize,
) -> Result<QTable> {
    let expansion = Expansion::new(mdp, target, behavior)?;
    let q_target = exact_q(mdp, target)?;
    Ok(q_target.sub(&expansion.partial_sum(max_order)?))
}

/// `E_K = M^{K+1} Q^pi` (operator-power form).
pub fn residual_operator_form(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    max_order: usize,
) -> Result<QTable> {
    let expansion = Expansion::new(mdp, target, behavior)?;
    let q_target = exact_q(mdp, target)?;
    Ok(QTable::new(
        mdp.num_actions(),
        expansion.power_apply(q_target.values(), max_order + 1)?,
    ))
}

fn check_bound_inputs(epsilon: f64, gamma: f64, r_max: f64) -> Result<()> {
    if epsilon < 0.0 || r_max < 0.0 || !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "bound needs epsilon >= 0, r_max >= 0, gamma in [0, 1); got epsilon {epsilon}, gamma {gamma}, r_max {r_max}"
        )));
    }
    Ok(())
}

/// Whether `epsilon` is strictly inside the convergence radius.
pub fn within_radius(epsilon: f64, gamma: f64) -> bool {
    epsilon < convergence_radius(gamma)
}

/// `||E_K||_inf <= (g eps/(1-g))^{K+1} (1 - g eps/(1-g))^{-1} R_max / (1-g)`.
///
/// Returns `+inf` on or outside the convergence radius.
pub fn residual_bound(epsilon: f64, gamma: f64, r_max: f64, max_order: usize) -> Result<f64> {
    check_bound_inputs(epsilon, gamma, r_max)?;
    if !within_radius(epsilon, gamma) {
        return Ok(f64::INFINITY);
    }
    let x = gamma * epsilon / (1.0 - gamma);
    Ok(x.powi(max_order as i32 + 1) / (1.0 - x) * r_max / (1.0 - gamma))
}

/// Per-order bound `||U_k||_inf <= (g eps/(1-g))^k R_max/(1-g)`.
pub fn term_bound(epsilon: f64, gamma: f64, r_max: f64, order: usize) -> Result<f64> {
    check_bound_inputs(epsilon, gamma, r_max)?;
    let x = gamma * epsilon / (1.0 - gamma);
    Ok(x.powi(order as i32) * r_max / (1.0 - gamma))
}

/// Monotonic-improvement gap
/// `G_K = [g(1-g)]^{-1} (1 - g eps/(1-g))^{-1} (g eps/(1-g))^{K+1} R_max`.
pub fn improvement_gap(epsilon: f64, gamma: f64, r_max: f64, max_order: usize) -> Result<f64> {
    check_bound_inputs(epsilon, gamma, r_max)?;
    if !within_radius(epsilon, gamma) {
        return Err(Error::OutsideRadius {
            epsilon,
            radius: convergence_radius(gamma),
        });
    }
    if gamma == 0.0 {
        // the expansion terminates after the first order
        return Ok(0.0);
    }
    let x = gamma * epsilon / (1.0 - gamma);
    Ok(x.powi(max_order as i32 + 1) / (1.0 - x) * r_max / (gamma * (1.0 - gamma)))
}

/// Matrix-form `L_1..L_K` from start state `start`.
pub fn objective_terms(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start: usize,
    max_order: usize,
) -> Result<Vec<f64>> {
    require_order(max_order, 1)?;
    mdp.check_state(start)?;
    Expansion::new(mdp, target, behavior)?.objective_orders(target, behavior, start, max_order)
}

/// Value fed into the last factor of an expectation-form order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueBaseline {
    /// `Q^mu(x, a)`
    QValues,
    /// `A^mu(x, a) = Q^mu(x, a) - V^mu(x)`
    Advantages,
}

/// `L_k` evaluated as an expectation under `mu` over chained discounted
/// visitation distributions: `a_0 ~ mu(.|x_0)`, the first pair from
/// `d^mu(.|x_0, a_0, 0)`, every later pair from `d^mu(.|previous, 1)`, the
/// product of `pi/mu - 1` factors against the baseline at the last pair, and
/// the normalization `gamma^{k-1} (1 - gamma)^{-k}`.
fn chained_expectation(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start: usize,
    order: usize,
    baseline: ValueBaseline,
) -> Result<f64> {
    mdp.check_state(start)?;
    let gamma = mdp.discount();
    let weights = target.ratios(behavior)?.map(|r| r - 1.0);
    let p = transition_kernel(mdp, behavior)?;
    let resolvent = ResolventSolver::new(&p, gamma)?.inverse()?;
    // Row (x,a) of `first` is d(.|x,a,0); row (x,a) of `chained` is d(.|x,a,1).
    let first = &resolvent * (1.0 - gamma);
    let chained = &p * &first;

    let q = exact_q(mdp, behavior)?;
    let mut value = match baseline {
        ValueBaseline::QValues => q.into_values(),
        ValueBaseline::Advantages => {
            let v = q.state_values(behavior);
            q.sub(&QTable::broadcast(&v, mdp.num_actions())).into_values()
        }
    };
    for _ in 1..order {
        value = &chained * weights.component_mul(&value);
    }
    let inner = &first * weights.component_mul(&value);
    let expectation = behavior.start_vector(start).dot(&inner);
    let normalization = gamma.powi(order as i32 - 1) / (1.0 - gamma).powi(order as i32);
    Ok(expectation * normalization)
}

/// `L_1` or `L_2` from the normalized expectation form.
pub fn objective_term_expectation_form(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start: usize,
    order: usize,
    baseline: ValueBaseline,
) -> Result<f64> {
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidArgument(format!(
            "expectation form is defined here for orders 1 and 2, got {order}"
        )));
    }
    chained_expectation(mdp, target, behavior, start, order, baseline)
}

/// `L_k` for `k >= 3` from the chained-distribution expectation with
/// normalization `gamma^{k-1} (1 - gamma)^{-k}`.
pub fn higher_order_term(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start: usize,
    order: usize,
    baseline: ValueBaseline,
) -> Result<f64> {
    require_order(order, 3)?;
    chained_expectation(mdp, target, behavior, start, order, baseline)
}

/// `J(mu) + sum_{k<=K} L_k - G_K`, with `epsilon = ||pi - mu||_1`.
pub fn monotonic_lower_bound(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start: usize,
    max_order: usize,
) -> Result<f64> {
    let epsilon = policy_l1_distance(target, behavior)?;
    let gap = improvement_gap(epsilon, mdp.discount(), mdp.r_max(), max_order)?;
    let terms = objective_terms(mdp, target, behavior, start, max_order)?;
    let j_behavior = crate::mdp::objective(mdp, behavior, start)?;
    Ok(j_behavior + terms.iter().sum::<f64>() - gap)
}

/// Every expansion quantity of one `(pi, mu, K)` configuration.
#[derive(Clone, Debug)]
pub struct ExpansionReport {
    pub order_terms_u: Vec<QTable>,
    pub order_terms_l: Vec<f64>,
    /// `E_K` in subtraction form.
    pub residual: QTable,
    /// `E_K` in operator-power form.
    pub residual_operator_form: QTable,
    pub residual_bound: f64,
    /// `J(mu) + sum L_k - G_K`; `None` outside the convergence radius.
    pub lower_bound: Option<f64>,
    pub epsilon: f64,
    pub within_radius: bool,
    pub j_target: f64,
    pub j_behavior: f64,
    pub q_target: QTable,
    pub q_behavior: QTable,
}

impl ExpansionReport {
    /// `||Q^pi - Q^mu - sum U_k - E_K||_inf` with `E_K` in operator-power form.
    pub fn identity_gap(&self) -> f64 {
        self.order_terms_u
            .iter()
            .fold(self.q_target.sub(&self.q_behavior), |acc, u| acc.sub(u))
            .sub(&self.residual_operator_form)
            .norm_inf()
    }
}

pub fn expansion_report(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start: usize,
    max_order: usize,
) -> Result<ExpansionReport> {
    mdp.check_state(start)?;
    let expansion = Expansion::new(mdp, target, behavior)?;
    let q_target = exact_q(mdp, target)?;
    let order_terms_u = expansion.terms(max_order)?;
    let order_terms_l = expansion.objective_orders(target, behavior, start, max_order)?;
    let partial = order_terms_u
        .iter()
        .fold(expansion.q_behavior().clone(), |acc, u| acc.add(u));
    let residual = q_target.sub(&partial);
    let residual_operator_form = QTable::new(
        mdp.num_actions(),
        expansion.power_apply(q_target.values(), max_order + 1)?,
    );
    let epsilon = policy_l1_distance(target, behavior)?;
    let gamma = mdp.discount();
    let within = within_radius(epsilon, gamma);
    let j_target = objective_from_q(&q_target, target, start);
    let j_behavior = objective_from_q(expansion.q_behavior(), behavior, start);
    let lower_bound = if within {
        let gap = improvement_gap(epsilon, gamma, mdp.r_max(), max_order)?;
        Some(j_behavior + order_terms_l.iter().sum::<f64>() - gap)
    } else {
        None
    };
    Ok(ExpansionReport {
        residual_bound: residual_bound(epsilon, gamma, mdp.r_max(), max_order)?,
        order_terms_u,
        order_terms_l,
        residual,
        residual_operator_form,
        lower_bound,
        epsilon,
        within_radius: within,
        j_target,
        j_behavior,
        q_target,
        q_behavior: expansion.q_behavior().clone(),
    })
}

/// Relative error `||Q^pi - (Qhat^mu + sum_{k<=K} Uhat_k)||_1 / ||Q^pi||_1`
/// where the expansion is built from `reward` (true or estimated).
pub fn relative_expansion_error(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    reward: &DVector<f64>,
    max_order: usize,
) -> Result<f64> {
    let q_target = exact_q(mdp, target)?;
    let expansion = Expansion::with_rewards(mdp, target, behavior, reward)?;
    let approx = expansion.partial_sum(max_order)?;
    Ok(q_target.sub(&approx).norm_l1() / q_target.norm_l1())
}

/// `(I - gamma P^pi)^{-1} reward`, re-exported for the empirical-reward
/// experiments.
pub fn q_with_rewards(mdp: &Mdp, policy: &TabularPolicy, reward: &DVector<f64>) -> Result<QTable> {
    exact_q_with_rewards(mdp, policy, reward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{objective, perturbed_policy, random_mdp};
    use crate::rng;

    fn triple(seed: u64, states: usize, actions: usize, eps: f64) -> (Mdp, TabularPolicy, TabularPolicy) {
        let mdp = random_mdp(states, actions, 1.0, seed).unwrap();
        let pi = TabularPolicy::random(states, actions, 1.0, &mut rng::seeded(seed + 1000)).unwrap();
        let mu = perturbed_policy(&pi, eps, seed + 2000).unwrap();
        (mdp, pi, mu)
    }

    #[test]
    fn terms_vanish_on_policy() {
        let (mdp, pi, _) = triple(1, 6, 3, 0.0);
        for u in expansion_terms(&mdp, &pi, &pi, 5).unwrap() {
            assert_eq!(u.norm_inf(), 0.0);
        }
        assert_eq!(residual(&mdp, &pi, &pi, 2).unwrap().norm_inf(), 0.0);
        assert!(objective_terms(&mdp, &pi, &pi, 0, 4).unwrap().iter().all(|l| *l == 0.0));
        assert!(expansion_terms(&mdp, &pi, &pi, 0).is_err());
    }

    #[test]
    fn first_term_on_one_state_bandit() {
        // One state, two actions: (P^pi - P^mu) Q^mu is the constant
        // (pi - mu)^T Q^mu, and the resolvent maps constants c to c/(1-g).
        let gamma = 0.8;
        let mdp = Mdp::new(1, 2, vec![1.0, 1.0], vec![1.0, -0.5], gamma).unwrap();
        let pi = TabularPolicy::new(1, 2, vec![0.7, 0.3]).unwrap();
        let mu = TabularPolicy::new(1, 2, vec![0.4, 0.6]).unwrap();
        let v_mu = (0.4 * 1.0 + 0.6 * -0.5) / (1.0 - gamma);
        let q_mu = [1.0 + gamma * v_mu, -0.5 + gamma * v_mu];
        let shift = (0.7 - 0.4) * q_mu[0] + (0.3 - 0.6) * q_mu[1];
        let expected = gamma / (1.0 - gamma) * shift;
        let u1 = &expansion_terms(&mdp, &pi, &mu, 1).unwrap()[0];
        assert!((u1.get(0, 0) - expected).abs() < 1e-12);
        assert!((u1.get(0, 1) - expected).abs() < 1e-12);
    }

    #[test]
    fn long_expansion_converges_within_radius() {
        let (mdp, pi, mu) = triple(7, 10, 5, 0.08);
        let expansion = Expansion::new(&mdp, &pi, &mu).unwrap();
        let approx = expansion.partial_sum(20).unwrap();
        let q_pi = exact_q(&mdp, &pi).unwrap();
        assert!(q_pi.sub(&approx).norm_inf() < 1e-6);
    }

    #[test]
    fn ratio_form_matches_difference_form() {
        for seed in 0..5 {
            let (mdp, pi, mu) = triple(seed, 8, 4, 0.3);
            let a = expansion_terms(&mdp, &pi, &mu, 4).unwrap();
            let b = expansion_terms_ratio_form(&mdp, &pi, &mu, 4).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!(u.sub(v).norm_inf() < 1e-10);
            }
        }
        let (mdp, pi, _) = triple(0, 3, 2, 0.0);
        let dirac = TabularPolicy::deterministic(2, &[0, 1, 0]).unwrap();
        assert!(matches!(
            expansion_terms_ratio_form(&mdp, &pi, &dirac, 1),
            Err(Error::ZeroBehaviorProbability { .. })
        ));
    }

    #[test]
    fn residual_forms_agree() {
        let (mdp, pi, mu) = triple(3, 10, 5, 0.5);
        let a = residual(&mdp, &pi, &mu, 3).unwrap();
        let b = residual_operator_form(&mdp, &pi, &mu, 3).unwrap();
        assert!(a.sub(&b).norm_inf() < 1e-9);
        let e0 = residual(&mdp, &pi, &mu, 0).unwrap();
        let diff = exact_q(&mdp, &pi).unwrap().sub(&exact_q(&mdp, &mu).unwrap());
        assert!(e0.sub(&diff).norm_inf() < 1e-12);
    }

    #[test]
    fn residual_bound_examples() {
        assert_eq!(residual_bound(0.0, 0.9, 1.0, 3).unwrap(), 0.0);
        assert_eq!(residual_bound(convergence_radius(0.9), 0.9, 1.0, 3).unwrap(), f64::INFINITY);
        let expected = 0.45f64.powi(3) / 0.55 * 10.0;
        let value = residual_bound(0.05, 0.9, 1.0, 2).unwrap();
        assert!((value - expected).abs() < 1e-12);
        assert!((value - 1.656_818_181_818_181_8).abs() < 1e-8);
        assert!(residual_bound(-0.1, 0.9, 1.0, 1).is_err());
        assert!(residual_bound(0.1, 0.9, -1.0, 1).is_err());
        for k in 0..6 {
            assert!(residual_bound(0.05, 0.9, 1.0, k + 1).unwrap() < residual_bound(0.05, 0.9, 1.0, k).unwrap());
        }
    }

    #[test]
    fn objective_terms_sum_to_improvement() {
        let (mdp, pi, mu) = triple(12, 10, 5, 0.06);
        let terms = objective_terms(&mdp, &pi, &mu, 0, 30).unwrap();
        let diff = objective(&mdp, &pi, 0).unwrap() - objective(&mdp, &mu, 0).unwrap();
        assert!((diff - terms.iter().sum::<f64>()).abs() < 1e-6);
        assert!(objective_terms(&mdp, &pi, &mu, 10, 2).is_err());
    }

    #[test]
    fn expectation_forms_match_matrix_form() {
        for seed in 0..5 {
            let (mdp, pi, mu) = triple(seed, 5, 3, 0.4);
            let matrix = objective_terms(&mdp, &pi, &mu, 1, 4).unwrap();
            for order in 1..=2 {
                for baseline in [ValueBaseline::QValues, ValueBaseline::Advantages] {
                    let e = objective_term_expectation_form(&mdp, &pi, &mu, 1, order, baseline).unwrap();
                    assert!((e - matrix[order - 1]).abs() < 1e-8, "order {order}");
                }
            }
            for order in 3..=4 {
                let e = higher_order_term(&mdp, &pi, &mu, 1, order, ValueBaseline::QValues).unwrap();
                assert!((e - matrix[order - 1]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn expectation_form_rejects_bad_inputs() {
        let (mdp, pi, mu) = triple(2, 3, 2, 0.1);
        assert!(objective_term_expectation_form(&mdp, &pi, &mu, 0, 3, ValueBaseline::QValues).is_err());
        assert!(higher_order_term(&mdp, &pi, &mu, 0, 2, ValueBaseline::QValues).is_err());
        let dirac = TabularPolicy::deterministic(2, &[0, 0, 1]).unwrap();
        assert!(objective_term_expectation_form(&mdp, &pi, &dirac, 0, 1, ValueBaseline::QValues).is_err());
        assert_eq!(
            higher_order_term(&mdp, &pi, &pi, 0, 3, ValueBaseline::QValues).unwrap(),
            0.0
        );
    }

    /// Two-state chain with deterministic transitions where pi differs from
    /// mu only at (state 1, action 0). Hand enumeration: `L_k` collects paths
    /// visiting the deviating pair `k` times.
    #[test]
    fn higher_order_term_on_two_state_chain() {
        // action 0 stays, action 1 switches; rewards only on (1, 0).
        let gamma = 0.5;
        let mdp = Mdp::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            gamma,
        )
        .unwrap();
        let mu = TabularPolicy::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let pi = TabularPolicy::new(2, 2, vec![0.5, 0.5, 0.6, 0.4]).unwrap();
        let matrix = objective_terms(&mdp, &pi, &mu, 0, 5).unwrap();
        for k in 3..=5 {
            let e = higher_order_term(&mdp, &pi, &mu, 0, k, ValueBaseline::QValues).unwrap();
            assert!((e - matrix[k - 1]).abs() < 1e-10);
        }
        // Brute-force: J(pi) - J(mu) = sum of all orders on this small chain.
        let diff = objective(&mdp, &pi, 0).unwrap() - objective(&mdp, &mu, 0).unwrap();
        let many = objective_terms(&mdp, &pi, &mu, 0, 60).unwrap();
        assert!((diff - many.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn lower_bound_examples() {
        let (mdp, pi, mu) = triple(4, 10, 5, 0.05);
        let same = monotonic_lower_bound(&mdp, &pi, &pi, 0, 2).unwrap();
        assert!((same - objective(&mdp, &pi, 0).unwrap()).abs() < 1e-12);
        let j_pi = objective(&mdp, &pi, 0).unwrap();
        for k in 1..=8 {
            let bound = monotonic_lower_bound(&mdp, &pi, &mu, 0, k).unwrap();
            assert!(j_pi - bound >= -1e-9);
        }
        assert!(j_pi - monotonic_lower_bound(&mdp, &pi, &mu, 0, 12).unwrap() < 1e-3);
        let far = perturbed_policy(&pi, 0.5, 9).unwrap();
        assert!(matches!(
            monotonic_lower_bound(&mdp, &pi, &far, 0, 2),
            Err(Error::OutsideRadius { .. })
        ));
    }

    #[test]
    fn report_is_consistent() {
        let (mdp, pi, mu) = triple(5, 10, 5, 0.09);
        let report = expansion_report(&mdp, &pi, &mu, 0, 3).unwrap();
        assert!(report.within_radius);
        assert!(report.identity_gap() < 1e-9);
        assert!(report.residual.norm_inf() <= report.residual_bound + 1e-9);
        assert!(report.lower_bound.unwrap() <= report.j_target + 1e-9);
        for (k, u) in report.order_terms_u.iter().enumerate() {
            let bound = term_bound(report.epsilon, 0.9, mdp.r_max(), k + 1).unwrap();
            assert!(u.norm_inf() <= bound + 1e-9);
        }
    }

    #[test]
    fn residual_contracts_within_radius() {
        let (mdp, pi, mu) = triple(6, 10, 5, 0.1);
        let x = 0.9 * policy_l1_distance(&pi, &mu).unwrap() / 0.1;
        let mut previous = residual(&mdp, &pi, &mu, 0).unwrap().norm_inf();
        for k in 1..8 {
            let current = residual(&mdp, &pi, &mu, k).unwrap().norm_inf();
            assert!(current <= x * previous * (1.0 + 1e-6) + 1e-15);
            previous = current;
        }
    }
}
