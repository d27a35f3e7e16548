//! Trajectory simulation and sample-based estimators of the objective orders.
//!
//! The Monte-Carlo estimators draw visitation times along a single rollout:
//! `t_1 ~ Geometric(1 - gamma)` on `{0, 1, ...}` and every further increment
//! `~ Geometric(1 - gamma)` conditioned on being `>= 1`. A sample of order `k`
//! is `prod_i (pi/mu - 1)(x_{t_i}, a_{t_i}) * f(x_{t_k}, a_{t_k})` with `f` the
//! exact `Q^mu` or `A^mu`; the reported mean carries the normalization
//! `gamma^{k-1} (1 - gamma)^{-k}`.
//!
//! Samples whose last time reaches the horizon are discarded and counted.
//! Work is split into fixed-size batches, each with its own ChaCha stream of
//! a root seed drawn from the caller's generator, and merged in batch order,
//! so results are bit-identical for any thread count.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mdp::{advantage, exact_q, Mdp, QTable, TabularPolicy, VTable};
use crate::rng;

const BATCH_SIZE: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// Rollout `(x_t, a_t, r_t)_{t<T}` under a behavior policy, plus the state
/// `x_T` reached after the last step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// `mu(a_t | x_t)` recorded at generation time.
    pub behavior_probs: Vec<f64>,
    pub final_state: usize,
    /// Seed of the generator when the rollout came from
    /// [`simulate_trajectory_seeded`].
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `pi(a_t|x_t) / mu(a_t|x_t)` at every step.
    pub fn ratios(&self, target: &TabularPolicy, behavior: &TabularPolicy) -> Result<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| {
                let mu = behavior.prob(s.state, s.action);
                if mu <= 0.0 {
                    return Err(Error::ZeroBehaviorProbability {
                        state: s.state,
                        action: s.action,
                    });
                }
                Ok(target.prob(s.state, s.action) / mu)
            })
            .collect()
    }
}

/// Inverse-CDF draw from a finite distribution.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last index with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn simulate_trajectory<R: Rng + ?Sized>(
    mdp: &Mdp,
    behavior: &TabularPolicy,
    start_state: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    mdp.check_state(start_state)?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if behavior.num_states() != mdp.num_states() || behavior.num_actions() != mdp.num_actions() {
        return Err(Error::DimensionMismatch("behavior policy does not match the MDP".into()));
    }
    let mut steps = Vec::with_capacity(horizon);
    let mut behavior_probs = Vec::with_capacity(horizon);
    let mut state = start_state;
    for _ in 0..horizon {
        let action = sample_categorical(behavior.row(state), rng);
        steps.push(Step {
            state,
            action,
            reward: mdp.reward(state, action),
        });
        behavior_probs.push(behavior.prob(state, action));
        state = sample_categorical(mdp.next_state_dist(state, action), rng);
    }
    Ok(Trajectory {
        steps,
        behavior_probs,
        final_state: state,
        seed: None,
    })
}

pub fn simulate_trajectory_seeded(
    mdp: &Mdp,
    behavior: &TabularPolicy,
    start_state: usize,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut traj = simulate_trajectory(mdp, behavior, start_state, horizon, &mut rng::seeded(seed))?;
    traj.seed = Some(seed);
    Ok(traj)
}

/// Reward table that is `r(x, a)` at every visited pair and zero elsewhere.
pub fn empirical_reward(
    trajectories: &[Trajectory],
    num_states: usize,
    num_actions: usize,
) -> DVector<f64> {
    let mut table = DVector::zeros(num_states * num_actions);
    for step in trajectories.iter().flat_map(|t| &t.steps) {
        table[step.state * num_actions + step.action] = step.reward;
    }
    table
}

/// `t ~ Geometric(1 - gamma)`, `P(t) = (1 - gamma) gamma^t`, optionally
/// conditioned on `t >= 1`.
pub fn sample_geometric_time<R: Rng + ?Sized>(gamma: f64, minimum: u64, rng: &mut R) -> Result<u64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )));
    }
    if minimum > 1 {
        return Err(Error::InvalidArgument(format!(
            "minimum time must be 0 or 1, got {minimum}"
        )));
    }
    let geometric =
        Geometric::new(1.0 - gamma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(minimum + geometric.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorResult {
    /// Normalized sample mean.
    pub mean: f64,
    /// Normalized `sample_stddev / sqrt(num_samples)`.
    pub standard_error: f64,
    /// Accepted samples.
    pub num_samples: usize,
    /// Samples dropped because their last time reached the horizon.
    pub discarded: usize,
    /// Constant multiplying the raw per-sample mean.
    pub normalization: f64,
    pub normalization_applied: bool,
}

impl EstimatorResult {
    pub fn discard_fraction(&self) -> f64 {
        let total = self.num_samples + self.discarded;
        if total == 0 {
            0.0
        } else {
            self.discarded as f64 / total as f64
        }
    }

    /// Normalized per-sample variance.
    pub fn sample_variance(&self) -> f64 {
        self.standard_error * self.standard_error * self.num_samples as f64
    }

    /// `|mean - reference| / standard_error`, or 0/inf when the error is zero.
    pub fn z_score(&self, reference: f64) -> f64 {
        let diff = (self.mean - reference).abs();
        if self.standard_error > 0.0 {
            diff / self.standard_error
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Count/mean/M2 accumulator with Chan's pairwise merge.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    count: usize,
    mean: f64,
    m2: f64,
    discarded: usize,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: Moments) -> Moments {
        if self.count == 0 {
            return Moments {
                discarded: self.discarded + other.discarded,
                ..other
            };
        }
        if other.count == 0 {
            return Moments {
                discarded: self.discarded + other.discarded,
                ..self
            };
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2
            + other.m2
            + delta * delta * (self.count as f64) * (other.count as f64) / count as f64;
        Moments {
            count,
            mean,
            m2,
            discarded: self.discarded + other.discarded,
        }
    }

    fn into_result(self, normalization: f64) -> EstimatorResult {
        let variance = if self.count > 1 {
            self.m2 / (self.count - 1) as f64
        } else {
            0.0
        };
        let se = if self.count > 0 {
            (variance / self.count as f64).sqrt()
        } else {
            f64::NAN
        };
        EstimatorResult {
            mean: self.mean * normalization,
            standard_error: se * normalization.abs(),
            num_samples: self.count,
            discarded: self.discarded,
            normalization,
            normalization_applied: true,
        }
    }
}

/// Normalization `gamma^{k-1} (1 - gamma)^{-k}` of an order-`k` expectation.
pub fn order_normalization(gamma: f64, order: usize) -> f64 {
    gamma.powi(order as i32 - 1) / (1.0 - gamma).powi(order as i32)
}

struct OrderSampler<'a> {
    mdp: &'a Mdp,
    behavior: &'a TabularPolicy,
    weights: Vec<f64>,
    values: QTable,
    start: usize,
    order: usize,
    horizon: usize,
    first: Geometric,
}

impl OrderSampler<'_> {
    /// One draw, or `None` when the sampled time reaches the horizon.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        let mut times = Vec::with_capacity(self.order);
        let mut t = self.first.sample(rng);
        times.push(t);
        for _ in 1..self.order {
            t += 1 + self.first.sample(rng);
            times.push(t);
        }
        let last = *times.last().expect("order >= 1");
        if last >= self.horizon as u64 {
            return None;
        }
        let na = self.mdp.num_actions();
        let mut state = self.start;
        let mut product = 1.0;
        let mut next_time = 0;
        for step in 0..=last {
            let action = sample_categorical(self.behavior.row(state), rng);
            if step == times[next_time] {
                product *= self.weights[state * na + action];
                next_time += 1;
                if step == last {
                    return Some(product * self.values.get(state, action));
                }
            }
            state = sample_categorical(self.mdp.next_state_dist(state, action), rng);
        }
        unreachable!("rollout always reaches the last sampled time")
    }
}

#[allow(clippy::too_many_arguments)]
fn estimate_order(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start_state: usize,
    order: usize,
    advantage_mode: bool,
    num_samples: usize,
    horizon: usize,
    root_seed: u64,
) -> Result<EstimatorResult> {
    mdp.check_state(start_state)?;
    if order == 0 {
        return Err(Error::InvalidArgument("order must be at least 1".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let gamma = mdp.discount();
    let weights: Vec<f64> = target.ratios(behavior)?.iter().map(|r| r - 1.0).collect();
    let values = if advantage_mode {
        advantage(mdp, behavior)?
    } else {
        exact_q(mdp, behavior)?
    };
    let sampler = OrderSampler {
        mdp,
        behavior,
        weights,
        values,
        start: start_state,
        order,
        horizon,
        first: Geometric::new(1.0 - gamma).map_err(|e| Error::InvalidArgument(e.to_string()))?,
    };
    let batches = num_samples.div_ceil(BATCH_SIZE);
    let partial: Vec<Moments> = (0..batches)
        .into_par_iter()
        .map(|batch| {
            let mut rng = rng::split(root_seed, batch as u64);
            let size = BATCH_SIZE.min(num_samples - batch * BATCH_SIZE);
            let mut moments = Moments::default();
            for _ in 0..size {
                match sampler.draw(&mut rng) {
                    Some(x) => moments.push(x),
                    None => moments.discarded += 1,
                }
            }
            moments
        })
        .collect();
    let merged = partial.into_iter().fold(Moments::default(), Moments::merge);
    Ok(merged.into_result(order_normalization(gamma, order)))
}

/// Monte-Carlo estimate of `L_1`; `advantage_mode` replaces `Q^mu` by `A^mu`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_l1_mc<R: Rng + ?Sized>(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start_state: usize,
    advantage_mode: bool,
    num_samples: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<EstimatorResult> {
    let seed = rng.next_u64();
    estimate_order(mdp, target, behavior, start_state, 1, advantage_mode, num_samples, horizon, seed)
}

/// Monte-Carlo estimate of `L_2`; `advantage_mode` replaces `Q^mu` by `A^mu`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_l2_mc<R: Rng + ?Sized>(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start_state: usize,
    advantage_mode: bool,
    num_samples: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<EstimatorResult> {
    let seed = rng.next_u64();
    estimate_order(mdp, target, behavior, start_state, 2, advantage_mode, num_samples, horizon, seed)
}

/// Monte-Carlo estimate of `L_k` with `Q^mu` at the last sampled pair.
#[allow(clippy::too_many_arguments)]
pub fn estimate_lk_mc<R: Rng + ?Sized>(
    mdp: &Mdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    start_state: usize,
    order: usize,
    num_samples: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<EstimatorResult> {
    let seed = rng.next_u64();
    estimate_order(mdp, target, behavior, start_state, order, false, num_samples, horizon, seed)
}

/// Enumeration estimate of the practical second-order objective over one
/// trajectory: `sum_t sum_{t'>t} (rho_t - 1)(rho_t' - 1) gamma^{t'-t} A_t' / T`.
/// The first index is uniform over the trajectory, the second discounted.
pub fn estimate_l2_enumeration(
    traj: &Trajectory,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    advantages: &[f64],
    gamma: f64,
) -> Result<f64> {
    let len = traj.len();
    if len < 2 {
        return Err(Error::TrajectoryTooShort { len, min: 2 });
    }
    if advantages.len() != len {
        return Err(Error::DimensionMismatch(format!(
            "{} advantages for a trajectory of length {len}",
            advantages.len()
        )));
    }
    let ratios = traj.ratios(target, behavior)?;
    let mut total = 0.0;
    for t in 0..len {
        let first = ratios[t] - 1.0;
        if first == 0.0 {
            continue;
        }
        let mut discount = 1.0;
        for later in t + 1..len {
            discount *= gamma;
            total += first * (ratios[later] - 1.0) * discount * advantages[later];
        }
    }
    Ok(total / len as f64)
}

/// `A_t = sum_{t'=t}^{T-1} gamma^{t'-t} r_t' + gamma^{T-t} V(x_T) - V(x_t)`.
pub fn naive_advantage(traj: &Trajectory, v_baseline: &VTable, gamma: f64) -> Vec<f64> {
    let mut ret = v_baseline.get(traj.final_state);
    let mut out = vec![0.0; traj.len()];
    for (t, step) in traj.steps.iter().enumerate().rev() {
        ret = step.reward + gamma * ret;
        out[t] = ret - v_baseline.get(step.state);
    }
    out
}
