//! Experiment grids behind the command-line tool.
//!
//! A config file is flat TOML whose keys override the defaults of the chosen
//! experiment; unknown keys are rejected. Each experiment yields a table
//! whose rows follow the grid order, plus a pass flag for suites that check
//! identities or bounds. Cells run in parallel but are collected in grid
//! order, so the CSV bytes never depend on the thread count.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    perturbed_policy, policy_l1_distance, random_mdp, value_iteration, Mdp,
    TabularPolicy,
};
use crate::offpolicy::operator_expansion_gap;
use crate::optimizer::{train, OptimizerConfig};
use crate::rng;
use crate::sampling::{
    empirical_reward, estimate_l1_mc, estimate_l2_mc, estimate_lk_mc, simulate_trajectory,
    Trajectory,
};
use crate::taylor::{
    expansion_report, monotonic_lower_bound, objective_terms, relative_expansion_error,
    within_radius,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Relative distance to the optimum counted as reaching it.
pub const OPTIMUM_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Figure1,
    OperatorSuite,
    BoundsSuite,
    EstimatorBench,
    Optimize,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Figure1,
        ExperimentKind::OperatorSuite,
        ExperimentKind::BoundsSuite,
        ExperimentKind::EstimatorBench,
        ExperimentKind::Optimize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Figure1 => "figure1",
            ExperimentKind::OperatorSuite => "operator_suite",
            ExperimentKind::BoundsSuite => "bounds_suite",
            ExperimentKind::EstimatorBench => "estimator_bench",
            ExperimentKind::Optimize => "optimize",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Resolved configuration. Not every key is read by every experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    /// Concentration of the Dirichlet transition rows.
    pub dirichlet: f64,
    pub start_state: usize,
    /// One random MDP (and policy pair) per seed.
    pub seeds: Vec<u64>,
    /// Target distances `||pi - mu||_1`.
    pub epsilons: Vec<f64>,
    /// Expansion orders, or policy-optimization orders for `optimize`.
    pub orders: Vec<usize>,
    /// Monte-Carlo samples per estimate.
    pub samples: usize,
    /// Rollout horizon for estimators and optimization.
    pub horizon: usize,
    /// Rollouts used to build the empirical reward table.
    pub reward_trajectories: usize,
    pub reward_horizon: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub eta: f64,
    pub batch: usize,
    pub delays: Vec<usize>,
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let base = Self {
            experiment: kind,
            num_states: 10,
            num_actions: 5,
            gamma: 0.9,
            dirichlet: 1.0,
            start_state: 0,
            seeds: (0..10).collect(),
            epsilons: (1..=10).map(|i| i as f64 / 100.0).collect(),
            orders: vec![0, 1, 2],
            samples: 100_000,
            horizon: 200,
            reward_trajectories: 10,
            reward_horizon: 100,
            iterations: 200,
            learning_rate: 5.0,
            eta: 1.0,
            batch: 8,
            delays: vec![0, 2],
        };
        match kind {
            ExperimentKind::Figure1 => base,
            ExperimentKind::OperatorSuite => Self {
                epsilons: (0..10).map(|i| 0.5 * i as f64 / 9.0).collect(),
                orders: (1..=6).collect(),
                ..base
            },
            ExperimentKind::BoundsSuite => Self {
                seeds: (0..20).collect(),
                orders: (1..=5).collect(),
                ..base
            },
            ExperimentKind::EstimatorBench => Self {
                seeds: (0..5).collect(),
                epsilons: vec![0.05, 0.1],
                orders: vec![1, 2, 3],
                ..base
            },
            ExperimentKind::Optimize => Self {
                num_states: 5,
                num_actions: 3,
                seeds: (0..20).collect(),
                orders: vec![1, 2],
                horizon: 50,
                ..base
            },
        }
    }

    /// Parses `text` as overrides on top of the defaults of `kind`.
    pub fn from_toml(kind: ExperimentKind, text: &str) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut table = match toml::Value::try_from(Self::defaults(kind)) {
            Ok(toml::Value::Table(t)) => t,
            Ok(_) => unreachable!("config serializes to a table"),
            Err(e) => return Err(Error::Config(e.to_string())),
        };
        for (key, value) in overrides {
            table.insert(key, value);
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if config.experiment != kind {
            return Err(Error::Config(format!(
                "config is for `{}` but `{kind}` was requested",
                config.experiment
            )));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Single-line JSON form written into CSV headers.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the seed list by consecutive seeds starting at `first`,
    /// keeping its length.
    pub fn with_first_seed(mut self, first: u64) -> Self {
        let n = self.seeds.len() as u64;
        self.seeds = (first..first + n).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.num_states == 0 || self.num_actions == 0 {
            return fail("num_states and num_actions must be positive");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1)");
        }
        if !(self.dirichlet > 0.0) {
            return fail("dirichlet must be positive");
        }
        if self.start_state >= self.num_states {
            return fail("start_state out of range");
        }
        if self.seeds.is_empty() || self.epsilons.is_empty() || self.orders.is_empty() {
            return fail("seeds, epsilons and orders must be non-empty");
        }
        if self.epsilons.iter().any(|e| !(0.0..=2.0).contains(e)) {
            return fail("epsilons must lie in [0, 2]");
        }
        if self.horizon == 0 || self.reward_horizon == 0 || self.batch == 0 {
            return fail("horizon, reward_horizon and batch must be positive");
        }
        match self.experiment {
            ExperimentKind::OperatorSuite | ExperimentKind::BoundsSuite => {
                if self.orders.contains(&0) {
                    return fail("orders must be at least 1");
                }
            }
            ExperimentKind::EstimatorBench => {
                if self.orders.contains(&0) || self.samples == 0 {
                    return fail("orders and samples must be at least 1");
                }
            }
            ExperimentKind::Optimize => {
                if self.orders.iter().any(|&o| o != 1 && o != 2) {
                    return fail("optimize orders must be 1 or 2");
                }
                if self.delays.is_empty() {
                    return fail("delays must be non-empty");
                }
                if !(self.learning_rate >= 0.0) || !(self.eta >= 0.0) {
                    return fail("learning_rate and eta must be non-negative");
                }
                if self.horizon < 2 {
                    return fail("horizon must be at least 2");
                }
            }
            ExperimentKind::Figure1 => {}
        }
        Ok(())
    }

    fn mdp(&self, seed: u64) -> Result<Mdp> {
        random_mdp(self.num_states, self.num_actions, self.dirichlet, rng::derive(seed, 0))?
            .with_discount(self.gamma)
    }

    fn behavior(&self, seed: u64) -> Result<TabularPolicy> {
        TabularPolicy::random(
            self.num_states,
            self.num_actions,
            1.0,
            &mut rng::seeded(rng::derive(seed, 1)),
        )
    }

    /// Target at distance `epsilon` from the behavior policy. The perturbation
    /// direction depends only on the seed, so the grid over `epsilon` uses
    /// common random numbers.
    fn target(&self, behavior: &TabularPolicy, seed: u64, epsilon: f64) -> Result<TabularPolicy> {
        perturbed_policy(behavior, epsilon, rng::derive(seed, 2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub kind: ExperimentKind,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    /// False when a checked identity or bound fails.
    pub passed: bool,
    pub summary: Vec<String>,
}

impl ExperimentOutput {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| *h == name)
    }

    /// Writes the schema line, the config line, the header and the rows.
    pub fn write_csv<W: Write>(&self, config: &ExperimentConfig, mut out: W) -> Result<()> {
        writeln!(out, "# schema: taypo-lab/{}/v{SCHEMA_VERSION}", self.kind)?;
        writeln!(out, "# config: {}", config.to_json()?)?;
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        writer.write_record(&self.header)?;
        for row in &self.rows {
            writer.write_record(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self, config: &ExperimentConfig) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(config, &mut buf)?;
        Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
    }
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn run(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    match config.experiment {
        ExperimentKind::Figure1 => run_figure1(config),
        ExperimentKind::OperatorSuite => run_operator_suite(config),
        ExperimentKind::BoundsSuite => run_bounds_suite(config),
        ExperimentKind::EstimatorBench => run_estimator_bench(config),
        ExperimentKind::Optimize => run_optimize(config),
    }
}

/// Reward table estimated from rollouts under `behavior`; rollout `j`
/// starts in state `j mod |X|`.
pub fn empirical_reward_for(config: &ExperimentConfig, mdp: &Mdp, behavior: &TabularPolicy, seed: u64) -> Result<nalgebra::DVector<f64>> {
    let root = rng::derive(seed, 3);
    let trajectories: Vec<Trajectory> = (0..config.reward_trajectories)
        .map(|j| {
            simulate_trajectory(
                mdp,
                behavior,
                j % config.num_states,
                config.reward_horizon,
                &mut rng::split(root, j as u64),
            )
        })
        .collect::<Result<_>>()?;
    Ok(empirical_reward(&trajectories, config.num_states, config.num_actions))
}

struct Figure1Cell {
    distance: f64,
    analytic: f64,
    empirical: f64,
}

/// Relative errors of the order-`K` expansion with true and estimated rewards.
pub fn run_figure1(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut orders = config.orders.clone();
    orders.sort_unstable();
    let per_mdp: Vec<Vec<Vec<Figure1Cell>>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let mdp = config.mdp(seed)?;
            let behavior = config.behavior(seed)?;
            let reward = mdp.reward_vector();
            let estimated = empirical_reward_for(config, &mdp, &behavior, seed)?;
            config
                .epsilons
                .iter()
                .map(|&eps| {
                    let target = config.target(&behavior, seed, eps)?;
                    let distance = policy_l1_distance(&target, &behavior)?;
                    orders
                        .iter()
                        .map(|&k| {
                            Ok(Figure1Cell {
                                distance,
                                analytic: relative_expansion_error(&mdp, &target, &behavior, &reward, k)?,
                                empirical: relative_expansion_error(&mdp, &target, &behavior, &estimated, k)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let n = config.seeds.len() as f64;
    let mean = |e: usize, k: usize, pick: fn(&Figure1Cell) -> f64| {
        per_mdp.iter().map(|m| pick(&m[e][k])).sum::<f64>() / n
    };
    let analytic = |c: &Figure1Cell| c.analytic;
    let empirical = |c: &Figure1Cell| c.empirical;

    let mut rows = Vec::new();
    for (e, &eps) in config.epsilons.iter().enumerate() {
        let inside = within_radius(eps, config.gamma);
        for (k, &order) in orders.iter().enumerate() {
            for (mode, pick) in [("analytic", analytic as fn(&Figure1Cell) -> f64), ("empirical", empirical)] {
                let avg = mean(e, k, pick);
                for (i, &seed) in config.seeds.iter().enumerate() {
                    let cell = &per_mdp[i][e][k];
                    rows.push(vec![
                        seed.to_string(),
                        i.to_string(),
                        num(eps),
                        num(cell.distance),
                        inside.to_string(),
                        order.to_string(),
                        mode.to_string(),
                        num(pick(cell)),
                        num(avg),
                    ]);
                }
            }
        }
    }

    // the averaged analytic error must not grow with K inside the radius
    let mut violations = 0;
    for (e, &eps) in config.epsilons.iter().enumerate() {
        if !within_radius(eps, config.gamma) {
            continue;
        }
        for k in 1..orders.len() {
            if mean(e, k, analytic) > mean(e, k - 1, analytic) + 1e-12 {
                violations += 1;
            }
        }
    }
    let grid_mean = |pick: fn(&Figure1Cell) -> f64| {
        per_mdp.iter().flatten().flatten().map(pick).sum::<f64>()
            / (per_mdp.len() * config.epsilons.len() * orders.len()) as f64
    };
    Ok(ExperimentOutput {
        kind: ExperimentKind::Figure1,
        header: vec![
            "seed",
            "mdp_index",
            "epsilon",
            "distance",
            "within_radius",
            "K",
            "mode",
            "relative_error",
            "mean_relative_error",
        ],
        rows,
        passed: violations == 0,
        summary: vec![
            format!("monotonicity violations in K (analytic, averaged): {violations}"),
            format!(
                "grid-average relative error: analytic {:.6e}, empirical {:.6e}",
                grid_mean(analytic),
                grid_mean(empirical)
            ),
        ],
    })
}

pub const OPERATOR_GAP_TOLERANCE: f64 = 1e-8;

/// `||(R_1)^K Q^mu - (Q^mu + sum U_k)||_inf` over seeds x epsilons x K.
pub fn run_operator_suite(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let cells: Vec<(u64, f64)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.epsilons.iter().map(move |&e| (s, e)))
        .collect();
    let results: Vec<(f64, Vec<f64>)> = cells
        .par_iter()
        .map(|&(seed, eps)| {
            let mdp = config.mdp(seed)?;
            let behavior = config.behavior(seed)?;
            let target = config.target(&behavior, seed, eps)?;
            let gaps = config
                .orders
                .iter()
                .map(|&k| operator_expansion_gap(&mdp, &target, &behavior, k))
                .collect::<Result<Vec<_>>>()?;
            Ok((policy_l1_distance(&target, &behavior)?, gaps))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for (&(seed, eps), (distance, gaps)) in cells.iter().zip(&results) {
        for (&k, &gap) in config.orders.iter().zip(gaps) {
            let ok = gap < OPERATOR_GAP_TOLERANCE;
            worst = worst.max(gap);
            failures += usize::from(!ok);
            rows.push(vec![
                seed.to_string(),
                num(eps),
                num(*distance),
                within_radius(*distance, config.gamma).to_string(),
                k.to_string(),
                num(gap),
                ok.to_string(),
            ]);
        }
    }
    Ok(ExperimentOutput {
        kind: ExperimentKind::OperatorSuite,
        header: vec!["seed", "epsilon", "distance", "within_radius", "K", "gap", "passed"],
        rows,
        passed: failures == 0,
        summary: vec![format!(
            "{} cells, {failures} above {OPERATOR_GAP_TOLERANCE:e}, largest gap {worst:e}",
            results.len() * config.orders.len()
        )],
    })
}

pub const BOUND_SLACK: f64 = 1e-9;

/// Residual bound and lower-bound certificate over seeds x epsilons x K.
/// Cells outside the convergence radius are reported but not checked.
pub fn run_bounds_suite(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let cells: Vec<(u64, f64)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.epsilons.iter().map(move |&e| (s, e)))
        .collect();
    let results: Vec<Vec<Vec<String>>> = cells
        .par_iter()
        .map(|&(seed, eps)| {
            let mdp = config.mdp(seed)?;
            let behavior = config.behavior(seed)?;
            let target = config.target(&behavior, seed, eps)?;
            config
                .orders
                .iter()
                .map(|&k| {
                    let report = expansion_report(&mdp, &target, &behavior, config.start_state, k)?;
                    let residual = report.residual.norm_inf();
                    let lower = if report.within_radius {
                        Some(monotonic_lower_bound(&mdp, &target, &behavior, config.start_state, k)?)
                    } else {
                        None
                    };
                    let ok = !report.within_radius
                        || (residual <= report.residual_bound + BOUND_SLACK
                            && lower.is_none_or(|l| report.j_target >= l - BOUND_SLACK));
                    Ok(vec![
                        seed.to_string(),
                        num(eps),
                        num(report.epsilon),
                        report.within_radius.to_string(),
                        k.to_string(),
                        num(residual),
                        num(report.residual_bound),
                        num(report.j_target),
                        num(report.j_behavior),
                        lower.map_or_else(String::new, num),
                        ok.to_string(),
                    ])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<String>> = results.into_iter().flatten().collect();
    let failures = rows.iter().filter(|r| r.last().map(String::as_str) == Some("false")).count();
    Ok(ExperimentOutput {
        kind: ExperimentKind::BoundsSuite,
        header: vec![
            "seed",
            "epsilon",
            "distance",
            "within_radius",
            "K",
            "residual_inf",
            "residual_bound",
            "j_target",
            "j_behavior",
            "lower_bound",
            "passed",
        ],
        passed: failures == 0,
        summary: vec![format!("{} cells, {failures} bound violations", rows.len())],
        rows,
    })
}

/// Monte-Carlo estimates of `L_k` against the matrix form. Orders 1 and 2 are
/// run with both `Q^mu` and `A^mu`; higher orders with `Q^mu` only.
pub fn run_estimator_bench(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        for &eps in &config.epsilons {
            for &order in &config.orders {
                for advantage in [false, true] {
                    if advantage && order > 2 {
                        continue;
                    }
                    cells.push((seed, eps, order, advantage));
                }
            }
        }
    }
    let rows: Vec<Vec<String>> = cells
        .par_iter()
        .map(|&(seed, eps, order, advantage)| {
            let mdp = config.mdp(seed)?;
            let behavior = config.behavior(seed)?;
            let target = config.target(&behavior, seed, eps)?;
            let exact = objective_terms(&mdp, &target, &behavior, config.start_state, order)?[order - 1];
            let tag = 100 + 2 * order as u64 + u64::from(advantage);
            let mut gen = rng::seeded(rng::derive(rng::derive(seed, tag), eps.to_bits()));
            let (s, n, h) = (config.start_state, config.samples, config.horizon);
            let est = match order {
                1 => estimate_l1_mc(&mdp, &target, &behavior, s, advantage, n, h, &mut gen)?,
                2 => estimate_l2_mc(&mdp, &target, &behavior, s, advantage, n, h, &mut gen)?,
                k => estimate_lk_mc(&mdp, &target, &behavior, s, k, n, h, &mut gen)?,
            };
            Ok(vec![
                seed.to_string(),
                num(eps),
                order.to_string(),
                if advantage { "advantage" } else { "q_value" }.to_string(),
                est.num_samples.to_string(),
                est.discarded.to_string(),
                num(est.mean),
                num(est.standard_error),
                num(exact),
                num(est.z_score(exact)),
            ])
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentOutput {
        kind: ExperimentKind::EstimatorBench,
        header: vec![
            "seed",
            "epsilon",
            "order",
            "baseline",
            "num_samples",
            "discarded",
            "estimate",
            "standard_error",
            "exact",
            "z_score",
        ],
        summary: vec![format!("{} estimates", rows.len())],
        rows,
        passed: true,
    })
}

/// Per-iteration logs of sample-based optimization over seeds x orders x delays.
pub fn run_optimize(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        for &order in &config.orders {
            for &delay in &config.delays {
                cells.push((seed, order, delay));
            }
        }
    }
    let results: Vec<(Vec<Vec<String>>, bool)> = cells
        .par_iter()
        .map(|&(seed, order, delay)| {
            let mdp = config.mdp(seed)?;
            let optimum = value_iteration(&mdp, 1e-12, 100_000)?.values.get(config.start_state);
            let opt = OptimizerConfig {
                order: order as u8,
                eta: config.eta,
                learning_rate: config.learning_rate,
                trust_region_epsilon: None,
                delay,
                batch: config.batch,
                horizon: config.horizon,
                seed: rng::derive(seed, 4),
                start_state: config.start_state,
                ppo_clip: None,
            };
            let (_, log) = train(&mdp, &opt, config.iterations)?;
            let reached = (optimum - log.final_objective()).abs() <= OPTIMUM_TOLERANCE * optimum.abs();
            let rows = log
                .rows
                .iter()
                .map(|r| {
                    vec![
                        seed.to_string(),
                        order.to_string(),
                        delay.to_string(),
                        r.iteration.to_string(),
                        num(r.objective),
                        num(r.surrogate),
                        num(r.l1_distance),
                        num(r.gradient_norm),
                        num(optimum),
                    ]
                })
                .collect();
            Ok((rows, reached))
        })
        .collect::<Result<_>>()?;
    let reached = results.iter().filter(|(_, r)| *r).count();
    let summary = vec![format!(
        "{reached}/{} runs end within {}% of the optimum",
        results.len(),
        OPTIMUM_TOLERANCE * 100.0
    )];
    Ok(ExperimentOutput {
        kind: ExperimentKind::Optimize,
        header: vec![
            "seed",
            "order",
            "delay",
            "iteration",
            "objective",
            "surrogate",
            "l1_distance",
            "gradient_norm",
            "optimum",
        ],
        rows: results.into_iter().flat_map(|(r, _)| r).collect(),
        passed: true,
        summary,
    })
}
