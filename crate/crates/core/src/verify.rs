//! Oracle suites: randomized checks of the closed forms against the
//! reference computations in [`crate::oracle`]. Each suite returns a report
//! with the numbers behind its verdict.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::domain::{ClientProfile, ProcessorRef, SystemTopology};
use crate::models::{self, ModelSpec, WeightVector};
use crate::oracle::{analytic_plan_objective, grid_search_beta, grid_search_plan, AggregationRule, FrozenRound};
use crate::rng::{derive_rng, Stream};
use crate::sampling::{
    gvr_magnitudes, lvr_magnitudes, random_plan, solve_plan, stalevr_magnitudes, MagnitudeRow, MagnitudeTable,
    PLAN_TOLERANCE,
};
use crate::scalar::norm_sq;
use crate::staleness::{beta_opt, StaleStore};
use crate::synthdata::ClientDataset;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub details: Vec<String>,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", if self.passed { "PASS" } else { "FAIL" }, self.name)?;
        for d in &self.details {
            write!(f, "\n    {d}")?;
        }
        Ok(())
    }
}

/// Suite names accepted by [`run_suite`].
pub const SUITES: [&str; 6] = ["plan", "beta", "unbiased", "variance", "gradient", "constraints"];

/// Runs one suite at its acceptance settings.
pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    match name {
        "plan" => plan_optimality(100, 0.005, seed),
        "beta" => beta_optimality(100, seed),
        "unbiased" => unbiasedness(100_000, seed),
        "variance" => variance_reduction(100_000, seed),
        "gradient" => gradient_check(50, seed),
        "constraints" => plan_constraints(1000, seed),
        other => Err(crate::MmflError::OracleGuard(format!(
            "unknown suite {other:?}; expected one of {SUITES:?}"
        ))),
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn random_magnitude<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z.exp()
}

/// Closed-form plans against the exact grid minimum on random instances with
/// at most three processors and two models.
pub fn plan_optimality(instances: usize, step: f64, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = derive_rng(seed, Stream::Fuzz, &[1]);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    let row_cap = (1.0 / step).round() as usize;
    for k in 0..instances {
        let v = rng.random_range(1..=3usize);
        let s = rng.random_range(1..=2usize);
        let rows: Vec<MagnitudeRow<f64>> = (0..v)
            .map(|c| {
                let mut models: Vec<usize> = (0..s).filter(|_| rng.random_bool(0.7)).collect();
                if models.is_empty() {
                    models.push(rng.random_range(0..s));
                }
                MagnitudeRow {
                    processor: ProcessorRef::new(c, 0),
                    entries: models.into_iter().map(|m| (m, random_magnitude(&mut rng))).collect(),
                }
            })
            .collect();
        let pairs: usize = rows.iter().map(|r| r.entries.len()).sum();
        let units = rng.random_range(pairs..=v * row_cap);
        let m = units as f64 * step;
        let table = MagnitudeTable::from_rows(rows);
        let plan = solve_plan(&table, m)?;
        plan.validate(PLAN_TOLERANCE)?;
        let closed = analytic_plan_objective(&table, &plan);
        let grid = grid_search_plan(&table, m, step)?;
        let gap = closed - grid.objective;
        worst_gap = worst_gap.max(gap);
        if gap > 1e-6 {
            failures.push(format!("instance {k}: closed {closed:.9} > grid {:.9} (m = {m})", grid.objective));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut details = vec![format!(
        "{instances} instances, step {step}: worst closed - grid = {worst_gap:.3e} (tolerance 1e-6), {secs:.1} s"
    )];
    let passed = failures.is_empty() && secs < 60.0;
    details.extend(failures.into_iter().take(5));
    Ok(SuiteReport {
        name: "plan optimality",
        passed,
        details,
    })
}

/// Projection coefficient against a grid over `[-3, 3]` with step `1e-3`.
pub fn beta_optimality(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = derive_rng(seed, Stream::Fuzz, &[2]);
    let mut worst = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for k in 0..instances {
        let h: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c: f64 = rng.random_range(-2.5..2.5);
        let noise: f64 = rng.random_range(0.0..2.0);
        let g: Vec<f64> = h
            .iter()
            .map(|x| c * x + noise * gauss(&mut rng))
            .collect();
        let beta = beta_opt(&g, &h);
        let resid: f64 = norm_sq(&g.iter().zip(&h).map(|(a, b)| a - beta * b).collect::<Vec<_>>());
        let (_, grid) = grid_search_beta(&g, &h, -3.0, 3.0, 1e-3);
        worst = worst.max(resid - grid);
        if resid > grid + 1e-6 {
            failures.push(format!("pair {k}: residual {resid:.9} > grid {grid:.9}"));
        }
    }
    let mut details = vec![format!(
        "{instances} pairs in R^20: worst residual - grid = {worst:.3e} (tolerance 1e-6)"
    )];
    let passed = failures.is_empty();
    details.extend(failures.into_iter().take(5));
    Ok(SuiteReport {
        name: "beta optimality",
        passed,
        details,
    })
}

/// Three processors (one client with one slot, one with two), two models,
/// frozen updates and stale memory, and a closed-form plan.
pub fn frozen_instance(seed: u64) -> Result<FrozenRound<f64>> {
    let topology = SystemTopology::build(
        vec![
            ClientProfile::new(0, 1, &[(0, 30), (1, 10)]),
            ClientProfile::new(1, 2, &[(0, 10), (1, 40)]),
        ],
        2,
    )?;
    let mut rng = derive_rng(seed, Stream::Fuzz, &[3]);
    let dim = 3;
    let mut updates = vec![BTreeMap::new(), BTreeMap::new()];
    let mut store = StaleStore::new();
    for (s, per_model) in updates.iter_mut().enumerate() {
        for i in 0..2 {
            let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let h: Vec<f64> = g
                .iter()
                .map(|x| 0.8 * x + 0.3 * gauss(&mut rng))
                .collect();
            store.refresh(i, s, &h, 0);
            per_model.insert(i, g);
        }
    }
    let norms: BTreeMap<(usize, usize), f64> = updates
        .iter()
        .enumerate()
        .flat_map(|(s, m)| m.iter().map(move |(&i, g)| ((i, s), norm_sq(g).sqrt())))
        .collect();
    let plan = solve_plan(&gvr_magnitudes(&topology, &norms, &[1.0, 1.0])?, 1.8)?;
    Ok(FrozenRound {
        topology,
        plan,
        updates,
        store,
        weights: vec![vec![0.0; dim]; 2],
    })
}

fn beta_opt_rule(frozen: &FrozenRound<f64>) -> AggregationRule<f64> {
    AggregationRule::Stale(
        frozen
            .updates
            .iter()
            .enumerate()
            .map(|(s, m)| {
                m.iter()
                    .map(|(&i, g)| (i, beta_opt(g, frozen.store.h(i, s).expect("stale state"))))
                    .collect()
            })
            .collect(),
    )
}

fn constant_rule(frozen: &FrozenRound<f64>, beta: f64) -> AggregationRule<f64> {
    AggregationRule::Stale(
        frozen
            .updates
            .iter()
            .map(|m| m.keys().map(|&i| (i, beta)).collect())
            .collect(),
    )
}

/// Monte-Carlo mean of every aggregation rule against the full step.
pub fn unbiasedness(draws: usize, seed: u64) -> Result<SuiteReport> {
    let frozen = frozen_instance(seed)?;
    let rules = [
        ("plain", AggregationRule::Plain),
        ("stale beta=1", constant_rule(&frozen, 1.0)),
        ("stale beta=0.5", constant_rule(&frozen, 0.5)),
        ("stale beta_opt", beta_opt_rule(&frozen)),
    ];
    let mut passed = true;
    let mut details = Vec::new();
    for (r, (name, rule)) in rules.iter().enumerate() {
        for s in 0..frozen.topology.num_models() {
            let mut rng = derive_rng(seed, Stream::Fuzz, &[4, r as u64, s as u64]);
            let stats = frozen.monte_carlo(s, rule, draws, &mut rng)?;
            let full = frozen.full_step(s);
            let worst = stats
                .mean
                .iter()
                .zip(&full)
                .zip(&stats.std_err)
                .map(|((m, f), se)| (m - f).abs() / se)
                .fold(0.0, f64::max);
            passed &= worst <= 3.0;
            details.push(format!("{name}, model {s}: worst |mean - full| = {worst:.2} std errors"));
        }
    }
    Ok(SuiteReport {
        name: "unbiasedness",
        passed,
        details,
    })
}

/// Monte-Carlo variance of the optimal stale rule against plain and naive
/// aggregation, and against its closed form.
pub fn variance_reduction(draws: usize, seed: u64) -> Result<SuiteReport> {
    let frozen = frozen_instance(seed)?;
    let opt = beta_opt_rule(&frozen);
    let mut passed = true;
    let mut details = Vec::new();
    for s in 0..frozen.topology.num_models() {
        let mc = |rule: &AggregationRule<f64>, tag: u64| -> Result<f64> {
            let mut rng = derive_rng(seed, Stream::Fuzz, &[5, tag, s as u64]);
            Ok(frozen.monte_carlo(s, rule, draws, &mut rng)?.variance)
        };
        let v_opt = mc(&opt, 0)?;
        let v_plain = mc(&AggregationRule::Plain, 1)?;
        let v_naive = mc(&constant_rule(&frozen, 1.0), 2)?;
        let analytic = frozen.analytic_variance(s, &opt);
        let rel = (v_opt - analytic).abs() / analytic;
        let ok = v_opt <= v_plain && v_opt <= v_naive && rel <= 0.02;
        passed &= ok;
        details.push(format!(
            "model {s}: beta_opt {v_opt:.5}, plain {v_plain:.5}, beta=1 {v_naive:.5}, analytic {analytic:.5} (rel diff {rel:.4})"
        ));
    }
    Ok(SuiteReport {
        name: "variance reduction",
        passed,
        details,
    })
}

/// Central finite differences of the loss along random directions.
pub fn gradient_check(checks: usize, seed: u64) -> Result<SuiteReport> {
    let kinds = [
        ("softmax-linear", ModelSpec::softmax_linear(5, 4)),
        ("mlp", ModelSpec::mlp(5, vec![6, 4], 3)),
    ];
    let mut passed = true;
    let mut details = Vec::new();
    for (k, (name, spec)) in kinds.iter().enumerate() {
        let mut rng = derive_rng(seed, Stream::Fuzz, &[6, k as u64]);
        let mut worst: f64 = 0.0;
        for _ in 0..checks {
            let n = rng.random_range(1..=8);
            let features: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..spec.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let labels = (0..n).map(|_| rng.random_range(0..spec.num_labels)).collect();
            let data = ClientDataset::new(features, labels, 0)?;
            let mut w = WeightVector::<f64>::init(spec, &mut rng);
            for x in w.iter_mut() {
                *x += 0.5 * gauss(&mut rng);
            }
            let dir: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let g = models::gradient(&w, &data, spec)?;
            let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let eps = 1e-5;
            let shifted = |sign: f64| -> Result<f64> {
                let wp: Vec<f64> = w.iter().zip(&dir).map(|(a, d)| a + sign * eps * d).collect();
                models::loss(&wp, &data, spec)
            };
            let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps);
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < 1e-10 { 0.0 } else { (analytic - numeric).abs() / scale };
            worst = worst.max(rel);
        }
        passed &= worst < 1e-4;
        details.push(format!("{name}: worst relative error {worst:.3e} over {checks} checks (tolerance 1e-4)"));
    }
    Ok(SuiteReport {
        name: "gradient",
        passed,
        details,
    })
}

/// Random topology with random availability, processor counts and data.
pub fn fuzz_topology<R: Rng + ?Sized>(rng: &mut R) -> Result<SystemTopology<f64>> {
    let num_models = rng.random_range(1..=4usize);
    let num_clients = rng.random_range(1..=12usize);
    let mut profiles = Vec::with_capacity(num_clients);
    let mut covered = BTreeSet::new();
    for c in 0..num_clients {
        let mut samples = Vec::new();
        for s in 0..num_models {
            if rng.random_bool(0.6) {
                samples.push((s, rng.random_range(1..=200usize)));
            }
        }
        if samples.is_empty() {
            samples.push((rng.random_range(0..num_models), rng.random_range(1..=200usize)));
        }
        covered.extend(samples.iter().map(|x| x.0));
        let b = rng.random_range(1..=samples.len());
        profiles.push(ClientProfile::new(c, b, &samples));
    }
    // Every model needs at least one client.
    for s in 0..num_models {
        if !covered.contains(&s) {
            let c = rng.random_range(0..num_clients);
            let p = &profiles[c];
            let mut samples: Vec<(usize, usize)> = p.samples_per_model.iter().map(|(&k, &v)| (k, v)).collect();
            samples.push((s, rng.random_range(1..=200usize)));
            profiles[c] = ClientProfile::new(c, p.num_processors, &samples);
        }
    }
    SystemTopology::build(profiles, num_models)
}

/// Every plan builder on fuzzed topologies, budgets and magnitudes.
pub fn plan_constraints(topologies: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = derive_rng(seed, Stream::Fuzz, &[7]);
    let mut failures = Vec::new();
    let mut plans = 0;
    for k in 0..topologies {
        let topo = fuzz_topology(&mut rng)?;
        let v = topo.total_processors() as f64;
        let budget = if rng.random_bool(0.1) { v } else { rng.random_range(0.01..=1.0) * v };
        let values = |rng: &mut rand_chacha::ChaCha8Rng| -> BTreeMap<(usize, usize), f64> {
            (0..topo.num_models())
                .flat_map(|s| topo.model_clients(s).iter().map(move |&i| (i, s)))
                .map(|key| {
                    let x = if rng.random_bool(0.1) { 0.0 } else { random_magnitude(rng) };
                    (key, x)
                })
                .collect()
        };
        let lrs: Vec<f64> = (0..topo.num_models()).map(|_| rng.random_range(0.001..0.5)).collect();
        let built = [
            ("random", random_plan(&topo, budget)),
            ("lvr", lvr_magnitudes(&topo, &values(&mut rng)).and_then(|t| solve_plan(&t, budget))),
            ("gvr", gvr_magnitudes(&topo, &values(&mut rng), &lrs).and_then(|t| solve_plan(&t, budget))),
            (
                "stalevr",
                stalevr_magnitudes(&topo, &values(&mut rng), &lrs).and_then(|t| solve_plan(&t, budget)),
            ),
        ];
        for (name, plan) in built {
            plans += 1;
            if let Err(e) = plan.and_then(|p| p.validate(PLAN_TOLERANCE)) {
                failures.push(format!("topology {k}, {name}, m = {budget}: {e}"));
            }
        }
    }
    let mut details = vec![format!(
        "{topologies} topologies, {plans} plans, {} violations",
        failures.len()
    )];
    let passed = failures.is_empty();
    details.extend(failures.into_iter().take(5));
    Ok(SuiteReport {
        name: "plan constraints",
        passed,
        details,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(plan_optimality(5, 0.01, 1).unwrap().passed);
        assert!(beta_optimality(10, 1).unwrap().passed);
        assert!(gradient_check(5, 1).unwrap().passed);
        assert!(plan_constraints(50, 1).unwrap().passed);
    }

    #[test]
    fn frozen_instance_has_three_processors() {
        let f = frozen_instance(0).unwrap();
        assert_eq!(f.topology.total_processors(), 3);
        f.plan.validate(PLAN_TOLERANCE).unwrap();
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("everything", 0).is_err());
    }
}
