//! Independent reference computations used to check the optimised paths:
//! exhaustive grid search over plans and coefficients, and Monte-Carlo
//! estimates of aggregation moments.

use std::collections::BTreeMap;

use rand::Rng;

use crate::domain::{ProcessorRef, SystemTopology};
use crate::engine::{aggregate_plain, aggregate_stale_vr, AggregationInput};
use crate::sampling::{sample_assignment, MagnitudeTable, PlanRow, SamplingPlan};
use crate::staleness::StaleStore;
use crate::{MmflError, Result, Scalar};

/// Largest number of (processor, model) pairs the plan grid search accepts.
pub const GRID_MAX_PAIRS: usize = 6;

/// `sum_{(i,b),s} (1/p - 1) M^2` for pairs with positive magnitude.
pub fn analytic_plan_objective<T: Scalar>(table: &MagnitudeTable<T>, plan: &SamplingPlan<T>) -> f64 {
    let mut total = 0.0;
    for row in table.rows() {
        for &(s, m) in &row.entries {
            let p = plan.prob(row.processor, s).to_f64_lossy();
            let m = m.to_f64_lossy();
            total += (1.0 / p - 1.0) * m * m;
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOptimum {
    pub objective: f64,
    pub plan: SamplingPlan<f64>,
}

fn grid_units(x: f64, step: f64, what: &str) -> Result<usize> {
    let u = x / step;
    let r = u.round();
    if (u - r).abs() > 1e-9 * r.max(1.0) || r < 0.0 {
        return Err(MmflError::OracleGuard(format!("{what} = {x} is not a multiple of the grid step {step}")));
    }
    Ok(r as usize)
}

type PairRows = Vec<(ProcessorRef, Vec<(usize, f64)>)>;

fn table_pairs<T: Scalar>(table: &MagnitudeTable<T>) -> Result<PairRows> {
    let rows: Vec<_> = table
        .rows()
        .iter()
        .map(|r| {
            (
                r.processor,
                r.entries.iter().map(|&(s, m)| (s, m.to_f64_lossy())).collect::<Vec<_>>(),
            )
        })
        .collect();
    let pairs: usize = rows.iter().map(|r| r.1.len()).sum();
    if pairs > GRID_MAX_PAIRS {
        return Err(MmflError::OracleGuard(format!(
            "grid search over {pairs} (processor, model) pairs exceeds the limit of {GRID_MAX_PAIRS}"
        )));
    }
    Ok(rows)
}

/// Cost `sum M^2 / p` and units of the cheapest admissible grid row for
/// every row total. Each probability is at least one step; the row total is
/// at most one.
fn row_options(mags: &[(usize, f64)], step: f64, row_cap: usize) -> BTreeMap<usize, (f64, Vec<usize>)> {
    let mut best: BTreeMap<usize, (f64, Vec<usize>)> = BTreeMap::from([(0, (0.0, Vec::new()))]);
    for &(_, m) in mags {
        let mut next: BTreeMap<usize, (f64, Vec<usize>)> = BTreeMap::new();
        for (&t, (c, ks)) in &best {
            for k in 1..=row_cap.saturating_sub(t) {
                let cost = c + m * m / (k as f64 * step);
                match next.get(&(t + k)) {
                    Some((b, _)) if *b <= cost => {}
                    _ => {
                        let mut v = ks.clone();
                        v.push(k);
                        next.insert(t + k, (cost, v));
                    }
                }
            }
        }
        best = next;
    }
    best
}

fn plan_from_units(
    rows: &[(ProcessorRef, Vec<(usize, f64)>)],
    units: &[Vec<usize>],
    step: f64,
    budget: f64,
) -> SamplingPlan<f64> {
    let plan_rows = rows
        .iter()
        .zip(units)
        .map(|((processor, mags), ks)| PlanRow {
            processor: *processor,
            probs: mags.iter().zip(ks).map(|(&(s, _), &k)| (s, k as f64 * step)).collect(),
        })
        .collect();
    SamplingPlan::new(plan_rows, budget, Default::default())
}

fn objective_from_cost(rows: &[(ProcessorRef, Vec<(usize, f64)>)], cost: f64) -> f64 {
    let sum_sq: f64 = rows.iter().flat_map(|r| r.1.iter()).map(|&(_, m)| m * m).sum();
    cost - sum_sq
}

/// Exact minimum of the plan objective over the grid `{step, 2 step, ...}`
/// with row sums at most one and total exactly `m`.
///
/// The objective separates by processor and the rows only couple through the
/// total, so per-row minima are combined by min-plus convolution over units.
pub fn grid_search_plan<T: Scalar>(table: &MagnitudeTable<T>, m: f64, step: f64) -> Result<GridOptimum> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(MmflError::OracleGuard(format!("grid step {step} outside (0, 1]")));
    }
    let rows = table_pairs(table)?;
    let row_cap = grid_units(1.0, step, "row cap")?;
    let target = grid_units(m, step, "budget")?;
    let options: Vec<_> = rows.iter().map(|r| row_options(&r.1, step, row_cap)).collect();

    // dp[t] = (cost, per-row choice of total units) over the rows seen so far.
    let mut dp: BTreeMap<usize, (f64, Vec<usize>)> = BTreeMap::from([(0, (0.0, Vec::new()))]);
    for opts in &options {
        let mut next: BTreeMap<usize, (f64, Vec<usize>)> = BTreeMap::new();
        for (&t, (c, path)) in &dp {
            for (&u, (rc, _)) in opts {
                let tt = t + u;
                if tt > target {
                    break;
                }
                let cost = c + rc;
                match next.get(&tt) {
                    Some((best, _)) if *best <= cost => {}
                    _ => {
                        let mut p = path.clone();
                        p.push(u);
                        next.insert(tt, (cost, p));
                    }
                }
            }
        }
        dp = next;
    }
    let (cost, path) = dp
        .remove(&target)
        .ok_or_else(|| MmflError::OracleGuard(format!("no grid plan reaches budget {m} with step {step}")))?;
    let units: Vec<Vec<usize>> = path
        .iter()
        .zip(&options)
        .map(|(u, opts)| opts[u].1.clone())
        .collect();
    Ok(GridOptimum {
        objective: objective_from_cost(&rows, cost),
        plan: plan_from_units(&rows, &units, step, m),
    })
}

/// Plain exhaustive enumeration of every grid plan; only for tiny grids.
pub fn brute_force_plan<T: Scalar>(table: &MagnitudeTable<T>, m: f64, step: f64) -> Result<GridOptimum> {
    let rows = table_pairs(table)?;
    let row_cap = grid_units(1.0, step, "row cap")?;
    let target = grid_units(m, step, "budget")?;
    let pairs: Vec<(usize, f64)> = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
    let n = pairs.len();
    if (row_cap as f64).powi(n as i32) > 5e7 {
        return Err(MmflError::OracleGuard(format!("brute force over {row_cap}^{n} points")));
    }
    let mut units = vec![1usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    'outer: loop {
        let total: usize = units.iter().sum();
        let mut ok = total == target;
        let mut offset = 0;
        for r in &rows {
            let row_total: usize = units[offset..offset + r.1.len()].iter().sum();
            ok &= row_total <= row_cap;
            offset += r.1.len();
        }
        if ok {
            let cost: f64 = pairs
                .iter()
                .zip(&units)
                .map(|(&(_, mg), &k)| mg * mg / (k as f64 * step))
                .sum();
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, units.clone()));
            }
        }
        let mut j = 0;
        loop {
            if j == n {
                break 'outer;
            }
            units[j] += 1;
            if units[j] <= row_cap {
                break;
            }
            units[j] = 1;
            j += 1;
        }
    }
    let (cost, flat) =
        best.ok_or_else(|| MmflError::OracleGuard(format!("no grid plan reaches budget {m} with step {step}")))?;
    let mut per_row = Vec::new();
    let mut offset = 0;
    for r in &rows {
        per_row.push(flat[offset..offset + r.1.len()].to_vec());
        offset += r.1.len();
    }
    Ok(GridOptimum {
        objective: objective_from_cost(&rows, cost),
        plan: plan_from_units(&rows, &per_row, step, m),
    })
}

/// `argmin_beta |g - beta h|^2` over `lo, lo + step, ..., hi`.
pub fn grid_search_beta(g: &[f64], h: &[f64], lo: f64, hi: f64, step: f64) -> (f64, f64) {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n)
        .map(|k| {
            let beta = lo + k as f64 * step;
            let r: f64 = g.iter().zip(h).map(|(a, b)| (a - beta * b).powi(2)).sum();
            (beta, r)
        })
        .fold((f64::NAN, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
}

/// One model's aggregation inputs frozen for repeated draws.
#[derive(Debug, Clone)]
pub struct FrozenRound<T> {
    pub topology: SystemTopology<T>,
    pub plan: SamplingPlan<T>,
    /// `updates[s][client]`.
    pub updates: Vec<BTreeMap<usize, Vec<T>>>,
    pub store: StaleStore<T>,
    pub weights: Vec<Vec<T>>,
}

/// Aggregation rule under test.
#[derive(Debug, Clone)]
pub enum AggregationRule<T> {
    Plain,
    /// Per-client coefficients for each model: `betas[s][client]`.
    Stale(Vec<BTreeMap<usize, T>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloStats {
    /// Mean of `Delta` per coordinate.
    pub mean: Vec<f64>,
    /// Standard error of each mean coordinate.
    pub std_err: Vec<f64>,
    /// Sample estimate of `E |Delta - mean|^2`.
    pub variance: f64,
    /// Mean of `|H|_1`.
    pub mean_step_size: f64,
    pub draws: usize,
}

impl<T: Scalar> FrozenRound<T> {
    fn aggregate(&self, model: usize, active: &[ProcessorRef], rule: &AggregationRule<T>) -> Result<(Vec<T>, T)> {
        let input = AggregationInput {
            topology: &self.topology,
            model,
            plan: &self.plan,
            active,
            updates: &self.updates[model],
        };
        let agg = match rule {
            AggregationRule::Plain => aggregate_plain(&self.weights[model], &input)?,
            AggregationRule::Stale(betas) => {
                let b = &betas[model];
                aggregate_stale_vr(&self.weights[model], &input, &self.store, &|p: ProcessorRef| {
                    b.get(&p.client).copied().unwrap_or_else(T::zero)
                })?
            }
        };
        let size = agg.step_size();
        Ok((agg.step, size))
    }

    /// Full-participation step `sum_i d_i G_i`, the target expectation.
    pub fn full_step(&self, model: usize) -> Vec<f64> {
        let dim = self.weights[model].len();
        let mut out = vec![0.0; dim];
        for &i in self.topology.model_clients(model) {
            let d = self.topology.data_weight(i, model).to_f64_lossy();
            for (o, g) in out.iter_mut().zip(&self.updates[model][&i]) {
                *o += d * g.to_f64_lossy();
            }
        }
        out
    }

    /// Closed-form `E |Delta - E Delta|^2 = sum (1-p)/p |d (G - beta h) / B|^2`.
    pub fn analytic_variance(&self, model: usize, rule: &AggregationRule<T>) -> f64 {
        let mut total = 0.0;
        for proc in self.topology.processors() {
            if !self.topology.is_available(proc.client, model) {
                continue;
            }
            let p = self.plan.prob(proc, model).to_f64_lossy();
            if p <= 0.0 {
                continue;
            }
            let c = self.topology.slot_weight(proc.client, model).to_f64_lossy();
            let g = &self.updates[model][&proc.client];
            let beta = match rule {
                AggregationRule::Plain => 0.0,
                AggregationRule::Stale(b) => b[model].get(&proc.client).map_or(0.0, |x| x.to_f64_lossy()),
            };
            let h = self.store.h(proc.client, model);
            let sq: f64 = g
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    let hj = h.map_or(0.0, |h| h[j].to_f64_lossy());
                    (c * (x.to_f64_lossy() - beta * hj)).powi(2)
                })
                .sum();
            total += (1.0 - p) / p * sq;
        }
        total
    }

    /// Monte-Carlo moments of `Delta` for `model` over `draws` assignments.
    pub fn monte_carlo<R: Rng + ?Sized>(
        &self,
        model: usize,
        rule: &AggregationRule<T>,
        draws: usize,
        rng: &mut R,
    ) -> Result<MonteCarloStats> {
        if draws < 2 {
            return Err(MmflError::OracleGuard("monte carlo needs at least two draws".into()));
        }
        let dim = self.weights[model].len();
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        let mut size_sum = 0.0;
        let num_models = self.topology.num_models();
        for round in 0..draws {
            let a = sample_assignment(&self.plan, num_models, round, rng);
            let (step, size) = self.aggregate(model, &a.active[model], rule)?;
            for ((s, q), x) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(&step) {
                let x = x.to_f64_lossy();
                *s += x;
                *q += x * x;
            }
            size_sum += size.to_f64_lossy();
        }
        let n = draws as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var_coord: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m) * n / (n - 1.0)).max(0.0))
            .collect();
        Ok(MonteCarloStats {
            std_err: var_coord.iter().map(|v| (v / n).sqrt()).collect(),
            variance: var_coord.iter().sum(),
            mean,
            mean_step_size: size_sum / n,
            draws,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ClientProfile;
    use crate::sampling::{solve_plan, MagnitudeRow};

    fn table(rows: &[&[(usize, f64)]]) -> MagnitudeTable<f64> {
        MagnitudeTable::from_rows(
            rows.iter()
                .enumerate()
                .map(|(c, e)| MagnitudeRow {
                    processor: ProcessorRef::new(c, 0),
                    entries: e.to_vec(),
                })
                .collect(),
        )
    }

    #[test]
    fn dp_agrees_with_brute_force() {
        let t = table(&[&[(0, 1.0), (1, 0.3)], &[(0, 0.2)], &[(1, 2.5)]]);
        for m in [0.4, 1.0, 1.6, 2.2] {
            let dp = grid_search_plan(&t, m, 0.1).unwrap();
            let bf = brute_force_plan(&t, m, 0.1).unwrap();
            assert!((dp.objective - bf.objective).abs() < 1e-9, "m={m}");
            dp.plan.validate(1e-9).unwrap();
        }
    }

    #[test]
    fn closed_form_not_worse_than_grid() {
        let t = table(&[&[(0, 3.0)], &[(0, 1.0), (1, 1.0)], &[(1, 0.5)]]);
        let m = 1.5;
        let opt = solve_plan(&t, m).unwrap();
        let grid = grid_search_plan(&t, m, 0.005).unwrap();
        assert!(analytic_plan_objective(&t, &opt) <= grid.objective + 1e-6);
    }

    #[test]
    fn guard_rejects_large_instances() {
        let rows: Vec<&[(usize, f64)]> = vec![&[(0, 1.0), (1, 1.0)]; 4];
        let t = table(&rows);
        assert!(matches!(grid_search_plan(&t, 1.0, 0.1), Err(MmflError::OracleGuard(_))));
    }

    #[test]
    fn budget_off_grid_is_rejected() {
        let t = table(&[&[(0, 1.0)]]);
        assert!(grid_search_plan(&t, 0.333, 0.1).is_err());
    }

    #[test]
    fn beta_grid_finds_projection() {
        let (b, _) = grid_search_beta(&[1.0, 2.0], &[2.0, 2.0], -3.0, 3.0, 0.01);
        assert!((b - 0.75).abs() < 0.006);
    }

    #[test]
    fn monte_carlo_matches_full_step() {
        let topology = SystemTopology::build(
            vec![ClientProfile::new(0, 1, &[(0, 2)]), ClientProfile::new(1, 2, &[(0, 6)])],
            1,
        )
        .unwrap();
        let plan = SamplingPlan::new(
            vec![
                PlanRow { processor: ProcessorRef::new(0, 0), probs: vec![(0, 0.5)] },
                PlanRow { processor: ProcessorRef::new(1, 0), probs: vec![(0, 0.4)] },
                PlanRow { processor: ProcessorRef::new(1, 1), probs: vec![(0, 0.7)] },
            ],
            1.6,
            Default::default(),
        );
        let frozen = FrozenRound {
            topology,
            plan,
            updates: vec![BTreeMap::from([(0, vec![1.0, -1.0]), (1, vec![0.5, 2.0])])],
            store: StaleStore::new(),
            weights: vec![vec![0.0, 0.0]],
        };
        let mut rng = crate::rng::derive_rng(9, crate::rng::Stream::Fuzz, &[]);
        let stats = frozen.monte_carlo(0, &AggregationRule::Plain, 20_000, &mut rng).unwrap();
        let full = frozen.full_step(0);
        for ((m, f), se) in stats.mean.iter().zip(&full).zip(&stats.std_err) {
            assert!((m - f).abs() < 4.0 * se);
        }
        let analytic = frozen.analytic_variance(0, &AggregationRule::Plain);
        assert!((stats.variance - analytic).abs() / analytic < 0.05);
    }
}
