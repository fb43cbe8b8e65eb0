//! Per-round sampling plans `p[s | (i, b)]`.
//!
//! The optimal plans minimise `sum_s sum_(i,b) |U(i,b,s)|^2 / p(s|i,b)` subject
//! to `sum_s p <= 1` per processor and `sum p = m` overall. The KKT solution
//! splits processors into an interior set `V0`, where all probabilities share
//! one proportionality constant, and saturated processors whose row sums to
//! exactly one. Which magnitudes `|U|` are plugged in decides the method:
//! scaled local losses (LVR), scaled update norms (GVR) or scaled residuals
//! against the stale memory (StaleVR).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::Rng;

use crate::domain::{ProcessorRef, SystemTopology};
use crate::{MmflError, Result, Scalar};

/// Relative floor applied to magnitudes so every probability stays positive.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

/// Tolerance used when validating plan invariants.
pub const PLAN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeRow<T> {
    pub processor: ProcessorRef,
    /// `(model, |U|)` for each model the processor's client holds, ascending.
    pub entries: Vec<(usize, T)>,
}

impl<T: Scalar> MagnitudeRow<T> {
    pub fn sum(&self) -> T {
        self.entries.iter().map(|&(_, u)| u).sum()
    }
}

/// `|U(i,b,s)|` for every feasible processor/model pair, floored positive.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeTable<T> {
    rows: Vec<MagnitudeRow<T>>,
    floor: T,
}

impl<T: Scalar> MagnitudeTable<T> {
    /// Builds a table, raising every entry to `1e-8 * max` (or `1e-8` when
    /// all entries are zero). Rows are sorted by processor.
    pub fn from_rows(mut rows: Vec<MagnitudeRow<T>>) -> Self {
        rows.sort_by_key(|r| r.processor);
        let max = rows
            .iter()
            .flat_map(|r| r.entries.iter().map(|&(_, u)| u))
            .fold(T::zero(), T::max);
        let base = if max > T::zero() { max } else { T::one() };
        let floor = base * T::lit(MAGNITUDE_FLOOR);
        for r in &mut rows {
            for e in &mut r.entries {
                e.1 = e.1.max(floor);
            }
        }
        Self { rows, floor }
    }

    pub fn rows(&self) -> &[MagnitudeRow<T>] {
        &self.rows
    }

    pub fn floor(&self) -> T {
        self.floor
    }

    pub fn num_processors(&self) -> usize {
        self.rows.len()
    }

    /// `M(i,b)` per row, in row order.
    pub fn per_processor_sums(&self) -> Vec<T> {
        self.rows.iter().map(MagnitudeRow::sum).collect()
    }

    pub fn get(&self, processor: ProcessorRef, model: usize) -> Option<T> {
        let r = self.rows.binary_search_by_key(&processor, |r| r.processor).ok()?;
        self.rows[r]
            .entries
            .iter()
            .find(|&&(s, _)| s == model)
            .map(|&(_, u)| u)
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: T) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| MagnitudeRow {
                processor: r.processor,
                entries: r.entries.iter().map(|&(s, u)| (s, u * c)).collect(),
            })
            .collect();
        Self::from_rows(rows)
    }
}

/// Shared builder: entry = `d_{i,s} / B_i * value(i, s) / scale(s)`.
fn table_from_client_values<T: Scalar>(
    topology: &SystemTopology<T>,
    values: &BTreeMap<(usize, usize), T>,
    divisor: impl Fn(usize) -> T,
) -> Result<MagnitudeTable<T>> {
    let mut rows = Vec::with_capacity(topology.total_processors());
    for processor in topology.processors() {
        let client = processor.client;
        let mut entries = Vec::new();
        for &s in &topology.client(client).available_models {
            let v = *values
                .get(&(client, s))
                .ok_or(MmflError::MissingValue { client, model: s })?;
            if !(v >= T::zero()) {
                return Err(MmflError::NegativeMagnitude {
                    client,
                    model: s,
                    value: v.to_f64_lossy(),
                });
            }
            entries.push((s, topology.slot_weight(client, s) * v / divisor(s)));
        }
        rows.push(MagnitudeRow { processor, entries });
    }
    Ok(MagnitudeTable::from_rows(rows))
}

/// Loss-based magnitudes `d f / B` (MMFL-LVR).
pub fn lvr_magnitudes<T: Scalar>(
    topology: &SystemTopology<T>,
    local_losses: &BTreeMap<(usize, usize), T>,
) -> Result<MagnitudeTable<T>> {
    table_from_client_values(topology, local_losses, |_| T::one())
}

/// Update-based magnitudes `d |G| / (B eta)` (MMFL-GVR).
pub fn gvr_magnitudes<T: Scalar>(
    topology: &SystemTopology<T>,
    update_norms: &BTreeMap<(usize, usize), T>,
    learning_rates: &[T],
) -> Result<MagnitudeTable<T>> {
    table_from_client_values(topology, update_norms, |s| learning_rates[s])
}

/// Residual magnitudes `d |G - h| / (B eta)` (MMFL-StaleVR).
pub fn stalevr_magnitudes<T: Scalar>(
    topology: &SystemTopology<T>,
    residual_norms: &BTreeMap<(usize, usize), T>,
    learning_rates: &[T],
) -> Result<MagnitudeTable<T>> {
    table_from_client_values(topology, residual_norms, |s| learning_rates[s])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow<T> {
    pub processor: ProcessorRef,
    pub probs: Vec<(usize, T)>,
}

impl<T: Scalar> PlanRow<T> {
    pub fn sum(&self) -> T {
        self.probs.iter().map(|&(_, p)| p).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan<T> {
    rows: Vec<PlanRow<T>>,
    budget: T,
    v0: BTreeSet<ProcessorRef>,
}

impl<T: Scalar> SamplingPlan<T> {
    pub fn new(mut rows: Vec<PlanRow<T>>, budget: T, v0: BTreeSet<ProcessorRef>) -> Self {
        rows.sort_by_key(|r| r.processor);
        Self { rows, budget, v0 }
    }

    pub fn rows(&self) -> &[PlanRow<T>] {
        &self.rows
    }

    pub fn budget(&self) -> T {
        self.budget
    }

    /// Interior (unsaturated) processors of an optimal plan; empty otherwise.
    pub fn v0(&self) -> &BTreeSet<ProcessorRef> {
        &self.v0
    }

    /// `p(model | processor)`, zero when the pair is infeasible.
    pub fn prob(&self, processor: ProcessorRef, model: usize) -> T {
        self.rows
            .binary_search_by_key(&processor, |r| r.processor)
            .ok()
            .and_then(|r| self.rows[r].probs.iter().find(|&&(s, _)| s == model))
            .map_or(T::zero(), |&(_, p)| p)
    }

    pub fn total(&self) -> T {
        self.rows.iter().map(PlanRow::sum).sum()
    }

    /// Checks positivity, row sums `<= 1 + tol` and total `= m +- tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let tol = T::lit(tol);
        for r in &self.rows {
            if let Some(&(s, p)) = r.probs.iter().find(|&&(_, p)| !(p > T::zero() && p <= T::one() + tol)) {
                return Err(MmflError::PlanInvariant(format!(
                    "p({s} | {:?}) = {p} outside (0, 1]",
                    r.processor
                )));
            }
            let sum = r.sum();
            if sum > T::one() + tol {
                return Err(MmflError::PlanInvariant(format!(
                    "row {:?} sums to {sum}",
                    r.processor
                )));
            }
        }
        let total = self.total();
        if (total - self.budget).abs() > tol {
            return Err(MmflError::PlanInvariant(format!(
                "total {total} differs from budget {}",
                self.budget
            )));
        }
        Ok(())
    }

    /// Rows `client,slot,model,probability`.
    pub fn write_delimited<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["client", "slot", "model", "probability"])?;
        for r in &self.rows {
            for &(s, p) in &r.probs {
                w.write_record([
                    r.processor.client.to_string(),
                    r.processor.slot.to_string(),
                    s.to_string(),
                    p.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Finds the interior set `V0` for per-processor sums `M` and budget `m`.
///
/// Processors are ordered by descending `M` (ties: lower index first) and the
/// largest remaining one is peeled off until
/// `0 < m - V + k <= sum_{V0} M / max_{V0} M` holds, which yields the largest
/// feasible `k = |V0|`. Returns ascending indices into `sums`.
pub fn find_v0<T: Scalar>(sums: &[T], m: T) -> Result<Vec<usize>> {
    let v = sums.len();
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        sums[b]
            .partial_cmp(&sums[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    // suffix[j] = sum of M over order[j..]
    let mut suffix = vec![T::zero(); v + 1];
    for j in (0..v).rev() {
        suffix[j] = suffix[j + 1] + sums[order[j]];
    }
    let slack = T::one() + T::lit(1e-12);
    for peeled in 0..v {
        // k = V - peeled, so m - V + k = m - peeled
        let c = m - T::from_usize_lossy(peeled);
        if !(c > T::zero()) {
            break;
        }
        let max = sums[order[peeled]];
        if c * max <= suffix[peeled] * slack {
            let mut set: Vec<usize> = order[peeled..].to_vec();
            set.sort_unstable();
            return Ok(set);
        }
    }
    Err(MmflError::NoFeasibleSplit(m.to_f64_lossy()))
}

/// Closed-form optimal plan for a magnitude table and budget `0 < m <= V`.
pub fn solve_plan<T: Scalar>(table: &MagnitudeTable<T>, m: T) -> Result<SamplingPlan<T>> {
    let v = table.num_processors();
    let v_t = T::from_usize_lossy(v);
    if v == 0 || !(m > T::zero()) || m > v_t * (T::one() + T::lit(1e-12)) {
        return Err(MmflError::InfeasibleBudget {
            budget: m.to_f64_lossy(),
            processors: v,
        });
    }
    let sums = table.per_processor_sums();
    // m = V: every processor must be saturated.
    let interior: Vec<usize> = if m >= v_t * (T::one() - T::lit(1e-12)) {
        Vec::new()
    } else {
        find_v0(&sums, m)?
    };
    let k = interior.len();
    let c = m - v_t + T::from_usize_lossy(k);
    let interior_sum: T = interior.iter().map(|&j| sums[j]).sum();
    let in_v0: BTreeSet<usize> = interior.iter().copied().collect();
    let rows = table
        .rows()
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let probs = if in_v0.contains(&j) {
                r.entries.iter().map(|&(s, u)| (s, c * u / interior_sum)).collect()
            } else {
                r.entries.iter().map(|&(s, u)| (s, u / sums[j])).collect()
            };
            PlanRow {
                processor: r.processor,
                probs,
            }
        })
        .collect();
    let v0 = interior.iter().map(|&j| table.rows()[j].processor).collect();
    Ok(SamplingPlan::new(rows, m, v0))
}

/// Uniform plan: one common probability over all feasible pairs, water-filled
/// so no processor row exceeds one.
pub fn random_plan<T: Scalar>(topology: &SystemTopology<T>, m: T) -> Result<SamplingPlan<T>> {
    let processors: Vec<(ProcessorRef, Vec<usize>)> = topology
        .processors()
        .map(|p| {
            let models: Vec<usize> = topology.client(p.client).available_models.iter().copied().collect();
            (p, models)
        })
        .collect();
    let v = processors.len();
    if v == 0 || !(m > T::zero()) || m > T::from_usize_lossy(v) * (T::one() + T::lit(1e-12)) {
        return Err(MmflError::InfeasibleBudget {
            budget: m.to_f64_lossy(),
            processors: v,
        });
    }
    // Saturating first the processors with the most models (smallest cap 1/n).
    let mut widths: Vec<usize> = processors.iter().map(|(_, ms)| ms.len()).collect();
    widths.sort_unstable_by(|a, b| b.cmp(a));
    let mut remaining_pairs: usize = widths.iter().sum();
    let mut level = T::zero();
    for (saturated, &n) in widths.iter().enumerate() {
        let candidate = (m - T::from_usize_lossy(saturated)) / T::from_usize_lossy(remaining_pairs);
        if candidate <= T::one() / T::from_usize_lossy(n) {
            level = candidate;
            break;
        }
        remaining_pairs -= n;
        level = T::one() / T::from_usize_lossy(n);
    }
    let rows = processors
        .into_iter()
        .map(|(processor, models)| {
            let cap = T::one() / T::from_usize_lossy(models.len());
            let p = level.min(cap);
            PlanRow {
                processor,
                probs: models.into_iter().map(|s| (s, p)).collect(),
            }
        })
        .collect();
    Ok(SamplingPlan::new(rows, m, BTreeSet::new()))
}

/// Realised allocation of one round: `active[s]` is `A_{tau,s}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub round: usize,
    pub active: Vec<Vec<ProcessorRef>>,
}

impl Assignment {
    pub fn num_active(&self) -> usize {
        self.active.iter().map(Vec::len).sum()
    }

    /// Model assigned to `processor`, if any.
    pub fn model_of(&self, processor: ProcessorRef) -> Option<usize> {
        self.active
            .iter()
            .position(|a| a.binary_search(&processor).is_ok())
    }
}

/// One independent categorical draw per processor over its models plus idle.
pub fn sample_assignment<T: Scalar, R: Rng + ?Sized>(
    plan: &SamplingPlan<T>,
    num_models: usize,
    round: usize,
    rng: &mut R,
) -> Assignment {
    let mut active = vec![Vec::new(); num_models];
    for row in plan.rows() {
        let u = T::lit(rng.random::<f64>());
        let mut cum = T::zero();
        for &(s, p) in &row.probs {
            cum = cum + p;
            if u < cum {
                active[s].push(row.processor);
                break;
            }
        }
    }
    Assignment { round, active }
}
