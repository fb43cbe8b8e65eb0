//! Global-round protocol: information gathering, plan construction,
//! assignment draw, local training, aggregation, stale refresh and metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::domain::{ProcessorRef, SystemTopology};
use crate::models::{self, local_train, ModelSpec, TrainConfig, TrainContext, WeightVector};
use crate::rng::{derive_rng, Stream};
use crate::sampling::{
    gvr_magnitudes, lvr_magnitudes, random_plan, sample_assignment, solve_plan, stalevr_magnitudes,
    Assignment, SamplingPlan,
};
use crate::scalar::norm;
use crate::staleness::{beta_opt, StaleStore};
use crate::synthdata::ClientDataset;
use crate::{MmflError, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodKind {
    Random,
    FullParticipation,
    Gvr,
    Lvr,
    /// Uniform sampling with a single global staleness coefficient.
    StaleNaive { beta: f64 },
    StaleVr,
    StaleVre,
}

impl MethodKind {
    pub fn name(&self) -> String {
        match self {
            MethodKind::Random => "random".into(),
            MethodKind::FullParticipation => "full".into(),
            MethodKind::Gvr => "gvr".into(),
            MethodKind::Lvr => "lvr".into(),
            MethodKind::StaleNaive { beta } => format!("stale-naive:{beta}"),
            MethodKind::StaleVr => "stalevr".into(),
            MethodKind::StaleVre => "stalevre".into(),
        }
    }

    fn uses_store(&self) -> bool {
        matches!(
            self,
            MethodKind::StaleNaive { .. } | MethodKind::StaleVr | MethodKind::StaleVre
        )
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("stale-naive") {
            let beta = match rest.strip_prefix(':') {
                Some(b) => b.parse::<f64>().map_err(|e| format!("bad beta in {s:?}: {e}"))?,
                None if rest.is_empty() => 1.0,
                None => return Err(format!("unknown method {s:?}")),
            };
            if !(0.0..=1.0).contains(&beta) {
                return Err(format!("stale-naive beta {beta} outside [0, 1]"));
            }
            return Ok(MethodKind::StaleNaive { beta });
        }
        match lower.as_str() {
            "random" => Ok(MethodKind::Random),
            "full" | "full-participation" => Ok(MethodKind::FullParticipation),
            "gvr" => Ok(MethodKind::Gvr),
            "lvr" => Ok(MethodKind::Lvr),
            "stalevr" => Ok(MethodKind::StaleVr),
            "stalevre" => Ok(MethodKind::StaleVre),
            _ => Err(format!("unknown method {s:?}")),
        }
    }
}

/// Per-model inputs of one aggregation.
#[derive(Debug, Clone, Copy)]
pub struct AggregationInput<'a, T> {
    pub topology: &'a SystemTopology<T>,
    pub model: usize,
    pub plan: &'a SamplingPlan<T>,
    /// `A_{tau,s}`, sorted.
    pub active: &'a [ProcessorRef],
    /// Client update `G_{i,s}`, shared by all of the client's slots.
    pub updates: &'a BTreeMap<usize, Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate<T> {
    pub weights: WeightVector<T>,
    /// `Delta`, so that `weights = w - step`.
    pub step: Vec<T>,
    /// Aggregation coefficient `P = d / (B p)` of every active processor.
    pub coefficients: Vec<(ProcessorRef, T)>,
}

impl<T: Scalar> Aggregate<T> {
    /// `|H|_1`, the realised global step size.
    pub fn step_size(&self) -> T {
        self.coefficients.iter().map(|&(_, c)| c).sum()
    }
}

type StaleTerm<'a, T> = (&'a StaleStore<T>, &'a dyn Fn(ProcessorRef) -> T);

fn aggregate_with<T: Scalar>(
    w: &[T],
    input: &AggregationInput<'_, T>,
    stale: Option<StaleTerm<'_, T>>,
) -> Result<Aggregate<T>> {
    let topo = input.topology;
    let s = input.model;
    let mut step = vec![T::zero(); w.len()];
    if let Some((store, beta)) = stale {
        for &i in topo.model_clients(s) {
            let Some(h) = store.h(i, s) else { continue };
            for b in 0..topo.num_processors(i) {
                let c = topo.slot_weight(i, s) * beta(ProcessorRef::new(i, b));
                for (d, &x) in step.iter_mut().zip(h) {
                    *d = *d + c * x;
                }
            }
        }
    }
    let mut coefficients = Vec::with_capacity(input.active.len());
    for &proc in input.active {
        let g = input.updates.get(&proc.client).ok_or(MmflError::MissingUpdate {
            processor: proc,
            model: s,
        })?;
        if g.len() != w.len() {
            return Err(MmflError::DimensionMismatch {
                expected: w.len(),
                actual: g.len(),
            });
        }
        let p = input.plan.prob(proc, s);
        if !(p > T::zero()) {
            return Err(MmflError::PlanInvariant(format!(
                "active processor {proc:?} has p = {p} for model {s}"
            )));
        }
        let coef = topo.slot_weight(proc.client, s) / p;
        coefficients.push((proc, coef));
        match stale.and_then(|(store, beta)| store.h(proc.client, s).map(|h| (h, beta(proc)))) {
            Some((h, beta)) => {
                for ((d, &gj), &hj) in step.iter_mut().zip(g).zip(h) {
                    *d = *d + coef * (gj - beta * hj);
                }
            }
            None => {
                for (d, &gj) in step.iter_mut().zip(g) {
                    *d = *d + coef * gj;
                }
            }
        }
    }
    let weights = WeightVector(w.iter().zip(&step).map(|(&a, &d)| a - d).collect());
    Ok(Aggregate {
        weights,
        step,
        coefficients,
    })
}

/// `w' = w - sum_{A} P G`.
pub fn aggregate_plain<T: Scalar>(w: &[T], input: &AggregationInput<'_, T>) -> Result<Aggregate<T>> {
    aggregate_with(w, input, None)
}

/// Stale rule with one global coefficient:
/// `Delta = beta sum_i d h_i + sum_{A} d (G - beta h) / (B p)`.
pub fn aggregate_stale_naive<T: Scalar>(
    w: &[T],
    input: &AggregationInput<'_, T>,
    store: &StaleStore<T>,
    beta: T,
) -> Result<Aggregate<T>> {
    let constant = move |_: ProcessorRef| beta;
    aggregate_with(w, input, Some((store, &constant)))
}

/// Stale rule with per-processor coefficients `beta(i, b)` (fixed before the draw):
/// `Delta = sum_{i,b} d z / B + sum_{A} d (G - z) / (B p)`, `z = beta h`.
pub fn aggregate_stale_vr<T: Scalar>(
    w: &[T],
    input: &AggregationInput<'_, T>,
    store: &StaleStore<T>,
    betas: &dyn Fn(ProcessorRef) -> T,
) -> Result<Aggregate<T>> {
    aggregate_with(w, input, Some((store, betas)))
}

/// Full participation: every client trains, `Delta = sum_i d_i G_i`.
pub fn aggregate_full<T: Scalar>(
    w: &[T],
    topology: &SystemTopology<T>,
    model: usize,
    updates: &BTreeMap<usize, Vec<T>>,
) -> Result<Aggregate<T>> {
    let mut step = vec![T::zero(); w.len()];
    let mut coefficients = Vec::new();
    for &i in topology.model_clients(model) {
        let g = updates.get(&i).ok_or(MmflError::MissingUpdate {
            processor: ProcessorRef::new(i, 0),
            model,
        })?;
        let d = topology.data_weight(i, model);
        for (st, &gj) in step.iter_mut().zip(g) {
            *st = *st + d * gj;
        }
        for b in 0..topology.num_processors(i) {
            coefficients.push((ProcessorRef::new(i, b), topology.slot_weight(i, model)));
        }
    }
    let weights = WeightVector(w.iter().zip(&step).map(|(&a, &d)| a - d).collect());
    Ok(Aggregate {
        weights,
        step,
        coefficients,
    })
}

/// Round-level communication and computation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostCounters {
    pub updates_uploaded: usize,
    pub loss_scalars_uploaded: usize,
    /// Processor-level local training tasks.
    pub local_trainings: usize,
    pub stale_memory_slots: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRoundMetrics {
    pub model: usize,
    /// Eq.-1 objective on training data; filled on evaluation rounds.
    pub global_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub learning_rate: f64,
    pub active_processors: usize,
    /// `|H|_1 = sum_{A} P`.
    pub step_size: f64,
    /// `(|H|_1 - 1)^2`.
    pub participation_variance: f64,
    /// `sum_{A} P f(w)` at the round's starting weights.
    pub surrogate_objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub models: Vec<ModelRoundMetrics>,
    pub costs: CostCounters,
}

impl RoundMetrics {
    /// `sum_s |H_s|_1`.
    pub fn total_step_size(&self) -> f64 {
        self.models.iter().map(|m| m.step_size).sum()
    }
}

/// Everything a run needs; mutated round by round.
#[derive(Debug, Clone)]
pub struct Simulation<T> {
    pub topology: SystemTopology<T>,
    pub model_specs: Vec<ModelSpec>,
    pub train_config: TrainConfig,
    /// `train_data[s][client]`.
    pub train_data: Vec<BTreeMap<usize, ClientDataset<T>>>,
    pub test_data: Vec<ClientDataset<T>>,
    pub weights: Vec<WeightVector<T>>,
    pub store: StaleStore<T>,
    pub round: usize,
    /// Expected uploads per round, `m`.
    pub budget: T,
    pub seed: u64,
    last_step_size: Vec<f64>,
}

type PairMap<T> = BTreeMap<(usize, usize), T>;
/// Plan, freshly trained updates and pre-draw staleness coefficients.
type PlanOutcome<T> = (SamplingPlan<T>, PairMap<Vec<T>>, Option<PairMap<T>>);

impl<T: Scalar> Simulation<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        topology: SystemTopology<T>,
        model_specs: Vec<ModelSpec>,
        train_config: TrainConfig,
        train_data: Vec<BTreeMap<usize, ClientDataset<T>>>,
        test_data: Vec<ClientDataset<T>>,
        weights: Vec<WeightVector<T>>,
        budget: T,
        seed: u64,
    ) -> Result<Self> {
        let s = topology.num_models();
        for (name, n) in [
            ("model_specs", model_specs.len()),
            ("train_data", train_data.len()),
            ("test_data", test_data.len()),
            ("weights", weights.len()),
        ] {
            if n != s {
                return Err(MmflError::Config(vec![format!(
                    "{name} has {n} entries for {s} models"
                )]));
            }
        }
        for (model, data) in train_data.iter().enumerate() {
            for &i in topology.model_clients(model) {
                let n = data.get(&i).map_or(0, ClientDataset::len);
                if n != topology.client(i).samples(model) {
                    return Err(MmflError::InvalidProfile {
                        client: i,
                        reason: format!("model {model}: dataset has {n} samples, profile disagrees"),
                    });
                }
            }
        }
        let v = T::from_usize_lossy(topology.total_processors());
        if !(budget > T::zero() && budget <= v) {
            return Err(MmflError::InfeasibleBudget {
                budget: budget.to_f64_lossy(),
                processors: topology.total_processors(),
            });
        }
        Ok(Self {
            topology,
            model_specs,
            train_config,
            train_data,
            test_data,
            weights,
            store: StaleStore::new(),
            round: 0,
            budget,
            seed,
            last_step_size: vec![1.0; s],
        })
    }

    pub fn num_models(&self) -> usize {
        self.topology.num_models()
    }

    fn all_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.num_models())
            .flat_map(|s| self.topology.model_clients(s).iter().map(move |&i| (i, s)))
            .collect()
    }

    /// `f_{i,s}(w_s)` for the given pairs, on full local data.
    fn local_losses(&self, pairs: &[(usize, usize)]) -> Result<PairMap<T>> {
        pairs
            .par_iter()
            .map(|&(i, s)| {
                let l = models::loss(&self.weights[s], &self.train_data[s][&i], &self.model_specs[s])?;
                Ok(((i, s), l))
            })
            .collect()
    }

    /// Trains the given pairs from the current global weights.
    fn train(&self, pairs: &[(usize, usize)], lrs: &[T]) -> Result<PairMap<Vec<T>>> {
        let round = self.round;
        pairs
            .par_iter()
            .map(|&(i, s)| {
                let mut rng = derive_rng(self.seed, Stream::LocalTrain, &[round as u64, i as u64, s as u64]);
                let run = local_train(
                    &self.weights[s],
                    &self.train_data[s][&i],
                    &self.model_specs[s],
                    &self.train_config,
                    lrs[s],
                    TrainContext { client: i, model: s, round },
                    &mut rng,
                )?;
                Ok(((i, s), run.delta.0))
            })
            .collect()
    }

    /// Global training loss and test accuracy per model.
    pub fn evaluate(&self) -> Result<Vec<(f64, f64)>> {
        (0..self.num_models())
            .map(|s| {
                let mut global = T::zero();
                for &i in self.topology.model_clients(s) {
                    let l = models::loss(&self.weights[s], &self.train_data[s][&i], &self.model_specs[s])?;
                    global = global + self.topology.data_weight(i, s) * l;
                }
                let acc = models::accuracy(&self.weights[s], &self.test_data[s], &self.model_specs[s])?;
                Ok((global.to_f64_lossy(), acc))
            })
            .collect()
    }

    /// Sampling plan the method would use this round, plus any updates and
    /// losses gathered on the way.
    fn plan_for(
        &self,
        method: MethodKind,
        lrs: &[T],
        costs: &mut CostCounters,
    ) -> Result<PlanOutcome<T>> {
        let v = self.topology.total_processors();
        let pairs = self.all_pairs();
        match method {
            MethodKind::Random | MethodKind::StaleNaive { .. } => {
                Ok((random_plan(&self.topology, self.budget)?, BTreeMap::new(), None))
            }
            MethodKind::Lvr | MethodKind::StaleVre => {
                let losses = self.local_losses(&pairs)?;
                costs.loss_scalars_uploaded = v;
                let table = lvr_magnitudes(&self.topology, &losses)?;
                Ok((solve_plan(&table, self.budget)?, BTreeMap::new(), Some(losses)))
            }
            MethodKind::Gvr => {
                let updates = self.train(&pairs, lrs)?;
                costs.local_trainings = v;
                let norms = updates.iter().map(|(&k, g)| (k, norm(g))).collect();
                let table = gvr_magnitudes(&self.topology, &norms, lrs)?;
                Ok((solve_plan(&table, self.budget)?, updates, None))
            }
            MethodKind::StaleVr => {
                let updates = self.train(&pairs, lrs)?;
                costs.local_trainings = v;
                let residuals = updates
                    .iter()
                    .map(|(&(i, s), g)| {
                        let r = match self.store.h(i, s) {
                            Some(h) => norm(&g.iter().zip(h).map(|(&a, &b)| a - b).collect::<Vec<_>>()),
                            None => norm(g),
                        };
                        ((i, s), r)
                    })
                    .collect();
                let table = stalevr_magnitudes(&self.topology, &residuals, lrs)?;
                Ok((solve_plan(&table, self.budget)?, updates, None))
            }
            MethodKind::FullParticipation => unreachable!("full participation has no plan"),
        }
    }

    /// Runs one global round of `method`.
    pub fn run_round(&mut self, method: MethodKind) -> Result<RoundMetrics> {
        self.run_round_inner(method).map_err(|e| MmflError::Method {
            method: format!("{method} (round {})", self.round),
            source: Box::new(e),
        })
    }

    fn run_round_inner(&mut self, method: MethodKind) -> Result<RoundMetrics> {
        let tau = self.round;
        let num_models = self.num_models();
        let lrs: Vec<T> = (0..num_models)
            .map(|s| T::lit(self.train_config.learning_rate_at(tau, self.last_step_size[s])))
            .collect();
        let mut costs = CostCounters::default();

        if method == MethodKind::FullParticipation {
            let pairs = self.all_pairs();
            let updates = self.train(&pairs, &lrs)?;
            let losses = self.local_losses(&pairs)?;
            costs.local_trainings = pairs.len();
            costs.updates_uploaded = pairs.len();
            let mut models_out = Vec::with_capacity(num_models);
            for s in 0..num_models {
                let per_client: BTreeMap<usize, Vec<T>> = updates
                    .iter()
                    .filter(|((_, m), _)| *m == s)
                    .map(|(&(i, _), g)| (i, g.clone()))
                    .collect();
                let agg = aggregate_full(&self.weights[s], &self.topology, s, &per_client)?;
                let surrogate: T = self
                    .topology
                    .model_clients(s)
                    .iter()
                    .map(|&i| self.topology.data_weight(i, s) * losses[&(i, s)])
                    .sum();
                models_out.push(self.model_metrics(s, &agg, lrs[s], surrogate));
                self.weights[s] = agg.weights;
            }
            self.round += 1;
            return Ok(RoundMetrics {
                round: tau,
                models: models_out,
                costs,
            });
        }

        let (plan, mut updates, losses) = self.plan_for(method, &lrs, &mut costs)?;
        let mut rng = derive_rng(self.seed, Stream::Assignment, &[tau as u64]);
        let assignment: Assignment = sample_assignment(&plan, num_models, tau, &mut rng);
        costs.updates_uploaded = assignment.num_active();

        // One training per active (client, model); slots share it.
        let mut needed: Vec<(usize, usize)> = assignment
            .active
            .iter()
            .enumerate()
            .flat_map(|(s, a)| a.iter().map(move |p| (p.client, s)))
            .collect();
        needed.sort_unstable();
        needed.dedup();
        let missing: Vec<(usize, usize)> = needed.iter().copied().filter(|k| !updates.contains_key(k)).collect();
        if !missing.is_empty() {
            updates.extend(self.train(&missing, &lrs)?);
        }
        if !matches!(method, MethodKind::Gvr | MethodKind::StaleVr) {
            costs.local_trainings = assignment.num_active();
        }
        let active_losses = match &losses {
            Some(l) => needed.iter().map(|k| (*k, l[k])).collect(),
            None => self.local_losses(&needed)?,
        };

        let mut models_out = Vec::with_capacity(num_models);
        let mut new_weights = Vec::with_capacity(num_models);
        for s in 0..num_models {
            let per_client: BTreeMap<usize, Vec<T>> = updates
                .iter()
                .filter(|((_, m), _)| *m == s)
                .map(|(&(i, _), g)| (i, g.clone()))
                .collect();
            let input = AggregationInput {
                topology: &self.topology,
                model: s,
                plan: &plan,
                active: &assignment.active[s],
                updates: &per_client,
            };
            let w = &self.weights[s];
            let agg = match method {
                MethodKind::Random | MethodKind::Lvr | MethodKind::Gvr => aggregate_plain(w, &input)?,
                MethodKind::StaleNaive { beta } => aggregate_stale_naive(w, &input, &self.store, T::lit(beta))?,
                MethodKind::StaleVr => {
                    let betas: BTreeMap<usize, T> = self
                        .topology
                        .model_clients(s)
                        .iter()
                        .map(|&i| {
                            let b = self.store.h(i, s).map_or(T::zero(), |h| beta_opt(&per_client[&i], h));
                            (i, b)
                        })
                        .collect();
                    aggregate_stale_vr(w, &input, &self.store, &|p: ProcessorRef| betas[&p.client])?
                }
                MethodKind::StaleVre => {
                    let mut betas = BTreeMap::new();
                    for &i in self.topology.model_clients(s) {
                        let b = match self.store.get(i, s) {
                            Some(_) => self.store.beta_estimate(i, s, tau, None)?,
                            None => T::zero(),
                        };
                        betas.insert(i, b);
                    }
                    aggregate_stale_vr(w, &input, &self.store, &|p: ProcessorRef| betas[&p.client])?
                }
                MethodKind::FullParticipation => unreachable!(),
            };
            let surrogate: T = agg
                .coefficients
                .iter()
                .map(|&(p, c)| c * active_losses[&(p.client, s)])
                .sum();
            models_out.push(self.model_metrics(s, &agg, lrs[s], surrogate));
            new_weights.push(agg.weights);
        }
        for (s, w) in new_weights.into_iter().enumerate() {
            if !w.is_finite() {
                return Err(MmflError::Divergence {
                    round: tau,
                    client: usize::MAX,
                    model: s,
                });
            }
            self.weights[s] = w;
        }
        if method.uses_store() {
            for &(i, s) in &needed {
                self.store.refresh(i, s, &updates[&(i, s)], tau);
            }
            costs.stale_memory_slots = self.store.len();
        }
        self.round += 1;
        Ok(RoundMetrics {
            round: tau,
            models: models_out,
            costs,
        })
    }

    fn model_metrics(&mut self, s: usize, agg: &Aggregate<T>, lr: T, surrogate: T) -> ModelRoundMetrics {
        let step = agg.step_size().to_f64_lossy();
        self.last_step_size[s] = step;
        ModelRoundMetrics {
            model: s,
            global_loss: None,
            test_accuracy: None,
            learning_rate: lr.to_f64_lossy(),
            active_processors: agg.coefficients.len(),
            step_size: step,
            participation_variance: (step - 1.0).powi(2),
            surrogate_objective: surrogate.to_f64_lossy(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ClientProfile;
    use crate::sampling::PlanRow;
    use std::collections::BTreeSet;

    fn topo3() -> SystemTopology<f64> {
        SystemTopology::build(
            vec![
                ClientProfile::new(0, 1, &[(0, 10)]),
                ClientProfile::new(1, 2, &[(0, 30)]),
            ],
            1,
        )
        .unwrap()
    }

    fn plan_with(ps: &[(ProcessorRef, f64)]) -> SamplingPlan<f64> {
        SamplingPlan::new(
            ps.iter()
                .map(|&(processor, p)| PlanRow { processor, probs: vec![(0, p)] })
                .collect(),
            ps.iter().map(|x| x.1).sum(),
            BTreeSet::new(),
        )
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            MethodKind::Random,
            MethodKind::FullParticipation,
            MethodKind::Gvr,
            MethodKind::Lvr,
            MethodKind::StaleNaive { beta: 0.5 },
            MethodKind::StaleVr,
            MethodKind::StaleVre,
        ] {
            assert_eq!(m.name().parse::<MethodKind>().unwrap(), m);
        }
        assert_eq!("stale-naive".parse::<MethodKind>().unwrap(), MethodKind::StaleNaive { beta: 1.0 });
        assert!("stale-naive:1.5".parse::<MethodKind>().is_err());
        assert!("fedavg".parse::<MethodKind>().is_err());
    }

    #[test]
    fn degenerate_full_participation() {
        let topo = SystemTopology::<f64>::build(vec![ClientProfile::new(0, 1, &[(0, 3)])], 1).unwrap();
        let plan = plan_with(&[(ProcessorRef::new(0, 0), 1.0)]);
        let updates = BTreeMap::from([(0, vec![0.5, -1.0])]);
        let active = [ProcessorRef::new(0, 0)];
        let input = AggregationInput { topology: &topo, model: 0, plan: &plan, active: &active, updates: &updates };
        let agg = aggregate_plain(&[1.0, 1.0], &input).unwrap();
        assert_eq!(agg.weights.0, vec![0.5, 2.0]);
        assert_eq!(agg.step_size(), 1.0);
    }

    #[test]
    fn nobody_sampled_leaves_weights() {
        let topo = topo3();
        let plan = plan_with(&[
            (ProcessorRef::new(0, 0), 0.2),
            (ProcessorRef::new(1, 0), 0.2),
            (ProcessorRef::new(1, 1), 0.2),
        ]);
        let updates = BTreeMap::new();
        let input = AggregationInput { topology: &topo, model: 0, plan: &plan, active: &[], updates: &updates };
        let agg = aggregate_plain(&[1.0, -2.0], &input).unwrap();
        assert_eq!(agg.weights.0, vec![1.0, -2.0]);
        assert_eq!(agg.step_size(), 0.0);
    }

    #[test]
    fn missing_update_is_protocol_error() {
        let topo = topo3();
        let plan = plan_with(&[(ProcessorRef::new(0, 0), 0.5)]);
        let updates = BTreeMap::new();
        let active = [ProcessorRef::new(0, 0)];
        let input = AggregationInput { topology: &topo, model: 0, plan: &plan, active: &active, updates: &updates };
        assert!(matches!(aggregate_plain(&[0.0], &input), Err(MmflError::MissingUpdate { .. })));
    }

    type Fixture = (SystemTopology<f64>, SamplingPlan<f64>, BTreeMap<usize, Vec<f64>>, StaleStore<f64>);

    fn stale_fixture() -> Fixture {
        let topo = topo3();
        let plan = plan_with(&[
            (ProcessorRef::new(0, 0), 0.4),
            (ProcessorRef::new(1, 0), 0.3),
            (ProcessorRef::new(1, 1), 0.6),
        ]);
        let updates = BTreeMap::from([(0, vec![1.0, -0.5]), (1, vec![0.25, 2.0])]);
        let mut store = StaleStore::new();
        store.refresh(0, 0, &[0.8, -0.3], 0);
        store.refresh(1, 0, &[-0.2, 1.5], 0);
        (topo, plan, updates, store)
    }

    #[test]
    fn zero_beta_reduces_to_plain() {
        let (topo, plan, updates, store) = stale_fixture();
        let active = [ProcessorRef::new(0, 0), ProcessorRef::new(1, 1)];
        let input = AggregationInput { topology: &topo, model: 0, plan: &plan, active: &active, updates: &updates };
        let w = [0.3, 0.7];
        let plain = aggregate_plain(&w, &input).unwrap();
        assert_eq!(aggregate_stale_naive(&w, &input, &store, 0.0).unwrap(), plain);
        assert_eq!(aggregate_stale_vr(&w, &input, &store, &|_| 0.0).unwrap(), plain);
    }

    #[test]
    fn constant_betas_match_naive_rule() {
        let (topo, plan, updates, store) = stale_fixture();
        let active = [ProcessorRef::new(1, 0)];
        let input = AggregationInput { topology: &topo, model: 0, plan: &plan, active: &active, updates: &updates };
        let w = [0.3, 0.7];
        for c in [0.25, 0.5, 1.0] {
            assert_eq!(
                aggregate_stale_vr(&w, &input, &store, &|_| c).unwrap(),
                aggregate_stale_naive(&w, &input, &store, c).unwrap()
            );
        }
    }

    #[test]
    fn exact_memory_cancels_sampling() {
        // Everyone active with G = h and beta = 1: the step is sum d G.
        let topo = topo3();
        let plan = plan_with(&[
            (ProcessorRef::new(0, 0), 0.4),
            (ProcessorRef::new(1, 0), 0.3),
            (ProcessorRef::new(1, 1), 0.6),
        ]);
        let updates = BTreeMap::from([(0, vec![1.0, -0.5]), (1, vec![0.25, 2.0])]);
        let mut store = StaleStore::new();
        for (&i, g) in &updates {
            store.refresh(i, 0, g, 0);
        }
        let expected: Vec<f64> = (0..2).map(|j| 0.25 * updates[&0][j] + 0.75 * updates[&1][j]).collect();
        for active in [
            vec![],
            vec![ProcessorRef::new(1, 0)],
            vec![ProcessorRef::new(0, 0), ProcessorRef::new(1, 0), ProcessorRef::new(1, 1)],
        ] {
            let input = AggregationInput { topology: &topo, model: 0, plan: &plan, active: &active, updates: &updates };
            let agg = aggregate_stale_naive(&[0.0, 0.0], &input, &store, 1.0).unwrap();
            for (a, b) in agg.step.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn full_aggregate_is_weighted_average() {
        let topo = topo3();
        let updates = BTreeMap::from([(0, vec![4.0]), (1, vec![8.0])]);
        let agg = aggregate_full(&[10.0], &topo, 0, &updates).unwrap();
        assert_eq!(agg.step, vec![0.25 * 4.0 + 0.75 * 8.0]);
        assert!((agg.step_size() - 1.0).abs() < 1e-15);
    }
}
