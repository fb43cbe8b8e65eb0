//! Experiment driving: building a seeded simulation from a config, running
//! it, and writing metric streams and summaries.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::domain::{sample_layout, SystemTopology};
use crate::engine::{MethodKind, RoundMetrics, Simulation};
use crate::models::WeightVector;
use crate::rng::{derive_rng, derive_seed, Stream};
use crate::synthdata::{generate_label_prototypes, generate_test_pool, partition_to_clients, ClientDataset};
use crate::Result;

/// Header of the per-round metrics file.
pub const METRICS_HEADER: [&str; 13] = [
    "round",
    "model",
    "learning_rate",
    "active_processors",
    "step_size",
    "participation_variance",
    "surrogate_objective",
    "global_loss",
    "test_accuracy",
    "updates_uploaded",
    "loss_scalars_uploaded",
    "local_trainings",
    "stale_memory_slots",
];

/// Builds topology, data and initial weights for `seed`. Everything except
/// the method is a function of `(cfg, seed)`, so methods compared under the
/// same seed see identical inputs.
pub fn build_simulation(cfg: &RunConfig, seed: u64) -> Result<Simulation<f64>> {
    cfg.validate()?;
    let num_models = cfg.models.len();
    let mut rng = derive_rng(seed, Stream::Topology, &[]);
    let layout = sample_layout(cfg.num_clients, num_models, cfg.missing_fraction, cfg.processor_mix, &mut rng)?;

    let mut counts = Vec::with_capacity(num_models);
    let mut train_data = Vec::with_capacity(num_models);
    let mut test_data = Vec::with_capacity(num_models);
    for (s, m) in cfg.models.iter().enumerate() {
        let protos = generate_label_prototypes::<f64>(&m.data, derive_seed(seed, Stream::Prototypes, &[s as u64]))?;
        let part = partition_to_clients(&m.data, &protos, &layout.model_clients(s), s, seed)?;
        counts.push(part.counts());
        train_data.push(part.datasets);
        test_data.push(generate_test_pool(&m.data, &protos, s, seed)?);
    }
    let topology = SystemTopology::build(layout.profiles(&counts), num_models)?;
    let specs: Vec<_> = cfg.models.iter().map(|m| m.spec()).collect();
    let weights = specs
        .iter()
        .enumerate()
        .map(|(s, spec)| WeightVector::init(spec, &mut derive_rng(seed, Stream::Init, &[s as u64])))
        .collect();
    let budget = cfg.budget_for(topology.total_processors());
    Simulation::new(
        topology,
        specs,
        cfg.train.train_config(),
        train_data,
        test_data,
        weights,
        budget,
        seed,
    )
}

/// Global loss and test accuracy of every model after `round` rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub round: usize,
    pub models: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub method: MethodKind,
    pub seed: u64,
    pub rounds: Vec<RoundMetrics>,
    /// Always starts with the evaluation of the initial weights.
    pub evals: Vec<EvalPoint>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl RunHistory {
    pub fn final_eval(&self) -> &EvalPoint {
        self.evals.last().expect("initial evaluation always present")
    }

    pub fn final_accuracy(&self) -> Vec<f64> {
        self.final_eval().models.iter().map(|m| m.1).collect()
    }

    /// `sum_s |H_s|_1` per round.
    pub fn total_step_sizes(&self) -> Vec<f64> {
        self.rounds.iter().map(RoundMetrics::total_step_size).collect()
    }

    /// Variance over rounds of `sum_s |H_s|_1`.
    pub fn step_size_time_variance(&self) -> f64 {
        let (_, std) = mean_std(&self.total_step_sizes());
        std * std
    }

    /// Mean `|H_s|_1` over rounds, per model.
    pub fn mean_step_size(&self) -> Vec<f64> {
        let num_models = self.final_eval().models.len();
        (0..num_models)
            .map(|s| mean_std(&self.rounds.iter().map(|r| r.models[s].step_size).collect::<Vec<_>>()).0)
            .collect()
    }

    /// One row per (round, model); round 0 holds the initial evaluation.
    pub fn write_metrics<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRICS_HEADER)?;
        let evals: BTreeMap<usize, &EvalPoint> = self.evals.iter().map(|e| (e.round, e)).collect();
        let fmt_opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
        let initial = evals[&0];
        for (s, &(loss, acc)) in initial.models.iter().enumerate() {
            let mut row = vec![String::new(); METRICS_HEADER.len()];
            row[0] = "0".into();
            row[1] = s.to_string();
            row[7] = loss.to_string();
            row[8] = acc.to_string();
            w.write_record(&row)?;
        }
        for r in &self.rounds {
            let done = r.round + 1;
            for m in &r.models {
                let eval = evals.get(&done).map(|e| e.models[m.model]);
                w.write_record([
                    done.to_string(),
                    m.model.to_string(),
                    m.learning_rate.to_string(),
                    m.active_processors.to_string(),
                    m.step_size.to_string(),
                    m.participation_variance.to_string(),
                    m.surrogate_objective.to_string(),
                    fmt_opt(eval.map(|e| e.0)),
                    fmt_opt(eval.map(|e| e.1)),
                    r.costs.updates_uploaded.to_string(),
                    r.costs.loss_scalars_uploaded.to_string(),
                    r.costs.local_trainings.to_string(),
                    r.costs.stale_memory_slots.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `cfg.rounds` rounds of `method` for one seed, evaluating every
/// `eval_interval` rounds and after the last round.
pub fn run_seed(cfg: &RunConfig, method: MethodKind, seed: u64) -> Result<RunHistory> {
    let mut sim = build_simulation(cfg, seed)?;
    let mut history = RunHistory {
        method,
        seed,
        rounds: Vec::with_capacity(cfg.rounds),
        evals: vec![EvalPoint {
            round: 0,
            models: sim.evaluate()?,
        }],
    };
    for tau in 0..cfg.rounds {
        let metrics = sim.run_round(method)?;
        let done = tau + 1;
        if done % cfg.eval_interval == 0 || done == cfg.rounds {
            let models = sim.evaluate()?;
            log::info!(
                "{method} seed {seed} round {done}: accuracy {:?}",
                models.iter().map(|m| m.1).collect::<Vec<_>>()
            );
            history.evals.push(EvalPoint { round: done, models });
        }
        history.rounds.push(metrics);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_accuracy: Vec<f64>,
    pub final_loss: Vec<f64>,
    pub mean_step_size: Vec<f64>,
    pub step_size_time_variance: f64,
    pub updates_uploaded: usize,
    pub loss_scalars_uploaded: usize,
    pub local_trainings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSummary {
    pub method: String,
    pub rounds: usize,
    pub model_names: Vec<String>,
    pub mean_final_accuracy: Vec<f64>,
    pub std_final_accuracy: Vec<f64>,
    pub seeds: Vec<SeedSummary>,
}

impl BatchSummary {
    pub fn from_histories(cfg: &RunConfig, method: MethodKind, histories: &[RunHistory]) -> Self {
        let seeds: Vec<SeedSummary> = histories
            .iter()
            .map(|h| SeedSummary {
                seed: h.seed,
                final_accuracy: h.final_accuracy(),
                final_loss: h.final_eval().models.iter().map(|m| m.0).collect(),
                mean_step_size: h.mean_step_size(),
                step_size_time_variance: h.step_size_time_variance(),
                updates_uploaded: h.rounds.iter().map(|r| r.costs.updates_uploaded).sum(),
                loss_scalars_uploaded: h.rounds.iter().map(|r| r.costs.loss_scalars_uploaded).sum(),
                local_trainings: h.rounds.iter().map(|r| r.costs.local_trainings).sum(),
            })
            .collect();
        let (mean, std): (Vec<f64>, Vec<f64>) = (0..cfg.models.len())
            .map(|s| mean_std(&seeds.iter().map(|x| x.final_accuracy[s]).collect::<Vec<_>>()))
            .unzip();
        Self {
            method: method.name(),
            rounds: cfg.rounds,
            model_names: cfg.models.iter().map(|m| m.name.clone()).collect(),
            mean_final_accuracy: mean,
            std_final_accuracy: std,
            seeds,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("summary serialises")
    }
}

fn file_stem(method: MethodKind) -> String {
    method.name().replace(':', "_")
}

pub fn metrics_path(dir: &Path, method: MethodKind, seed: u64) -> PathBuf {
    dir.join(format!("{}_seed{seed}_metrics.csv", file_stem(method)))
}

pub fn summary_path(dir: &Path, method: MethodKind) -> PathBuf {
    dir.join(format!("{}_summary.toml", file_stem(method)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub histories: Vec<RunHistory>,
    pub summary: BatchSummary,
    pub files: Vec<PathBuf>,
}

/// Runs every seed of `cfg` for `method`, writing one metrics file per seed
/// and one aggregate summary into `cfg.output_dir`.
pub fn run_experiment(cfg: &RunConfig, method: MethodKind) -> Result<BatchOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut histories = Vec::with_capacity(cfg.seeds.len());
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        let h = run_seed(cfg, method, seed)?;
        let path = metrics_path(&cfg.output_dir, method, seed);
        h.write_metrics(BufWriter::new(File::create(&path)?))?;
        files.push(path);
        histories.push(h);
    }
    let summary = BatchSummary::from_histories(cfg, method, &histories);
    let path = summary_path(&cfg.output_dir, method);
    write_text(&path, &summary.to_toml_string())?;
    files.push(path);
    Ok(BatchOutcome {
        histories,
        summary,
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodComparison {
    pub method: String,
    pub mean_final_accuracy: Vec<f64>,
    /// Mean over models of this method's mean final accuracy divided by full
    /// participation's; present when full participation is in the list.
    pub relative_accuracy: Option<f64>,
    pub mean_step_size_time_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonSummary {
    pub model_names: Vec<String>,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodComparison>,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub batches: Vec<BatchOutcome>,
    pub summary: ComparisonSummary,
}

impl CompareOutcome {
    pub fn method(&self, method: MethodKind) -> Option<&MethodComparison> {
        let name = method.name();
        self.summary.methods.iter().find(|m| m.method == name)
    }
}

/// Runs each method on identical seeds, data and initial weights and writes
/// a joined accuracy table plus a comparison summary.
pub fn compare(cfg: &RunConfig, methods: &[MethodKind]) -> Result<CompareOutcome> {
    let batches = methods
        .iter()
        .map(|&m| run_experiment(cfg, m))
        .collect::<Result<Vec<_>>>()?;
    let full = batches
        .iter()
        .find(|b| b.histories[0].method == MethodKind::FullParticipation)
        .map(|b| b.summary.mean_final_accuracy.clone());
    let comparisons = batches
        .iter()
        .map(|b| {
            let acc = b.summary.mean_final_accuracy.clone();
            let relative = full.as_ref().map(|f| {
                let ratios: Vec<f64> = acc.iter().zip(f).map(|(a, f)| a / f).collect();
                ratios.iter().sum::<f64>() / ratios.len() as f64
            });
            let tv: Vec<f64> = b.histories.iter().map(RunHistory::step_size_time_variance).collect();
            MethodComparison {
                method: b.summary.method.clone(),
                mean_final_accuracy: acc,
                relative_accuracy: relative,
                mean_step_size_time_variance: mean_std(&tv).0,
            }
        })
        .collect();
    let summary = ComparisonSummary {
        model_names: cfg.models.iter().map(|m| m.name.clone()).collect(),
        seeds: cfg.seeds.clone(),
        methods: comparisons,
    };
    write_joined_accuracy(&cfg.output_dir.join("compare_accuracy.csv"), &batches)?;
    write_text(
        &cfg.output_dir.join("compare_summary.toml"),
        &toml::to_string(&summary).expect("summary serialises"),
    )?;
    Ok(CompareOutcome { batches, summary })
}

/// `round,model,<method>...` with the seed-mean test accuracy per method.
fn write_joined_accuracy(path: &Path, batches: &[BatchOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["round".to_string(), "model".to_string()];
    header.extend(batches.iter().map(|b| b.summary.method.clone()));
    w.write_record(&header)?;
    let first = &batches[0].histories[0];
    for (k, e) in first.evals.iter().enumerate() {
        for s in 0..e.models.len() {
            let mut row = vec![e.round.to_string(), s.to_string()];
            for b in batches {
                let accs: Vec<f64> = b.histories.iter().map(|h| h.evals[k].models[s].1).collect();
                row.push(mean_std(&accs).0.to_string());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the topology and every client and test dataset for `seed` under `dir`.
pub fn export_data(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let sim = build_simulation(cfg, seed)?;
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();

    let topo_path = dir.join("topology.csv");
    {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&topo_path)?));
        let mut header = vec!["client".to_string(), "processors".to_string()];
        header.extend((0..sim.num_models()).map(|s| format!("samples_model{s}")));
        w.write_record(&header)?;
        for c in sim.topology.clients() {
            let mut row = vec![c.client_id.to_string(), c.num_processors.to_string()];
            row.extend((0..sim.num_models()).map(|s| c.samples(s).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    files.push(topo_path);

    let write_set = |path: PathBuf, data: &ClientDataset<f64>| -> Result<PathBuf> {
        data.write_delimited(BufWriter::new(File::create(&path)?))?;
        Ok(path)
    };
    for s in 0..sim.num_models() {
        let model_dir = dir.join(format!("model{s}"));
        fs::create_dir_all(&model_dir)?;
        for (i, data) in &sim.train_data[s] {
            files.push(write_set(model_dir.join(format!("client{i}.csv")), data)?);
        }
        files.push(write_set(model_dir.join("test.csv"), &sim.test_data[s])?);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn small() -> RunConfig {
        let mut cfg = RunConfig {
            num_clients: 8,
            rounds: 3,
            eval_interval: 2,
            seeds: vec![1],
            ..RunConfig::default()
        };
        cfg.models.truncate(2);
        for m in &mut cfg.models {
            m.data.feature_dim = 4;
            m.data.num_labels = 3;
        }
        cfg
    }

    #[test]
    fn same_seed_same_inputs() {
        let cfg = small();
        let a = build_simulation(&cfg, 3).unwrap();
        let b = build_simulation(&cfg, 3).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.train_data, b.train_data);
        assert_eq!(a.topology, b.topology);
        let c = build_simulation(&cfg, 4).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn zero_rounds_evaluates_initial_weights() {
        let cfg = RunConfig { rounds: 0, ..small() };
        let h = run_seed(&cfg, MethodKind::Lvr, 1).unwrap();
        assert!(h.rounds.is_empty());
        assert_eq!(h.evals.len(), 1);
        assert_eq!(h.evals[0].round, 0);
    }

    #[test]
    fn eval_schedule_includes_last_round() {
        let h = run_seed(&small(), MethodKind::Random, 1).unwrap();
        assert_eq!(h.evals.iter().map(|e| e.round).collect::<Vec<_>>(), vec![0, 2, 3]);
        let mut buf = Vec::new();
        h.write_metrics(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        assert!(text.starts_with("round,model,learning_rate"));
    }

    #[test]
    fn models_get_distinct_prototypes() {
        let mut cfg = small();
        cfg.models = vec![ModelConfig::default(), ModelConfig::default()];
        let sim = build_simulation(&cfg, 0).unwrap();
        assert_ne!(sim.test_data[0].features, sim.test_data[1].features);
    }
}
