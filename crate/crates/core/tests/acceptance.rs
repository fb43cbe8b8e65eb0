//! Acceptance suite: one PASS/FAIL line per criterion; exits nonzero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use mmfl::config::RunConfig;
use mmfl::domain::{ClientProfile, SystemTopology};
use mmfl::engine::{MethodKind, Simulation};
use mmfl::experiment::{run_experiment, run_seed, RunHistory};
use mmfl::models::{ModelSpec, TrainConfig, WeightVector};
use mmfl::rng::{derive_rng, Stream};
use mmfl::synthdata::ClientDataset;
use mmfl::verify;
use rand::Rng;

const DESK: &str = include_str!("../../../configs/desk.toml");

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(id: usize, name: &str, outcome: Result<Outcome, String>) -> bool {
    let (passed, detail) = match outcome {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {id:>2} [{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn from_suite(r: mmfl::Result<verify::SuiteReport>) -> Result<Outcome, String> {
    let r = r.map_err(|e| e.to_string())?;
    Ok(Outcome {
        passed: r.passed,
        detail: r.details.join("; "),
    })
}

fn desk() -> RunConfig {
    RunConfig::from_toml_str(DESK).expect("desk config parses")
}

fn run_all(cfg: &RunConfig, method: MethodKind) -> Result<(Vec<RunHistory>, f64), String> {
    let start = Instant::now();
    let hs = cfg
        .seeds
        .iter()
        .map(|&seed| run_seed(cfg, method, seed))
        .collect::<mmfl::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    Ok((hs, start.elapsed().as_secs_f64()))
}

/// Per-model mean of `|H_s|_1` pooled over every seed and round.
fn pooled_step_size(hs: &[RunHistory]) -> Vec<f64> {
    let num_models = hs[0].rounds[0].models.len();
    let mut sums = vec![0.0; num_models];
    let mut n = 0.0;
    for h in hs {
        for r in &h.rounds {
            for (s, m) in r.models.iter().enumerate() {
                sums[s] += m.step_size;
            }
            n += 1.0;
        }
    }
    sums.iter().map(|x| x / n).collect()
}

fn step_size_stability(lvr: &[RunHistory], gvr: &[RunHistory]) -> Outcome {
    let lower = lvr
        .iter()
        .zip(gvr)
        .filter(|(l, g)| l.step_size_time_variance() < g.step_size_time_variance())
        .count();
    let lm = pooled_step_size(lvr);
    let gm = pooled_step_size(gvr);
    let in_band = lm.iter().chain(&gm).all(|m| (0.9..=1.1).contains(m));
    let fmt = |hs: &[RunHistory]| {
        hs.iter()
            .map(|h| format!("{:.3}", h.step_size_time_variance()))
            .collect::<Vec<_>>()
            .join("/")
    };
    Outcome {
        passed: lower >= 4 && in_band,
        detail: format!(
            "LVR lower in {lower}/5 seeds (LVR {} vs GVR {}); mean |H|_1 LVR {lm:.3?} GVR {gm:.3?}",
            fmt(lvr),
            fmt(gvr)
        ),
    }
}

/// Mean over models of `mean_seed acc / mean_seed acc_full`.
fn relative_accuracy(hs: &[RunHistory], full: &[RunHistory]) -> f64 {
    let mean_acc = |hs: &[RunHistory]| -> Vec<f64> {
        let n = hs.len() as f64;
        let s = hs[0].final_accuracy().len();
        (0..s)
            .map(|k| hs.iter().map(|h| h.final_accuracy()[k]).sum::<f64>() / n)
            .collect()
    };
    let a = mean_acc(hs);
    let f = mean_acc(full);
    a.iter().zip(&f).map(|(x, y)| x / y).sum::<f64>() / a.len() as f64
}

fn method_ordering(runs: &BTreeMap<&str, (Vec<RunHistory>, f64)>) -> Outcome {
    let full = &runs["full"].0;
    let rel = |k: &str| relative_accuracy(&runs[k].0, full);
    let (f, sv, l, r) = (rel("full"), rel("stalevr"), rel("lvr"), rel("random"));
    let secs: f64 = ["full", "stalevr", "lvr", "random"].iter().map(|k| runs[k].1).sum();
    let ordered = f >= sv && sv >= l && l >= r;
    let gap = sv - r;
    Outcome {
        passed: ordered && gap >= 0.03 && secs < 600.0,
        detail: format!(
            "relative accuracy full {f:.5} stalevr {sv:.5} lvr {l:.5} random {r:.5}; stalevr - random {gap:.4}; {secs:.0} s"
        ),
    }
}

fn determinism() -> Result<Outcome, String> {
    let mut cfg = desk();
    cfg.rounds = 20;
    cfg.seeds = vec![3];
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for method in [MethodKind::StaleVre, MethodKind::Lvr] {
        let mut outs = Vec::new();
        for dir in [a.path(), b.path()] {
            cfg.output_dir = dir.to_path_buf();
            outs.push(run_experiment(&cfg, method).map_err(|e| e.to_string())?.files);
        }
        for (fa, fb) in outs[0].iter().zip(&outs[1]) {
            let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
            if read(fa)? != read(fb)? {
                return Ok(Outcome {
                    passed: false,
                    detail: format!("{} differs between runs", fa.display()),
                });
            }
            compared += 1;
        }
    }
    Ok(Outcome {
        passed: compared > 0,
        detail: format!("{compared} file pairs byte-identical"),
    })
}

fn ten_processor_simulation() -> mmfl::Result<Simulation<f64>> {
    // B = 3 + 2 + 2 + 1 + 1 + 1 = 10 processors, two models.
    let layout: [(usize, &[usize]); 6] = [
        (3, &[0, 1]),
        (2, &[0, 1]),
        (2, &[0, 1]),
        (1, &[0]),
        (1, &[1]),
        (1, &[0, 1]),
    ];
    let spec = ModelSpec::softmax_linear(3, 3);
    let mut rng = derive_rng(10, Stream::Fuzz, &[]);
    let mut profiles = Vec::new();
    let mut data = vec![BTreeMap::new(), BTreeMap::new()];
    for (i, (b, models)) in layout.iter().enumerate() {
        let mut counts = Vec::new();
        for &s in *models {
            let n = rng.random_range(5..20);
            let features = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
            data[s].insert(i, ClientDataset::new(features, labels, s)?);
            counts.push((s, n));
        }
        profiles.push(ClientProfile::new(i, *b, &counts));
    }
    let topology = SystemTopology::build(profiles, 2)?;
    let test = (0..2)
        .map(|s| ClientDataset::pooled(data[s].values(), s))
        .collect();
    let weights = (0..2).map(|_| WeightVector::init(&spec, &mut rng)).collect();
    Simulation::new(
        topology,
        vec![spec.clone(), spec],
        TrainConfig::default(),
        data,
        test,
        weights,
        3.0,
        10,
    )
}

fn cost_accounting() -> Result<Outcome, String> {
    let base = ten_processor_simulation().map_err(|e| e.to_string())?;
    let v = base.topology.total_processors();
    if v != 10 {
        return Err(format!("instance has {v} processors"));
    }
    let mut mismatches = Vec::new();
    let mut rounds = 0;
    for method in [
        MethodKind::Lvr,
        MethodKind::Gvr,
        MethodKind::StaleVr,
        MethodKind::StaleVre,
        MethodKind::Random,
    ] {
        let mut sim = base.clone();
        for _ in 0..5 {
            let m = sim.run_round(method).map_err(|e| e.to_string())?;
            rounds += 1;
            let active: usize = m.models.iter().map(|x| x.active_processors).sum();
            let (loss, train) = match method {
                MethodKind::Lvr | MethodKind::StaleVre => (v, active),
                MethodKind::Gvr | MethodKind::StaleVr => (0, v),
                _ => (0, active),
            };
            let c = m.costs;
            if c.updates_uploaded != active || c.loss_scalars_uploaded != loss || c.local_trainings != train {
                mismatches.push(format!("{method} round {}: {c:?}, |A| = {active}", m.round));
            }
        }
    }
    Ok(Outcome {
        passed: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            format!("V = {v}: counters exact over {rounds} rounds")
        } else {
            mismatches.join("; ")
        },
    })
}

fn main() -> ExitCode {
    let seed = 0;
    let mut ok = true;
    ok &= report(1, "closed-form plan optimality", from_suite(verify::plan_optimality(100, 0.005, seed)));
    ok &= report(2, "staleness coefficient optimality", from_suite(verify::beta_optimality(100, seed)));
    ok &= report(3, "unbiased aggregation", from_suite(verify::unbiasedness(100_000, seed)));
    ok &= report(4, "variance reduction", from_suite(verify::variance_reduction(100_000, seed)));

    let cfg = desk();
    let mut runs: BTreeMap<&str, (Vec<RunHistory>, f64)> = BTreeMap::new();
    let mut desk_err = None;
    for (key, method) in [
        ("full", MethodKind::FullParticipation),
        ("stalevr", MethodKind::StaleVr),
        ("lvr", MethodKind::Lvr),
        ("gvr", MethodKind::Gvr),
        ("random", MethodKind::Random),
    ] {
        match run_all(&cfg, method) {
            Ok(r) => {
                runs.insert(key, r);
            }
            Err(e) => {
                desk_err = Some(e);
                break;
            }
        }
    }
    let desk_outcome = |f: &dyn Fn() -> Outcome| match &desk_err {
        Some(e) => Err(e.clone()),
        None => Ok(f()),
    };
    ok &= report(
        5,
        "step-size stability",
        desk_outcome(&|| step_size_stability(&runs["lvr"].0, &runs["gvr"].0)),
    );
    ok &= report(6, "method ordering", desk_outcome(&|| method_ordering(&runs)));
    ok &= report(7, "gradient correctness", from_suite(verify::gradient_check(50, seed)));
    ok &= report(8, "plan constraints", from_suite(verify::plan_constraints(1000, seed)));
    ok &= report(9, "determinism", determinism());
    ok &= report(10, "cost accounting", cost_accounting());

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
