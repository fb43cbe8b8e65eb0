//! Clients, processors and the static system topology.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{MmflError, Result, Scalar};

/// Static description of one client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientProfile {
    pub client_id: usize,
    /// Number of processors `B_i` (models the client can train per round).
    pub num_processors: usize,
    pub available_models: BTreeSet<usize>,
    /// `n_{i,s}`: training samples the client holds for each model.
    pub samples_per_model: BTreeMap<usize, usize>,
}

impl ClientProfile {
    pub fn new(client_id: usize, num_processors: usize, samples: &[(usize, usize)]) -> Self {
        let samples_per_model: BTreeMap<usize, usize> = samples.iter().copied().collect();
        let available_models = samples_per_model
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(&s, _)| s)
            .collect();
        Self {
            client_id,
            num_processors,
            available_models,
            samples_per_model,
        }
    }

    pub fn samples(&self, model: usize) -> usize {
        self.samples_per_model.get(&model).copied().unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: String| MmflError::InvalidProfile {
            client: self.client_id,
            reason,
        };
        if self.num_processors == 0 {
            return Err(bad("num_processors must be >= 1".into()));
        }
        for (&s, &n) in &self.samples_per_model {
            if (n > 0) != self.available_models.contains(&s) {
                return Err(bad(format!(
                    "model {s}: sample count {n} disagrees with availability"
                )));
            }
        }
        for &s in &self.available_models {
            if self.samples(s) == 0 {
                return Err(bad(format!("model {s} available but has no samples")));
            }
        }
        Ok(())
    }
}

/// A processor `(i, b)`: slot `b` of client `i`. Ordered by client, then slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcessorRef {
    pub client: usize,
    pub slot: usize,
}

impl ProcessorRef {
    pub fn new(client: usize, slot: usize) -> Self {
        Self { client, slot }
    }
}

/// Immutable topology shared by every other module.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemTopology<T> {
    clients: Vec<ClientProfile>,
    num_models: usize,
    /// Dense `[client][model]`; zero where the model is unavailable.
    data_weights: Vec<Vec<T>>,
    model_clients: Vec<Vec<usize>>,
    total_processors: usize,
}

/// `d_{i,s} = n_{i,s} / sum_j n_{j,s}`, dense `[client][model]`.
///
/// `profiles` must be indexed by client id.
pub fn compute_data_weights<T: Scalar>(
    profiles: &[ClientProfile],
    num_models: usize,
) -> Result<Vec<Vec<T>>> {
    let mut totals = vec![0usize; num_models];
    for p in profiles {
        for (&s, &n) in &p.samples_per_model {
            if s >= num_models {
                return Err(MmflError::ModelOutOfRange {
                    client: p.client_id,
                    model: s,
                    num_models,
                });
            }
            totals[s] += n;
        }
    }
    if let Some(model) = totals.iter().position(|&t| t == 0) {
        return Err(MmflError::EmptyModelPopulation { model });
    }
    Ok(profiles
        .iter()
        .map(|p| {
            (0..num_models)
                .map(|s| T::from_usize_lossy(p.samples(s)) / T::from_usize_lossy(totals[s]))
                .collect()
        })
        .collect())
}

impl<T: Scalar> SystemTopology<T> {
    /// Validates profiles and derives weights, model populations and `V`.
    pub fn build(mut profiles: Vec<ClientProfile>, num_models: usize) -> Result<Self> {
        if profiles.is_empty() {
            return Err(MmflError::NoClients);
        }
        profiles.sort_by_key(|p| p.client_id);
        for w in profiles.windows(2) {
            if w[0].client_id == w[1].client_id {
                return Err(MmflError::DuplicateClient(w[0].client_id));
            }
        }
        for (expected, p) in profiles.iter().enumerate() {
            if p.client_id != expected {
                return Err(MmflError::NonContiguousClients(expected));
            }
        }
        for p in &profiles {
            if let Some(&s) = p.available_models.iter().find(|&&s| s >= num_models) {
                return Err(MmflError::ModelOutOfRange {
                    client: p.client_id,
                    model: s,
                    num_models,
                });
            }
            p.validate()?;
        }
        let data_weights = compute_data_weights(&profiles, num_models)?;
        let mut model_clients = vec![Vec::new(); num_models];
        for p in &profiles {
            for &s in &p.available_models {
                model_clients[s].push(p.client_id);
            }
        }
        // Clients that hold data for no model never get processors assigned.
        let total_processors = profiles
            .iter()
            .filter(|p| !p.available_models.is_empty())
            .map(|p| p.num_processors)
            .sum();
        Ok(Self {
            clients: profiles,
            num_models,
            data_weights,
            model_clients,
            total_processors,
        })
    }

    pub fn clients(&self) -> &[ClientProfile] {
        &self.clients
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn num_models(&self) -> usize {
        self.num_models
    }

    pub fn client(&self, i: usize) -> &ClientProfile {
        &self.clients[i]
    }

    pub fn num_processors(&self, client: usize) -> usize {
        self.clients[client].num_processors
    }

    /// `V`, the number of processors over clients that hold any model.
    pub fn total_processors(&self) -> usize {
        self.total_processors
    }

    pub fn data_weight(&self, client: usize, model: usize) -> T {
        self.data_weights[client][model]
    }

    /// `𝒩_s`, ascending client ids.
    pub fn model_clients(&self, model: usize) -> &[usize] {
        &self.model_clients[model]
    }

    pub fn is_available(&self, client: usize, model: usize) -> bool {
        self.clients[client].available_models.contains(&model)
    }

    /// All processors in `ProcessorRef` order, skipping clients without models.
    pub fn processors(&self) -> impl Iterator<Item = ProcessorRef> + '_ {
        self.clients
            .iter()
            .filter(|p| !p.available_models.is_empty())
            .flat_map(|p| (0..p.num_processors).map(move |b| ProcessorRef::new(p.client_id, b)))
    }

    /// `d_{i,s} / B_i`, the full-participation weight of one processor.
    pub fn slot_weight(&self, client: usize, model: usize) -> T {
        self.data_weight(client, model) / T::from_usize_lossy(self.num_processors(client))
    }
}

/// Share of clients in each processor-capacity class: `B_i = |S_i|`,
/// `B_i = ceil(|S_i| / 2)` and `B_i = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessorMix {
    pub full: f64,
    pub half: f64,
    pub single: f64,
}

impl Default for ProcessorMix {
    fn default() -> Self {
        Self {
            full: 0.25,
            half: 0.50,
            single: 0.25,
        }
    }
}

/// Model availability and processor counts before any data is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientLayout {
    pub num_models: usize,
    pub available: Vec<BTreeSet<usize>>,
    pub processors: Vec<usize>,
}

impl ClientLayout {
    pub fn num_clients(&self) -> usize {
        self.available.len()
    }

    /// Clients holding `model`, ascending.
    pub fn model_clients(&self, model: usize) -> Vec<usize> {
        (0..self.num_clients())
            .filter(|&i| self.available[i].contains(&model))
            .collect()
    }

    /// Attaches per-model sample counts (`counts[s][i]`) to get profiles.
    pub fn profiles(&self, counts: &[BTreeMap<usize, usize>]) -> Vec<ClientProfile> {
        (0..self.num_clients())
            .map(|i| {
                let samples: Vec<(usize, usize)> = self.available[i]
                    .iter()
                    .map(|&s| (s, counts[s].get(&i).copied().unwrap_or(0)))
                    .collect();
                ClientProfile::new(i, self.processors[i], &samples)
            })
            .collect()
    }
}

fn share_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// Draws availability (a `missing_fraction` share of clients lacks one random
/// model) and processor counts following `mix`.
pub fn sample_layout<R: Rng + ?Sized>(
    num_clients: usize,
    num_models: usize,
    missing_fraction: f64,
    mix: ProcessorMix,
    rng: &mut R,
) -> Result<ClientLayout> {
    if num_clients == 0 {
        return Err(MmflError::NoClients);
    }
    let mut available: Vec<BTreeSet<usize>> = vec![(0..num_models).collect(); num_clients];
    if num_models >= 2 {
        let n_missing = share_count(missing_fraction, num_clients);
        for i in rand::seq::index::sample(rng, num_clients, n_missing) {
            let drop = rng.random_range(0..num_models);
            available[i].remove(&drop);
        }
    }
    let mut order: Vec<usize> = (0..num_clients).collect();
    order.shuffle(rng);
    let n_full = share_count(mix.full, num_clients);
    let n_half = share_count(mix.half, num_clients).min(num_clients - n_full);
    let mut processors = vec![1; num_clients];
    for (rank, &i) in order.iter().enumerate() {
        let k = available[i].len().max(1);
        processors[i] = if rank < n_full {
            k
        } else if rank < n_full + n_half {
            k.div_ceil(2)
        } else {
            1
        };
    }
    Ok(ClientLayout {
        num_models,
        available,
        processors,
    })
}
