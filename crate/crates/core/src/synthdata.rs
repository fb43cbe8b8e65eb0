//! Synthetic non-IID classification data.
//!
//! Each label is an isotropic Gaussian blob around a random prototype. Clients
//! see only a random subset of labels, and per model a small share of clients
//! is "high-data" (holding `high_low_ratio` times the low-tier sample count).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{derive_rng, Stream};
use crate::{MmflError, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_labels: usize,
    pub feature_dim: usize,
    /// Size of the per-label pool; `test_fraction` of it forms the IID test set.
    pub samples_per_label_pool: usize,
    pub label_fraction_per_client: f64,
    pub high_client_fraction: f64,
    pub high_low_ratio: f64,
    /// Samples held by a low-tier client.
    pub low_tier_samples: usize,
    pub noise_scale: f64,
    /// Standard deviation of prototype coordinates.
    pub class_separation: f64,
    /// Uniform ±10% jitter on per-client counts.
    pub jitter: bool,
    pub test_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_labels: 10,
            feature_dim: 20,
            samples_per_label_pool: 200,
            label_fraction_per_client: 0.30,
            high_client_fraction: 0.10,
            high_low_ratio: 10.0,
            low_tier_samples: 12,
            noise_scale: 1.0,
            class_separation: 1.0,
            jitter: false,
            test_fraction: 0.2,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(MmflError::InvalidDatasetSpec(msg.to_string()));
        if self.num_labels < 2 {
            return bad("num_labels must be >= 2");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if !(self.label_fraction_per_client > 0.0 && self.label_fraction_per_client <= 1.0) {
            return bad("label_fraction_per_client must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.high_client_fraction) {
            return bad("high_client_fraction must lie in [0, 1]");
        }
        if !(self.high_low_ratio >= 1.0) {
            return bad("high_low_ratio must be >= 1");
        }
        if self.low_tier_samples == 0 {
            return bad("low_tier_samples must be >= 1");
        }
        if !(self.noise_scale >= 0.0) || !(self.class_separation > 0.0) {
            return bad("noise_scale must be >= 0 and class_separation > 0");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        self.labels_per_client().map(|_| ())
    }

    /// `ceil(label_fraction * num_labels)`, which must be in `[1, num_labels]`.
    pub fn labels_per_client(&self) -> Result<usize> {
        let k = (self.label_fraction_per_client * self.num_labels as f64 - 1e-9).ceil() as usize;
        if k == 0 || k > self.num_labels {
            return Err(MmflError::InvalidDatasetSpec(format!(
                "cannot give each client {k} of {} labels",
                self.num_labels
            )));
        }
        Ok(k)
    }

    pub fn high_tier_samples(&self) -> usize {
        (self.low_tier_samples as f64 * self.high_low_ratio).round() as usize
    }

    pub fn test_samples_per_label(&self) -> usize {
        ((self.samples_per_label_pool as f64 * self.test_fraction).round() as usize).max(1)
    }
}

/// Local data `𝒟_{i,s}` of one client for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset<T> {
    pub features: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    pub model_id: usize,
}

impl<T: Scalar> ClientDataset<T> {
    pub fn new(features: Vec<Vec<T>>, labels: Vec<usize>, model_id: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(MmflError::DimensionMismatch {
                expected: features.len(),
                actual: labels.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            model_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenates datasets (e.g. all clients of one model).
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a ClientDataset<T>>, model_id: usize) -> Self {
        let mut out = Self {
            features: Vec::new(),
            labels: Vec::new(),
            model_id,
        };
        for p in parts {
            out.features.extend(p.features.iter().cloned());
            out.labels.extend_from_slice(&p.labels);
        }
        out
    }

    /// Writes one row per sample: features, then label.
    pub fn write_delimited<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.features.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (x, y) in self.features.iter().zip(&self.labels) {
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(y.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-label Gaussian parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPrototypes<T> {
    pub means: Vec<Vec<T>>,
    pub noise_scale: T,
}

impl<T: Scalar> LabelPrototypes<T> {
    pub fn num_labels(&self) -> usize {
        self.means.len()
    }

    pub fn draw<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Vec<T> {
        self.means[label]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.noise_scale * T::lit(z)
            })
            .collect()
    }
}

pub fn generate_label_prototypes<T: Scalar>(
    spec: &DatasetSpec,
    seed: u64,
) -> Result<LabelPrototypes<T>> {
    spec.validate()?;
    let mut rng = derive_rng(seed, Stream::Prototypes, &[]);
    let mut means: Vec<Vec<T>> = Vec::with_capacity(spec.num_labels);
    while means.len() < spec.num_labels {
        let m: Vec<T> = (0..spec.feature_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(spec.class_separation * z)
            })
            .collect();
        // Continuous draws collide with probability zero; keep the guarantee explicit.
        if means.iter().all(|prev| prev != &m) {
            means.push(m);
        }
    }
    Ok(LabelPrototypes {
        means,
        noise_scale: T::lit(spec.noise_scale),
    })
}

/// One model's client datasets plus the high-tier membership that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition<T> {
    pub datasets: BTreeMap<usize, ClientDataset<T>>,
    pub high_tier: BTreeSet<usize>,
    pub label_subsets: BTreeMap<usize, Vec<usize>>,
}

impl<T: Scalar> Partition<T> {
    pub fn counts(&self) -> BTreeMap<usize, usize> {
        self.datasets.iter().map(|(&i, d)| (i, d.len())).collect()
    }

    pub fn total(&self) -> usize {
        self.datasets.values().map(ClientDataset::len).sum()
    }

    /// Fraction of samples held by the high tier.
    pub fn high_tier_share(&self) -> f64 {
        let high: usize = self
            .high_tier
            .iter()
            .filter_map(|i| self.datasets.get(i))
            .map(ClientDataset::len)
            .sum();
        high as f64 / self.total() as f64
    }
}

fn jittered<R: Rng + ?Sized>(n: usize, jitter: bool, rng: &mut R) -> usize {
    if !jitter {
        return n;
    }
    let f: f64 = rng.random_range(0.9..=1.1);
    ((n as f64 * f).round() as usize).max(1)
}

/// Splits model `model_id`'s data over `model_clients` (the clients holding
/// that model): a random label subset per client, and an independently drawn
/// high tier of `round(high_client_fraction * |model_clients|)` clients.
pub fn partition_to_clients<T: Scalar>(
    spec: &DatasetSpec,
    prototypes: &LabelPrototypes<T>,
    model_clients: &[usize],
    model_id: usize,
    seed: u64,
) -> Result<Partition<T>> {
    spec.validate()?;
    if prototypes.num_labels() != spec.num_labels {
        return Err(MmflError::DimensionMismatch {
            expected: spec.num_labels,
            actual: prototypes.num_labels(),
        });
    }
    let k = spec.labels_per_client()?;
    let n = model_clients.len();
    let mut tier_rng = derive_rng(seed, Stream::Partition, &[model_id as u64, u64::MAX]);
    let n_high = ((spec.high_client_fraction * n as f64).round() as usize).min(n);
    let high_tier: BTreeSet<usize> = sample_indices(&mut tier_rng, n, n_high)
        .into_iter()
        .map(|j| model_clients[j])
        .collect();

    let mut datasets = BTreeMap::new();
    let mut label_subsets = BTreeMap::new();
    for &client in model_clients {
        let mut rng = derive_rng(seed, Stream::Partition, &[model_id as u64, client as u64]);
        let mut labels: Vec<usize> = sample_indices(&mut rng, spec.num_labels, k).into_vec();
        labels.sort_unstable();
        let base = if high_tier.contains(&client) {
            spec.high_tier_samples()
        } else {
            spec.low_tier_samples
        };
        let count = jittered(base, spec.jitter, &mut rng);
        let mut features = Vec::with_capacity(count);
        let mut ys = Vec::with_capacity(count);
        for _ in 0..count {
            let y = labels[rng.random_range(0..k)];
            features.push(prototypes.draw(y, &mut rng));
            ys.push(y);
        }
        datasets.insert(client, ClientDataset::new(features, ys, model_id)?);
        label_subsets.insert(client, labels);
    }
    Ok(Partition {
        datasets,
        high_tier,
        label_subsets,
    })
}

/// Class-balanced IID test pool for one model.
pub fn generate_test_pool<T: Scalar>(
    spec: &DatasetSpec,
    prototypes: &LabelPrototypes<T>,
    model_id: usize,
    seed: u64,
) -> Result<ClientDataset<T>> {
    let per_label = spec.test_samples_per_label();
    let mut rng = derive_rng(seed, Stream::TestPool, &[model_id as u64]);
    let mut features = Vec::with_capacity(per_label * spec.num_labels);
    let mut labels = Vec::with_capacity(per_label * spec.num_labels);
    for y in 0..prototypes.num_labels() {
        for _ in 0..per_label {
            features.push(prototypes.draw(y, &mut rng));
            labels.push(y);
        }
    }
    ClientDataset::new(features, labels, model_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_distinct_prototypes() {
        let spec = DatasetSpec {
            num_labels: 2,
            feature_dim: 2,
            ..Default::default()
        };
        let p = generate_label_prototypes::<f64>(&spec, 3).unwrap();
        assert_eq!(p.means.len(), 2);
        assert_ne!(p.means[0], p.means[1]);
    }

    #[test]
    fn zero_noise_reproduces_means() {
        let spec = DatasetSpec {
            noise_scale: 0.0,
            ..Default::default()
        };
        let p = generate_label_prototypes::<f64>(&spec, 3).unwrap();
        let clients: Vec<usize> = (0..5).collect();
        let part = partition_to_clients(&spec, &p, &clients, 0, 3).unwrap();
        for d in part.datasets.values() {
            for (x, &y) in d.features.iter().zip(&d.labels) {
                assert_eq!(x, &p.means[y]);
            }
        }
    }

    #[test]
    fn reported_tier_share_at_120_clients() {
        // 12 high clients with 120 points, 108 low clients with 12 points.
        let spec = DatasetSpec::default();
        let p = generate_label_prototypes::<f64>(&spec, 1).unwrap();
        let clients: Vec<usize> = (0..120).collect();
        let part = partition_to_clients(&spec, &p, &clients, 0, 1).unwrap();
        assert_eq!(part.high_tier.len(), 12);
        let expected = 12.0 * 120.0 / (12.0 * 120.0 + 108.0 * 12.0);
        assert!((part.high_tier_share() - expected).abs() < 1e-12);
        assert!((part.high_tier_share() - 0.526).abs() < 5e-4);
    }

    #[test]
    fn no_high_tier() {
        let spec = DatasetSpec {
            high_client_fraction: 0.0,
            ..Default::default()
        };
        let p = generate_label_prototypes::<f64>(&spec, 1).unwrap();
        let clients: Vec<usize> = (0..20).collect();
        let part = partition_to_clients(&spec, &p, &clients, 0, 1).unwrap();
        assert!(part.high_tier.is_empty());
        assert_eq!(part.high_tier_share(), 0.0);
        assert!(part.datasets.values().all(|d| d.len() == 12));
    }

    #[test]
    fn labels_restricted_to_subset() {
        let spec = DatasetSpec::default();
        let p = generate_label_prototypes::<f64>(&spec, 9).unwrap();
        let clients: Vec<usize> = (0..30).collect();
        let part = partition_to_clients(&spec, &p, &clients, 0, 9).unwrap();
        for (i, d) in &part.datasets {
            let subset = &part.label_subsets[i];
            assert_eq!(subset.len(), 3);
            assert!(d.labels.iter().all(|y| subset.contains(y)));
        }
    }

    #[test]
    fn infeasible_label_fraction() {
        let spec = DatasetSpec {
            label_fraction_per_client: 0.0,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let spec = DatasetSpec {
            num_labels: 1,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn jitter_stays_within_ten_percent() {
        let spec = DatasetSpec {
            jitter: true,
            high_client_fraction: 0.0,
            low_tier_samples: 100,
            ..Default::default()
        };
        let p = generate_label_prototypes::<f64>(&spec, 2).unwrap();
        let clients: Vec<usize> = (0..50).collect();
        let part = partition_to_clients(&spec, &p, &clients, 0, 2).unwrap();
        assert!(part.datasets.values().all(|d| (90..=110).contains(&d.len())));
        assert!(part.datasets.values().any(|d| d.len() != 100));
    }

    #[test]
    fn export_has_header_and_rows() {
        let d = ClientDataset::new(vec![vec![1.0f64, 2.0], vec![3.0, 4.0]], vec![0, 1], 0).unwrap();
        let mut buf = Vec::new();
        d.write_delimited(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "x0,x1,label\n1,2,0\n3,4,1\n");
    }
}
