//! Synthetic Gaussian-cluster datasets and their partitioning across
//! simulated devices (equal or unbalanced sizes, IID or label-skewed).

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw (pre-feature-map) samples with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub raw_inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn new(raw_inputs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize, seed: u64) -> Result<Self> {
        if raw_inputs.len() != labels.len() {
            return Err(Error::Contract("inputs and labels differ in length".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config("a dataset needs at least 2 classes".into()));
        }
        let mut seen = vec![false; num_classes];
        for &y in &labels {
            *seen
                .get_mut(y)
                .ok_or_else(|| Error::Contract(format!("label {y} out of range")))? = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("class {missing} has no samples")));
        }
        Ok(Self {
            raw_inputs,
            labels,
            num_classes,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_inputs.first().map_or(0, Vec::len)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows and labels at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
        indices
            .iter()
            .map(|&i| (self.raw_inputs[i].clone(), self.labels[i]))
            .unzip()
    }

    /// Splits off the first `count` samples. Generated datasets interleave
    /// classes, so a prefix of `k * num_classes` samples is class-balanced.
    pub fn split_front(mut self, count: usize) -> Result<(Dataset, Dataset)> {
        if count == 0 || count >= self.len() {
            return Err(Error::Config(format!(
                "cannot split {count} samples off a dataset of {}",
                self.len()
            )));
        }
        let rest_inputs = self.raw_inputs.split_off(count);
        let rest_labels = self.labels.split_off(count);
        let front = Dataset::new(self.raw_inputs, self.labels, self.num_classes, self.seed)?;
        let rest = Dataset::new(rest_inputs, rest_labels, self.num_classes, self.seed)?;
        Ok((front, rest))
    }

    /// CSV with a header row `x0,..,x{d-1},label`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.raw_dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        out.write_record(&header).map_err(csv_err)?;
        for (x, y) in self.raw_inputs.iter().zip(&self.labels) {
            let mut record: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            record.push(y.to_string());
            out.write_record(&record).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, num_classes: usize) -> Result<Self> {
        let mut input = csv::Reader::from_reader(reader);
        let mut raw_inputs = Vec::new();
        let mut labels = Vec::new();
        for record in input.records() {
            let record = record.map_err(csv_err)?;
            let (label, xs) = record
                .iter()
                .collect::<Vec<_>>()
                .split_last()
                .map(|(l, xs)| (l.to_string(), xs.iter().map(|s| s.to_string()).collect::<Vec<_>>()))
                .ok_or_else(|| Error::Contract("empty csv record".into()))?;
            let row = xs
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Contract(format!("bad feature value: {e}")))?;
            raw_inputs.push(row);
            labels.push(label.parse().map_err(|e| Error::Contract(format!("bad label: {e}")))?);
        }
        Dataset::new(raw_inputs, labels, num_classes, 0)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Storage(e.to_string())
}

/// Gaussian clusters: one standard-normal mean per class and
/// `mean + noise_scale * N(0, I)` per sample. Classes are interleaved
/// (sample `i` has label `i % num_classes`).
pub fn generate_synthetic(
    num_classes: usize,
    raw_dim: usize,
    samples_per_class: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || raw_dim == 0 || samples_per_class == 0 {
        return Err(Error::Config(
            "need at least 2 classes, raw_dim >= 1 and samples_per_class >= 1".into(),
        ));
    }
    if !(noise_scale.is_finite() && noise_scale >= 0.0) {
        return Err(Error::Config("noise_scale must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..raw_dim).map(|_| normal()).collect())
        .collect();
    let total = num_classes * samples_per_class;
    let mut raw_inputs = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % num_classes;
        raw_inputs.push(means[class].iter().map(|m| m + noise_scale * normal()).collect());
        labels.push(class);
    }
    Dataset::new(raw_inputs, labels, num_classes, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientSizes {
    Equal(usize),
    PerClient(Vec<usize>),
}

/// How to split a dataset across `num_clients` devices.
///
/// `skew` is the fraction of each client's quota drawn from its dominant
/// classes (`k mod C`, then `k+1 mod C`); the rest is drawn uniformly from
/// whatever is still unassigned. `skew = 0` is IID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub sizes: ClientSizes,
    pub skew: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn client_sizes(&self) -> Result<Vec<usize>> {
        match &self.sizes {
            ClientSizes::Equal(s) => Ok(vec![*s; self.num_clients]),
            ClientSizes::PerClient(v) if v.len() == self.num_clients => Ok(v.clone()),
            ClientSizes::PerClient(v) => Err(Error::Config(format!(
                "{} client sizes given for {} clients",
                v.len(),
                self.num_clients
            ))),
        }
    }
}

/// Draws the next not-yet-assigned index from `pool`, advancing `cursor`.
fn draw(pool: &[usize], cursor: &mut usize, used: &mut [bool]) -> Option<usize> {
    while *cursor < pool.len() {
        let i = pool[*cursor];
        *cursor += 1;
        if !used[i] {
            used[i] = true;
            return Some(i);
        }
    }
    None
}

/// Disjoint index sets, one per client, of exactly the requested sizes.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    if spec.num_clients == 0 {
        return Err(Error::Config("num_clients must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.skew) {
        return Err(Error::Config("skew must lie in [0, 1]".into()));
    }
    let sizes = spec.client_sizes()?;
    let requested: usize = sizes.iter().sum();
    if requested > dataset.len() {
        return Err(Error::Config(format!(
            "partition requests {requested} samples but the dataset has {}",
            dataset.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = dataset.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for pool in &mut by_class {
        pool.shuffle(&mut rng);
    }
    let mut everything: Vec<usize> = (0..dataset.len()).collect();
    everything.shuffle(&mut rng);

    let mut used = vec![false; dataset.len()];
    let mut class_cursor = vec![0usize; classes];
    let mut cursor = 0usize;
    let mut out = Vec::with_capacity(spec.num_clients);
    for (k, &quota) in sizes.iter().enumerate() {
        let dominant_quota = (spec.skew * quota as f64).round() as usize;
        let mut indices = Vec::with_capacity(quota);
        for class in [k % classes, (k + 1) % classes] {
            while indices.len() < dominant_quota {
                match draw(&by_class[class], &mut class_cursor[class], &mut used) {
                    Some(i) => indices.push(i),
                    None => break,
                }
            }
        }
        while indices.len() < quota {
            // The upfront size check guarantees the global pool suffices.
            let i = draw(&everything, &mut cursor, &mut used).expect("pool exhausted");
            indices.push(i);
        }
        out.push(indices);
    }
    Ok(out)
}
