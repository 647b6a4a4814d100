//! Seeded label corruption for source-domain training labels.

use std::collections::HashMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::DomainDataset;
use crate::error::{Error, Result};
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

/// Square class-similarity matrix over the known classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    names: Vec<String>,
    values: Vec<f64>,
}

impl Similarity {
    /// Clips to `[0, inf)`, zeroes the diagonal and symmetrizes as `(M + Mᵀ)/2`.
    pub fn from_matrix(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = names.len();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument(format!(
                "similarity matrix must be {n}x{n} to match its class names"
            )));
        }
        if rows.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("similarity matrix"));
        }
        let at = |i: usize, j: usize| rows[i][j].max(0.0);
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values[i * n + j] = (at(i, j) + at(j, i)) / 2.0;
                }
            }
        }
        Ok(Self { names, values })
    }

    /// Adjacent class indices get weight 1, classes two apart 0.25, others 0.
    pub fn banded(names: Vec<String>) -> Self {
        let n = names.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = match i.abs_diff(j) {
                    1 => 1.0,
                    2 => 0.25,
                    _ => 0.0,
                };
            }
        }
        Self { names, values }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for i in 0..self.len() {
            w.write_record(self.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a similarity CSV whose header must list `expected_names` in order.
pub fn load_similarity(path: &Path, expected_names: &[String]) -> Result<Similarity> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != expected_names {
        return Err(Error::format(
            path,
            format!("header {header:?} does not match class names {expected_names:?}"),
        ));
    }
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|cell| {
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(path, format!("row {}: '{cell}' is not a number", r + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Similarity::from_matrix(header, rows).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
    pub seed: u64,
    pub similarity: Option<Similarity>,
}

impl NoiseSpec {
    pub fn symmetric(ratio: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            ratio,
            seed,
            similarity: None,
        }
    }

    pub fn asymmetric(ratio: f64, seed: u64, similarity: Similarity) -> Self {
        Self {
            kind: NoiseKind::Asymmetric,
            ratio,
            seed,
            similarity: Some(similarity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub sample_id: String,
    pub clean_label: usize,
    pub noisy_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLedger {
    pub entries: Vec<LedgerEntry>,
    pub achieved_ratio: f64,
}

impl NoiseLedger {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.entries.is_empty() {
            w.write_record(["sample_id", "clean_label", "noisy_label"])?;
        }
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Flips exactly `round(ratio·N)` labels, chosen uniformly without replacement
/// over the concatenation of `domains` in order. Labels must lie in `0..num_known`.
pub fn inject(
    domains: &[DomainDataset],
    num_known: usize,
    spec: &NoiseSpec,
) -> Result<(Vec<DomainDataset>, NoiseLedger)> {
    if !(0.0..=1.0).contains(&spec.ratio) {
        return Err(Error::InvalidArgument(format!("noise ratio {} outside [0, 1]", spec.ratio)));
    }
    if num_known < 2 {
        return Err(Error::InvalidArgument("label noise needs at least two known classes".into()));
    }
    let flat: Vec<(usize, usize)> = domains
        .iter()
        .enumerate()
        .flat_map(|(d, ds)| (0..ds.len()).map(move |i| (d, i)))
        .collect();
    for &(d, i) in &flat {
        let label = domains[d].samples()[i].label;
        if label >= num_known {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_known,
            });
        }
    }
    let samplers = match spec.kind {
        NoiseKind::Symmetric => None,
        NoiseKind::Asymmetric => {
            let sim = spec
                .similarity
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("asymmetric noise requires a similarity matrix".into()))?;
            if sim.len() != num_known {
                return Err(Error::InvalidConfig(format!(
                    "similarity matrix covers {} classes, expected {num_known}",
                    sim.len()
                )));
            }
            let rows = (0..num_known)
                .map(|k| {
                    WeightedIndex::new(sim.row(k)).map_err(|_| {
                        Error::InvalidConfig(format!(
                            "similarity row for class {k} ('{}') has no positive off-diagonal weight",
                            sim.names()[k]
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(rows)
        }
    };
    let n = flat.len();
    let count = (spec.ratio * n as f64).round() as usize;
    let mut rng = SeedTree::new(spec.seed).stream("label-noise");
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();

    let mut flips: HashMap<(usize, usize), usize> = HashMap::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    for pos in chosen {
        let (d, i) = flat[pos];
        let sample = &domains[d].samples()[i];
        let clean = sample.label;
        let noisy = match &samplers {
            None => {
                let r = rng.random_range(0..num_known - 1);
                if r >= clean {
                    r + 1
                } else {
                    r
                }
            }
            Some(rows) => rows[clean].sample(&mut rng),
        };
        debug_assert_ne!(noisy, clean);
        flips.insert((d, i), noisy);
        entries.push(LedgerEntry {
            sample_id: sample.id.clone(),
            clean_label: clean,
            noisy_label: noisy,
        });
    }
    let perturbed = domains
        .iter()
        .enumerate()
        .map(|(d, ds)| {
            let mut i = 0;
            ds.map_labels(|s| {
                let label = flips.get(&(d, i)).copied().unwrap_or(s.label);
                i += 1;
                label
            })
        })
        .collect();
    let achieved_ratio = if n == 0 { 0.0 } else { count as f64 / n as f64 };
    Ok((
        perturbed,
        NoiseLedger {
            entries,
            achieved_ratio,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    domain: String,
    sample_id: String,
    label: usize,
}

/// Writes the labels the trainer will see: `domain, sample_id, label`.
pub fn write_label_table(path: &Path, domains: &[DomainDataset]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for d in domains {
        for s in d.samples() {
            w.serialize(LabelRow {
                domain: d.name().to_string(),
                sample_id: s.id.clone(),
                label: s.label,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Replaces labels in `domains` by those in a label table. Every sample must be listed.
pub fn apply_label_table(path: &Path, domains: &[DomainDataset]) -> Result<Vec<DomainDataset>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut table: HashMap<(String, String), usize> = HashMap::new();
    for row in reader.deserialize() {
        let row: LabelRow = row?;
        table.insert((row.domain, row.sample_id), row.label);
    }
    domains
        .iter()
        .map(|d| {
            let mut missing = None;
            let out = d.map_labels(|s| match table.get(&(d.name().to_string(), s.id.clone())) {
                Some(&l) => l,
                None => {
                    missing.get_or_insert_with(|| s.id.clone());
                    s.label
                }
            });
            match missing {
                Some(id) => Err(Error::format(
                    path,
                    format!("no label for sample '{id}' of domain '{}'", d.name()),
                )),
                None => Ok(out),
            }
        })
        .collect()
}
