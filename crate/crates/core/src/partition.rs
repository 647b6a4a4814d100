//! Per-domain class prototypes, the clean/noisy split, and nearest-prototype
//! label correction.
//!
//! Samples are referred to by their index inside their own domain. Every
//! refresh starts again from the labels stored in the dataset.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::DomainDataset;
use crate::error::{Error, Result};
use crate::geometry::{distance_coords, exp_map, hyperbolic_mean, norm, BallConfig, BallPoint};
use crate::model::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSpace {
    #[default]
    Hyperbolic,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub num_bins: usize,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self { num_bins: 32 }
    }
}

/// Right edge of the fullest of `num_bins` equal bins over `[min, max]`
/// (lowest bin on ties; exactly `max` for the last bin). All-equal input
/// yields `max + 1`, which marks everything clean.
pub fn mode_threshold(distances: &[f64], cfg: &ModeConfig) -> Result<f64> {
    if cfg.num_bins < 2 {
        return Err(Error::InvalidConfig(format!("num_bins must be >= 2, got {}", cfg.num_bins)));
    }
    if distances.is_empty() {
        return Err(Error::Empty("mode_threshold of no distances".into()));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("distance"));
    }
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let max = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(max + 1.0);
    }
    let bins = cfg.num_bins;
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &d in distances {
        let idx = (((d - min) / width).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let modal = counts
        .iter()
        .enumerate()
        .fold(0, |best, (i, &c)| if c > counts[best] { i } else { best });
    Ok(if modal == bins - 1 {
        max
    } else {
        min + (modal + 1) as f64 * width
    })
}

/// Maps a backbone embedding into the space prototypes live in.
pub fn map_point(z: &[f64], space: PrototypeSpace, ball: &BallConfig) -> Result<Vec<f64>> {
    match space {
        PrototypeSpace::Hyperbolic => Ok(exp_map(z, ball)?.into_coords()),
        PrototypeSpace::Euclidean => Ok(z.to_vec()),
    }
}

pub fn space_distance(a: &[f64], b: &[f64], space: PrototypeSpace, ball: &BallConfig) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    match space {
        PrototypeSpace::Hyperbolic => distance_coords(a, b, ball),
        PrototypeSpace::Euclidean => {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            Ok(norm(&diff))
        }
    }
}

fn space_mean(points: &[&[f64]], space: PrototypeSpace, ball: &BallConfig) -> Result<Vec<f64>> {
    match space {
        PrototypeSpace::Hyperbolic => {
            let pts: Vec<BallPoint> = points
                .iter()
                .map(|p| BallPoint::new(p.to_vec(), ball))
                .collect::<Result<_>>()?;
            Ok(hyperbolic_mean(&pts, ball)?.into_coords())
        }
        PrototypeSpace::Euclidean => {
            let mut acc = vec![0.0; points[0].len()];
            for p in points {
                acc.iter_mut().zip(*p).for_each(|(a, x)| *a += x);
            }
            let inv = 1.0 / points.len() as f64;
            Ok(acc.into_iter().map(|a| a * inv).collect())
        }
    }
}

/// Prototype centers and thresholds of one domain, keyed by class.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPrototypes {
    pub domain: String,
    pub centers: BTreeMap<usize, Vec<f64>>,
    pub thresholds: BTreeMap<usize, f64>,
}

impl DomainPrototypes {
    /// Groups mapped points by label, averages each group, and thresholds
    /// each group's distances to its own center. Returns the distances too.
    pub fn fit(
        domain: impl Into<String>,
        points: &[Vec<f64>],
        labels: &[usize],
        space: PrototypeSpace,
        ball: &BallConfig,
        mode: &ModeConfig,
    ) -> Result<(Self, Vec<f64>)> {
        if points.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                actual: labels.len(),
            });
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        let mut centers = BTreeMap::new();
        let mut thresholds = BTreeMap::new();
        let mut distances = vec![0.0; points.len()];
        for (&k, members) in &groups {
            let pts: Vec<&[f64]> = members.iter().map(|&i| points[i].as_slice()).collect();
            let center = space_mean(&pts, space, ball)?;
            let mut ds = Vec::with_capacity(members.len());
            for &i in members {
                let d = space_distance(&points[i], &center, space, ball)?;
                distances[i] = d;
                ds.push(d);
            }
            thresholds.insert(k, mode_threshold(&ds, mode)?);
            centers.insert(k, center);
        }
        Ok((
            Self {
                domain: domain.into(),
                centers,
                thresholds,
            },
            distances,
        ))
    }

    /// Class of the nearest center, lowest class index on ties.
    pub fn nearest(&self, point: &[f64], space: PrototypeSpace, ball: &BallConfig) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&k, center) in &self.centers {
            let d = space_distance(point, center, space, ball)?;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        best.map(|(k, _)| k)
            .ok_or_else(|| Error::Empty(format!("no prototypes for domain '{}'", self.domain)))
    }
}

/// Clean when the distance to the own-label center is strictly below that
/// center's threshold; samples whose label has no prototype are noisy.
pub fn split_clean_noisy(
    distances: &[f64],
    labels: &[usize],
    protos: &DomainPrototypes,
) -> (Vec<usize>, Vec<usize>) {
    (0..labels.len()).partition(|&i| {
        protos
            .thresholds
            .get(&labels[i])
            .is_some_and(|&t| distances[i] < t)
    })
}

pub fn correct_labels(
    points: &[&[f64]],
    protos: &DomainPrototypes,
    space: PrototypeSpace,
    ball: &BallConfig,
) -> Result<Vec<usize>> {
    if protos.centers.is_empty() {
        return Err(Error::Empty(format!("no prototypes for domain '{}'", protos.domain)));
    }
    points.iter().map(|p| protos.nearest(p, space, ball)).collect()
}

/// Clean/noisy split of one domain. `corrected[i]` is the relabel of `noisy[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPartition {
    pub domain: String,
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    pub corrected: Vec<usize>,
    pub distances: Vec<f64>,
}

/// Fits prototypes on mapped points and derives the split and corrections.
pub fn partition_points(
    domain: &str,
    points: &[Vec<f64>],
    labels: &[usize],
    space: PrototypeSpace,
    ball: &BallConfig,
    mode: &ModeConfig,
) -> Result<(DomainPrototypes, DomainPartition)> {
    let (protos, distances) = DomainPrototypes::fit(domain, points, labels, space, ball, mode)?;
    let (clean, noisy) = split_clean_noisy(&distances, labels, &protos);
    let noisy_points: Vec<&[f64]> = noisy.iter().map(|&i| points[i].as_slice()).collect();
    let corrected = correct_labels(&noisy_points, &protos, space, ball)?;
    Ok((
        protos,
        DomainPartition {
            domain: domain.to_string(),
            clean,
            noisy,
            corrected,
            distances,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    pub space: PrototypeSpace,
    pub domains: BTreeMap<String, DomainPrototypes>,
    pub computed_at_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub domains: BTreeMap<String, DomainPartition>,
}

impl Partition {
    pub fn domain(&self, name: &str) -> Result<&DomainPartition> {
        self.domains.get(name).ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    pub fn clean_count(&self) -> usize {
        self.domains.values().map(|d| d.clean.len()).sum()
    }

    pub fn noisy_count(&self) -> usize {
        self.domains.values().map(|d| d.noisy.len()).sum()
    }
}

/// Embeds every sample of every domain and partitions each domain on its own.
pub fn compute_partition(
    state: &ModelState,
    domains: &[DomainDataset],
    space: PrototypeSpace,
    ball: &BallConfig,
    mode: &ModeConfig,
    step: u64,
    threads: usize,
) -> Result<(PrototypeTable, Partition)> {
    let mut table = BTreeMap::new();
    let mut parts = BTreeMap::new();
    for d in domains {
        if d.is_empty() {
            log::warn!("domain '{}' has no training samples; skipping prototypes", d.name());
            continue;
        }
        let images: Vec<_> = d.samples().iter().map(|s| &s.image).collect();
        let embeddings = state.embed_images(&images, threads)?;
        let points = embeddings
            .iter()
            .map(|z| map_point(z, space, ball))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = d.samples().iter().map(|s| s.label).collect();
        let (protos, part) = partition_points(d.name(), &points, &labels, space, ball, mode)?;
        table.insert(d.name().to_string(), protos);
        parts.insert(d.name().to_string(), part);
    }
    Ok((
        PrototypeTable {
            space,
            domains: table,
            computed_at_step: step,
        },
        Partition { domains: parts },
    ))
}

#[derive(Serialize)]
struct PartitionRow<'a> {
    sample_id: &'a str,
    domain: &'a str,
    given_label: usize,
    distance: f64,
    threshold: f64,
    assignment: &'static str,
    corrected_label: Option<usize>,
}

/// Diagnostic dump with one row per partitioned sample.
pub fn write_partition_csv(
    path: &Path,
    domains: &[DomainDataset],
    table: &PrototypeTable,
    partition: &Partition,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for d in domains {
        let (Some(part), Some(protos)) = (partition.domains.get(d.name()), table.domains.get(d.name())) else {
            continue;
        };
        let corrected: BTreeMap<usize, usize> = part.noisy.iter().copied().zip(part.corrected.iter().copied()).collect();
        for (i, s) in d.samples().iter().enumerate() {
            let fix = corrected.get(&i).copied();
            w.serialize(PartitionRow {
                sample_id: &s.id,
                domain: d.name(),
                given_label: s.label,
                distance: part.distances[i],
                threshold: protos.thresholds.get(&s.label).copied().unwrap_or(f64::NAN),
                assignment: if fix.is_some() { "noisy" } else { "clean" },
                corrected_label: fix,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
