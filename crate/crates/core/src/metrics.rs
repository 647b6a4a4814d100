//! Open-set evaluation: closed-set accuracy, H-score, and OSCR.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax;
use crate::datasets::{DomainDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::model::ModelState;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sample_id: String,
    /// `None` marks a sample of an unknown class.
    pub truth: Option<usize>,
    /// Softmax mass on each known class; the extra class is left out.
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub confidence: f64,
}

impl EvalRecord {
    /// Softmax over all `C + 1` logits; prediction and confidence use the first `C`.
    pub fn from_logits(sample_id: impl Into<String>, truth: Option<usize>, logits: &[f64]) -> Self {
        let mut probs = softmax(logits);
        probs.truncate(logits.len().saturating_sub(1));
        let (predicted, confidence) = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best });
        Self {
            sample_id: sample_id.into(),
            truth,
            scores: probs,
            predicted,
            confidence,
        }
    }

    pub fn is_known(&self) -> bool {
        self.truth.is_some()
    }

    pub fn is_correct(&self) -> bool {
        self.truth == Some(self.predicted)
    }
}

/// Scores every test-domain sample. Known labels must be `0..C` with the
/// unknown classes above them, as produced by `make_split`.
pub fn score_test_set(
    state: &ModelState,
    test: &DomainDataset,
    split: &SplitSpec,
    threads: usize,
) -> Result<Vec<EvalRecord>> {
    if test.name() != split.test_domain {
        return Err(Error::InvalidArgument(format!(
            "scoring domain '{}' but the split holds out '{}'",
            test.name(),
            split.test_domain
        )));
    }
    if split.num_known() != state.config().num_known {
        return Err(Error::InvalidConfig(format!(
            "model has {} known classes, split has {}",
            state.config().num_known,
            split.num_known()
        )));
    }
    let images: Vec<_> = test.samples().iter().map(|s| &s.image).collect();
    let logits = state.logits_images(&images, threads)?;
    Ok(test
        .samples()
        .iter()
        .zip(&logits)
        .map(|(s, row)| {
            let truth = split.is_known(s.label).then_some(s.label);
            EvalRecord::from_logits(s.id.clone(), truth, row)
        })
        .collect())
}

fn populations(records: &[EvalRecord]) -> (Vec<&EvalRecord>, Vec<&EvalRecord>) {
    records.iter().partition(|r| r.is_known())
}

fn require_both(known: usize, unknown: usize) -> Result<()> {
    if known == 0 {
        return Err(Error::Empty("no known-class records".into()));
    }
    if unknown == 0 {
        return Err(Error::Empty("no unknown-class records".into()));
    }
    Ok(())
}

pub fn closed_set_accuracy(records: &[EvalRecord]) -> Result<f64> {
    let (known, _) = populations(records);
    if known.is_empty() {
        return Err(Error::Empty("no known-class records".into()));
    }
    Ok(known.iter().filter(|r| r.is_correct()).count() as f64 / known.len() as f64)
}

pub fn h_score(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    let (known, unknown) = populations(records);
    require_both(known.len(), unknown.len())?;
    let acc_k = known
        .iter()
        .filter(|r| r.is_correct() && r.confidence >= threshold)
        .count() as f64
        / known.len() as f64;
    let acc_u = unknown.iter().filter(|r| r.confidence < threshold).count() as f64 / unknown.len() as f64;
    Ok(if acc_k + acc_u == 0.0 {
        0.0
    } else {
        2.0 * acc_k * acc_u / (acc_k + acc_u)
    })
}

/// Maximum H-score over every threshold that can change the outcome.
pub fn best_h_score(records: &[EvalRecord]) -> Result<(f64, f64)> {
    let mut best = (h_score(records, 0.0)?, 0.0);
    let mut candidates: Vec<f64> = records.iter().map(|r| r.confidence).collect();
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    for theta in candidates {
        let h = h_score(records, theta)?;
        if h > best.0 {
            best = (h, theta);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub ccr: f64,
    pub fpr: f64,
}

/// `(threshold, CCR, FPR)` for the sentinels 0 and 1, every distinct
/// confidence, and a final `+inf` that rejects everything. Sorted by threshold.
pub fn oscr_curve(records: &[EvalRecord]) -> Result<Vec<CurvePoint>> {
    Ok(curve_counts(records)?
        .into_iter()
        .map(|(threshold, ccr, fpr, (k, u))| CurvePoint {
            threshold,
            ccr: ccr as f64 / k as f64,
            fpr: fpr as f64 / u as f64,
        })
        .collect())
}

type CountPoint = (f64, usize, usize, (usize, usize));

fn curve_counts(records: &[EvalRecord]) -> Result<Vec<CountPoint>> {
    let (known, unknown) = populations(records);
    require_both(known.len(), unknown.len())?;
    let mut correct: Vec<f64> = known.iter().filter(|r| r.is_correct()).map(|r| r.confidence).collect();
    let mut unk: Vec<f64> = unknown.iter().map(|r| r.confidence).collect();
    correct.sort_by(f64::total_cmp);
    unk.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = records.iter().map(|r| r.confidence).chain([0.0, 1.0, f64::INFINITY]).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let at_or_above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&c| c < t);
    Ok(thresholds
        .into_iter()
        .map(|t| (t, at_or_above(&correct, t), at_or_above(&unk, t), (known.len(), unknown.len())))
        .collect())
}

/// Area under CCR against FPR, by the trapezoid rule over [`oscr_curve`].
pub fn oscr(records: &[EvalRecord]) -> Result<f64> {
    let counts = curve_counts(records)?;
    let (k, u) = counts[0].3;
    let mut pts: Vec<(usize, usize)> = counts.iter().map(|p| (p.2, p.1)).collect();
    pts.sort_unstable();
    // Integer arithmetic until the final division keeps the area exact.
    let twice_area: u128 = pts
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0) * (w[0].1 + w[1].1)) as u128)
        .sum();
    Ok(twice_area as f64 / (2.0 * u as f64 * k as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub h_score_at_threshold: f64,
    pub h_score_best: f64,
    pub oscr: f64,
    pub threshold_used: f64,
    pub n_known: usize,
    pub n_unknown: usize,
}

pub fn report(records: &[EvalRecord], threshold: f64) -> Result<MetricsReport> {
    let (known, unknown) = populations(records);
    Ok(MetricsReport {
        acc: closed_set_accuracy(records)?,
        h_score_at_threshold: h_score(records, threshold)?,
        h_score_best: best_h_score(records)?.0,
        oscr: oscr(records)?,
        threshold_used: threshold,
        n_known: known.len(),
        n_unknown: unknown.len(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfidenceRow {
    sample_id: String,
    population: String,
    confidence: f64,
    predicted: usize,
    #[serde(rename = "true")]
    truth: String,
}

/// Rows `sample_id, population, confidence, predicted, true`; unknown samples have `true = unknown`.
pub fn export_confidences(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(ConfidenceRow {
            sample_id: r.sample_id.clone(),
            population: if r.is_known() { "known" } else { "unknown" }.into(),
            confidence: r.confidence,
            predicted: r.predicted,
            truth: r.truth.map_or_else(|| "unknown".into(), |t| t.to_string()),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a confidences file back. Score vectors are not stored, so they come back empty.
pub fn import_confidences(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|row| {
            let row: ConfidenceRow = row?;
            let truth = match row.population.as_str() {
                "known" => Some(
                    row.truth
                        .parse()
                        .map_err(|_| Error::format(path, format!("bad class '{}'", row.truth)))?,
                ),
                "unknown" => None,
                other => return Err(Error::format(path, format!("bad population '{other}'"))),
            };
            Ok(EvalRecord {
                sample_id: row.sample_id,
                truth,
                scores: Vec::new(),
                predicted: row.predicted,
                confidence: row.confidence,
            })
        })
        .collect()
}

pub fn export_curve(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in oscr_curve(records)? {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
