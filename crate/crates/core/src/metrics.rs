//! Detection and classification metrics.
//!
//! In-distribution samples are the positive class throughout, and a sample
//! is predicted positive when its score is at or above the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{GimError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSample {
    /// Higher means more in-distribution.
    pub score: f64,
    pub is_in_distribution: bool,
}

impl ScoredSample {
    pub fn new(score: f64, is_in_distribution: bool) -> Self {
        ScoredSample {
            score,
            is_in_distribution,
        }
    }
}

/// Builds a sample list from separate in- and out-of-distribution scores.
pub fn pool(in_scores: &[f64], out_scores: &[f64]) -> Vec<ScoredSample> {
    in_scores
        .iter()
        .map(|&s| ScoredSample::new(s, true))
        .chain(out_scores.iter().map(|&s| ScoredSample::new(s, false)))
        .collect()
}

/// Which class AUPR treats as positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positive {
    In,
    Out,
}

fn class_counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(GimError::NonFinite(format!("detection score {}", s.score)));
    }
    let pos = samples.iter().filter(|s| s.is_in_distribution).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(GimError::Contract(format!(
            "need both in- and out-of-distribution samples, got {pos} in and {neg} out"
        )));
    }
    Ok((pos, neg))
}

/// `(TP/(TP+FN), FP/(FP+TN))` at threshold `t`.
pub fn rates_at_threshold(samples: &[ScoredSample], t: f64) -> Result<(f64, f64)> {
    let (pos, neg) = class_counts(samples)?;
    let tp = samples.iter().filter(|s| s.is_in_distribution && s.score >= t).count();
    let fp = samples.iter().filter(|s| !s.is_in_distribution && s.score >= t).count();
    Ok((tp as f64 / pos as f64, fp as f64 / neg as f64))
}

/// Equal-prior detection error `0.5·(1−TPR) + 0.5·FPR`.
pub fn detection_error(tpr: f64, fpr: f64) -> f64 {
    0.5 * (1.0 - tpr) + 0.5 * fpr
}

/// Groups of tied scores in descending order: `(positives, negatives)`.
fn tie_groups_desc(samples: &[ScoredSample]) -> Vec<(usize, usize)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last: Option<f64> = None;
    for s in sorted {
        if last != Some(s.score) {
            groups.push((0, 0));
            last = Some(s.score);
        }
        let g = groups.last_mut().unwrap();
        if s.is_in_distribution {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random in-distribution score beats a random
/// out-of-distribution one, ties counting one half.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = class_counts(samples)?;
    let mut neg_below = neg as f64;
    let mut wins = 0.0;
    for (p, q) in tie_groups_desc(samples) {
        neg_below -= q as f64;
        wins += p as f64 * neg_below + 0.5 * (p * q) as f64;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-interpolated area under the precision–recall curve, one step per
/// distinct score.
pub fn aupr(samples: &[ScoredSample], positive: Positive) -> Result<f64> {
    let flipped: Vec<ScoredSample>;
    let samples = match positive {
        Positive::In => samples,
        Positive::Out => {
            flipped = samples
                .iter()
                .map(|s| ScoredSample::new(-s.score, !s.is_in_distribution))
                .collect();
            &flipped
        }
    };
    let (pos, _) = class_counts(samples)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (p, q) in tie_groups_desc(samples) {
        tp += p;
        fp += q;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(GimError::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(GimError::Contract("accuracy of an empty comparison".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// One detector evaluated on one (in-distribution, OOD) pairing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: String,
    pub threshold: f64,
    pub tpr_at_threshold: f64,
    pub fpr_at_threshold: f64,
    pub detection_error: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub accuracy: Option<f64>,
    /// Set when calibration saw identical scores everywhere.
    #[serde(default)]
    pub degenerate_threshold: bool,
}

impl EvalReport {
    pub fn compute(detector: &str, in_scores: &[f64], out_scores: &[f64], threshold: f64) -> Result<Self> {
        let samples = pool(in_scores, out_scores);
        let (tpr, fpr) = rates_at_threshold(&samples, threshold)?;
        Ok(EvalReport {
            detector: detector.to_string(),
            threshold,
            tpr_at_threshold: tpr,
            fpr_at_threshold: fpr,
            detection_error: detection_error(tpr, fpr),
            auroc: auroc(&samples)?,
            aupr_in: aupr(&samples, Positive::In)?,
            aupr_out: aupr(&samples, Positive::Out)?,
            accuracy: None,
            degenerate_threshold: false,
        })
    }

    pub const TABLE_HEADER: &'static str =
        "detector,threshold,tpr,fpr,detection_error,auroc,aupr_in,aupr_out,accuracy";

    pub fn table_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            self.detector,
            self.threshold,
            self.tpr_at_threshold,
            self.fpr_at_threshold,
            self.detection_error,
            self.auroc,
            self.aupr_in,
            self.aupr_out,
            self.accuracy.map_or(String::new(), |a| format!("{a:.4}"))
        )
    }
}
