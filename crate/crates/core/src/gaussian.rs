//! Per-class diagonal Gaussians over trunk outputs.
//!
//! After training, one Gaussian is fitted per class over the whole training
//! set. The maximum per-class log-likelihood of an output is its
//! *confidence*; outputs whose confidence falls below a threshold calibrated
//! on training data are flagged out-of-distribution. Classification is the
//! argmax of log-likelihood plus log-prior.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GimError, Result};
use crate::losses::LossKind;
use crate::tensor::Tensor;
use crate::trunk::TrunkParams;

/// Rows per chunk when pushing whole datasets through a trunk.
pub(crate) const INFER_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassGaussian {
    pub mean: Vec<f64>,
    pub var_diag: Vec<f64>,
    pub count: usize,
    pub log_prior: f64,
}

impl ClassGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Log-density of `z` under `g`.
pub fn log_likelihood(z: &[f64], g: &ClassGaussian) -> f64 {
    debug_assert_eq!(z.len(), g.mean.len());
    let d = z.len() as f64;
    let mut log_det = 0.0;
    let mut maha = 0.0;
    for ((&zj, &mj), &vj) in z.iter().zip(&g.mean).zip(&g.var_diag) {
        log_det += vj.ln();
        let e = zj - mj;
        maha += e * e / vj;
    }
    -0.5 * d * (2.0 * PI).ln() - 0.5 * log_det - 0.5 * maha
}

/// Fits one Gaussian per class from precomputed trunk outputs.
pub fn fit_gaussians_from_outputs(
    outputs: &Tensor,
    labels: &[usize],
    num_classes: usize,
    sigma_floor: f64,
) -> Result<Vec<ClassGaussian>> {
    if labels.is_empty() {
        return Err(GimError::Contract("cannot fit Gaussians to an empty dataset".into()));
    }
    if outputs.rows() != labels.len() {
        return Err(GimError::Contract(format!(
            "{} outputs for {} labels",
            outputs.rows(),
            labels.len()
        )));
    }
    let d = outputs.cols();
    let mut counts = vec![0usize; num_classes];
    let mut sums = vec![vec![0.0; d]; num_classes];
    for (row, &y) in outputs.row_iter().zip(labels) {
        if y >= num_classes {
            return Err(GimError::Contract(format!("label {y} outside 0..{num_classes}")));
        }
        counts[y] += 1;
        for (s, &v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(GimError::Contract(format!("class {empty} has no samples")));
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    // Second pass for the variances keeps cancellation error small.
    let mut sq = vec![vec![0.0; d]; num_classes];
    for (row, &y) in outputs.row_iter().zip(labels) {
        for ((s, &v), &m) in sq[y].iter_mut().zip(row).zip(&means[y]) {
            *s += (v - m) * (v - m);
        }
    }
    let total = labels.len() as f64;
    Ok(means
        .into_iter()
        .zip(sq)
        .zip(&counts)
        .map(|((mean, sq), &n)| ClassGaussian {
            mean,
            var_diag: sq.into_iter().map(|s| (s / n as f64).max(sigma_floor)).collect(),
            count: n,
            log_prior: (n as f64 / total).ln(),
        })
        .collect())
}

/// Runs `trunk` over `data` and fits one Gaussian per class.
pub fn fit_gaussians(trunk: &TrunkParams, data: &Dataset, sigma_floor: f64) -> Result<Vec<ClassGaussian>> {
    let outputs = trunk.infer_chunked(data.features(), INFER_CHUNK)?;
    fit_gaussians_from_outputs(&outputs, data.labels(), data.num_classes(), sigma_floor)
}

/// Result of classifying one trunk output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    /// Maximum per-class log-likelihood.
    pub confidence: f64,
    /// Unnormalized log posteriors, one per class.
    pub scores: Vec<f64>,
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Outcome of threshold calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub target_tpr: f64,
    /// True when every calibration score was identical.
    pub degenerate: bool,
}

/// The largest `t` such that at least `target_tpr` of `scores` are `>= t`.
pub fn threshold_for_tpr(scores: &[f64], target_tpr: f64) -> Result<Calibration> {
    if !(target_tpr > 0.0 && target_tpr < 1.0) {
        return Err(GimError::Contract(format!(
            "target TPR must lie in (0, 1), got {target_tpr}"
        )));
    }
    if scores.is_empty() {
        return Err(GimError::Contract("no scores to calibrate on".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(GimError::NonFinite(format!("calibration score {bad}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let (lo, hi) = (sorted[n - 1], sorted[0]);
    if lo == hi {
        return Ok(Calibration {
            threshold: lo - 1e-9,
            target_tpr,
            degenerate: true,
        });
    }
    // smallest k with k/n >= target; the k-th largest score admits exactly
    // the top k (plus ties)
    let k = ((target_tpr * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(Calibration {
        threshold: sorted[k.min(n) - 1],
        target_tpr,
        degenerate: false,
    })
}

/// Numerically stable maximum softmax probability.
pub fn max_softmax_confidence(logits: &[f64]) -> f64 {
    assert!(!logits.is_empty(), "max-softmax of empty logits");
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    1.0 / z
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GimModel {
    trunk: TrunkParams,
    gaussians: Vec<ClassGaussian>,
    ood_threshold: Option<f64>,
    loss_kind: LossKind,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGimModel {
    trunk: TrunkParams,
    gaussians: Vec<ClassGaussian>,
    ood_threshold: Option<f64>,
    loss_kind: LossKind,
}

impl<'de> Deserialize<'de> for GimModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawGimModel::deserialize(d)?;
        let mut m = GimModel::new(raw.trunk, raw.gaussians, raw.loss_kind).map_err(serde::de::Error::custom)?;
        if let Some(t) = raw.ood_threshold {
            if !t.is_finite() {
                return Err(serde::de::Error::custom("threshold must be finite"));
            }
            m.ood_threshold = Some(t);
        }
        Ok(m)
    }
}

impl GimModel {
    pub fn new(trunk: TrunkParams, gaussians: Vec<ClassGaussian>, loss_kind: LossKind) -> Result<Self> {
        if !loss_kind.is_isolation() {
            return Err(GimError::Contract("a Gaussian model needs the ctv or ch loss".into()));
        }
        if gaussians.is_empty() {
            return Err(GimError::Contract("model has no classes".into()));
        }
        let d = trunk.output_dim();
        for (c, g) in gaussians.iter().enumerate() {
            if g.mean.len() != d || g.var_diag.len() != d {
                return Err(GimError::Shape(format!(
                    "class {c} Gaussian has dimension {} but the trunk emits {d}",
                    g.mean.len()
                )));
            }
            if g.var_diag.iter().any(|v| !(*v > 0.0 && v.is_finite())) || g.mean.iter().any(|m| !m.is_finite()) {
                return Err(GimError::Contract(format!("class {c} Gaussian has invalid parameters")));
            }
            if !(g.log_prior <= 0.0 && g.log_prior.is_finite()) || g.count == 0 {
                return Err(GimError::Contract(format!("class {c} has an invalid prior")));
            }
        }
        let total: f64 = gaussians.iter().map(|g| g.log_prior.exp()).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GimError::Contract(format!("class priors sum to {total}")));
        }
        Ok(GimModel {
            trunk,
            gaussians,
            ood_threshold: None,
            loss_kind,
        })
    }

    /// Fits Gaussians for `trunk` on `data`; the threshold is left unset.
    pub fn fit(trunk: TrunkParams, data: &Dataset, loss_kind: LossKind, sigma_floor: f64) -> Result<Self> {
        let gaussians = fit_gaussians(&trunk, data, sigma_floor)?;
        GimModel::new(trunk, gaussians, loss_kind)
    }

    pub fn trunk(&self) -> &TrunkParams {
        &self.trunk
    }

    pub fn gaussians(&self) -> &[ClassGaussian] {
        &self.gaussians
    }

    pub fn num_classes(&self) -> usize {
        self.gaussians.len()
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn ood_threshold(&self) -> Option<f64> {
        self.ood_threshold
    }

    pub fn set_threshold(&mut self, t: f64) -> Result<()> {
        if !t.is_finite() {
            return Err(GimError::NonFinite("OOD threshold".into()));
        }
        self.ood_threshold = Some(t);
        Ok(())
    }

    fn check_output(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.trunk.output_dim() {
            return Err(GimError::Shape(format!(
                "output of length {} for a {}-dimensional model",
                z.len(),
                self.trunk.output_dim()
            )));
        }
        Ok(())
    }

    /// Maximum over classes of the log-likelihood of trunk output `z`.
    pub fn confidence(&self, z: &[f64]) -> Result<f64> {
        self.check_output(z)?;
        Ok(self
            .gaussians
            .iter()
            .map(|g| log_likelihood(z, g))
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Bayes-rule prediction for trunk output `z`; ties go to the lowest class.
    pub fn predict(&self, z: &[f64]) -> Result<Prediction> {
        self.check_output(z)?;
        let lls: Vec<f64> = self.gaussians.iter().map(|g| log_likelihood(z, g)).collect();
        let confidence = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scores: Vec<f64> = lls.iter().zip(&self.gaussians).map(|(ll, g)| ll + g.log_prior).collect();
        Ok(Prediction {
            class: argmax_lowest(&scores),
            confidence,
            scores,
        })
    }

    /// Runs the trunk over raw inputs and predicts every row.
    pub fn predict_inputs(&self, inputs: &Tensor) -> Result<Vec<Prediction>> {
        let out = self.trunk.infer_chunked(inputs, INFER_CHUNK)?;
        out.row_iter().map(|z| self.predict(z)).collect()
    }

    /// Confidences of every row of `inputs`.
    pub fn confidences(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        let out = self.trunk.infer_chunked(inputs, INFER_CHUNK)?;
        out.row_iter().map(|z| self.confidence(z)).collect()
    }

    /// Sets the threshold so that `target_tpr` of `train` scores at or above it.
    pub fn calibrate_threshold(&mut self, train: &Dataset, target_tpr: f64) -> Result<Calibration> {
        let scores = self.confidences(train.features())?;
        let cal = threshold_for_tpr(&scores, target_tpr)?;
        self.ood_threshold = Some(cal.threshold);
        Ok(cal)
    }

    /// True when the confidence of trunk output `z` is below the threshold.
    pub fn is_ood(&self, z: &[f64]) -> Result<bool> {
        let t = self
            .ood_threshold
            .ok_or_else(|| GimError::Contract("model threshold is not calibrated".into()))?;
        Ok(self.confidence(z)? < t)
    }
}
