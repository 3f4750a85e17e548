//! Class-statistics primitives and the isolation training objectives.
//!
//! The plain functions ([`center_distance`], [`cnp`], [`theta`], [`ctv`],
//! [`ch`]) evaluate the statistics on `f64` slices. [`ctv_loss`],
//! [`ch_loss`], and [`softmax_cross_entropy`] record the same arithmetic on a
//! [`Tape`] so gradients reach the trunk.
//!
//! Class means are batch means and stay differentiable. The per-class
//! isotropic variance used in the neighborhood term is
//! `max(CTV(c) / d, sigma_floor)`. The pairwise neighborhood sum skips
//! self-pairs.

use serde::{Deserialize, Serialize};

use crate::error::{GimError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;

/// Training objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ctv,
    Ch,
    Softmax,
}

impl LossKind {
    pub fn is_isolation(self) -> bool {
        !matches!(self, LossKind::Softmax)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ctv => "ctv",
            LossKind::Ch => "ch",
            LossKind::Softmax => "softmax",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = GimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctv" => Ok(LossKind::Ctv),
            "ch" => Ok(LossKind::Ch),
            "softmax" => Ok(LossKind::Softmax),
            other => Err(GimError::Config(format!(
                "unknown loss `{other}`, expected ctv, ch, or softmax"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the per-class spread term.
    pub lambda: f64,
    /// Widening constant of the neighborhood term; at least 1.
    pub alpha: f64,
    pub sigma_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            alpha: 100.0,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(GimError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(GimError::Config(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(GimError::Config(format!(
                "sigma_floor must be > 0, got {}",
                self.sigma_floor
            )));
        }
        Ok(())
    }
}

/// Row indices of one class inside a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRows {
    pub class: usize,
    pub rows: Vec<usize>,
}

/// Rows of a batch grouped by label. Only classes present in the batch get
/// a group; `num_classes` records how many the model expects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPartition {
    groups: Vec<ClassRows>,
    num_classes: usize,
    len: usize,
}

impl BatchPartition {
    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(GimError::Contract("empty batch".into()));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(GimError::Contract(format!(
                    "label {y} at row {i} is outside 0..{num_classes}"
                )));
            }
            by_class[y].push(i);
        }
        let groups = by_class
            .into_iter()
            .enumerate()
            .filter(|(_, rows)| !rows.is_empty())
            .map(|(class, rows)| ClassRows { class, rows })
            .collect();
        Ok(BatchPartition {
            groups,
            num_classes,
            len: labels.len(),
        })
    }

    pub fn groups(&self) -> &[ClassRows] {
        &self.groups
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of batch rows covered.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn require_all_classes(&self) -> Result<()> {
        if let Some(missing) = (0..self.num_classes).find(|c| self.groups.iter().all(|g| g.class != *c)) {
            return Err(GimError::Contract(format!("class {missing} is missing from the batch")));
        }
        Ok(())
    }

    fn check_rows(&self, outputs: &Tensor) -> Result<()> {
        if outputs.rows() != self.len {
            return Err(GimError::Contract(format!(
                "partition covers {} rows but outputs have {}",
                self.len,
                outputs.rows()
            )));
        }
        Ok(())
    }
}

/// `‖μ − z‖²`.
pub fn center_distance(z: &[f64], mu: &[f64]) -> f64 {
    debug_assert_eq!(z.len(), mu.len());
    z.iter().zip(mu).map(|(a, b)| (b - a) * (b - a)).sum()
}

/// Unnormalized affinity of class 1 toward class 2 under an isotropic
/// Gaussian of variance `sigma2_1` around `mu1`.
pub fn cnp(mu1: &[f64], mu2: &[f64], sigma2_1: f64) -> f64 {
    theta(mu1, mu2, sigma2_1, 1.0)
}

/// [`cnp`] with the variance widened by `alpha`.
pub fn theta(mu1: &[f64], mu2: &[f64], sigma2_1: f64, alpha: f64) -> f64 {
    (-center_distance(mu2, mu1) / (2.0 * alpha * sigma2_1)).exp()
}

fn class_rows_check(rows: &Tensor, mu: &[f64]) -> Result<()> {
    if rows.cols() != mu.len() {
        return Err(GimError::Shape(format!(
            "rows of width {} against a mean of length {}",
            rows.cols(),
            mu.len()
        )));
    }
    Ok(())
}

/// Mean squared distance of the rows from `mu`.
pub fn ctv(rows: &Tensor, mu: &[f64]) -> Result<f64> {
    class_rows_check(rows, mu)?;
    let n = rows.rows() as f64;
    Ok(rows.row_iter().map(|r| center_distance(r, mu)).sum::<f64>() / n)
}

/// Variance of the squared distances from `mu`.
pub fn ch(rows: &Tensor, mu: &[f64]) -> Result<f64> {
    let total = ctv(rows, mu)?;
    let n = rows.rows() as f64;
    Ok(rows
        .row_iter()
        .map(|r| {
            let e = total - center_distance(r, mu);
            e * e
        })
        .sum::<f64>()
        / n)
}

/// Differentiable per-class statistics for one batch.
pub struct ClassStats {
    pub class: usize,
    pub mean: Var,
    pub ctv: Var,
    pub ch: Var,
    pub sigma2: Var,
}

fn class_stats(tape: &mut Tape, outputs: Var, group: &ClassRows, sigma_floor: f64) -> Result<ClassStats> {
    let d = tape.value(outputs).cols();
    let n = group.rows.len();
    let rows = tape.select_rows(outputs, &group.rows)?;
    let mean = tape.col_mean(rows);
    let spread = tape.broadcast(mean, n, d)?;
    let centered = tape.sub(rows, spread)?;
    let sq = tape.square(centered);
    let dist = tape.row_sum(sq);
    let ctv = tape.mean(dist);
    let ctv_col = tape.broadcast(ctv, n, 1)?;
    let dev = tape.sub(ctv_col, dist)?;
    let dev2 = tape.square(dev);
    let ch = tape.mean(dev2);
    let per_dim = tape.mul_scalar(ctv, 1.0 / d as f64);
    let sigma2 = tape.clamp_min(per_dim, sigma_floor);
    Ok(ClassStats {
        class: group.class,
        mean,
        ctv,
        ch,
        sigma2,
    })
}

/// Records per-class statistics for every class present in `part`.
pub fn class_statistics(tape: &mut Tape, outputs: Var, part: &BatchPartition, sigma_floor: f64) -> Result<Vec<ClassStats>> {
    part.check_rows(tape.value(outputs))?;
    part.groups()
        .iter()
        .map(|g| class_stats(tape, outputs, g, sigma_floor))
        .collect()
}

/// Differentiable class means, one `1×d` slot per present class.
pub fn class_means(tape: &mut Tape, outputs: Var, part: &BatchPartition) -> Result<Vec<Var>> {
    part.check_rows(tape.value(outputs))?;
    part.groups()
        .iter()
        .map(|g| {
            let rows = tape.select_rows(outputs, &g.rows)?;
            Ok(tape.col_mean(rows))
        })
        .collect()
}

/// Differentiable `max(CTV(c)/d, floor)` for each present class, given the
/// means returned by [`class_means`].
pub fn class_sigma2(
    tape: &mut Tape,
    outputs: Var,
    part: &BatchPartition,
    means: &[Var],
    sigma_floor: f64,
) -> Result<Vec<Var>> {
    part.check_rows(tape.value(outputs))?;
    if means.len() != part.groups().len() {
        return Err(GimError::Contract(format!(
            "{} means for {} classes",
            means.len(),
            part.groups().len()
        )));
    }
    let d = tape.value(outputs).cols();
    part.groups()
        .iter()
        .zip(means)
        .map(|(g, &mean)| {
            let n = g.rows.len();
            let rows = tape.select_rows(outputs, &g.rows)?;
            let spread = tape.broadcast(mean, n, d)?;
            let centered = tape.sub(rows, spread)?;
            let sq = tape.square(centered);
            let ctv = tape.mean(sq);
            // mean over n·d entries is CTV/d
            Ok(tape.clamp_min(ctv, sigma_floor))
        })
        .collect()
}

fn theta_var(tape: &mut Tape, mu_c: Var, mu_l: Var, sigma2_c: Var, alpha: f64) -> Result<Var> {
    let diff = tape.sub(mu_c, mu_l)?;
    let sq = tape.square(diff);
    let dist = tape.sum(sq);
    let scale = tape.mul_scalar(sigma2_c, 2.0 * alpha);
    let ratio = tape.div(dist, scale)?;
    let neg = tape.neg(ratio);
    Ok(tape.exp(neg))
}

fn isolation_loss(
    tape: &mut Tape,
    outputs: Var,
    part: &BatchPartition,
    cfg: &LossConfig,
    kind: LossKind,
) -> Result<Var> {
    cfg.validate()?;
    part.require_all_classes()?;
    let stats = class_statistics(tape, outputs, part, cfg.sigma_floor)?;
    let c = part.num_classes() as f64;

    let mut spread: Option<Var> = None;
    for s in &stats {
        let term = match kind {
            LossKind::Ctv => s.ctv,
            LossKind::Ch => s.ch,
            LossKind::Softmax => unreachable!("not an isolation loss"),
        };
        spread = Some(match spread {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let spread = tape.mul_scalar(spread.expect("at least one class"), cfg.lambda / c);

    let mut neighborhood: Option<Var> = None;
    for a in &stats {
        for b in &stats {
            if a.class == b.class {
                continue;
            }
            let t = theta_var(tape, a.mean, b.mean, a.sigma2, cfg.alpha)?;
            neighborhood = Some(match neighborhood {
                Some(acc) => tape.add(acc, t)?,
                None => t,
            });
        }
    }
    match neighborhood {
        Some(n) => {
            let n = tape.mul_scalar(n, 1.0 / (c * c));
            tape.add(spread, n)
        }
        None => Ok(spread),
    }
}

/// `(λ/|C|) Σ_c CTV(c) + (1/|C|²) Σ_{c≠l} Θ(c,l)` over a batch of trunk
/// outputs. Every class must appear in the batch.
pub fn ctv_loss(tape: &mut Tape, outputs: Var, part: &BatchPartition, cfg: &LossConfig) -> Result<Var> {
    isolation_loss(tape, outputs, part, cfg, LossKind::Ctv)
}

/// As [`ctv_loss`] with the class homogeneity term in place of CTV.
pub fn ch_loss(tape: &mut Tape, outputs: Var, part: &BatchPartition, cfg: &LossConfig) -> Result<Var> {
    isolation_loss(tape, outputs, part, cfg, LossKind::Ch)
}

/// Mean negative log-softmax probability of the true class.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = {
        let l = tape.value(logits);
        (l.rows(), l.cols())
    };
    if labels.len() != n {
        return Err(GimError::Contract(format!("{} labels for {n} rows", labels.len())));
    }
    let mut mask = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(GimError::Contract(format!(
                "label {y} at row {i} is outside 0..{k}"
            )));
        }
        mask[i * k + y] = 1.0;
    }
    // Row maxima are shift constants: log-softmax is invariant to them.
    let maxes: Vec<f64> = tape
        .value(logits)
        .row_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let maxes = tape.constant(Tensor::from_parts(vec![n, 1], maxes));
    let maxes = tape.broadcast(maxes, n, k)?;
    let shifted = tape.sub(logits, maxes)?;
    let e = tape.exp(shifted);
    let z = tape.row_sum(e);
    let log_z = tape.ln(z);
    let mask = tape.constant(Tensor::from_parts(vec![n, k], mask));
    let picked = tape.mul(shifted, mask)?;
    let true_logit = tape.row_sum(picked);
    let nll = tape.sub(log_z, true_logit)?;
    Ok(tape.mean(nll))
}

/// Evaluates an isolation loss on plain outputs.
pub fn isolation_loss_value(outputs: &Tensor, labels: &[usize], num_classes: usize, cfg: &LossConfig, kind: LossKind) -> Result<f64> {
    let part = BatchPartition::from_labels(labels, num_classes)?;
    let mut tape = Tape::new();
    let out = tape.constant(outputs.clone());
    let loss = match kind {
        LossKind::Ctv => ctv_loss(&mut tape, out, &part, cfg)?,
        LossKind::Ch => ch_loss(&mut tape, out, &part, cfg)?,
        LossKind::Softmax => softmax_cross_entropy(&mut tape, out, labels)?,
    };
    Ok(tape.value(loss).item().unwrap())
}
