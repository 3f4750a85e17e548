//! Mini-batch training for both isolation losses and the softmax baseline.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GimError, Result};
use crate::gaussian::{fit_gaussians_from_outputs, GimModel, INFER_CHUNK};
use crate::losses::{ch_loss, ctv_loss, softmax_cross_entropy, BatchPartition, LossConfig, LossKind, DEFAULT_SIGMA_FLOOR};
use crate::metrics::accuracy;
use crate::model::{Model, SoftmaxModel};
use crate::tape::Tape;
use crate::trunk::{TrunkGrads, TrunkParams, TrunkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub lambda: f64,
    pub alpha: f64,
    pub sigma_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Ctv,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            lambda: 1.0,
            alpha: 100.0,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            sigma_floor: self.sigma_floor,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(GimError::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GimError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < num_classes {
            return Err(GimError::Config(format!(
                "batch_size {} is smaller than the {num_classes} classes",
                self.batch_size
            )));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(GimError::Config(format!(
                    "adam needs 0 <= beta < 1 and eps > 0, got ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        if self.loss.is_isolation() && num_classes < 2 {
            return Err(GimError::Config("isolation losses need at least two classes".into()));
        }
        self.loss_config().validate()
    }
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(theta: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in theta.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Bias-corrected Adam update; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
}

/// Optimizer moments for every trunk tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &TrunkParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .layers()
            .iter()
            .flat_map(|l| [vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]])
            .collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut TrunkParams, grads: &TrunkGrads, opt: Optimizer, lr: f64) {
        self.step += 1;
        let t = self.step;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.update(grads, |k, p, g| match opt {
            Optimizer::Sgd => sgd_step(p, g, lr),
            Optimizer::Adam { beta1, beta2, eps } => adam_step(p, g, &mut ms[k], &mut vs[k], t, lr, beta1, beta2, eps),
        });
    }
}

/// One epoch of index batches in which every batch holds every class.
///
/// Batches have `batch_size` rows; a final smaller batch of the remaining
/// rows is kept only if it can hold one row per class. Each batch is seeded
/// with one row of every class and filled from the shuffled remainder, so
/// with enough rows per class each row appears exactly once. Batches that
/// still miss a class (a class rarer than the batch count) are dropped.
pub fn stratified_batches(labels: &[usize], num_classes: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let n = labels.len();
    if num_classes == 0 || batch_size < num_classes || n < num_classes {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![batch_size; n / batch_size];
    let r = n % batch_size;
    if r >= num_classes {
        sizes.push(r);
    }
    let nb = sizes.len();

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        per_class[y].push(i);
    }
    let mut batches: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    let mut pool = Vec::with_capacity(n);
    for rows in &mut per_class {
        rows.shuffle(&mut rng);
        let k = rows.len().min(nb);
        for (b, &i) in rows[..k].iter().enumerate() {
            batches[b].push(i);
        }
        pool.extend_from_slice(&rows[k..]);
    }
    pool.shuffle(&mut rng);
    let mut pool = pool.into_iter();
    for (batch, &size) in batches.iter_mut().zip(&sizes) {
        while batch.len() < size {
            match pool.next() {
                Some(i) => batch.push(i),
                None => break,
            }
        }
        batch.shuffle(&mut rng);
    }
    batches.retain(|b| {
        let mut seen = vec![false; num_classes];
        for &i in b {
            seen[labels[i]] = true;
        }
        seen.iter().all(|&s| s)
    });
    batches
}

/// Per-epoch sampler seed, derived from the run seed.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Cumulative wall-clock seconds since training started.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,loss,train_acc,test_acc[,seconds]`. Leave the timing column out
    /// for output that must be reproducible byte for byte.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut s = String::from("epoch,loss,train_acc,test_acc");
        s.push_str(if with_seconds { ",seconds\n" } else { "\n" });
        for r in &self.records {
            let test = r.test_acc.map_or(String::new(), |a| a.to_string());
            let _ = write!(s, "{},{},{},{}", r.epoch, r.loss, r.train_acc, test);
            if with_seconds {
                let _ = write!(s, ",{:.3}", r.seconds);
            }
            s.push('\n');
        }
        s
    }

    /// `epoch,seconds`.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:.3}", r.epoch, r.seconds);
        }
        s
    }
}

/// The trunk actually trained for `kind`: GIM losses use `spec` unchanged,
/// the softmax baseline appends a `d → |C|` logit layer.
pub fn trunk_spec_for(spec: &TrunkSpec, kind: LossKind, num_classes: usize) -> TrunkSpec {
    match kind {
        LossKind::Softmax => spec.with_classifier(num_classes),
        _ => spec.clone(),
    }
}

/// Accuracy of `trunk` on `data`: Gaussians fitted to `fit_on` for GIM
/// losses, argmax of the logits for softmax.
fn evaluate(trunk: &TrunkParams, kind: LossKind, fit_on: &Dataset, fit_outputs: &crate::tensor::Tensor, data: &[&Dataset], floor: f64) -> Result<Vec<f64>> {
    match kind {
        LossKind::Softmax => data
            .iter()
            .map(|d| {
                let logits = if std::ptr::eq(*d, fit_on) {
                    fit_outputs.clone()
                } else {
                    trunk.infer_chunked(d.features(), INFER_CHUNK)?
                };
                let pred: Vec<usize> = logits
                    .row_iter()
                    .map(|l| {
                        let mut best = 0;
                        for (i, &v) in l.iter().enumerate() {
                            if v > l[best] {
                                best = i;
                            }
                        }
                        best
                    })
                    .collect();
                accuracy(&pred, d.labels())
            })
            .collect(),
        _ => {
            let gaussians = fit_gaussians_from_outputs(fit_outputs, fit_on.labels(), fit_on.num_classes(), floor)?;
            let model = GimModel::new(trunk.clone(), gaussians, kind)?;
            data.iter()
                .map(|d| {
                    let outputs = if std::ptr::eq(*d, fit_on) {
                        fit_outputs.clone()
                    } else {
                        trunk.infer_chunked(d.features(), INFER_CHUNK)?
                    };
                    let pred = outputs.row_iter().map(|z| model.predict(z).map(|p| p.class)).collect::<Result<Vec<_>>>()?;
                    accuracy(&pred, d.labels())
                })
                .collect()
        }
    }
}

fn check_test(train: &Dataset, test: Option<&Dataset>) -> Result<()> {
    if let Some(t) = test {
        if t.feature_dim() != train.feature_dim() || t.num_classes() != train.num_classes() {
            return Err(GimError::Contract(format!(
                "test set has {} features / {} classes, training set {} / {}",
                t.feature_dim(),
                t.num_classes(),
                train.feature_dim(),
                train.num_classes()
            )));
        }
    }
    Ok(())
}

/// Trains a trunk from `spec` on `data`. Equivalent to
/// [`train_with_eval`] without a test set.
pub fn train(spec: &TrunkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(TrunkParams, TrainHistory)> {
    train_with_eval(spec, data, None, cfg)
}

/// Trains a trunk, recording train (and optionally test) accuracy after
/// every epoch. The result is a deterministic function of the inputs.
pub fn train_with_eval(spec: &TrunkSpec, data: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(TrunkParams, TrainHistory)> {
    let c = data.num_classes();
    cfg.validate(c)?;
    check_test(data, test)?;
    if spec.input_dim() != data.feature_dim() {
        return Err(GimError::Contract(format!(
            "trunk expects {} input features but data has {}",
            spec.input_dim(),
            data.feature_dim()
        )));
    }
    let mut trunk = trunk_spec_for(spec, cfg.loss, c).init(cfg.seed)?;
    let mut state = OptimizerState::new(&trunk);
    let loss_cfg = cfg.loss_config();
    let mut history = TrainHistory::default();
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let batches = stratified_batches(data.labels(), c, cfg.batch_size, epoch_seed(cfg.seed, epoch));
        if batches.is_empty() {
            return Err(GimError::Contract(format!(
                "{} rows cannot fill a batch holding all {c} classes",
                data.len()
            )));
        }
        let mut total = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let x = data.features().select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let mut tape = Tape::new();
            let fwd = trunk.forward(&mut tape, &x)?;
            let loss = match cfg.loss {
                LossKind::Softmax => softmax_cross_entropy(&mut tape, fwd.output, &y)?,
                kind => {
                    let part = BatchPartition::from_labels(&y, c)?;
                    if kind == LossKind::Ctv {
                        ctv_loss(&mut tape, fwd.output, &part, &loss_cfg)?
                    } else {
                        ch_loss(&mut tape, fwd.output, &part, &loss_cfg)?
                    }
                }
            };
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(GimError::Diverged {
                    epoch,
                    step: step + 1,
                    loss: value,
                });
            }
            total += value;
            let grads = fwd.grads(&tape.backward(loss)?);
            state.apply(&mut trunk, &grads, cfg.optimizer, cfg.learning_rate);
        }

        let outputs = trunk.infer_chunked(data.features(), INFER_CHUNK)?;
        if !outputs.is_finite() {
            return Err(GimError::Diverged {
                epoch,
                step: batches.len(),
                loss: f64::NAN,
            });
        }
        let mut sets = vec![data];
        sets.extend(test);
        let acc = evaluate(&trunk, cfg.loss, data, &outputs, &sets, cfg.sigma_floor)?;
        history.records.push(EpochRecord {
            epoch,
            loss: total / batches.len() as f64,
            train_acc: acc[0],
            test_acc: acc.get(1).copied(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((trunk, history))
}

/// A trained, uncalibrated model plus its training history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
}

/// Trains and wraps the result: Gaussians fitted on the full training set
/// for GIM losses, a logit classifier for softmax.
pub fn train_model(spec: &TrunkSpec, data: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (trunk, history) = train_with_eval(spec, data, test, cfg)?;
    let model = match cfg.loss {
        LossKind::Softmax => Model::Softmax(SoftmaxModel::new(trunk)?),
        kind => Model::Gim(GimModel::fit(trunk, data, kind, cfg.sigma_floor)?),
    };
    Ok(TrainOutcome { model, history })
}

/// Trains one model per loss kind from the same seed, data, and trunk spec.
pub fn compare(spec: &TrunkSpec, data: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig, kinds: &[LossKind]) -> Result<Vec<(LossKind, TrainOutcome)>> {
    if kinds.len() < 2 || kinds.iter().enumerate().any(|(i, k)| kinds[..i].contains(k)) {
        return Err(GimError::Config(format!(
            "compare needs at least two distinct losses, got {kinds:?}"
        )));
    }
    kinds
        .iter()
        .map(|&loss| {
            let cfg = TrainConfig { loss, ..cfg.clone() };
            Ok((loss, train_model(spec, data, test, &cfg)?))
        })
        .collect()
}

/// `epoch,<kind>_train_acc,<kind>_test_acc,...` for convergence plots.
pub fn convergence_csv(results: &[(LossKind, TrainOutcome)]) -> String {
    let mut s = String::from("epoch");
    for (k, _) in results {
        let _ = write!(s, ",{k}_loss,{k}_train_acc,{k}_test_acc");
    }
    s.push('\n');
    let epochs = results.iter().map(|(_, o)| o.history.len()).max().unwrap_or(0);
    for e in 0..epochs {
        let _ = write!(s, "{}", e + 1);
        for (_, o) in results {
            match o.history.records.get(e) {
                Some(r) => {
                    let test = r.test_acc.map_or(String::new(), |a| a.to_string());
                    let _ = write!(s, ",{},{},{}", r.loss, r.train_acc, test);
                }
                None => s.push_str(",,,"),
            }
        }
        s.push('\n');
    }
    s
}
