//! Trained classifiers and their on-disk format.
//!
//! A model file is a JSON document:
//!
//! ```json
//! {"format": "gim-model", "version": 1, "model": {"kind": "gim", ...}}
//! ```
//!
//! `kind` is `"gim"` (trunk, per-class Gaussians, threshold, loss tag) or
//! `"softmax"` (trunk ending in a class-logit layer, threshold on the
//! maximum softmax probability). Unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GimError, Result};
use crate::gaussian::{max_softmax_confidence, threshold_for_tpr, Calibration, GimModel, INFER_CHUNK};
use crate::tensor::Tensor;
use crate::trunk::TrunkParams;

pub const MODEL_FORMAT: &str = "gim-model";
pub const MODEL_VERSION: u32 = 1;

/// Conventional classifier used as the max-softmax baseline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SoftmaxModel {
    trunk: TrunkParams,
    threshold: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSoftmaxModel {
    trunk: TrunkParams,
    threshold: Option<f64>,
}

impl<'de> Deserialize<'de> for SoftmaxModel {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = RawSoftmaxModel::deserialize(de)?;
        let mut m = SoftmaxModel::new(raw.trunk).map_err(serde::de::Error::custom)?;
        if let Some(t) = raw.threshold {
            m.set_threshold(t).map_err(serde::de::Error::custom)?;
        }
        Ok(m)
    }
}

impl SoftmaxModel {
    /// `trunk` must end in one logit per class.
    pub fn new(trunk: TrunkParams) -> Result<Self> {
        if trunk.output_dim() < 2 {
            return Err(GimError::Contract("a softmax classifier needs at least two classes".into()));
        }
        Ok(SoftmaxModel { trunk, threshold: None })
    }

    pub fn trunk(&self) -> &TrunkParams {
        &self.trunk
    }

    pub fn num_classes(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn set_threshold(&mut self, t: f64) -> Result<()> {
        if !t.is_finite() {
            return Err(GimError::NonFinite("OOD threshold".into()));
        }
        self.threshold = Some(t);
        Ok(())
    }

    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        self.trunk.infer_chunked(inputs, INFER_CHUNK)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Gim(GimModel),
    Softmax(SoftmaxModel),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    model: Model,
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Gim(_) => "gim",
            Model::Softmax(_) => "softmax",
        }
    }

    pub fn trunk(&self) -> &TrunkParams {
        match self {
            Model::Gim(m) => m.trunk(),
            Model::Softmax(m) => m.trunk(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk().input_dim()
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Gim(m) => m.num_classes(),
            Model::Softmax(m) => m.num_classes(),
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match self {
            Model::Gim(m) => m.ood_threshold(),
            Model::Softmax(m) => m.threshold(),
        }
    }

    /// Name of the OOD score this model produces.
    pub fn detector_name(&self) -> &'static str {
        match self {
            Model::Gim(_) => "gim-confidence",
            Model::Softmax(_) => "max-softmax",
        }
    }

    fn check_inputs(&self, inputs: &Tensor) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(GimError::Contract(format!(
                "model expects {} input features but data has {}",
                self.input_dim(),
                inputs.cols()
            )));
        }
        Ok(())
    }

    /// Per-row `(predicted class, OOD score)`; higher scores are more
    /// in-distribution.
    pub fn classify(&self, inputs: &Tensor) -> Result<Vec<(usize, f64)>> {
        self.check_inputs(inputs)?;
        match self {
            Model::Gim(m) => Ok(m.predict_inputs(inputs)?.into_iter().map(|p| (p.class, p.confidence)).collect()),
            Model::Softmax(m) => Ok(m
                .logits(inputs)?
                .row_iter()
                .map(|l| (argmax(l), max_softmax_confidence(l)))
                .collect()),
        }
    }

    pub fn scores(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        Ok(self.classify(inputs)?.into_iter().map(|(_, s)| s).collect())
    }

    pub fn predict_classes(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        Ok(self.classify(inputs)?.into_iter().map(|(c, _)| c).collect())
    }

    /// Sets the threshold so that `target_tpr` of `train` scores at or above it.
    pub fn calibrate(&mut self, train: &Dataset, target_tpr: f64) -> Result<Calibration> {
        let scores = self.scores(train.features())?;
        let cal = threshold_for_tpr(&scores, target_tpr)?;
        match self {
            Model::Gim(m) => m.set_threshold(cal.threshold)?,
            Model::Softmax(m) => m.set_threshold(cal.threshold)?,
        }
        Ok(cal)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        serde_json::to_string(&file).map_err(|e| GimError::Model(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Check the envelope first so a wrong or future file gets a clear message.
        let head: serde_json::Value = serde_json::from_str(text).map_err(|e| GimError::Model(e.to_string()))?;
        match head.get("format").and_then(|f| f.as_str()) {
            Some(MODEL_FORMAT) => {}
            other => {
                return Err(GimError::Model(format!(
                    "expected format \"{MODEL_FORMAT}\", found {other:?}"
                )))
            }
        }
        match head.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(MODEL_VERSION) => {}
            other => {
                return Err(GimError::Model(format!(
                    "unsupported model version {other:?}, this build reads version {MODEL_VERSION}"
                )))
            }
        }
        let file: ModelFile = serde_json::from_str(text).map_err(|e| GimError::Model(e.to_string()))?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| GimError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GimError::io(path, e))?;
        Model::from_json(&text).map_err(|e| match e {
            GimError::Model(msg) => GimError::Model(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
